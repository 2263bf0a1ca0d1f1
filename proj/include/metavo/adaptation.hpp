#pragma once

#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "metavo/data_io.hpp"
#include "metavo/losses.hpp"
#include "metavo/networks.hpp"

namespace metavo {

/// The online mini-dataset D_i: exactly N consecutive frames.
struct SlidingWindow {
  std::vector<Frame> frames;
  Intrinsics intrinsics;
  int index = 0;

  int length() const { return static_cast<int>(frames.size()); }
  void validate() const;
};

struct OptimConfig {
  double alpha = 1e-4;           // inner and outer learning rate
  int schedule_interval = 5000;  // halve every this many iterations
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;
  double adam_epsilon = 1e-8;
  double weight_decay = 4e-4;  // decoupled, outer step only
  int batch_train = 4;
  int batch_online = 1;
  bool second_order = false;
  double inner_alpha = -1.0;  // >= 0 pins the inner rate; < 0 follows the shared schedule

  void validate() const;
  double lr_at(std::int64_t iteration) const;
  double inner_lr_at(std::int64_t iteration) const {
    return inner_alpha >= 0.0 ? inner_alpha : lr_at(iteration);
  }
};

// ---- parameter vectors ----

using ParamVec = std::vector<Tensor>;

ParamVec snapshot_params(const NamedParams& params);
void assign_params(NamedParams& params, const ParamVec& values);
ParamVec axpy(const ParamVec& x, double a, const ParamVec& y);  // x + a*y
double vec_dot(const ParamVec& a, const ParamVec& b);
double vec_norm(const ParamVec& a);
bool vec_finite(const ParamVec& a);

/// A differentiable scalar function of a parameter vector. The adaptation
/// operators are written against this interface so the same code drives both
/// the VO model and analytic toy problems.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual double loss(const ParamVec& theta) = 0;
  virtual std::pair<double, ParamVec> loss_and_grad(const ParamVec& theta) = 0;
};

/// L(theta) = sum_i c_i * theta_i^2.
class QuadraticObjective : public Objective {
 public:
  explicit QuadraticObjective(ParamVec coefficients) : coeff_(std::move(coefficients)) {}
  double loss(const ParamVec& theta) override;
  std::pair<double, ParamVec> loss_and_grad(const ParamVec& theta) override;

 private:
  ParamVec coeff_;
};

// ---- window evaluation ----

/// Test-only injection hook: replaces network predictions with fixed values.
struct PredictionOverride {
  const std::vector<DepthMap>* depths = nullptr;  // one per window frame
  const std::vector<PoseSE3>* poses = nullptr;    // one per pair
};

struct WindowEval {
  double total = 0.0;
  double appearance = 0.0;
  double photometric = 0.0;  // unweighted (1-a)*L1 + a*(1-SSIM)/2 over valid pixels
  bool degenerate = false;   // every pair had no valid pixels
  std::vector<PoseSE3> pair_poses;  // T^{t-1}_t per consecutive pair
  engine::Var loss_var;             // graph root
};

/// Runs the full self-supervised pipeline over one window: resets state,
/// predicts depth/pose/mask per pair, synthesizes each frame and returns the
/// mean total loss. `ctx` decides the statistics mode and ablation toggles.
WindowEval window_loss(const VoModel& model, const SlidingWindow& window, const LossWeights& w,
                       const ForwardContext& ctx, const PredictionOverride* override_pred = nullptr);

/// Objective adapter for window_loss on a concrete model.
class WindowObjective : public Objective {
 public:
  WindowObjective(VoModel& model, const SlidingWindow& window, LossWeights weights,
                  ForwardContext ctx)
      : model_(model), window_(window), weights_(weights), ctx_(ctx) {}

  double loss(const ParamVec& theta) override;
  std::pair<double, ParamVec> loss_and_grad(const ParamVec& theta) override;
  WindowEval eval_at(const ParamVec& theta);

 private:
  VoModel& model_;
  const SlidingWindow& window_;
  LossWeights weights_;
  ForwardContext ctx_;
};

// ---- the learning operators ----

struct StepResult {
  ParamVec theta;
  double loss = std::numeric_limits<double>::quiet_NaN();
  bool skipped = false;  // non-finite gradient; theta unchanged
};

/// One plain gradient step on `objective`; exactly theta - alpha * grad.
StepResult naive_online_step(Objective& objective, const ParamVec& theta, double alpha);

/// Loss of the inner-updated parameters on the next window.
double meta_objective(Objective& inner, Objective& outer, const ParamVec& theta, double alpha,
                      bool second_order = false);

struct MetaGradient {
  double inner_loss = 0.0, outer_loss = 0.0;
  ParamVec inner_grad, outer_grad;
  ParamVec grad;  // d meta_objective / d theta
  bool skipped = false;
};

/// First-order gradient is the outer gradient at the adapted parameters;
/// second-order subtracts alpha * H(inner) * outer_grad, with the
/// Hessian-vector product computed by central differences of the inner
/// gradient (exact for quadratics).
MetaGradient meta_gradient(Objective& inner, Objective& outer, const ParamVec& theta, double alpha,
                           bool second_order);

struct GradientAlignment {
  double dot = 0.0;
  double cosine = 0.0;
  double norm_i = 0.0, norm_j = 0.0;
};

/// <grad L(theta, D_i), grad L(theta, D_{i+1})>, both at the same theta.
GradientAlignment gradient_alignment(Objective& a, Objective& b, const ParamVec& theta);

/// Decoupled-weight-decay Adam for the outer/meta update.
class AdamW {
 public:
  AdamW(const OptimConfig& cfg, const NamedParams& params);

  void step(NamedParams& params, const ParamVec& grad, double lr);
  std::int64_t step_count() const { return step_; }

  // checkpoint plumbing
  const ParamVec& m() const { return m_; }
  const ParamVec& v() const { return v_; }
  void restore(std::int64_t step, ParamVec m, ParamVec v);

 private:
  OptimConfig cfg_;
  std::int64_t step_ = 0;
  ParamVec m_, v_;
};

// ---- training ----

struct TrainLogRow {
  std::int64_t iteration = 0;  // 1-based
  double inner_loss = 0.0;
  double outer_loss = std::numeric_limits<double>::quiet_NaN();  // NaN for standard runs
  double grad_cosine = std::numeric_limits<double>::quiet_NaN();
  double lr = 0.0;
  double wall_ms = 0.0;
};

struct TrainOptions {
  std::int64_t iterations = 20000;
  bool meta = true;  // false: standard training on D_{i+1}
  int window_n = 9;
  LossWeights loss;
  AlignConfig align;
  OptimConfig optim;
};

/// Meta-training (Eq. 3 over consecutive window pairs) or standard training,
/// sampling uniformly over all valid (sequence, start) pairs. Accumulates the
/// source statistics F_s as an EMA over the final 1000 iterations.
/// `start_iteration` > 0 resumes a run; `rng` and `opt` carry its state.
std::vector<TrainLogRow> meta_train(
    const std::vector<SequenceDataset>& data, VoModel& model, AdamW& opt, Rng& rng,
    const TrainOptions& options, std::int64_t start_iteration = 0,
    const std::function<void(const TrainLogRow&)>& on_iteration = nullptr);

// ---- online adaptation ----

enum class OnlineMode { kNone, kNaive, kMeta };

OnlineMode online_mode_from_string(const std::string& s);
std::string to_string(OnlineMode m);

struct AdaptationReport {
  int window = 0;
  double total_loss = 0.0;
  double appearance_loss = 0.0;
  double photometric_loss = 0.0;
  double inner_loss = std::numeric_limits<double>::quiet_NaN();
  double outer_loss = std::numeric_limits<double>::quiet_NaN();
  double grad_dot = std::numeric_limits<double>::quiet_NaN();
  double grad_cosine = std::numeric_limits<double>::quiet_NaN();
  double wall_ms = 0.0;
  bool degenerate = false;
  bool skipped = false;
};

struct OnlineOptions {
  OnlineMode mode = OnlineMode::kMeta;
  int window_n = 9;
  LossWeights loss;
  AlignConfig align;
  OptimConfig optim;
  bool no_lstm = false;
  bool no_fa = false;
};

struct OnlineResult {
  std::vector<PoseSE3> relative_poses;  // one per consecutive frame pair
  std::vector<double> pose_timestamps;
  std::vector<AdaptationReport> reports;  // one per full window
  bool stream_too_short = false;
};

/// Strict-FIFO frame source consumed by online adaptation.
class FrameStream {
 public:
  virtual ~FrameStream() = default;
  virtual std::optional<Frame> next() = 0;
  virtual const Intrinsics& intrinsics() const = 0;
  virtual double timestamp(int frame_index) const = 0;
};

class DatasetStream : public FrameStream {
 public:
  explicit DatasetStream(const SequenceDataset& data) : data_(data) {}
  std::optional<Frame> next() override {
    if (pos_ >= data_.frames.size()) return std::nullopt;
    return data_.frames[pos_++];
  }
  const Intrinsics& intrinsics() const override { return data_.intrinsics; }
  double timestamp(int frame_index) const override {
    return data_.timestamps[static_cast<std::size_t>(frame_index)];
  }

 private:
  const SequenceDataset& data_;
  std::size_t pos_ = 0;
};

/// Poses are emitted from the forward pass at frame arrival, before any
/// weight update for that window. In meta mode the update applied at window
/// i comes from the (D_{i-1}, D_i) pair (the most recent completed one).
OnlineResult online_adapt(FrameStream& stream, VoModel& model, const OnlineOptions& options);

}  // namespace metavo
