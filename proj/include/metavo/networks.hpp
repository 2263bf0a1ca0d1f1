#pragma once

#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "metavo/engine.hpp"
#include "metavo/feature_alignment.hpp"
#include "metavo/geometry.hpp"
#include "metavo/rng.hpp"

namespace metavo {

// bounded positive depth: d = 1 / (a * sigmoid(x) + b)
constexpr double kDepthSigmoidScale = 10.0;
constexpr double kDepthSigmoidOffset = 0.01;
constexpr double kPoseRotationScale = 0.01;

struct ArchitectureConfig {
  std::vector<int> widths = {16, 32, 64};  // encoder widths, at least 3 levels
  int lstm_hidden = 32;
  int pose_head_hidden = 32;
  int input_height = 128;
  int input_width = 416;

  void validate() const;
  static ArchitectureConfig tiny() { return {}; }
  static ArchitectureConfig base() {
    ArchitectureConfig c;
    c.widths = {32, 64, 128, 256, 512, 512};
    c.lstm_hidden = 256;
    c.pose_head_hidden = 256;
    return c;
  }
  bool operator==(const ArchitectureConfig&) const = default;
};

enum class StatsMode { kInstant, kAligned };

/// Accumulates instantaneous layer statistics across forward passes
/// (used for the source-domain EMA and per-window logging).
class StatsCollector {
 public:
  void add(const std::string& layer, const FeatureStats& s) {
    auto& e = acc_[layer];
    e.mu += s.mu;
    e.sigma2 += s.sigma2;
    e.count += 1;
  }
  std::map<std::string, FeatureStats> means() const {
    std::map<std::string, FeatureStats> out;
    for (const auto& [name, e] : acc_)
      out[name] = {e.mu / e.count, e.sigma2 / e.count};
    return out;
  }
  void clear() { acc_.clear(); }

 private:
  struct Entry {
    double mu = 0, sigma2 = 0;
    int count = 0;
  };
  std::map<std::string, Entry> acc_;
};

/// Per-forward configuration: which statistics the normalization layers use
/// and the ablation toggles.
struct ForwardContext {
  StatsMode stats_mode = StatsMode::kInstant;
  bool no_fa = false;    // force instantaneous statistics (beta = 1 per tensor)
  bool no_lstm = false;  // zeroed, detached recurrent state
  double beta = 0.5;
  double epsilon = 1e-5;
  FeatureStatsStore* aligned = nullptr;     // required in kAligned mode
  std::set<std::string>* frozen = nullptr;  // layers already Eq.-9-updated this window
  StatsCollector* collect = nullptr;
};

using NamedParams = std::vector<std::pair<std::string, engine::Var>>;

namespace detail {

struct ParamHost {
  NamedParams* params = nullptr;
  Rng* rng = nullptr;
};

class Conv {
 public:
  Conv() = default;
  Conv(ParamHost host, const std::string& name, int in_ch, int out_ch, int k, int stride,
       bool zero_init = false);
  engine::Var forward(const engine::Var& x) const;
  int out_channels() const { return out_ch_; }

 private:
  engine::Var w_, b_;
  int stride_ = 1, pad_ = 1, out_ch_ = 0;
};

class NormLayer {
 public:
  NormLayer() = default;
  NormLayer(ParamHost host, const std::string& name, int channels);
  engine::Var forward(const engine::Var& x, const ForwardContext& ctx) const;
  const std::string& name() const { return name_; }

 private:
  std::string name_;
  engine::Var gamma_, delta_;
};

class Fc {
 public:
  Fc() = default;
  Fc(ParamHost host, const std::string& name, int in, int out, bool zero_init = false);
  engine::Var forward(const engine::Var& x) const;

 private:
  engine::Var w_, b_;
};

}  // namespace detail

/// Convolutional LSTM cell; gates are one 3x3 convolution over [input; h].
class ConvLstmCell {
 public:
  ConvLstmCell() = default;
  ConvLstmCell(detail::ParamHost host, const std::string& name, int in_ch, int hidden);

  /// h and c may be null (treated as zeros matching x's spatial size).
  std::pair<engine::Var, engine::Var> step(const engine::Var& x, engine::Var h,
                                           engine::Var c) const;
  int hidden() const { return hidden_; }

 private:
  detail::Conv gates_;
  int hidden_ = 0;
};

/// Recurrent state for one sliding window (depth and pose cells), plus the
/// window position index in [0, N).
struct RecurrentState {
  engine::Var depth_h, depth_c;
  engine::Var pose_h, pose_c;
  int window_pos = 0;
  int window_len = 0;
};

/// DepthNet + PoseNet + MaskNet sharing one parameter list and one set of
/// feature statistics.
class VoModel {
 public:
  VoModel(ArchitectureConfig config, std::uint64_t seed);

  const ArchitectureConfig& config() const { return config_; }
  NamedParams& params() { return params_; }
  const NamedParams& params() const { return params_; }
  std::int64_t param_count() const;

  /// Zeroed state at window position 0.
  RecurrentState reset_state(int window_len) const;

  /// U-shaped depth regression; advances the depth convLSTM and the window
  /// index. Output strictly inside (1/(a+b), 1/b).
  engine::Var depth_forward(const engine::Var& frame, RecurrentState& state,
                            const ForwardContext& ctx) const;

  /// Relative pose from the stacked pair (two RGB frames + two depth maps).
  /// Returns ({3} euler radians, {3} translation).
  std::pair<engine::Var, engine::Var> pose_forward(const engine::Var& frame_prev,
                                                   const engine::Var& frame_cur,
                                                   const engine::Var& depth_prev,
                                                   const engine::Var& depth_cur,
                                                   RecurrentState& state,
                                                   const ForwardContext& ctx) const;

  /// Explainability mask from the per-pixel photometric residual.
  engine::Var mask_forward(const engine::Var& residual, const ForwardContext& ctx) const;

  /// Names of every normalized layer (stable order).
  const std::vector<std::string>& norm_layer_names() const { return norm_names_; }

  FeatureStatsStore source_stats;   // F_s, accumulated during training
  FeatureStatsStore aligned_stats;  // F_i during online adaptation

 private:
  ArchitectureConfig config_;
  NamedParams params_;
  std::vector<std::string> norm_names_;

  struct Level {
    detail::Conv conv;
    detail::NormLayer norm;
  };

  // depth net
  std::vector<Level> d_enc_;
  ConvLstmCell d_lstm_;
  std::vector<Level> d_up_, d_merge_;
  Level d_full_;
  detail::Conv d_out_;

  // pose net
  std::vector<Level> p_enc_;
  ConvLstmCell p_lstm_;
  Level p_trunk_;
  detail::Fc p_rot_fc1_, p_rot_fc2_, p_tr_fc1_, p_tr_fc2_;
  detail::NormLayer p_rot_norm_, p_tr_norm_;

  // mask net
  Level m_conv1_, m_conv2_;
  detail::Conv m_out_;

  engine::Var encode(const std::vector<Level>& enc, const ConvLstmCell& lstm, engine::Var x,
                     engine::Var& h, engine::Var& c, std::vector<engine::Var>* skips,
                     const ForwardContext& ctx) const;
};

/// Serialized model + training bookkeeping. `format_version` guards layout
/// changes; Adam state and the RNG stream make training resumable.
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  ArchitectureConfig arch;
  std::vector<std::pair<std::string, Tensor>> params;
  std::map<std::string, FeatureStats> source_stats;
  std::int64_t iteration = 0;
  std::string rng_state;
  std::string train_objective;  // "meta" or "standard", informational

  bool has_adam = false;
  std::int64_t adam_step = 0;
  std::vector<Tensor> adam_m, adam_v;  // aligned with params order
};

Checkpoint snapshot_model(const VoModel& model);
void restore_model(VoModel& model, const Checkpoint& ckpt);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Builds a model from a checkpoint; throws DataError with a shape/version
/// diff report when `expected` does not match the stored architecture.
VoModel model_from_checkpoint(const Checkpoint& ckpt, const ArchitectureConfig* expected = nullptr);

}  // namespace metavo
