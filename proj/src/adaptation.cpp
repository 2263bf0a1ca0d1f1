#include "metavo/adaptation.hpp"

#include <chrono>
#include <cmath>

namespace metavo {

namespace eg = engine;

namespace {
double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}
}  // namespace

void SlidingWindow::validate() const {
  if (frames.size() < 2) throw DomainError("sliding window needs at least 2 frames");
  for (std::size_t k = 1; k < frames.size(); ++k)
    if (frames[k].timestamp != frames[k - 1].timestamp + 1)
      throw DomainError("sliding window frames must be consecutive");
  intrinsics.validate();
}

void OptimConfig::validate() const {
  if (!(alpha > 0)) throw DomainError("optim: alpha must be positive");
  if (schedule_interval <= 0) throw DomainError("optim: schedule interval must be positive");
  if (adam_beta1 < 0 || adam_beta1 >= 1 || adam_beta2 < 0 || adam_beta2 >= 1)
    throw DomainError("optim: adam betas must be in [0,1)");
  if (weight_decay < 0) throw DomainError("optim: weight decay must be >= 0");
  if (batch_train < 1) throw DomainError("optim: batch_train must be >= 1");
  if (batch_online != 1) throw DomainError("optim: only batch_online = 1 is supported");
}

double OptimConfig::lr_at(std::int64_t iteration) const {
  const std::int64_t halvings = iteration / schedule_interval;
  return alpha * std::pow(0.5, static_cast<double>(halvings));
}

// ---- parameter vectors ----

ParamVec snapshot_params(const NamedParams& params) {
  ParamVec out;
  out.reserve(params.size());
  for (const auto& [name, v] : params) out.push_back(v->value);
  return out;
}

void assign_params(NamedParams& params, const ParamVec& values) {
  if (params.size() != values.size()) throw DomainError("assign_params: size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].second->value.same_shape(values[i]))
      throw DomainError("assign_params: shape mismatch at " + params[i].first);
    params[i].second->value = values[i];
  }
}

ParamVec axpy(const ParamVec& x, double a, const ParamVec& y) {
  if (x.size() != y.size()) throw DomainError("axpy: size mismatch");
  ParamVec out = x;
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::int64_t j = 0; j < out[i].size(); ++j) out[i][j] += a * y[i][j];
  return out;
}

double vec_dot(const ParamVec& a, const ParamVec& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::int64_t j = 0; j < a[i].size(); ++j) acc += a[i][j] * b[i][j];
  return acc;
}

double vec_norm(const ParamVec& a) { return std::sqrt(vec_dot(a, a)); }

bool vec_finite(const ParamVec& a) {
  for (const Tensor& t : a)
    if (!t.all_finite()) return false;
  return true;
}

// ---- quadratic toy ----

double QuadraticObjective::loss(const ParamVec& theta) {
  double acc = 0;
  for (std::size_t i = 0; i < theta.size(); ++i)
    for (std::int64_t j = 0; j < theta[i].size(); ++j)
      acc += coeff_[i][j] * theta[i][j] * theta[i][j];
  return acc;
}

std::pair<double, ParamVec> QuadraticObjective::loss_and_grad(const ParamVec& theta) {
  ParamVec grad = theta;
  for (std::size_t i = 0; i < theta.size(); ++i)
    for (std::int64_t j = 0; j < theta[i].size(); ++j)
      grad[i][j] = 2.0 * coeff_[i][j] * theta[i][j];
  return {loss(theta), std::move(grad)};
}

// ---- window loss ----

namespace {

// channel-mean L1 residual, zeroed where warping carries no signal
eg::Var masked_residual(const eg::Var& recon, const eg::Var& target, const Tensor& validity) {
  const eg::Var diff = eg::abs_(eg::sub(recon, target));
  const eg::Var sum3 = eg::add(eg::add(eg::slice_ch(diff, 0, 1), eg::slice_ch(diff, 1, 2)),
                               eg::slice_ch(diff, 2, 3));
  return eg::mul_tensor(eg::mul_const(sum3, 1.0 / 3.0), validity);
}

// unweighted photometric reconstruction error over valid pixels; comparable
// across models because the learned mask does not enter
double photometric_value(const Tensor& recon, const Frame& target, const Tensor& validity,
                         const LossWeights& w) {
  const double nv = validity.sum();
  if (nv == 0) return std::numeric_limits<double>::quiet_NaN();
  const eg::Var ssim =
      ssim_map_graph(eg::constant(recon), eg::constant(target.pixels), w.ssim_window);
  const int H = recon.dim(1), W = recon.dim(2);
  double acc = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (validity.at(0, y, x) == 0.0) continue;
      double l1 = 0;
      for (int c = 0; c < 3; ++c) l1 += std::fabs(recon.at(c, y, x) - target.pixels.at(c, y, x));
      l1 /= 3.0;
      acc += (1.0 - w.alpha_s) * l1 + w.alpha_s * (1.0 - ssim->value.at(0, y, x)) * 0.5;
    }
  return acc / nv;
}

}  // namespace

WindowEval window_loss(const VoModel& model, const SlidingWindow& window, const LossWeights& w,
                       const ForwardContext& ctx, const PredictionOverride* override_pred) {
  window.validate();
  const int n = window.length();
  RecurrentState state = model.reset_state(n);

  std::vector<eg::Var> frames, depths;
  frames.reserve(static_cast<std::size_t>(n));
  for (const Frame& f : window.frames) frames.push_back(eg::constant(f.pixels));
  for (int t = 0; t < n; ++t) {
    if (override_pred && override_pred->depths) {
      depths.push_back(eg::constant((*override_pred->depths)[static_cast<std::size_t>(t)].values));
      state.window_pos += 1;
    } else {
      depths.push_back(model.depth_forward(frames[static_cast<std::size_t>(t)], state, ctx));
    }
  }

  WindowEval out;
  eg::Var loss_acc, appearance_acc;
  int degenerate_pairs = 0;
  double photo_acc = 0.0;
  int photo_pairs = 0;

  for (int t = 1; t < n; ++t) {
    const eg::Var& target = frames[static_cast<std::size_t>(t)];
    const eg::Var& source = frames[static_cast<std::size_t>(t - 1)];
    const eg::Var& depth_t = depths[static_cast<std::size_t>(t)];

    SynthesisGraph synth;
    if (override_pred && override_pred->poses) {
      // inject a fixed pose through a constant rotation path
      const PoseSE3& p = (*override_pred->poses)[static_cast<std::size_t>(t - 1)];
      out.pair_poses.push_back(p);
      Tensor tr({3});
      for (int i = 0; i < 3; ++i) tr[i] = p.translation(i);
      std::array<eg::Var, 9> rot;
      for (int i = 0; i < 9; ++i) rot[i] = eg::constant_scalar(p.rotation(i / 3, i % 3));
      WarpGraph warp = backproject_warp_graph(depth_t, rot, eg::constant(tr), window.intrinsics);
      synth.image = eg::bilinear_sample(source, warp.coords, warp.valid);
      const int H = window.frames[0].pixels.dim(1), W = window.frames[0].pixels.dim(2);
      synth.validity_mask = Tensor({1, H, W});
      for (std::int64_t i = 0; i < synth.validity_mask.size(); ++i)
        synth.validity_mask[i] = warp.valid[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
      synth.valid = std::move(warp.valid);
    } else {
      auto [euler, trans] = model.pose_forward(source, target,
                                               depths[static_cast<std::size_t>(t - 1)], depth_t,
                                               state, ctx);
      out.pair_poses.push_back(pose_from_euler(euler->value[0], euler->value[1], euler->value[2],
                                               {trans->value[0], trans->value[1],
                                                trans->value[2]}));
      synth = synthesize_view_graph(source, depth_t, euler, trans, window.intrinsics);
    }

    const eg::Var residual = masked_residual(synth.image, target, synth.validity_mask);
    const eg::Var mask = model.mask_forward(residual, ctx);

    const LossTerm appearance = appearance_loss_graph(synth.image, target, mask,
                                                      synth.validity_mask, w);
    const eg::Var smooth = smoothness_loss_graph(depth_t, target->value);
    const eg::Var pair_total = eg::add(eg::mul_const(appearance.value, w.lambda_a),
                                       eg::mul_const(smooth, w.lambda_r));
    if (appearance.degenerate) ++degenerate_pairs;

    loss_acc = loss_acc ? eg::add(loss_acc, pair_total) : pair_total;
    appearance_acc = appearance_acc ? eg::add(appearance_acc, appearance.value) : appearance.value;

    const double photo = photometric_value(synth.image->value,
                                           window.frames[static_cast<std::size_t>(t)],
                                           synth.validity_mask, w);
    if (std::isfinite(photo)) {
      photo_acc += photo;
      ++photo_pairs;
    }
  }

  out.loss_var = eg::mul_const(loss_acc, 1.0 / (n - 1));
  out.total = eg::scalar(out.loss_var);
  out.appearance = eg::scalar(appearance_acc) / (n - 1);
  out.photometric =
      photo_pairs > 0 ? photo_acc / photo_pairs : std::numeric_limits<double>::quiet_NaN();
  out.degenerate = degenerate_pairs == n - 1;
  return out;
}

double WindowObjective::loss(const ParamVec& theta) {
  const ParamVec saved = snapshot_params(model_.params());
  assign_params(model_.params(), theta);
  const WindowEval e = window_loss(model_, window_, weights_, ctx_);
  assign_params(model_.params(), saved);
  return e.total;
}

std::pair<double, ParamVec> WindowObjective::loss_and_grad(const ParamVec& theta) {
  const ParamVec saved = snapshot_params(model_.params());
  assign_params(model_.params(), theta);
  const WindowEval e = window_loss(model_, window_, weights_, ctx_);
  eg::backward(e.loss_var);
  ParamVec grad;
  grad.reserve(model_.params().size());
  for (auto& [name, v] : model_.params()) grad.push_back(v->grad);
  assign_params(model_.params(), saved);
  return {e.total, std::move(grad)};
}

WindowEval WindowObjective::eval_at(const ParamVec& theta) {
  const ParamVec saved = snapshot_params(model_.params());
  assign_params(model_.params(), theta);
  WindowEval e = window_loss(model_, window_, weights_, ctx_);
  assign_params(model_.params(), saved);
  return e;
}

// ---- learning operators ----

StepResult naive_online_step(Objective& objective, const ParamVec& theta, double alpha) {
  if (alpha < 0) throw DomainError("naive_online_step: alpha must be >= 0");
  auto [l, g] = objective.loss_and_grad(theta);
  StepResult out;
  out.loss = l;
  if (!std::isfinite(l) || !vec_finite(g)) {
    out.theta = theta;
    out.skipped = true;
    return out;
  }
  out.theta = axpy(theta, -alpha, g);
  return out;
}

double meta_objective(Objective& inner, Objective& outer, const ParamVec& theta, double alpha,
                      bool /*second_order*/) {
  auto [li, gi] = inner.loss_and_grad(theta);
  (void)li;
  const ParamVec adapted = axpy(theta, -alpha, gi);
  return outer.loss(adapted);
}

MetaGradient meta_gradient(Objective& inner, Objective& outer, const ParamVec& theta, double alpha,
                           bool second_order) {
  MetaGradient out;
  auto [li, gi] = inner.loss_and_grad(theta);
  out.inner_loss = li;
  out.inner_grad = gi;
  if (!std::isfinite(li) || !vec_finite(gi)) {
    out.skipped = true;
    return out;
  }
  const ParamVec adapted = axpy(theta, -alpha, gi);
  auto [lo, go] = outer.loss_and_grad(adapted);
  out.outer_loss = lo;
  out.outer_grad = go;
  if (!std::isfinite(lo) || !vec_finite(go)) {
    out.skipped = true;
    return out;
  }

  if (!second_order) {
    out.grad = go;  // H ~ 0 first-order approximation
    return out;
  }

  // Hessian-vector product by central differences of the inner gradient
  double theta_inf = 0, v_inf = 0;
  for (const Tensor& t : theta) theta_inf = std::max(theta_inf, std::max(std::fabs(t.min()), std::fabs(t.max())));
  for (const Tensor& t : go) v_inf = std::max(v_inf, std::max(std::fabs(t.min()), std::fabs(t.max())));
  const double eps = 1e-6 * (1.0 + theta_inf) / std::max(v_inf, 1e-12);
  auto [lp, gp] = inner.loss_and_grad(axpy(theta, eps, go));
  auto [lm, gm] = inner.loss_and_grad(axpy(theta, -eps, go));
  (void)lp;
  (void)lm;
  ParamVec hv = gp;
  for (std::size_t i = 0; i < hv.size(); ++i)
    for (std::int64_t j = 0; j < hv[i].size(); ++j) hv[i][j] = (gp[i][j] - gm[i][j]) / (2.0 * eps);
  out.grad = axpy(go, -alpha, hv);
  return out;
}

GradientAlignment gradient_alignment(Objective& a, Objective& b, const ParamVec& theta) {
  auto [la, ga] = a.loss_and_grad(theta);
  auto [lb, gb] = b.loss_and_grad(theta);
  (void)la;
  (void)lb;
  GradientAlignment out;
  out.dot = vec_dot(ga, gb);
  out.norm_i = vec_norm(ga);
  out.norm_j = vec_norm(gb);
  out.cosine = (out.norm_i > 0 && out.norm_j > 0) ? out.dot / (out.norm_i * out.norm_j) : 0.0;
  return out;
}

// ---- AdamW ----

AdamW::AdamW(const OptimConfig& cfg, const NamedParams& params) : cfg_(cfg) {
  for (const auto& [name, v] : params) {
    m_.push_back(Tensor(v->value.shape()));
    v_.push_back(Tensor(v->value.shape()));
  }
}

void AdamW::step(NamedParams& params, const ParamVec& grad, double lr) {
  if (grad.size() != params.size()) throw DomainError("adam: gradient size mismatch");
  step_ += 1;
  const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& value = params[i].second->value;
    for (std::int64_t j = 0; j < value.size(); ++j) {
      const double g = grad[i][j];
      m_[i][j] = b1 * m_[i][j] + (1.0 - b1) * g;
      v_[i][j] = b2 * v_[i][j] + (1.0 - b2) * g * g;
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      value[j] -= lr * cfg_.weight_decay * value[j];  // decoupled decay
      value[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.adam_epsilon);
    }
  }
}

void AdamW::restore(std::int64_t step, ParamVec m, ParamVec v) {
  step_ = step;
  m_ = std::move(m);
  v_ = std::move(v);
}

// ---- training ----

namespace {

struct PairSampler {
  struct Entry {
    int seq;
    int max_start;  // inclusive
  };
  std::vector<Entry> entries;
  std::int64_t total = 0;

  PairSampler(const std::vector<SequenceDataset>& data, int n) {
    for (std::size_t s = 0; s < data.size(); ++s) {
      const int len = static_cast<int>(data[s].frames.size());
      const int max_start = len - n - 1;  // D_{i+1} must fit
      if (max_start >= 0) {
        entries.push_back({static_cast<int>(s), max_start});
        total += max_start + 1;
      }
    }
    if (total == 0) throw DomainError("meta_train: no sequence offers an (D_i, D_{i+1}) pair");
  }

  std::pair<int, int> sample(Rng& rng) const {
    std::int64_t k = rng.uniform_int(0, total - 1);
    for (const Entry& e : entries) {
      if (k <= e.max_start) return {e.seq, static_cast<int>(k)};
      k -= e.max_start + 1;
    }
    return {entries.back().seq, entries.back().max_start};
  }
};

SlidingWindow make_window(const SequenceDataset& data, int start, int n, int index) {
  SlidingWindow w;
  w.index = index;
  w.intrinsics = data.intrinsics;
  w.frames.reserve(static_cast<std::size_t>(n));
  for (int t = 0; t < n; ++t) {
    Frame f = data.frames[static_cast<std::size_t>(start + t)];
    f.timestamp = start + t;  // consecutive by construction
    w.frames.push_back(std::move(f));
  }
  return w;
}

void ema_update_stats(FeatureStatsStore& store, const std::map<std::string, FeatureStats>& batch,
                      double decay) {
  for (const auto& [name, s] : batch) {
    const FeatureStats* prev = store.find(name);
    if (!prev)
      store.set(name, s);
    else
      store.set(name, {decay * prev->mu + (1 - decay) * s.mu,
                       decay * prev->sigma2 + (1 - decay) * s.sigma2});
  }
}

}  // namespace

std::vector<TrainLogRow> meta_train(const std::vector<SequenceDataset>& data, VoModel& model,
                                    AdamW& opt, Rng& rng, const TrainOptions& options,
                                    std::int64_t start_iteration,
                                    const std::function<void(const TrainLogRow&)>& on_iteration) {
  if (data.empty()) throw DomainError("meta_train: empty dataset");
  options.optim.validate();
  options.loss.validate();
  options.align.validate();
  const int n = options.window_n;
  if (n < 2) throw DomainError("meta_train: window length must be >= 2");
  for (const SequenceDataset& d : data)
    if (static_cast<int>(d.frames.size()) < n + 1)
      throw DomainError("meta_train: every sequence must have at least N+1 frames");

  const PairSampler sampler(data, n);
  std::vector<TrainLogRow> log;
  const std::int64_t ema_start = std::max<std::int64_t>(0, options.iterations - 1000);

  for (std::int64_t it = start_iteration; it < options.iterations; ++it) {
    const double t0 = now_ms();
    const double lr = options.optim.lr_at(it);

    StatsCollector collector;
    ForwardContext ctx;
    ctx.stats_mode = StatsMode::kInstant;
    ctx.epsilon = options.align.epsilon;
    ctx.beta = options.align.beta;

    ParamVec theta = snapshot_params(model.params());
    ParamVec grad_acc;
    double inner_acc = 0, outer_acc = 0, cos_acc = 0;
    int cos_count = 0;
    bool skipped = false;

    for (int b = 0; b < options.optim.batch_train; ++b) {
      const auto [seq, start] = sampler.sample(rng);
      const SequenceDataset& d = data[static_cast<std::size_t>(seq)];
      SlidingWindow wj = make_window(d, start + 1, n, start + 1);

      // F_s is accumulated from the pass at the unadapted parameters:
      // the inner pass in meta mode, the (only) training pass otherwise
      ForwardContext collect_ctx = ctx;
      collect_ctx.collect = &collector;

      ParamVec g;
      if (options.meta) {
        SlidingWindow wi = make_window(d, start, n, start);
        WindowObjective obj_i(model, wi, options.loss, collect_ctx);
        WindowObjective obj_j(model, wj, options.loss, ctx);
        MetaGradient mg = meta_gradient(obj_i, obj_j, theta,
                                        options.optim.inner_lr_at(it),
                                        options.optim.second_order);
        if (mg.skipped) {
          skipped = true;
          break;
        }
        inner_acc += mg.inner_loss;
        outer_acc += mg.outer_loss;
        const double ni = vec_norm(mg.inner_grad), no = vec_norm(mg.outer_grad);
        if (ni > 0 && no > 0) {
          cos_acc += vec_dot(mg.inner_grad, mg.outer_grad) / (ni * no);
          ++cos_count;
        }
        g = std::move(mg.grad);
      } else {
        // standard training: same sampling stream, loss on D_{i+1} only
        WindowObjective obj_j(model, wj, options.loss, collect_ctx);
        auto [l, gs] = obj_j.loss_and_grad(theta);
        if (!std::isfinite(l) || !vec_finite(gs)) {
          skipped = true;
          break;
        }
        inner_acc += l;
        g = std::move(gs);
      }
      grad_acc = grad_acc.empty() ? std::move(g) : axpy(grad_acc, 1.0, g);
    }

    TrainLogRow row;
    row.iteration = it + 1;
    row.lr = lr;
    if (!skipped && !grad_acc.empty()) {
      for (Tensor& t : grad_acc)
        for (std::int64_t j = 0; j < t.size(); ++j) t[j] /= options.optim.batch_train;
      opt.step(model.params(), grad_acc, lr);
      row.inner_loss = inner_acc / options.optim.batch_train;
      if (options.meta) {
        row.outer_loss = outer_acc / options.optim.batch_train;
        row.grad_cosine = cos_count > 0 ? cos_acc / cos_count : 0.0;
      }
      if (it >= ema_start) ema_update_stats(model.source_stats, collector.means(), 0.99);
    } else {
      row.inner_loss = std::numeric_limits<double>::quiet_NaN();
    }
    row.wall_ms = now_ms() - t0;
    log.push_back(row);
    if (on_iteration) on_iteration(row);
  }
  return log;
}

// ---- online adaptation ----

OnlineMode online_mode_from_string(const std::string& s) {
  if (s == "none") return OnlineMode::kNone;
  if (s == "naive") return OnlineMode::kNaive;
  if (s == "meta") return OnlineMode::kMeta;
  throw ConfigError("unknown online mode '" + s + "' (expected none|naive|meta)");
}

std::string to_string(OnlineMode m) {
  switch (m) {
    case OnlineMode::kNone: return "none";
    case OnlineMode::kNaive: return "naive";
    case OnlineMode::kMeta: return "meta";
  }
  return "?";
}

OnlineResult online_adapt(FrameStream& stream, VoModel& model, const OnlineOptions& options) {
  options.optim.validate();
  options.loss.validate();
  options.align.validate();
  const int n = options.window_n;
  if (n < 2) throw DomainError("online_adapt: window length must be >= 2");

  OnlineResult out;
  // Eq. 8: F_0 = F_s
  model.aligned_stats.entries().clear();
  for (const auto& [name, s] : model.source_stats.entries())
    model.aligned_stats.set(name, init_target_stats(s));

  AdamW opt(options.optim, model.params());  // outer/meta optimizer, batch 1
  std::deque<Frame> buffer;
  std::optional<SlidingWindow> prev_window;
  int frame_count = 0;
  int window_index = 0;

  while (true) {
    std::optional<Frame> frame = stream.next();
    if (!frame) break;
    frame->timestamp = frame_count;
    ++frame_count;
    buffer.push_back(std::move(*frame));
    if (static_cast<int>(buffer.size()) > n) buffer.pop_front();
    if (buffer.size() < 2) continue;

    const double t0 = now_ms();

    SlidingWindow window;
    window.index = window_index;
    window.intrinsics = stream.intrinsics();
    window.frames.assign(buffer.begin(), buffer.end());

    // stats update happens at window arrival, before any inner step; the
    // per-window freeze keeps the later objective evaluations consistent
    std::set<std::string> frozen;
    ForwardContext ctx;
    ctx.stats_mode = options.no_fa ? StatsMode::kInstant : StatsMode::kAligned;
    ctx.no_fa = options.no_fa;
    ctx.no_lstm = options.no_lstm;
    ctx.beta = options.align.beta;
    ctx.epsilon = options.align.epsilon;
    ctx.aligned = &model.aligned_stats;
    ctx.frozen = &frozen;

    // inference pass: poses are emitted before any weight update
    const WindowEval eval = window_loss(model, window, options.loss, ctx);
    out.relative_poses.push_back(eval.pair_poses.back());
    out.pose_timestamps.push_back(stream.timestamp(frame_count - 1));

    if (static_cast<int>(buffer.size()) < n) continue;  // not a full window yet

    AdaptationReport report;
    report.window = window_index;
    report.total_loss = eval.total;
    report.appearance_loss = eval.appearance;
    report.photometric_loss = eval.photometric;
    report.degenerate = eval.degenerate;

    if (options.mode == OnlineMode::kNaive) {
      WindowObjective obj(model, window, options.loss, ctx);
      const StepResult step =
          naive_online_step(obj, snapshot_params(model.params()), options.optim.alpha);
      report.inner_loss = step.loss;
      report.skipped = step.skipped;
      if (!step.skipped) assign_params(model.params(), step.theta);
    } else if (options.mode == OnlineMode::kMeta && prev_window) {
      WindowObjective obj_prev(model, *prev_window, options.loss, ctx);
      WindowObjective obj_cur(model, window, options.loss, ctx);
      MetaGradient mg = meta_gradient(obj_prev, obj_cur, snapshot_params(model.params()),
                                      options.optim.inner_lr_at(0),
                                      options.optim.second_order);
      report.inner_loss = mg.inner_loss;
      report.outer_loss = mg.outer_loss;
      report.skipped = mg.skipped;
      if (!mg.skipped) {
        report.grad_dot = vec_dot(mg.inner_grad, mg.outer_grad);
        const double ni = vec_norm(mg.inner_grad), no = vec_norm(mg.outer_grad);
        report.grad_cosine = (ni > 0 && no > 0) ? report.grad_dot / (ni * no) : 0.0;
        // outer Adam step on the meta gradient, batch size 1
        opt.step(model.params(), mg.grad, options.optim.alpha);
      }
    }

    report.wall_ms = now_ms() - t0;
    out.reports.push_back(report);
    prev_window = std::move(window);
    ++window_index;
  }

  if (frame_count < n) out.stream_too_short = true;
  return out;
}

}  // namespace metavo
