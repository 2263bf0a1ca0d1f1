#include "metavo/networks.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <sstream>

namespace metavo {

namespace eg = engine;
using detail::Conv;
using detail::Fc;
using detail::NormLayer;
using detail::ParamHost;

void ArchitectureConfig::validate() const {
  if (widths.size() < 3) throw DomainError("architecture: at least 3 encoder levels required");
  for (int w : widths)
    if (w <= 0) throw DomainError("architecture: widths must be positive");
  if (lstm_hidden <= 0 || pose_head_hidden <= 0)
    throw DomainError("architecture: hidden sizes must be positive");
  if (input_height < 8 || input_width < 8) throw DomainError("architecture: resolution too small");
}

namespace detail {

namespace {
Tensor he_normal(Rng& rng, std::vector<int> shape, int fan_in) {
  Tensor t(std::move(shape));
  const double std = std::sqrt(2.0 / fan_in);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, std);
  return t;
}
}  // namespace

Conv::Conv(ParamHost host, const std::string& name, int in_ch, int out_ch, int k, int stride,
           bool zero_init) {
  stride_ = stride;
  pad_ = k / 2;
  out_ch_ = out_ch;
  Tensor w = zero_init ? Tensor({out_ch, in_ch, k, k})
                       : he_normal(*host.rng, {out_ch, in_ch, k, k}, in_ch * k * k);
  w_ = eg::leaf(std::move(w));
  b_ = eg::leaf(Tensor({out_ch}));
  host.params->emplace_back(name + ".w", w_);
  host.params->emplace_back(name + ".b", b_);
}

eg::Var Conv::forward(const eg::Var& x) const { return eg::conv2d(x, w_, b_, stride_, pad_); }

NormLayer::NormLayer(ParamHost host, const std::string& name, int channels) : name_(name) {
  gamma_ = eg::leaf(Tensor({channels}, 1.0));
  delta_ = eg::leaf(Tensor({channels}));
  host.params->emplace_back(name + ".gamma", gamma_);
  host.params->emplace_back(name + ".delta", delta_);
}

eg::Var NormLayer::forward(const eg::Var& x, const ForwardContext& ctx) const {
  const FeatureStats inst = collect_stats(x->value);
  if (ctx.collect) ctx.collect->add(name_, inst);

  if (ctx.stats_mode == StatsMode::kInstant || ctx.no_fa)
    return layer_norm_instant_graph(x, gamma_, delta_, ctx.epsilon);

  if (!ctx.aligned) throw NumericError("normalization: aligned statistics store missing");
  const FeatureStats* prev = ctx.aligned->find(name_);
  if (ctx.frozen && !ctx.frozen->count(name_)) {
    // layers with no stored statistics (untrained model) start from the
    // first observation; otherwise the usual convex blend
    ctx.aligned->set(name_, prev ? align_stats(*prev, inst, ctx.beta) : inst);
    ctx.frozen->insert(name_);
  } else if (!prev) {
    throw NumericError("normalization: no statistics for layer " + name_);
  }
  return normalize_graph(x, *ctx.aligned->find(name_), gamma_, delta_, ctx.epsilon);
}

Fc::Fc(ParamHost host, const std::string& name, int in, int out, bool zero_init) {
  Tensor w = zero_init ? Tensor({out, in}) : he_normal(*host.rng, {out, in}, in);
  w_ = eg::leaf(std::move(w));
  b_ = eg::leaf(Tensor({out}));
  host.params->emplace_back(name + ".w", w_);
  host.params->emplace_back(name + ".b", b_);
}

eg::Var Fc::forward(const eg::Var& x) const { return eg::fc(x, w_, b_); }

}  // namespace detail

ConvLstmCell::ConvLstmCell(ParamHost host, const std::string& name, int in_ch, int hidden)
    : hidden_(hidden) {
  gates_ = Conv(host, name + ".gates", in_ch + hidden, 4 * hidden, 3, 1);
  // forget-gate bias starts at 1 (param appended last by Conv above)
  eg::Var b = host.params->back().second;
  for (int i = hidden; i < 2 * hidden; ++i) b->value[i] = 1.0;
}

std::pair<eg::Var, eg::Var> ConvLstmCell::step(const eg::Var& x, eg::Var h, eg::Var c) const {
  const int H = x->value.dim(1), W = x->value.dim(2);
  if (!h) h = eg::constant(Tensor({hidden_, H, W}));
  if (!c) c = eg::constant(Tensor({hidden_, H, W}));
  if (h->value.dim(1) != H || h->value.dim(2) != W)
    throw DomainError("convlstm: state does not match input size");

  const eg::Var gates = gates_.forward(eg::concat_ch(x, h));
  const eg::Var i = eg::sigmoid(eg::slice_ch(gates, 0, hidden_));
  const eg::Var f = eg::sigmoid(eg::slice_ch(gates, hidden_, 2 * hidden_));
  const eg::Var o = eg::sigmoid(eg::slice_ch(gates, 2 * hidden_, 3 * hidden_));
  const eg::Var g = eg::tanh_(eg::slice_ch(gates, 3 * hidden_, 4 * hidden_));
  const eg::Var c_next = eg::add(eg::mul(f, c), eg::mul(i, g));
  const eg::Var h_next = eg::mul(o, eg::tanh_(c_next));
  return {h_next, c_next};
}

VoModel::VoModel(ArchitectureConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed ^ 0x6d657461766full);
  ParamHost host{&params_, &rng};
  const auto& w = config_.widths;
  const int L = static_cast<int>(w.size());

  auto level = [&](const std::string& name, int in_ch, int out_ch, int stride) {
    Level lv;
    lv.conv = Conv(host, name, in_ch, out_ch, 3, stride);
    lv.norm = NormLayer(host, name + ".ln", out_ch);
    norm_names_.push_back(name + ".ln");
    return lv;
  };

  // depth net
  for (int i = 0; i < L; ++i)
    d_enc_.push_back(level("depth.enc" + std::to_string(i), i == 0 ? 3 : w[i - 1], w[i], 2));
  d_lstm_ = ConvLstmCell(host, "depth.lstm", w[L - 1], config_.lstm_hidden);
  for (int i = L - 1; i >= 1; --i) {
    const int cur = (i == L - 1) ? config_.lstm_hidden : w[i];
    d_up_.push_back(level("depth.up" + std::to_string(i), cur, w[i - 1], 1));
    d_merge_.push_back(level("depth.merge" + std::to_string(i), 2 * w[i - 1], w[i - 1], 1));
  }
  d_full_ = level("depth.full", w[0], w[0], 1);
  d_out_ = Conv(host, "depth.out", w[0], 1, 3, 1);

  // pose net
  for (int i = 0; i < L; ++i)
    p_enc_.push_back(level("pose.enc" + std::to_string(i), i == 0 ? 8 : w[i - 1], w[i], 2));
  p_lstm_ = ConvLstmCell(host, "pose.lstm", w[L - 1], config_.lstm_hidden);
  p_trunk_ = level("pose.trunk", config_.lstm_hidden, config_.pose_head_hidden, 1);
  const int ph = config_.pose_head_hidden;
  p_rot_fc1_ = Fc(host, "pose.rot.fc1", ph, ph);
  p_rot_norm_ = NormLayer(host, "pose.rot.fc1.ln", ph);
  norm_names_.push_back("pose.rot.fc1.ln");
  p_rot_fc2_ = Fc(host, "pose.rot.fc2", ph, 3, /*zero_init=*/true);
  p_tr_fc1_ = Fc(host, "pose.tr.fc1", ph, ph);
  p_tr_norm_ = NormLayer(host, "pose.tr.fc1.ln", ph);
  norm_names_.push_back("pose.tr.fc1.ln");
  p_tr_fc2_ = Fc(host, "pose.tr.fc2", ph, 3, /*zero_init=*/true);

  // mask net
  m_conv1_ = level("mask.conv1", 1, 8, 1);
  m_conv2_ = level("mask.conv2", 8, 8, 1);
  m_out_ = Conv(host, "mask.out", 8, 1, 3, 1, /*zero_init=*/true);
}

std::int64_t VoModel::param_count() const {
  std::int64_t n = 0;
  for (const auto& [name, v] : params_) n += v->value.size();
  return n;
}

RecurrentState VoModel::reset_state(int window_len) const {
  if (window_len < 2) throw DomainError("reset_state: window length must be >= 2");
  RecurrentState s;
  s.window_pos = 0;
  s.window_len = window_len;
  return s;
}

eg::Var VoModel::encode(const std::vector<Level>& enc, const ConvLstmCell& lstm, eg::Var x,
                        eg::Var& h, eg::Var& c, std::vector<eg::Var>* skips,
                        const ForwardContext& ctx) const {
  for (const Level& lv : enc) {
    x = eg::relu(lv.norm.forward(lv.conv.forward(x), ctx));
    if (skips) skips->push_back(x);
  }
  if (ctx.no_lstm) {
    eg::Var h0, c0;  // zeroed, detached
    auto [hn, cn] = lstm.step(x, h0, c0);
    h = nullptr;
    c = nullptr;
    return hn;
  }
  auto [hn, cn] = lstm.step(x, h, c);
  h = hn;
  c = cn;
  return hn;
}

eg::Var VoModel::depth_forward(const eg::Var& frame, RecurrentState& state,
                               const ForwardContext& ctx) const {
  if (frame->value.ndim() != 3 || frame->value.dim(0) != 3)
    throw DomainError("depth_forward: frame must be {3,H,W}");
  if (state.window_len > 0 && state.window_pos >= state.window_len)
    throw DomainError("depth_forward: window overrun; reset_state() required");

  std::vector<eg::Var> skips;
  eg::Var cur = encode(d_enc_, d_lstm_, frame, state.depth_h, state.depth_c, &skips, ctx);

  const int L = static_cast<int>(d_enc_.size());
  for (int k = 0; k < L - 1; ++k) {
    const eg::Var& skip = skips[static_cast<std::size_t>(L - 2 - k)];
    const int th = skip->value.dim(1), tw = skip->value.dim(2);
    cur = eg::crop(eg::upsample2x(cur), 0, th, 0, tw);
    cur = eg::relu(d_up_[static_cast<std::size_t>(k)].norm.forward(
        d_up_[static_cast<std::size_t>(k)].conv.forward(cur), ctx));
    cur = eg::concat_ch(cur, skip);
    cur = eg::relu(d_merge_[static_cast<std::size_t>(k)].norm.forward(
        d_merge_[static_cast<std::size_t>(k)].conv.forward(cur), ctx));
  }
  const int H = frame->value.dim(1), W = frame->value.dim(2);
  cur = eg::crop(eg::upsample2x(cur), 0, H, 0, W);
  cur = eg::relu(d_full_.norm.forward(d_full_.conv.forward(cur), ctx));
  const eg::Var disp = eg::sigmoid(d_out_.forward(cur));
  state.window_pos += 1;
  return eg::recip(eg::add_const(eg::mul_const(disp, kDepthSigmoidScale), kDepthSigmoidOffset));
}

std::pair<eg::Var, eg::Var> VoModel::pose_forward(const eg::Var& frame_prev,
                                                  const eg::Var& frame_cur,
                                                  const eg::Var& depth_prev,
                                                  const eg::Var& depth_cur, RecurrentState& state,
                                                  const ForwardContext& ctx) const {
  const eg::Var stack = eg::concat_ch(eg::concat_ch(frame_prev, frame_cur),
                                      eg::concat_ch(depth_prev, depth_cur));
  eg::Var cur = encode(p_enc_, p_lstm_, stack, state.pose_h, state.pose_c, nullptr, ctx);
  cur = eg::relu(p_trunk_.norm.forward(p_trunk_.conv.forward(cur), ctx));
  const eg::Var pooled = eg::spatial_mean(cur);

  auto head = [&](const Fc& fc1, const NormLayer& norm, const Fc& fc2) {
    eg::Var hid = fc1.forward(pooled);
    hid = eg::reshape(hid, {static_cast<int>(hid->value.size()), 1, 1});
    hid = eg::relu(norm.forward(hid, ctx));
    return fc2.forward(eg::reshape(hid, {static_cast<int>(hid->value.size())}));
  };

  const eg::Var euler = eg::mul_const(head(p_rot_fc1_, p_rot_norm_, p_rot_fc2_), kPoseRotationScale);
  const eg::Var trans = head(p_tr_fc1_, p_tr_norm_, p_tr_fc2_);
  return {euler, trans};
}

eg::Var VoModel::mask_forward(const eg::Var& residual, const ForwardContext& ctx) const {
  if (residual->value.ndim() != 3 || residual->value.dim(0) != 1)
    throw DomainError("mask_forward: residual must be {1,H,W}");
  if (residual->value.min() < 0.0) throw DomainError("mask_forward: residual must be nonnegative");
  eg::Var x = eg::relu(m_conv1_.norm.forward(m_conv1_.conv.forward(residual), ctx));
  x = eg::relu(m_conv2_.norm.forward(m_conv2_.conv.forward(x), ctx));
  return eg::sigmoid(m_out_.forward(x));
}

// ---- checkpoints ----

Checkpoint snapshot_model(const VoModel& model) {
  Checkpoint c;
  c.arch = model.config();
  for (const auto& [name, v] : model.params()) c.params.emplace_back(name, v->value);
  c.source_stats = model.source_stats.entries();
  return c;
}

void restore_model(VoModel& model, const Checkpoint& ckpt) {
  if (model.params().size() != ckpt.params.size())
    throw DataError("checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    auto& [name, var] = model.params()[i];
    const auto& [cname, tensor] = ckpt.params[i];
    if (name != cname || !var->value.same_shape(tensor))
      throw DataError("checkpoint: parameter mismatch at " + name);
    var->value = tensor;
  }
  model.source_stats.entries() = ckpt.source_stats;
}

namespace {

nlohmann::json arch_to_json(const ArchitectureConfig& a) {
  return {{"widths", a.widths},
          {"lstm_hidden", a.lstm_hidden},
          {"pose_head_hidden", a.pose_head_hidden},
          {"input_height", a.input_height},
          {"input_width", a.input_width}};
}

ArchitectureConfig arch_from_json(const nlohmann::json& j) {
  ArchitectureConfig a;
  a.widths = j.at("widths").get<std::vector<int>>();
  a.lstm_hidden = j.at("lstm_hidden").get<int>();
  a.pose_head_hidden = j.at("pose_head_hidden").get<int>();
  a.input_height = j.at("input_height").get<int>();
  a.input_width = j.at("input_width").get<int>();
  return a;
}

void write_tensor(std::ofstream& out, const Tensor& t) {
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor read_tensor(std::ifstream& in, std::vector<int> shape) {
  Tensor t(std::move(shape));
  in.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.size() * sizeof(double)));
  return t;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  nlohmann::json j;
  j["format_version"] = Checkpoint::kFormatVersion;
  j["arch"] = arch_to_json(ckpt.arch);
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.params) params.push_back({{"name", name}, {"shape", t.shape()}});
  j["params"] = params;
  nlohmann::json stats;
  for (const auto& [name, s] : ckpt.source_stats) stats[name] = {s.mu, s.sigma2};
  j["source_stats"] = stats;
  j["iteration"] = ckpt.iteration;
  j["rng_state"] = ckpt.rng_state;
  j["train_objective"] = ckpt.train_objective;
  j["adam"] = {{"present", ckpt.has_adam}, {"step", ckpt.adam_step}};

  const std::string header = j.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write("MVOC", 4);
  const std::uint32_t version = Checkpoint::kFormatVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& [name, t] : ckpt.params) write_tensor(out, t);
  if (ckpt.has_adam) {
    for (const Tensor& t : ckpt.adam_m) write_tensor(out, t);
    for (const Tensor& t : ckpt.adam_v) write_tensor(out, t);
  }
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (std::memcmp(magic, "MVOC", 4) != 0) throw DataError("not a checkpoint file: " + path);
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != Checkpoint::kFormatVersion)
    throw DataError("checkpoint format version " + std::to_string(version) + " != expected " +
                    std::to_string(Checkpoint::kFormatVersion));
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  const nlohmann::json j = nlohmann::json::parse(header);

  Checkpoint c;
  c.arch = arch_from_json(j.at("arch"));
  c.iteration = j.at("iteration").get<std::int64_t>();
  c.rng_state = j.at("rng_state").get<std::string>();
  c.train_objective = j.value("train_objective", "");
  for (const auto& [name, s] : j.at("source_stats").items())
    c.source_stats[name] = {s[0].get<double>(), s[1].get<double>()};
  for (const auto& p : j.at("params"))
    c.params.emplace_back(p.at("name").get<std::string>(),
                          read_tensor(in, p.at("shape").get<std::vector<int>>()));
  c.has_adam = j.at("adam").at("present").get<bool>();
  c.adam_step = j.at("adam").at("step").get<std::int64_t>();
  if (c.has_adam) {
    for (const auto& [name, t] : c.params) c.adam_m.push_back(read_tensor(in, t.shape()));
    for (const auto& [name, t] : c.params) c.adam_v.push_back(read_tensor(in, t.shape()));
  }
  if (!in) throw DataError("truncated checkpoint: " + path);
  return c;
}

VoModel model_from_checkpoint(const Checkpoint& ckpt, const ArchitectureConfig* expected) {
  if (expected && !(*expected == ckpt.arch)) {
    std::ostringstream diff;
    diff << "checkpoint architecture mismatch:\n";
    auto row = [&](const char* field, const std::string& want, const std::string& got) {
      if (want != got) diff << "  " << field << ": config=" << want << " checkpoint=" << got << "\n";
    };
    auto widths_str = [](const std::vector<int>& w) {
      std::ostringstream os;
      for (std::size_t i = 0; i < w.size(); ++i) os << (i ? "," : "") << w[i];
      return os.str();
    };
    row("widths", widths_str(expected->widths), widths_str(ckpt.arch.widths));
    row("lstm_hidden", std::to_string(expected->lstm_hidden), std::to_string(ckpt.arch.lstm_hidden));
    row("pose_head_hidden", std::to_string(expected->pose_head_hidden),
        std::to_string(ckpt.arch.pose_head_hidden));
    row("input_height", std::to_string(expected->input_height),
        std::to_string(ckpt.arch.input_height));
    row("input_width", std::to_string(expected->input_width), std::to_string(ckpt.arch.input_width));
    throw DataError(diff.str());
  }
  VoModel model(ckpt.arch, /*seed=*/0);
  restore_model(model, ckpt);
  return model;
}

}  // namespace metavo
