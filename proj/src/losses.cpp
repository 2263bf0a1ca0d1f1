#include "metavo/losses.hpp"

#include <cmath>

namespace metavo {

namespace eg = engine;

void LossWeights::validate() const {
  if (lambda_m < 0 || lambda_a < 0 || lambda_r < 0) throw DomainError("loss weights must be >= 0");
  if (alpha_s < 0 || alpha_s > 1) throw DomainError("alpha_s must be in [0,1]");
  if (ssim_window < 1 || ssim_window % 2 == 0) throw DomainError("ssim_window must be odd");
}

namespace {

eg::Var channel_sum(const eg::Var& x) {
  const int C = x->value.dim(0);
  eg::Var acc = eg::slice_ch(x, 0, 1);
  for (int c = 1; c < C; ++c) acc = eg::add(acc, eg::slice_ch(x, c, c + 1));
  return acc;
}

// channel-mean L1 residual, {1,H,W}
eg::Var l1_residual(const eg::Var& a, const eg::Var& b) {
  const eg::Var d = eg::abs_(eg::sub(a, b));
  return eg::mul_const(channel_sum(d), 1.0 / a->value.dim(0));
}

}  // namespace

eg::Var ssim_map_graph(const eg::Var& a, const eg::Var& b, int window) {
  check_same_shape(a->value, b->value, "ssim_map");
  const int C = a->value.dim(0);
  eg::Var acc;
  for (int c = 0; c < C; ++c) {
    const eg::Var ac = eg::slice_ch(a, c, c + 1);
    const eg::Var bc = eg::slice_ch(b, c, c + 1);
    const eg::Var mu_a = eg::box_mean(ac, window);
    const eg::Var mu_b = eg::box_mean(bc, window);
    const eg::Var var_a = eg::sub(eg::box_mean(eg::mul(ac, ac), window), eg::mul(mu_a, mu_a));
    const eg::Var var_b = eg::sub(eg::box_mean(eg::mul(bc, bc), window), eg::mul(mu_b, mu_b));
    const eg::Var cov = eg::sub(eg::box_mean(eg::mul(ac, bc), window), eg::mul(mu_a, mu_b));
    const eg::Var num = eg::mul(eg::add_const(eg::mul_const(eg::mul(mu_a, mu_b), 2.0), kSsimC1),
                                eg::add_const(eg::mul_const(cov, 2.0), kSsimC2));
    const eg::Var den =
        eg::mul(eg::add_const(eg::add(eg::mul(mu_a, mu_a), eg::mul(mu_b, mu_b)), kSsimC1),
                eg::add_const(eg::add(var_a, var_b), kSsimC2));
    const eg::Var s = eg::div(num, den);
    acc = acc ? eg::add(acc, s) : s;
  }
  return eg::mul_const(acc, 1.0 / C);
}

LossTerm appearance_loss_graph(const eg::Var& recon, const eg::Var& target, const eg::Var& mask,
                               const Tensor& validity, const LossWeights& w) {
  check_same_shape(recon->value, target->value, "appearance_loss");
  if (mask->value.ndim() != 3 || mask->value.dim(0) != 1)
    throw DomainError("appearance_loss: mask must be {1,H,W}");
  if (mask->value.min() < 0.0 || mask->value.max() > 1.0)
    throw DomainError("appearance_loss: mask values must lie in [0,1]");
  check_same_shape(mask->value, validity, "appearance_loss(validity)");

  // mask regularization: BCE against an all-ones target
  const eg::Var l_m = eg::neg(eg::mean(eg::log_clamped(mask)));
  const eg::Var reg = eg::mul_const(l_m, w.lambda_m);

  const double n_valid = validity.sum();
  if (n_valid == 0.0) return {reg, true};

  const eg::Var l1 = l1_residual(recon, target);
  const eg::Var l1_term =
      eg::mul_const(eg::sum(eg::mul_tensor(eg::mul(l1, mask), validity)), 1.0 / n_valid);

  const eg::Var ssim = ssim_map_graph(recon, target, w.ssim_window);
  const eg::Var dssim = eg::mul_const(eg::add_const(eg::neg(ssim), 1.0), 0.5);
  const eg::Var ssim_term = eg::mul_const(eg::sum(eg::mul_tensor(dssim, validity)), 1.0 / n_valid);

  eg::Var value = eg::add(
      reg, eg::add(eg::mul_const(l1_term, 1.0 - w.alpha_s), eg::mul_const(ssim_term, w.alpha_s)));
  return {value, false};
}

eg::Var smoothness_loss_graph(const eg::Var& depth, const Tensor& image) {
  if (depth->value.ndim() != 3 || depth->value.dim(0) != 1)
    throw DomainError("smoothness_loss: depth must be {1,H,W}");
  const int H = depth->value.dim(1), W = depth->value.dim(2);
  if (image.ndim() != 3 || image.dim(1) != H || image.dim(2) != W)
    throw DomainError("smoothness_loss: image/depth shape mismatch");
  const int C = image.dim(0);

  // e^{-|grad I|} weights, channel-summed L1, computed once as constants
  Tensor wx({1, H, W - 1}), wy({1, H - 1, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x + 1 < W; ++x) {
      double g = 0;
      for (int c = 0; c < C; ++c) g += std::fabs(image.at(c, y, x + 1) - image.at(c, y, x));
      wx.at(0, y, x) = std::exp(-g);
    }
  for (int y = 0; y + 1 < H; ++y)
    for (int x = 0; x < W; ++x) {
      double g = 0;
      for (int c = 0; c < C; ++c) g += std::fabs(image.at(c, y + 1, x) - image.at(c, y, x));
      wy.at(0, y, x) = std::exp(-g);
    }

  const eg::Var dx =
      eg::abs_(eg::sub(eg::crop(depth, 0, H, 1, W), eg::crop(depth, 0, H, 0, W - 1)));
  const eg::Var dy =
      eg::abs_(eg::sub(eg::crop(depth, 1, H, 0, W), eg::crop(depth, 0, H - 1, 0, W)));
  return eg::add(eg::mean(eg::mul_tensor(dx, wx)), eg::mean(eg::mul_tensor(dy, wy)));
}

LossTerm total_loss_graph(const eg::Var& recon, const eg::Var& target, const eg::Var& mask,
                          const Tensor& validity, const eg::Var& depth, const LossWeights& w) {
  w.validate();
  LossTerm a = appearance_loss_graph(recon, target, mask, validity, w);
  const eg::Var r = smoothness_loss_graph(depth, target->value);
  return {eg::add(eg::mul_const(a.value, w.lambda_a), eg::mul_const(r, w.lambda_r)), a.degenerate};
}

// ---- value-level wrappers ----

Tensor ssim_map(const Frame& a, const Frame& b, int window) {
  return ssim_map_graph(eg::constant(a.pixels), eg::constant(b.pixels), window)->value;
}

double appearance_loss(const Frame& recon, const Frame& target, const MaskMap& mask,
                       const MaskMap& validity, const LossWeights& w, bool* degenerate) {
  LossTerm t = appearance_loss_graph(eg::constant(recon.pixels), eg::constant(target.pixels),
                                     eg::constant(mask.values), validity.values, w);
  if (degenerate) *degenerate = t.degenerate;
  return eg::scalar(t.value);
}

double smoothness_loss(const DepthMap& depth, const Frame& image) {
  return eg::scalar(smoothness_loss_graph(eg::constant(depth.values), image.pixels));
}

double total_loss(const Frame& recon, const Frame& target, const MaskMap& mask,
                  const MaskMap& validity, const DepthMap& depth, const LossWeights& w,
                  bool* degenerate) {
  LossTerm t = total_loss_graph(eg::constant(recon.pixels), eg::constant(target.pixels),
                                eg::constant(mask.values), validity.values,
                                eg::constant(depth.values), w);
  if (degenerate) *degenerate = t.degenerate;
  return eg::scalar(t.value);
}

}  // namespace metavo
