#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "metavo/losses.hpp"
#include "metavo/rng.hpp"
#include "test_support.hpp"

using namespace metavo;
namespace eg = metavo::engine;

namespace {

Frame constant_frame(int h, int w, double v) {
  Frame f(h, w);
  f.pixels.fill(v);
  return f;
}

}  // namespace

TEST_CASE("ssim of an image with itself is 1") {
  const Frame a = test::smooth_frame(12, 20, 31);
  const Tensor s = ssim_map(a, a, 5);
  for (std::int64_t i = 0; i < s.size(); ++i) CHECK(std::fabs(s[i] - 1.0) < 1e-12);
  // the (1-SSIM)/2 loss term vanishes
  CHECK(std::fabs((1.0 - s[0]) / 2.0) < 1e-12);
}

TEST_CASE("ssim of the constant images 0 and 1 matches the closed form") {
  // means 0 and 1, variances and covariance 0:
  //   ((0 + C1)(0 + C2)) / ((1 + C1)(0 + C2)) = C1 / (1 + C1)
  const Frame a = constant_frame(10, 14, 0.0);
  const Frame b = constant_frame(10, 14, 1.0);
  const double expected = kSsimC1 / (1.0 + kSsimC1);
  const Tensor s = ssim_map(a, b, 5);
  for (std::int64_t i = 0; i < s.size(); ++i)
    CHECK(s[i] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("ssim values stay in [-1, 1] and reject oversized windows") {
  Rng rng(32);
  const Frame a = test::smooth_frame(9, 11, 33);
  const Frame b = test::smooth_frame(9, 11, 34);
  const Tensor s = ssim_map(a, b, 5);
  CHECK(s.min() >= -1.0 - 1e-12);
  CHECK(s.max() <= 1.0 + 1e-12);
  CHECK_THROWS_AS(ssim_map(a, b, 11), DomainError);
}

TEST_CASE("appearance loss at the optimum is exactly the mask regularizer") {
  const Frame a = test::smooth_frame(10, 16, 35);
  const MaskMap ones(10, 16, 1.0), valid(10, 16, 1.0);
  LossWeights w;

  // perfect reconstruction with a confident mask: everything vanishes
  CHECK(appearance_loss(a, a, ones, valid, w) == 0.0);

  // M == 0.5 leaves only lambda_m * ln 2
  const MaskMap half(10, 16, 0.5);
  CHECK(appearance_loss(a, a, half, valid, w) ==
        doctest::Approx(0.01 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("appearance loss on constant images matches hand evaluation") {
  const Frame recon = constant_frame(10, 14, 0.0);
  const Frame target = constant_frame(10, 14, 1.0);
  const MaskMap ones(10, 14, 1.0), valid(10, 14, 1.0);
  LossWeights w;
  const double ssim_const = kSsimC1 / (1.0 + kSsimC1);
  const double expected = (1.0 - w.alpha_s) * 1.0 + w.alpha_s * (1.0 - ssim_const) / 2.0;
  CHECK(appearance_loss(recon, target, ones, valid, w) ==
        doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("zero valid pixels degenerates to the regularizer alone") {
  const Frame a = test::smooth_frame(8, 10, 36);
  const Frame b = test::smooth_frame(8, 10, 37);
  const MaskMap half(8, 10, 0.5);
  const MaskMap invalid(8, 10, 0.0);
  LossWeights w;
  bool degenerate = false;
  const double loss = appearance_loss(a, b, half, invalid, w, &degenerate);
  CHECK(degenerate);
  CHECK(loss == doctest::Approx(0.01 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("mask rejects out-of-range values") {
  const Frame a = test::smooth_frame(8, 10, 38);
  MaskMap bad(8, 10, 1.0);
  bad.values[3] = 1.5;
  const MaskMap valid(8, 10, 1.0);
  CHECK_THROWS_AS(appearance_loss(a, a, bad, valid, LossWeights{}), DomainError);
}

TEST_CASE("smoothness loss oracle cases") {
  const Frame flat = constant_frame(10, 16, 0.5);

  DepthMap constant(10, 16, 3.0);
  CHECK(smoothness_loss(constant, flat) == 0.0);

  // D(x,y) = x on a constant image: mean |dx| = 1, no y-gradient
  DepthMap ramp(10, 16);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 16; ++x) ramp.at(y, x) = static_cast<double>(x);
  CHECK(smoothness_loss(ramp, flat) == doctest::Approx(1.0).epsilon(1e-12));

  // strong horizontal image gradients down-weight the same depth ramp
  Frame edges(10, 16);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 10; ++y)
      for (int x = 0; x < 16; ++x) edges.pixels.at(c, y, x) = (x % 2) ? 0.9 : 0.1;
  CHECK(smoothness_loss(ramp, edges) < 1.0);
}

TEST_CASE("total loss recomposes from its parts") {
  Rng rng(39);
  const Frame recon = test::smooth_frame(16, 32, 40);
  const Frame target = test::smooth_frame(16, 32, 41);
  MaskMap mask(16, 32);
  for (std::int64_t i = 0; i < mask.values.size(); ++i) mask.values[i] = rng.uniform(0.2, 0.9);
  MaskMap valid(16, 32, 1.0);
  for (int x = 0; x < 5; ++x) valid.values[x] = 0.0;  // a few invalid pixels
  const DepthMap depth = test::gentle_depth(16, 32, 4.0, 42);

  LossWeights w;
  const double total = total_loss(recon, target, mask, valid, depth, w);
  const double parts = w.lambda_a * appearance_loss(recon, target, mask, valid, w) +
                       w.lambda_r * smoothness_loss(depth, target);
  CHECK(total == doctest::Approx(parts).epsilon(1e-12));
  CHECK(std::fabs(total - parts) < 1e-9);

  // weight zeroing isolates the smoothness term
  LossWeights w0 = w;
  w0.lambda_a = 0.0;
  CHECK(total_loss(recon, target, mask, valid, depth, w0) ==
        doctest::Approx(w.lambda_r * smoothness_loss(depth, target)).epsilon(1e-12));

  // perfect reconstruction with constant depth and confident mask
  const MaskMap ones(16, 32, 1.0), allv(16, 32, 1.0);
  CHECK(total_loss(recon, recon, ones, allv, DepthMap(16, 32, 2.0), w) == 0.0);
}

TEST_CASE("shrinking the mask trades L1 for regularization") {
  const Frame recon = test::smooth_frame(12, 18, 43);
  const Frame target = test::smooth_frame(12, 18, 44);
  const MaskMap valid(12, 18, 1.0);
  LossWeights w;
  w.alpha_s = 0.0;  // isolate the L1 term

  double prev_l1 = 1e100, prev_reg = -1.0;
  for (double level : {1.0, 0.7, 0.4, 0.1}) {
    const MaskMap m(12, 18, level);
    const double with_reg = appearance_loss(recon, target, m, valid, w);
    LossWeights no_reg = w;
    no_reg.lambda_m = 0.0;
    const double l1_only = appearance_loss(recon, target, m, valid, no_reg);
    const double reg_only = with_reg - l1_only;
    CHECK(l1_only < prev_l1);
    CHECK(reg_only > prev_reg);
    prev_l1 = l1_only;
    prev_reg = reg_only;
  }
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(45);
  const Frame target = test::smooth_frame(12, 20, 46);
  Frame recon = test::smooth_frame(12, 20, 47);
  // keep residuals away from the L1 kink
  for (std::int64_t i = 0; i < recon.pixels.size(); ++i)
    recon.pixels[i] = 0.55 * recon.pixels[i] + 0.35;
  Tensor mask0({1, 12, 20});
  for (std::int64_t i = 0; i < mask0.size(); ++i) mask0[i] = rng.uniform(0.25, 0.75);
  Tensor valid({1, 12, 20}, 1.0);
  const DepthMap depth = test::gentle_depth(12, 20, 4.0, 48);
  LossWeights w;

  auto eval = [&](const Tensor& r, const Tensor& m, const Tensor& d,
                  std::vector<eg::Var>* leaves) {
    auto rv = eg::leaf(r);
    auto mv = eg::leaf(m);
    auto dv = eg::leaf(d);
    LossTerm t = total_loss_graph(rv, eg::constant(target.pixels), mv, valid, dv, w);
    if (leaves) {
      eg::backward(t.value);
      *leaves = {rv, mv, dv};
    }
    return eg::scalar(t.value);
  };

  std::vector<eg::Var> leaves;
  eval(recon.pixels, mask0, depth.values, &leaves);

  const double step = 1e-4;
  auto fd = [&](int which, std::int64_t idx) {
    Tensor r = recon.pixels, m = mask0, d = depth.values;
    Tensor* t = which == 0 ? &r : which == 1 ? &m : &d;
    (*t)[idx] += step;
    const double hi = eval(r, m, d, nullptr);
    (*t)[idx] -= 2 * step;
    const double lo = eval(r, m, d, nullptr);
    return (hi - lo) / (2 * step);
  };

  for (int which = 0; which < 3; ++which) {
    const std::int64_t n = leaves[static_cast<std::size_t>(which)]->value.size();
    for (int k = 0; k < 10; ++k) {
      const std::int64_t idx = rng.uniform_int(0, n - 1);
      const double an = leaves[static_cast<std::size_t>(which)]->grad[idx];
      CHECK(test::close_rel(fd(which, idx), an, 1e-3, 1e-8));
    }
  }
}
