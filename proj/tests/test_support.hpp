#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "metavo/geometry.hpp"
#include "metavo/rng.hpp"
#include "metavo/tensor.hpp"

namespace metavo::test {

/// Smooth low-frequency test image (no kinks, bounded away from 0 and 1).
inline Frame smooth_frame(int h, int w, std::uint64_t seed) {
  Frame f(h, w);
  Rng rng(seed);
  double phase[3][4];
  for (auto& row : phase)
    for (double& p : row) p = rng.uniform(0.0, 2.0 * M_PI);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double v = 0.5 + 0.18 * std::sin(2.0 * M_PI * x / 7.3 + phase[c][0]) +
                         0.14 * std::sin(2.0 * M_PI * y / 5.9 + phase[c][1]) +
                         0.10 * std::sin(2.0 * M_PI * (x + y) / 11.1 + phase[c][2]);
        f.pixels.at(c, y, x) = v;
      }
  return f;
}

/// Near-constant positive depth with a gentle ramp (keeps warped coordinates
/// away from integer crossings while giving the smoothness loss a signal).
inline DepthMap gentle_depth(int h, int w, double base, std::uint64_t seed) {
  DepthMap d(h, w);
  Rng rng(seed);
  const double ax = rng.uniform(-0.004, 0.004), ay = rng.uniform(-0.004, 0.004);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) d.at(y, x) = base * (1.0 + ax * (x - w / 2.0) + ay * (y - h / 2.0));
  return d;
}

/// Relative-error comparison with an absolute cushion for near-zero values.
inline bool close_rel(double a, double b, double rel, double abs_floor = 1e-9) {
  return std::fabs(a - b) <= rel * std::max(std::fabs(a), std::fabs(b)) + abs_floor;
}

}  // namespace metavo::test
