#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <utility>
#include <vector>

#include "metavo/engine.hpp"
#include "metavo/tensor.hpp"

namespace metavo {

/// Pinhole camera model. Coordinates in pixels at the resolution the
/// intrinsics describe.
struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const;
  Intrinsics rescaled(int new_width, int new_height) const;
};

/// Rigid transform: x_out = rotation * x_in + translation.
struct PoseSE3 {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static PoseSE3 identity() { return {}; }
  void validate(double tol = 1e-6) const;
};

/// RGB image, channels-first {3,H,W}, values in [0,1].
struct Frame {
  Tensor pixels;  // {3,H,W}
  int timestamp = 0;

  Frame() = default;
  Frame(int h, int w) : pixels({3, h, w}) {}
  int height() const { return pixels.dim(1); }
  int width() const { return pixels.dim(2); }
};

/// Per-pixel positive depth, {1,H,W}.
struct DepthMap {
  Tensor values;  // {1,H,W}

  DepthMap() = default;
  DepthMap(int h, int w, double fill = 1.0) : values({1, h, w}, fill) {}
  int height() const { return values.dim(1); }
  int width() const { return values.dim(2); }
  double at(int y, int x) const { return values.at(0, y, x); }
  double& at(int y, int x) { return values.at(0, y, x); }
};

/// Per-pixel weights in [0,1], {1,H,W}.
struct MaskMap {
  Tensor values;  // {1,H,W}

  MaskMap() = default;
  MaskMap(int h, int w, double fill = 1.0) : values({1, h, w}, fill) {}
  int height() const { return values.dim(1); }
  int width() const { return values.dim(2); }
  double at(int y, int x) const { return values.at(0, y, x); }
};

/// Continuous source-pixel coordinates for every target pixel.
/// coords channel 0 = x, channel 1 = y.
struct FlowField {
  Tensor coords;                    // {2,H,W}
  std::vector<std::uint8_t> valid;  // H*W, row-major

  int height() const { return coords.dim(1); }
  int width() const { return coords.dim(2); }
  bool is_valid(int y, int x) const { return valid[static_cast<std::size_t>(y) * width() + x] != 0; }
};

/// Intrinsic Rz*Ry*Rx Euler convention.
Eigen::Matrix3d euler_to_rotation(double rx, double ry, double rz);

PoseSE3 pose_compose(const PoseSE3& a, const PoseSE3& b);
PoseSE3 pose_inverse(const PoseSE3& p);
PoseSE3 pose_from_euler(double rx, double ry, double rz, const Eigen::Vector3d& t);

/// Rotation angle of R in radians, numerically clamped.
double rotation_angle(const Eigen::Matrix3d& r);

constexpr double kWarpZEpsilon = 1e-6;

/// Lift every target pixel by its depth, move it through `pose`, and project
/// it back. Pixels projecting behind the camera (z <= epsilon) or outside
/// [0,W-1]x[0,H-1] are marked invalid.
FlowField backproject_warp(const DepthMap& depth, const PoseSE3& pose, const Intrinsics& K);

/// Bilinear resampling of `source` at the flow coordinates. Invalid pixels
/// produce 0 with validity 0.
std::pair<Frame, MaskMap> bilinear_sample(const Frame& source, const FlowField& flow);

/// backproject_warp followed by bilinear_sample.
std::pair<Frame, MaskMap> synthesize_view(const Frame& source, const DepthMap& depth_t,
                                          const PoseSE3& pose, const Intrinsics& K);

// ---- graph-level pieces used by the training path ----

/// 9 rotation-matrix entries (row-major) as scalar graph nodes, built from a
/// {3} euler node (rx, ry, rz).
std::array<engine::Var, 9> rotation_entries(const engine::Var& euler);

struct WarpGraph {
  engine::Var coords;               // {2,H,W}
  std::vector<std::uint8_t> valid;  // H*W
};

/// Differentiable warp. `rot` entries may come from rotation_entries() or be
/// constants; `translation` is a {3} node.
WarpGraph backproject_warp_graph(const engine::Var& depth, const std::array<engine::Var, 9>& rot,
                                 const engine::Var& translation, const Intrinsics& K);

struct SynthesisGraph {
  engine::Var image;                // {3,H,W}
  std::vector<std::uint8_t> valid;  // H*W
  Tensor validity_mask;             // {1,H,W}, 0/1 as doubles
};

/// Differentiable view synthesis: warp target-frame geometry into the source
/// frame and sample it.
SynthesisGraph synthesize_view_graph(const engine::Var& source, const engine::Var& depth,
                                     const engine::Var& euler, const engine::Var& translation,
                                     const Intrinsics& K);

}  // namespace metavo
