#include "metavo/geometry.hpp"

#include <cmath>

namespace metavo {

namespace eg = engine;

void Intrinsics::validate() const {
  if (!(fx > 0) || !(fy > 0)) throw DomainError("intrinsics: focal lengths must be positive");
  if (width <= 0 || height <= 0) throw DomainError("intrinsics: image size must be positive");
  if (cx < 0 || cx >= width || cy < 0 || cy >= height)
    throw DomainError("intrinsics: principal point outside image");
}

Intrinsics Intrinsics::rescaled(int new_width, int new_height) const {
  const double sx = static_cast<double>(new_width) / width;
  const double sy = static_cast<double>(new_height) / height;
  return {fx * sx, fy * sy, cx * sx, cy * sy, new_width, new_height};
}

void PoseSE3::validate(double tol) const {
  if (!rotation.allFinite() || !translation.allFinite())
    throw DomainError("pose: non-finite entries");
  const Eigen::Matrix3d rtr = rotation.transpose() * rotation;
  if ((rtr - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > tol)
    throw DomainError("pose: rotation not orthonormal");
  if (std::fabs(rotation.determinant() - 1.0) > tol)
    throw DomainError("pose: rotation determinant != 1");
}

Eigen::Matrix3d euler_to_rotation(double rx, double ry, double rz) {
  if (!std::isfinite(rx) || !std::isfinite(ry) || !std::isfinite(rz))
    throw DomainError("euler_to_rotation: non-finite angle");
  const double cx = std::cos(rx), sx = std::sin(rx);
  const double cy = std::cos(ry), sy = std::sin(ry);
  const double cz = std::cos(rz), sz = std::sin(rz);
  Eigen::Matrix3d r;
  // Rz * Ry * Rx expanded
  r << cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx,  //
      sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx,   //
      -sy, cy * sx, cy * cx;
  return r;
}

PoseSE3 pose_compose(const PoseSE3& a, const PoseSE3& b) {
  PoseSE3 out;
  out.rotation = a.rotation * b.rotation;
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

PoseSE3 pose_inverse(const PoseSE3& p) {
  PoseSE3 out;
  out.rotation = p.rotation.transpose();
  out.translation = -(p.rotation.transpose() * p.translation);
  return out;
}

PoseSE3 pose_from_euler(double rx, double ry, double rz, const Eigen::Vector3d& t) {
  PoseSE3 out;
  out.rotation = euler_to_rotation(rx, ry, rz);
  out.translation = t;
  return out;
}

double rotation_angle(const Eigen::Matrix3d& r) {
  double c = (r.trace() - 1.0) * 0.5;
  c = std::max(-1.0, std::min(1.0, c));
  return std::acos(c);
}

std::array<eg::Var, 9> rotation_entries(const eg::Var& euler) {
  if (euler->value.size() != 3) throw DomainError("rotation_entries: euler must be {3}");
  const eg::Var rx = eg::get(euler, 0), ry = eg::get(euler, 1), rz = eg::get(euler, 2);
  const eg::Var cx = eg::cos_(rx), sx = eg::sin_(rx);
  const eg::Var cy = eg::cos_(ry), sy = eg::sin_(ry);
  const eg::Var cz = eg::cos_(rz), sz = eg::sin_(rz);
  // Rz * Ry * Rx, row-major
  return {
      eg::mul(cz, cy),
      eg::sub(eg::mul(eg::mul(cz, sy), sx), eg::mul(sz, cx)),
      eg::add(eg::mul(eg::mul(cz, sy), cx), eg::mul(sz, sx)),
      eg::mul(sz, cy),
      eg::add(eg::mul(eg::mul(sz, sy), sx), eg::mul(cz, cx)),
      eg::sub(eg::mul(eg::mul(sz, sy), cx), eg::mul(cz, sx)),
      eg::neg(sy),
      eg::mul(cy, sx),
      eg::mul(cy, cx),
  };
}

WarpGraph backproject_warp_graph(const eg::Var& depth, const std::array<eg::Var, 9>& rot,
                                 const eg::Var& translation, const Intrinsics& K) {
  K.validate();
  if (depth->value.ndim() != 3 || depth->value.dim(0) != 1)
    throw DomainError("backproject_warp: depth must be {1,H,W}");
  const int H = depth->value.dim(1), W = depth->value.dim(2);
  if (H != K.height || W != K.width)
    throw DomainError("backproject_warp: depth size does not match intrinsics");
  if (depth->value.min() <= 0.0) throw DomainError("backproject_warp: depth must be positive");

  // normalized camera rays of the target grid
  Tensor xt({1, H, W}), yt({1, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      xt.at(0, y, x) = (x - K.cx) / K.fx;
      yt.at(0, y, x) = (y - K.cy) / K.fy;
    }

  const eg::Var X = eg::mul_tensor(depth, xt);
  const eg::Var Y = eg::mul_tensor(depth, yt);
  const eg::Var& Z = depth;

  const eg::Var tx = eg::get(translation, 0);
  const eg::Var ty = eg::get(translation, 1);
  const eg::Var tz = eg::get(translation, 2);

  auto rotated = [&](int row) {
    return eg::add(eg::add(eg::bcast_mul(X, rot[row * 3 + 0]), eg::bcast_mul(Y, rot[row * 3 + 1])),
                   eg::bcast_mul(Z, rot[row * 3 + 2]));
  };
  const eg::Var Xc = eg::bcast_add(rotated(0), tx);
  const eg::Var Yc = eg::bcast_add(rotated(1), ty);
  const eg::Var Zc = eg::bcast_add(rotated(2), tz);

  // z-validity first; invalid pixels divide by 1 so no Inf enters the graph
  Tensor zvalid({1, H, W});
  for (std::int64_t i = 0; i < zvalid.size(); ++i)
    zvalid[i] = Zc->value[i] > kWarpZEpsilon ? 1.0 : 0.0;
  Tensor zinvalid({1, H, W});
  for (std::int64_t i = 0; i < zinvalid.size(); ++i) zinvalid[i] = 1.0 - zvalid[i];
  const eg::Var den = eg::add_tensor(eg::mul_tensor(Zc, zvalid), zinvalid);

  const eg::Var u = eg::add_const(eg::mul_const(eg::div(Xc, den), K.fx), K.cx);
  const eg::Var v = eg::add_const(eg::mul_const(eg::div(Yc, den), K.fy), K.cy);

  WarpGraph out;
  out.coords = eg::concat_ch(u, v);
  // tiny boundary tolerance keeps exact-identity warps valid at the border
  constexpr double kEdge = 1e-9;
  out.valid.assign(static_cast<std::size_t>(H) * W, 0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::int64_t i = static_cast<std::int64_t>(y) * W + x;
      const double uu = u->value[i], vv = v->value[i];
      out.valid[static_cast<std::size_t>(i)] =
          (zvalid[i] > 0.0 && uu >= -kEdge && uu <= W - 1 + kEdge && vv >= -kEdge &&
           vv <= H - 1 + kEdge)
              ? 1
              : 0;
    }
  return out;
}

FlowField backproject_warp(const DepthMap& depth, const PoseSE3& pose, const Intrinsics& K) {
  pose.validate();
  std::array<eg::Var, 9> rot;
  for (int i = 0; i < 9; ++i) rot[i] = eg::constant_scalar(pose.rotation(i / 3, i % 3));
  Tensor t({3});
  for (int i = 0; i < 3; ++i) t[i] = pose.translation(i);
  WarpGraph g = backproject_warp_graph(eg::constant(depth.values), rot, eg::constant(std::move(t)), K);
  FlowField flow;
  flow.coords = g.coords->value;
  flow.valid = std::move(g.valid);
  return flow;
}

std::pair<Frame, MaskMap> bilinear_sample(const Frame& source, const FlowField& flow) {
  if (source.height() != flow.height() || source.width() != flow.width())
    throw DomainError("bilinear_sample: flow shape does not match source");
  const eg::Var out =
      eg::bilinear_sample(eg::constant(source.pixels), eg::constant(flow.coords), flow.valid);
  Frame sampled(source.height(), source.width());
  sampled.pixels = out->value;
  sampled.timestamp = source.timestamp;
  MaskMap validity(source.height(), source.width(), 0.0);
  for (int y = 0; y < source.height(); ++y)
    for (int x = 0; x < source.width(); ++x)
      validity.values.at(0, y, x) = flow.is_valid(y, x) ? 1.0 : 0.0;
  return {std::move(sampled), std::move(validity)};
}

std::pair<Frame, MaskMap> synthesize_view(const Frame& source, const DepthMap& depth_t,
                                          const PoseSE3& pose, const Intrinsics& K) {
  FlowField flow = backproject_warp(depth_t, pose, K);
  return bilinear_sample(source, flow);
}

SynthesisGraph synthesize_view_graph(const eg::Var& source, const eg::Var& depth,
                                     const eg::Var& euler, const eg::Var& translation,
                                     const Intrinsics& K) {
  WarpGraph warp = backproject_warp_graph(depth, rotation_entries(euler), translation, K);
  SynthesisGraph out;
  out.image = eg::bilinear_sample(source, warp.coords, warp.valid);
  const int H = depth->value.dim(1), W = depth->value.dim(2);
  out.validity_mask = Tensor({1, H, W});
  for (std::int64_t i = 0; i < out.validity_mask.size(); ++i)
    out.validity_mask[i] = warp.valid[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
  out.valid = std::move(warp.valid);
  return out;
}

}  // namespace metavo
