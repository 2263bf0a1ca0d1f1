#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "metavo/tensor.hpp"

namespace metavo::engine {

// Eager reverse-mode autodiff. Every op computes its value immediately and
// records a closure that scatters the output gradient into its parents.
// Creation order is a valid topological order, so backward() just replays
// nodes by descending sequence number.

class Node;
using Var = std::shared_ptr<Node>;

class Node {
 public:
  Tensor value;
  Tensor grad;  // allocated by backward(); same shape as value
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents
};

Var leaf(Tensor v, bool requires_grad = true);
Var constant(Tensor v);
Var constant_scalar(double v);

double scalar(const Var& v);  // value of a {1} node

/// Reverse pass from a scalar root; fills .grad of every reachable node
/// that requires a gradient.
void backward(const Var& root);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var add_const(const Var& a, double c);
Var mul_const(const Var& a, double c);
Var add_tensor(const Var& a, const Tensor& t);  // constant tensor
Var mul_tensor(const Var& a, const Tensor& t);  // constant tensor

Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh_(const Var& a);
Var exp_(const Var& a);
Var sqrt_(const Var& a);
Var abs_(const Var& a);  // subgradient 0 at the kink
Var sin_(const Var& a);
Var cos_(const Var& a);
Var recip(const Var& a);
/// log(max(x, floor)); zero gradient below the floor.
Var log_clamped(const Var& a, double floor = 1e-12);

// ---- broadcast with a {1} scalar node ----
Var bcast_add(const Var& a, const Var& s);
Var bcast_sub(const Var& a, const Var& s);  // a - s
Var bcast_mul(const Var& a, const Var& s);

// ---- reductions / reshaping ----
Var sum(const Var& a);
Var mean(const Var& a);
Var reshape(const Var& a, std::vector<int> shape);
Var get(const Var& a, std::int64_t index);  // {1} view of one element

// ---- spatial ops on {C,H,W} ----
Var concat_ch(const Var& a, const Var& b);
Var slice_ch(const Var& a, int c0, int c1);
Var crop(const Var& a, int y0, int y1, int x0, int x1);
Var upsample2x(const Var& a);
Var spatial_mean(const Var& a);  // {C,H,W} -> {C}

/// 3x3-style convolution, zero padding, ceil-mode output for stride 2.
/// x {C,H,W}, w {O,C,kh,kw}, b {O}.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

/// Uniform box mean over an odd k x k window clipped to the image,
/// normalized by the clipped window area. Per channel.
Var box_mean(const Var& a, int k);

/// Bilinear sampling of src {C,H,W} at coords {2,h,w} (channel 0 = x, 1 = y).
/// Pixels where valid[y*w+x] == 0 produce 0 and receive no gradient.
Var bilinear_sample(const Var& src, const Var& coords, const std::vector<std::uint8_t>& valid);

/// Fully connected: x {C}, w {O,C}, b {O} -> {O}.
Var fc(const Var& x, const Var& w, const Var& b);

/// Per-channel affine on {C,H,W}: out[c] = x[c] * g[c] + d[c]. g, d are {C}.
Var affine_ch(const Var& x, const Var& g, const Var& d);

}  // namespace metavo::engine
