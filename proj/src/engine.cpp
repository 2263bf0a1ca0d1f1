#include "metavo/engine.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace metavo::engine {

namespace {

std::atomic<std::uint64_t> g_seq{1};

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->seq = g_seq.fetch_add(1);
  if (rg) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

template <class F, class DF>
Var unary(const Var& a, F f, DF df) {
  Tensor out(a->value.shape());
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = f(a->value[i]);
  Node* pa = a.get();
  return make_node(std::move(out), {a}, [pa, df](Node& self) {
    const std::int64_t m = self.value.size();
    for (std::int64_t i = 0; i < m; ++i)
      pa->grad[i] += self.grad[i] * df(pa->value[i], self.value[i]);
  });
}

}  // namespace

Var leaf(Tensor v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  n->seq = g_seq.fetch_add(1);
  return n;
}

Var constant(Tensor v) { return leaf(std::move(v), false); }

Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

double scalar(const Var& v) {
  if (v->value.size() != 1) throw DomainError("engine: expected scalar node");
  return v->value[0];
}

void backward(const Var& root) {
  if (root->value.size() != 1) throw DomainError("backward: root must be scalar");
  // collect reachable subgraph
  std::vector<Node*> nodes;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (const auto& p : n->parents) {
      if (seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  for (Node* n : nodes) n->grad = Tensor(n->value.shape());
  std::sort(nodes.begin(), nodes.end(),
            [](const Node* a, const Node* b) { return a->seq > b->seq; });
  root->grad[0] = 1.0;
  for (Node* n : nodes)
    if (n->backprop) n->backprop(*n);
}

// ---- elementwise ----

Var add(const Var& a, const Var& b) {
  check_same_shape(a->value, b->value, "add");
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
  Node *pa = a.get(), *pb = b.get();
  return make_node(std::move(out), {a, b}, [pa, pb](Node& self) {
    for (std::int64_t i = 0; i < self.value.size(); ++i) {
      if (pa->requires_grad) pa->grad[i] += self.grad[i];
      if (pb->requires_grad) pb->grad[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a->value, b->value, "sub");
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
  Node *pa = a.get(), *pb = b.get();
  return make_node(std::move(out), {a, b}, [pa, pb](Node& self) {
    for (std::int64_t i = 0; i < self.value.size(); ++i) {
      if (pa->requires_grad) pa->grad[i] += self.grad[i];
      if (pb->requires_grad) pb->grad[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a->value, b->value, "mul");
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
  Node *pa = a.get(), *pb = b.get();
  return make_node(std::move(out), {a, b}, [pa, pb](Node& self) {
    for (std::int64_t i = 0; i < self.value.size(); ++i) {
      if (pa->requires_grad) pa->grad[i] += self.grad[i] * pb->value[i];
      if (pb->requires_grad) pb->grad[i] += self.grad[i] * pa->value[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a->value, b->value, "div");
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] / b->value[i];
  Node *pa = a.get(), *pb = b.get();
  return make_node(std::move(out), {a, b}, [pa, pb](Node& self) {
    for (std::int64_t i = 0; i < self.value.size(); ++i) {
      const double inv_b = 1.0 / pb->value[i];
      if (pa->requires_grad) pa->grad[i] += self.grad[i] * inv_b;
      if (pb->requires_grad) pb->grad[i] -= self.grad[i] * self.value[i] * inv_b;
    }
  });
}

Var neg(const Var& a) { return mul_const(a, -1.0); }

Var add_const(const Var& a, double c) {
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + c;
  Node* pa = a.get();
  return make_node(std::move(out), {a}, [pa](Node& self) {
    for (std::int64_t i = 0; i < self.value.size(); ++i) pa->grad[i] += self.grad[i];
  });
}

Var mul_const(const Var& a, double c) {
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * c;
  Node* pa = a.get();
  return make_node(std::move(out), {a}, [pa, c](Node& self) {
    for (std::int64_t i = 0; i < self.value.size(); ++i) pa->grad[i] += self.grad[i] * c;
  });
}

Var add_tensor(const Var& a, const Tensor& t) {
  check_same_shape(a->value, t, "add_tensor");
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + t[i];
  Node* pa = a.get();
  return make_node(std::move(out), {a}, [pa](Node& self) {
    for (std::int64_t i = 0; i < self.value.size(); ++i) pa->grad[i] += self.grad[i];
  });
}

Var mul_tensor(const Var& a, const Tensor& t) {
  check_same_shape(a->value, t, "mul_tensor");
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * t[i];
  Node* pa = a.get();
  Tensor tc = t;
  return make_node(std::move(out), {a}, [pa, tc = std::move(tc)](Node& self) {
    for (std::int64_t i = 0; i < self.value.size(); ++i) pa->grad[i] += self.grad[i] * tc[i];
  });
}

Var relu(const Var& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh_(const Var& a) {
  return unary(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Var exp_(const Var& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var sqrt_(const Var& a) {
  return unary(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Var abs_(const Var& a) {
  return unary(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var sin_(const Var& a) {
  return unary(
      a, [](double x) { return std::sin(x); },
      [](double x, double) { return std::cos(x); });
}

Var cos_(const Var& a) {
  return unary(
      a, [](double x) { return std::cos(x); },
      [](double x, double) { return -std::sin(x); });
}

Var recip(const Var& a) {
  return unary(
      a, [](double x) { return 1.0 / x; },
      [](double, double y) { return -y * y; });
}

Var log_clamped(const Var& a, double floor) {
  return unary(
      a, [floor](double x) { return std::log(x > floor ? x : floor); },
      [floor](double x, double) { return x > floor ? 1.0 / x : 0.0; });
}

// ---- broadcast ----

namespace {
void check_scalar(const Var& s, const char* where) {
  if (s->value.size() != 1) throw DomainError(std::string(where) + ": broadcast arg must be {1}");
}
}  // namespace

Var bcast_add(const Var& a, const Var& s) {
  check_scalar(s, "bcast_add");
  Tensor out(a->value.shape());
  const double sv = s->value[0];
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + sv;
  Node *pa = a.get(), *ps = s.get();
  return make_node(std::move(out), {a, s}, [pa, ps](Node& self) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < self.value.size(); ++i) {
      if (pa->requires_grad) pa->grad[i] += self.grad[i];
      acc += self.grad[i];
    }
    if (ps->requires_grad) ps->grad[0] += acc;
  });
}

Var bcast_sub(const Var& a, const Var& s) {
  check_scalar(s, "bcast_sub");
  Tensor out(a->value.shape());
  const double sv = s->value[0];
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - sv;
  Node *pa = a.get(), *ps = s.get();
  return make_node(std::move(out), {a, s}, [pa, ps](Node& self) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < self.value.size(); ++i) {
      if (pa->requires_grad) pa->grad[i] += self.grad[i];
      acc += self.grad[i];
    }
    if (ps->requires_grad) ps->grad[0] -= acc;
  });
}

Var bcast_mul(const Var& a, const Var& s) {
  check_scalar(s, "bcast_mul");
  Tensor out(a->value.shape());
  const double sv = s->value[0];
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * sv;
  Node *pa = a.get(), *ps = s.get();
  return make_node(std::move(out), {a, s}, [pa, ps](Node& self) {
    const double sv2 = ps->value[0];
    double acc = 0.0;
    for (std::int64_t i = 0; i < self.value.size(); ++i) {
      if (pa->requires_grad) pa->grad[i] += self.grad[i] * sv2;
      acc += self.grad[i] * pa->value[i];
    }
    if (ps->requires_grad) ps->grad[0] += acc;
  });
}

// ---- reductions / reshaping ----

Var sum(const Var& a) {
  Tensor out = Tensor::scalar(a->value.sum());
  Node* pa = a.get();
  return make_node(std::move(out), {a}, [pa](Node& self) {
    const double g = self.grad[0];
    for (std::int64_t i = 0; i < pa->value.size(); ++i) pa->grad[i] += g;
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a->value.size());
  Tensor out = Tensor::scalar(a->value.sum() / n);
  Node* pa = a.get();
  return make_node(std::move(out), {a}, [pa, n](Node& self) {
    const double g = self.grad[0] / n;
    for (std::int64_t i = 0; i < pa->value.size(); ++i) pa->grad[i] += g;
  });
}

Var reshape(const Var& a, std::vector<int> shape) {
  Tensor out(shape);
  if (out.size() != a->value.size()) throw DomainError("reshape: size mismatch");
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i];
  Node* pa = a.get();
  return make_node(std::move(out), {a}, [pa](Node& self) {
    for (std::int64_t i = 0; i < self.value.size(); ++i) pa->grad[i] += self.grad[i];
  });
}

Var get(const Var& a, std::int64_t index) {
  if (index < 0 || index >= a->value.size()) throw DomainError("get: index out of range");
  Tensor out = Tensor::scalar(a->value[index]);
  Node* pa = a.get();
  return make_node(std::move(out), {a},
                   [pa, index](Node& self) { pa->grad[index] += self.grad[0]; });
}

// ---- spatial ----

namespace {
void check_chw(const Var& a, const char* where) {
  if (a->value.ndim() != 3) throw DomainError(std::string(where) + ": expected {C,H,W}");
}
}  // namespace

Var concat_ch(const Var& a, const Var& b) {
  check_chw(a, "concat_ch");
  check_chw(b, "concat_ch");
  const int Ca = a->value.dim(0), Cb = b->value.dim(0);
  const int H = a->value.dim(1), W = a->value.dim(2);
  if (b->value.dim(1) != H || b->value.dim(2) != W)
    throw DomainError("concat_ch: spatial mismatch");
  Tensor out({Ca + Cb, H, W});
  const std::int64_t na = a->value.size();
  for (std::int64_t i = 0; i < na; ++i) out[i] = a->value[i];
  for (std::int64_t i = 0; i < b->value.size(); ++i) out[na + i] = b->value[i];
  Node *pa = a.get(), *pb = b.get();
  return make_node(std::move(out), {a, b}, [pa, pb, na](Node& self) {
    if (pa->requires_grad)
      for (std::int64_t i = 0; i < na; ++i) pa->grad[i] += self.grad[i];
    if (pb->requires_grad)
      for (std::int64_t i = 0; i < pb->value.size(); ++i) pb->grad[i] += self.grad[na + i];
  });
}

Var slice_ch(const Var& a, int c0, int c1) {
  check_chw(a, "slice_ch");
  const int C = a->value.dim(0), H = a->value.dim(1), W = a->value.dim(2);
  if (c0 < 0 || c1 > C || c0 >= c1) throw DomainError("slice_ch: bad channel range");
  Tensor out({c1 - c0, H, W});
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  const std::int64_t off = static_cast<std::int64_t>(c0) * plane;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[off + i];
  Node* pa = a.get();
  return make_node(std::move(out), {a}, [pa, off](Node& self) {
    for (std::int64_t i = 0; i < self.value.size(); ++i) pa->grad[off + i] += self.grad[i];
  });
}

Var crop(const Var& a, int y0, int y1, int x0, int x1) {
  check_chw(a, "crop");
  const int C = a->value.dim(0), H = a->value.dim(1), W = a->value.dim(2);
  if (y0 < 0 || y1 > H || x0 < 0 || x1 > W || y0 >= y1 || x0 >= x1)
    throw DomainError("crop: bad window");
  Tensor out({C, y1 - y0, x1 - x0});
  for (int c = 0; c < C; ++c)
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) out.at(c, y - y0, x - x0) = a->value.at(c, y, x);
  Node* pa = a.get();
  return make_node(std::move(out), {a}, [pa, y0, x0](Node& self) {
    const int C2 = self.value.dim(0), h = self.value.dim(1), w = self.value.dim(2);
    for (int c = 0; c < C2; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) pa->grad.at(c, y + y0, x + x0) += self.grad.at(c, y, x);
  });
}

Var upsample2x(const Var& a) {
  check_chw(a, "upsample2x");
  const int C = a->value.dim(0), H = a->value.dim(1), W = a->value.dim(2);
  Tensor out({C, 2 * H, 2 * W});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < 2 * H; ++y)
      for (int x = 0; x < 2 * W; ++x) out.at(c, y, x) = a->value.at(c, y / 2, x / 2);
  Node* pa = a.get();
  return make_node(std::move(out), {a}, [pa](Node& self) {
    const int C2 = self.value.dim(0), h = self.value.dim(1), w = self.value.dim(2);
    for (int c = 0; c < C2; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) pa->grad.at(c, y / 2, x / 2) += self.grad.at(c, y, x);
  });
}

Var spatial_mean(const Var& a) {
  check_chw(a, "spatial_mean");
  const int C = a->value.dim(0), H = a->value.dim(1), W = a->value.dim(2);
  const double inv = 1.0 / (static_cast<double>(H) * W);
  Tensor out({C});
  for (int c = 0; c < C; ++c) {
    double acc = 0.0;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) acc += a->value.at(c, y, x);
    out[c] = acc * inv;
  }
  Node* pa = a.get();
  return make_node(std::move(out), {a}, [pa, C, H, W, inv](Node& self) {
    for (int c = 0; c < C; ++c) {
      const double g = self.grad[c] * inv;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) pa->grad.at(c, y, x) += g;
    }
  });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  check_chw(x, "conv2d");
  if (w->value.ndim() != 4) throw DomainError("conv2d: weight must be {O,C,kh,kw}");
  const int C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
  const int O = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
  if (w->value.dim(1) != C) throw DomainError("conv2d: channel mismatch");
  if (b->value.size() != O) throw DomainError("conv2d: bias size mismatch");
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw DomainError("conv2d: output would be empty");

  Tensor out({O, Ho, Wo});
  const double* xd = x->value.data();
  const double* wd = w->value.data();
  for (int o = 0; o < O; ++o) {
    const double bias = b->value[o];
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        double acc = bias;
        const int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
        for (int c = 0; c < C; ++c) {
          const double* xp = xd + (static_cast<std::int64_t>(c) * H) * W;
          const double* wp = wd + ((static_cast<std::int64_t>(o) * C + c) * kh) * kw;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = iy0 + ky;
            if (iy < 0 || iy >= H) continue;
            const double* xrow = xp + static_cast<std::int64_t>(iy) * W;
            const double* wrow = wp + static_cast<std::int64_t>(ky) * kw;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ix0 + kx;
              if (ix < 0 || ix >= W) continue;
              acc += xrow[ix] * wrow[kx];
            }
          }
        }
        out.at(o, oy, ox) = acc;
      }
    }
  }

  Node *px = x.get(), *pw = w.get(), *pb = b.get();
  return make_node(
      std::move(out), {x, w, b}, [px, pw, pb, C, H, W, O, kh, kw, stride, pad](Node& self) {
        const int Ho2 = self.value.dim(1), Wo2 = self.value.dim(2);
        const double* xd = px->value.data();
        const double* wd = pw->value.data();
        const double* gd = self.grad.data();
        for (int o = 0; o < O; ++o) {
          for (int oy = 0; oy < Ho2; ++oy) {
            for (int ox = 0; ox < Wo2; ++ox) {
              const double g = gd[(static_cast<std::int64_t>(o) * Ho2 + oy) * Wo2 + ox];
              if (g == 0.0) continue;
              if (pb->requires_grad) pb->grad[o] += g;
              const int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
              for (int c = 0; c < C; ++c) {
                const std::int64_t xoff = (static_cast<std::int64_t>(c) * H) * W;
                const std::int64_t woff = ((static_cast<std::int64_t>(o) * C + c) * kh) * kw;
                for (int ky = 0; ky < kh; ++ky) {
                  const int iy = iy0 + ky;
                  if (iy < 0 || iy >= H) continue;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ix0 + kx;
                    if (ix < 0 || ix >= W) continue;
                    const std::int64_t xi = xoff + static_cast<std::int64_t>(iy) * W + ix;
                    const std::int64_t wi = woff + static_cast<std::int64_t>(ky) * kw + kx;
                    if (px->requires_grad) px->grad[xi] += g * wd[wi];
                    if (pw->requires_grad) pw->grad[wi] += g * xd[xi];
                  }
                }
              }
            }
          }
        }
      });
}

namespace {

// Integral-image helpers shared by box_mean forward and backward.
// sums[(y+1)*(W+1)+(x+1)] = sum of src[0..y, 0..x].
void integral(const double* src, int H, int W, std::vector<double>& sums) {
  sums.assign(static_cast<std::size_t>(H + 1) * (W + 1), 0.0);
  for (int y = 0; y < H; ++y) {
    double row = 0.0;
    for (int x = 0; x < W; ++x) {
      row += src[static_cast<std::int64_t>(y) * W + x];
      sums[static_cast<std::size_t>(y + 1) * (W + 1) + (x + 1)] =
          sums[static_cast<std::size_t>(y) * (W + 1) + (x + 1)] + row;
    }
  }
}

inline double window_sum(const std::vector<double>& sums, int W, int y0, int y1, int x0, int x1) {
  // inclusive [y0,y1] x [x0,x1]
  const int s = W + 1;
  return sums[static_cast<std::size_t>(y1 + 1) * s + (x1 + 1)] -
         sums[static_cast<std::size_t>(y0) * s + (x1 + 1)] -
         sums[static_cast<std::size_t>(y1 + 1) * s + x0] +
         sums[static_cast<std::size_t>(y0) * s + x0];
}

}  // namespace

Var box_mean(const Var& a, int k) {
  check_chw(a, "box_mean");
  if (k < 1 || k % 2 == 0) throw DomainError("box_mean: window must be odd and positive");
  const int C = a->value.dim(0), H = a->value.dim(1), W = a->value.dim(2);
  if (k > H || k > W) throw DomainError("box_mean: window larger than image");
  const int r = k / 2;

  Tensor out({C, H, W});
  std::vector<double> sums;
  for (int c = 0; c < C; ++c) {
    integral(a->value.data() + static_cast<std::int64_t>(c) * H * W, H, W, sums);
    for (int y = 0; y < H; ++y) {
      const int y0 = std::max(0, y - r), y1 = std::min(H - 1, y + r);
      for (int x = 0; x < W; ++x) {
        const int x0 = std::max(0, x - r), x1 = std::min(W - 1, x + r);
        const double count = static_cast<double>((y1 - y0 + 1) * (x1 - x0 + 1));
        out.at(c, y, x) = window_sum(sums, W, y0, y1, x0, x1) / count;
      }
    }
  }

  Node* pa = a.get();
  return make_node(std::move(out), {a}, [pa, C, H, W, r](Node& self) {
    // adjoint of the clipped box mean: divide by per-pixel counts, then
    // box-sum (the window relation is symmetric)
    Tensor tmp({H, W});
    std::vector<double> sums;
    for (int c = 0; c < C; ++c) {
      for (int y = 0; y < H; ++y) {
        const int y0 = std::max(0, y - r), y1 = std::min(H - 1, y + r);
        for (int x = 0; x < W; ++x) {
          const int x0 = std::max(0, x - r), x1 = std::min(W - 1, x + r);
          const double count = static_cast<double>((y1 - y0 + 1) * (x1 - x0 + 1));
          tmp[static_cast<std::int64_t>(y) * W + x] = self.grad.at(c, y, x) / count;
        }
      }
      integral(tmp.data(), H, W, sums);
      for (int y = 0; y < H; ++y) {
        const int y0 = std::max(0, y - r), y1 = std::min(H - 1, y + r);
        for (int x = 0; x < W; ++x) {
          const int x0 = std::max(0, x - r), x1 = std::min(W - 1, x + r);
          pa->grad.at(c, y, x) += window_sum(sums, W, y0, y1, x0, x1);
        }
      }
    }
  });
}

Var bilinear_sample(const Var& src, const Var& coords, const std::vector<std::uint8_t>& valid) {
  check_chw(src, "bilinear_sample");
  check_chw(coords, "bilinear_sample");
  if (coords->value.dim(0) != 2) throw DomainError("bilinear_sample: coords must be {2,h,w}");
  const int C = src->value.dim(0), H = src->value.dim(1), W = src->value.dim(2);
  const int h = coords->value.dim(1), w = coords->value.dim(2);
  if (valid.size() != static_cast<std::size_t>(h) * w)
    throw DomainError("bilinear_sample: valid mask size mismatch");

  Tensor out({C, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!valid[static_cast<std::size_t>(y) * w + x]) continue;
      const double u = coords->value.at(0, y, x);
      const double v = coords->value.at(1, y, x);
      const int x0 = static_cast<int>(std::floor(u));
      const int y0 = static_cast<int>(std::floor(v));
      const double wx = u - x0, wy = v - y0;
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int j = 0; j < 2; ++j) {
          const int yy = y0 + j;
          if (yy < 0 || yy >= H) continue;
          const double wj = j ? wy : 1.0 - wy;
          for (int i = 0; i < 2; ++i) {
            const int xx = x0 + i;
            if (xx < 0 || xx >= W) continue;
            const double wi = i ? wx : 1.0 - wx;
            acc += wj * wi * src->value.at(c, yy, xx);
          }
        }
        out.at(c, y, x) = acc;
      }
    }
  }

  Node *ps = src.get(), *pc = coords.get();
  std::vector<std::uint8_t> vcopy = valid;
  return make_node(
      std::move(out), {src, coords}, [ps, pc, vcopy = std::move(vcopy), C, H, W, h, w](Node& self) {
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            if (!vcopy[static_cast<std::size_t>(y) * w + x]) continue;
            const double u = pc->value.at(0, y, x);
            const double v = pc->value.at(1, y, x);
            const int x0 = static_cast<int>(std::floor(u));
            const int y0 = static_cast<int>(std::floor(v));
            const double wx = u - x0, wy = v - y0;
            double du = 0.0, dv = 0.0;
            for (int c = 0; c < C; ++c) {
              const double g = self.grad.at(c, y, x);
              if (g == 0.0) continue;
              // corner values with out-of-bounds treated as 0 (matches forward)
              double s00 = 0, s01 = 0, s10 = 0, s11 = 0;
              const bool y0in = y0 >= 0 && y0 < H, y1in = y0 + 1 >= 0 && y0 + 1 < H;
              const bool x0in = x0 >= 0 && x0 < W, x1in = x0 + 1 >= 0 && x0 + 1 < W;
              if (y0in && x0in) s00 = ps->value.at(c, y0, x0);
              if (y0in && x1in) s01 = ps->value.at(c, y0, x0 + 1);
              if (y1in && x0in) s10 = ps->value.at(c, y0 + 1, x0);
              if (y1in && x1in) s11 = ps->value.at(c, y0 + 1, x0 + 1);
              if (ps->requires_grad) {
                if (y0in && x0in) ps->grad.at(c, y0, x0) += g * (1 - wy) * (1 - wx);
                if (y0in && x1in) ps->grad.at(c, y0, x0 + 1) += g * (1 - wy) * wx;
                if (y1in && x0in) ps->grad.at(c, y0 + 1, x0) += g * wy * (1 - wx);
                if (y1in && x1in) ps->grad.at(c, y0 + 1, x0 + 1) += g * wy * wx;
              }
              du += g * ((1 - wy) * (s01 - s00) + wy * (s11 - s10));
              dv += g * ((1 - wx) * (s10 - s00) + wx * (s11 - s01));
            }
            if (pc->requires_grad) {
              pc->grad.at(0, y, x) += du;
              pc->grad.at(1, y, x) += dv;
            }
          }
        }
      });
}

Var fc(const Var& x, const Var& w, const Var& b) {
  if (x->value.ndim() != 1 || w->value.ndim() != 2) throw DomainError("fc: expected {C} and {O,C}");
  const int C = x->value.dim(0), O = w->value.dim(0);
  if (w->value.dim(1) != C || b->value.size() != O) throw DomainError("fc: shape mismatch");
  Tensor out({O});
  for (int o = 0; o < O; ++o) {
    double acc = b->value[o];
    for (int c = 0; c < C; ++c) acc += w->value[static_cast<std::int64_t>(o) * C + c] * x->value[c];
    out[o] = acc;
  }
  Node *px = x.get(), *pw = w.get(), *pb = b.get();
  return make_node(std::move(out), {x, w, b}, [px, pw, pb, C, O](Node& self) {
    for (int o = 0; o < O; ++o) {
      const double g = self.grad[o];
      if (pb->requires_grad) pb->grad[o] += g;
      for (int c = 0; c < C; ++c) {
        if (px->requires_grad) px->grad[c] += g * pw->value[static_cast<std::int64_t>(o) * C + c];
        if (pw->requires_grad) pw->grad[static_cast<std::int64_t>(o) * C + c] += g * px->value[c];
      }
    }
  });
}

Var affine_ch(const Var& x, const Var& g, const Var& d) {
  check_chw(x, "affine_ch");
  const int C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
  if (g->value.size() != C || d->value.size() != C) throw DomainError("affine_ch: bad {C} params");
  Tensor out({C, H, W});
  for (int c = 0; c < C; ++c) {
    const double gc = g->value[c], dc = d->value[c];
    for (int y = 0; y < H; ++y)
      for (int x2 = 0; x2 < W; ++x2) out.at(c, y, x2) = x->value.at(c, y, x2) * gc + dc;
  }
  Node *px = x.get(), *pg = g.get(), *pd = d.get();
  return make_node(std::move(out), {x, g, d}, [px, pg, pd, C, H, W](Node& self) {
    for (int c = 0; c < C; ++c) {
      const double gc = pg->value[c];
      double acc_g = 0.0, acc_d = 0.0;
      for (int y = 0; y < H; ++y) {
        for (int x2 = 0; x2 < W; ++x2) {
          const double go = self.grad.at(c, y, x2);
          if (px->requires_grad) px->grad.at(c, y, x2) += go * gc;
          acc_g += go * px->value.at(c, y, x2);
          acc_d += go;
        }
      }
      if (pg->requires_grad) pg->grad[c] += acc_g;
      if (pd->requires_grad) pd->grad[c] += acc_d;
    }
  });
}

}  // namespace metavo::engine
