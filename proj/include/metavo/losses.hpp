#pragma once

#include "metavo/engine.hpp"
#include "metavo/geometry.hpp"

namespace metavo {

struct LossWeights {
  double lambda_m = 0.01;  // mask regularization
  double lambda_a = 1.0;   // appearance
  double lambda_r = 0.5;   // depth smoothness
  double alpha_s = 0.85;   // SSIM mixing factor
  int ssim_window = 5;

  void validate() const;
};

// SSIM stabilizers for [0,1] images
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

/// Per-pixel SSIM over a uniform window, computed per channel then averaged.
/// Returns {1,H,W} with values in [-1,1].
engine::Var ssim_map_graph(const engine::Var& a, const engine::Var& b, int window);

struct LossTerm {
  engine::Var value;
  bool degenerate = false;  // no valid pixels; only the mask regularizer remains
};

/// Masked photometric + SSIM appearance loss with mask regularization.
/// The per-pixel L1 residual is the channel mean; the SSIM term is not
/// weighted by the mask; both photometric terms are restricted to `validity`.
LossTerm appearance_loss_graph(const engine::Var& recon, const engine::Var& target,
                               const engine::Var& mask, const Tensor& validity,
                               const LossWeights& w);

/// Edge-aware first-difference depth smoothness. Image gradients use the L1
/// norm summed over channels; each direction is averaged over its own
/// interior pixel count.
engine::Var smoothness_loss_graph(const engine::Var& depth, const Tensor& image);

/// lambda_a * appearance + lambda_r * smoothness.
LossTerm total_loss_graph(const engine::Var& recon, const engine::Var& target,
                          const engine::Var& mask, const Tensor& validity,
                          const engine::Var& depth, const LossWeights& w);

// value-level wrappers
Tensor ssim_map(const Frame& a, const Frame& b, int window);
double appearance_loss(const Frame& recon, const Frame& target, const MaskMap& mask,
                       const MaskMap& validity, const LossWeights& w, bool* degenerate = nullptr);
double smoothness_loss(const DepthMap& depth, const Frame& image);
double total_loss(const Frame& recon, const Frame& target, const MaskMap& mask,
                  const MaskMap& validity, const DepthMap& depth, const LossWeights& w,
                  bool* degenerate = nullptr);

}  // namespace metavo
