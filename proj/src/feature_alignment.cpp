#include "metavo/feature_alignment.hpp"

#include <cmath>

namespace metavo {

namespace eg = engine;

FeatureStats collect_stats(const Tensor& features) {
  const std::int64_t n = features.size();
  if (n < 1) throw DomainError("collect_stats: empty tensor");
  double mu = 0.0;
  for (std::int64_t i = 0; i < n; ++i) mu += features[i];
  mu /= static_cast<double>(n);
  double s2 = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = features[i] - mu;
    s2 += d * d;
  }
  s2 /= static_cast<double>(n);
  if (!std::isfinite(mu) || !std::isfinite(s2))
    throw DomainError("collect_stats: non-finite statistics");
  return {mu, s2};
}

FeatureStats init_target_stats(const FeatureStats& source) {
  if (!std::isfinite(source.mu) || !std::isfinite(source.sigma2))
    throw DomainError("init_target_stats: non-finite source");
  return source;
}

FeatureStats align_stats(const FeatureStats& prev, const FeatureStats& current_hat, double beta) {
  if (beta < 0.0 || beta > 1.0) throw DomainError("align_stats: beta must be in [0,1]");
#ifdef METAVO_MUTATE_EQ9_SIGN
  // mutation-test build: deliberately wrong blend sign
  return {(1.0 - beta) * prev.mu - beta * current_hat.mu,
          (1.0 - beta) * prev.sigma2 - beta * current_hat.sigma2};
#else
  return {(1.0 - beta) * prev.mu + beta * current_hat.mu,
          (1.0 - beta) * prev.sigma2 + beta * current_hat.sigma2};
#endif
}

eg::Var normalize_graph(const eg::Var& features, const FeatureStats& stats, const eg::Var& gamma,
                        const eg::Var& delta, double epsilon) {
  if (!(epsilon > 0.0)) throw DomainError("normalize: epsilon must be positive");
  if (!std::isfinite(stats.mu) || !std::isfinite(stats.sigma2) || stats.sigma2 < 0.0)
    throw DomainError("normalize: invalid statistics");
  const double inv = 1.0 / std::sqrt(stats.sigma2 + epsilon);
  const eg::Var centered = eg::mul_const(eg::add_const(features, -stats.mu), inv);
  return eg::affine_ch(centered, gamma, delta);
}

Tensor normalize(const Tensor& features, const FeatureStats& stats, const Tensor& gamma,
                 const Tensor& delta, double epsilon) {
  return normalize_graph(eg::constant(features), stats, eg::constant(gamma), eg::constant(delta),
                         epsilon)
      ->value;
}

eg::Var layer_norm_instant_graph(const eg::Var& features, const eg::Var& gamma,
                                 const eg::Var& delta, double epsilon) {
  const eg::Var m = eg::mean(features);
  const eg::Var centered = eg::bcast_sub(features, m);
  const eg::Var var = eg::mean(eg::mul(centered, centered));
  const eg::Var inv = eg::recip(eg::sqrt_(eg::add_const(var, epsilon)));
  return eg::affine_ch(eg::bcast_mul(centered, inv), gamma, delta);
}

}  // namespace metavo
