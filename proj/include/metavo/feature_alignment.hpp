#pragma once

#include <map>
#include <string>

#include "metavo/engine.hpp"
#include "metavo/tensor.hpp"

namespace metavo {

/// Scalar statistics of one normalized layer, taken over the full H*W*C
/// feature tensor.
struct FeatureStats {
  double mu = 0.0;
  double sigma2 = 0.0;

  bool operator==(const FeatureStats&) const = default;
};

struct AlignConfig {
  double beta = 0.5;
  double epsilon = 1e-5;

  void validate() const {
    if (beta < 0.0 || beta > 1.0) throw DomainError("align: beta must be in [0,1]");
    if (!(epsilon > 0.0)) throw DomainError("align: epsilon must be positive");
  }
};

/// Population mean/variance over every element of the tensor.
FeatureStats collect_stats(const Tensor& features);

/// Target-domain initialization: an exact copy of the source statistics.
FeatureStats init_target_stats(const FeatureStats& source);

/// Convex blend of previous and instantaneous statistics.
FeatureStats align_stats(const FeatureStats& prev, const FeatureStats& current_hat, double beta);

/// Normalization with fixed (aligned) statistics; differentiable w.r.t.
/// features and the per-channel scale/shift, but the statistics themselves
/// are constants.
engine::Var normalize_graph(const engine::Var& features, const FeatureStats& stats,
                            const engine::Var& gamma, const engine::Var& delta, double epsilon);

Tensor normalize(const Tensor& features, const FeatureStats& stats, const Tensor& gamma,
                 const Tensor& delta, double epsilon);

/// Standard layer normalization with on-graph instantaneous statistics
/// (gradients flow through the mean and variance).
engine::Var layer_norm_instant_graph(const engine::Var& features, const engine::Var& gamma,
                                     const engine::Var& delta, double epsilon);

/// Named per-layer statistics (source-domain F_s or the online aligned F_i).
class FeatureStatsStore {
 public:
  void set(const std::string& layer, const FeatureStats& stats) { entries_[layer] = stats; }
  const FeatureStats* find(const std::string& layer) const {
    auto it = entries_.find(layer);
    return it == entries_.end() ? nullptr : &it->second;
  }
  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, FeatureStats>& entries() const { return entries_; }
  std::map<std::string, FeatureStats>& entries() { return entries_; }

 private:
  std::map<std::string, FeatureStats> entries_;
};

}  // namespace metavo
