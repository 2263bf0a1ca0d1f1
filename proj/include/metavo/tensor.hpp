#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

#include "metavo/errors.hpp"

namespace metavo {

/// Dense row-major double tensor. Feature maps use {C, H, W} ordering;
/// vectors use {N}; scalars use {1}.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, double fill);

  static Tensor scalar(double v);
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

  const std::vector<int>& shape() const { return shape_; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // {C,H,W} accessors
  double& at(int c, int y, int x);
  double at(int c, int y, int x) const;

  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape_.size()); }

  void fill(double v);
  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  double sum() const;
  double min() const;
  double max() const;

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

/// Throws DomainError unless both tensors share a shape.
void check_same_shape(const Tensor& a, const Tensor& b, const char* where);

}  // namespace metavo
