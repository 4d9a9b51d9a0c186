#pragma once

#include <initializer_list>
#include <vector>

#include "amortda/common.hpp"

namespace amortda {

/// Dense row-major tensor of 64-bit reals, rank 0..3 in practice.
/// Values must be finite; construction from external data validates.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(compute_size()), 0.0);
  }

  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<size_t>(compute_size()) != data_.size())
      throw Error("Tensor: data length does not match shape product");
    check_finite("Tensor construction");
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    t.check_finite("Tensor::full");
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int size() const { return static_cast<int>(data_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](int i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int i) const { return data_[static_cast<size_t>(i)]; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void check_finite(const char* what) const;

  bool requires_grad = false;

 private:
  long compute_size() const {
    long n = 1;
    for (int d : shape_) {
      if (d <= 0) throw Error("Tensor: shape entries must be positive");
      n *= d;
    }
    return n;
  }

  std::vector<int> shape_;
  std::vector<double> data_;
};

}  // namespace amortda
