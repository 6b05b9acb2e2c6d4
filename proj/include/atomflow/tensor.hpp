#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "atomflow/common.hpp"

namespace atomflow {

// Dense n-dimensional array of f64, row-major. Values are plain data with
// copy semantics; sharing across threads is safe because all mutation goes
// through the owner.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(checked_numel(shape_), 0.0);
  }

  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    AF_CHECK(data_.size() == checked_numel(shape_),
             "tensor data length " << data_.size() << " does not match shape "
                                   << shape_str());
  }

  static Tensor full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    for (double& v : t.data_) v = value;
    return t;
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  const std::vector<int>& shape() const { return shape_; }
  size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }

  // Offset helpers for the layouts the model uses (NHWC and friends).
  size_t idx2(int a, int b) const { return static_cast<size_t>(a) * dim(1) + b; }
  size_t idx3(int a, int b, int c) const {
    return (static_cast<size_t>(a) * dim(1) + b) * dim(2) + c;
  }
  size_t idx4(int a, int b, int c, int d) const {
    return ((static_cast<size_t>(a) * dim(1) + b) * static_cast<size_t>(dim(2)) + c) *
               dim(3) +
           d;
  }

  double& at2(int a, int b) { return data_[idx2(a, b)]; }
  double at2(int a, int b) const { return data_[idx2(a, b)]; }
  double& at3(int a, int b, int c) { return data_[idx3(a, b, c)]; }
  double at3(int a, int b, int c) const { return data_[idx3(a, b, c)]; }
  double& at4(int a, int b, int c, int d) { return data_[idx4(a, b, c, d)]; }
  double at4(int a, int b, int c, int d) const { return data_[idx4(a, b, c, d)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // Reinterpret with a new shape of equal element count.
  Tensor reshaped(std::vector<int> shape) const {
    Tensor t;
    t.shape_ = std::move(shape);
    AF_CHECK(checked_numel(t.shape_) == data_.size(),
             "reshape " << shape_str() << " -> " << t.shape_str()
                        << " changes element count");
    t.data_ = data_;
    return t;
  }

  void fill(double v) {
    for (double& x : data_) x = v;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

 private:
  static size_t checked_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
      AF_CHECK(d > 0, "tensor dims must be positive, got " << d);
      n *= static_cast<size_t>(d);
    }
    return n;
  }

  std::vector<int> shape_;
  std::vector<double> data_;
};

inline bool all_finite(const Tensor& t) {
  for (size_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(t[i])) return false;
  }
  return true;
}

inline double dot_flat(const Tensor& a, const Tensor& b) {
  AF_CHECK(a.numel() == b.numel(), "dot_flat size mismatch");
  double s = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  AF_CHECK(a.same_shape(b), "max_abs_diff shape mismatch " << a.shape_str()
                                                           << " vs " << b.shape_str());
  double m = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (size_t i = 0; i < a.numel(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

}  // namespace atomflow
