#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "negcut/common.hpp"
#include "negcut/rng.hpp"

namespace negcut {

using EMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMatrix>;
using ECMap = Eigen::Map<const EMatrix>;

/// Dense row-major double tensor. The workhorse value type of the whole
/// library; shape conventions are [C,H,W] for images and [rows, cols]
/// for matrices.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  }
  Tensor(std::vector<int64_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    check_invariant(static_cast<int64_t>(data.size()) == numel_of(shape),
                    "Tensor: data size does not match shape");
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int64_t> s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor randn(std::vector<int64_t> s, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(s));
    for (double& v : t.data) v = stddev * rng.normal();
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // [C,H,W] indexing
  double& at3(int64_t c, int64_t h, int64_t w) {
    return data[static_cast<size_t>((c * shape[1] + h) * shape[2] + w)];
  }
  double at3(int64_t c, int64_t h, int64_t w) const {
    return data[static_cast<size_t>((c * shape[1] + h) * shape[2] + w)];
  }
  // [rows, cols] indexing
  double& at2(int64_t r, int64_t c) {
    return data[static_cast<size_t>(r * shape[1] + c)];
  }
  double at2(int64_t r, int64_t c) const {
    return data[static_cast<size_t>(r * shape[1] + c)];
  }

  /// 2-D Eigen view; for higher-rank tensors pass explicit rows/cols.
  EMap mat(int64_t rows, int64_t cols) {
    check_invariant(rows * cols == numel(), "Tensor::mat: bad view shape");
    return EMap(data.data(), rows, cols);
  }
  ECMap mat(int64_t rows, int64_t cols) const {
    check_invariant(rows * cols == numel(), "Tensor::mat: bad view shape");
    return ECMap(data.data(), rows, cols);
  }
  EMap mat() {
    check_invariant(ndim() == 2, "Tensor::mat: tensor is not 2-D");
    return mat(shape[0], shape[1]);
  }
  ECMap mat() const {
    check_invariant(ndim() == 2, "Tensor::mat: tensor is not 2-D");
    return mat(shape[0], shape[1]);
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double abs_sum() const {
    double s = 0.0;
    for (double v : data) s += std::abs(v);
    return s;
  }

  double norm2() const {
    double s = 0.0;
    for (double v : data) s += v * v;
    return std::sqrt(s);
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

inline double l2_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Direction-preserving unit normalization. Near-zero vectors are a hard
/// error: a dead embedding should be surfaced, not papered over.
inline std::vector<double> l2_normalize(const std::vector<double>& v,
                                        double eps = 1e-12) {
  const double n = l2_norm(v);
  if (!(n > eps))
    throw degenerate_input("l2_normalize: vector norm " + std::to_string(n) +
                           " is below " + std::to_string(eps));
  std::vector<double> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), "dot: dimension mismatch");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace negcut
