#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lossforge/errors.hpp"

namespace lossforge {

// Dense row-major f64 tensor. Rank 0 (scalar), 1 (vector) and 2 (matrix) are
// the only ranks the op set produces.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != static_cast<size_t>(numel_of(shape)))
      throw ShapeError("tensor data length does not match shape");
  }

  static std::int64_t numel_of(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int e : s) {
      if (e < 0) throw ShapeError("negative shape extent");
      n *= e;
    }
    return n;
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vec(std::vector<double> d) {
    int n = static_cast<int>(d.size());
    return Tensor({n}, std::move(d));
  }
  static Tensor zeros(std::vector<int> s) {
    auto n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), 0.0));
  }
  static Tensor ones(std::vector<int> s) {
    auto n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), 1.0));
  }
  static Tensor full(std::vector<int> s, double v) {
    auto n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), v));
  }
  static Tensor matrix(int r, int c, std::vector<double> d) { return Tensor({r, c}, std::move(d)); }

  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int rows() const {
    if (rank() != 2) throw ShapeError("rows() on non-matrix");
    return shape[0];
  }
  int cols() const {
    if (rank() != 2) throw ShapeError("cols() on non-matrix");
    return shape[1];
  }

  double& at(int i) { return data[static_cast<size_t>(i)]; }
  double at(int i) const { return data[static_cast<size_t>(i)]; }
  double& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
  double at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }

  double scalar_value() const {
    if (numel() != 1) throw ShapeError("scalar_value() on tensor with numel != 1");
    return data[0];
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Block-vector helpers used by optimizers and oracles.
inline double dot(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) throw ShapeError("dot: shape mismatch");
  double s = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

inline double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

inline Tensor& axpy(Tensor& y, double a, const Tensor& x) {
  if (!same_shape(y, x)) throw ShapeError("axpy: shape mismatch");
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += a * x.data[i];
  return y;
}

inline Tensor scaled(const Tensor& x, double a) {
  Tensor out = x;
  for (double& v : out.data) v *= a;
  return out;
}

}  // namespace lossforge
