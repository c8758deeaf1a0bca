#pragma once

// Small dense linear-algebra oracles for the test suites (Gaussian
// elimination with partial pivoting, power iteration). Independent of the
// library under test.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "lossforge/tensor.hpp"

namespace lftest {

using lossforge::Tensor;

// Solves A x = b for square A.
inline std::vector<double> dense_solve(std::vector<std::vector<double>> a, std::vector<double> b) {
  size_t n = a.size();
  for (size_t col = 0; col < n; ++col) {
    size_t piv = col;
    for (size_t r = col + 1; r < n; ++r)
      if (std::fabs(a[r][col]) > std::fabs(a[piv][col])) piv = r;
    if (std::fabs(a[piv][col]) < 1e-14) throw std::runtime_error("dense_solve: singular matrix");
    std::swap(a[col], a[piv]);
    std::swap(b[col], b[piv]);
    for (size_t r = col + 1; r < n; ++r) {
      double f = a[r][col] / a[col][col];
      if (f == 0.0) continue;
      for (size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> x(n, 0.0);
  for (size_t r = n; r-- > 0;) {
    double s = b[r];
    for (size_t c = r + 1; c < n; ++c) s -= a[r][c] * x[c];
    x[r] = s / a[r][r];
  }
  return x;
}

inline std::vector<double> dense_solve(const Tensor& a, const Tensor& b) {
  int n = a.rows();
  std::vector<std::vector<double>> m(n, std::vector<double>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m[i][j] = a.at(i, j);
  return dense_solve(std::move(m), b.data);
}

// Largest eigenvalue of a symmetric matrix by power iteration.
inline double power_lambda_max(const Tensor& a, int iters = 2000) {
  int n = a.rows();
  std::vector<double> v(n, 1.0);
  double lam = 0.0;
  for (int it = 0; it < iters; ++it) {
    std::vector<double> w(n, 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) w[i] += a.at(i, j) * v[j];
    double norm = 0.0;
    for (double x : w) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) return 0.0;
    for (int i = 0; i < n; ++i) v[i] = w[i] / norm;
    lam = norm;
  }
  return lam;
}

}  // namespace lftest
