#pragma once

// Active-set enumeration oracle for tiny hard-margin problems:
//   min 1/2 ||w||^2  s.t.  y_i * (w . x_i) >= m_i.
// Every subset of at most d constraints is solved in closed form; a subset is
// a KKT point when its multipliers are nonnegative and the resulting w is
// feasible for all constraints. Exponential in n, airtight for n <= ~20.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "lossforge/tensor.hpp"
#include "support/linalg.hpp"

namespace lftest {

inline std::vector<double> qp_min_norm(const lossforge::Tensor& x, const std::vector<int>& y,
                                       const std::vector<double>& m) {
  int n = x.rows(), d = x.cols();
  std::vector<std::vector<double>> rows(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(d)));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) rows[static_cast<size_t>(i)][static_cast<size_t>(j)] = y[static_cast<size_t>(i)] * x.at(i, j);

  auto feasible = [&](const std::vector<double>& w) {
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = 0; j < d; ++j) s += rows[static_cast<size_t>(i)][static_cast<size_t>(j)] * w[static_cast<size_t>(j)];
      if (s < m[static_cast<size_t>(i)] - 1e-9) return false;
    }
    return true;
  };

  std::vector<double> best;
  double best_norm2 = 0.0;
  auto consider = [&](const std::vector<int>& subset) {
    size_t k = subset.size();
    // solve G lambda = m_S with G the gram matrix of the active rows
    std::vector<std::vector<double>> g(k, std::vector<double>(k));
    std::vector<double> b(k);
    for (size_t a = 0; a < k; ++a) {
      b[a] = m[static_cast<size_t>(subset[a])];
      for (size_t c = 0; c < k; ++c) {
        double s = 0.0;
        for (int j = 0; j < d; ++j)
          s += rows[static_cast<size_t>(subset[a])][static_cast<size_t>(j)] *
               rows[static_cast<size_t>(subset[c])][static_cast<size_t>(j)];
        g[a][c] = s;
      }
    }
    std::vector<double> lam;
    try {
      lam = dense_solve(std::move(g), std::move(b));
    } catch (const std::runtime_error&) {
      return;  // degenerate subset
    }
    for (double v : lam)
      if (v < -1e-9) return;
    std::vector<double> w(static_cast<size_t>(d), 0.0);
    for (size_t a = 0; a < k; ++a)
      for (int j = 0; j < d; ++j)
        w[static_cast<size_t>(j)] += lam[a] * rows[static_cast<size_t>(subset[a])][static_cast<size_t>(j)];
    if (!feasible(w)) return;
    double n2 = 0.0;
    for (double v : w) n2 += v * v;
    if (best.empty() || n2 < best_norm2) {
      best = w;
      best_norm2 = n2;
    }
  };

  std::vector<int> subset;
  // depth-first enumeration of subsets of size 1..d
  std::vector<int> stack;
  auto rec = [&](auto&& self, int start) -> void {
    if (!subset.empty()) consider(subset);
    if (static_cast<int>(subset.size()) == d) return;
    for (int i = start; i < n; ++i) {
      subset.push_back(i);
      self(self, i + 1);
      subset.pop_back();
    }
  };
  rec(rec, 0);
  if (best.empty()) throw std::runtime_error("qp_min_norm: no KKT subset found (infeasible?)");
  return best;
}

}  // namespace lftest
