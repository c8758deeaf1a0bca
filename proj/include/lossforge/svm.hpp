#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "lossforge/errors.hpp"
#include "lossforge/tensor.hpp"

namespace lossforge {
namespace svm {

// Hard-margin solvers in homogeneous form: there is no intercept term, so
// every solution scales linearly with the requested margins. Callers that
// want an affine boundary append a constant feature.
struct SvmSolution {
  Tensor w;                   // [d]
  double objective = 0.0;     // ||w||_2
  std::vector<double> slack;  // per-point constraint slack, >= -1e-8
  std::vector<double> dual;   // duals scaled so sum_i dual_i*y_i*x_i = w/||w||
};

namespace detail {

inline void check_binary_labels(const Tensor& x, const std::vector<int>& y) {
  if (x.rank() != 2) throw ShapeError("svm: x must be n x d");
  if (static_cast<int>(y.size()) != x.rows()) throw ShapeError("svm: label count mismatch");
  bool pos = false, neg = false;
  for (int v : y) {
    if (v == 1)
      pos = true;
    else if (v == -1)
      neg = true;
    else
      throw ConfigError("svm: labels must be +1/-1");
  }
  if (!pos || !neg) throw ConfigError("svm: need both classes");
}

inline double dot_row(const Tensor& x, int i, const std::vector<double>& w) {
  double s = 0.0;
  for (int j = 0; j < x.cols(); ++j) s += x.at(i, j) * w[static_cast<size_t>(j)];
  return s;
}

}  // namespace detail

// Minimum-norm w with class-asymmetric margin requirements
//   w.x_i >= 1/delta_plus   (y_i = +1)
//   w.x_i <= -1/delta_minus (y_i = -1),
// solved by projected-gradient ascent on the dual of min 1/2||w||^2. The
// returned duals use the normalization that makes sum_i a_i*y_i*x_i a unit
// vector, so complementary slackness can be audited directly.
inline SvmSolution solve_cs_svm(const Tensor& x, const std::vector<int>& y, double delta_plus,
                                double delta_minus) {
  detail::check_binary_labels(x, y);
  if (!(delta_plus > 0.0 && delta_plus <= 1.0) || !(delta_minus > 0.0 && delta_minus <= 1.0))
    throw ConfigError("svm: margin scales must lie in (0, 1]");
  const int n = x.rows(), d = x.cols();
  std::vector<double> m(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) m[static_cast<size_t>(i)] = y[static_cast<size_t>(i)] == 1
                                                              ? 1.0 / delta_plus
                                                              : 1.0 / delta_minus;

  // gram matrix of the signed points and a safe step from its top eigenvalue
  std::vector<double> q(static_cast<size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int c = 0; c < d; ++c) s += x.at(i, c) * x.at(j, c);
      q[static_cast<size_t>(i) * n + j] = y[static_cast<size_t>(i)] * y[static_cast<size_t>(j)] * s;
    }
  std::vector<double> v(static_cast<size_t>(n), 1.0), qv(static_cast<size_t>(n));
  double lmax = 0.0;
  for (int it = 0; it < 50; ++it) {
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += q[static_cast<size_t>(i) * n + j] * v[static_cast<size_t>(j)];
      qv[static_cast<size_t>(i)] = s;
    }
    double nrm = 0.0;
    for (double t : qv) nrm += t * t;
    nrm = std::sqrt(nrm);
    if (nrm == 0.0) break;
    lmax = nrm;
    for (int i = 0; i < n; ++i) v[static_cast<size_t>(i)] = qv[static_cast<size_t>(i)] / nrm;
  }
  if (lmax <= 0.0) throw NumericalError("svm: degenerate gram matrix");
  const double step = 1.0 / lmax;

  std::vector<double> alpha(static_cast<size_t>(n), 0.0), wv(static_cast<size_t>(d), 0.0);
  const double mscale = *std::max_element(m.begin(), m.end());
  const int max_iters = 2000000;
  int it = 0;
  for (; it < max_iters; ++it) {
    for (int c = 0; c < d; ++c) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += alpha[static_cast<size_t>(i)] * y[static_cast<size_t>(i)] * x.at(i, c);
      wv[static_cast<size_t>(c)] = s;
    }
    double move = 0.0, blowup = 0.0;
    for (int i = 0; i < n; ++i) {
      double grad = m[static_cast<size_t>(i)] - y[static_cast<size_t>(i)] * detail::dot_row(x, i, wv);
      double next = std::max(0.0, alpha[static_cast<size_t>(i)] + step * grad);
      move = std::max(move, std::fabs(next - alpha[static_cast<size_t>(i)]));
      alpha[static_cast<size_t>(i)] = next;
      blowup = std::max(blowup, next);
    }
    if (blowup > 1e10) throw InfeasibleError("svm: margins unreachable (data not separable)");
    if (move <= 1e-13 * mscale) break;
  }

  SvmSolution sol;
  sol.w = Tensor::zeros({d});
  for (int c = 0; c < d; ++c) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += alpha[static_cast<size_t>(i)] * y[static_cast<size_t>(i)] * x.at(i, c);
    sol.w.data[static_cast<size_t>(c)] = s;
  }
  sol.objective = 0.0;
  for (double t : sol.w.data) sol.objective += t * t;
  sol.objective = std::sqrt(sol.objective);
  if (!(sol.objective > 0.0)) throw NumericalError("svm: zero solution");
  sol.slack.resize(static_cast<size_t>(n));
  sol.dual.resize(static_cast<size_t>(n));
  double worst = 0.0;
  for (int i = 0; i < n; ++i) {
    double s = y[static_cast<size_t>(i)] * detail::dot_row(x, i, sol.w.data) - m[static_cast<size_t>(i)];
    sol.slack[static_cast<size_t>(i)] = s;
    sol.dual[static_cast<size_t>(i)] = alpha[static_cast<size_t>(i)] / sol.objective;
    worst = std::min(worst, s);
  }
  if (worst < -1e-6 * mscale) throw InfeasibleError("svm: margins unreachable (data not separable)");
  if (it == max_iters) throw NumericalError("svm: dual ascent did not converge");
  return sol;
}

// Minimum-norm w whose margin survives replacing each point by a ball:
//   w.x_i - eps_plus*||w||  >= 1  (y_i = +1)
//   w.x_i + eps_minus*||w|| <= -1 (y_i = -1).
// 2-d only: for a fixed unit direction u the smallest feasible radius is
// max_i 1/(u-margin of x_i), so a circle scan plus golden-section refinement
// of the angle solves the norm-coupled program exactly at desk scale.
inline SvmSolution solve_augmented_svm_2d(const Tensor& x, const std::vector<int>& y,
                                          double eps_plus, double eps_minus) {
  detail::check_binary_labels(x, y);
  if (x.cols() != 2) throw ShapeError("svm: augmented solver is 2-d only");
  if (eps_plus < 0.0 || eps_minus < 0.0) throw ConfigError("svm: ball radii must be >= 0");
  const int n = x.rows();

  auto radius = [&](double phi) {
    double ux = std::cos(phi), uy = std::sin(phi);
    double r = 0.0;
    for (int i = 0; i < n; ++i) {
      double a = ux * x.at(i, 0) + uy * x.at(i, 1);
      double denom = y[static_cast<size_t>(i)] == 1 ? a - eps_plus : -a - eps_minus;
      if (denom <= 0.0) return std::numeric_limits<double>::infinity();
      r = std::max(r, 1.0 / denom);
    }
    return r;
  };

  const int grid = 8192;
  const double dphi = 2.0 * M_PI / grid;
  int best = -1;
  double best_r = std::numeric_limits<double>::infinity();
  for (int j = 0; j < grid; ++j) {
    double r = radius(j * dphi);
    if (r < best_r) {
      best_r = r;
      best = j;
    }
  }
  if (best < 0) throw InfeasibleError("svm: no direction satisfies the augmented margins");

  // the feasible arc makes the per-direction radius unimodal, so the grid
  // bracket around the best sample contains the true minimizer
  double lo = (best - 1) * dphi, hi = (best + 1) * dphi;
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = hi - gr * (hi - lo), dpt = lo + gr * (hi - lo);
  double fc = radius(c), fd = radius(dpt);
  while (hi - lo > 1e-10) {
    if (fc < fd) {
      hi = dpt;
      dpt = c;
      fd = fc;
      c = hi - gr * (hi - lo);
      fc = radius(c);
    } else {
      lo = c;
      c = dpt;
      fc = fd;
      dpt = lo + gr * (hi - lo);
      fd = radius(dpt);
    }
  }
  double phi = 0.5 * (lo + hi), r = radius(phi);
  if (!std::isfinite(r)) throw InfeasibleError("svm: no direction satisfies the augmented margins");

  SvmSolution sol;
  sol.w = Tensor::vec({r * std::cos(phi), r * std::sin(phi)});
  sol.objective = r;
  sol.slack.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double a = sol.w.data[0] * x.at(i, 0) + sol.w.data[1] * x.at(i, 1);
    sol.slack[static_cast<size_t>(i)] =
        y[static_cast<size_t>(i)] == 1 ? a - eps_plus * r - 1.0 : -a - eps_minus * r - 1.0;
  }
  return sol;
}

}  // namespace svm
}  // namespace lossforge
