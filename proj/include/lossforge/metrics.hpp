#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lossforge/dataset.hpp"
#include "lossforge/errors.hpp"
#include "lossforge/model.hpp"
#include "lossforge/tensor.hpp"

namespace lossforge::metrics {

struct MetricsReport {
  double std_err = 0.0;
  double balanced_err = 0.0;
  Tensor per_class_err;                     // length K
  std::optional<double> group_balanced_err;
  std::optional<Tensor> per_cell_err;       // K x G
  std::optional<double> deo;                // binary task with two groups only
  std::optional<double> worst_cell_err;
};

inline std::vector<int> predict(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("predict: logits must be a matrix");
  std::vector<int> out(static_cast<size_t>(logits.rows()));
  for (int i = 0; i < logits.rows(); ++i) {
    int best = 0;
    for (int c = 1; c < logits.cols(); ++c)
      if (logits.at(i, c) > logits.at(i, best)) best = c;  // ties keep the lowest index
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

inline MetricsReport evaluate(const Tensor& logits, const data::Dataset& ds) {
  ds.validate();
  if (logits.rank() != 2 || logits.rows() != ds.n() || logits.cols() != ds.num_classes)
    throw ShapeError("evaluate: logits do not match the dataset");
  auto preds = predict(logits);
  int k = ds.num_classes;

  MetricsReport rep;
  std::vector<int> class_n(static_cast<size_t>(k), 0), class_w(static_cast<size_t>(k), 0);
  int wrong = 0;
  for (int i = 0; i < ds.n(); ++i) {
    int y = ds.y[static_cast<size_t>(i)];
    ++class_n[static_cast<size_t>(y)];
    if (preds[static_cast<size_t>(i)] != y) {
      ++wrong;
      ++class_w[static_cast<size_t>(y)];
    }
  }
  rep.std_err = static_cast<double>(wrong) / ds.n();
  rep.per_class_err = Tensor::zeros({k});
  for (int c = 0; c < k; ++c) {
    if (class_n[static_cast<size_t>(c)] == 0)
      throw EvalError("evaluate: class " + std::to_string(c) + " missing from the eval set");
    rep.per_class_err.data[c] =
        static_cast<double>(class_w[static_cast<size_t>(c)]) / class_n[static_cast<size_t>(c)];
  }
  rep.balanced_err =
      std::accumulate(rep.per_class_err.data.begin(), rep.per_class_err.data.end(), 0.0) / k;

  if (ds.has_groups()) {
    int ngroups = ds.num_groups;
    std::vector<int> cell_n(static_cast<size_t>(k * ngroups), 0),
        cell_w(static_cast<size_t>(k * ngroups), 0);
    for (int i = 0; i < ds.n(); ++i) {
      int cell = ds.y[static_cast<size_t>(i)] * ngroups + ds.groups[static_cast<size_t>(i)];
      ++cell_n[static_cast<size_t>(cell)];
      if (preds[static_cast<size_t>(i)] != ds.y[static_cast<size_t>(i)])
        ++cell_w[static_cast<size_t>(cell)];
    }
    Tensor cells = Tensor::zeros({k, ngroups});
    for (int c = 0; c < k * ngroups; ++c) {
      if (cell_n[static_cast<size_t>(c)] == 0)
        throw EvalError("evaluate: (class,group) cell " + std::to_string(c / ngroups) + "," +
                        std::to_string(c % ngroups) + " missing from the eval set");
      cells.data[c] =
          static_cast<double>(cell_w[static_cast<size_t>(c)]) / cell_n[static_cast<size_t>(c)];
    }
    rep.per_cell_err = cells;
    rep.group_balanced_err =
        std::accumulate(cells.data.begin(), cells.data.end(), 0.0) / (k * ngroups);
    rep.worst_cell_err = *std::max_element(cells.data.begin(), cells.data.end());
    if (k == 2 && ngroups == 2)
      rep.deo = std::fabs(cells.at(0, 0) - cells.at(0, 1)) +
                std::fabs(cells.at(1, 0) - cells.at(1, 1));
  }
  return rep;
}

inline MetricsReport evaluate(const ModelSpec& spec, const Tensor& theta,
                              const data::Dataset& ds) {
  return evaluate(model_logits_plain(spec, theta, ds.x), ds);
}

inline nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json j{{"std_err", r.std_err},
                   {"balanced_err", r.balanced_err},
                   {"per_class_err", r.per_class_err.data}};
  if (r.group_balanced_err) j["group_balanced_err"] = *r.group_balanced_err;
  if (r.per_cell_err) j["per_cell_err"] = r.per_cell_err->data;
  if (r.deo) j["deo"] = *r.deo;
  if (r.worst_cell_err) j["worst_cell_err"] = *r.worst_cell_err;
  return j;
}

// ----- accuracy/fairness frontier --------------------------------------------

struct ParetoPoint {
  double lambda = 0.0;
  double std_err = 0.0;
  double fairness_value = 0.0;
  std::string tag;
};

// Keeps the points no other point beats in one coordinate without losing the
// other; result sorted by std_err, insertion order preserved among equals.
inline std::vector<ParetoPoint> pareto_front(const std::vector<ParetoPoint>& points) {
  if (points.empty()) throw ConfigError("pareto_front: no points");
  for (const auto& p : points)
    if (!std::isfinite(p.std_err) || !std::isfinite(p.fairness_value))
      throw ConfigError("pareto_front: non-finite point");
  std::vector<ParetoPoint> kept;
  for (size_t i = 0; i < points.size(); ++i) {
    bool dominated = false;
    for (size_t j = 0; j < points.size() && !dominated; ++j) {
      if (j == i) continue;
      bool no_worse = points[j].std_err <= points[i].std_err &&
                      points[j].fairness_value <= points[i].fairness_value;
      bool better = points[j].std_err < points[i].std_err ||
                    points[j].fairness_value < points[i].fairness_value;
      dominated = no_worse && better;
    }
    if (!dominated) kept.push_back(points[i]);
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const ParetoPoint& a, const ParetoPoint& b) { return a.std_err < b.std_err; });
  return kept;
}

// ----- posthoc vector scaling -------------------------------------------------

struct PosthocGrid {
  double w_lo = 0.5, w_hi = 2.0, w_step = 0.05;
  double b_lo = -2.0, b_hi = 2.0, b_step = 0.05;

  void validate() const {
    if (!(w_step > 0.0) || !(b_step > 0.0) || w_hi < w_lo || b_hi < b_lo)
      throw ConfigError("posthoc grid: degenerate grid");
  }
  int w_count() const { return static_cast<int>(std::floor((w_hi - w_lo) / w_step + 1e-9)) + 1; }
  int b_count() const { return static_cast<int>(std::floor((b_hi - b_lo) / b_step + 1e-9)) + 1; }
};

struct PosthocObjective {
  enum class Kind { kBalanced, kBlend };
  Kind kind = Kind::kBalanced;
  double lambda = 0.0;  // blend: (1-lambda)*balanced_err + lambda*deo

  static PosthocObjective balanced() { return {}; }
  static PosthocObjective blend(double lambda) {
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("posthoc objective: lambda out of range");
    return {Kind::kBlend, lambda};
  }

  double operator()(const MetricsReport& r) const {
    if (kind == Kind::kBalanced) return r.balanced_err;
    if (!r.deo) throw EvalError("posthoc objective: blend needs a two-group binary task");
    return (1.0 - lambda) * r.balanced_err + lambda * *r.deo;
  }
};

struct PosthocResult {
  Tensor w;  // 2 entries, second fixed at 1
  Tensor b;  // 2 entries, second fixed at 0
  int grid_index = 0;
  double objective_value = 0.0;
  MetricsReport report;
};

// Grid argmin over f' = w (.) f + b with (w2, b2) pinned to (1, 0); only the
// relative scale and shift move a binary argmax. Ties resolve to the earliest
// grid point (w outer loop, b inner).
inline PosthocResult posthoc_vector_scaling(const Tensor& logits, const data::Dataset& ds,
                                            const PosthocObjective& objective,
                                            const PosthocGrid& grid = {}) {
  grid.validate();
  if (logits.rank() != 2 || logits.cols() != 2)
    throw ShapeError("posthoc scaling: needs binary logits");
  PosthocResult best;
  bool have = false;
  Tensor adjusted = logits;
  for (int iw = 0; iw < grid.w_count(); ++iw) {
    double w1 = grid.w_lo + iw * grid.w_step;
    for (int ib = 0; ib < grid.b_count(); ++ib) {
      double b1 = grid.b_lo + ib * grid.b_step;
      for (int i = 0; i < logits.rows(); ++i) adjusted.at(i, 0) = w1 * logits.at(i, 0) + b1;
      MetricsReport rep = evaluate(adjusted, ds);
      double val = objective(rep);
      if (!have || val < best.objective_value) {
        have = true;
        best.w = Tensor::vec({w1, 1.0});
        best.b = Tensor::vec({b1, 0.0});
        best.grid_index = iw * grid.b_count() + ib;
        best.objective_value = val;
        best.report = rep;
      }
    }
  }
  return best;
}

// ----- rank statistics ---------------------------------------------------------

// average ranks, ties share the mean of their positions
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  size_t n = v.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double spearman_rank(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2)
    throw ShapeError("spearman: need two equal-length series");
  auto ra = average_ranks(a), rb = average_ranks(b);
  double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) ma += ra[i], mb += rb[i];
  ma /= n, mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) throw NumericalError("spearman: a series is constant");
  return cov / std::sqrt(va * vb);
}

}  // namespace lossforge::metrics
