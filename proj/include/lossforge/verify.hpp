#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "lossforge/errors.hpp"
#include "lossforge/rng.hpp"
#include "lossforge/svm.hpp"
#include "lossforge/tensor.hpp"

namespace lossforge {
namespace verify {

// ---------------------------------------------------------------------------
// Decision-rule disagreement for unequal multiplicative adjustments.
//
// The population minimizer of the parametric CE loss classifies by
// argmax_y a_y * eta_y(x)^(1/Delta_y) with a_y = exp(-l_y / Delta_y), while
// the target metric classifies by argmax_y c_y * eta_y(x). The construction
// anchors the likelihood level where the parametric rule ties, then rescales
// both likelihoods by 1/gamma to produce a second input. Unless the two
// multiplicative adjustments agree (or gamma = 1), the rule keeps a strict
// preference at the second input and must contradict the target decision for
// one sign of an arbitrarily small tie-breaking perturbation.
// ---------------------------------------------------------------------------

struct Lemma1Case {
  std::array<double, 2> delta{1.0, 2.0};  // multiplicative adjustments
  std::array<double, 2> l{0.0, 0.0};      // additive adjustments
  double gamma = 2.0;                     // likelihood scale between the two inputs
  std::array<double, 2> x1_likelihoods{0.0, 0.0};
  std::array<double, 2> x2_likelihoods{0.0, 0.0};

  void validate() const {
    if (!(delta[0] > 0.0) || !(delta[1] > 0.0)) throw ConfigError("lemma1: deltas must be > 0");
    if (!(gamma > 0.0)) throw ConfigError("lemma1: gamma must be > 0");
    for (double v : x1_likelihoods)
      if (!(v > 0.0 && v < 1.0)) throw ConfigError("lemma1: likelihoods must lie in (0, 1)");
    for (double v : x2_likelihoods)
      if (!(v > 0.0 && v < 1.0)) throw ConfigError("lemma1: likelihoods must lie in (0, 1)");
  }

  // true when the case falls in the regime the inconsistency argument covers
  bool inconsistency_regime() const { return delta[0] != delta[1] && gamma != 1.0; }

  // Builds the two-input construction: likelihoods tied for the target rule
  // at both inputs, anchored where the parametric rule ties at the first.
  static Lemma1Case construct(std::array<double, 2> delta, std::array<double, 2> l, double gamma) {
    Lemma1Case c;
    c.delta = delta;
    c.l = l;
    c.gamma = gamma;
    double db0 = 1.0 / delta[0], db1 = 1.0 / delta[1];
    double a0 = std::exp(-db0 * l[0]), a1 = std::exp(-db1 * l[1]);
    double level;
    if (db0 == db1) {
      if (a0 != a1)
        throw ConfigError("lemma1: equal adjustments need equal offsets for a tie anchor");
      level = 0.4;
    } else {
      level = std::pow(a1 / a0, 1.0 / (db0 - db1));
    }
    double lo = std::min(level, level / gamma), hi = std::max(level, level / gamma);
    if (!(lo > 0.0) || !(hi < 1.0))
      throw ConfigError("lemma1: tie level leaves (0, 1); choose smaller offsets");
    c.x1_likelihoods = {level, level};
    c.x2_likelihoods = {level / gamma, level / gamma};
    c.validate();
    return c;
  }
};

struct Lemma1Report {
  // decisions at (input 1, +eps), (input 1, -eps), (input 2, +eps), (input 2, -eps)
  std::array<int, 4> bayes_decisions{};
  std::array<int, 4> rule_decisions{};
  bool disagrees = false;
};

inline Lemma1Report lemma1_check(const Lemma1Case& c) {
  c.validate();
  double db0 = 1.0 / c.delta[0], db1 = 1.0 / c.delta[1];
  double a0 = std::exp(-db0 * c.l[0]), a1 = std::exp(-db1 * c.l[1]);
  const double h = 1e-6;

  Lemma1Report rep;
  int slot = 0;
  for (const auto& base : {c.x1_likelihoods, c.x2_likelihoods}) {
    for (double sign : {+1.0, -1.0}) {
      double e0 = base[0] * (1.0 + sign * h), e1 = base[1];
      rep.bayes_decisions[static_cast<size_t>(slot)] = e0 > e1 ? 0 : 1;
      double s0 = a0 * std::pow(e0, db0), s1 = a1 * std::pow(e1, db1);
      // treat near-exact parametric ties as following the perturbation
      double tol = 1e-10 * std::max(s0, s1);
      int rule;
      if (std::fabs(s0 - s1) <= tol)
        rule = sign > 0 ? 0 : 1;
      else
        rule = s0 > s1 ? 0 : 1;
      rep.rule_decisions[static_cast<size_t>(slot)] = rule;
      if (rule != rep.bayes_decisions[static_cast<size_t>(slot)]) rep.disagrees = true;
      ++slot;
    }
  }
  return rep;
}

inline nlohmann::json lemma1_verdict(const Lemma1Case& c, const Lemma1Report& r) {
  return nlohmann::json{{"check", "lemma1"},
                        {"delta", {c.delta[0], c.delta[1]}},
                        {"l", {c.l[0], c.l[1]}},
                        {"gamma", c.gamma},
                        {"bayes_decisions", r.bayes_decisions},
                        {"rule_decisions", r.rule_decisions},
                        {"disagrees", r.disagrees},
                        {"pass", r.disagrees == c.inconsistency_regime()}};
}

// ---------------------------------------------------------------------------
// Margin-solver equivalence: the asymmetric-margin solution equals the
// plain-margin solution on ball-augmented data with radii
// eps = (1/delta - 1) / ||w||.
// ---------------------------------------------------------------------------

struct Lemma2Report {
  double cosine = 0.0;
  double eps_plus = 0.0;
  double eps_minus = 0.0;
  bool pass = false;
};

inline double direction_cosine(const Tensor& a, const Tensor& b) {
  if (a.data.size() != b.data.size()) throw ShapeError("cosine: size mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    ab += a.data[i] * b.data[i];
    aa += a.data[i] * a.data[i];
    bb += b.data[i] * b.data[i];
  }
  if (aa == 0.0 || bb == 0.0) throw NumericalError("cosine: zero vector");
  return ab / std::sqrt(aa * bb);
}

inline Lemma2Report lemma2_check(const Tensor& x, const std::vector<int>& y, double delta_plus,
                                 double delta_minus) {
  svm::SvmSolution cs = svm::solve_cs_svm(x, y, delta_plus, delta_minus);
  Lemma2Report rep;
  rep.eps_plus = (1.0 / delta_plus - 1.0) / cs.objective;
  rep.eps_minus = (1.0 / delta_minus - 1.0) / cs.objective;
  svm::SvmSolution aug = svm::solve_augmented_svm_2d(x, y, rep.eps_plus, rep.eps_minus);
  rep.cosine = direction_cosine(cs.w, aug.w);
  rep.pass = rep.cosine >= 1.0 - 1e-6;
  return rep;
}

inline nlohmann::json lemma2_verdict(const Lemma2Report& r) {
  return nlohmann::json{{"check", "lemma2"},
                        {"cosine", r.cosine},
                        {"eps_plus", r.eps_plus},
                        {"eps_minus", r.eps_minus},
                        {"pass", r.pass}};
}

// ---------------------------------------------------------------------------
// Ridgeless direction: normalized gradient descent on the binary parametric
// loss  w_y * log(1 + exp(l_y) * exp(-Delta_y * y * theta.x))  with a linear
// model converges in direction to the asymmetric-margin solution for
// delta = Delta_minus / Delta_plus.
// ---------------------------------------------------------------------------

struct BinaryLossParams {
  double w_plus = 1.0, w_minus = 1.0;
  double l_plus = 0.0, l_minus = 0.0;
  double delta_plus = 0.5, delta_minus = 0.5;

  void validate() const {
    if (!(w_plus > 0.0) || !(w_minus > 0.0)) throw ConfigError("ridgeless: weights must be > 0");
    if (!(delta_plus > 0.0) || !(delta_minus > 0.0))
      throw ConfigError("ridgeless: multiplicative adjustments must be > 0");
  }
};

struct RidgelessReport {
  std::vector<double> cosine;  // one entry per recorded epoch
  Tensor w_ref;                // asymmetric-margin reference direction
  Tensor theta;                // final iterate
};

inline RidgelessReport ridgeless_direction(const Tensor& x, const std::vector<int>& y,
                                           const BinaryLossParams& p, int epochs = 1200,
                                           int steps_per_epoch = 50, double lr = 1.0) {
  svm::detail::check_binary_labels(x, y);
  p.validate();
  if (epochs < 1 || steps_per_epoch < 1 || !(lr > 0.0))
    throw ConfigError("ridgeless: bad schedule");
  const int n = x.rows(), d = x.cols();

  // the reference direction only depends on the margin ratio, so rescale the
  // adjustments into the solver's (0, 1) range
  double scale = 0.5 / std::max(p.delta_plus, p.delta_minus);
  svm::SvmSolution ref = svm::solve_cs_svm(x, y, scale * p.delta_plus, scale * p.delta_minus);

  std::vector<double> theta(static_cast<size_t>(d), 0.0), grad(static_cast<size_t>(d));
  RidgelessReport rep;
  rep.w_ref = ref.w;
  long long t = 0;
  for (int ep = 0; ep < epochs; ++ep) {
    for (int s = 0; s < steps_per_epoch; ++s, ++t) {
      std::fill(grad.begin(), grad.end(), 0.0);
      for (int i = 0; i < n; ++i) {
        bool pos = y[static_cast<size_t>(i)] == 1;
        double wy = pos ? p.w_plus : p.w_minus;
        double ly = pos ? p.l_plus : p.l_minus;
        double dy = pos ? p.delta_plus : p.delta_minus;
        double f = svm::detail::dot_row(x, i, theta);
        double z = ly - dy * y[static_cast<size_t>(i)] * f;
        double sig = 1.0 / (1.0 + std::exp(-z));
        double coef = -wy * dy * y[static_cast<size_t>(i)] * sig;
        for (int c = 0; c < d; ++c) grad[static_cast<size_t>(c)] += coef * x.at(i, c);
      }
      double gn = 0.0;
      for (double g : grad) gn += g * g;
      gn = std::sqrt(gn);
      if (gn == 0.0) break;
      double step = lr / std::sqrt(1.0 + static_cast<double>(t));
      for (int c = 0; c < d; ++c) theta[static_cast<size_t>(c)] -= step * grad[static_cast<size_t>(c)] / gn;
    }
    Tensor th = Tensor::zeros({d});
    th.data = theta;
    rep.cosine.push_back(direction_cosine(th, ref.w));
  }
  rep.theta = Tensor::zeros({d});
  rep.theta.data = theta;
  return rep;
}

inline nlohmann::json ridgeless_verdict(const RidgelessReport& r) {
  double final_cos = r.cosine.empty() ? 0.0 : r.cosine.back();
  bool tail_ok = true;
  for (size_t i = r.cosine.size() / 2; i + 1 < r.cosine.size(); ++i)
    if (r.cosine[i + 1] < r.cosine[i] - 1e-9) tail_ok = false;
  return nlohmann::json{{"check", "ridgeless"},
                        {"final_cosine", final_cos},
                        {"tail_monotone", tail_ok},
                        {"pass", final_cos >= 0.999 && tail_ok}};
}

// ---------------------------------------------------------------------------
// Validation-size trend: picking a decision threshold by weighted validation
// error approaches the population-optimal pick as the validation set grows.
// Classes are unit-variance-style Gaussians at -1/+1 scaled by sigma, so the
// population risks have closed forms and the excess risk is exact.
// ---------------------------------------------------------------------------

struct TrendConfig {
  double sigma = 1.2;      // class-conditional noise
  double lambda = 0.5;     // weight on the positive-class error
  int grid = 41;           // threshold candidates
  double lo = -1.5, hi = 1.5;

  void validate() const {
    if (!(sigma > 0.0)) throw ConfigError("trend: sigma must be > 0");
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("trend: lambda must lie in [0, 1]");
    if (grid < 1 || !(hi >= lo)) throw ConfigError("trend: bad threshold grid");
  }
};

struct TrendRow {
  int n_val = 0;
  double median_excess = 0.0;
};

inline double gauss_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// weighted population risk of the threshold rule sign(x - b)
inline double trend_population_risk(double b, const TrendConfig& cfg) {
  double err_plus = gauss_cdf((b - 1.0) / cfg.sigma);
  double err_minus = 1.0 - gauss_cdf((b + 1.0) / cfg.sigma);
  return cfg.lambda * err_plus + (1.0 - cfg.lambda) * err_minus;
}

inline std::vector<TrendRow> theorem1_trend(const std::vector<int>& val_sizes,
                                            const std::vector<std::uint64_t>& seeds,
                                            const TrendConfig& cfg = {}) {
  cfg.validate();
  if (val_sizes.empty() || seeds.empty()) throw ConfigError("trend: empty sweep");
  std::vector<double> grid(static_cast<size_t>(cfg.grid));
  for (int i = 0; i < cfg.grid; ++i)
    grid[static_cast<size_t>(i)] =
        cfg.grid == 1 ? cfg.lo : cfg.lo + (cfg.hi - cfg.lo) * i / (cfg.grid - 1);
  double best_pop = trend_population_risk(grid[0], cfg);
  for (double b : grid) best_pop = std::min(best_pop, trend_population_risk(b, cfg));

  std::vector<TrendRow> rows;
  for (int nv : val_sizes) {
    if (nv < 1) throw ConfigError("trend: validation sizes must be >= 1");
    std::vector<double> excess;
    for (std::uint64_t seed : seeds) {
      auto stream = RngStream::substream(seed, "trend-val");
      std::vector<double> xs(static_cast<size_t>(nv));
      std::vector<int> ys(static_cast<size_t>(nv));
      for (int i = 0; i < nv; ++i) {
        int label = stream.uniform_int(2) == 0 ? -1 : 1;
        ys[static_cast<size_t>(i)] = label;
        xs[static_cast<size_t>(i)] = label + cfg.sigma * stream.normal();
      }
      double best_emp = std::numeric_limits<double>::infinity();
      double picked = grid[0];
      for (double b : grid) {
        int np = 0, wp = 0, nm = 0, wm = 0;
        for (int i = 0; i < nv; ++i) {
          if (ys[static_cast<size_t>(i)] == 1) {
            ++np;
            if (xs[static_cast<size_t>(i)] < b) ++wp;
          } else {
            ++nm;
            if (xs[static_cast<size_t>(i)] >= b) ++wm;
          }
        }
        double ep = np > 0 ? static_cast<double>(wp) / np : 0.0;
        double em = nm > 0 ? static_cast<double>(wm) / nm : 0.0;
        double risk = cfg.lambda * ep + (1.0 - cfg.lambda) * em;
        if (risk < best_emp) {
          best_emp = risk;
          picked = b;
        }
      }
      excess.push_back(trend_population_risk(picked, cfg) - best_pop);
    }
    std::sort(excess.begin(), excess.end());
    size_t m = excess.size();
    double med = m % 2 == 1 ? excess[m / 2] : 0.5 * (excess[m / 2 - 1] + excess[m / 2]);
    rows.push_back({nv, med});
  }
  return rows;
}

inline nlohmann::json trend_verdict(const std::vector<TrendRow>& rows) {
  bool pass = true;
  nlohmann::json table = nlohmann::json::array();
  for (size_t i = 0; i < rows.size(); ++i) {
    table.push_back({{"n_val", rows[i].n_val}, {"median_excess", rows[i].median_excess}});
    if (i > 0 && rows[i].median_excess > rows[i - 1].median_excess + 1e-12) pass = false;
  }
  return nlohmann::json{{"check", "theorem1"}, {"table", table}, {"pass", pass}};
}

}  // namespace verify
}  // namespace lossforge
