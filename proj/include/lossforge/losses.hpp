#pragma once

#include <atomic>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "lossforge/dataset.hpp"
#include "lossforge/errors.hpp"
#include "lossforge/graph.hpp"
#include "lossforge/loss_params.hpp"
#include "lossforge/model.hpp"
#include "lossforge/rng.hpp"
#include "lossforge/tensor.hpp"

namespace lossforge::loss {

namespace detail {

inline double logsumexp(const std::vector<double>& z) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

inline void warn_limited(std::atomic<int>& budget, const std::string& msg) {
  int left = budget.fetch_sub(1);
  if (left > 0)
    log_warn(msg + (left == 1 ? " (suppressing further warnings of this kind)" : ""));
}

inline std::vector<int> batch_counts(const std::vector<int>& y, int num_classes) {
  std::vector<int> c(static_cast<size_t>(num_classes), 0);
  for (int v : y) {
    if (v < 0 || v >= num_classes) throw ShapeError("loss: label out of range");
    ++c[static_cast<size_t>(v)];
  }
  return c;
}

}  // namespace detail

// Multiplicative/additive adjusted cross entropy for one sample:
//   w_y * (logsumexp_k(delta_k f_k + l_k) - (delta_y f_y + l_y)).
// Takes the margin scalings directly; training paths squash raw values
// through a sigmoid before calling in here.
inline double parametric_ce(int y, const Tensor& logits, const Tensor& w, const Tensor& l,
                            const Tensor& delta) {
  if (logits.rank() != 1) throw ShapeError("parametric_ce: logits must be a vector");
  int k = logits.shape[0];
  if (y < 0 || y >= k) throw ShapeError("parametric_ce: label out of range");
  if (w.shape != logits.shape || l.shape != logits.shape || delta.shape != logits.shape)
    throw ShapeError("parametric_ce: parameter vectors must match logits length");
  std::vector<double> z(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) z[static_cast<size_t>(i)] = delta.data[i] * logits.data[i] + l.data[i];
  return w.data[y] * (detail::logsumexp(z) - z[static_cast<size_t>(y)]);
}

// Group-aware variant: every (class, group) cell carries its own adjustment.
inline double group_parametric_ce(int y, int grp, const Tensor& logits, const Tensor& w_mat,
                                  const Tensor& l_mat, const Tensor& delta_eff_mat) {
  if (logits.rank() != 1) throw ShapeError("group_parametric_ce: logits must be a vector");
  int k = logits.shape[0];
  if (w_mat.rank() != 2 || w_mat.shape[0] != k)
    throw ShapeError("group_parametric_ce: parameter matrices must be classes x groups");
  int ngroups = w_mat.shape[1];
  if (l_mat.shape != w_mat.shape || delta_eff_mat.shape != w_mat.shape)
    throw ShapeError("group_parametric_ce: parameter matrices must agree in shape");
  if (y < 0 || y >= k || grp < 0 || grp >= ngroups)
    throw ShapeError("group_parametric_ce: label or group out of range");
  Tensor w = Tensor::zeros({k}), l = Tensor::zeros({k}), d = Tensor::zeros({k});
  for (int c = 0; c < k; ++c) {
    w.data[c] = w_mat.at(c, grp);
    l.data[c] = l_mat.at(c, grp);
    d.data[c] = delta_eff_mat.at(c, grp);
  }
  return parametric_ce(y, logits, w, l, d);
}

inline double group_parametric_ce(int y, int grp, const Tensor& logits,
                                  const GroupLossParams& params) {
  Tensor d = params.delta_eff();
  return group_parametric_ce(y, grp, logits, params.w(), params.l(), d);
}

// ---------------------------------------------------------------------------
// Tape builders. All take logits of shape (n, k) and integer labels.
// ---------------------------------------------------------------------------

inline ad::Var ce_rows(ad::Graph& g, ad::Var logits, const std::vector<int>& y) {
  auto shape = g.shape_of(logits);
  if (shape.size() != 2) throw ShapeError("ce_rows: logits must be a matrix");
  if (static_cast<int>(y.size()) != shape[0]) throw ShapeError("ce_rows: label count mismatch");
  return g.sub(g.logsumexp_rows(logits), g.take_per_row(logits, y));
}

// Rows of the adjusted CE with per-class scaling delta_eff and offset l.
inline ad::Var adjusted_ce_rows(ad::Graph& g, ad::Var logits, const std::vector<int>& y,
                                ad::Var l, ad::Var delta_eff) {
  auto shape = g.shape_of(logits);
  if (shape.size() != 2) throw ShapeError("adjusted_ce_rows: logits must be a matrix");
  int n = shape[0], k = shape[1];
  if (g.shape_of(l) != std::vector<int>{k} || g.shape_of(delta_eff) != std::vector<int>{k})
    throw ShapeError("adjusted_ce_rows: adjustment vectors must have one entry per class");
  ad::Var z = g.add(g.mul(logits, g.broadcast_row(delta_eff, n)), g.broadcast_row(l, n));
  return ce_rows(g, z, y);
}

inline ad::Var parametric_ce_mean(ad::Graph& g, ad::Var logits, const std::vector<int>& y,
                                  ad::Var w, ad::Var l, ad::Var delta_eff) {
  int n = g.shape_of(logits)[0];
  ad::Var rows = adjusted_ce_rows(g, logits, y, l, delta_eff);
  return g.scale(g.sum_all(g.mul(g.gather(w, y), rows)), 1.0 / n);
}

inline ad::Var mean_ce(ad::Graph& g, ad::Var logits, const std::vector<int>& y) {
  int n = g.shape_of(logits)[0];
  return g.scale(g.sum_all(ce_rows(g, logits, y)), 1.0 / n);
}

// Mean of per-class mean CE. Classes absent from the batch contribute zero
// while the denominator stays at num_classes.
inline ad::Var balanced_ce(ad::Graph& g, ad::Var logits, const std::vector<int>& y,
                           int num_classes) {
  if (g.shape_of(logits)[1] != num_classes) throw ShapeError("balanced_ce: class count mismatch");
  auto counts = detail::batch_counts(y, num_classes);
  Tensor inv = Tensor::zeros({num_classes});
  static std::atomic<int> warn_budget{8};
  for (int c = 0; c < num_classes; ++c) {
    if (counts[static_cast<size_t>(c)] == 0)
      detail::warn_limited(warn_budget,
                           "balanced_ce: class " + std::to_string(c) + " absent from batch");
    else
      inv.data[c] = 1.0 / counts[static_cast<size_t>(c)];
  }
  ad::Var sums = g.scatter_add(ce_rows(g, logits, y), y, num_classes);
  return g.scale(g.sum_all(g.mul(sums, g.constant(inv))), 1.0 / num_classes);
}

inline ad::Var weighted_ce(ad::Graph& g, ad::Var logits, const std::vector<int>& y, ad::Var w) {
  int n = g.shape_of(logits)[0];
  if (g.shape_of(w) != std::vector<int>{g.shape_of(logits)[1]})
    throw ShapeError("weighted_ce: weight vector must have one entry per class");
  return g.scale(g.sum_all(g.mul(g.gather(w, y), ce_rows(g, logits, y))), 1.0 / n);
}

// Differentiable stand-in for the equal-opportunity gap on a binary task with
// two groups: |m(0,0)-m(0,1)| + |m(1,0)-m(1,1)| where m(c,g) is the mean CE of
// cell (c,g). Empty cells contribute zero.
inline ad::Var deo_surrogate_ce(ad::Graph& g, ad::Var logits, const std::vector<int>& y,
                                const std::vector<int>& groups) {
  auto shape = g.shape_of(logits);
  if (shape.size() != 2 || shape[1] != 2)
    throw ShapeError("deo_surrogate_ce: requires a binary task");
  int n = shape[0];
  if (static_cast<int>(y.size()) != n || groups.size() != y.size())
    throw ShapeError("deo_surrogate_ce: label/group count mismatch");
  std::vector<int> cell(static_cast<size_t>(n));
  std::vector<int> counts(4, 0);
  for (int i = 0; i < n; ++i) {
    if (y[static_cast<size_t>(i)] < 0 || y[static_cast<size_t>(i)] > 1 ||
        groups[static_cast<size_t>(i)] < 0 || groups[static_cast<size_t>(i)] > 1)
      throw ShapeError("deo_surrogate_ce: labels and groups must be binary");
    cell[static_cast<size_t>(i)] = y[static_cast<size_t>(i)] * 2 + groups[static_cast<size_t>(i)];
    ++counts[static_cast<size_t>(cell[static_cast<size_t>(i)])];
  }
  Tensor inv = Tensor::zeros({4});
  static std::atomic<int> warn_budget{8};
  for (int c = 0; c < 4; ++c) {
    if (counts[static_cast<size_t>(c)] == 0)
      detail::warn_limited(warn_budget, "deo_surrogate_ce: empty (class,group) cell " +
                                            std::to_string(c / 2) + "," + std::to_string(c % 2));
    else
      inv.data[c] = 1.0 / counts[static_cast<size_t>(c)];
  }
  ad::Var means = g.mul(g.scatter_add(ce_rows(g, logits, y), cell, 4), g.constant(inv));
  ad::Var gap0 = g.abs_(g.sub(g.slice(means, 0, 1), g.slice(means, 1, 1)));
  ad::Var gap1 = g.abs_(g.sub(g.slice(means, 2, 1), g.slice(means, 3, 1)));
  return g.reshape(g.add(gap0, gap1), {});
}

// Adjusted CE rows where each sample draws its (l, delta) column from its
// group: matrices are (classes x groups).
inline ad::Var group_adjusted_ce_rows(ad::Graph& g, ad::Var logits, const std::vector<int>& y,
                                      const std::vector<int>& groups, ad::Var l_mat,
                                      ad::Var delta_eff_mat) {
  auto shape = g.shape_of(logits);
  if (shape.size() != 2) throw ShapeError("group_adjusted_ce_rows: logits must be a matrix");
  int n = shape[0], k = shape[1];
  auto mshape = g.shape_of(l_mat);
  if (mshape.size() != 2 || mshape[0] != k || g.shape_of(delta_eff_mat) != mshape)
    throw ShapeError("group_adjusted_ce_rows: parameter matrices must be classes x groups");
  if (static_cast<int>(y.size()) != n || groups.size() != y.size())
    throw ShapeError("group_adjusted_ce_rows: label/group count mismatch");
  for (int grp : groups)
    if (grp < 0 || grp >= mshape[1]) throw ShapeError("group_adjusted_ce_rows: group out of range");
  ad::Var scale_per = g.gather_rows(g.transpose(delta_eff_mat), groups);  // (n, k)
  ad::Var offset_per = g.gather_rows(g.transpose(l_mat), groups);
  return ce_rows(g, g.add(g.mul(logits, scale_per), offset_per), y);
}

inline ad::Var group_parametric_ce_mean(ad::Graph& g, ad::Var logits, const std::vector<int>& y,
                                        const std::vector<int>& groups, ad::Var w_mat,
                                        ad::Var l_mat, ad::Var delta_eff_mat) {
  auto mshape = g.shape_of(w_mat);
  if (g.shape_of(l_mat) != mshape) throw ShapeError("group_parametric_ce_mean: shape mismatch");
  int n = g.shape_of(logits)[0], ngroups = mshape[1];
  ad::Var rows = group_adjusted_ce_rows(g, logits, y, groups, l_mat, delta_eff_mat);
  std::vector<int> cell(y.size());
  for (size_t i = 0; i < y.size(); ++i) cell[i] = y[i] * ngroups + groups[i];
  ad::Var w_per = g.gather(g.reshape(w_mat, {mshape[0] * ngroups}), cell);
  return g.scale(g.sum_all(g.mul(w_per, rows)), 1.0 / n);
}

// ---------------------------------------------------------------------------
// Tape-side expansion of a packed hyperparameter leaf [w'; l'; draw'; eps'?].
// Mirrors LossParams::w()/l()/delta_eff()/eps() so values and gradients flow
// through the dictionary.
// ---------------------------------------------------------------------------

struct AlphaVars {
  ad::Var w;
  ad::Var l;
  ad::Var delta_raw;
  ad::Var delta_eff;
  std::optional<ad::Var> eps;
};

inline AlphaVars expand_alpha(ad::Graph& g, ad::Var alpha, const Dictionary& dict,
                              const AlphaLayout& layout) {
  dict.validate();
  if (layout.kprime != dict.embed_dim())
    throw ShapeError("expand_alpha: layout width does not match dictionary");
  if (g.shape_of(alpha) != std::vector<int>{layout.size()})
    throw ShapeError("expand_alpha: packed vector has wrong length");
  int k = dict.targets();
  ad::Var d_mat = g.constant(dict.m);
  auto expand = [&](int off) { return g.matvec(d_mat, g.slice(alpha, off, layout.kprime)); };
  AlphaVars out{ad::Var{}, ad::Var{}, ad::Var{}, ad::Var{}, std::nullopt};
  if (dict.kind == Dictionary::Kind::kLaColumn)
    out.w = g.smul(g.reshape(g.slice(alpha, layout.w_off(), 1), {}),
                   g.constant(Tensor::ones({k})));
  else
    out.w = expand(layout.w_off());
  out.l = expand(layout.l_off());
  out.delta_raw = expand(layout.delta_off());
  out.delta_eff = g.sigmoid(out.delta_raw);
  if (layout.has_eps) out.eps = expand(layout.eps_off());
  return out;
}

struct GroupAlphaVars {
  ad::Var w_mat;
  ad::Var l_mat;
  ad::Var delta_eff_mat;
};

inline GroupAlphaVars expand_group_alpha(ad::Graph& g, ad::Var alpha, const GroupLossParams& proto,
                                         const AlphaLayout& layout) {
  proto.dict.validate();
  if (layout.has_eps) throw ConfigError("expand_group_alpha: augmentation radii unsupported");
  if (layout.kprime != proto.dict.embed_dim())
    throw ShapeError("expand_group_alpha: layout width does not match dictionary");
  if (g.shape_of(alpha) != std::vector<int>{layout.size()})
    throw ShapeError("expand_group_alpha: packed vector has wrong length");
  int k = proto.num_classes, ngroups = proto.num_groups;
  if (proto.dict.targets() != k * ngroups)
    throw ShapeError("expand_group_alpha: dictionary targets must cover every cell");
  ad::Var d_mat = g.constant(proto.dict.m);
  auto expand = [&](int off) {
    return g.reshape(g.matvec(d_mat, g.slice(alpha, off, layout.kprime)), {k, ngroups});
  };
  GroupAlphaVars out{expand(layout.w_off()), expand(layout.l_off()), ad::Var{}};
  out.delta_eff_mat = g.sigmoid(expand(layout.delta_off()));
  return out;
}

// ---------------------------------------------------------------------------
// Training objective: adjusted CE on (optionally augmented) inputs.
// ---------------------------------------------------------------------------

struct TrainLossGraph {
  ad::Var loss;
  ad::Var logits;
  AlphaVars alpha_vars;
};

// x/y are the already-replicated batch (copies stacked copy-major). When the
// layout carries radii, unit_noise must hold one unit-ball row per sample and
// inputs become x + eps_{y_i} * noise_i on the tape, keeping the radii
// differentiable.
inline TrainLossGraph build_train_loss(ad::Graph& g, const ModelSpec& spec, ad::Var theta,
                                       ad::Var alpha, const Dictionary& dict,
                                       const AlphaLayout& layout, const Tensor& x,
                                       const std::vector<int>& y, const Tensor* unit_noise) {
  if (x.rank() != 2 || static_cast<int>(y.size()) != x.rows())
    throw ShapeError("train loss: batch shape mismatch");
  AlphaVars av = expand_alpha(g, alpha, dict, layout);
  ad::Var inputs = g.constant(x);
  if (layout.has_eps) {
    if (unit_noise == nullptr || !same_shape(*unit_noise, x))
      throw ShapeError("train loss: unit noise must match the batch shape");
    inputs = g.add(inputs, g.scale_rows(g.gather(*av.eps, y), g.constant(*unit_noise)));
  } else if (unit_noise != nullptr) {
    throw ShapeError("train loss: noise supplied without augmentation radii");
  }
  TrainLossGraph out{ad::Var{}, ad::Var{}, av};
  out.logits = model_logits(g, spec, theta, inputs);
  out.loss = parametric_ce_mean(g, out.logits, y, av.w, av.l, av.delta_eff);
  return out;
}

// Value-only convenience used by plain training loops and tests.
inline double train_loss_value(const data::Dataset& batch, const ModelSpec& spec,
                               const Tensor& theta, const LossParams& params,
                               const data::AugmentPolicy& policy, RngStream& stream) {
  params.validate();
  policy.validate(batch.num_classes);
  Tensor xa = data::augment_batch(batch.x, batch.y, policy, stream);
  std::vector<int> ya(static_cast<size_t>(xa.rows()));
  for (int i = 0; i < xa.rows(); ++i) ya[static_cast<size_t>(i)] = batch.y[static_cast<size_t>(i % batch.n())];
  Tensor logits = model_logits_plain(spec, theta, xa);
  Tensor w = params.w(), l = params.l(), d = params.delta_eff();
  double total = 0.0;
  for (int i = 0; i < xa.rows(); ++i) {
    Tensor row = Tensor::zeros({logits.cols()});
    for (int c = 0; c < logits.cols(); ++c) row.data[c] = logits.at(i, c);
    total += parametric_ce(ya[static_cast<size_t>(i)], row, w, l, d);
  }
  return total / xa.rows();
}

}  // namespace lossforge::loss
