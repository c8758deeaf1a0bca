#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lossforge/dictionary.hpp"
#include "lossforge/errors.hpp"
#include "lossforge/tensor.hpp"

namespace lossforge::loss {

inline double sigmoid_stable(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline std::vector<double> normalized_freqs(const std::vector<int>& counts) {
  double total = 0.0;
  for (int c : counts) {
    if (c <= 0) throw ConfigError("loss params: class counts must be positive");
    total += c;
  }
  std::vector<double> out(counts.size());
  for (size_t i = 0; i < counts.size(); ++i) out[i] = counts[i] / total;
  return out;
}

// Per-class parameters of the adjusted cross entropy, stored as embeddings
// behind a shared dictionary. The multiplicative adjustment is kept raw and
// squashed through a sigmoid wherever the loss is used for training, so the
// effective delta always stays in (0, 1).
struct LossParams {
  Dictionary dict;
  Tensor w_embed;
  Tensor l_embed;
  Tensor delta_raw_embed;
  std::optional<Tensor> eps_embed;  // augmentation radii, nonnegative

  int k() const { return dict.targets(); }
  int kprime() const { return dict.embed_dim(); }

  // The log-frequency column only makes sense for additive/multiplicative
  // adjustments; weights expand through an all-ones column there so the
  // plain-weight family stays representable.
  Tensor w() const {
    if (dict.kind == Dictionary::Kind::kLaColumn)
      return Tensor::full({dict.targets()}, w_embed.data[0]);
    return dict.expand(w_embed);
  }
  Tensor l() const { return dict.expand(l_embed); }
  Tensor delta_raw() const { return dict.expand(delta_raw_embed); }
  Tensor delta_eff() const {
    Tensor d = dict.expand(delta_raw_embed);
    for (double& v : d.data) v = sigmoid_stable(v);
    return d;
  }
  Tensor eps() const {
    if (!eps_embed) throw ConfigError("loss params: no augmentation radii present");
    return dict.expand(*eps_embed);
  }

  void validate() const {
    dict.validate();
    auto check_len = [&](const Tensor& t, const char* name) {
      if (t.rank() != 1 || t.shape[0] != kprime())
        throw ShapeError(std::string("loss params: ") + name + " must have length " +
                         std::to_string(kprime()));
    };
    check_len(w_embed, "w_embed");
    check_len(l_embed, "l_embed");
    check_len(delta_raw_embed, "delta_raw_embed");
    if (eps_embed) check_len(*eps_embed, "eps_embed");
    for (double v : w().data)
      if (v < 0.0 || !std::isfinite(v))
        throw ConfigError("loss params: expanded w must be nonnegative");
    if (eps_embed)
      for (double v : eps().data)
        if (v < 0.0 || !std::isfinite(v))
          throw ConfigError("loss params: expanded radii must be nonnegative");
  }
};

// Plain cross entropy: w = 1, l = 0, raw delta = 0 (uniform effective delta).
inline LossParams ce_init(int k) {
  LossParams p;
  p.dict = Dictionary::identity(k);
  p.w_embed = Tensor::ones({k});
  p.l_embed = Tensor::zeros({k});
  p.delta_raw_embed = Tensor::zeros({k});
  return p;
}

namespace detail {
// Mean class frequency represented by each dictionary column (indicator
// dictionaries only).
inline std::vector<double> column_freqs(const Dictionary& dict,
                                        const std::vector<double>& freqs) {
  std::vector<double> out(static_cast<size_t>(dict.embed_dim()), 0.0);
  std::vector<int> members(static_cast<size_t>(dict.embed_dim()), 0);
  for (int i = 0; i < dict.targets(); ++i)
    for (int j = 0; j < dict.embed_dim(); ++j)
      if (dict.m.at(i, j) == 1.0) {
        out[j] += freqs[i];
        members[j]++;
      }
  for (size_t j = 0; j < out.size(); ++j) {
    if (members[j] == 0) throw ConfigError("loss params: empty dictionary column");
    out[j] /= members[j];
  }
  return out;
}
}  // namespace detail

// Weighted init targeting the balanced objective: w proportional to inverse
// class frequency, normalized so the expanded weights average to one.
inline LossParams balanced_init(const std::vector<int>& class_counts, const Dictionary& dict) {
  if (!dict.is_indicator())
    throw ConfigError("loss params: balanced init needs an indicator dictionary");
  auto freqs = normalized_freqs(class_counts);
  auto col = detail::column_freqs(dict, freqs);
  LossParams p;
  p.dict = dict;
  p.w_embed = Tensor::zeros({dict.embed_dim()});
  for (int j = 0; j < dict.embed_dim(); ++j) p.w_embed.data[j] = 1.0 / col[j];
  Tensor expanded = p.dict.expand(p.w_embed);
  double mean = 0.0;
  for (double v : expanded.data) mean += v;
  mean /= expanded.numel();
  for (double& v : p.w_embed.data) v /= mean;
  p.l_embed = Tensor::zeros({dict.embed_dim()});
  p.delta_raw_embed = Tensor::zeros({dict.embed_dim()});
  return p;
}

// Frequency-adjusted init: w = 1 and l = tau * log pi (exact for identity and
// la_column dictionaries, column-mean frequency for cluster dictionaries).
inline LossParams la_init(const std::vector<int>& class_counts, const Dictionary& dict,
                          double tau = 1.0) {
  auto freqs = normalized_freqs(class_counts);
  LossParams p;
  p.dict = dict;
  if (dict.kind == Dictionary::Kind::kLaColumn) {
    p.w_embed = Tensor::vec({1.0});
    p.l_embed = Tensor::vec({tau});
    p.delta_raw_embed = Tensor::zeros({1});
    return p;
  }
  if (!dict.is_indicator())
    throw ConfigError("loss params: la init needs an indicator or la_column dictionary");
  p.w_embed = Tensor::ones({dict.embed_dim()});
  auto col = detail::column_freqs(dict, freqs);
  p.l_embed = Tensor::zeros({dict.embed_dim()});
  for (int j = 0; j < dict.embed_dim(); ++j) p.l_embed.data[j] = tau * std::log(col[j]);
  p.delta_raw_embed = Tensor::zeros({dict.embed_dim()});
  return p;
}

// ----- group form ------------------------------------------------------------

// Per (class, group) cell parameters, row-major k * num_groups + g.
struct GroupLossParams {
  int num_classes = 0;
  int num_groups = 0;
  Dictionary dict;  // (K*G) x K'
  Tensor w_embed, l_embed, delta_raw_embed;

  int cells() const { return num_classes * num_groups; }
  int kprime() const { return dict.embed_dim(); }

  // expanded tables come back as (classes x groups) matrices, cell-major
  Tensor w() const { return as_table(dict.expand(w_embed)); }
  Tensor l() const { return as_table(dict.expand(l_embed)); }
  Tensor delta_raw() const { return as_table(dict.expand(delta_raw_embed)); }
  Tensor delta_eff() const {
    Tensor d = delta_raw();
    for (double& v : d.data) v = sigmoid_stable(v);
    return d;
  }

  Tensor as_table(Tensor flat) const {
    flat.shape = {num_classes, num_groups};
    return flat;
  }

  void validate() const {
    dict.validate();
    if (dict.targets() != cells())
      throw ShapeError("group loss params: dictionary must cover every (class, group) cell");
    for (double v : w().data)
      if (v < 0.0 || !std::isfinite(v))
        throw ConfigError("group loss params: expanded w must be nonnegative");
  }
};

inline GroupLossParams group_ce_init(int num_classes, int num_groups) {
  GroupLossParams p;
  p.num_classes = num_classes;
  p.num_groups = num_groups;
  p.dict = Dictionary::identity(num_classes * num_groups);
  p.w_embed = Tensor::ones({p.cells()});
  p.l_embed = Tensor::zeros({p.cells()});
  p.delta_raw_embed = Tensor::zeros({p.cells()});
  return p;
}

// Group-aware frequency adjustment: weights equalize the group marginals
// (w_{kg} = 1 / pi_g) and l applies the adjustment within each group
// (l_{kg} = log pi_{k|g}).
inline GroupLossParams group_la_params(const std::vector<int>& cell_counts, int num_classes,
                                       int num_groups) {
  if (static_cast<int>(cell_counts.size()) != num_classes * num_groups)
    throw ShapeError("group la params: cell count table has wrong size");
  double total = 0.0;
  for (int c : cell_counts) {
    if (c <= 0) throw ConfigError("group la params: every cell must be populated");
    total += c;
  }
  GroupLossParams p = group_ce_init(num_classes, num_groups);
  for (int g = 0; g < num_groups; ++g) {
    double pg = 0.0;
    for (int k = 0; k < num_classes; ++k) pg += cell_counts[k * num_groups + g] / total;
    for (int k = 0; k < num_classes; ++k) {
      int cell = k * num_groups + g;
      double p_kg = cell_counts[cell] / total;
      p.w_embed.data[cell] = 1.0 / pg;
      p.l_embed.data[cell] = std::log(p_kg / pg);
    }
  }
  return p;
}

// Same adjustment stated directly in terms of group marginals and the
// class-given-group conditionals (a K x G matrix whose columns sum to one).
inline GroupLossParams group_la_params(const Tensor& group_freqs,
                                       const Tensor& class_freqs_given_group) {
  if (group_freqs.rank() != 1 || class_freqs_given_group.rank() != 2 ||
      class_freqs_given_group.shape[1] != group_freqs.shape[0])
    throw ShapeError("group la params: frequency shapes disagree");
  int num_groups = group_freqs.shape[0], num_classes = class_freqs_given_group.shape[0];
  if (num_classes < 2 || num_groups < 1) throw ConfigError("group la params: bad table size");
  for (double v : group_freqs.data)
    if (!(v > 0.0)) throw ConfigError("group la params: group frequencies must be positive");
  for (double v : class_freqs_given_group.data)
    if (!(v > 0.0)) throw ConfigError("group la params: class frequencies must be positive");
  GroupLossParams p = group_ce_init(num_classes, num_groups);
  for (int g = 0; g < num_groups; ++g)
    for (int k = 0; k < num_classes; ++k) {
      int cell = k * num_groups + g;
      p.w_embed.data[cell] = 1.0 / group_freqs.data[g];
      p.l_embed.data[cell] = std::log(class_freqs_given_group.at(k, g));
    }
  return p;
}

// ----- packed hyperparameter vector ------------------------------------------

// The searchable parameters live in one flat vector so the bilevel loop can
// treat them as a single tape leaf: [w_embed; l_embed; delta_raw_embed;
// eps_embed?]. Untrained segments are masked out of updates.
struct AlphaLayout {
  int kprime = 0;
  bool has_eps = false;
  bool train_w = false;
  bool train_l = true;
  bool train_delta = true;
  bool train_eps = false;

  int size() const { return kprime * (has_eps ? 4 : 3); }
  int w_off() const { return 0; }
  int l_off() const { return kprime; }
  int delta_off() const { return 2 * kprime; }
  int eps_off() const { return 3 * kprime; }

  Tensor mask() const {
    Tensor m = Tensor::zeros({size()});
    auto fill = [&](int off, bool on) {
      for (int i = 0; i < kprime; ++i) m.data[static_cast<size_t>(off + i)] = on ? 1.0 : 0.0;
    };
    fill(w_off(), train_w);
    fill(l_off(), train_l);
    fill(delta_off(), train_delta);
    if (has_eps) fill(eps_off(), train_eps);
    return m;
  }
};

inline Tensor pack_alpha(const LossParams& p, const AlphaLayout& layout) {
  if (layout.kprime != p.kprime()) throw ShapeError("pack_alpha: layout size mismatch");
  if (layout.has_eps != p.eps_embed.has_value())
    throw ShapeError("pack_alpha: augmentation segment mismatch");
  Tensor a = Tensor::zeros({layout.size()});
  for (int i = 0; i < layout.kprime; ++i) {
    a.data[static_cast<size_t>(layout.w_off() + i)] = p.w_embed.data[i];
    a.data[static_cast<size_t>(layout.l_off() + i)] = p.l_embed.data[i];
    a.data[static_cast<size_t>(layout.delta_off() + i)] = p.delta_raw_embed.data[i];
    if (layout.has_eps) a.data[static_cast<size_t>(layout.eps_off() + i)] = p.eps_embed->data[i];
  }
  return a;
}

inline LossParams unpack_alpha(const Tensor& a, const Dictionary& dict,
                               const AlphaLayout& layout) {
  if (a.rank() != 1 || a.shape[0] != layout.size())
    throw ShapeError("unpack_alpha: vector size mismatch");
  LossParams p;
  p.dict = dict;
  auto seg = [&](int off) {
    Tensor t = Tensor::zeros({layout.kprime});
    for (int i = 0; i < layout.kprime; ++i) t.data[i] = a.data[static_cast<size_t>(off + i)];
    return t;
  };
  p.w_embed = seg(layout.w_off());
  p.l_embed = seg(layout.l_off());
  p.delta_raw_embed = seg(layout.delta_off());
  if (layout.has_eps) p.eps_embed = seg(layout.eps_off());
  return p;
}

inline Tensor pack_group_alpha(const GroupLossParams& p, const AlphaLayout& layout) {
  if (layout.kprime != p.kprime()) throw ShapeError("pack_group_alpha: layout size mismatch");
  if (layout.has_eps) throw ConfigError("pack_group_alpha: group form carries no radii");
  Tensor a = Tensor::zeros({layout.size()});
  for (int i = 0; i < layout.kprime; ++i) {
    a.data[static_cast<size_t>(layout.w_off() + i)] = p.w_embed.data[i];
    a.data[static_cast<size_t>(layout.l_off() + i)] = p.l_embed.data[i];
    a.data[static_cast<size_t>(layout.delta_off() + i)] = p.delta_raw_embed.data[i];
  }
  return a;
}

inline GroupLossParams unpack_group_alpha(const Tensor& a, const GroupLossParams& proto,
                                          const AlphaLayout& layout) {
  if (a.rank() != 1 || a.shape[0] != layout.size())
    throw ShapeError("unpack_group_alpha: vector size mismatch");
  GroupLossParams p = proto;
  auto seg = [&](int off) {
    Tensor t = Tensor::zeros({layout.kprime});
    for (int i = 0; i < layout.kprime; ++i) t.data[i] = a.data[static_cast<size_t>(off + i)];
    return t;
  };
  p.w_embed = seg(layout.w_off());
  p.l_embed = seg(layout.l_off());
  p.delta_raw_embed = seg(layout.delta_off());
  return p;
}

// ----- serialization ----------------------------------------------------------

inline nlohmann::json loss_params_to_json(const LossParams& p) {
  nlohmann::json j;
  j["dict"] = p.dict.to_json();
  j["w_embed"] = p.w_embed.data;
  j["l_embed"] = p.l_embed.data;
  j["delta_raw_embed"] = p.delta_raw_embed.data;
  if (p.eps_embed) j["eps_embed"] = p.eps_embed->data;
  j["expanded"] = {{"w", p.w().data}, {"l", p.l().data}, {"delta_eff", p.delta_eff().data}};
  return j;
}

inline LossParams loss_params_from_json(const nlohmann::json& j) {
  LossParams p;
  p.dict = Dictionary::from_json(j.at("dict"));
  p.w_embed = Tensor::vec(j.at("w_embed").get<std::vector<double>>());
  p.l_embed = Tensor::vec(j.at("l_embed").get<std::vector<double>>());
  p.delta_raw_embed = Tensor::vec(j.at("delta_raw_embed").get<std::vector<double>>());
  if (j.contains("eps_embed"))
    p.eps_embed = Tensor::vec(j.at("eps_embed").get<std::vector<double>>());
  p.validate();
  return p;
}

inline nlohmann::json group_loss_params_to_json(const GroupLossParams& p) {
  nlohmann::json j;
  j["num_classes"] = p.num_classes;
  j["num_groups"] = p.num_groups;
  j["dict"] = p.dict.to_json();
  j["w_embed"] = p.w_embed.data;
  j["l_embed"] = p.l_embed.data;
  j["delta_raw_embed"] = p.delta_raw_embed.data;
  j["expanded"] = {{"w", p.w().data}, {"l", p.l().data}, {"delta_eff", p.delta_eff().data}};
  return j;
}

inline GroupLossParams group_loss_params_from_json(const nlohmann::json& j) {
  GroupLossParams p;
  p.num_classes = j.at("num_classes").get<int>();
  p.num_groups = j.at("num_groups").get<int>();
  p.dict = Dictionary::from_json(j.at("dict"));
  p.w_embed = Tensor::vec(j.at("w_embed").get<std::vector<double>>());
  p.l_embed = Tensor::vec(j.at("l_embed").get<std::vector<double>>());
  p.delta_raw_embed = Tensor::vec(j.at("delta_raw_embed").get<std::vector<double>>());
  p.validate();
  return p;
}

}  // namespace lossforge::loss
