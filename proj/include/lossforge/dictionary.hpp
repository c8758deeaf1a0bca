#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "lossforge/errors.hpp"
#include "lossforge/tensor.hpp"

namespace lossforge::loss {

// Linear map from a low-dimensional embedding to per-target loss parameters:
// params = D * embed. Columns are either class-cluster indicators (grouping
// targets of similar frequency) or a single frequency-derived column that
// reduces the search to one scalar per parameter kind.
struct Dictionary {
  enum class Kind { kIdentity, kCluster, kLaColumn, kCustom };

  Kind kind = Kind::kIdentity;
  Tensor m;                      // targets x embedding dims
  std::vector<int> meta_counts;  // cluster: the counts used to order classes
  int cluster_size = 0;
  std::vector<double> meta_freqs;  // la_column: class frequencies

  int targets() const { return m.rows(); }
  int embed_dim() const { return m.cols(); }

  bool is_indicator() const {
    return kind == Kind::kIdentity || kind == Kind::kCluster;
  }

  Tensor expand(const Tensor& embed) const {
    if (embed.rank() != 1 || embed.shape[0] != embed_dim())
      throw ShapeError("dictionary: embedding must have length " + std::to_string(embed_dim()));
    Tensor out = Tensor::zeros({targets()});
    for (int i = 0; i < targets(); ++i) {
      double s = 0.0;
      for (int j = 0; j < embed_dim(); ++j) s += m.at(i, j) * embed.data[j];
      out.data[i] = s;
    }
    return out;
  }

  void validate() const {
    if (m.rank() != 2 || m.rows() < 1 || m.cols() < 1)
      throw ShapeError("dictionary: matrix must be non-empty");
    if (kind == Kind::kIdentity || kind == Kind::kCluster) {
      // disjoint indicator columns covering every target exactly once
      for (int i = 0; i < targets(); ++i) {
        int hits = 0;
        for (int j = 0; j < embed_dim(); ++j) {
          double v = m.at(i, j);
          if (v != 0.0 && v != 1.0)
            throw ConfigError("dictionary: indicator matrix must be 0/1");
          if (v == 1.0) ++hits;
        }
        if (hits != 1)
          throw ConfigError("dictionary: each target must belong to exactly one column");
      }
    }
    if (kind == Kind::kLaColumn && embed_dim() != 1)
      throw ConfigError("dictionary: frequency column form has a single embedding dim");
  }

  static Dictionary identity(int k) {
    Dictionary d;
    d.kind = Kind::kIdentity;
    d.m = Tensor::zeros({k, k});
    for (int i = 0; i < k; ++i) d.m.at(i, i) = 1.0;
    return d;
  }

  // Groups targets of similar frequency: targets sorted by count descending
  // (ties by index) and chunked into ceil(k / cluster_size) blocks.
  static Dictionary cluster(const std::vector<int>& counts, int cluster_size) {
    int k = static_cast<int>(counts.size());
    if (cluster_size < 1 || cluster_size > k)
      throw ConfigError("dictionary: cluster size must be in [1, num targets]");
    std::vector<int> order(static_cast<size_t>(k));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return counts[a] > counts[b]; });
    int kprime = (k + cluster_size - 1) / cluster_size;
    Dictionary d;
    d.kind = Kind::kCluster;
    d.m = Tensor::zeros({k, kprime});
    for (int r = 0; r < k; ++r) d.m.at(order[r], r / cluster_size) = 1.0;
    d.meta_counts = counts;
    d.cluster_size = cluster_size;
    return d;
  }

  // Single column of log-frequencies: embed is one scalar multiplier, so
  // l = tau * log pi recovers the frequency-adjustment family.
  static Dictionary la_column(const std::vector<double>& freqs) {
    int k = static_cast<int>(freqs.size());
    Dictionary d;
    d.kind = Kind::kLaColumn;
    d.m = Tensor::zeros({k, 1});
    double total = 0.0;
    for (double f : freqs) {
      if (f <= 0.0) throw ConfigError("dictionary: frequencies must be positive");
      total += f;
    }
    for (int i = 0; i < k; ++i) d.m.at(i, 0) = std::log(freqs[i] / total);
    d.meta_freqs = freqs;
    return d;
  }

  static Dictionary custom(Tensor matrix) {
    Dictionary d;
    d.kind = Kind::kCustom;
    d.m = std::move(matrix);
    if (d.m.rank() != 2) throw ShapeError("dictionary: custom matrix must be rank 2");
    return d;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    switch (kind) {
      case Kind::kIdentity:
        j["kind"] = "identity";
        j["targets"] = targets();
        break;
      case Kind::kCluster:
        j["kind"] = "cluster";
        j["cluster_size"] = cluster_size;
        j["counts"] = meta_counts;
        break;
      case Kind::kLaColumn:
        j["kind"] = "la_column";
        j["freqs"] = meta_freqs;
        break;
      case Kind::kCustom: {
        j["kind"] = "custom";
        j["rows"] = m.rows();
        j["cols"] = m.cols();
        j["data"] = m.data;
        break;
      }
    }
    return j;
  }

  static Dictionary from_json(const nlohmann::json& j) {
    std::string kind = j.at("kind").get<std::string>();
    if (kind == "identity") return identity(j.at("targets").get<int>());
    if (kind == "cluster")
      return cluster(j.at("counts").get<std::vector<int>>(), j.at("cluster_size").get<int>());
    if (kind == "la_column") return la_column(j.at("freqs").get<std::vector<double>>());
    if (kind == "custom")
      return custom(Tensor({j.at("rows").get<int>(), j.at("cols").get<int>()},
                           j.at("data").get<std::vector<double>>()));
    throw ConfigError("dictionary: unknown kind '" + kind + "'");
  }
};

}  // namespace lossforge::loss
