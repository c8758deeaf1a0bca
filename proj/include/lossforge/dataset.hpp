#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lossforge/errors.hpp"
#include "lossforge/rng.hpp"
#include "lossforge/tensor.hpp"

namespace lossforge::data {

struct Dataset {
  Tensor x;                 // n x d
  std::vector<int> y;       // class ids in [0, num_classes)
  std::vector<int> groups;  // empty, or per-sample group ids in [0, num_groups)
  int num_classes = 0;
  int num_groups = 0;  // 0 when the dataset carries no group labels

  int n() const { return x.rank() == 2 ? x.shape[0] : 0; }
  int dim() const { return x.rank() == 2 ? x.shape[1] : 0; }
  bool has_groups() const { return num_groups > 0; }

  std::vector<int> class_counts() const {
    std::vector<int> c(static_cast<size_t>(num_classes), 0);
    for (int v : y) c[static_cast<size_t>(v)]++;
    return c;
  }

  // Row-major (class, group) cell counts.
  std::vector<int> cell_counts() const {
    if (!has_groups()) throw EvalError("cell_counts: dataset has no group labels");
    std::vector<int> c(static_cast<size_t>(num_classes) * num_groups, 0);
    for (size_t i = 0; i < y.size(); ++i)
      c[static_cast<size_t>(y[i]) * num_groups + groups[i]]++;
    return c;
  }

  void validate() const {
    if (x.rank() != 2) throw ShapeError("dataset: features must be a matrix");
    if (static_cast<int>(y.size()) != n()) throw ShapeError("dataset: label count mismatch");
    if (num_classes < 2) throw ConfigError("dataset: needs at least two classes");
    for (int v : y)
      if (v < 0 || v >= num_classes) throw ConfigError("dataset: label out of range");
    if (has_groups()) {
      if (groups.size() != y.size()) throw ShapeError("dataset: group label count mismatch");
      for (int v : groups)
        if (v < 0 || v >= num_groups) throw ConfigError("dataset: group label out of range");
    } else if (!groups.empty()) {
      throw ConfigError("dataset: group labels present but num_groups is zero");
    }
    if (!x.all_finite()) throw NumericalError("dataset: non-finite feature value");
  }

  Dataset subset(const std::vector<int>& idx) const {
    Dataset out;
    out.num_classes = num_classes;
    out.num_groups = num_groups;
    out.x = Tensor::zeros({static_cast<int>(idx.size()), dim()});
    out.y.reserve(idx.size());
    for (size_t r = 0; r < idx.size(); ++r) {
      int i = idx[r];
      if (i < 0 || i >= n()) throw ShapeError("subset: index out of range");
      for (int c = 0; c < dim(); ++c) out.x.at(static_cast<int>(r), c) = x.at(i, c);
      out.y.push_back(y[static_cast<size_t>(i)]);
      if (has_groups()) out.groups.push_back(groups[static_cast<size_t>(i)]);
    }
    return out;
  }
};

inline Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.dim() != b.dim() || a.num_classes != b.num_classes || a.num_groups != b.num_groups)
    throw ShapeError("concat: incompatible datasets");
  Dataset out;
  out.num_classes = a.num_classes;
  out.num_groups = a.num_groups;
  out.x = Tensor::zeros({a.n() + b.n(), a.dim()});
  std::copy(a.x.data.begin(), a.x.data.end(), out.x.data.begin());
  std::copy(b.x.data.begin(), b.x.data.end(), out.x.data.begin() + a.x.data.size());
  out.y = a.y;
  out.y.insert(out.y.end(), b.y.begin(), b.y.end());
  out.groups = a.groups;
  out.groups.insert(out.groups.end(), b.groups.begin(), b.groups.end());
  return out;
}

// ----- generators ----------------------------------------------------------

struct GaussianMixtureSpec {
  enum class Layout { kCircle, kSimplex };
  int dim = 2;
  double separation = 3.0;  // radius of the mean circle / simplex scale
  double noise = 1.0;       // isotropic stddev
  Layout layout = Layout::kCircle;
};

inline std::vector<std::vector<double>> mixture_means(const GaussianMixtureSpec& spec, int k) {
  std::vector<std::vector<double>> means(static_cast<size_t>(k),
                                         std::vector<double>(static_cast<size_t>(spec.dim), 0.0));
  if (spec.layout == GaussianMixtureSpec::Layout::kCircle) {
    if (spec.dim < 2) throw ConfigError("mixture: circle layout needs dim >= 2");
    for (int c = 0; c < k; ++c) {
      double ang = 2.0 * M_PI * c / k;
      means[c][0] = spec.separation * std::cos(ang);
      means[c][1] = spec.separation * std::sin(ang);
    }
  } else {
    if (spec.dim < k) throw ConfigError("mixture: simplex layout needs dim >= num classes");
    for (int c = 0; c < k; ++c) means[c][c] = spec.separation;
  }
  return means;
}

// Geometric class-size decay n_i' = round(n_i * mu^i) with mu solved from the
// imbalance ratio rho = n_0' / n_{K-1}'. Class 0 is the largest class.
inline std::vector<int> longtail_sizes(const std::vector<int>& base, double rho) {
  int k = static_cast<int>(base.size());
  if (k < 2) throw ConfigError("longtail: needs at least two classes");
  if (rho < 1.0) throw ConfigError("longtail: imbalance ratio must be >= 1");
  for (int b : base)
    if (b < 1) throw ConfigError("longtail: base sizes must be positive");
  double mu = std::pow(static_cast<double>(base[0]) / (static_cast<double>(base[k - 1]) * rho),
                       1.0 / (k - 1));
  std::vector<int> sizes(static_cast<size_t>(k));
  double f = 1.0;
  for (int i = 0; i < k; ++i) {
    sizes[i] = static_cast<int>(std::lround(base[i] * f));
    f *= mu;
  }
  for (int i = 0; i < k; ++i) {
    if (sizes[i] < 1)
      throw ConfigError("longtail: class " + std::to_string(i) +
                        " would round to an empty class; lower rho or raise base sizes");
    if (i > 0 && sizes[i] > sizes[i - 1])
      throw ConfigError("longtail: class sizes must be non-increasing in class index");
  }
  return sizes;
}

inline Dataset sample_mixture(const std::vector<int>& sizes,
                              const std::vector<std::vector<double>>& means, double noise,
                              RngStream& stream) {
  int k = static_cast<int>(sizes.size());
  int d = static_cast<int>(means.at(0).size());
  int n = 0;
  for (int s : sizes) n += s;
  Dataset out;
  out.num_classes = k;
  out.x = Tensor::zeros({n, d});
  out.y.reserve(static_cast<size_t>(n));
  int row = 0;
  for (int c = 0; c < k; ++c)
    for (int s = 0; s < sizes[c]; ++s) {
      for (int j = 0; j < d; ++j) out.x.at(row, j) = means[c][j] + noise * stream.normal();
      out.y.push_back(c);
      ++row;
    }
  return out;
}

inline Dataset make_longtail(const std::vector<int>& base, double rho,
                             const GaussianMixtureSpec& spec, std::uint64_t seed) {
  auto sizes = longtail_sizes(base, rho);
  auto means = mixture_means(spec, static_cast<int>(base.size()));
  RngStream stream = RngStream::substream(seed, "data");
  Dataset out = sample_mixture(sizes, means, spec.noise, stream);
  out.validate();
  return out;
}

// Binary-or-more classes crossed with groups. The group label shifts a
// designated spurious coordinate block while the class signal lives in the
// leading core block.
struct GroupMixtureSpec {
  int core_dim = 2;
  int spurious_dim = 2;
  double core_separation = 2.0;
  double spurious_separation = 2.0;
  double noise = 1.0;
};

// fractions: row-major (class, group) cell probabilities summing to 1.
inline std::vector<int> group_cell_sizes(const std::vector<double>& fractions, int n) {
  double total = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw ConfigError("group dataset: negative cell fraction");
    total += f;
  }
  if (std::fabs(total - 1.0) > 1e-9)
    throw ConfigError("group dataset: cell fractions must sum to 1");
  std::vector<int> sizes(fractions.size());
  int assigned = 0;
  size_t largest = 0;
  for (size_t i = 0; i < fractions.size(); ++i) {
    sizes[i] = static_cast<int>(std::lround(fractions[i] * n));
    if (fractions[i] > 0.0 && sizes[i] == 0)
      throw ConfigError("group dataset: cell " + std::to_string(i) +
                        " rounds to zero samples; raise n");
    assigned += sizes[i];
    if (fractions[i] > fractions[largest]) largest = i;
  }
  sizes[largest] += n - assigned;  // rounding residual goes to the largest cell
  if (sizes[largest] < 0) throw ConfigError("group dataset: rounding residual underflow");
  return sizes;
}

inline Dataset make_group_dataset(const std::vector<double>& fractions, int num_classes,
                                  int num_groups, int n, const GroupMixtureSpec& spec,
                                  std::uint64_t seed) {
  if (num_classes < 2 || num_groups < 2)
    throw ConfigError("group dataset: needs at least two classes and two groups");
  if (static_cast<int>(fractions.size()) != num_classes * num_groups)
    throw ConfigError("group dataset: fraction table must be num_classes x num_groups");
  auto sizes = group_cell_sizes(fractions, n);

  GaussianMixtureSpec core{spec.core_dim, spec.core_separation, spec.noise,
                           GaussianMixtureSpec::Layout::kCircle};
  GaussianMixtureSpec spur{spec.spurious_dim, spec.spurious_separation, spec.noise,
                           GaussianMixtureSpec::Layout::kCircle};
  auto class_means = mixture_means(core, num_classes);
  auto group_means = mixture_means(spur, num_groups);

  int d = spec.core_dim + spec.spurious_dim;
  Dataset out;
  out.num_classes = num_classes;
  out.num_groups = num_groups;
  out.x = Tensor::zeros({n, d});
  out.y.reserve(static_cast<size_t>(n));
  out.groups.reserve(static_cast<size_t>(n));
  RngStream stream = RngStream::substream(seed, "data");
  int row = 0;
  for (int k = 0; k < num_classes; ++k)
    for (int g = 0; g < num_groups; ++g) {
      int cell = k * num_groups + g;
      for (int s = 0; s < sizes[cell]; ++s) {
        for (int j = 0; j < spec.core_dim; ++j)
          out.x.at(row, j) = class_means[k][j] + spec.noise * stream.normal();
        for (int j = 0; j < spec.spurious_dim; ++j)
          out.x.at(row, spec.core_dim + j) = group_means[g][j] + spec.noise * stream.normal();
        out.y.push_back(k);
        out.groups.push_back(g);
        ++row;
      }
    }
  out.validate();
  return out;
}

// ----- split ----------------------------------------------------------------

struct SplitDataset {
  Dataset train;
  Dataset val;
  double fraction = 0.0;
};

// Stratified split: per class (per cell when groups are present) the train
// share is round(fraction * stratum size), so realized proportions stay
// within one sample of the request. Single-sample strata go to train.
inline SplitDataset split(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw ConfigError("split: fraction must be in (0, 1)");
  ds.validate();
  int strata = ds.has_groups() ? ds.num_classes * ds.num_groups : ds.num_classes;
  std::vector<std::vector<int>> members(static_cast<size_t>(strata));
  for (int i = 0; i < ds.n(); ++i) {
    int s = ds.has_groups() ? ds.y[i] * ds.num_groups + ds.groups[i] : ds.y[i];
    members[static_cast<size_t>(s)].push_back(i);
  }
  RngStream stream = RngStream::substream(seed, "split");
  std::vector<int> train_idx, val_idx;
  for (auto& m : members) {
    if (m.empty()) continue;
    stream.shuffle(m);
    int take = static_cast<int>(std::lround(fraction * m.size()));
    take = std::clamp(take, 1, static_cast<int>(m.size()));
    if (m.size() == 1) log_warn("split: stratum with a single sample kept in train");
    for (size_t i = 0; i < m.size(); ++i)
      (static_cast<int>(i) < take ? train_idx : val_idx).push_back(m[i]);
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  SplitDataset out;
  out.train = ds.subset(train_idx);
  out.val = ds.subset(val_idx);
  out.fraction = fraction;
  return out;
}

// ----- augmentation ---------------------------------------------------------

// Class-personalized spherical augmentation x + eps_y * u, u uniform in the
// unit ball. Draws are reparameterized: the u matrix is produced separately
// so radii can stay differentiable hyperparameters in the loss graph.
struct AugmentPolicy {
  Tensor radii;    // per-class radius, length num_classes, all >= 0
  int copies = 1;  // draws per sample

  void validate(int num_classes) const {
    if (radii.rank() != 1 || radii.shape[0] != num_classes)
      throw ShapeError("augment: radii must be a per-class vector");
    for (double r : radii.data)
      if (r < 0.0 || !std::isfinite(r)) throw ConfigError("augment: radii must be nonnegative");
    if (copies < 1) throw ConfigError("augment: copies must be positive");
  }
};

inline Tensor ball_noise(RngStream& stream, int n, int d) {
  Tensor u = Tensor::zeros({n, d});
  for (int i = 0; i < n; ++i) {
    auto v = stream.unit_ball(d);
    for (int j = 0; j < d; ++j) u.at(i, j) = v[j];
  }
  return u;
}

// Plain (non-graph) application: returns (n*copies) x d rows ordered copy-major.
inline Tensor augment_batch(const Tensor& x, const std::vector<int>& y,
                            const AugmentPolicy& policy, RngStream& stream) {
  int n = x.rows(), d = x.cols();
  Tensor out = Tensor::zeros({n * policy.copies, d});
  for (int m = 0; m < policy.copies; ++m) {
    Tensor u = ball_noise(stream, n, d);
    for (int i = 0; i < n; ++i) {
      double eps = policy.radii.data[static_cast<size_t>(y[static_cast<size_t>(i)])];
      for (int j = 0; j < d; ++j) out.at(m * n + i, j) = x.at(i, j) + eps * u.at(i, j);
    }
  }
  return out;
}

// ----- serialization --------------------------------------------------------

inline std::string fmt_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// CSV with a header row and a JSON sidecar carrying counts and provenance.
// Doubles are printed with 17 significant digits so a round trip is
// bit-exact.
inline void save_dataset(const Dataset& ds, const std::string& csv_path,
                         const nlohmann::json& generator_config = {},
                         std::uint64_t seed = 0) {
  ds.validate();
  std::ofstream f(csv_path);
  if (!f) throw IoError("cannot write " + csv_path);
  for (int j = 0; j < ds.dim(); ++j) f << "x" << j << ",";
  f << "y";
  if (ds.has_groups()) f << ",g";
  f << "\n";
  for (int i = 0; i < ds.n(); ++i) {
    for (int j = 0; j < ds.dim(); ++j) f << fmt_g17(ds.x.at(i, j)) << ",";
    f << ds.y[static_cast<size_t>(i)];
    if (ds.has_groups()) f << "," << ds.groups[static_cast<size_t>(i)];
    f << "\n";
  }
  if (!f) throw IoError("failed while writing " + csv_path);

  nlohmann::json side;
  side["n"] = ds.n();
  side["dim"] = ds.dim();
  side["num_classes"] = ds.num_classes;
  side["num_groups"] = ds.num_groups;
  side["class_counts"] = ds.class_counts();
  if (ds.has_groups()) side["cell_counts"] = ds.cell_counts();
  side["seed"] = seed;
  if (!generator_config.is_null()) side["generator"] = generator_config;
  std::ofstream sf(csv_path + ".json");
  if (!sf) throw IoError("cannot write " + csv_path + ".json");
  sf << side.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& csv_path) {
  std::ifstream f(csv_path);
  if (!f) throw IoError("cannot read " + csv_path);
  std::string header;
  if (!std::getline(f, header)) throw IoError("empty dataset file " + csv_path);
  int d = 0;
  bool has_groups = header.size() >= 2 && header.substr(header.size() - 2) == ",g";
  {
    std::stringstream ss(header);
    std::string col;
    while (std::getline(ss, col, ','))
      if (!col.empty() && col[0] == 'x') ++d;
  }
  if (d == 0) throw IoError("dataset header has no feature columns: " + csv_path);

  std::vector<double> xs;
  std::vector<int> ys, gs;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    for (int j = 0; j < d; ++j) {
      if (!std::getline(ss, cell, ',')) throw IoError("short row in " + csv_path);
      xs.push_back(std::strtod(cell.c_str(), nullptr));
    }
    if (!std::getline(ss, cell, ',')) throw IoError("missing label in " + csv_path);
    ys.push_back(std::stoi(cell));
    if (has_groups) {
      if (!std::getline(ss, cell, ',')) throw IoError("missing group label in " + csv_path);
      gs.push_back(std::stoi(cell));
    }
  }

  Dataset ds;
  ds.x = Tensor({static_cast<int>(ys.size()), d}, std::move(xs));
  ds.y = std::move(ys);
  ds.groups = std::move(gs);

  std::ifstream sf(csv_path + ".json");
  if (sf) {
    nlohmann::json side = nlohmann::json::parse(sf);
    ds.num_classes = side.at("num_classes").get<int>();
    ds.num_groups = side.at("num_groups").get<int>();
  } else {
    log_warn("no sidecar for " + csv_path + "; inferring class count from labels");
    int k = 0;
    for (int v : ds.y) k = std::max(k, v + 1);
    ds.num_classes = k;
    int g = 0;
    for (int v : ds.groups) g = std::max(g, v + 1);
    ds.num_groups = g;
  }
  ds.validate();
  return ds;
}

}  // namespace lossforge::data
