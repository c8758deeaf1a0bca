#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lossforge/bilevel.hpp"
#include "lossforge/errors.hpp"
#include "lossforge/model.hpp"

namespace lossforge {
namespace config {

// ---------------------------------------------------------------------------
// Experiment configuration: a sectioned key/value file (INI syntax) or the
// same structure as a JSON object. Every section and key is schema-checked;
// unknown names are rejected before any compute happens.
// ---------------------------------------------------------------------------

struct DataConfig {
  std::string kind = "longtail";  // longtail | group
  std::uint64_t seed = 1;
  double split_fraction = 0.75;

  // longtail generator
  int num_classes = 10;
  int base_size = 600;
  double rho = 100.0;
  int dim = 10;
  double separation = 2.2;
  double noise = 1.0;
  std::string layout = "simplex";  // circle | simplex
  int test_per_class = 500;

  // group generator (two classes x two groups unless fractions say otherwise)
  std::vector<double> fractions;
  int num_groups = 2;
  int n = 2000;
  int core_dim = 2;
  int spurious_dim = 2;
  double core_separation = 2.0;
  double spurious_separation = 2.0;
  double group_noise = 1.0;
  int test_per_cell = 250;
};

struct ModelConfig {
  std::string kind = "mlp";  // linear | mlp
  std::vector<int> hidden{128};
  bool bias = true;
};

struct LossConfig {
  std::string init;                  // ce | balanced-ce | la-init; empty = per run mode
  std::string dictionary = "identity";  // identity | cluster | la-column
  int cluster_size = 2;
  double tau = 1.0;
  bool train_w = false;
  bool train_l = true;
  bool train_delta = true;
  bool train_eps = false;
};

struct ObjectiveConfig {
  std::string target = "balanced";  // balanced | deo
  double lambda_val = 1.0;
};

struct RunConfig {
  std::string mode = "autobalance";  // autobalance | baseline-ce | baseline-la
  std::string dir = "runs/out";
  std::vector<std::uint64_t> seeds{1};
  std::vector<double> lambda_grid{0.0, 0.25, 0.5, 0.75, 0.9};
};

struct ExperimentConfig {
  DataConfig data;
  ModelConfig model;
  LossConfig loss;
  bilevel::BilevelConfig bilevel;
  bool bilevel_seed_set = false;  // when false the data seed feeds the search too
  ObjectiveConfig objective;
  RunConfig run;

  void validate() const {
    if (data.kind != "longtail" && data.kind != "group")
      throw ConfigError("config: data.kind must be longtail or group");
    if (data.kind == "longtail") {
      if (data.num_classes < 2) throw ConfigError("config: data.num_classes must be >= 2");
      if (data.base_size < 1) throw ConfigError("config: data.base_size must be >= 1");
      if (!(data.rho >= 1.0)) throw ConfigError("config: data.rho must be >= 1");
      if (data.layout != "circle" && data.layout != "simplex")
        throw ConfigError("config: data.layout must be circle or simplex");
      if (data.test_per_class < 1) throw ConfigError("config: data.test_per_class must be >= 1");
    } else {
      if (data.fractions.empty()) throw ConfigError("config: group data needs data.fractions");
      if (data.n < 4) throw ConfigError("config: data.n too small");
      if (data.test_per_cell < 1) throw ConfigError("config: data.test_per_cell must be >= 1");
      if (loss.dictionary != "identity")
        throw ConfigError("config: the group loss form uses the identity dictionary");
      if (loss.init == "balanced-ce")
        throw ConfigError("config: balanced-ce is a class-form initialization");
      if (loss.train_eps)
        throw ConfigError("config: the group loss form has no augmentation radii");
    }
    if (!(data.split_fraction > 0.0 && data.split_fraction < 1.0))
      throw ConfigError("config: data.split_fraction must lie in (0, 1)");
    if (model.kind != "linear" && model.kind != "mlp")
      throw ConfigError("config: model.kind must be linear or mlp");
    if (!loss.init.empty() && loss.init != "ce" && loss.init != "balanced-ce" &&
        loss.init != "la-init")
      throw ConfigError("config: loss.init must be ce, balanced-ce or la-init");
    if (loss.dictionary != "identity" && loss.dictionary != "cluster" &&
        loss.dictionary != "la-column")
      throw ConfigError("config: loss.dictionary must be identity, cluster or la-column");
    if (loss.cluster_size < 1) throw ConfigError("config: loss.cluster_size must be >= 1");
    if (objective.target != "balanced" && objective.target != "deo")
      throw ConfigError("config: objective.target must be balanced or deo");
    if (objective.lambda_val < 0.0 || objective.lambda_val > 1.0)
      throw ConfigError("config: objective.lambda_val must lie in [0, 1]");
    if (run.mode != "autobalance" && run.mode != "baseline-ce" && run.mode != "baseline-la")
      throw ConfigError("config: run.mode must be autobalance, baseline-ce or baseline-la");
    if (run.mode == "baseline-ce" && !loss.init.empty() && loss.init != "ce")
      throw ConfigError("config: run.mode baseline-ce fixes loss.init = ce");
    if (run.mode == "baseline-la" && !loss.init.empty() && loss.init != "la-init")
      throw ConfigError("config: run.mode baseline-la fixes loss.init = la-init");
    if (run.seeds.empty()) throw ConfigError("config: run.seeds must be nonempty");
    if (run.lambda_grid.empty()) throw ConfigError("config: run.lambda_grid must be nonempty");
    for (double v : run.lambda_grid)
      if (v < 0.0 || v > 1.0) throw ConfigError("config: run.lambda_grid entries must lie in [0, 1]");
    bilevel.validate();
  }
};

// ----- raw parsing ---------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: " + key + " expects true/false, got '" + v + "'");
}

inline double parse_double(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  }
}

inline long long parse_int(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    long long i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return i;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects an integer, got '" + v + "'");
  }
}

template <typename T, typename F>
std::vector<T> parse_list(const std::string& v, const std::string& key, F one) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError("config: " + key + " has an empty list entry");
    out.push_back(one(item, key));
  }
  if (out.empty()) throw ConfigError("config: " + key + " expects a nonempty list");
  return out;
}

using SectionMap = std::map<std::string, std::map<std::string, std::string>>;

inline SectionMap parse_ini(std::istream& in) {
  SectionMap out;
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t cut = line.find_first_of(";#");
    if (cut != std::string::npos) line = line.substr(0, cut);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("config: malformed section header at line " + std::to_string(lineno));
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw ConfigError("config: empty section name at line " + std::to_string(lineno));
      out[section];
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: expected key = value at line " + std::to_string(lineno));
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config: empty key at line " + std::to_string(lineno));
    if (section.empty())
      throw ConfigError("config: key '" + key + "' appears before any section");
    if (!out[section].emplace(key, value).second)
      throw ConfigError("config: duplicate key '" + section + "." + key + "'");
  }
  return out;
}

// JSON input flattens to the same string map the INI parser produces, so both
// encodings share one extraction and validation path.
inline std::string json_scalar_to_string(const nlohmann::json& v, const std::string& key) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number()) return v.dump();
  throw ConfigError("config: " + key + " has an unsupported JSON value type");
}

inline SectionMap flatten_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: JSON root must be an object");
  SectionMap out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_object())
      throw ConfigError("config: section '" + it.key() + "' must be a JSON object");
    for (auto kv = it.value().begin(); kv != it.value().end(); ++kv) {
      const std::string full = it.key() + "." + kv.key();
      if (kv.value().is_array()) {
        std::string joined;
        for (const auto& e : kv.value()) {
          if (!joined.empty()) joined += ",";
          joined += json_scalar_to_string(e, full);
        }
        out[it.key()][kv.key()] = joined;
      } else {
        out[it.key()][kv.key()] = json_scalar_to_string(kv.value(), full);
      }
    }
  }
  return out;
}

struct Extractor {
  const std::map<std::string, std::string>* kv = nullptr;
  std::string section;
  std::set<std::string> seen;

  bool has(const std::string& key) { return kv != nullptr && kv->count(key) > 0; }

  const std::string* get(const std::string& key) {
    seen.insert(key);
    if (kv == nullptr) return nullptr;
    auto it = kv->find(key);
    return it == kv->end() ? nullptr : &it->second;
  }

  void take(const std::string& key, std::string& out) {
    if (const std::string* v = get(key)) out = *v;
  }
  void take(const std::string& key, bool& out) {
    if (const std::string* v = get(key)) out = parse_bool(*v, section + "." + key);
  }
  void take(const std::string& key, double& out) {
    if (const std::string* v = get(key)) out = parse_double(*v, section + "." + key);
  }
  void take(const std::string& key, int& out) {
    if (const std::string* v = get(key))
      out = static_cast<int>(parse_int(*v, section + "." + key));
  }
  void take(const std::string& key, std::uint64_t& out) {
    if (const std::string* v = get(key)) {
      long long i = parse_int(*v, section + "." + key);
      if (i < 0) throw ConfigError("config: " + section + "." + key + " must be >= 0");
      out = static_cast<std::uint64_t>(i);
    }
  }
  void take(const std::string& key, std::vector<double>& out) {
    if (const std::string* v = get(key))
      out = parse_list<double>(*v, section + "." + key, parse_double);
  }
  void take(const std::string& key, std::vector<int>& out) {
    if (const std::string* v = get(key))
      out = parse_list<int>(*v, section + "." + key, [](const std::string& s, const std::string& k) {
        return static_cast<int>(parse_int(s, k));
      });
  }
  void take(const std::string& key, std::vector<std::uint64_t>& out) {
    if (const std::string* v = get(key))
      out = parse_list<std::uint64_t>(*v, section + "." + key,
                                      [](const std::string& s, const std::string& k) {
                                        long long i = parse_int(s, k);
                                        if (i < 0) throw ConfigError("config: " + k + " must be >= 0");
                                        return static_cast<std::uint64_t>(i);
                                      });
  }

  void finish() const {
    if (kv == nullptr) return;
    for (const auto& [key, value] : *kv) {
      (void)value;
      if (seen.count(key) == 0)
        throw ConfigError("config: unknown key '" + section + "." + key + "'");
    }
  }
};

}  // namespace detail

inline ExperimentConfig from_sections(const detail::SectionMap& sections) {
  static const std::set<std::string> known = {"data", "model", "loss", "bilevel", "objective",
                                              "run"};
  for (const auto& [name, kv] : sections) {
    (void)kv;
    if (known.count(name) == 0) throw ConfigError("config: unknown section '" + name + "'");
  }
  auto section = [&](const char* name) -> const std::map<std::string, std::string>* {
    auto it = sections.find(name);
    return it == sections.end() ? nullptr : &it->second;
  };

  ExperimentConfig cfg;
  {
    detail::Extractor e{section("data"), "data"};
    e.take("kind", cfg.data.kind);
    e.take("seed", cfg.data.seed);
    e.take("split_fraction", cfg.data.split_fraction);
    e.take("num_classes", cfg.data.num_classes);
    e.take("base_size", cfg.data.base_size);
    e.take("rho", cfg.data.rho);
    e.take("dim", cfg.data.dim);
    e.take("separation", cfg.data.separation);
    e.take("noise", cfg.data.noise);
    e.take("layout", cfg.data.layout);
    e.take("test_per_class", cfg.data.test_per_class);
    e.take("fractions", cfg.data.fractions);
    e.take("num_groups", cfg.data.num_groups);
    e.take("n", cfg.data.n);
    e.take("core_dim", cfg.data.core_dim);
    e.take("spurious_dim", cfg.data.spurious_dim);
    e.take("core_separation", cfg.data.core_separation);
    e.take("spurious_separation", cfg.data.spurious_separation);
    e.take("group_noise", cfg.data.group_noise);
    e.take("test_per_cell", cfg.data.test_per_cell);
    e.finish();
  }
  {
    detail::Extractor e{section("model"), "model"};
    e.take("kind", cfg.model.kind);
    e.take("hidden", cfg.model.hidden);
    e.take("bias", cfg.model.bias);
    e.finish();
  }
  {
    detail::Extractor e{section("loss"), "loss"};
    e.take("init", cfg.loss.init);
    e.take("dictionary", cfg.loss.dictionary);
    e.take("cluster_size", cfg.loss.cluster_size);
    e.take("tau", cfg.loss.tau);
    e.take("train_w", cfg.loss.train_w);
    e.take("train_l", cfg.loss.train_l);
    e.take("train_delta", cfg.loss.train_delta);
    e.take("train_eps", cfg.loss.train_eps);
    e.finish();
  }
  {
    detail::Extractor e{section("bilevel"), "bilevel"};
    e.take("t1", cfg.bilevel.t1);
    e.take("t2", cfg.bilevel.t2);
    e.take("eta_theta", cfg.bilevel.eta_theta);
    e.take("eta_alpha", cfg.bilevel.eta_alpha);
    e.take("momentum", cfg.bilevel.momentum);
    e.take("weight_decay", cfg.bilevel.weight_decay);
    e.take("alpha_momentum", cfg.bilevel.alpha_momentum);
    e.take("alpha_weight_decay", cfg.bilevel.alpha_weight_decay);
    e.take("batch_train", cfg.bilevel.batch_train);
    e.take("batch_val", cfg.bilevel.batch_val);
    e.take("neumann_order", cfg.bilevel.neumann_order);
    e.take("neumann_step", cfg.bilevel.neumann_step);
    e.take("neumann_eta_scaling", cfg.bilevel.neumann_eta_scaling);
    e.take("alpha_every_n", cfg.bilevel.alpha_every_n);
    e.take("augment_copies", cfg.bilevel.augment_copies);
    if (e.has("seed")) cfg.bilevel_seed_set = true;
    e.take("seed", cfg.bilevel.seed);
    std::string sched;
    e.take("schedule", sched);
    if (!sched.empty()) {
      if (sched == "constant")
        cfg.bilevel.schedule = optim::LrSchedule::kConstant;
      else if (sched == "step")
        cfg.bilevel.schedule = optim::LrSchedule::kStep;
      else if (sched == "cosine")
        cfg.bilevel.schedule = optim::LrSchedule::kCosine;
      else
        throw ConfigError("config: bilevel.schedule must be constant, step or cosine");
    }
    e.take("divergence_threshold", cfg.bilevel.divergence_threshold);
    e.finish();
  }
  {
    detail::Extractor e{section("objective"), "objective"};
    e.take("target", cfg.objective.target);
    e.take("lambda_val", cfg.objective.lambda_val);
    e.finish();
  }
  {
    detail::Extractor e{section("run"), "run"};
    e.take("mode", cfg.run.mode);
    e.take("dir", cfg.run.dir);
    e.take("seeds", cfg.run.seeds);
    e.take("lambda_grid", cfg.run.lambda_grid);
    e.finish();
  }
  cfg.bilevel.lambda_val = cfg.objective.lambda_val;
  cfg.bilevel.train_w = cfg.loss.train_w;
  cfg.bilevel.train_l = cfg.loss.train_l;
  cfg.bilevel.train_delta = cfg.loss.train_delta;
  cfg.bilevel.train_eps = cfg.loss.train_eps;
  if (!cfg.bilevel_seed_set) cfg.bilevel.seed = cfg.data.seed;
  cfg.validate();
  return cfg;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  std::string body = detail::trim(text);
  if (!body.empty() && body.front() == '{')
    return from_sections(detail::flatten_json(nlohmann::json::parse(body)));
  std::istringstream in(text);
  return from_sections(detail::parse_ini(in));
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path);
  std::stringstream buf;
  buf << f.rdbuf();
  try {
    return parse_config_text(buf.str());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: invalid JSON in " + path + ": " + e.what());
  }
}

inline const char* schedule_name(optim::LrSchedule s) {
  switch (s) {
    case optim::LrSchedule::kConstant: return "constant";
    case optim::LrSchedule::kStep: return "step";
    default: return "cosine";
  }
}

inline nlohmann::json to_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["data"] = {{"kind", cfg.data.kind},
               {"seed", cfg.data.seed},
               {"split_fraction", cfg.data.split_fraction}};
  if (cfg.data.kind == "longtail") {
    j["data"]["num_classes"] = cfg.data.num_classes;
    j["data"]["base_size"] = cfg.data.base_size;
    j["data"]["rho"] = cfg.data.rho;
    j["data"]["dim"] = cfg.data.dim;
    j["data"]["separation"] = cfg.data.separation;
    j["data"]["noise"] = cfg.data.noise;
    j["data"]["layout"] = cfg.data.layout;
    j["data"]["test_per_class"] = cfg.data.test_per_class;
  } else {
    j["data"]["fractions"] = cfg.data.fractions;
    j["data"]["num_groups"] = cfg.data.num_groups;
    j["data"]["n"] = cfg.data.n;
    j["data"]["core_dim"] = cfg.data.core_dim;
    j["data"]["spurious_dim"] = cfg.data.spurious_dim;
    j["data"]["core_separation"] = cfg.data.core_separation;
    j["data"]["spurious_separation"] = cfg.data.spurious_separation;
    j["data"]["group_noise"] = cfg.data.group_noise;
    j["data"]["test_per_cell"] = cfg.data.test_per_cell;
  }
  j["model"] = {{"kind", cfg.model.kind}, {"hidden", cfg.model.hidden}, {"bias", cfg.model.bias}};
  j["loss"] = {{"init", cfg.loss.init},       {"dictionary", cfg.loss.dictionary},
               {"cluster_size", cfg.loss.cluster_size}, {"tau", cfg.loss.tau},
               {"train_w", cfg.loss.train_w}, {"train_l", cfg.loss.train_l},
               {"train_delta", cfg.loss.train_delta},   {"train_eps", cfg.loss.train_eps}};
  j["bilevel"] = {{"t1", cfg.bilevel.t1},
                  {"t2", cfg.bilevel.t2},
                  {"eta_theta", cfg.bilevel.eta_theta},
                  {"eta_alpha", cfg.bilevel.eta_alpha},
                  {"momentum", cfg.bilevel.momentum},
                  {"weight_decay", cfg.bilevel.weight_decay},
                  {"alpha_momentum", cfg.bilevel.alpha_momentum},
                  {"alpha_weight_decay", cfg.bilevel.alpha_weight_decay},
                  {"batch_train", cfg.bilevel.batch_train},
                  {"batch_val", cfg.bilevel.batch_val},
                  {"neumann_order", cfg.bilevel.neumann_order},
                  {"neumann_step", cfg.bilevel.neumann_step},
                  {"neumann_eta_scaling", cfg.bilevel.neumann_eta_scaling},
                  {"alpha_every_n", cfg.bilevel.alpha_every_n},
                  {"augment_copies", cfg.bilevel.augment_copies},
                  {"schedule", schedule_name(cfg.bilevel.schedule)},
                  {"divergence_threshold", cfg.bilevel.divergence_threshold},
                  {"seed", cfg.bilevel.seed}};
  j["objective"] = {{"target", cfg.objective.target}, {"lambda_val", cfg.objective.lambda_val}};
  j["run"] = {{"mode", cfg.run.mode},
              {"dir", cfg.run.dir},
              {"seeds", cfg.run.seeds},
              {"lambda_grid", cfg.run.lambda_grid}};
  return j;
}

}  // namespace config
}  // namespace lossforge
