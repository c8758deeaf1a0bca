#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "lossforge/bilevel.hpp"
#include "lossforge/config.hpp"
#include "lossforge/dataset.hpp"
#include "lossforge/metrics.hpp"
#include "lossforge/verify.hpp"

namespace lossforge {
namespace runner {

// ---------------------------------------------------------------------------
// Experiment plumbing behind the CLI subcommands. Every run is a pure
// function of (config, seed): all randomness flows through named sub-streams
// of the root seed, files carry doubles at 17 significant digits, and
// timestamps live only in meta.json so the result files are byte-stable.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> solve_dense(Tensor a, std::vector<double> b) {
  int n = a.rows();
  if (a.rank() != 2 || a.cols() != n || static_cast<int>(b.size()) != n)
    throw ShapeError("solve_dense: needs a square system");
  for (int col = 0; col < n; ++col) {
    int piv = col;
    for (int r = col + 1; r < n; ++r)
      if (std::fabs(a.at(r, col)) > std::fabs(a.at(piv, col))) piv = r;
    if (std::fabs(a.at(piv, col)) < 1e-14) throw NumericalError("solve_dense: singular matrix");
    if (piv != col) {
      for (int c = 0; c < n; ++c) std::swap(a.at(piv, c), a.at(col, c));
      std::swap(b[static_cast<size_t>(piv)], b[static_cast<size_t>(col)]);
    }
    for (int r = col + 1; r < n; ++r) {
      double f = a.at(r, col) / a.at(col, col);
      for (int c = col; c < n; ++c) a.at(r, c) -= f * a.at(col, c);
      b[static_cast<size_t>(r)] -= f * b[static_cast<size_t>(col)];
    }
  }
  std::vector<double> x(static_cast<size_t>(n));
  for (int r = n - 1; r >= 0; --r) {
    double s = b[static_cast<size_t>(r)];
    for (int c = r + 1; c < n; ++c) s -= a.at(r, c) * x[static_cast<size_t>(c)];
    x[static_cast<size_t>(r)] = s / a.at(r, r);
  }
  return x;
}

inline double power_lambda_max(const Tensor& a, int iters = 100) {
  int n = a.rows();
  std::vector<double> v(static_cast<size_t>(n), 1.0), av(static_cast<size_t>(n));
  double lam = 0.0;
  for (int it = 0; it < iters; ++it) {
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += a.at(i, j) * v[static_cast<size_t>(j)];
      av[static_cast<size_t>(i)] = s;
    }
    double nrm = 0.0;
    for (double t : av) nrm += t * t;
    nrm = std::sqrt(nrm);
    if (nrm == 0.0) return 0.0;
    lam = nrm;
    for (int i = 0; i < n; ++i) v[static_cast<size_t>(i)] = av[static_cast<size_t>(i)] / nrm;
  }
  return lam;
}

// Two separable disk clusters at +/-2 along a rotated axis; used by the
// bundled margin-equivalence instances.
inline void disk_pair(Tensor& x, std::vector<int>& y, int n_pos, int n_neg, double rot,
                      std::uint64_t seed) {
  auto st = RngStream::substream(seed, "svm-data");
  int n = n_pos + n_neg;
  x = Tensor::zeros({n, 2});
  y.resize(static_cast<size_t>(n));
  double cr = std::cos(rot), sr = std::sin(rot);
  for (int i = 0; i < n; ++i) {
    bool pos = i < n_pos;
    double cx = pos ? 2.0 : -2.0;
    double r = 0.9 * st.uniform();
    double a = 2.0 * 3.14159265358979323846 * st.uniform();
    double px = cx + r * std::cos(a), py = r * std::sin(a);
    x.at(i, 0) = cr * px - sr * py;
    x.at(i, 1) = sr * px + cr * py;
    y[static_cast<size_t>(i)] = pos ? 1 : -1;
  }
}

inline std::array<double, 2> offsets_for_tie(double d1, double d2, double level) {
  double db1 = 1.0 / d1, db2 = 1.0 / d2;
  return {0.0, -(db1 - db2) * std::log(level) / db2};
}

inline std::string iso_utc_now() {
  std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << text;
  if (!f) throw IoError("failed while writing " + path);
}

}  // namespace detail

// ----- data assembly -------------------------------------------------------

struct DataBundle {
  data::SplitDataset split;
  data::Dataset test;
  data::Dataset pool;  // the generated training pool before the split
  std::vector<int> train_counts;
  nlohmann::json generator;
};

inline DataBundle build_data(const config::ExperimentConfig& cfg, std::uint64_t seed) {
  DataBundle b;
  b.generator = config::to_json(cfg)["data"];
  b.generator["seed"] = seed;
  if (cfg.data.kind == "longtail") {
    data::GaussianMixtureSpec mix;
    mix.dim = cfg.data.dim;
    mix.separation = cfg.data.separation;
    mix.noise = cfg.data.noise;
    mix.layout = cfg.data.layout == "circle" ? data::GaussianMixtureSpec::Layout::kCircle
                                             : data::GaussianMixtureSpec::Layout::kSimplex;
    int k = cfg.data.num_classes;
    std::vector<int> base(static_cast<size_t>(k), cfg.data.base_size);
    b.pool = data::make_longtail(base, cfg.data.rho, mix, seed);
    b.split = data::split(b.pool, cfg.data.split_fraction, seed);
    auto means = data::mixture_means(mix, k);
    auto tstream = RngStream::substream(seed, "test");
    b.test = data::sample_mixture(std::vector<int>(static_cast<size_t>(k), cfg.data.test_per_class),
                                  means, mix.noise, tstream);
    double mu = std::pow(static_cast<double>(base[0]) /
                             (static_cast<double>(base[static_cast<size_t>(k - 1)]) * cfg.data.rho),
                         1.0 / (k - 1));
    b.generator["mu"] = mu;
  } else {
    data::GroupMixtureSpec gmix;
    gmix.core_dim = cfg.data.core_dim;
    gmix.spurious_dim = cfg.data.spurious_dim;
    gmix.core_separation = cfg.data.core_separation;
    gmix.spurious_separation = cfg.data.spurious_separation;
    gmix.noise = cfg.data.group_noise;
    int k = cfg.data.num_classes, ng = cfg.data.num_groups;
    if (static_cast<int>(cfg.data.fractions.size()) != k * ng)
      throw ConfigError("config: data.fractions must have num_classes * num_groups entries");
    b.pool = data::make_group_dataset(cfg.data.fractions, k, ng, cfg.data.n, gmix, seed);
    b.split = data::split(b.pool, cfg.data.split_fraction, seed);

    // balanced test set: every (class, group) cell at equal size, drawn from
    // an independent sub-stream so it never overlaps the training pool
    data::GaussianMixtureSpec core{gmix.core_dim, gmix.core_separation, gmix.noise,
                                   data::GaussianMixtureSpec::Layout::kCircle};
    data::GaussianMixtureSpec spur{gmix.spurious_dim, gmix.spurious_separation, gmix.noise,
                                   data::GaussianMixtureSpec::Layout::kCircle};
    auto class_means = data::mixture_means(core, k);
    auto group_means = data::mixture_means(spur, ng);
    auto tstream = RngStream::substream(seed, "test");
    int per_cell = cfg.data.test_per_cell;
    data::Dataset test;
    test.num_classes = k;
    test.num_groups = ng;
    test.x = Tensor::zeros({k * ng * per_cell, gmix.core_dim + gmix.spurious_dim});
    int row = 0;
    for (int c = 0; c < k; ++c)
      for (int g = 0; g < ng; ++g)
        for (int s = 0; s < per_cell; ++s) {
          for (int j = 0; j < gmix.core_dim; ++j)
            test.x.at(row, j) = class_means[static_cast<size_t>(c)][static_cast<size_t>(j)] +
                                gmix.noise * tstream.normal();
          for (int j = 0; j < gmix.spurious_dim; ++j)
            test.x.at(row, gmix.core_dim + j) =
                group_means[static_cast<size_t>(g)][static_cast<size_t>(j)] +
                gmix.noise * tstream.normal();
          test.y.push_back(c);
          test.groups.push_back(g);
          ++row;
        }
    test.validate();
    b.test = test;
  }
  b.train_counts = b.split.train.class_counts();
  return b;
}

inline ModelSpec build_model(const config::ExperimentConfig& cfg, int input_dim, int num_classes) {
  ModelSpec spec;
  spec.kind = cfg.model.kind == "linear" ? ModelSpec::Kind::kLinear : ModelSpec::Kind::kMlp;
  spec.input_dim = input_dim;
  if (spec.kind == ModelSpec::Kind::kMlp) spec.hidden = cfg.model.hidden;
  spec.num_classes = num_classes;
  spec.bias = cfg.model.bias;
  return spec;
}

inline loss::Dictionary build_dictionary(const config::ExperimentConfig& cfg,
                                         const std::vector<int>& counts) {
  int k = static_cast<int>(counts.size());
  if (cfg.loss.dictionary == "identity") return loss::Dictionary::identity(k);
  if (cfg.loss.dictionary == "cluster")
    return loss::Dictionary::cluster(counts, cfg.loss.cluster_size);
  return loss::Dictionary::la_column(loss::normalized_freqs(counts));
}

// Resolves the loss initialization against the run mode: baselines pin their
// own init, autobalance defaults to the balanced weighting.
inline loss::LossParams build_init(const config::ExperimentConfig& cfg,
                                   const std::vector<int>& counts) {
  std::string kind = cfg.loss.init;
  if (kind.empty()) {
    if (cfg.run.mode == "baseline-ce")
      kind = "ce";
    else if (cfg.run.mode == "baseline-la")
      kind = "la-init";
    else
      kind = "balanced-ce";
  }
  loss::Dictionary dict = build_dictionary(cfg, counts);
  loss::LossParams p;
  if (kind == "ce") {
    p.dict = dict;
    p.w_embed = Tensor::ones({dict.embed_dim()});
    p.l_embed = Tensor::zeros({dict.embed_dim()});
    p.delta_raw_embed = Tensor::zeros({dict.embed_dim()});
  } else if (kind == "balanced-ce") {
    p = loss::balanced_init(counts, dict);
  } else {
    p = loss::la_init(counts, dict, cfg.loss.tau);
  }
  if (cfg.loss.train_eps && !p.eps_embed) p.eps_embed = Tensor::zeros({dict.embed_dim()});
  p.validate();
  return p;
}

// ----- gen-data --------------------------------------------------------------

inline void cmd_gen_data(const config::ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  DataBundle b = build_data(cfg, cfg.data.seed);
  std::filesystem::create_directories(out_dir);
  data::save_dataset(b.pool, out_dir + "/dataset.csv", b.generator, cfg.data.seed);
  data::save_dataset(b.test, out_dir + "/test.csv", b.generator, cfg.data.seed);
}

// ----- run -------------------------------------------------------------------

struct RunResult {
  metrics::MetricsReport report;
  std::optional<loss::LossParams> class_alpha;
  std::optional<loss::GroupLossParams> group_alpha;
  Tensor alpha_packed;
  bilevel::RunLog log;
  std::uint64_t seed = 0;
  std::string mode;
};

inline nlohmann::json alpha_to_json(const RunResult& r) {
  return r.class_alpha ? loss::loss_params_to_json(*r.class_alpha)
                       : loss::group_loss_params_to_json(*r.group_alpha);
}

inline bilevel::ValTarget resolve_target(const config::ExperimentConfig& cfg) {
  return cfg.objective.target == "balanced" ? bilevel::ValTarget::kBalanced
                                            : bilevel::ValTarget::kDeo;
}

inline loss::GroupLossParams build_group_init(const config::ExperimentConfig& cfg,
                                              const data::Dataset& train) {
  std::string kind = cfg.loss.init;
  if (kind.empty()) kind = cfg.run.mode == "baseline-ce" ? "ce" : "la-init";
  if (kind == "ce") return loss::group_ce_init(train.num_classes, train.num_groups);
  return loss::group_la_params(train.cell_counts(), train.num_classes, train.num_groups);
}

// The full pipeline without any file output; cmd_run adds the run directory.
// Group datasets train the per-(class,group) loss form, long-tailed ones the
// per-class form.
inline RunResult execute_run(const config::ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  DataBundle bundle = build_data(cfg, seed);
  ModelSpec spec = build_model(cfg, bundle.split.train.dim(), bundle.split.train.num_classes);
  bilevel::BilevelConfig bcfg = cfg.bilevel;
  bcfg.seed = cfg.bilevel_seed_set ? cfg.bilevel.seed : seed;
  if (cfg.run.mode != "autobalance") bcfg.t1 = bcfg.t2;  // baselines never touch the design
  RunResult out;
  if (bundle.split.train.has_groups()) {
    loss::GroupLossParams init = build_group_init(cfg, bundle.split.train);
    auto res =
        bilevel::group_autobalance(bundle.split, spec, init, bcfg, resolve_target(cfg), &bundle.test);
    out.report = metrics::evaluate(spec, res.theta, bundle.test);
    out.group_alpha = res.alpha;
    out.alpha_packed = res.alpha_packed;
    out.log = std::move(res.log);
  } else {
    loss::LossParams init = build_init(cfg, bundle.train_counts);
    auto res =
        bilevel::autobalance(bundle.split, spec, init, bcfg, resolve_target(cfg), &bundle.test);
    out.report = metrics::evaluate(spec, res.theta, bundle.test);
    out.class_alpha = res.alpha;
    out.alpha_packed = res.alpha_packed;
    out.log = std::move(res.log);
  }
  out.seed = seed;
  out.mode = cfg.run.mode;
  return out;
}

inline std::string metrics_csv_text(const metrics::MetricsReport& r, const std::string& mode,
                                    std::uint64_t seed) {
  std::ostringstream out;
  out << "mode,seed,std_err,balanced_err,group_balanced_err,deo,worst_cell_err";
  int k = r.per_class_err.rank() == 1 ? r.per_class_err.shape[0] : 0;
  for (int c = 0; c < k; ++c) out << ",err_class" << c;
  out << "\n";
  out << mode << "," << seed << "," << data::fmt_g17(r.std_err) << ","
      << data::fmt_g17(r.balanced_err) << ",";
  if (r.group_balanced_err) out << data::fmt_g17(*r.group_balanced_err);
  out << ",";
  if (r.deo) out << data::fmt_g17(*r.deo);
  out << ",";
  if (r.worst_cell_err) out << data::fmt_g17(*r.worst_cell_err);
  for (int c = 0; c < k; ++c) out << "," << data::fmt_g17(r.per_class_err.data[static_cast<size_t>(c)]);
  out << "\n";
  return out.str();
}

inline RunResult cmd_run(const config::ExperimentConfig& cfg, const std::string& out_dir = "",
                         std::optional<std::uint64_t> seed_override = std::nullopt) {
  auto t0 = std::chrono::steady_clock::now();
  std::uint64_t seed = seed_override.value_or(cfg.data.seed);
  RunResult res = execute_run(cfg, seed);
  std::string dir = out_dir.empty() ? cfg.run.dir : out_dir;
  std::filesystem::create_directories(dir);

  detail::write_text(dir + "/alpha.json", alpha_to_json(res).dump(2) + "\n");

  std::ostringstream log;
  for (const auto& e : res.log) log << bilevel::runlog_entry_to_json(e).dump() << "\n";
  detail::write_text(dir + "/runlog.jsonl", log.str());

  detail::write_text(dir + "/metrics.csv", metrics_csv_text(res.report, res.mode, seed));

  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  nlohmann::json meta;
  meta["created"] = detail::iso_utc_now();
  meta["wall_seconds"] = wall;
  meta["seed"] = seed;
  meta["mode"] = res.mode;
  meta["config"] = config::to_json(cfg);
  detail::write_text(dir + "/meta.json", meta.dump(2) + "\n");
  return res;
}

// ----- sweep -----------------------------------------------------------------

// Single-level baseline for the tradeoff sweep: plain SGD on
// (1-lambda)*CE + lambda*fairness-gap-surrogate over the whole pool.
inline Tensor train_blend(const data::Dataset& ds, const ModelSpec& spec, double lambda,
                          const bilevel::BilevelConfig& cfg) {
  auto init_stream = RngStream::substream(cfg.seed, "retrain-init");
  Tensor theta = init_params(spec, init_stream);
  auto batch_stream = RngStream::substream(cfg.seed, "blend-batches");
  optim::SgdState st;
  for (int it = 0; it < cfg.t2; ++it) {
    auto idx = bilevel::detail::draw_batch(batch_stream, ds.n(), cfg.batch_train);
    data::Dataset batch = ds.subset(idx);
    ad::Graph g;
    ad::Var th = g.value(theta);
    ad::Var logits = model_logits(g, spec, th, g.constant(batch.x));
    ad::Var obj = loss::mean_ce(g, logits, batch.y);
    if (lambda > 0.0)
      obj = g.add(g.scale(obj, 1.0 - lambda),
                  g.scale(loss::deo_surrogate_ce(g, logits, batch.y, batch.groups), lambda));
    double value = g.eval_scalar(obj);
    if (!std::isfinite(value) || value > cfg.divergence_threshold)
      throw DivergenceError("blend training diverged at iteration " + std::to_string(it));
    Tensor grad = g.grad(obj, {th}).at(th);
    double lr = optim::scheduled_lr(cfg.schedule, cfg.eta_theta, it, cfg.t2);
    optim::sgd_step(theta, grad, st, lr, cfg.momentum, cfg.weight_decay);
  }
  return theta;
}

struct SweepRow {
  std::string method;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  double std_err = 0.0;
  double balanced_err = 0.0;
  double deo = 0.0;
  bool frontier = false;
  bool diverged = false;
};

inline std::vector<SweepRow> cmd_sweep(const config::ExperimentConfig& cfg,
                                       const std::vector<double>& lambda_grid, int jobs,
                                       const std::string& out_dir = "") {
  cfg.validate();
  if (cfg.data.kind != "group")
    throw ConfigError("sweep: needs a group dataset (data.kind = group)");
  if (lambda_grid.empty()) throw ConfigError("sweep: empty lambda grid");
  if (jobs < 1) throw ConfigError("sweep: jobs must be >= 1");

  // shared read-only bundles, one per seed
  std::vector<DataBundle> bundles;
  bundles.reserve(cfg.run.seeds.size());
  for (std::uint64_t seed : cfg.run.seeds) bundles.push_back(build_data(cfg, seed));

  const std::vector<std::string> methods = {"autobalance", "train-blend"};
  struct Job {
    int method = 0;
    size_t seed_idx = 0;
    double lambda = 0.0;
  };
  std::vector<Job> plan;
  for (int m = 0; m < 2; ++m)
    for (size_t si = 0; si < cfg.run.seeds.size(); ++si)
      for (double lam : lambda_grid) plan.push_back({m, si, lam});

  std::vector<SweepRow> rows(plan.size());
  std::atomic<size_t> next{0};
  std::mutex err_mutex;
  std::exception_ptr first_error;

  auto run_job = [&](const Job& job) {
    const DataBundle& bundle = bundles[job.seed_idx];
    std::uint64_t seed = cfg.run.seeds[job.seed_idx];
    ModelSpec spec = build_model(cfg, bundle.split.train.dim(), bundle.split.train.num_classes);
    bilevel::BilevelConfig bcfg = cfg.bilevel;
    bcfg.seed = seed;
    metrics::MetricsReport rep;
    if (methods[static_cast<size_t>(job.method)] == "autobalance") {
      bcfg.lambda_val = job.lambda;
      loss::GroupLossParams init = build_group_init(cfg, bundle.split.train);
      auto res =
          bilevel::group_autobalance(bundle.split, spec, init, bcfg, bilevel::ValTarget::kDeo);
      rep = metrics::evaluate(spec, res.theta, bundle.test);
    } else {
      data::Dataset all = data::concat(bundle.split.train, bundle.split.val);
      Tensor theta = train_blend(all, spec, job.lambda, bcfg);
      rep = metrics::evaluate(spec, theta, bundle.test);
    }
    if (!rep.deo) throw EvalError("sweep: test set lost its group structure");
    SweepRow row;
    row.method = methods[static_cast<size_t>(job.method)];
    row.lambda = job.lambda;
    row.seed = seed;
    row.std_err = rep.std_err;
    row.balanced_err = rep.balanced_err;
    row.deo = *rep.deo;
    return row;
  };

  // divergence is a recordable outcome of a sweep point, not a harness error
  auto worker = [&] {
    for (;;) {
      size_t i = next.fetch_add(1);
      if (i >= plan.size()) return;
      try {
        rows[i] = run_job(plan[i]);
      } catch (const DivergenceError&) {
        rows[i].method = methods[static_cast<size_t>(plan[i].method)];
        rows[i].lambda = plan[i].lambda;
        rows[i].seed = cfg.run.seeds[plan[i].seed_idx];
        rows[i].diverged = true;
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };

  int workers = std::min<int>(jobs, static_cast<int>(plan.size()));
  std::vector<std::thread> pool;
  for (int t = 1; t < workers; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);

  // frontier flags per (method, seed) across the lambda grid
  for (int m = 0; m < 2; ++m)
    for (size_t si = 0; si < cfg.run.seeds.size(); ++si) {
      std::vector<metrics::ParetoPoint> pts;
      for (const auto& row : rows)
        if (!row.diverged && row.method == methods[static_cast<size_t>(m)] &&
            row.seed == cfg.run.seeds[si])
          pts.push_back({row.lambda, row.std_err, row.deo, row.method});
      auto front = metrics::pareto_front(pts);
      for (auto& row : rows) {
        if (row.diverged || row.method != methods[static_cast<size_t>(m)] ||
            row.seed != cfg.run.seeds[si])
          continue;
        for (const auto& p : front)
          if (p.lambda == row.lambda) row.frontier = true;
      }
    }

  if (!out_dir.empty() || !cfg.run.dir.empty()) {
    std::string dir = out_dir.empty() ? cfg.run.dir : out_dir;
    std::filesystem::create_directories(dir);
    std::ostringstream csv;
    csv << "method,lambda,seed,std_err,balanced_err,deo,frontier,diverged\n";
    for (const auto& row : rows) {
      csv << row.method << "," << data::fmt_g17(row.lambda) << "," << row.seed << ",";
      if (!row.diverged)
        csv << data::fmt_g17(row.std_err) << "," << data::fmt_g17(row.balanced_err) << ","
            << data::fmt_g17(row.deo);
      else
        csv << ",,";
      csv << "," << (row.frontier ? 1 : 0) << "," << (row.diverged ? 1 : 0) << "\n";
    }
    detail::write_text(dir + "/pareto.csv", csv.str());
  }
  return rows;
}

// ----- verify ----------------------------------------------------------------

inline nlohmann::json verify_lemma1() {
  nlohmann::json cases = nlohmann::json::array();
  bool all = true;
  auto add = [&](const verify::Lemma1Case& c) {
    auto rep = verify::lemma1_check(c);
    auto v = verify::lemma1_verdict(c, rep);
    all = all && v["pass"].get<bool>();
    cases.push_back(v);
  };
  const double deltas[] = {0.5, 1.0, 2.0};
  for (double d1 : deltas)
    for (double d2 : deltas) {
      if (d1 == d2) continue;
      for (double g : {0.5, 2.0, 4.0})
        add(verify::Lemma1Case::construct({d1, d2}, detail::offsets_for_tie(d1, d2, 0.3), g));
    }
  for (double g : {0.5, 2.0, 5.0})
    add(verify::Lemma1Case::construct({1.5, 1.5}, {0.2, 0.2}, g));
  add(verify::Lemma1Case::construct({1.0, 2.0}, detail::offsets_for_tie(1.0, 2.0, 0.3), 1.0));
  return nlohmann::json{{"check", "lemma1"}, {"cases", cases}, {"pass", all}};
}

inline nlohmann::json verify_lemma2() {
  const double grid[] = {0.3, 0.5, 0.8, 0.95};
  bool all = true;
  double min_cos = 1.0;
  int instances = 0;
  for (double dp : grid)
    for (double dm : grid)
      for (int rep_i = 0; rep_i < 2; ++rep_i) {
        Tensor x;
        std::vector<int> y;
        detail::disk_pair(x, y, 9, 7, 0.17 * instances, 100 + static_cast<std::uint64_t>(instances));
        auto rep = verify::lemma2_check(x, y, dp, dm);
        all = all && rep.pass;
        min_cos = std::min(min_cos, rep.cosine);
        ++instances;
      }

  nlohmann::json ridgeless = nlohmann::json::array();
  {
    Tensor x;
    std::vector<int> y;
    detail::disk_pair(x, y, 25, 15, 0.37, 7);
    verify::BinaryLossParams p;
    auto v = verify::ridgeless_verdict(verify::ridgeless_direction(x, y, p));
    all = all && v["pass"].get<bool>();
    ridgeless.push_back(v);
  }
  {
    Tensor x;
    std::vector<int> y;
    detail::disk_pair(x, y, 25, 15, 1.11, 8);
    verify::BinaryLossParams p;
    p.delta_plus = 0.4;
    p.delta_minus = 0.8;
    p.l_plus = 0.3;
    p.l_minus = -0.2;
    auto v = verify::ridgeless_verdict(verify::ridgeless_direction(x, y, p));
    all = all && v["pass"].get<bool>();
    ridgeless.push_back(v);
  }
  return nlohmann::json{{"check", "lemma2"},
                        {"instances", instances},
                        {"min_cosine", min_cos},
                        {"ridgeless", ridgeless},
                        {"pass", all}};
}

inline nlohmann::json verify_neumann() {
  // frozen table: H = 2I, eta = 1/4, exact inverse applies 0.5
  auto hvp2 = [](const Tensor& t) {
    Tensor out = t;
    for (double& v : out.data) v *= 2.0;
    return out;
  };
  Tensor v = Tensor::vec({1.0, 0.0});
  nlohmann::json table = nlohmann::json::array();
  double final_val = 0.0;
  for (int order = 0; order <= 3; ++order) {
    Tensor p = bilevel::neumann_ihvp(hvp2, v, order, 0.25, true);
    table.push_back({{"order", order}, {"approx", p.data[0]}, {"target", 0.5}});
    final_val = p.data[0];
  }
  bool table_ok = std::fabs(final_val - 0.46875) <= 1e-15;

  // geometric decrease on random SPD systems at eta = 0.9 / lambda_max
  bool geometric = true;
  nlohmann::json systems = nlohmann::json::array();
  for (std::uint64_t seed : {11, 12, 13}) {
    auto stream = RngStream::substream(seed, "spd");
    int n = 5;
    Tensor m = Tensor::zeros({n, n});
    for (double& x : m.data) x = stream.normal();
    Tensor h = Tensor::zeros({n, n});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        double s = i == j ? 1.0 : 0.0;
        for (int k = 0; k < n; ++k) s += m.at(k, i) * m.at(k, j);
        h.at(i, j) = s;
      }
    Tensor rhs = Tensor::zeros({n});
    for (double& x : rhs.data) x = stream.normal();
    auto hvp = [&](const Tensor& t) {
      Tensor out = Tensor::zeros({n});
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i)] += h.at(i, j) * t.data[static_cast<size_t>(j)];
      return out;
    };
    double eta = 0.9 / detail::power_lambda_max(h);
    auto exact = detail::solve_dense(h, rhs.data);
    std::vector<double> errs;
    for (int order : {0, 5, 10, 15, 20}) {
      Tensor p = bilevel::neumann_ihvp(hvp, rhs, order, eta, true);
      double e = 0.0;
      for (size_t i = 0; i < exact.size(); ++i)
        e += (p.data[i] - exact[i]) * (p.data[i] - exact[i]);
      errs.push_back(std::sqrt(e));
    }
    bool ok = true;
    for (size_t i = 0; i + 1 < errs.size(); ++i) ok = ok && errs[i + 1] < errs[i];
    geometric = geometric && ok;
    systems.push_back({{"seed", seed}, {"errors", errs}, {"decreasing", ok}});
  }
  return nlohmann::json{{"check", "neumann"},
                        {"table", table},
                        {"systems", systems},
                        {"pass", table_ok && geometric}};
}

inline nlohmann::json verify_hypergrad() {
  // quadratic family with a closed-form hypergradient
  double quad_rel = 0.0;
  {
    int n = 4;
    auto stream = RngStream::substream(29, "quad");
    Tensor m = Tensor::zeros({n, n});
    for (double& x : m.data) x = stream.normal();
    Tensor a = Tensor::zeros({n, n});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        double s = i == j ? 1.0 : 0.0;
        for (int k = 0; k < n; ++k) s += 0.3 * m.at(k, i) * m.at(k, j);
        a.at(i, j) = s;
      }
    Tensor alpha = Tensor::vec({1.0, -0.5, 0.25, 2.0});
    Tensor c = Tensor::vec({0.5, 0.5, -1.0, 0.0});
    auto theta_star = detail::solve_dense(a, alpha.data);
    std::vector<double> inner = theta_star;
    for (int i = 0; i < n; ++i) inner[static_cast<size_t>(i)] -= c.data[static_cast<size_t>(i)];
    auto want = detail::solve_dense(a, inner);

    auto lower = [&](ad::Graph& g, ad::Var th, ad::Var al) {
      ad::Var quad = g.scale(g.sum_all(g.mul(th, g.matvec(g.constant(a), th))), 0.5);
      return g.sub(quad, g.sum_all(g.mul(al, th)));
    };
    auto upper = [&](ad::Graph& g, ad::Var th, ad::Var) {
      ad::Var d = g.sub(th, g.constant(c));
      return g.scale(g.sum_all(g.mul(d, d)), 0.5);
    };
    double eta = 0.9 / detail::power_lambda_max(a);
    Tensor hg =
        bilevel::hypergradient_fn(lower, upper, Tensor::vec(theta_star), alpha, 400, eta, true);
    double num = 0.0, den = 0.0;
    for (int i = 0; i < n; ++i) {
      num += (hg.data[static_cast<size_t>(i)] - want[static_cast<size_t>(i)]) *
             (hg.data[static_cast<size_t>(i)] - want[static_cast<size_t>(i)]);
      den += want[static_cast<size_t>(i)] * want[static_cast<size_t>(i)];
    }
    quad_rel = std::sqrt(num / den);
  }

  // small logistic task against central-difference re-solves
  double logistic_rel = 0.0;
  {
    int n = 10, d = 2, k = 2;
    auto stream = RngStream::substream(7, "logistic");
    Tensor x = Tensor::zeros({n, d});
    std::vector<int> y(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      y[static_cast<size_t>(i)] = i % 2;
      for (int j = 0; j < d; ++j)
        x.at(i, j) = (y[static_cast<size_t>(i)] == 0 ? -1.0 : 1.0) * 0.8 + 0.7 * stream.normal();
    }
    Tensor xv = Tensor::zeros({6, d});
    std::vector<int> yv(6);
    for (int i = 0; i < 6; ++i) {
      yv[static_cast<size_t>(i)] = i % 2;
      for (int j = 0; j < d; ++j)
        xv.at(i, j) = (yv[static_cast<size_t>(i)] == 0 ? -1.0 : 1.0) * 0.8 + 0.7 * stream.normal();
    }
    const double reg = 0.1;
    auto lower = [&](ad::Graph& g, ad::Var th, ad::Var al) {
      ad::Var logits = g.matmul(g.constant(x), g.reshape(th, {d, k}));
      ad::Var z = g.add(logits, g.broadcast_row(al, n));
      ad::Var fit = loss::mean_ce(g, z, y);
      return g.add(fit, g.scale(g.sum_all(g.mul(th, th)), 0.5 * reg));
    };
    auto upper = [&](ad::Graph& g, ad::Var th, ad::Var) {
      ad::Var logits = g.matmul(g.constant(xv), g.reshape(th, {d, k}));
      return loss::mean_ce(g, logits, yv);
    };
    auto solve_inner = [&](const Tensor& alpha) {
      Tensor theta = Tensor::zeros({d * k});
      for (int it = 0; it < 200000; ++it) {
        ad::Graph g;
        ad::Var th = g.value(theta);
        ad::Var obj = lower(g, th, g.constant(alpha));
        Tensor grad = g.grad(obj, {th}).at(th);
        double gn = 0.0;
        for (double t : grad.data) gn = std::max(gn, std::fabs(t));
        if (gn <= 1e-11) break;
        for (size_t i = 0; i < theta.data.size(); ++i) theta.data[i] -= 0.5 * grad.data[i];
      }
      return theta;
    };
    auto upper_value = [&](const Tensor& theta) {
      ad::Graph g;
      ad::Var th = g.constant(theta);
      return g.eval_scalar(upper(g, th, th));
    };
    Tensor alpha = Tensor::vec({0.2, -0.1});
    Tensor theta = solve_inner(alpha);
    Tensor hg = bilevel::hypergradient_fn(lower, upper, theta, alpha, 2000, 0.1, true);
    const double h = 1e-4;
    double num = 0.0, den = 0.0;
    for (int i = 0; i < k; ++i) {
      Tensor ap = alpha, am = alpha;
      ap.data[static_cast<size_t>(i)] += h;
      am.data[static_cast<size_t>(i)] -= h;
      double fd = (upper_value(solve_inner(ap)) - upper_value(solve_inner(am))) / (2.0 * h);
      num += (hg.data[static_cast<size_t>(i)] - fd) * (hg.data[static_cast<size_t>(i)] - fd);
      den += fd * fd;
    }
    logistic_rel = std::sqrt(num / den);
  }
  return nlohmann::json{{"check", "hypergrad"},
                        {"quadratic_rel_err", quad_rel},
                        {"logistic_rel_err", logistic_rel},
                        {"pass", quad_rel <= 1e-6 && logistic_rel <= 1e-2}};
}

inline nlohmann::json verify_theorem1() {
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 1; s <= 25; ++s) seeds.push_back(s);
  auto rows = verify::theorem1_trend({32, 128, 512}, seeds);
  return verify::trend_verdict(rows);
}

inline std::vector<nlohmann::json> cmd_verify(const std::string& which) {
  std::vector<nlohmann::json> out;
  bool all = which == "all";
  if (all || which == "lemma1") out.push_back(verify_lemma1());
  if (all || which == "lemma2") out.push_back(verify_lemma2());
  if (all || which == "neumann") out.push_back(verify_neumann());
  if (all || which == "hypergrad") out.push_back(verify_hypergrad());
  if (all || which == "theorem1") out.push_back(verify_theorem1());
  if (out.empty())
    throw ConfigError("verify: unknown check '" + which +
                      "' (expected lemma1, lemma2, neumann, hypergrad, theorem1 or all)");
  return out;
}

inline bool verdicts_pass(const std::vector<nlohmann::json>& verdicts) {
  for (const auto& v : verdicts)
    if (!v.at("pass").get<bool>()) return false;
  return true;
}

// ----- report ----------------------------------------------------------------

inline std::string cmd_report(const std::string& dir) {
  std::ifstream mf(dir + "/metrics.csv");
  if (!mf) throw IoError("cannot read " + dir + "/metrics.csv");
  std::string header, row;
  if (!std::getline(mf, header) || !std::getline(mf, row))
    throw IoError("malformed metrics.csv in " + dir);
  std::vector<std::string> keys, vals;
  {
    std::stringstream hs(header), rs(row);
    std::string t;
    while (std::getline(hs, t, ',')) keys.push_back(t);
    while (std::getline(rs, t, ',')) vals.push_back(t);
  }
  std::ostringstream out;
  out << "run " << dir << "\n";
  for (size_t i = 0; i < keys.size() && i < vals.size(); ++i)
    if (!vals[i].empty()) out << "  " << keys[i] << ": " << vals[i] << "\n";

  std::ifstream af(dir + "/alpha.json");
  if (af) {
    nlohmann::json j = nlohmann::json::parse(af);
    auto print_vec = [&](const char* name, const nlohmann::json& arr) {
      out << "  " << name << ":";
      for (double v : arr.get<std::vector<double>>()) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), " %.4f", v);
        out << buf;
      }
      out << "\n";
    };
    out << (j.contains("num_groups") ? "design parameters (cell-major)\n" : "design parameters\n");
    print_vec("w", j.at("expanded").at("w"));
    print_vec("l", j.at("expanded").at("l"));
    print_vec("delta_eff", j.at("expanded").at("delta_eff"));
  }
  return out.str();
}

}  // namespace runner
}  // namespace lossforge
