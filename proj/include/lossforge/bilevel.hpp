#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lossforge/autodiff.hpp"
#include "lossforge/dataset.hpp"
#include "lossforge/errors.hpp"
#include "lossforge/losses.hpp"
#include "lossforge/metrics.hpp"
#include "lossforge/model.hpp"
#include "lossforge/neumann.hpp"
#include "lossforge/optim.hpp"

namespace lossforge::bilevel {

enum class ValTarget { kBalanced, kDeo };

inline const char* val_target_name(ValTarget t) {
  return t == ValTarget::kBalanced ? "balanced" : "deo";
}

struct BilevelConfig {
  int t1 = 0;                 // warm-up iterations (lower level only)
  int t2 = 0;                 // total search iterations; also retrain length
  double eta_theta = 0.1;
  double eta_alpha = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double alpha_momentum = 0.9;
  double alpha_weight_decay = 1e-4;
  int batch_train = 64;
  int batch_val = 64;
  int neumann_order = 3;
  double neumann_step = 0.1;
  bool neumann_eta_scaling = true;
  double lambda_val = 1.0;
  bool train_w = false;
  bool train_l = true;
  bool train_delta = true;
  bool train_eps = false;
  int alpha_every_n = 1;
  int augment_copies = 1;
  optim::LrSchedule schedule = optim::LrSchedule::kStep;
  double divergence_threshold = 1e6;
  std::uint64_t seed = 1;

  void validate() const {
    if (t1 < 0 || t2 < t1) throw ConfigError("bilevel: need t2 >= t1 >= 0");
    if (!(eta_theta > 0.0) || !(eta_alpha > 0.0)) throw ConfigError("bilevel: step sizes must be positive");
    if (batch_train < 1 || batch_val < 1) throw ConfigError("bilevel: batch sizes must be positive");
    if (neumann_order < 0) throw ConfigError("bilevel: neumann order must be nonnegative");
    if (!(neumann_step > 0.0)) throw ConfigError("bilevel: neumann step must be positive");
    if (lambda_val < 0.0 || lambda_val > 1.0) throw ConfigError("bilevel: lambda_val must lie in [0,1]");
    if (alpha_every_n < 1) throw ConfigError("bilevel: alpha_every_n must be positive");
    if (augment_copies < 1) throw ConfigError("bilevel: augment copies must be positive");
    if (!(divergence_threshold > 0.0)) throw ConfigError("bilevel: divergence threshold must be positive");
  }

  loss::AlphaLayout layout_for(const loss::LossParams& init) const {
    loss::AlphaLayout layout;
    layout.kprime = init.kprime();
    layout.has_eps = init.eps_embed.has_value();
    layout.train_w = train_w;
    layout.train_l = train_l;
    layout.train_delta = train_delta;
    layout.train_eps = train_eps;
    if (train_eps && !layout.has_eps)
      throw ConfigError("bilevel: cannot train augmentation radii without initial radii");
    return layout;
  }
};

struct RunLogEntry {
  int epoch = 0;
  std::string phase;
  double train_err = 0.0;
  double val_err = 0.0;
  double val_balanced_err = 0.0;
  double val_loss = 0.0;
  std::optional<double> test_err;
  std::optional<double> test_balanced_err;
  std::vector<double> alpha;
};

using RunLog = std::vector<RunLogEntry>;

inline nlohmann::json runlog_entry_to_json(const RunLogEntry& e) {
  nlohmann::json j{{"epoch", e.epoch},         {"phase", e.phase},
                   {"train_err", e.train_err}, {"val_err", e.val_err},
                   {"val_balanced_err", e.val_balanced_err}, {"val_loss", e.val_loss},
                   {"alpha", e.alpha}};
  if (e.test_err) j["test_err"] = *e.test_err;
  if (e.test_balanced_err) j["test_balanced_err"] = *e.test_balanced_err;
  return j;
}

// (1-lambda)*CE + lambda*(balanced CE or fairness-gap surrogate)
inline ad::Var build_val_objective(ad::Graph& g, ad::Var logits, const data::Dataset& batch,
                                   ValTarget target, double lambda) {
  ad::Var ce = loss::mean_ce(g, logits, batch.y);
  ad::Var fair = target == ValTarget::kBalanced
                     ? loss::balanced_ce(g, logits, batch.y, batch.num_classes)
                     : loss::deo_surrogate_ce(g, logits, batch.y, batch.groups);
  return g.add(g.scale(ce, 1.0 - lambda), g.scale(fair, lambda));
}

inline double val_objective_value(const ModelSpec& spec, const Tensor& theta,
                                  const data::Dataset& ds, ValTarget target, double lambda) {
  ad::Graph g;
  ad::Var logits = model_logits(g, spec, g.constant(theta), g.constant(ds.x));
  return g.eval_scalar(build_val_objective(g, logits, ds, target, lambda));
}

// ----- hypergradients ----------------------------------------------------------

// Implicit-function-theorem hypergradient for arbitrary scalar builders:
//   d(upper)/d(alpha) = -(d2 lower / d alpha d theta) H^{-1} grad_theta(upper),
// with H^{-1} approximated by the truncated Neumann series on one tape.
// The direct d(upper)/d(alpha) term is omitted: the validation objective does
// not mention alpha.
inline Tensor hypergradient_fn(const ad::BilevelFn& lower, const ad::BilevelFn& upper,
                               const Tensor& theta, const Tensor& alpha, int order, double step,
                               bool eta_scaling = true) {
  ad::Graph g;
  ad::Var th = g.value(theta), al = g.value(alpha);
  ad::Var lower_loss = lower(g, th, al);
  ad::Var upper_loss = upper(g, th, al);
  ad::Var gt = g.grad_vars(lower_loss, {th})[0];
  ad::Var v = g.value(Tensor::zeros(theta.shape));
  ad::Var s = g.sum_all(g.mul(v, gt));
  ad::Var hv = g.grad_vars(s, {th})[0];
  ad::Var mv = g.grad_vars(s, {al})[0];
  ad::Var gu = g.grad_vars(upper_loss, {th})[0];

  Tensor v1 = g.eval(gu);
  auto oracle = [&](const Tensor& x) {
    g.set_value(v, x);
    return g.eval(hv);
  };
  Tensor p = neumann_ihvp(oracle, v1, order, step, eta_scaling);
  g.set_value(v, p);
  Tensor mixed = g.eval(mv);
  for (double& x : mixed.data) x = -x;
  return mixed;
}

// Classification instance: lower = adjusted CE on the train batch, upper =
// the validation objective. unit_noise feeds the per-class augmentation when
// the layout carries radii.
inline Tensor hypergradient(const ModelSpec& spec, const loss::Dictionary& dict,
                            const loss::AlphaLayout& layout, ValTarget target,
                            const Tensor& theta, const Tensor& alpha,
                            const data::Dataset& train_batch, const data::Dataset& val_batch,
                            const BilevelConfig& cfg, const Tensor* unit_noise = nullptr) {
  auto lower = [&](ad::Graph& g, ad::Var th, ad::Var al) {
    return loss::build_train_loss(g, spec, th, al, dict, layout, train_batch.x, train_batch.y,
                                  unit_noise)
        .loss;
  };
  auto upper = [&](ad::Graph& g, ad::Var th, ad::Var) {
    ad::Var logits = model_logits(g, spec, th, g.constant(val_batch.x));
    return build_val_objective(g, logits, val_batch, target, cfg.lambda_val);
  };
  return hypergradient_fn(lower, upper, theta, alpha, cfg.neumann_order, cfg.neumann_step,
                          cfg.neumann_eta_scaling);
}

// ----- the full search/retrain loop ---------------------------------------------

struct AutoBalanceResult {
  Tensor theta;          // parameters after the retrain phase
  loss::LossParams alpha;
  Tensor alpha_packed;
  RunLog log;
};

namespace detail {

inline std::vector<int> draw_batch(RngStream& stream, int n, int batch) {
  if (batch >= n) {
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    return idx;
  }
  std::vector<int> idx(static_cast<size_t>(batch));
  for (int i = 0; i < batch; ++i)
    idx[static_cast<size_t>(i)] = static_cast<int>(stream.uniform_int(static_cast<std::uint64_t>(n)));
  return idx;
}

// batch replicated copy-major for the Monte-Carlo augmentation draws
inline void replicate_batch(const data::Dataset& batch, int copies, Tensor& x,
                            std::vector<int>& y) {
  int n = batch.n(), d = batch.dim();
  x = Tensor::zeros({n * copies, d});
  y.resize(static_cast<size_t>(n) * copies);
  for (int m = 0; m < copies; ++m)
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < d; ++c) x.at(m * n + i, c) = batch.x.at(i, c);
      y[static_cast<size_t>(m * n + i)] = batch.y[static_cast<size_t>(i)];
    }
}

}  // namespace detail

inline AutoBalanceResult autobalance(const data::SplitDataset& split, const ModelSpec& spec,
                                     const loss::LossParams& init, const BilevelConfig& cfg,
                                     ValTarget target, const data::Dataset* test = nullptr) {
  cfg.validate();
  spec.validate();
  init.validate();
  split.train.validate();
  split.val.validate();
  loss::AlphaLayout layout = cfg.layout_for(init);
  if (target == ValTarget::kDeo &&
      (!split.val.has_groups() || split.val.num_classes != 2 || split.val.num_groups != 2))
    throw ConfigError("bilevel: the fairness target needs a binary task with two groups");

  const loss::Dictionary& dict = init.dict;
  Tensor alpha = loss::pack_alpha(init, layout);
  Tensor mask = layout.mask();

  AutoBalanceResult result;
  int epoch = 0;

  auto log_entry = [&](const char* phase, const data::Dataset& train_ds, const Tensor& theta) {
    RunLogEntry e;
    e.epoch = epoch++;
    e.phase = phase;
    e.train_err = metrics::evaluate(spec, theta, train_ds).std_err;
    auto val_rep = metrics::evaluate(spec, theta, split.val);
    e.val_err = val_rep.std_err;
    e.val_balanced_err = val_rep.balanced_err;
    e.val_loss = val_objective_value(spec, theta, split.val, target, cfg.lambda_val);
    if (test != nullptr) {
      auto test_rep = metrics::evaluate(spec, theta, *test);
      e.test_err = test_rep.std_err;
      e.test_balanced_err = test_rep.balanced_err;
    }
    e.alpha = alpha.data;
    result.log.push_back(e);
  };

  // One pass of t2 mini-batch iterations; alpha moves only in the search
  // phase, after warm-up, every alpha_every_n-th iteration.
  auto run_phase = [&](const char* phase, const data::Dataset& train_ds, bool tune_alpha,
                       Tensor& theta) {
    auto bstream = RngStream::substream(cfg.seed, std::string(phase) + "-batches");
    auto vstream = RngStream::substream(cfg.seed, std::string(phase) + "-val-batches");
    auto astream = RngStream::substream(cfg.seed, std::string(phase) + "-augment");
    optim::SgdState theta_state, alpha_state;
    int iters_per_epoch = std::max(1, train_ds.n() / cfg.batch_train);
    for (int it = 0; it < cfg.t2; ++it) {
      try {
        auto idx = detail::draw_batch(bstream, train_ds.n(), cfg.batch_train);
        data::Dataset batch = train_ds.subset(idx);
        int copies = layout.has_eps ? cfg.augment_copies : 1;
        Tensor xb;
        std::vector<int> yb;
        detail::replicate_batch(batch, copies, xb, yb);
        Tensor noise;
        const Tensor* noise_ptr = nullptr;
        if (layout.has_eps) {
          noise = data::ball_noise(astream, xb.rows(), batch.dim());
          noise_ptr = &noise;
        }

        ad::Graph g;
        ad::Var th = g.value(theta), al = g.value(alpha);
        auto built = loss::build_train_loss(g, spec, th, al, dict, layout, xb, yb, noise_ptr);
        double train_loss = g.eval_scalar(built.loss);
        if (!std::isfinite(train_loss) || train_loss > cfg.divergence_threshold)
          throw DivergenceError("training diverged at iteration " + std::to_string(it) +
                                " (epoch " + std::to_string(epoch) + ", phase " + phase + ")");
        ad::Var gt = g.grad_vars(built.loss, {th})[0];
        Tensor grad_theta = g.eval(gt);
        double lr = optim::scheduled_lr(cfg.schedule, cfg.eta_theta, it, cfg.t2);
        optim::sgd_step(theta, grad_theta, theta_state, lr, cfg.momentum, cfg.weight_decay);

        if (tune_alpha && it >= cfg.t1 && (it - cfg.t1) % cfg.alpha_every_n == 0) {
          g.set_value(th, theta);  // hypergradient at the fresh iterate
          auto vidx = detail::draw_batch(vstream, split.val.n(), cfg.batch_val);
          data::Dataset vbatch = split.val.subset(vidx);
          ad::Var val_logits = model_logits(g, spec, th, g.constant(vbatch.x));
          ad::Var val_loss = build_val_objective(g, val_logits, vbatch, target, cfg.lambda_val);
          ad::Var gu = g.grad_vars(val_loss, {th})[0];
          ad::Var v = g.value(Tensor::zeros(theta.shape));
          ad::Var s = g.sum_all(g.mul(v, gt));
          ad::Var hv = g.grad_vars(s, {th})[0];
          ad::Var mv = g.grad_vars(s, {al})[0];
          Tensor v1 = g.eval(gu);
          auto oracle = [&](const Tensor& x) {
            g.set_value(v, x);
            return g.eval(hv);
          };
          Tensor p = neumann_ihvp(oracle, v1, cfg.neumann_order, cfg.neumann_step,
                                  cfg.neumann_eta_scaling);
          g.set_value(v, p);
          Tensor hg = g.eval(mv);
          for (double& x : hg.data) x = -x;

          // masked, weight-decayed step; untouched segments stay frozen
          Tensor update = Tensor::zeros(alpha.shape);
          for (size_t i = 0; i < alpha.data.size(); ++i)
            update.data[i] = mask.data[i] * (hg.data[i] + cfg.alpha_weight_decay * alpha.data[i]);
          optim::sgd_step(alpha, update, alpha_state, cfg.eta_alpha, cfg.alpha_momentum, 0.0);
          if (!alpha.all_finite())
            throw DivergenceError("loss parameters diverged at iteration " + std::to_string(it) +
                                  " (epoch " + std::to_string(epoch) + ")");
          // nonnegativity of weights and radii
          if (layout.train_w)
            for (int i = 0; i < layout.kprime; ++i)
              alpha.data[static_cast<size_t>(layout.w_off() + i)] =
                  std::max(0.0, alpha.data[static_cast<size_t>(layout.w_off() + i)]);
          if (layout.train_eps)
            for (int i = 0; i < layout.kprime; ++i)
              alpha.data[static_cast<size_t>(layout.eps_off() + i)] =
                  std::max(0.0, alpha.data[static_cast<size_t>(layout.eps_off() + i)]);
        }
      } catch (const NumericalError& e) {
        throw DivergenceError("training diverged at iteration " + std::to_string(it) +
                              " (epoch " + std::to_string(epoch) + "): " + e.what());
      }
      if ((it + 1) % iters_per_epoch == 0 || it + 1 == cfg.t2)
        log_entry(phase, train_ds, theta);
    }
    if (cfg.t2 == 0) log_entry(phase, train_ds, theta);  // degenerate schedule still logs
  };

  // phase 1: search on the train split, tuning alpha against the val split
  auto init_stream = RngStream::substream(cfg.seed, "init");
  Tensor theta_search = init_params(spec, init_stream);
  run_phase("search", split.train, /*tune_alpha=*/true, theta_search);

  // phase 2: fresh parameters, all data, frozen alpha
  data::Dataset all_data = data::concat(split.train, split.val);
  auto retrain_stream = RngStream::substream(cfg.seed, "retrain-init");
  Tensor theta_retrain = init_params(spec, retrain_stream);
  run_phase("retrain", all_data, /*tune_alpha=*/false, theta_retrain);

  result.theta = theta_retrain;
  result.alpha_packed = alpha;
  result.alpha = loss::unpack_alpha(alpha, dict, layout);
  result.alpha.validate();
  return result;
}

// ----- the group-sensitive variant -----------------------------------------------

struct GroupAutoBalanceResult {
  Tensor theta;
  loss::GroupLossParams alpha;
  Tensor alpha_packed;
  RunLog log;
};

// Same search/retrain alternation, but the lower level is the per-(class,group)
// adjusted CE, so the design can reweight cells rather than classes. No
// augmentation segment in this form.
inline GroupAutoBalanceResult group_autobalance(const data::SplitDataset& split,
                                                const ModelSpec& spec,
                                                const loss::GroupLossParams& init,
                                                const BilevelConfig& cfg, ValTarget target,
                                                const data::Dataset* test = nullptr) {
  cfg.validate();
  spec.validate();
  init.validate();
  split.train.validate();
  split.val.validate();
  if (!split.train.has_groups() || !split.val.has_groups())
    throw ConfigError("bilevel: the group loss form needs group labels");
  if (cfg.train_eps) throw ConfigError("bilevel: the group loss form has no augmentation radii");
  if (target == ValTarget::kDeo && (split.val.num_classes != 2 || split.val.num_groups != 2))
    throw ConfigError("bilevel: the fairness target needs a binary task with two groups");

  loss::AlphaLayout layout;
  layout.kprime = init.kprime();
  layout.train_w = cfg.train_w;
  layout.train_l = cfg.train_l;
  layout.train_delta = cfg.train_delta;

  Tensor alpha = loss::pack_group_alpha(init, layout);
  Tensor mask = layout.mask();

  GroupAutoBalanceResult result;
  int epoch = 0;

  auto log_entry = [&](const char* phase, const data::Dataset& train_ds, const Tensor& theta) {
    RunLogEntry e;
    e.epoch = epoch++;
    e.phase = phase;
    e.train_err = metrics::evaluate(spec, theta, train_ds).std_err;
    auto val_rep = metrics::evaluate(spec, theta, split.val);
    e.val_err = val_rep.std_err;
    e.val_balanced_err = val_rep.balanced_err;
    e.val_loss = val_objective_value(spec, theta, split.val, target, cfg.lambda_val);
    if (test != nullptr) {
      auto test_rep = metrics::evaluate(spec, theta, *test);
      e.test_err = test_rep.std_err;
      e.test_balanced_err = test_rep.balanced_err;
    }
    e.alpha = alpha.data;
    result.log.push_back(e);
  };

  auto build_lower = [&](ad::Graph& g, ad::Var th, ad::Var al, const data::Dataset& batch) {
    auto vars = loss::expand_group_alpha(g, al, init, layout);
    ad::Var logits = model_logits(g, spec, th, g.constant(batch.x));
    return loss::group_parametric_ce_mean(g, logits, batch.y, batch.groups, vars.w_mat,
                                          vars.l_mat, vars.delta_eff_mat);
  };

  auto run_phase = [&](const char* phase, const data::Dataset& train_ds, bool tune_alpha,
                       Tensor& theta) {
    auto bstream = RngStream::substream(cfg.seed, std::string(phase) + "-batches");
    auto vstream = RngStream::substream(cfg.seed, std::string(phase) + "-val-batches");
    optim::SgdState theta_state, alpha_state;
    int iters_per_epoch = std::max(1, train_ds.n() / cfg.batch_train);
    for (int it = 0; it < cfg.t2; ++it) {
      try {
        auto idx = detail::draw_batch(bstream, train_ds.n(), cfg.batch_train);
        data::Dataset batch = train_ds.subset(idx);
        ad::Graph g;
        ad::Var th = g.value(theta), al = g.value(alpha);
        ad::Var lower = build_lower(g, th, al, batch);
        double train_loss = g.eval_scalar(lower);
        if (!std::isfinite(train_loss) || train_loss > cfg.divergence_threshold)
          throw DivergenceError("training diverged at iteration " + std::to_string(it) +
                                " (epoch " + std::to_string(epoch) + ", phase " + phase + ")");
        ad::Var gt = g.grad_vars(lower, {th})[0];
        Tensor grad_theta = g.eval(gt);
        double lr = optim::scheduled_lr(cfg.schedule, cfg.eta_theta, it, cfg.t2);
        optim::sgd_step(theta, grad_theta, theta_state, lr, cfg.momentum, cfg.weight_decay);

        if (tune_alpha && it >= cfg.t1 && (it - cfg.t1) % cfg.alpha_every_n == 0) {
          g.set_value(th, theta);
          auto vidx = detail::draw_batch(vstream, split.val.n(), cfg.batch_val);
          data::Dataset vbatch = split.val.subset(vidx);
          ad::Var val_logits = model_logits(g, spec, th, g.constant(vbatch.x));
          ad::Var val_loss = build_val_objective(g, val_logits, vbatch, target, cfg.lambda_val);
          ad::Var gu = g.grad_vars(val_loss, {th})[0];
          ad::Var v = g.value(Tensor::zeros(theta.shape));
          ad::Var s = g.sum_all(g.mul(v, gt));
          ad::Var hv = g.grad_vars(s, {th})[0];
          ad::Var mv = g.grad_vars(s, {al})[0];
          Tensor v1 = g.eval(gu);
          auto oracle = [&](const Tensor& x) {
            g.set_value(v, x);
            return g.eval(hv);
          };
          Tensor p = neumann_ihvp(oracle, v1, cfg.neumann_order, cfg.neumann_step,
                                  cfg.neumann_eta_scaling);
          g.set_value(v, p);
          Tensor hg = g.eval(mv);
          for (double& x : hg.data) x = -x;

          Tensor update = Tensor::zeros(alpha.shape);
          for (size_t i = 0; i < alpha.data.size(); ++i)
            update.data[i] = mask.data[i] * (hg.data[i] + cfg.alpha_weight_decay * alpha.data[i]);
          optim::sgd_step(alpha, update, alpha_state, cfg.eta_alpha, cfg.alpha_momentum, 0.0);
          if (!alpha.all_finite())
            throw DivergenceError("loss parameters diverged at iteration " + std::to_string(it) +
                                  " (epoch " + std::to_string(epoch) + ")");
          if (layout.train_w)
            for (int i = 0; i < layout.kprime; ++i)
              alpha.data[static_cast<size_t>(layout.w_off() + i)] =
                  std::max(0.0, alpha.data[static_cast<size_t>(layout.w_off() + i)]);
        }
      } catch (const NumericalError& e) {
        throw DivergenceError("training diverged at iteration " + std::to_string(it) +
                              " (epoch " + std::to_string(epoch) + "): " + e.what());
      }
      if ((it + 1) % iters_per_epoch == 0 || it + 1 == cfg.t2)
        log_entry(phase, train_ds, theta);
    }
    if (cfg.t2 == 0) log_entry(phase, train_ds, theta);
  };

  auto init_stream = RngStream::substream(cfg.seed, "init");
  Tensor theta_search = init_params(spec, init_stream);
  run_phase("search", split.train, /*tune_alpha=*/true, theta_search);

  data::Dataset all_data = data::concat(split.train, split.val);
  auto retrain_stream = RngStream::substream(cfg.seed, "retrain-init");
  Tensor theta_retrain = init_params(spec, retrain_stream);
  run_phase("retrain", all_data, /*tune_alpha=*/false, theta_retrain);

  result.theta = theta_retrain;
  result.alpha_packed = alpha;
  result.alpha = loss::unpack_group_alpha(alpha, init, layout);
  result.alpha.validate();
  return result;
}

}  // namespace lossforge::bilevel
