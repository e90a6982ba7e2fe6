#pragma once

// Training protocol and evaluation harness:
//   stage 1  world model on (s_t, y_{t+1}) pairs, then frozen
//   stage 0  supervised policy through the frozen projector (baseline arm)
//   stage 2  act -> plan -> select -> self-update, warm-started from stage 0
// plus evaluation in deterministic and planned modes and the sweeps.

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sfp/config.hpp"
#include "sfp/dataset.hpp"
#include "sfp/metrics.hpp"
#include "sfp/planner.hpp"
#include "sfp/policy.hpp"
#include "sfp/world_model.hpp"

namespace sfp {

struct LossRow {
  std::string stage;
  std::size_t epoch = 0;
  std::string term;
  double value = 0;
};

struct MetricRow {
  std::string run_id, split, metric;
  double value = 0;
};

struct CandidateRow {
  std::size_t sample = 0, rank = 0;
  double log_prob = 0, reward_raw = 0, reward_normalized = 0;
  bool selected = false;
};

struct RunRecord {
  std::string run_id;
  std::uint64_t seed = 0;
  std::vector<LossRow> losses;
  std::vector<MetricRow> metrics;
  std::map<std::string, double> seconds;  // wall-clock per phase

  std::optional<double> metric(const std::string& split, const std::string& name) const {
    for (const auto& m : metrics)
      if (m.split == split && m.metric == name) return m.value;
    return std::nullopt;
  }
};

// Seed tags keep the random streams of the stages apart.
inline constexpr std::uint64_t kWorldModelStream = 0x1000;
inline constexpr std::uint64_t kPolicyInitStream = 0x2000;
inline constexpr std::uint64_t kBaselineStream = 0x3000;
inline constexpr std::uint64_t kSfpStream = 0x4000;

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Reward spec for `name` with the dataset's threshold, range and climatology.
template <class T>
metrics::RewardSpec reward_for(const std::string& name, const Dataset<T>& data) {
  auto spec = metrics::make_reward(name, data.height(), data.width(), data.tau, data.dynamic_range());
  if (name == "tke_clim")
    spec.climatology = metrics::climatological_spectrum<T>(data.splits.train.targets, data.height(), data.width());
  return spec;
}

// ---------------------------------------------------------------------------
// Stage 1

template <class T>
struct Stage1Result {
  WorldModel<T> model;
  std::vector<WorldModelEpoch> history;
};

template <class T>
Stage1Result<T> stage1(const ExperimentConfig& cfg, const Dataset<T>& data, std::uint64_t seed) {
  auto model = WorldModel<T>::create(cfg.wm, seed + kWorldModelStream);
  TrainConfig tc{cfg.wm_epochs, cfg.batch_size, cfg.lr, seed + kWorldModelStream};
  auto history = train_world_model(model, data.splits.train, tc);
  return {std::move(model), std::move(history)};
}

inline void append_wm_losses(std::vector<LossRow>& rows, const std::vector<WorldModelEpoch>& h) {
  for (std::size_t e = 0; e < h.size(); ++e) {
    rows.push_back({"wm", e, "reconstruction", h[e].reconstruction});
    rows.push_back({"wm", e, "codebook", h[e].codebook});
    rows.push_back({"wm", e, "commitment", h[e].commitment});
    rows.push_back({"wm", e, "total", h[e].total});
  }
}

/// Condition maps of every window, (1, d_c, h, w) each; the model is frozen so they never change.
template <class T>
std::vector<Tensor<T>> condition_cache(const WorldModel<T>& wm, const WindowedDataset<T>& data, std::size_t batch = 32) {
  const auto& mc = wm.config();
  std::vector<Tensor<T>> out;
  out.reserve(data.size());
  std::vector<std::size_t> idx;
  for (std::size_t b0 = 0; b0 < data.size(); b0 += batch) {
    idx.clear();
    for (std::size_t i = b0; i < std::min(data.size(), b0 + batch); ++i) idx.push_back(i);
    auto c = wm.condition(detail::gather_batch(data.inputs, idx, Shape{mc.t_in, mc.height, mc.width}));
    const std::size_t per = c.size() / idx.size();
    for (std::size_t i = 0; i < idx.size(); ++i)
      out.emplace_back(Shape{1, c.dim(1), c.dim(2), c.dim(3)},
                       std::vector<T>(c.data() + i * per, c.data() + (i + 1) * per));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Policy training (stage 0 and stage 2 share the loop)

struct PolicyEpoch {
  double loss = 0, supervised = 0, pseudo = 0, selected_reward = 0;
};

/// Planning settings for stage 2; absent or lambda_mix == 0 means plain supervision.
struct SelfTraining {
  double lambda_mix = 0.5;
  PlanConfig plan;
  metrics::RewardSpec spec;
};

template <class T>
using PlanObserver = std::function<void(std::size_t sample, const Tensor<T>& logits, const CandidateSet<T>&)>;

template <class T>
std::vector<PolicyEpoch> train_policy(Policy<T>& policy, const WorldModel<T>& wm, const WindowedDataset<T>& data,
                                      const std::vector<Tensor<T>>& conds, std::size_t epochs, double lr,
                                      std::size_t batch_size, std::uint64_t shuffle_seed,
                                      const std::optional<SelfTraining>& self = std::nullopt,
                                      const PlanObserver<T>& observe = nullptr) {
  if (!wm.frozen()) throw FrozenError("policy training needs a frozen world model");
  if (data.size() == 0) throw Error("policy training: empty dataset");
  const auto& mc = wm.config();
  const std::size_t hw = mc.height * mc.width, cell_logits = mc.cells() * mc.codebook_size;
  const double lambda = self ? self->lambda_mix : 0.0;
  const std::size_t per_epoch = detail::batches_per_epoch(data.size(), batch_size);
  auto adam = AdamState<T>::with_schedule(static_cast<long>(per_epoch * epochs), lr);
  std::mt19937_64 rng(shuffle_seed);
  std::vector<PolicyEpoch> history;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    PolicyEpoch rec;
    const auto order = detail::shuffled(data.size(), rng);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += batch_size) {
      std::span<const std::size_t> idx(order.data() + b0, std::min(batch_size, order.size() - b0));
      auto s = detail::gather_batch(data.inputs, idx, Shape{mc.t_in, mc.height, mc.width});
      auto y = detail::gather_batch(data.targets, idx, Shape{1, mc.height, mc.width});
      auto c = detail::gather_batch(conds, idx, Shape{mc.cond_dim, mc.latent_h(), mc.latent_w()});
      Tape<T> tape(policy.params());
      Tape<T> wm_tape(wm.params());
      auto logits = policy.act(tape, constant(s));
      auto projected = policy.project(tape, wm_tape, wm, logits, c);
      auto sup = supervised_loss(projected, y);
      Var<T> loss = sup;
      const double w = static_cast<double>(idx.size()) / static_cast<double>(data.size());
      if (lambda > 0) {
        Tensor<T> pseudo(y.shape());
        double reward = 0;
        for (std::size_t i = 0; i < idx.size(); ++i) {
          Tensor<T> lg(Shape{mc.latent_h(), mc.latent_w(), mc.codebook_size},
                       std::vector<T>(logits.value().data() + i * cell_logits, logits.value().data() + (i + 1) * cell_logits));
          std::optional<std::span<const T>> ref;
          if (self->spec.needs_reference) ref = std::span<const T>(y.data() + i * hw, hw);
          auto set = plan(wm, conds[idx[i]], lg, self->plan, self->spec, ref);
          std::copy(set.best().begin(), set.best().end(), pseudo.data() + i * hw);
          reward += set.best_score();
          if (observe) observe(idx[i], lg, set);
        }
        auto pl = policy_loss(projected, pseudo);
        loss = lambda >= 1.0 ? pl : add(scale(pl, static_cast<T>(lambda)), scale(sup, static_cast<T>(1.0 - lambda)));
        rec.pseudo += w * pl.value()[0];
        rec.selected_reward += reward / static_cast<double>(data.size());
      }
      const double total = loss.value()[0];
      if (!std::isfinite(total))
        throw DivergenceError<T>("policy training: loss diverged in epoch " + std::to_string(epoch), policy.params());
      adam_step(policy.params(), tape.grad(loss), adam);
      rec.loss += w * total;
      rec.supervised += w * sup.value()[0];
    }
    history.push_back(rec);
  }
  return history;
}

inline void append_policy_losses(std::vector<LossRow>& rows, const std::string& stage, const std::vector<PolicyEpoch>& h,
                                 bool planned) {
  for (std::size_t e = 0; e < h.size(); ++e) {
    rows.push_back({stage, e, "loss", h[e].loss});
    rows.push_back({stage, e, "supervised", h[e].supervised});
    if (planned) {
      rows.push_back({stage, e, "policy", h[e].pseudo});
      rows.push_back({stage, e, "selected_reward", h[e].selected_reward});
    }
  }
}

template <class T>
Policy<T> initial_policy(const ExperimentConfig& cfg, std::uint64_t seed) {
  return Policy<T>::create(cfg.policy, seed + kPolicyInitStream);
}

/// Supervised baseline: this checkpoint is both the comparison arm and the stage-2 start.
template <class T>
std::vector<PolicyEpoch> stage0_baseline(Policy<T>& policy, const ExperimentConfig& cfg, const WorldModel<T>& wm,
                                         const Dataset<T>& data, const std::vector<Tensor<T>>& conds, std::uint64_t seed) {
  return train_policy(policy, wm, data.splits.train, conds, cfg.baseline_epochs, cfg.lr, cfg.batch_size,
                      seed + kBaselineStream);
}

/// Closed loop with a fresh optimizer and schedule, starting from `policy` (the baseline).
template <class T>
std::vector<PolicyEpoch> stage2(Policy<T>& policy, const ExperimentConfig& cfg, const WorldModel<T>& wm,
                                const Dataset<T>& data, const std::vector<Tensor<T>>& conds, std::uint64_t seed,
                                const std::string& reward, const PlanObserver<T>& observe = nullptr) {
  if (!wm.frozen()) throw FrozenError("stage 2: world model must be frozen");
  std::optional<SelfTraining> self;
  if (cfg.lambda_mix > 0) self = SelfTraining{cfg.lambda_mix, cfg.plan, reward_for(reward, data)};
  return train_policy(policy, wm, data.splits.train, conds, cfg.sfp_epochs, cfg.lr, cfg.batch_size, seed + kSfpStream,
                      self, observe);
}

// ---------------------------------------------------------------------------
// Evaluation

inline const std::vector<std::string>& field_metric_names() {
  static const std::vector<std::string> names{"mse", "rmse", "rel_l2", "ssim", "csi", "tke_error"};
  return names;
}

struct EvalOptions {
  PlanConfig plan;
  std::string reward = "csi";
  bool planned = true;         // also run the planner per sample
  bool use_reference = true;   // planned mode may score against the truth
  bool keep_candidates = false;
};

struct Evaluation {
  // per sample, per mode ("deterministic", "planned"): metric -> value
  std::vector<std::map<std::string, double>> deterministic, planned;
  std::map<std::string, double> mean_deterministic, mean_planned;
  std::vector<CandidateRow> candidates;
  double plan_seconds = 0;  // planner wall-clock summed over samples
  std::size_t samples = 0;

  /// Long-format rows "mode.metric" for the metrics table.
  std::vector<MetricRow> rows(const std::string& run_id, const std::string& split) const {
    std::vector<MetricRow> out;
    for (const auto& [k, v] : mean_deterministic) out.push_back({run_id, split, "deterministic." + k, v});
    for (const auto& [k, v] : mean_planned) out.push_back({run_id, split, "planned." + k, v});
    return out;
  }
};

template <class T>
std::map<std::string, double> field_metrics(std::span<const T> pred, std::span<const T> truth, std::size_t h,
                                            std::size_t w, double tau, double range) {
  return {{"mse", metrics::mse(pred, truth)},
          {"rmse", metrics::rmse(pred, truth)},
          {"rel_l2", metrics::rel_l2(pred, truth)},
          {"ssim", metrics::ssim(pred, truth, range)},
          {"csi", metrics::csi(pred, truth, tau).value},
          {"tke_error", metrics::tke_error(pred, truth, h, w)}};
}

inline std::map<std::string, double> mean_rows(const std::vector<std::map<std::string, double>>& rows) {
  std::map<std::string, double> out;
  for (const auto& r : rows)
    for (const auto& [k, v] : r) out[k] += v / static_cast<double>(rows.size());
  return out;
}

template <class T>
Evaluation evaluate(const Policy<T>& policy, const WorldModel<T>& wm, const Dataset<T>& data, Split split,
                    const EvalOptions& opt) {
  if (!wm.frozen()) throw FrozenError("evaluate: world model must be frozen");
  const auto& ds = data.split(split);
  const auto& mc = wm.config();
  const std::size_t h = mc.height, w = mc.width, hw = h * w;
  const auto spec = reward_for(opt.reward, data);
  if (opt.planned && spec.needs_reference && !opt.use_reference)
    throw ConfigError("evaluate: reward '" + opt.reward + "' needs a reference; enable reward.eval_reference or use tke_clim");
  const auto conds = condition_cache(wm, ds);
  Evaluation ev;
  ev.samples = ds.size();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto truth = ds.targets[i].values();
    const auto s = ds.inputs[i].reshaped(Shape{1, mc.t_in, h, w});
    Tape<T> tape(policy.params());
    auto logits_var = policy.act(tape, constant(s));
    auto det = policy.project(tape, wm, logits_var, conds[i]).value();
    auto m = field_metrics<T>(det.values(), truth, h, w, data.tau, data.dynamic_range());
    m["crps"] = metrics::mae<T>(det.values(), truth);  // single-member ensemble
    ev.deterministic.push_back(std::move(m));
    if (!opt.planned) continue;
    const auto logits = logits_var.value().reshaped(Shape{mc.latent_h(), mc.latent_w(), mc.codebook_size});
    std::optional<std::span<const T>> ref;
    if (spec.needs_reference) ref = truth;
    const auto t0 = std::chrono::steady_clock::now();
    auto set = plan(wm, conds[i], logits, opt.plan, spec, ref);
    ev.plan_seconds += seconds_since(t0);
    auto pm = field_metrics<T>(set.best(), truth, h, w, data.tau, data.dynamic_range());
    std::vector<std::span<const T>> members;
    for (std::size_t b = 0; b < set.size(); ++b) members.push_back(set.field(b));
    pm["crps"] = metrics::crps_ensemble<T>(members, truth);
    pm["reward"] = set.best_score();
    ev.planned.push_back(std::move(pm));
    if (opt.keep_candidates)
      for (std::size_t b = 0; b < set.size(); ++b)
        ev.candidates.push_back({i, b, set.log_probs[b], set.selection.raw[b], set.selection.scores[b], b == set.selection.best});
    (void)hw;
  }
  ev.mean_deterministic = mean_rows(ev.deterministic);
  if (opt.planned) ev.mean_planned = mean_rows(ev.planned);
  return ev;
}

template <class T>
EvalOptions eval_options(const ExperimentConfig& cfg, const std::string& reward) {
  EvalOptions o;
  o.plan = cfg.plan;
  o.plan.reward = reward;
  o.reward = reward;
  o.use_reference = cfg.eval_reference;
  return o;
}

// ---------------------------------------------------------------------------
// Full pipeline for one seed

template <class T>
struct SeedRun {
  Stage1Result<T> wm;
  Policy<T> baseline;
  std::vector<PolicyEpoch> baseline_history;
  std::map<std::string, Policy<T>> sfp;  // by reward
  std::map<std::string, std::vector<PolicyEpoch>> sfp_history;
  RunRecord record;
};

/// Stages 1 and 0 for a seed: the shared part of every arm.
template <class T>
SeedRun<T> prepare_seed(const ExperimentConfig& cfg, const Dataset<T>& data, std::uint64_t seed) {
  SeedRun<T> run;
  run.record.seed = seed;
  run.record.run_id = "seed-" + std::to_string(seed);
  auto t0 = std::chrono::steady_clock::now();
  run.wm = stage1(cfg, data, seed);
  run.record.seconds["stage1"] = seconds_since(t0);
  append_wm_losses(run.record.losses, run.wm.history);
  const auto conds = condition_cache(run.wm.model, data.splits.train);
  t0 = std::chrono::steady_clock::now();
  run.baseline = initial_policy<T>(cfg, seed);
  run.baseline_history = stage0_baseline(run.baseline, cfg, run.wm.model, data, conds, seed);
  run.record.seconds["stage0"] = seconds_since(t0);
  append_policy_losses(run.record.losses, "baseline", run.baseline_history, false);
  return run;
}

/// Stage 2 for one reward on top of a prepared seed.
template <class T>
void run_sfp_arm(SeedRun<T>& run, const ExperimentConfig& cfg, const Dataset<T>& data, const std::string& reward) {
  const auto conds = condition_cache(run.wm.model, data.splits.train);
  Policy<T> p = run.baseline;
  const auto t0 = std::chrono::steady_clock::now();
  auto hist = stage2(p, cfg, run.wm.model, data, conds, run.record.seed, reward);
  run.record.seconds["stage2." + reward] = seconds_since(t0);
  append_policy_losses(run.record.losses, "sfp." + reward, hist, cfg.lambda_mix > 0);
  run.sfp.insert_or_assign(reward, std::move(p));
  run.sfp_history.insert_or_assign(reward, std::move(hist));
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepRow {
  double axis_value = 0;
  std::uint64_t seed = 0;
  std::string arm, metric;
  double value = 0;
};

struct SweepFailure {
  double axis_value = 0;
  std::uint64_t seed = 0;
  std::string message;
};

struct SweepResult {
  std::string axis;
  std::vector<SweepRow> rows;
  std::vector<SweepFailure> failures;
};

struct SweepSummaryRow {
  double axis_value = 0;
  std::string arm, metric;
  double mean = 0, std = 0;
  std::size_t n = 0;
};

inline std::vector<SweepSummaryRow> summarize(const SweepResult& r) {
  std::map<std::tuple<double, std::string, std::string>, std::vector<double>> groups;
  for (const auto& row : r.rows) groups[{row.axis_value, row.arm, row.metric}].push_back(row.value);
  std::vector<SweepSummaryRow> out;
  for (const auto& [key, vals] : groups) {
    SweepSummaryRow s{std::get<0>(key), std::get<1>(key), std::get<2>(key), 0, 0, vals.size()};
    for (double v : vals) s.mean += v / static_cast<double>(vals.size());
    if (vals.size() > 1) {
      double acc = 0;
      for (double v : vals) acc += (v - s.mean) * (v - s.mean);
      s.std = std::sqrt(acc / static_cast<double>(vals.size() - 1));
    }
    out.push_back(s);
  }
  return out;
}

namespace detail {

inline void push_eval(SweepResult& r, double x, std::uint64_t seed, const std::string& arm, const Evaluation& ev) {
  for (const auto& [k, v] : ev.mean_deterministic) r.rows.push_back({x, seed, arm, "deterministic." + k, v});
  for (const auto& [k, v] : ev.mean_planned) r.rows.push_back({x, seed, arm, "planned." + k, v});
}

}  // namespace detail

/// Scarcity axis: the full pipeline per fraction and seed on the first
/// ceil(f N) training windows (threshold and test split unchanged).
template <class T>
SweepResult sweep_scarcity(const ExperimentConfig& cfg, const Dataset<T>& full, std::span<const double> fractions,
                           bool planned_eval = false) {
  if (fractions.empty()) throw Error("sweep: no values");
  SweepResult out{"scarcity", {}, {}};
  for (double f : fractions)
    for (auto seed : cfg.seeds) {
      try {
        Dataset<T> data = full;
        data.splits.train = apply_scarcity(full.splits.train, f);
        data.scarcity = f;
        auto run = prepare_seed(cfg, data, seed);
        run_sfp_arm(run, cfg, data, cfg.reward);
        auto opt = eval_options<T>(cfg, cfg.reward);
        opt.planned = planned_eval;
        detail::push_eval(out, f, seed, "baseline", evaluate(run.baseline, run.wm.model, data, Split::test, opt));
        detail::push_eval(out, f, seed, "sfp", evaluate(run.sfp.at(cfg.reward), run.wm.model, data, Split::test, opt));
      } catch (const std::exception& e) {
        out.failures.push_back({f, seed, e.what()});
      }
    }
  return out;
}

/// Beam-width axis: stages 1 and 0 once per seed, then stage 2 and evaluation per width.
template <class T>
SweepResult sweep_beam(const ExperimentConfig& cfg, const Dataset<T>& data, std::span<const std::size_t> widths) {
  if (widths.empty()) throw Error("sweep: no values");
  SweepResult out{"beam_width", {}, {}};
  for (auto seed : cfg.seeds) {
    std::optional<SeedRun<T>> base;
    try {
      base = prepare_seed(cfg, data, seed);
    } catch (const std::exception& e) {
      for (auto b : widths) out.failures.push_back({static_cast<double>(b), seed, e.what()});
      continue;
    }
    for (auto b : widths) {
      try {
        auto c = cfg;
        c.plan.beam_width = b;
        SeedRun<T> run = *base;
        run_sfp_arm(run, c, data, c.reward);
        auto opt = eval_options<T>(c, c.reward);
        const double x = static_cast<double>(b);
        detail::push_eval(out, x, seed, "baseline", evaluate(run.baseline, run.wm.model, data, Split::test, opt));
        auto ev = evaluate(run.sfp.at(c.reward), run.wm.model, data, Split::test, opt);
        detail::push_eval(out, x, seed, "sfp", ev);
        out.rows.push_back({x, seed, "sfp", "planner_seconds_per_sample", ev.plan_seconds / static_cast<double>(ev.samples)});
      } catch (const std::exception& e) {
        out.failures.push_back({static_cast<double>(b), seed, e.what()});
      }
    }
  }
  return out;
}

}  // namespace sfp
