// sfp: command-line driver.
//
//   sfp gen-data        -c cfg.json [--out DIR]
//   sfp train-wm        -c cfg.json [--seed S]
//   sfp train-baseline  -c cfg.json [--seed S]
//   sfp train-sfp       -c cfg.json [--seed S] [--reward NAME]
//   sfp eval            -c cfg.json [--seed S] [--split test] [--wm F --policy F]
//   sfp plan            -c cfg.json --sample I [--seed S] [--split test]
//   sfp sweep           -c cfg.json --axis scarcity|beam --values a,b,c
//   sfp report          RUN_DIR... --out DIR
//
// Runs live under <output.dir>/seed-<S>/{wm,baseline,sfp-<reward>,eval-<split>}.
// Errors print one line "error: <kind>: <message>" and exit 1.

#include <cctype>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include <CLI11.hpp>

#include "sfp/checkpoint.hpp"
#include "sfp/config.hpp"
#include "sfp/dataset.hpp"
#include "sfp/orchestrator.hpp"
#include "sfp/report.hpp"

namespace fs = std::filesystem;
using namespace sfp;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out, split = "test", wm, policy, reward, axis, values;
  std::size_t sample = 0;
  std::vector<std::string> run_dirs;
};

std::string root_dir(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv("SFP_OUTPUT_DIR"); env && *env) return env;
  return cfg.output_dir;
}

std::string seed_dir(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& leaf) {
  auto p = fs::path(root_dir(cfg)) / ("seed-" + std::to_string(seed)) / leaf;
  fs::create_directories(p);
  return p.string();
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write '" + path + "'");
  out << j.dump(2) << "\n";
}

json run_json(const ExperimentConfig& cfg, const std::string& stage, std::uint64_t seed, double seconds) {
  return json{{"run_id", "seed-" + std::to_string(seed) + "/" + stage},
              {"stage", stage},
              {"seed", seed},
              {"wall_clock_seconds", seconds},
              {"config", cfg.to_json()}};
}

template <class T>
Dataset<T> dataset_for(const ExperimentConfig& cfg) {
  if (cfg.manifest.empty()) throw ConfigError("data.manifest is required for this command");
  return load_dataset<T>(cfg.manifest, cfg.scarcity);
}

template <class T>
WorldModel<T> load_wm(const ExperimentConfig& cfg, const std::string& path) {
  auto ck = load_checkpoint<T>(path, Component::world_model, wm_digest(cfg));
  return WorldModel<T>::from_params(cfg.wm, std::move(ck.params), true);
}

template <class T>
Policy<T> load_policy(const ExperimentConfig& cfg, const std::string& path) {
  auto ck = load_checkpoint<T>(path, Component::policy, policy_digest(cfg));
  return Policy<T>::from_params(cfg.policy, std::move(ck.params));
}

template <class T>
void save_policy(const ExperimentConfig& cfg, const std::string& path, const Policy<T>& p) {
  save_checkpoint(path, Checkpoint<T>{Component::policy, policy_digest(cfg), p.params()});
}

std::vector<std::uint64_t> seeds_of(const ExperimentConfig& cfg, const Options& o) {
  return o.seed ? std::vector<std::uint64_t>{*o.seed} : cfg.seeds;
}

// --- commands ---

int gen_data(const ExperimentConfig& cfg, const Options& o) {
  const std::string dir = o.out.empty() ? (fs::path(root_dir(cfg)) / "data").string() : o.out;
  std::cout << write_dataset(cfg, dir) << "\n";
  return 0;
}

template <class T>
int train_wm(const ExperimentConfig& cfg, const Options& o) {
  const auto data = dataset_for<T>(cfg);
  for (auto seed : seeds_of(cfg, o)) {
    const auto t0 = std::chrono::steady_clock::now();
    auto r = stage1(cfg, data, seed);
    const double secs = seconds_since(t0);
    const auto dir = seed_dir(cfg, seed, "wm");
    save_checkpoint(dir + "/wm.sfpc", Checkpoint<T>{Component::world_model, wm_digest(cfg), r.model.params()});
    std::vector<LossRow> rows;
    append_wm_losses(rows, r.history);
    report::write_losses(dir + "/losses.csv", rows);
    report::write_usage(dir + "/usage.csv", r.history);
    auto j = run_json(cfg, "wm", seed, secs);
    j["final_loss"] = r.history.back().total;
    write_json(dir + "/run.json", j);
    std::cout << dir << "/wm.sfpc\n";
  }
  return 0;
}

template <class T>
int train_baseline(const ExperimentConfig& cfg, const Options& o) {
  const auto data = dataset_for<T>(cfg);
  for (auto seed : seeds_of(cfg, o)) {
    const auto wm = load_wm<T>(cfg, o.wm.empty() ? seed_dir(cfg, seed, "wm") + "/wm.sfpc" : o.wm);
    const auto conds = condition_cache(wm, data.splits.train);
    const auto t0 = std::chrono::steady_clock::now();
    auto policy = initial_policy<T>(cfg, seed);
    auto hist = stage0_baseline(policy, cfg, wm, data, conds, seed);
    const double secs = seconds_since(t0);
    const auto dir = seed_dir(cfg, seed, "baseline");
    save_policy(cfg, dir + "/policy.sfpc", policy);
    std::vector<LossRow> rows;
    append_policy_losses(rows, "baseline", hist, false);
    report::write_losses(dir + "/losses.csv", rows);
    auto j = run_json(cfg, "baseline", seed, secs);
    j["final_loss"] = hist.back().loss;
    write_json(dir + "/run.json", j);
    std::cout << dir << "/policy.sfpc\n";
  }
  return 0;
}

template <class T>
int train_sfp(const ExperimentConfig& cfg, const Options& o) {
  const auto data = dataset_for<T>(cfg);
  const std::string reward = o.reward.empty() ? cfg.reward : o.reward;
  for (auto seed : seeds_of(cfg, o)) {
    const auto wm = load_wm<T>(cfg, o.wm.empty() ? seed_dir(cfg, seed, "wm") + "/wm.sfpc" : o.wm);
    auto policy = load_policy<T>(cfg, o.policy.empty() ? seed_dir(cfg, seed, "baseline") + "/policy.sfpc" : o.policy);
    const auto conds = condition_cache(wm, data.splits.train);
    const auto before = wm.params().fingerprint();
    const auto t0 = std::chrono::steady_clock::now();
    auto hist = stage2(policy, cfg, wm, data, conds, seed, reward);
    const double secs = seconds_since(t0);
    if (wm.params().fingerprint() != before) throw Error("stage 2 modified the world model");
    const auto dir = seed_dir(cfg, seed, "sfp-" + reward);
    save_policy(cfg, dir + "/policy.sfpc", policy);
    std::vector<LossRow> rows;
    append_policy_losses(rows, "sfp." + reward, hist, cfg.lambda_mix > 0);
    report::write_losses(dir + "/losses.csv", rows);
    auto j = run_json(cfg, "sfp-" + reward, seed, secs);
    j["final_loss"] = hist.back().loss;
    j["reward"] = reward;
    write_json(dir + "/run.json", j);
    std::cout << dir << "/policy.sfpc\n";
  }
  return 0;
}

template <class T>
int eval(const ExperimentConfig& cfg, const Options& o) {
  const auto data = dataset_for<T>(cfg);
  const Split split = parse_split(o.split);
  const std::string reward = o.reward.empty() ? cfg.reward : o.reward;
  auto opt = eval_options<T>(cfg, reward);
  opt.keep_candidates = true;
  auto run_one = [&](const std::string& dir, const std::vector<std::pair<std::string, std::string>>& arms,
                     const std::string& wm_path, std::uint64_t seed) {
    const auto wm = load_wm<T>(cfg, wm_path);
    std::vector<MetricRow> rows;
    std::vector<CandidateRow> cands;
    json j = run_json(cfg, "eval-" + o.split, seed, 0);
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& [arm, path] : arms) {
      const auto policy = load_policy<T>(cfg, path);
      auto ev = evaluate(policy, wm, data, split, opt);
      const std::string run_id = "seed-" + std::to_string(seed) + "/" + arm;
      for (auto& r : ev.rows(run_id, o.split)) rows.push_back(r);
      if (cands.empty()) cands = ev.candidates;
      j["arms"][arm] = {{"checkpoint", path}, {"samples", ev.samples}, {"planner_seconds", ev.plan_seconds}};
    }
    j["wall_clock_seconds"] = seconds_since(t0);
    report::write_metrics(dir + "/metrics.csv", rows);
    report::write_candidates(dir + "/candidates.csv", cands);
    write_json(dir + "/run.json", j);
    std::cout << dir << "/metrics.csv\n";
  };
  if (!o.policy.empty()) {
    if (o.wm.empty()) throw ConfigError("--policy needs --wm");
    auto dir = (fs::path(root_dir(cfg)) / ("eval-" + o.split)).string();
    fs::create_directories(dir);
    run_one(dir, {{fs::path(o.policy).parent_path().filename().string(), o.policy}}, o.wm, o.seed.value_or(0));
    return 0;
  }
  for (auto seed : seeds_of(cfg, o)) {
    std::vector<std::pair<std::string, std::string>> arms;
    const auto base = fs::path(root_dir(cfg)) / ("seed-" + std::to_string(seed));
    if (!fs::exists(base)) throw Error("no runs under '" + base.string() + "'");
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(base))
      if (fs::exists(e.path() / "policy.sfpc")) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    for (const auto& n : names) arms.emplace_back(n, (base / n / "policy.sfpc").string());
    if (arms.empty()) throw Error("no policy checkpoints under '" + base.string() + "'");
    run_one(seed_dir(cfg, seed, "eval-" + o.split), arms, (base / "wm" / "wm.sfpc").string(), seed);
  }
  return 0;
}

template <class T>
int plan_cmd(const ExperimentConfig& cfg, const Options& o) {
  const auto data = dataset_for<T>(cfg);
  const auto& ds = data.split(parse_split(o.split));
  if (o.sample >= ds.size()) throw Error("sample index " + std::to_string(o.sample) + " outside split of " + std::to_string(ds.size()));
  const std::uint64_t seed = o.seed.value_or(cfg.seeds.front());
  const auto base = fs::path(root_dir(cfg)) / ("seed-" + std::to_string(seed));
  const auto wm = load_wm<T>(cfg, o.wm.empty() ? (base / "wm" / "wm.sfpc").string() : o.wm);
  std::string policy_path = o.policy;
  if (policy_path.empty()) {
    const auto sfp = base / ("sfp-" + cfg.reward) / "policy.sfpc";
    policy_path = fs::exists(sfp) ? sfp.string() : (base / "baseline" / "policy.sfpc").string();
  }
  const auto policy = load_policy<T>(cfg, policy_path);
  const auto spec = reward_for(o.reward.empty() ? cfg.reward : o.reward, data);
  const auto& mc = wm.config();
  const auto cond = wm.condition(ds.inputs[o.sample].reshaped(Shape{1, mc.t_in, mc.height, mc.width}));
  const auto logits = policy.act(ds.inputs[o.sample]);
  std::optional<std::span<const T>> ref;
  if (spec.needs_reference) ref = ds.targets[o.sample].values();
  const auto set = plan(wm, cond, logits, cfg.plan, spec, ref);
  const auto dir = seed_dir(cfg, seed, "plan-" + o.split + "-" + std::to_string(o.sample));
  std::vector<CandidateRow> rows;
  for (std::size_t b = 0; b < set.size(); ++b) {
    Tensor<T> f(Shape{mc.height, mc.width}, std::vector<T>(set.field(b).begin(), set.field(b).end()));
    write_tensor_file(dir + "/candidate_" + std::to_string(b) + ".sfpt", f);
    rows.push_back({o.sample, b, set.log_probs[b], set.selection.raw[b], set.selection.scores[b], b == set.selection.best});
  }
  write_tensor_file(dir + "/truth.sfpt", ds.targets[o.sample]);
  report::write_candidates(dir + "/scores.csv", rows);
  std::cout << dir << "\n";
  return 0;
}

std::vector<double> parse_values(const std::string& s) {
  std::vector<double> out;
  for (const auto& tok : report::split_line(s)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ConfigError("bad sweep value '" + tok + "'");
    }
  }
  if (out.empty()) throw ConfigError("sweep needs at least one value");
  return out;
}

template <class T>
int sweep_cmd(const ExperimentConfig& cfg0, const Options& o) {
  auto cfg = cfg0;
  if (o.seed) cfg.seeds = {*o.seed};
  if (cfg.manifest.empty()) throw ConfigError("data.manifest is required for this command");
  const auto full = load_dataset<T>(cfg.manifest, 1.0);
  const auto values = parse_values(o.values);
  SweepResult r;
  if (o.axis == "scarcity") {
    r = sweep_scarcity(cfg, full, values);
  } else if (o.axis == "beam") {
    std::vector<std::size_t> widths;
    for (double v : values) {
      if (v < 1 || v != std::floor(v)) throw ConfigError("beam widths must be positive integers");
      widths.push_back(static_cast<std::size_t>(v));
    }
    r = sweep_beam(cfg, full, widths);
  } else {
    throw ConfigError("unknown sweep axis '" + o.axis + "' (scarcity | beam)");
  }
  const auto dir = (fs::path(root_dir(cfg)) / ("sweep-" + o.axis)).string();
  fs::create_directories(dir);
  report::write_sweep(dir, r);
  write_json(dir + "/run.json", json{{"axis", o.axis}, {"values", values}, {"failures", r.failures.size()}, {"config", cfg.to_json()}});
  std::cout << dir << "/sweep_summary.csv\n";
  return r.failures.empty() ? 0 : 1;
}

int report_cmd(const Options& o) {
  if (o.run_dirs.empty()) throw ConfigError("report needs at least one run directory");
  const std::string out = o.out.empty() ? "report" : o.out;
  fs::create_directories(out);
  std::size_t plots = 0;
  std::ofstream merged(out + "/metrics.csv", std::ios::trunc);
  merged << "source,run_id,split,metric,value\n";
  auto slug = [](std::string s) {
    for (auto& c : s)
      if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
    return s;
  };
  for (const auto& d : o.run_dirs) {
    if (!fs::is_directory(d)) throw Error("not a directory: '" + d + "'");
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(d))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const auto name = f.filename().string();
      const auto rel = slug(fs::relative(f.parent_path(), fs::path(d).parent_path()).string());
      if (name == "losses.csv") {
        report::write_svg(out + "/loss_" + rel + ".svg", report::loss_plot(report::read_csv(f.string()), rel));
        ++plots;
      } else if (name == "metrics.csv") {
        const auto csv = report::read_csv(f.string());
        const auto cr = csv.column("run_id"), cs = csv.column("split"), cm = csv.column("metric"), cv = csv.column("value");
        std::set<std::string> splits;
        for (const auto& r : csv.rows) {
          merged << rel << "," << r[cr] << "," << r[cs] << "," << r[cm] << "," << r[cv] << "\n";
          splits.insert(r[cs]);
        }
        for (const auto& s : splits)
          for (const char* mode : {"deterministic.", "planned."}) {
            report::write_svg(out + "/metrics_" + rel + "_" + s + "_" + std::string(mode, std::strlen(mode) - 1) + ".svg",
                              report::metrics_plot(csv, s, mode));
            ++plots;
          }
      } else if (name == "sweep_summary.csv") {
        const auto csv = report::read_csv(f.string());
        std::set<std::string> metrics;
        for (const auto& r : csv.rows) metrics.insert(r[csv.column("metric")]);
        for (const auto& m : metrics) {
          report::write_svg(out + "/sweep_" + rel + "_" + slug(m) + ".svg", report::sweep_plot(csv, m));
          ++plots;
        }
      }
    }
  }
  std::cout << out << " (" << plots << " plots)\n";
  return 0;
}

template <class T>
int dispatch(const std::string& cmd, const ExperimentConfig& cfg, const Options& o) {
  if (cmd == "train-wm") return train_wm<T>(cfg, o);
  if (cmd == "train-baseline") return train_baseline<T>(cfg, o);
  if (cmd == "train-sfp") return train_sfp<T>(cfg, o);
  if (cmd == "eval") return eval<T>(cfg, o);
  if (cmd == "plan") return plan_cmd<T>(cfg, o);
  if (cmd == "sweep") return sweep_cmd<T>(cfg, o);
  throw Error("unknown command " + cmd);
}

const char* kind_of(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const FormatError*>(&e)) return "format";
  if (dynamic_cast<const FrozenError*>(&e)) return "frozen";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const SimulationError*>(&e)) return "simulation";
  return "runtime";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatiotemporal forecasting as planning"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* c) {
    c->add_option("-c,--config", o.config, "experiment config (JSON)")->required();
    c->add_option("--seed", seed, "run a single seed instead of train.seeds");
  };
  auto* gen = app.add_subcommand("gen-data", "simulate and write the dataset + manifest");
  gen->add_option("-c,--config", o.config, "experiment config (JSON)")->required();
  gen->add_option("--out", o.out, "dataset directory (default <output.dir>/data)");
  auto* wm = app.add_subcommand("train-wm", "stage 1: train and freeze the world model");
  add_common(wm);
  auto* base = app.add_subcommand("train-baseline", "stage 0: supervised policy");
  add_common(base);
  base->add_option("--wm", o.wm, "world-model checkpoint");
  auto* sfp = app.add_subcommand("train-sfp", "stage 2: plan-and-self-train from the baseline");
  add_common(sfp);
  sfp->add_option("--wm", o.wm, "world-model checkpoint");
  sfp->add_option("--policy", o.policy, "initial policy checkpoint");
  sfp->add_option("--reward", o.reward, "reward name (default reward.name)");
  auto* ev = app.add_subcommand("eval", "metric tables for every trained arm");
  add_common(ev);
  ev->add_option("--split", o.split, "train | val | test");
  ev->add_option("--wm", o.wm, "world-model checkpoint");
  ev->add_option("--policy", o.policy, "evaluate only this policy checkpoint");
  ev->add_option("--reward", o.reward, "planning reward (default reward.name)");
  auto* pl = app.add_subcommand("plan", "dump all beam candidates for one sample");
  add_common(pl);
  pl->add_option("--sample", o.sample, "sample index")->required();
  pl->add_option("--split", o.split, "train | val | test");
  pl->add_option("--wm", o.wm, "world-model checkpoint");
  pl->add_option("--policy", o.policy, "policy checkpoint");
  pl->add_option("--reward", o.reward, "reward name");
  auto* sw = app.add_subcommand("sweep", "scarcity or beam-width sweep");
  add_common(sw);
  sw->add_option("--axis", o.axis, "scarcity | beam")->required();
  sw->add_option("--values", o.values, "comma-separated axis values")->required();
  auto* rep = app.add_subcommand("report", "SVG plots and merged CSV from run directories");
  rep->add_option("runs", o.run_dirs, "run directories")->required();
  rep->add_option("--out", o.out, "output directory (default ./report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  }
  try {
    if (rep->parsed()) return report_cmd(o);
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (auto* opt = app.get_subcommands().front()->get_option_no_throw("--seed"); opt && opt->count()) o.seed = seed;
    auto cfg = ExperimentConfig::load(o.config);
    if (cmd == "gen-data") return gen_data(cfg, o);
    return cfg.precision == "f64" ? dispatch<double>(cmd, cfg, o) : dispatch<float>(cmd, cfg, o);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    const std::string kind = std::string(kind_of(e)) + ": ";
    if (msg.rfind(kind, 0) == 0) msg.erase(0, kind.size());
    std::cerr << "error: " << kind << msg << "\n";
    return 1;
  }
}
