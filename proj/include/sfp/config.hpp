#pragma once

// Experiment configuration: a nested JSON document whose dotted key paths
// (data.*, wm.*, policy.*, plan.*, reward.*, train.*, output.*) are checked
// against the defaults below. Unknown keys are fatal.

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sfp/dynamics.hpp"
#include "sfp/planner.hpp"
#include "sfp/policy.hpp"
#include "sfp/world_model.hpp"

namespace sfp {

using json = nlohmann::json;

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct ExperimentConfig {
  std::string manifest;  // data.manifest; required by every command except gen-data
  SimConfig sim;
  std::size_t t_in = 4;
  WindowSplits splits;
  double scarcity = 1.0;
  double tau_percentile = 95.0;

  WorldModelConfig wm;
  PolicyConfig policy;
  PlanConfig plan;

  std::string reward = "csi";
  bool eval_reference = true;  // planned-mode evaluation may score candidates against the truth

  double lr = 1e-3;
  std::size_t batch_size = 16;
  std::size_t wm_epochs = 40;
  std::size_t baseline_epochs = 30;
  std::size_t sfp_epochs = 20;
  double lambda_mix = 0.5;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string precision = "f32";

  std::string output_dir = "runs";

  /// Keep the derived network shapes consistent with the data section.
  void sync() {
    wm.height = policy.height = sim.height;
    wm.width = policy.width = sim.width;
    wm.t_in = policy.t_in = t_in;
    policy.codebook_size = wm.codebook_size;
  }

  void validate() const {
    sim.validate();
    wm.validate();
    policy.validate();
    plan.validate(wm.codebook_size);
    metrics::make_reward(reward, sim.height, sim.width);
    if (seeds.empty()) throw ConfigError("train.seeds must be non-empty");
    if (!(lambda_mix >= 0.0 && lambda_mix <= 1.0)) throw ConfigError("train.lambda_mix must be in [0, 1]");
    if (!(scarcity > 0.0 && scarcity <= 1.0)) throw ConfigError("data.scarcity_fraction must be in (0, 1]");
    if (precision != "f32" && precision != "f64") throw ConfigError("train.precision must be f32 or f64");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(tau_percentile > 0 && tau_percentile <= 100)) throw ConfigError("data.tau_percentile must be in (0, 100]");
  }

  json to_json() const {
    json j;
    j["data"] = {{"manifest", manifest},
                 {"height", sim.height},
                 {"width", sim.width},
                 {"steps", sim.steps},
                 {"burn_in", sim.burn_in},
                 {"diffusivity", sim.diffusivity},
                 {"velocity_amplitude", sim.velocity_amplitude},
                 {"event_rate", sim.event_rate},
                 {"amplitude_min", sim.amplitude_min},
                 {"amplitude_max", sim.amplitude_max},
                 {"radius", sim.radius},
                 {"damping", sim.damping},
                 {"seed", sim.seed},
                 {"t_in", t_in},
                 {"split_train", splits.train},
                 {"split_val", splits.val},
                 {"split_test", splits.test},
                 {"scarcity_fraction", scarcity},
                 {"tau_percentile", tau_percentile}};
    j["wm"] = {{"preset", "desk"},
               {"codebook_size", wm.codebook_size},
               {"code_dim", wm.code_dim},
               {"cond_dim", wm.cond_dim},
               {"c1", wm.c1},
               {"c2", wm.c2},
               {"beta", wm.beta},
               {"multiscale", wm.multiscale},
               {"coarse_codebook_size", wm.coarse_codebook_size}};
    j["policy"] = {{"c1", policy.c1},
                   {"c2", policy.c2},
                   {"c3", policy.c3},
                   {"temperature", policy.temperature},
                   {"conv_projector", policy.conv_projector}};
    j["plan"] = {{"beam_width", plan.beam_width}, {"k_cell", plan.k_cell}, {"temperature", plan.temperature}};
    j["reward"] = {{"name", reward}, {"eval_reference", eval_reference}};
    j["train"] = {{"lr", lr},
                  {"batch_size", batch_size},
                  {"wm_epochs", wm_epochs},
                  {"baseline_epochs", baseline_epochs},
                  {"sfp_epochs", sfp_epochs},
                  {"lambda_mix", lambda_mix},
                  {"seeds", seeds},
                  {"precision", precision}};
    j["output"] = {{"dir", output_dir}};
    return j;
  }

  static ExperimentConfig from_json(const json& j);
  static ExperimentConfig load(const std::string& path);
};

namespace detail {

inline void flatten(const json& j, const std::string& prefix, std::map<std::string, json>& out) {
  if (j.is_object() && !j.empty()) {
    for (auto it = j.begin(); it != j.end(); ++it) flatten(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
    return;
  }
  out[prefix] = j;
}

inline bool same_kind(const json& def, const json& v) {
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_number_integer()) return v.is_number_integer() && (v.is_number_unsigned() || v.get<long long>() >= 0);
  if (def.is_number()) return v.is_number();
  if (def.is_string()) return v.is_string();
  if (def.is_array()) return v.is_array();
  return false;
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_json(const json& in) {
  if (!in.is_object()) throw ConfigError("config: top level must be an object");
  ExperimentConfig c;
  std::map<std::string, json> defaults, given;
  detail::flatten(c.to_json(), "", defaults);
  detail::flatten(in, "", given);
  json merged = c.to_json();
  for (const auto& [key, value] : given) {
    auto it = defaults.find(key);
    if (it == defaults.end()) throw ConfigError("config: unknown key '" + key + "'");
    if (!detail::same_kind(it->second, value)) throw ConfigError("config: key '" + key + "' has the wrong type");
    merged[json::json_pointer("/" + std::string(key).replace(key.find('.'), 1, "/"))] = value;
  }
  const auto& d = merged["data"];
  c.manifest = d["manifest"];
  c.sim.height = d["height"];
  c.sim.width = d["width"];
  c.sim.steps = d["steps"];
  c.sim.burn_in = d["burn_in"];
  c.sim.diffusivity = d["diffusivity"];
  c.sim.velocity_amplitude = d["velocity_amplitude"];
  c.sim.event_rate = d["event_rate"];
  c.sim.amplitude_min = d["amplitude_min"];
  c.sim.amplitude_max = d["amplitude_max"];
  c.sim.radius = d["radius"];
  c.sim.damping = d["damping"];
  c.sim.seed = d["seed"];
  c.t_in = d["t_in"];
  c.splits = {d["split_train"], d["split_val"], d["split_test"]};
  c.scarcity = d["scarcity_fraction"];
  c.tau_percentile = d["tau_percentile"];

  const auto& w = merged["wm"];
  const std::string preset = w["preset"];
  if (preset != "desk" && preset != "paper") throw ConfigError("config: wm.preset must be 'desk' or 'paper'");
  c.wm.codebook_size = given.count("wm.codebook_size") ? w["codebook_size"].get<std::size_t>()
                                                        : (preset == "paper" ? 1024 : 64);
  c.wm.code_dim = w["code_dim"];
  c.wm.cond_dim = w["cond_dim"];
  c.wm.c1 = w["c1"];
  c.wm.c2 = w["c2"];
  c.wm.beta = w["beta"];
  c.wm.multiscale = w["multiscale"];
  c.wm.coarse_codebook_size = w["coarse_codebook_size"];

  const auto& p = merged["policy"];
  c.policy.c1 = p["c1"];
  c.policy.c2 = p["c2"];
  c.policy.c3 = p["c3"];
  c.policy.temperature = p["temperature"];
  c.policy.conv_projector = p["conv_projector"];

  const auto& pl = merged["plan"];
  c.plan.beam_width = pl["beam_width"];
  c.plan.k_cell = pl["k_cell"];
  c.plan.temperature = pl["temperature"];

  c.reward = merged["reward"]["name"];
  c.plan.reward = c.reward;
  c.eval_reference = merged["reward"]["eval_reference"];

  const auto& t = merged["train"];
  c.lr = t["lr"];
  c.batch_size = t["batch_size"];
  c.wm_epochs = t["wm_epochs"];
  c.baseline_epochs = t["baseline_epochs"];
  c.sfp_epochs = t["sfp_epochs"];
  c.lambda_mix = t["lambda_mix"];
  c.seeds.clear();
  for (const auto& s : t["seeds"]) {
    if (!s.is_number_unsigned() && !(s.is_number_integer() && s.get<long long>() >= 0))
      throw ConfigError("config: train.seeds must hold non-negative integers");
    c.seeds.push_back(s.get<std::uint64_t>());
  }
  c.precision = t["precision"];
  c.output_dir = merged["output"]["dir"];
  c.sync();
  c.validate();
  return c;
}

inline ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path + ": " + e.what());
  }
  return from_json(j);
}

/// FNV-1a of a canonical JSON dump.
inline std::uint64_t digest(const json& j) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

/// Digest of the settings that fix a component's parameter layout.
inline std::uint64_t wm_digest(const ExperimentConfig& c) {
  auto j = c.to_json();
  return digest(json{{"wm", j["wm"]}, {"grid", {c.sim.height, c.sim.width, c.t_in}}, {"N", c.wm.codebook_size}});
}

inline std::uint64_t policy_digest(const ExperimentConfig& c) {
  auto j = c.to_json();
  return digest(json{{"policy", j["policy"]}, {"grid", {c.sim.height, c.sim.width, c.t_in}}, {"N", c.wm.codebook_size}});
}

}  // namespace sfp
