#pragma once

// On-disk dataset: one SFPT frame block per split plus a JSON manifest that
// records the window layout, T_in, the event threshold and the value range.

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "sfp/binary_io.hpp"
#include "sfp/config.hpp"
#include "sfp/dynamics.hpp"
#include "sfp/metrics.hpp"

namespace sfp {

/// Windows of all three splits plus the constants derived from the training data.
template <class T>
struct Dataset {
  DatasetSplits<T> splits;
  double tau = 0;  // event threshold
  double field_min = 0, field_max = 0;
  std::uint64_t seed = 0;
  double scarcity = 1.0;

  std::size_t height() const { return splits.train.height; }
  std::size_t width() const { return splits.train.width; }
  double dynamic_range() const { return field_max > field_min ? field_max - field_min : 1.0; }

  const WindowedDataset<T>& split(Split s) const {
    return s == Split::train ? splits.train : s == Split::val ? splits.val : splits.test;
  }
};

namespace detail {

inline Tensor<double> frame_block(const Tensor<double>& frames, std::size_t first, std::size_t count) {
  const std::size_t plane = frames.dim(1) * frames.dim(2);
  std::vector<double> v(frames.data() + first * plane, frames.data() + (first + count) * plane);
  return Tensor<double>(Shape{count, frames.dim(1), frames.dim(2)}, std::move(v));
}

template <class T>
Dataset<T> assemble(const std::array<Tensor<double>, 3>& blocks, std::size_t t_in, double tau, double scarcity,
                    std::uint64_t seed, double lo, double hi) {
  Dataset<T> d;
  const std::array<Split, 3> tags{Split::train, Split::val, Split::test};
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t n = blocks[i].dim(0) >= t_in ? blocks[i].dim(0) - t_in : 0;
    auto w = make_windows<T>(blocks[i], 0, n, t_in, tags[i], 1.0);
    (i == 0 ? d.splits.train : i == 1 ? d.splits.val : d.splits.test) = std::move(w);
  }
  d.splits.train = apply_scarcity(std::move(d.splits.train), scarcity);
  d.tau = tau;
  d.scarcity = scarcity;
  d.seed = seed;
  d.field_min = lo;
  d.field_max = hi;
  return d;
}

// Frames spanned by `count` windows starting at `first`: count + t_in of them.
inline std::array<Tensor<double>, 3> split_blocks(const FieldSequence& seq, std::size_t t_in, const WindowSplits& f) {
  const auto counts = split_counts(seq.length(), t_in, f);
  std::array<Tensor<double>, 3> out;
  std::size_t first = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    out[i] = frame_block(seq.frames, first, counts[i] == 0 ? 0 : counts[i] + t_in);
    first += counts[i];
  }
  return out;
}

}  // namespace detail

/// Simulate, window and threshold in memory; the event threshold comes from
/// every training frame before any scarcity cut.
template <class T>
Dataset<T> build_dataset(const ExperimentConfig& cfg, double scarcity) {
  auto seq = simulate(cfg.sim);
  auto blocks = detail::split_blocks(seq, cfg.t_in, cfg.splits);
  if (blocks[0].dim(0) == 0) throw Error("dataset: no training windows");
  const double tau = percentile<double>(blocks[0].values(), cfg.tau_percentile / 100.0);
  const auto [lo, hi] = std::minmax_element(seq.frames.storage().begin(), seq.frames.storage().end());
  return detail::assemble<T>(blocks, cfg.t_in, tau, scarcity, cfg.sim.seed, *lo, *hi);
}

/// Write split blocks and manifest into `dir`; returns the manifest path.
inline std::string write_dataset(const ExperimentConfig& cfg, const std::string& dir) {
  std::filesystem::create_directories(dir);
  auto seq = simulate(cfg.sim);
  auto blocks = detail::split_blocks(seq, cfg.t_in, cfg.splits);
  if (blocks[0].dim(0) == 0) throw Error("dataset: no training windows");
  const double tau = percentile<double>(blocks[0].values(), cfg.tau_percentile / 100.0);
  const auto [lo, hi] = std::minmax_element(seq.frames.storage().begin(), seq.frames.storage().end());
  json m;
  m["format"] = "sfp-dataset";
  m["t_in"] = cfg.t_in;
  m["tau"] = tau;
  m["tau_percentile"] = cfg.tau_percentile;
  m["seed"] = cfg.sim.seed;
  m["scarcity_fraction"] = cfg.scarcity;
  m["grid"] = {cfg.sim.height, cfg.sim.width};
  m["field_min"] = *lo;
  m["field_max"] = *hi;
  m["sim"] = cfg.to_json()["data"];
  m["sim"].erase("manifest");
  const char* names[] = {"train", "val", "test"};
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string file = std::string(names[i]) + ".sfpt";
    write_tensor_file(dir + "/" + file, blocks[i].dim(0) ? blocks[i] : Tensor<double>(Shape{0, cfg.sim.height, cfg.sim.width}));
    m["splits"][names[i]] = {{"file", file}, {"windows", blocks[i].dim(0) ? blocks[i].dim(0) - cfg.t_in : 0}};
  }
  const std::string path = dir + "/manifest.json";
  std::ofstream(path) << m.dump(2) << "\n";
  return path;
}

/// Load a manifest and its split files. `scarcity` < 0 keeps the manifest's fraction.
template <class T>
Dataset<T> load_dataset(const std::string& manifest_path, double scarcity = -1.0) {
  std::ifstream in(manifest_path);
  if (!in) throw Error("dataset: cannot open manifest '" + manifest_path + "'");
  json m;
  try {
    m = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("dataset: " + manifest_path + ": " + e.what());
  }
  if (m.value("format", "") != "sfp-dataset") throw FormatError("dataset: " + manifest_path + " is not a dataset manifest");
  const auto dir = std::filesystem::path(manifest_path).parent_path();
  const std::size_t t_in = m["t_in"];
  std::array<Tensor<double>, 3> blocks;
  const char* names[] = {"train", "val", "test"};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& s = m["splits"][names[i]];
    blocks[i] = read_tensor_file<double>((dir / s["file"].get<std::string>()).string());
    const std::size_t windows = s["windows"];
    const std::size_t have = blocks[i].dim(0) >= t_in ? blocks[i].dim(0) - t_in : 0;
    if (have != windows) throw FormatError("dataset: split '" + std::string(names[i]) + "' window count mismatch");
  }
  const double frac = scarcity > 0 ? scarcity : m["scarcity_fraction"].get<double>();
  return detail::assemble<T>(blocks, t_in, m["tau"], frac, m["seed"], m["field_min"], m["field_max"]);
}

}  // namespace sfp
