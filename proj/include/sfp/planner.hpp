#pragma once

// Lookahead over one future frame: beam search through code-index grids
// guided by the action's per-cell proposal, decoding of the complete grids by
// the frozen world model, and reward argmax selection of the pseudo-label.

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sfp/metrics.hpp"
#include "sfp/world_model.hpp"

namespace sfp {

struct PlanConfig {
  std::size_t beam_width = 10;
  std::size_t k_cell = 4;
  double temperature = 1.0;
  std::string reward = "csi";

  void validate(std::size_t codebook_size) const {
    if (beam_width < 1) throw Error("plan: beam width must be >= 1");
    if (k_cell < 1 || k_cell > codebook_size)
      throw Error("plan: K_cell=" + std::to_string(k_cell) + " outside 1.." + std::to_string(codebook_size));
    if (!(temperature > 0)) throw Error("plan: temperature must be positive");
  }
};

struct BeamHypothesis {
  std::vector<int> cells;  // raster order, filled prefix
  double log_prob = 0;
};

namespace detail {

// Strict ranking: higher log-prob first, then lexicographically smaller grid.
inline bool beam_before(const BeamHypothesis& a, const BeamHypothesis& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.cells < b.cells;
}

}  // namespace detail

/// Per-cell indices of the `k` largest entries of a log-prob row, ties to the lower index.
inline std::vector<int> top_k_row(std::span<const double> row, std::size_t k) {
  std::vector<int> idx(row.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), [&](int a, int b) {
    return row[a] != row[b] ? row[a] > row[b] : a < b;
  });
  idx.resize(k);
  return idx;
}

/// Beam search over an (h, w, N) logit grid; returns complete grids by descending log-prob.
template <class T>
std::vector<BeamHypothesis> beam_search(const Tensor<T>& logits, const PlanConfig& cfg) {
  if (logits.rank() != 3) throw ShapeError("beam_search: logits " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(2), cells = logits.dim(0) * logits.dim(1);
  cfg.validate(n);
  const auto lp = log_softmax_rows<T>(logits.values(), n, cfg.temperature);
  std::vector<BeamHypothesis> beam{BeamHypothesis{}};
  std::vector<BeamHypothesis> pool;
  for (std::size_t c = 0; c < cells; ++c) {
    std::span<const double> row(lp.data() + c * n, n);
    const auto branch = top_k_row(row, cfg.k_cell);
    pool.clear();
    pool.reserve(beam.size() * branch.size());
    for (const auto& h : beam)
      for (int k : branch) {
        BeamHypothesis next{h.cells, h.log_prob + row[static_cast<std::size_t>(k)]};
        next.cells.push_back(k);
        pool.push_back(std::move(next));
      }
    const std::size_t keep = std::min(cfg.beam_width, pool.size());
    std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keep), pool.end(), detail::beam_before);
    pool.resize(keep);
    beam.swap(pool);
  }
  return beam;
}

/// Decode complete grids under one history; (B, H, W), order preserved.
template <class T>
Tensor<T> decode_candidates(const WorldModel<T>& wm, std::span<const CodeIndexGrid> grids, const Tensor<T>& cond) {
  if (!wm.frozen()) throw FrozenError("decode_candidates: world model must be frozen");
  return wm.decode_grids(grids, cond);
}

struct Selection {
  std::size_t best = 0;
  std::vector<double> raw, scores;  // per candidate; scores are higher-is-better
};

/// Argmax of the normalized reward; ties go to the higher log-prob, then the lower index.
template <class T>
Selection select_best(const Tensor<T>& fields, std::span<const double> log_probs, const metrics::RewardSpec& spec,
                      std::optional<std::span<const T>> reference) {
  if (fields.rank() != 3 || fields.dim(0) == 0) throw Error("select_best: empty candidate set");
  const std::size_t b = fields.dim(0), hw = fields.dim(1) * fields.dim(2);
  if (log_probs.size() != b) throw ShapeError("select_best: log-prob count differs from candidate count");
  Selection sel;
  for (std::size_t i = 0; i < b; ++i) {
    std::span<const T> cand(fields.data() + i * hw, hw);
    const double raw = metrics::registry_raw<T>(spec, cand, reference);
    sel.raw.push_back(raw);
    sel.scores.push_back(metrics::normalize(spec, raw));
  }
  for (std::size_t i = 1; i < b; ++i) {
    const double s = sel.scores[i], t = sel.scores[sel.best];
    if (s > t || (s == t && log_probs[i] > log_probs[sel.best])) sel.best = i;
  }
  return sel;
}

template <class T>
struct CandidateSet {
  std::vector<CodeIndexGrid> grids;
  std::vector<double> log_probs;
  Tensor<T> fields;  // B x H x W
  Selection selection;

  std::size_t size() const { return grids.size(); }
  std::span<const T> field(std::size_t i) const {
    const std::size_t hw = fields.dim(1) * fields.dim(2);
    return {fields.data() + i * hw, hw};
  }
  std::span<const T> best() const { return field(selection.best); }
  double best_score() const { return selection.scores[selection.best]; }
};

/// Beam search -> decode -> select under a precomputed condition map (1, d_c, h, w).
template <class T>
CandidateSet<T> plan(const WorldModel<T>& wm, const Tensor<T>& cond, const Tensor<T>& logits, const PlanConfig& cfg,
                     const metrics::RewardSpec& spec, std::optional<std::span<const T>> reference = std::nullopt) {
  const auto& mc = wm.config();
  if (logits.shape() != Shape{mc.latent_h(), mc.latent_w(), mc.codebook_size})
    throw ShapeError("plan: logits " + shape_str(logits.shape()));
  CandidateSet<T> set;
  for (auto& h : beam_search(logits, cfg)) {
    set.grids.push_back(CodeIndexGrid{mc.latent_h(), mc.latent_w(), std::move(h.cells)});
    set.log_probs.push_back(h.log_prob);
  }
  set.fields = decode_candidates(wm, std::span<const CodeIndexGrid>(set.grids), cond);
  set.selection = select_best<T>(set.fields, set.log_probs, spec, reference);
  return set;
}

}  // namespace sfp
