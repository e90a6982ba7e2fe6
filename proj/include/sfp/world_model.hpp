#pragma once

// Conditional vector-quantised world model.
//
//   encoder    y (1 x H x W)      -> z_e (d x H/4 x W/4)
//   quantizer  z_e                -> nearest codebook rows z_q
//   condition  s_t (T_in x H x W) -> c_t (d_c x H/4 x W/4)
//   decoder    [z_q ; c_t]        -> y~ (1 x H x W)
//
// Latent tensors inside the graph are channels-first (B, d, h, w); the
// quantizer and the planner work on channels-last cells (h, w, d).

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sfp/autodiff.hpp"
#include "sfp/layers.hpp"
#include "sfp/optim.hpp"

namespace sfp {

struct WorldModelConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t t_in = 4;
  std::size_t codebook_size = 64;
  std::size_t code_dim = 32;
  std::size_t cond_dim = 32;
  std::size_t c1 = 8;   // full-resolution channels
  std::size_t c2 = 16;  // half-resolution channels
  double beta = 0.25;
  bool multiscale = false;
  std::size_t coarse_codebook_size = 16;

  std::size_t latent_h() const { return height / 4; }
  std::size_t latent_w() const { return width / 4; }
  std::size_t cells() const { return latent_h() * latent_w(); }

  void validate() const {
    if (height % 4 || width % 4 || height < 8 || width < 8) throw Error("world model: grid must be a multiple of 4, >= 8");
    if (codebook_size < 2) throw Error("world model: codebook needs at least 2 entries");
    if (code_dim < 1 || cond_dim < 1 || t_in < 1) throw Error("world model: dims must be positive");
    if (multiscale && (latent_h() % 2 || latent_w() % 2 || coarse_codebook_size < 2))
      throw Error("world model: multiscale needs even latent dims and a coarse codebook");
  }
};

/// h x w code indices in raster order.
struct CodeIndexGrid {
  std::size_t height = 0, width = 0;
  std::vector<int> indices;

  friend bool operator==(const CodeIndexGrid&, const CodeIndexGrid&) = default;
};

/// Gathered codebook rows, h x w x d, with the indices they came from.
template <class T>
struct QuantizedGrid {
  Tensor<T> vectors;
  CodeIndexGrid indices;
};

/// Squared Euclidean distance, accumulated in index order.
template <class T>
T squared_distance(const T* a, const T* b, std::size_t d) {
  T acc = 0;
  for (std::size_t j = 0; j < d; ++j) {
    const T diff = a[j] - b[j];
    acc += diff * diff;
  }
  return acc;
}

/// Nearest codebook row for every d-vector in `cells`; ties go to the lowest index.
template <class T>
std::vector<int> nearest_codes(std::span<const T> cells, const Tensor<T>& codebook) {
  if (codebook.rank() != 2) throw ShapeError("quantize: codebook " + shape_str(codebook.shape()));
  const std::size_t n = codebook.dim(0), d = codebook.dim(1);
  if (cells.size() % d) throw ShapeError("quantize: latent size not a multiple of code dim " + std::to_string(d));
  std::vector<int> out(cells.size() / d);
  for (std::size_t c = 0; c < out.size(); ++c) {
    T best = std::numeric_limits<T>::infinity();
    int arg = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const T dist = squared_distance(cells.data() + c * d, codebook.data() + k * d, d);
      if (dist < best) {
        best = dist;
        arg = static_cast<int>(k);
      }
    }
    out[c] = arg;
  }
  return out;
}

/// Rows of the codebook for the given indices, as (count x d).
template <class T>
Tensor<T> gather_codes(const Tensor<T>& codebook, std::span<const int> indices) {
  const std::size_t d = codebook.dim(1);
  Tensor<T> out(Shape{indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || static_cast<std::size_t>(indices[i]) >= codebook.dim(0))
      throw ShapeError("gather: code index " + std::to_string(indices[i]) + " out of range");
    std::copy_n(codebook.data() + static_cast<std::size_t>(indices[i]) * d, d, out.data() + i * d);
  }
  return out;
}

/// Quantize a channels-last latent grid (h x w x d).
template <class T>
std::pair<CodeIndexGrid, QuantizedGrid<T>> quantize(const Tensor<T>& z_e, const Tensor<T>& codebook) {
  if (z_e.rank() != 3 || z_e.dim(2) != codebook.dim(1))
    throw ShapeError("quantize: latent " + shape_str(z_e.shape()) + " vs codebook " + shape_str(codebook.shape()));
  CodeIndexGrid grid{z_e.dim(0), z_e.dim(1), nearest_codes<T>(z_e.values(), codebook)};
  auto vec = gather_codes(codebook, grid.indices).reshaped(z_e.shape());
  return {grid, QuantizedGrid<T>{std::move(vec), grid}};
}

/// The K nearest codes to one cell by ascending distance, ties by lower index.
template <class T>
std::vector<int> top_k_codes(std::span<const T> cell, const Tensor<T>& codebook, std::size_t k) {
  const std::size_t n = codebook.dim(0), d = codebook.dim(1);
  if (k < 1 || k > n) throw Error("top_k_codes: K=" + std::to_string(k) + " outside 1.." + std::to_string(n));
  if (cell.size() != d) throw ShapeError("top_k_codes: cell of size " + std::to_string(cell.size()) + ", code dim " + std::to_string(d));
  std::vector<std::pair<T, int>> dist(n);
  for (std::size_t i = 0; i < n; ++i) dist[i] = {squared_distance(cell.data(), codebook.data() + i * d, d), static_cast<int>(i)};
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
  std::vector<int> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = dist[i].second;
  return out;
}

/// The two quantizer regularisers for cells (M x d) against a codebook (N x d).
/// Both are mean squared distances to the chosen codes; they differ only in
/// which side the stop-gradient sits on.
template <class T>
struct VqTerms {
  Var<T> codebook, commitment;
  Var<T> straight;  // values of z_q, gradients to the cells
  std::vector<int> indices;
};

template <class T>
VqTerms<T> vq_terms(const Var<T>& cells, const Var<T>& book) {
  VqTerms<T> t;
  t.indices = nearest_codes<T>(cells.value().values(), book.value());
  auto z_q = gather_rows(book, t.indices);
  t.codebook = mse_reduce(stop_gradient(cells), z_q);
  t.commitment = mse_reduce(cells, stop_gradient(z_q));
  t.straight = straight_through(cells, z_q);
  return t;
}

template <class T>
Var<T> composite_loss(const Var<T>& reconstruction, const Var<T>& codebook, const Var<T>& commitment, double beta) {
  return add(add(reconstruction, codebook), scale(commitment, static_cast<T>(beta)));
}

/// Per-term breakdown of the world-model objective.
template <class T>
struct WorldModelLoss {
  Var<T> total, reconstruction, codebook, commitment;
  std::vector<int> indices;  // fine-scale codes, batch-major raster order
};

template <class T>
class WorldModel {
 public:
  WorldModel() = default;

  static WorldModel create(const WorldModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    WorldModel m;
    m.cfg_ = cfg;
    std::mt19937_64 rng(seed);
    auto& p = m.params_;
    nn::add_conv(p, "enc.c1", cfg.c1, 1, rng);
    nn::add_conv(p, "enc.d1", cfg.c2, cfg.c1, rng);
    nn::add_conv(p, "enc.d2", cfg.code_dim, cfg.c2, rng);
    nn::add_conv(p, "cond.c1", cfg.c1, cfg.t_in, rng);
    nn::add_conv(p, "cond.d1", cfg.c2, cfg.c1, rng);
    nn::add_conv(p, "cond.d2", cfg.cond_dim, cfg.c2, rng);
    const std::size_t fused = cfg.code_dim * (cfg.multiscale ? 2 : 1) + cfg.cond_dim;
    nn::add_conv(p, "dec.c1", cfg.c2, fused, rng);
    nn::add_conv(p, "dec.c2", cfg.c1, cfg.c2, rng);
    nn::add_conv(p, "dec.c3", 1, cfg.c1, rng);
    p.add("codebook", init_codebook(cfg.codebook_size, cfg.code_dim, rng));
    if (cfg.multiscale) {
      nn::add_conv(p, "ms.down", cfg.code_dim, cfg.code_dim, rng);
      p.add("codebook_coarse", init_codebook(cfg.coarse_codebook_size, cfg.code_dim, rng));
    }
    return m;
  }

  /// Wrap an existing parameter set (checkpoint load); names and shapes must match `cfg`.
  static WorldModel from_params(const WorldModelConfig& cfg, ParameterStore<T> params, bool frozen) {
    auto ref = create(cfg, 0);
    for (const auto& [name, e] : ref.params_)
      if (!params.contains(name) || params.get(name).shape() != e.value.shape())
        throw Error("world model: parameter '" + name + "' missing or misshaped");
    if (params.size() != ref.params_.size()) throw Error("world model: unexpected parameter set");
    WorldModel m;
    m.cfg_ = cfg;
    m.params_ = std::move(params);
    m.frozen_ = false;
    for (auto& [name, e] : m.params_) e.trainable = true;
    if (frozen) m.freeze();
    return m;
  }

  const WorldModelConfig& config() const { return cfg_; }
  const ParameterStore<T>& params() const { return params_; }
  const Tensor<T>& codebook() const { return params_.get("codebook"); }
  bool frozen() const { return frozen_; }

  void freeze() {
    params_.freeze_all();
    frozen_ = true;
  }

  /// Mutable access for training; refused once frozen.
  ParameterStore<T>& trainable_params() {
    if (frozen_) throw FrozenError("world model is frozen");
    return params_;
  }

  // --- graph builders (batched, channels-first) ---

  Var<T> encode(Tape<T>& tape, const Var<T>& y) const {
    check_batch("encode", y, 1);
    auto x = nn::act(nn::conv(tape, "enc.c1", y));
    x = nn::act(nn::down(tape, "enc.d1", x));
    return nn::down(tape, "enc.d2", x);
  }

  Var<T> condition(Tape<T>& tape, const Var<T>& s) const {
    check_batch("condition", s, cfg_.t_in);
    auto x = nn::act(nn::conv(tape, "cond.c1", s));
    x = nn::act(nn::down(tape, "cond.d1", x));
    return nn::down(tape, "cond.d2", x);
  }

  /// Decoder on quantized latents (B, d, h, w) and conditions (B, d_c, h, w).
  Var<T> decode(Tape<T>& tape, const Var<T>& z_q, const Var<T>& c) const { return decode_impl(tape, z_q, c, nullptr); }

  /// Composite objective: reconstruction + codebook + beta * commitment,
  /// with the straight-through estimator carrying reconstruction gradients to the encoder.
  WorldModelLoss<T> loss(Tape<T>& tape, const Tensor<T>& targets, const Tensor<T>& states) const {
    if (frozen_) throw FrozenError("wm_loss: world model is frozen");
    const auto y = constant(targets);
    const auto z_e = encode(tape, y);
    const std::size_t b = z_e.shape()[0];
    auto vq = vector_quantize(tape, z_e, "codebook");
    auto z_st = to_channels_first(reshape(vq.straight, Shape{b, cfg_.latent_h(), cfg_.latent_w(), cfg_.code_dim}));
    VqTerms<T> coarse;
    auto y_hat = decode_impl(tape, z_st, condition(tape, constant(states)), cfg_.multiscale ? &coarse : nullptr);
    WorldModelLoss<T> out;
    out.reconstruction = mse_reduce(y_hat, y);
    out.codebook = vq.codebook;
    out.commitment = vq.commitment;
    if (cfg_.multiscale) {
      out.codebook = add(out.codebook, coarse.codebook);
      out.commitment = add(out.commitment, coarse.commitment);
    }
    out.total = composite_loss(out.reconstruction, out.codebook, out.commitment, cfg_.beta);
    out.indices = std::move(vq.indices);
    return out;
  }

  // --- value-level conveniences ---

  /// z_e of one field (H x W) as channels-last h x w x d.
  Tensor<T> encode(const Tensor<T>& y) const {
    Tape<T> tape(params_);
    auto z = encode(tape, constant(y.reshaped(Shape{1, 1, cfg_.height, cfg_.width})));
    return to_channels_last(z).value().reshaped(Shape{cfg_.latent_h(), cfg_.latent_w(), cfg_.code_dim});
  }

  /// Condition maps for a batch of histories (B x T_in x H x W) -> (B, d_c, h, w).
  Tensor<T> condition(const Tensor<T>& states) const {
    Tape<T> tape(params_);
    return condition(tape, constant(as_batch(states, cfg_.t_in))).value();
  }

  /// Decode code grids (each h*w indices) under one condition map (1 or B, d_c, h, w).
  /// Returns (count, H, W).
  Tensor<T> decode_grids(std::span<const CodeIndexGrid> grids, const Tensor<T>& cond) const {
    if (grids.empty()) throw Error("decode: no grids");
    std::vector<int> flat;
    flat.reserve(grids.size() * cfg_.cells());
    for (const auto& g : grids) {
      if (g.indices.size() != cfg_.cells()) throw ShapeError("decode: grid has " + std::to_string(g.indices.size()) + " cells");
      flat.insert(flat.end(), g.indices.begin(), g.indices.end());
    }
    const std::size_t b = grids.size();
    auto z = gather_codes(codebook(), flat).reshaped(Shape{b, cfg_.latent_h(), cfg_.latent_w(), cfg_.code_dim});
    return decode_latents(z, cond);
  }

  /// Decode channels-last latents (B, h, w, d) under a condition (1 or B, d_c, h, w); returns (B, H, W).
  Tensor<T> decode_latents(const Tensor<T>& z_cl, const Tensor<T>& cond) const {
    const std::size_t b = z_cl.dim(0);
    Tape<T> tape(params_);
    auto out = decode(tape, to_channels_first(constant(z_cl)), constant(repeat_batch(cond, b)));
    return out.value().reshaped(Shape{b, cfg_.height, cfg_.width});
  }

  /// Encode-quantize-decode reconstruction of y under history s.
  Tensor<T> reconstruct(const Tensor<T>& y, const Tensor<T>& s) const {
    auto [grid, q] = quantize(encode(y), codebook());
    return decode_grids(std::span<const CodeIndexGrid>(&grid, 1), condition(s)).reshaped(Shape{cfg_.height, cfg_.width});
  }

  /// Tile a (1, C, h, w) tensor to (b, C, h, w); a batch of b passes through.
  static Tensor<T> repeat_batch(const Tensor<T>& t, std::size_t b) {
    if (t.rank() != 4) throw ShapeError("repeat: expected rank 4, got " + shape_str(t.shape()));
    if (t.dim(0) == b) return t;
    if (t.dim(0) != 1) throw ShapeError("repeat: batch " + std::to_string(t.dim(0)) + " vs " + std::to_string(b));
    std::vector<T> out;
    out.reserve(b * t.size());
    for (std::size_t i = 0; i < b; ++i) out.insert(out.end(), t.storage().begin(), t.storage().end());
    return Tensor<T>(Shape{b, t.dim(1), t.dim(2), t.dim(3)}, std::move(out));
  }

 private:
  static Tensor<T> init_codebook(std::size_t n, std::size_t d, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1.0 / static_cast<double>(n), 1.0 / static_cast<double>(n));
    Tensor<T> cb(Shape{n, d});
    for (auto& v : cb.storage()) v = static_cast<T>(u(rng));
    return cb;
  }

  Tensor<T> as_batch(const Tensor<T>& x, std::size_t channels) const {
    if (x.rank() == 4) return x;
    if (x.rank() == 3 && x.dim(0) == channels) return x.reshaped(Shape{1, channels, x.dim(1), x.dim(2)});
    if (x.rank() == 2 && channels == 1) return x.reshaped(Shape{1, 1, x.dim(0), x.dim(1)});
    throw ShapeError("world model: cannot batch " + shape_str(x.shape()));
  }

  void check_batch(const char* op, const Var<T>& x, std::size_t channels) const {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != channels || s[2] != cfg_.height || s[3] != cfg_.width)
      throw ShapeError(std::string(op) + ": expected (B," + std::to_string(channels) + "," + std::to_string(cfg_.height) +
                       "," + std::to_string(cfg_.width) + "), got " + shape_str(s));
  }

  // Quantize channels-first z (B, d, h', w') against `table`; returns the two
  // regularisers and the straight-through latent as (B*h'*w', d).
  VqTerms<T> vector_quantize(Tape<T>& tape, const Var<T>& z, const std::string& table) const {
    const auto& s = z.shape();
    return vq_terms(reshape(to_channels_last(z), Shape{s[0] * s[2] * s[3], s[1]}), tape.param(table));
  }

  Var<T> decode_impl(Tape<T>& tape, const Var<T>& z_q, const Var<T>& c, VqTerms<T>* coarse_terms) const {
    const auto& zs = z_q.shape();
    if (zs.size() != 4 || zs[1] != cfg_.code_dim || zs[2] != cfg_.latent_h() || zs[3] != cfg_.latent_w())
      throw ShapeError("decode: latent " + shape_str(zs));
    if (c.shape() != Shape{zs[0], cfg_.cond_dim, zs[2], zs[3]})
      throw ShapeError("decode: condition " + shape_str(c.shape()) + " vs latent " + shape_str(zs));
    auto x = z_q;
    if (cfg_.multiscale) {
      auto vq = vector_quantize(tape, nn::down(tape, "ms.down", z_q), "codebook_coarse");
      auto coarse = to_channels_first(reshape(vq.straight, Shape{zs[0], zs[2] / 2, zs[3] / 2, zs[1]}));
      x = concat_channels(x, upsample2(coarse));
      if (coarse_terms) *coarse_terms = std::move(vq);
    }
    x = nn::act(nn::conv(tape, "dec.c1", concat_channels(x, c)));
    x = nn::act(nn::conv(tape, "dec.c2", upsample2(x)));
    return nn::conv(tape, "dec.c3", upsample2(x));
  }

  WorldModelConfig cfg_;
  ParameterStore<T> params_;
  bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// Stage-1 training

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

/// Training aborted on a non-finite loss; carries the last finite parameters.
template <class T>
class DivergenceError : public Error {
 public:
  DivergenceError(std::string msg, ParameterStore<T> last_good) : Error(std::move(msg)), last_good(std::move(last_good)) {}
  ParameterStore<T> last_good;
};

struct WorldModelEpoch {
  double reconstruction = 0, codebook = 0, commitment = 0, total = 0;
  std::vector<std::size_t> usage;  // selections per code over the epoch
};

namespace detail {

template <class T>
Tensor<T> gather_batch(const std::vector<Tensor<T>>& items, std::span<const std::size_t> idx, Shape item_shape) {
  std::vector<T> out;
  out.reserve(idx.size() * shape_numel(item_shape));
  for (std::size_t i : idx) out.insert(out.end(), items[i].storage().begin(), items[i].storage().end());
  item_shape.insert(item_shape.begin(), idx.size());
  return Tensor<T>(std::move(item_shape), std::move(out));
}

inline std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

inline std::size_t batches_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

}  // namespace detail

/// Minimise the composite loss over (s_t, y_{t+1}) pairs with Adam, then freeze.
template <class T, class Dataset>
std::vector<WorldModelEpoch> train_world_model(WorldModel<T>& model, const Dataset& data, const TrainConfig& cfg) {
  if (data.size() == 0) throw Error("train_world_model: empty dataset");
  const auto& mc = model.config();
  auto& params = model.trainable_params();
  const std::size_t per_epoch = detail::batches_per_epoch(data.size(), cfg.batch_size);
  auto adam = AdamState<T>::with_schedule(static_cast<long>(per_epoch * cfg.epochs), cfg.lr);
  std::mt19937_64 rng(cfg.seed ^ 0x57A6E1ull);
  std::vector<WorldModelEpoch> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    WorldModelEpoch rec;
    rec.usage.assign(mc.codebook_size, 0);
    const auto order = detail::shuffled(data.size(), rng);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      std::span<const std::size_t> idx(order.data() + b0, std::min(cfg.batch_size, order.size() - b0));
      auto y = detail::gather_batch(data.targets, idx, Shape{1, mc.height, mc.width});
      auto s = detail::gather_batch(data.inputs, idx, Shape{mc.t_in, mc.height, mc.width});
      ParameterStore<T> last_good = params;
      Tape<T> tape(params);
      auto l = model.loss(tape, y, s);
      const double total = l.total.value()[0];
      if (!std::isfinite(total))
        throw DivergenceError<T>("train_world_model: loss diverged in epoch " + std::to_string(epoch), std::move(last_good));
      auto g = tape.grad(l.total);
      adam_step(params, g, adam);
      const double w = static_cast<double>(idx.size()) / static_cast<double>(data.size());
      rec.reconstruction += w * l.reconstruction.value()[0];
      rec.codebook += w * l.codebook.value()[0];
      rec.commitment += w * l.commitment.value()[0];
      rec.total += w * total;
      for (int k : l.indices) ++rec.usage[static_cast<std::size_t>(k)];
    }
    history.push_back(std::move(rec));
  }
  model.freeze();
  return history;
}

// ---------------------------------------------------------------------------
// Sampling from the frozen model

/// Temperature-scaled log-softmax of each length-N row of `logits`.
template <class T>
std::vector<double> log_softmax_rows(std::span<const T> logits, std::size_t n, double temperature) {
  std::vector<double> out(logits.size());
  for (std::size_t r = 0; r < logits.size() / n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, static_cast<double>(logits[r * n + k]) / temperature);
    double s = 0;
    for (std::size_t k = 0; k < n; ++k) s += std::exp(static_cast<double>(logits[r * n + k]) / temperature - mx);
    const double lse = mx + std::log(s);
    for (std::size_t k = 0; k < n; ++k) out[r * n + k] = static_cast<double>(logits[r * n + k]) / temperature - lse;
  }
  return out;
}

/// Per-cell argmax of an (h, w, N) logit grid, ties to the lowest index.
template <class T>
CodeIndexGrid greedy_grid(const Tensor<T>& logits) {
  if (logits.rank() != 3) throw ShapeError("greedy_grid: logits " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(2);
  CodeIndexGrid g{logits.dim(0), logits.dim(1), std::vector<int>(logits.dim(0) * logits.dim(1))};
  for (std::size_t c = 0; c < g.indices.size(); ++c) {
    const T* row = logits.data() + c * n;
    g.indices[c] = static_cast<int>(std::max_element(row, row + n) - row);
  }
  return g;
}

template <class T>
struct SampledFutures {
  std::vector<CodeIndexGrid> grids;
  Tensor<T> fields;  // K x H x W
};

/// Draw K code grids i.i.d. per cell from softmax(logits / temperature) and
/// decode each under c_t = condition(s_t). Temperature 0 means greedy.
template <class T>
SampledFutures<T> sample_futures(const WorldModel<T>& model, const Tensor<T>& state, const Tensor<T>& logits,
                                 std::size_t k, double temperature, std::mt19937_64& rng) {
  if (!model.frozen()) throw FrozenError("sample_futures: world model must be frozen");
  const auto& mc = model.config();
  if (logits.shape() != Shape{mc.latent_h(), mc.latent_w(), mc.codebook_size})
    throw ShapeError("sample_futures: logits " + shape_str(logits.shape()));
  if (k < 1) throw Error("sample_futures: K must be >= 1");
  SampledFutures<T> out;
  if (temperature <= 0) {
    out.grids.assign(k, greedy_grid(logits));
  } else {
    const std::size_t n = mc.codebook_size;
    const auto lp = log_softmax_rows<T>(logits.values(), n, temperature);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t s = 0; s < k; ++s) {
      CodeIndexGrid g{mc.latent_h(), mc.latent_w(), std::vector<int>(mc.cells())};
      for (std::size_t c = 0; c < mc.cells(); ++c) {
        double u = unit(rng), acc = 0;
        int pick = static_cast<int>(n - 1);
        for (std::size_t j = 0; j < n; ++j) {
          acc += std::exp(lp[c * n + j]);
          if (u < acc) {
            pick = static_cast<int>(j);
            break;
          }
        }
        g.indices[c] = pick;
      }
      out.grids.push_back(std::move(g));
    }
  }
  out.fields = model.decode_grids(out.grids, model.condition(state));
  return out;
}

}  // namespace sfp
