#pragma once

// The forecasting agent. Its action is a grid of per-cell code logits over
// the world model's codebook; the projector turns an action back into a
// field by decoding the softmax-weighted mixture of codes.

#include <cstdint>
#include <random>
#include <string>

#include "sfp/autodiff.hpp"
#include "sfp/layers.hpp"
#include "sfp/world_model.hpp"

namespace sfp {

struct PolicyConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t t_in = 4;
  std::size_t codebook_size = 64;
  std::size_t c1 = 8, c2 = 16, c3 = 32;
  double temperature = 1.0;     // projection softmax temperature
  bool conv_projector = false;  // independent learned projector instead of the codebook mixture

  static PolicyConfig matching(const WorldModelConfig& wm) {
    PolicyConfig p;
    p.height = wm.height;
    p.width = wm.width;
    p.t_in = wm.t_in;
    p.codebook_size = wm.codebook_size;
    return p;
  }

  void validate() const {
    if (height % 4 || width % 4 || height < 8 || width < 8) throw Error("policy: grid must be a multiple of 4, >= 8");
    if (!(temperature > 0)) throw Error("policy: temperature must be positive");
    if (codebook_size < 2 || t_in < 1) throw Error("policy: bad dims");
  }
};

template <class T>
class Policy {
 public:
  Policy() = default;

  static Policy create(const PolicyConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Policy p;
    p.cfg_ = cfg;
    std::mt19937_64 rng(seed ^ 0x90C1CEull);
    nn::add_conv(p.params_, "pol.c1", cfg.c1, cfg.t_in, rng);
    nn::add_conv(p.params_, "pol.d1", cfg.c2, cfg.c1, rng);
    nn::add_conv(p.params_, "pol.d2", cfg.c3, cfg.c2, rng);
    nn::add_conv(p.params_, "pol.head", cfg.codebook_size, cfg.c3, rng);
    if (cfg.conv_projector) {
      nn::add_conv(p.params_, "pol.proj1", cfg.c2, cfg.codebook_size, rng);
      nn::add_conv(p.params_, "pol.proj2", 1, cfg.c2, rng);
    }
    return p;
  }

  static Policy from_params(const PolicyConfig& cfg, ParameterStore<T> params) {
    auto ref = create(cfg, 0);
    if (params.size() != ref.params_.size()) throw Error("policy: unexpected parameter set");
    for (const auto& [name, e] : ref.params_)
      if (!params.contains(name) || params.get(name).shape() != e.value.shape())
        throw Error("policy: parameter '" + name + "' missing or misshaped");
    Policy p;
    p.cfg_ = cfg;
    p.params_ = std::move(params);
    return p;
  }

  const PolicyConfig& config() const { return cfg_; }
  const ParameterStore<T>& params() const { return params_; }
  ParameterStore<T>& params() { return params_; }

  std::size_t latent_h() const { return cfg_.height / 4; }
  std::size_t latent_w() const { return cfg_.width / 4; }

  /// Action logits (B, h, w, N) for histories (B, T_in, H, W).
  Var<T> act(Tape<T>& tape, const Var<T>& s) const {
    const auto& sh = s.shape();
    if (sh.size() != 4 || sh[1] != cfg_.t_in || sh[2] != cfg_.height || sh[3] != cfg_.width)
      throw ShapeError("act: expected (B," + std::to_string(cfg_.t_in) + "," + std::to_string(cfg_.height) + "," +
                       std::to_string(cfg_.width) + "), got " + shape_str(sh));
    auto x = nn::act(nn::conv(tape, "pol.c1", s));
    x = nn::act(nn::down(tape, "pol.d1", x));
    x = nn::act(nn::down(tape, "pol.d2", x));
    return to_channels_last(nn::conv(tape, "pol.head", x));
  }

  /// Logits for a single history (T_in, H, W) -> (h, w, N), or a batch -> (B, h, w, N).
  Tensor<T> act(const Tensor<T>& s) const {
    Tape<T> tape(params_);
    if (s.rank() == 3) {
      auto out = act(tape, constant(s.reshaped(Shape{1, s.dim(0), s.dim(1), s.dim(2)}))).value();
      return out.reshaped(Shape{latent_h(), latent_w(), cfg_.codebook_size});
    }
    return act(tape, constant(s)).value();
  }

  /// P(a): decode of the softmax(logits / temperature) mixture of codebook rows
  /// under the conditions `cond` (1 or B, d_c, h, w). World-model parameters enter
  /// through `wm_tape` and receive no gradient since the model is frozen.
  Var<T> project(Tape<T>& tape, Tape<T>& wm_tape, const WorldModel<T>& wm, const Var<T>& logits,
                 const Tensor<T>& cond) const {
    if (!wm.frozen()) throw FrozenError("project: world model must be frozen");
    const auto& ls = logits.shape();
    if (ls.size() != 4 || ls[1] != latent_h() || ls[2] != latent_w() || ls[3] != cfg_.codebook_size)
      throw ShapeError("project: logits " + shape_str(ls));
    auto probs = softmax_last(scale(logits, static_cast<T>(1.0 / cfg_.temperature)));
    if (cfg_.conv_projector) {
      auto x = nn::act(nn::conv(tape, "pol.proj1", to_channels_first(probs)));
      return nn::conv(tape, "pol.proj2", upsample2(upsample2(x)));
    }
    auto z_bar = matmul_last(probs, wm_tape.param("codebook"));
    return wm.decode(wm_tape, to_channels_first(z_bar), constant(WorldModel<T>::repeat_batch(cond, ls[0])));
  }

  Var<T> project(Tape<T>& tape, const WorldModel<T>& wm, const Var<T>& logits, const Tensor<T>& cond) const {
    Tape<T> wm_tape(wm.params());
    return project(tape, wm_tape, wm, logits, cond);
  }

  /// Deterministic forecast P(act(s)) for histories (B, T_in, H, W) -> (B, H, W).
  Tensor<T> predict(const WorldModel<T>& wm, const Tensor<T>& s, const Tensor<T>& cond) const {
    Tape<T> tape(params_);
    auto out = project(tape, wm, act(tape, constant(s)), cond).value();
    return out.reshaped(Shape{s.dim(0), cfg_.height, cfg_.width});
  }

 private:
  PolicyConfig cfg_;
  ParameterStore<T> params_;
};

/// Mean squared distance between the projected action and the planner's pseudo-label.
template <class T>
Var<T> policy_loss(const Var<T>& projected, const Tensor<T>& pseudo_label) {
  return mse_reduce(projected, constant(pseudo_label.reshaped(projected.shape())));
}

/// Same functional form against the ground-truth next state.
template <class T>
Var<T> supervised_loss(const Var<T>& projected, const Tensor<T>& truth) {
  return mse_reduce(projected, constant(truth.reshaped(projected.shape())));
}

}  // namespace sfp
