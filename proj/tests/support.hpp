#pragma once

// Shared fixtures for the test binaries: seeded generators and a central
// finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "sfp/autodiff.hpp"
#include "sfp/params.hpp"
#include "sfp/policy.hpp"
#include "sfp/world_model.hpp"

namespace sfp::testing {

inline std::mt19937_64& rng(std::uint64_t reseed = 0) {
  static std::mt19937_64 g(12345);
  if (reseed) g.seed(reseed);
  return g;
}

template <class T = double>
Tensor<T> random_tensor(const Shape& s, std::mt19937_64& g, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(s);
  for (auto& v : t.storage()) v = static_cast<T>(u(g));
  return t;
}

inline std::size_t uniform_int(std::mt19937_64& g, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(g);
}

// Relative error with a floor so gradients near zero are compared absolutely.
inline double rel_err(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline constexpr double kFdStep = 1e-5;

/// Max relative error between backward() and central differences of a scalar
/// function of one tensor input.
inline double check_input_grad(const std::function<Var<double>(const Var<double>&)>& f, Tensor<double> x,
                               double h = kFdStep) {
  auto xv = variable(x);
  auto loss = f(xv);
  backward(loss);
  const Tensor<double> analytic = xv.grad().empty() ? Tensor<double>(x.shape()) : xv.grad();
  double worst = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(constant(x)).value()[0];
    x[i] = keep - h;
    const double down = f(constant(x)).value()[0];
    x[i] = keep;
    worst = std::max(worst, rel_err(analytic[i], (up - down) / (2 * h)));
  }
  return worst;
}

/// Same check for every trainable entry of a parameter store; `f` builds the
/// scalar loss on a fresh tape.
inline double check_param_grads(ParameterStore<double>& store, const std::function<Var<double>(Tape<double>&)>& f,
                                double h = kFdStep, std::string* worst_name = nullptr) {
  Tape<double> tape(store);
  auto grads = tape.grad(f(tape));
  double worst = 0;
  for (auto& [name, e] : store) {
    if (!e.trainable) continue;
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double keep = e.value[i];
      e.value[i] = keep + h;
      double up, down;
      {
        Tape<double> t(store);
        up = f(t).value()[0];
      }
      e.value[i] = keep - h;
      {
        Tape<double> t(store);
        down = f(t).value()[0];
      }
      e.value[i] = keep;
      const double err = rel_err(grads.at(name)[i], (up - down) / (2 * h));
      if (err > worst) {
        worst = err;
        if (worst_name) *worst_name = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return worst;
}

/// Weighted sum <w, x> so a gradient check exercises every output element differently.
inline Var<double> probe(const Var<double>& x, std::uint64_t seed = 99) {
  std::mt19937_64 g(seed);
  return sum(mul(x, constant(random_tensor(x.shape(), g))));
}

/// 8x8 fields, 2x2 latent grid, a handful of channels: small enough for
/// exhaustive finite differences.
inline WorldModelConfig tiny_wm_config() {
  WorldModelConfig c;
  c.height = c.width = 8;
  c.t_in = 2;
  c.codebook_size = 4;
  c.code_dim = 3;
  c.cond_dim = 2;
  c.c1 = 2;
  c.c2 = 3;
  return c;
}

inline PolicyConfig tiny_policy_config(const WorldModelConfig& wm) {
  auto p = PolicyConfig::matching(wm);
  p.c1 = 2;
  p.c2 = 3;
  p.c3 = 3;
  return p;
}

}  // namespace sfp::testing
