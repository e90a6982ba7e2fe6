#pragma once

#include <cmath>
#include <random>
#include <string>

#include "sfp/autodiff.hpp"

namespace sfp::nn {

inline constexpr double kLeakySlope = 0.1;

/// He-uniform 3x3 kernel [co, ci, 3, 3] and zero bias under `name`.w / `name`.b.
template <class T>
void add_conv(ParameterStore<T>& store, const std::string& name, std::size_t co, std::size_t ci, std::mt19937_64& rng,
              double gain = 1.0) {
  const double fan_in = static_cast<double>(ci * 9);
  const double bound = gain * std::sqrt(6.0 / ((1.0 + kLeakySlope * kLeakySlope) * fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor<T> w(Shape{co, ci, 3, 3});
  for (auto& v : w.storage()) v = static_cast<T>(u(rng));
  store.add(name + ".w", std::move(w));
  store.add(name + ".b", Tensor<T>(Shape{co}));
}

template <class T>
Var<T> conv(Tape<T>& tape, const std::string& name, const Var<T>& x) {
  return conv3x3(x, tape.param(name + ".w"), tape.param(name + ".b"));
}

template <class T>
Var<T> down(Tape<T>& tape, const std::string& name, const Var<T>& x) {
  return conv_down2(x, tape.param(name + ".w"), tape.param(name + ".b"));
}

template <class T>
Var<T> act(const Var<T>& x) {
  return leaky_relu(x, static_cast<T>(kLeakySlope));
}

}  // namespace sfp::nn
