#pragma once

#include <cmath>
#include <iostream>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "sfp/params.hpp"

namespace sfp {

/// Process-wide list of non-fatal warnings, also echoed to stderr.
inline std::vector<std::string>& warning_records() {
  static std::vector<std::string> records;
  return records;
}

inline void warn(std::string msg) {
  std::cerr << "warning: " << msg << '\n';
  warning_records().push_back(std::move(msg));
}

/// Half-cosine decay from `base` at step 0 to 0 at step == total.
inline double cosine_lr(long step, long total, double base) {
  if (total <= 0) throw Error("cosine_lr: total must be positive");
  if (step > total) {
    warn("cosine_lr: step " + std::to_string(step) + " beyond total " + std::to_string(total) +
         ", clamped to 0");
    return 0.0;
  }
  if (step < 0) step = 0;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

template <class T>
struct AdamState {
  long step = 0;
  long total_steps = 1;
  double base_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;

  static AdamState with_schedule(long total_steps, double base_lr = 1e-3) {
    AdamState s;
    s.total_steps = total_steps;
    s.base_lr = base_lr;
    return s;
  }
};

/// One bias-corrected Adam update at the cosine-scheduled learning rate.
/// Frozen entries are skipped even if a gradient is supplied.
template <class T>
void adam_step(ParameterStore<T>& store, const std::map<std::string, Tensor<T>>& grads, AdamState<T>& st) {
  const double lr = cosine_lr(st.step, st.total_steps, st.base_lr);
  const long t = st.step + 1;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(t));
  for (auto& [name, entry] : store) {
    if (!entry.trainable) continue;
    auto g = grads.find(name);
    if (g == grads.end()) throw Error("adam_step: missing gradient for trainable entry '" + name + "'");
    if (g->second.shape() != entry.value.shape())
      throw ShapeError("adam_step: gradient " + shape_str(g->second.shape()) + " for '" + name + "' " +
                       shape_str(entry.value.shape()));
    auto& m = st.m.try_emplace(name, entry.value.shape()).first->second;
    auto& v = st.v.try_emplace(name, entry.value.shape()).first->second;
    T* w = entry.value.data();
    const T* gv = g->second.data();
    for (std::size_t i = 0; i < entry.value.size(); ++i) {
      const double gi = gv[i];
      const double mi = st.beta1 * m[i] + (1.0 - st.beta1) * gi;
      const double vi = st.beta2 * v[i] + (1.0 - st.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      w[i] = static_cast<T>(w[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + st.eps));
    }
  }
  st.step = t;
}

}  // namespace sfp
