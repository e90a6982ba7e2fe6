#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sfp/dynamics.hpp"
#include "sfp/fft.hpp"
#include "sfp/tensor.hpp"

namespace sfp::metrics {

namespace detail {
template <class T>
void same_size(const char* what, std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size() || a.empty())
    throw ShapeError(std::string(what) + ": size " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
}
}  // namespace detail

template <class T>
double mse(std::span<const T> pred, std::span<const T> truth) {
  detail::same_size("mse", pred, truth);
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(truth[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

template <class T>
double rmse(std::span<const T> pred, std::span<const T> truth) {
  return std::sqrt(mse(pred, truth));
}

template <class T>
double mae(std::span<const T> pred, std::span<const T> truth) {
  detail::same_size("mae", pred, truth);
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(static_cast<double>(pred[i]) - static_cast<double>(truth[i]));
  return acc / static_cast<double>(pred.size());
}

/// ||pred - truth||_2 / ||truth||_2.
template <class T>
double rel_l2(std::span<const T> pred, std::span<const T> truth) {
  detail::same_size("rel_l2", pred, truth);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(truth[i]);
    num += d * d;
    den += static_cast<double>(truth[i]) * static_cast<double>(truth[i]);
  }
  if (den == 0.0) throw Error("rel_l2: reference has zero norm");
  return std::sqrt(num / den);
}

struct CsiResult {
  double value = 0;
  std::size_t hits = 0, misses = 0, false_alarms = 0;
  bool no_events = false;  // denominator was zero; value set to 1 by convention
};

/// hits / (hits + misses + false alarms) on masks thresholded at >= tau.
template <class T>
CsiResult csi(std::span<const T> pred, std::span<const T> truth, double tau) {
  detail::same_size("csi", pred, truth);
  CsiResult r;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = static_cast<double>(pred[i]) >= tau;
    const bool t = static_cast<double>(truth[i]) >= tau;
    r.hits += p && t;
    r.misses += t && !p;
    r.false_alarms += p && !t;
  }
  const std::size_t den = r.hits + r.misses + r.false_alarms;
  r.no_events = den == 0;
  r.value = r.no_events ? 1.0 : static_cast<double>(r.hits) / static_cast<double>(den);
  return r;
}

/// Single-window SSIM over the whole field with population moments,
/// C1 = (0.01 L)^2 and C2 = (0.03 L)^2.
template <class T>
double ssim(std::span<const T> x, std::span<const T> y, double dynamic_range) {
  detail::same_size("ssim", x, y);
  if (!(dynamic_range > 0)) throw Error("ssim: dynamic range must be positive");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double vx = 0, vy = 0, cxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    vx += dx * dx;
    vy += dy * dy;
    cxy += dx * dy;
  }
  vx /= n;
  vy /= n;
  cxy /= n;
  const double c1 = (0.01 * dynamic_range) * (0.01 * dynamic_range);
  const double c2 = (0.03 * dynamic_range) * (0.03 * dynamic_range);
  return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
}

struct RadialSpectrum {
  std::vector<double> energy;  // energy[k] for integer shells k = 0..min(H,W)/2
  double total_energy = 0;
};

/// Radially binned power of the mean-removed field, normalised by (H W)^2 so
/// the shells sum to the field variance. Corner modes beyond the last shell
/// are folded into it.
template <class T>
RadialSpectrum tke_spectrum(std::span<const T> field, std::size_t h, std::size_t w) {
  if (h % 2 || w % 2) throw Error("tke_spectrum: grid dims must be even");
  if (field.size() != h * w) throw ShapeError("tke_spectrum: field size does not match grid");
  const double m = mean_of(field);
  std::vector<double> f(field.size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<double>(field[i]) - m;
  const auto g = fft::forward(f, h, w);
  const std::size_t kmax = std::min(h, w) / 2;
  RadialSpectrum s;
  s.energy.assign(kmax + 1, 0.0);
  const double norm = static_cast<double>(h * w) * static_cast<double>(h * w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double ky = fft::wavenumber(r, h), kx = fft::wavenumber(c, w);
      const auto shell = std::min(kmax, static_cast<std::size_t>(std::floor(std::sqrt(kx * kx + ky * ky) + 0.5)));
      s.energy[shell] += std::norm(g(r, c)) / norm;
    }
  for (double e : s.energy) s.total_energy += e;
  return s;
}

inline constexpr double kSpectrumFloor = 1e-12;

/// Mean over shells k >= 1 of |log(E_pred + eps) - log(E_ref + eps)|.
inline double tke_error(const RadialSpectrum& pred, const RadialSpectrum& ref) {
  if (pred.energy.size() != ref.energy.size() || pred.energy.size() < 2)
    throw ShapeError("tke_error: spectra have different shell counts");
  double acc = 0;
  for (std::size_t k = 1; k < pred.energy.size(); ++k)
    acc += std::abs(std::log(pred.energy[k] + kSpectrumFloor) - std::log(ref.energy[k] + kSpectrumFloor));
  return acc / static_cast<double>(pred.energy.size() - 1);
}

template <class T>
double tke_error(std::span<const T> pred, std::span<const T> ref, std::size_t h, std::size_t w) {
  return tke_error(tke_spectrum(pred, h, w), tke_spectrum(ref, h, w));
}

/// Ensemble CRPS of scalars: mean |x_i - y| - (1 / 2M^2) sum_ij |x_i - x_j|.
inline double crps_scalar(std::span<const double> members, double truth) {
  if (members.empty()) throw Error("crps: ensemble needs at least one member");
  const double m = static_cast<double>(members.size());
  double skill = 0, spread = 0;
  for (double x : members) skill += std::abs(x - truth);
  for (double a : members)
    for (double b : members) spread += std::abs(a - b);
  return skill / m - spread / (2.0 * m * m);
}

/// Pixel-wise ensemble CRPS averaged over the field.
template <class T>
double crps_ensemble(std::span<const std::span<const T>> members, std::span<const T> truth) {
  if (members.empty()) throw Error("crps: ensemble needs at least one member");
  for (const auto& m : members)
    if (m.size() != truth.size()) throw ShapeError("crps: member shape differs from truth");
  std::vector<double> vals(members.size());
  double acc = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    for (std::size_t k = 0; k < members.size(); ++k) vals[k] = members[k][i];
    acc += crps_scalar(vals, static_cast<double>(truth[i]));
  }
  return acc / static_cast<double>(truth.size());
}

// ---------------------------------------------------------------------------
// Reward registry

enum class Direction { maximize, minimize };

/// A named scoring function. Normalised scores are higher-is-better.
struct RewardSpec {
  std::string name;
  Direction direction = Direction::maximize;
  bool needs_reference = true;
  double threshold = 0.0;      // csi
  double dynamic_range = 1.0;  // ssim
  std::size_t height = 0, width = 0;
  std::optional<RadialSpectrum> climatology;  // reference-free tke
};

inline const std::vector<std::string>& reward_names() {
  static const std::vector<std::string> names{"csi", "mse", "rmse", "rel_l2", "ssim", "tke", "tke_clim"};
  return names;
}

/// Build a spec with the conventional direction for `name`.
inline RewardSpec make_reward(const std::string& name, std::size_t h, std::size_t w, double threshold = 0.0,
                              double dynamic_range = 1.0) {
  RewardSpec s{name, Direction::maximize, true, threshold, dynamic_range, h, w, std::nullopt};
  if (name == "csi" || name == "ssim") return s;
  if (name == "mse" || name == "rmse" || name == "rel_l2" || name == "tke") {
    s.direction = Direction::minimize;
    return s;
  }
  if (name == "tke_clim") {
    s.direction = Direction::minimize;
    s.needs_reference = false;
    return s;
  }
  throw Error("unknown reward '" + name + "'");
}

/// Raw metric value of `candidate` under `spec`.
template <class T>
double registry_raw(const RewardSpec& spec, std::span<const T> candidate, std::optional<std::span<const T>> reference) {
  if (spec.needs_reference && !reference) throw Error("reward '" + spec.name + "' needs a reference field");
  if (!spec.needs_reference && reference) throw Error("reward '" + spec.name + "' takes no reference field");
  if (spec.name == "csi") return csi(candidate, *reference, spec.threshold).value;
  if (spec.name == "mse") return mse(candidate, *reference);
  if (spec.name == "rmse") return rmse(candidate, *reference);
  if (spec.name == "rel_l2") return rel_l2(candidate, *reference);
  if (spec.name == "ssim") return ssim(candidate, *reference, spec.dynamic_range);
  if (spec.name == "tke") return tke_error(candidate, *reference, spec.height, spec.width);
  if (spec.name == "tke_clim") {
    if (!spec.climatology) throw Error("reward 'tke_clim' has no climatological spectrum");
    return tke_error(tke_spectrum(candidate, spec.height, spec.width), *spec.climatology);
  }
  throw Error("unknown reward '" + spec.name + "'");
}

inline double normalize(const RewardSpec& spec, double raw) {
  return spec.direction == Direction::maximize ? raw : -raw;
}

/// Direction-normalised score (higher is better).
template <class T>
double registry_evaluate(const RewardSpec& spec, std::span<const T> candidate,
                         std::optional<std::span<const T>> reference = std::nullopt) {
  return normalize(spec, registry_raw(spec, candidate, reference));
}

/// Mean training spectrum, the reference for the reference-free tke reward.
template <class T>
RadialSpectrum climatological_spectrum(std::span<const Tensor<T>> fields, std::size_t h, std::size_t w) {
  if (fields.empty()) throw Error("climatology: no fields");
  RadialSpectrum acc;
  for (const auto& f : fields) {
    auto s = tke_spectrum(f.values(), h, w);
    if (acc.energy.empty()) acc.energy.assign(s.energy.size(), 0.0);
    for (std::size_t k = 0; k < s.energy.size(); ++k) acc.energy[k] += s.energy[k];
  }
  for (auto& e : acc.energy) e /= static_cast<double>(fields.size());
  for (double e : acc.energy) acc.total_energy += e;
  return acc;
}

}  // namespace sfp::metrics
