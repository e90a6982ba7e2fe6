#pragma once

// Synthetic ground truth: a periodic advection-diffusion field stirred by a
// fixed divergence-free flow, with randomly injected Gaussian hotspots as the
// extreme events, plus the windowing that turns it into forecasting pairs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sfp/fft.hpp"
#include "sfp/tensor.hpp"

namespace sfp {

struct SimConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  double diffusivity = 0.05;         // grid units^2 per step
  double velocity_amplitude = 0.5;   // max speed, grid units per step
  double event_rate = 0.2;           // expected hotspots per step
  double amplitude_min = 1.0;
  double amplitude_max = 2.0;
  double radius = 1.5;               // Gaussian sigma in grid units
  double damping = 0.02;             // linear relaxation per step; 0 conserves the mean
  std::size_t steps = 2000;
  std::size_t burn_in = 100;
  std::uint64_t seed = 0;
  std::vector<double> initial;       // optional H*W initial field, zeros if empty
  std::vector<double> velocity;      // optional 2*H*W (u then v), sampled if empty

  void validate() const {
    if (height < 8 || width < 8 || !fft::is_pow2(height) || !fft::is_pow2(width))
      throw Error("sim config: grid must be powers of two >= 8");
    if (event_rate < 0) throw Error("sim config: event rate must be >= 0");
    if (diffusivity < 0 || damping < 0) throw Error("sim config: diffusivity and damping must be >= 0");
    if (radius >= static_cast<double>(std::min(height, width)) / 4.0)
      throw Error("sim config: hotspot radius must be < min(H,W)/4");
    if (amplitude_max < amplitude_min) throw Error("sim config: amplitude range reversed");
    if (steps < 1) throw Error("sim config: steps must be >= 1");
    if (!initial.empty() && initial.size() != height * width) throw Error("sim config: initial field size");
    if (!velocity.empty() && velocity.size() != 2 * height * width) throw Error("sim config: velocity size");
  }
};

/// T x H x W frames in 64-bit.
struct FieldSequence {
  Tensor<double> frames;

  std::size_t length() const { return frames.dim(0); }
  std::size_t height() const { return frames.dim(1); }
  std::size_t width() const { return frames.dim(2); }
  std::span<const double> frame(std::size_t t) const {
    const std::size_t n = height() * width();
    return {frames.data() + t * n, n};
  }
};

namespace spectral {

struct Wavenumbers {
  std::vector<double> kx, ky;  // radians per grid unit
};

inline Wavenumbers wavenumbers(std::size_t h, std::size_t w) {
  Wavenumbers k;
  for (std::size_t c = 0; c < w; ++c) k.kx.push_back(2.0 * std::numbers::pi * fft::wavenumber(c, w) / static_cast<double>(w));
  for (std::size_t r = 0; r < h; ++r) k.ky.push_back(2.0 * std::numbers::pi * fft::wavenumber(r, h) / static_cast<double>(h));
  return k;
}

/// Spectral partial derivative along x (columns) or y (rows). Nyquist modes are dropped.
inline std::vector<double> derivative(std::span<const double> f, std::size_t h, std::size_t w, bool along_x) {
  auto g = fft::forward(f, h, w);
  const auto k = wavenumbers(h, w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const bool nyq = along_x ? (c == w / 2) : (r == h / 2);
      const double kk = along_x ? k.kx[c] : k.ky[r];
      g(r, c) = nyq ? fft::cplx{} : g(r, c) * fft::cplx(0.0, kk);
    }
  return fft::inverse_real(std::move(g));
}

}  // namespace spectral

/// Velocity (u, v) = (d psi/dy, -d psi/dx) of a streamfunction, as 2 x H x W.
inline Tensor<double> velocity_from_streamfunction(std::span<const double> psi, std::size_t h, std::size_t w) {
  auto u = spectral::derivative(psi, h, w, false);
  auto v = spectral::derivative(psi, h, w, true);
  Tensor<double> out(Shape{2, h, w});
  for (std::size_t i = 0; i < h * w; ++i) {
    out[i] = u[i];
    out[h * w + i] = -v[i];
  }
  return out;
}

/// Random band-limited (|k| <= 4) divergence-free flow scaled to the given peak speed.
inline Tensor<double> make_velocity(std::uint64_t seed, std::size_t h, std::size_t w, double amplitude = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> psi(h * w, 0.0);
  for (int ky = -4; ky <= 4; ++ky)
    for (int kx = 0; kx <= 4; ++kx) {
      if (kx * kx + ky * ky > 16 || (kx == 0 && ky <= 0)) continue;  // half plane, no mean
      const double a = normal(rng), b = normal(rng);
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
          const double ph = 2.0 * std::numbers::pi *
                            (kx * static_cast<double>(c) / static_cast<double>(w) + ky * static_cast<double>(r) / static_cast<double>(h));
          psi[r * w + c] += a * std::cos(ph) + b * std::sin(ph);
        }
    }
  auto vel = velocity_from_streamfunction(psi, h, w);
  double peak = 0.0;
  for (std::size_t i = 0; i < h * w; ++i) peak = std::max(peak, std::hypot(vel[i], vel[h * w + i]));
  const double s = peak > 0 ? amplitude / peak : 0.0;
  for (auto& x : vel.storage()) x *= s;
  return vel;
}

/// Spectral divergence du/dx + dv/dy of a 2 x H x W velocity.
inline std::vector<double> divergence(const Tensor<double>& vel) {
  const std::size_t h = vel.dim(1), w = vel.dim(2), n = h * w;
  auto dudx = spectral::derivative({vel.data(), n}, h, w, true);
  auto dvdy = spectral::derivative({vel.data() + n, n}, h, w, false);
  for (std::size_t i = 0; i < n; ++i) dudx[i] += dvdy[i];
  return dudx;
}

class SimulationError : public Error {
 public:
  using Error::Error;
};

namespace detail {

// -d(uq)/dx - d(vq)/dy evaluated spectrally, so its mean is exactly zero.
inline std::vector<double> advection_tendency(const std::vector<double>& q, const Tensor<double>& vel,
                                              const spectral::Wavenumbers& k, std::size_t h, std::size_t w) {
  const std::size_t n = h * w;
  std::vector<double> fx(n), fy(n);
  for (std::size_t i = 0; i < n; ++i) {
    fx[i] = vel[i] * q[i];
    fy[i] = vel[n + i] * q[i];
  }
  auto gx = fft::forward(fx, h, w);
  auto gy = fft::forward(fy, h, w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double kx = c == w / 2 ? 0.0 : k.kx[c];
      const double ky = r == h / 2 ? 0.0 : k.ky[r];
      gx(r, c) = -(gx(r, c) * fft::cplx(0.0, kx) + gy(r, c) * fft::cplx(0.0, ky));
    }
  return fft::inverse_real(std::move(gx));
}

inline void add_hotspot(std::vector<double>& q, std::size_t h, std::size_t w, double cy, double cx, double amp,
                        double sigma) {
  for (std::size_t r = 0; r < h; ++r) {
    double dy = std::abs(static_cast<double>(r) - cy);
    dy = std::min(dy, static_cast<double>(h) - dy);
    for (std::size_t c = 0; c < w; ++c) {
      double dx = std::abs(static_cast<double>(c) - cx);
      dx = std::min(dx, static_cast<double>(w) - dx);
      q[r * w + c] += amp * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
    }
  }
}

}  // namespace detail

/// Integrate the configured dynamics. Each step: RK4 advection, implicit
/// diffusion and damping in spectral space, then Poisson-many hotspots.
/// Burn-in frames are discarded; the result has cfg.steps frames.
inline FieldSequence simulate(const SimConfig& cfg) {
  cfg.validate();
  const std::size_t h = cfg.height, w = cfg.width, n = h * w;
  const Tensor<double> vel = cfg.velocity.empty()
                                 ? make_velocity(cfg.seed * 0x9E3779B97F4A7C15ull + 1, h, w, cfg.velocity_amplitude)
                                 : Tensor<double>(Shape{2, h, w}, cfg.velocity);
  const auto k = spectral::wavenumbers(h, w);
  std::mt19937_64 rng(cfg.seed);
  std::poisson_distribution<int> events(cfg.event_rate > 0 ? cfg.event_rate : 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const bool moving = std::any_of(vel.storage().begin(), vel.storage().end(), [](double v) { return v != 0.0; });

  std::vector<double> q = cfg.initial.empty() ? std::vector<double>(n, 0.0) : cfg.initial;
  Tensor<double> frames(Shape{cfg.steps, h, w});
  const std::size_t total = cfg.burn_in + cfg.steps;
  std::vector<double> tmp(n);
  for (std::size_t step = 0; step < total; ++step) {
    if (step >= cfg.burn_in) std::copy(q.begin(), q.end(), frames.data() + (step - cfg.burn_in) * n);
    if (step + 1 == total) break;

    if (moving) {
      auto k1 = detail::advection_tendency(q, vel, k, h, w);
      for (std::size_t i = 0; i < n; ++i) tmp[i] = q[i] + 0.5 * k1[i];
      auto k2 = detail::advection_tendency(tmp, vel, k, h, w);
      for (std::size_t i = 0; i < n; ++i) tmp[i] = q[i] + 0.5 * k2[i];
      auto k3 = detail::advection_tendency(tmp, vel, k, h, w);
      for (std::size_t i = 0; i < n; ++i) tmp[i] = q[i] + k3[i];
      auto k4 = detail::advection_tendency(tmp, vel, k, h, w);
      for (std::size_t i = 0; i < n; ++i) q[i] += (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0;
    }
    if (cfg.diffusivity > 0 || cfg.damping > 0) {
      auto g = fft::forward(q, h, w);
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
          g(r, c) /= 1.0 + cfg.damping + cfg.diffusivity * (k.kx[c] * k.kx[c] + k.ky[r] * k.ky[r]);
      q = fft::inverse_real(std::move(g));
    }
    if (cfg.event_rate > 0) {
      const int count = events(rng);
      for (int e = 0; e < count; ++e) {
        const double cy = unit(rng) * static_cast<double>(h);
        const double cx = unit(rng) * static_cast<double>(w);
        const double amp = cfg.amplitude_min + unit(rng) * (cfg.amplitude_max - cfg.amplitude_min);
        detail::add_hotspot(q, h, w, cy, cx, amp, cfg.radius);
      }
    }
    for (double v : q)
      if (!std::isfinite(v) || std::abs(v) > 1e6)
        throw SimulationError("simulate: field blew up at step " + std::to_string(step) +
                              "; use a smaller velocity amplitude");
  }
  return FieldSequence{std::move(frames)};
}

// ---------------------------------------------------------------------------
// Forecasting windows

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw Error("unknown split '" + s + "'");
}

/// Supervised pairs (s_t, y_{t+1}): T_in stacked frames and the next frame.
template <class T>
struct WindowedDataset {
  Split split = Split::train;
  double fraction = 1.0;
  std::size_t t_in = 0, height = 0, width = 0;
  std::vector<std::size_t> starts;  // window start frame in the source sequence
  std::vector<Tensor<T>> inputs;    // T_in x H x W
  std::vector<Tensor<T>> targets;   // H x W

  std::size_t size() const { return inputs.size(); }
};

struct WindowSplits {
  double train = 0.7, val = 0.15, test = 0.15;
};

/// Window counts per split for a sequence of `frames` frames. Windows are
/// assigned chronologically by start index; the remainder is dropped.
inline std::array<std::size_t, 3> split_counts(std::size_t frames, std::size_t t_in, const WindowSplits& f) {
  if (t_in < 1) throw Error("window: T_in must be >= 1");
  if (frames < t_in + 1) throw Error("window: sequence of " + std::to_string(frames) + " frames is shorter than T_in+1");
  const std::size_t n = frames - t_in;
  auto part = [n](double x) { return static_cast<std::size_t>(std::floor(x * static_cast<double>(n) + 1e-9)); };
  return {part(f.train), part(f.val), part(f.test)};
}

template <class T>
WindowedDataset<T> make_windows(const Tensor<double>& frames, std::size_t first_start, std::size_t count,
                                std::size_t t_in, Split split, double fraction) {
  WindowedDataset<T> ds;
  ds.split = split;
  ds.fraction = fraction;
  ds.t_in = t_in;
  ds.height = frames.dim(1);
  ds.width = frames.dim(2);
  const std::size_t plane = ds.height * ds.width;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t s = first_start + i;
    if (s + t_in >= frames.dim(0)) throw Error("window: window overruns the sequence");
    const double* base = frames.data() + s * plane;
    ds.starts.push_back(s);
    ds.inputs.emplace_back(Shape{t_in, ds.height, ds.width}, std::vector<T>(base, base + t_in * plane));
    ds.targets.emplace_back(Shape{ds.height, ds.width},
                            std::vector<T>(base + t_in * plane, base + (t_in + 1) * plane));
  }
  return ds;
}

/// Keep the first ceil(fraction * N) windows.
template <class T>
WindowedDataset<T> apply_scarcity(WindowedDataset<T> ds, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error("window: scarcity fraction must be in (0, 1]");
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(ds.size()) - 1e-9));
  ds.starts.resize(keep);
  ds.inputs.resize(keep);
  ds.targets.resize(keep);
  ds.fraction = fraction;
  return ds;
}

template <class T>
struct DatasetSplits {
  WindowedDataset<T> train, val, test;
};

/// Chronological train/val/test windows; scarcity trims only the training split.
template <class T>
DatasetSplits<T> window(const FieldSequence& seq, std::size_t t_in, const WindowSplits& fracs,
                        double scarcity_fraction = 1.0) {
  const auto counts = split_counts(seq.length(), t_in, fracs);
  DatasetSplits<T> out;
  out.train = apply_scarcity(make_windows<T>(seq.frames, 0, counts[0], t_in, Split::train, 1.0), scarcity_fraction);
  out.val = make_windows<T>(seq.frames, counts[0], counts[1], t_in, Split::val, 1.0);
  out.test = make_windows<T>(seq.frames, counts[0] + counts[1], counts[2], t_in, Split::test, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Extreme events

struct EventMask {
  std::vector<std::uint8_t> mask;
  double threshold = 0;
  std::size_t count = 0;
};

template <class T>
EventMask event_mask(std::span<const T> field, double threshold) {
  EventMask m{std::vector<std::uint8_t>(field.size()), threshold, 0};
  for (std::size_t i = 0; i < field.size(); ++i) {
    m.mask[i] = static_cast<double>(field[i]) >= threshold;
    m.count += m.mask[i];
  }
  return m;
}

/// Nearest-rank percentile: the ceil(p*n)-th smallest value, p in (0, 1].
template <class T>
double percentile(std::span<const T> values, double p) {
  if (values.empty()) throw Error("percentile: no values");
  std::vector<T> v(values.begin(), values.end());
  const std::size_t rank =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(p * static_cast<double>(v.size()) - 1e-9)), 1, v.size());
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(rank - 1), v.end());
  return static_cast<double>(v[rank - 1]);
}

}  // namespace sfp
