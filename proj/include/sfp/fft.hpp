#pragma once

#include <bit>
#include <complex>
#include <numbers>
#include <vector>

#include "sfp/tensor.hpp"

namespace sfp::fft {

using cplx = std::complex<double>;

inline bool is_pow2(std::size_t n) { return n != 0 && std::has_single_bit(n); }

/// In-place iterative radix-2 transform of a strided sequence.
/// Forward uses exp(-i...), inverse exp(+i...) without 1/n scaling.
inline void transform(cplx* data, std::size_t n, std::size_t stride, bool inverse) {
  if (!is_pow2(n)) throw Error("fft: length " + std::to_string(n) + " is not a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(data[i * stride], data[j * stride]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    for (std::size_t i = 0; i < n; i += len)
      for (std::size_t k = 0; k < len / 2; ++k) {
        const cplx w = std::polar(1.0, ang * static_cast<double>(k));
        cplx& a = data[(i + k) * stride];
        cplx& b = data[(i + k + len / 2) * stride];
        const cplx t = b * w;
        b = a - t;
        a += t;
      }
  }
}

/// Row-major H x W complex grid.
struct Grid {
  std::size_t height = 0, width = 0;
  std::vector<cplx> data;

  cplx& operator()(std::size_t r, std::size_t c) { return data[r * width + c]; }
  const cplx& operator()(std::size_t r, std::size_t c) const { return data[r * width + c]; }
};

inline void transform2d(Grid& g, bool inverse) {
  for (std::size_t r = 0; r < g.height; ++r) transform(g.data.data() + r * g.width, g.width, 1, inverse);
  for (std::size_t c = 0; c < g.width; ++c) transform(g.data.data() + c, g.height, g.width, inverse);
  if (inverse) {
    const double s = 1.0 / static_cast<double>(g.height * g.width);
    for (auto& v : g.data) v *= s;
  }
}

inline Grid forward(std::span<const double> field, std::size_t h, std::size_t w) {
  Grid g{h, w, std::vector<cplx>(field.begin(), field.end())};
  transform2d(g, false);
  return g;
}

/// Real part of the inverse transform.
inline std::vector<double> inverse_real(Grid g) {
  transform2d(g, true);
  std::vector<double> out(g.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = g.data[i].real();
  return out;
}

/// Signed integer wavenumber of index i on an axis of length n.
inline double wavenumber(std::size_t i, std::size_t n) {
  return i <= n / 2 ? static_cast<double>(i) : static_cast<double>(i) - static_cast<double>(n);
}

}  // namespace sfp::fft
