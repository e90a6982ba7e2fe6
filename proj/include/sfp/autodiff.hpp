#pragma once

// Reverse-mode differentiation over dense tensors.
//
// Every operation returns a Var whose node records its parents and a backward
// closure. A node requires a gradient iff one of its parents does; nodes that
// do not are detached immediately, so inference builds no graph.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "sfp/params.hpp"
#include "sfp/tensor.hpp"

namespace sfp {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::string param;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }
  /// Accumulated gradient after backward(); empty if none reached this node.
  const Tensor<T>& grad() const { return node_->grad; }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
Var<T> constant(Tensor<T> v) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  n->op = "constant";
  return Var<T>(std::move(n));
}

/// Free leaf that accumulates a gradient (test fixtures, injected latents).
template <class T>
Var<T> variable(Tensor<T> v) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  n->requires_grad = true;
  n->op = "variable";
  return Var<T>(std::move(n));
}

namespace detail {

template <class T>
Var<T> make_result(const char* op, Tensor<T> value, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = op;
  for (const auto& in : inputs) n->requires_grad = n->requires_grad || in.requires_grad();
  if (n->requires_grad) {
    n->parents.reserve(inputs.size());
    for (auto& in : inputs) n->parents.push_back(in.ptr());
    n->backward = std::move(backward);
  }
  return Var<T>(std::move(n));
}

template <class T>
bool wants(const Node<T>& n, std::size_t i) {
  return n.parents[i]->requires_grad;
}

template <class T>
Tensor<T>& pgrad(Node<T>& n, std::size_t i) {
  return n.parents[i]->grad_buffer();
}

[[noreturn]] inline void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

// Batch view of a channels-first field: rank 3 (C,H,W) is a batch of one.
struct Planes {
  std::size_t batch, channels, height, width;
};

inline Planes planes_of(const char* op, const Shape& s) {
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  shape_fail(op, "expected (C,H,W) or (B,C,H,W), got " + shape_str(s));
}

inline Shape with_planes(const Shape& like, Planes p) {
  if (like.size() == 4) return {p.batch, p.channels, p.height, p.width};
  return {p.channels, p.height, p.width};
}

// Periodic one-cell halo around an H x W plane, written into (H+2) x (W+2).
template <class T>
void pad_periodic(const T* src, std::size_t h, std::size_t w, T* dst) {
  const std::size_t pw = w + 2;
  for (std::size_t r = 0; r < h + 2; ++r) {
    const T* row = src + ((r + h - 1) % h) * w;
    T* d = dst + r * pw;
    d[0] = row[w - 1];
    std::copy(row, row + w, d + 1);
    d[w + 1] = row[0];
  }
}

template <class T>
void fold_periodic(const T* pad, std::size_t h, std::size_t w, T* dst) {
  const std::size_t pw = w + 2;
  for (std::size_t r = 0; r < h + 2; ++r) {
    T* row = dst + ((r + h - 1) % h) * w;
    const T* p = pad + r * pw;
    row[w - 1] += p[0];
    for (std::size_t c = 0; c < w; ++c) row[c] += p[c + 1];
    row[0] += p[w + 1];
  }
}

template <class T>
Var<T> conv3x3_impl(const char* op, const Var<T>& x, const Var<T>& w, const Var<T>& b,
                    std::size_t stride) {
  const Planes in = planes_of(op, x.shape());
  const Shape& ws = w.shape();
  if (ws.size() != 4 || ws[1] != in.channels || ws[2] != 3 || ws[3] != 3)
    shape_fail(op, "weight " + shape_str(ws) + " incompatible with input " + shape_str(x.shape()));
  const std::size_t co = ws[0];
  if (b.shape() != Shape{co}) shape_fail(op, "bias " + shape_str(b.shape()) + " expected [" + std::to_string(co) + "]");
  if (in.height % stride || in.width % stride)
    shape_fail(op, "spatial dims " + shape_str(x.shape()) + " not divisible by stride");
  const Planes out{in.batch, co, in.height / stride, in.width / stride};
  const std::size_t ci = in.channels, h = in.height, wd = in.width, ho = out.height, wo = out.width;
  const std::size_t pw = wd + 2, psize = (h + 2) * pw;

  Tensor<T> y(with_planes(x.shape(), out));
  const T* xv = x.value().data();
  const T* wv = w.value().data();
  const T* bv = b.value().data();
  T* yv = y.data();
  std::vector<T> pad(psize);
  for (std::size_t n = 0; n < in.batch; ++n) {
    for (std::size_t o = 0; o < co; ++o) std::fill_n(yv + (n * co + o) * ho * wo, ho * wo, bv[o]);
    for (std::size_t c = 0; c < ci; ++c) {
      pad_periodic(xv + (n * ci + c) * h * wd, h, wd, pad.data());
      for (std::size_t o = 0; o < co; ++o) {
        const T* k = wv + (o * ci + c) * 9;
        T* dst = yv + (n * co + o) * ho * wo;
        for (std::size_t yy = 0; yy < ho; ++yy) {
          T* orow = dst + yy * wo;
          for (std::size_t ky = 0; ky < 3; ++ky) {
            const T* prow = pad.data() + (stride * yy + ky) * pw;
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const T kv = k[ky * 3 + kx];
              const T* p = prow + kx;
              if (stride == 1) {
                for (std::size_t xx = 0; xx < wo; ++xx) orow[xx] += kv * p[xx];
              } else {
                for (std::size_t xx = 0; xx < wo; ++xx) orow[xx] += kv * p[2 * xx];
              }
            }
          }
        }
      }
    }
  }

  return make_result<T>(op, std::move(y), {x, w, b}, [=](Node<T>& self) {
    const T* g = self.grad.data();
    const T* xv2 = self.parents[0]->value.data();
    const T* wv2 = self.parents[1]->value.data();
    const bool gx_on = wants(self, 0), gw_on = wants(self, 1), gb_on = wants(self, 2);
    T* gx = gx_on ? pgrad(self, 0).data() : nullptr;
    T* gw = gw_on ? pgrad(self, 1).data() : nullptr;
    if (gb_on) {
      T* gb = pgrad(self, 2).data();
      for (std::size_t n = 0; n < in.batch; ++n)
        for (std::size_t o = 0; o < co; ++o) {
          const T* gp = g + (n * co + o) * ho * wo;
          T acc = 0;
          for (std::size_t i = 0; i < ho * wo; ++i) acc += gp[i];
          gb[o] += acc;
        }
    }
    if (!gx_on && !gw_on) return;
    std::vector<T> pad2(psize), gpad(gx_on ? psize : 0);
    for (std::size_t n = 0; n < in.batch; ++n) {
      for (std::size_t c = 0; c < ci; ++c) {
        pad_periodic(xv2 + (n * ci + c) * h * wd, h, wd, pad2.data());
        if (gx_on) std::fill(gpad.begin(), gpad.end(), T(0));
        for (std::size_t o = 0; o < co; ++o) {
          const T* k = wv2 + (o * ci + c) * 9;
          const T* gp = g + (n * co + o) * ho * wo;
          for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const T kv = k[ky * 3 + kx];
              T acc = 0;
              for (std::size_t yy = 0; yy < ho; ++yy) {
                const std::size_t off = (stride * yy + ky) * pw + kx;
                const T* p = pad2.data() + off;
                const T* grow = gp + yy * wo;
                if (stride == 1) {
                  if (gw_on)
                    for (std::size_t xx = 0; xx < wo; ++xx) acc += grow[xx] * p[xx];
                  if (gx_on) {
                    T* q = gpad.data() + off;
                    for (std::size_t xx = 0; xx < wo; ++xx) q[xx] += kv * grow[xx];
                  }
                } else {
                  if (gw_on)
                    for (std::size_t xx = 0; xx < wo; ++xx) acc += grow[xx] * p[2 * xx];
                  if (gx_on) {
                    T* q = gpad.data() + off;
                    for (std::size_t xx = 0; xx < wo; ++xx) q[2 * xx] += kv * grow[xx];
                  }
                }
              }
              if (gw_on) gw[(o * ci + c) * 9 + ky * 3 + kx] += acc;
            }
        }
        if (gx_on) fold_periodic(gpad.data(), h, wd, gx + (n * ci + c) * h * wd);
      }
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward operations

/// x[..., in] * W[out, in]^T + b[out].
template <class T>
Var<T> dense(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.empty() || ws.size() != 2 || ws[1] != xs.back())
    detail::shape_fail("dense", "input " + shape_str(xs) + " vs weight " + shape_str(ws));
  const std::size_t in = ws[1], out = ws[0], rows = x.size() / in;
  if (b.shape() != Shape{out}) detail::shape_fail("dense", "bias " + shape_str(b.shape()));
  Shape ys = xs;
  ys.back() = out;
  Tensor<T> y(ys);
  const T *xv = x.value().data(), *wv = w.value().data(), *bv = b.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      T acc = bv[o];
      for (std::size_t i = 0; i < in; ++i) acc += xv[r * in + i] * wv[o * in + i];
      y[r * out + o] = acc;
    }
  return detail::make_result<T>("dense", std::move(y), {x, w, b}, [=](Node<T>& self) {
    const T* g = self.grad.data();
    const T* xv2 = self.parents[0]->value.data();
    const T* wv2 = self.parents[1]->value.data();
    if (detail::wants(self, 0)) {
      T* gx = detail::pgrad(self, 0).data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out; ++o)
          for (std::size_t i = 0; i < in; ++i) gx[r * in + i] += g[r * out + o] * wv2[o * in + i];
    }
    if (detail::wants(self, 1)) {
      T* gw = detail::pgrad(self, 1).data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out; ++o)
          for (std::size_t i = 0; i < in; ++i) gw[o * in + i] += g[r * out + o] * xv2[r * in + i];
    }
    if (detail::wants(self, 2)) {
      T* gb = detail::pgrad(self, 2).data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out; ++o) gb[o] += g[r * out + o];
    }
  });
}

/// 3x3 convolution with periodic padding, stride 1. Weight [Co, Ci, 3, 3].
template <class T>
Var<T> conv3x3(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return detail::conv3x3_impl("conv2d-3x3", x, w, b, 1);
}

/// 3x3 convolution with periodic padding and stride 2 (halves H and W).
template <class T>
Var<T> conv_down2(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return detail::conv3x3_impl("conv2d-strided-down2", x, w, b, 2);
}

/// Nearest-neighbour upsampling by two in both spatial axes.
template <class T>
Var<T> upsample2(const Var<T>& x) {
  const auto p = detail::planes_of("upsample-nearest-x2", x.shape());
  const detail::Planes q{p.batch, p.channels, 2 * p.height, 2 * p.width};
  Tensor<T> y(detail::with_planes(x.shape(), q));
  const std::size_t planes = p.batch * p.channels, h = p.height, w = p.width;
  const T* xv = x.value().data();
  for (std::size_t n = 0; n < planes; ++n)
    for (std::size_t r = 0; r < 2 * h; ++r)
      for (std::size_t c = 0; c < 2 * w; ++c) y[(n * 2 * h + r) * 2 * w + c] = xv[(n * h + r / 2) * w + c / 2];
  return detail::make_result<T>("upsample-nearest-x2", std::move(y), {x}, [=](Node<T>& self) {
    T* gx = detail::pgrad(self, 0).data();
    const T* g = self.grad.data();
    for (std::size_t n = 0; n < planes; ++n)
      for (std::size_t r = 0; r < 2 * h; ++r)
        for (std::size_t c = 0; c < 2 * w; ++c) gx[(n * h + r / 2) * w + c / 2] += g[(n * 2 * h + r) * 2 * w + c];
  });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope = T(0.1)) {
  Tensor<T> y(x.shape());
  const T* xv = x.value().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > T(0) ? xv[i] : slope * xv[i];
  return detail::make_result<T>("leaky-relu", std::move(y), {x}, [slope](Node<T>& self) {
    T* gx = detail::pgrad(self, 0).data();
    const T* xv2 = self.parents[0]->value.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * (xv2[i] > T(0) ? T(1) : slope);
  });
}

/// Softmax over the last axis.
template <class T>
Var<T> softmax_last(const Var<T>& x) {
  if (x.shape().empty()) detail::shape_fail("softmax-lastaxis", "scalar input");
  const std::size_t k = x.shape().back(), rows = x.size() / k;
  Tensor<T> y(x.shape());
  const T* xv = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv + r * k;
    T* out = y.data() + r * k;
    const T mx = *std::max_element(row, row + k);
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) s += (out[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j) out[j] /= s;
  }
  return detail::make_result<T>("softmax-lastaxis", std::move(y), {x}, [k, rows](Node<T>& self) {
    T* gx = detail::pgrad(self, 0).data();
    const T* yv = self.value.data();
    const T* g = self.grad.data();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * yv[r * k + j];
      for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += yv[r * k + j] * (g[r * k + j] - dot);
    }
  });
}

namespace detail {
template <class T>
void same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) shape_fail(op, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace detail

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::same_shape("add", a, b);
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
  return detail::make_result<T>("add", std::move(y), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (detail::wants(self, p)) {
        T* g = detail::pgrad(self, p).data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::same_shape("sub", a, b);
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] - b.value()[i];
  return detail::make_result<T>("sub", std::move(y), {a, b}, [](Node<T>& self) {
    if (detail::wants(self, 0)) {
      T* g = detail::pgrad(self, 0).data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants(self, 1)) {
      T* g = detail::pgrad(self, 1).data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::same_shape("mul", a, b);
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  return detail::make_result<T>("mul", std::move(y), {a, b}, [](Node<T>& self) {
    const T* av = self.parents[0]->value.data();
    const T* bv = self.parents[1]->value.data();
    if (detail::wants(self, 0)) {
      T* g = detail::pgrad(self, 0).data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (detail::wants(self, 1)) {
      T* g = detail::pgrad(self, 1).data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

/// Multiply by a constant scalar.
template <class T>
Var<T> scale(const Var<T>& x, T s) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.value()[i] * s;
  return detail::make_result<T>("scale", std::move(y), {x}, [s](Node<T>& self) {
    T* g = detail::pgrad(self, 0).data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
  });
}

/// Concatenate along the channel axis (axis 1 of B,C,H,W; axis 0 of C,H,W).
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const auto pa = detail::planes_of("concat-channels", a.shape());
  const auto pb = detail::planes_of("concat-channels", b.shape());
  if (a.shape().size() != b.shape().size() || pa.batch != pb.batch || pa.height != pb.height ||
      pa.width != pb.width)
    detail::shape_fail("concat-channels", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t plane = pa.height * pa.width, sa = pa.channels * plane, sb = pb.channels * plane;
  detail::Planes q = pa;
  q.channels = pa.channels + pb.channels;
  Tensor<T> y(detail::with_planes(a.shape(), q));
  for (std::size_t n = 0; n < pa.batch; ++n) {
    std::copy_n(a.value().data() + n * sa, sa, y.data() + n * (sa + sb));
    std::copy_n(b.value().data() + n * sb, sb, y.data() + n * (sa + sb) + sa);
  }
  return detail::make_result<T>("concat-channels", std::move(y), {a, b}, [=](Node<T>& self) {
    const T* g = self.grad.data();
    for (std::size_t n = 0; n < pa.batch; ++n) {
      if (detail::wants(self, 0)) {
        T* ga = detail::pgrad(self, 0).data() + n * sa;
        for (std::size_t i = 0; i < sa; ++i) ga[i] += g[n * (sa + sb) + i];
      }
      if (detail::wants(self, 1)) {
        T* gb = detail::pgrad(self, 1).data() + n * sb;
        for (std::size_t i = 0; i < sb; ++i) gb[i] += g[n * (sa + sb) + sa + i];
      }
    }
  });
}

/// mean((a - b)^2) as a scalar.
template <class T>
Var<T> mse_reduce(const Var<T>& a, const Var<T>& b) {
  detail::same_shape("mse-reduce", a, b);
  const std::size_t n = a.size();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  Tensor<T> y(Shape{}, std::vector<T>{acc / static_cast<T>(n)});
  return detail::make_result<T>("mse-reduce", std::move(y), {a, b}, [n](Node<T>& self) {
    const T s = self.grad[0] * T(2) / static_cast<T>(n);
    const T* av = self.parents[0]->value.data();
    const T* bv = self.parents[1]->value.data();
    if (detail::wants(self, 0)) {
      T* g = detail::pgrad(self, 0).data();
      for (std::size_t i = 0; i < n; ++i) g[i] += s * (av[i] - bv[i]);
    }
    if (detail::wants(self, 1)) {
      T* g = detail::pgrad(self, 1).data();
      for (std::size_t i = 0; i < n; ++i) g[i] -= s * (av[i] - bv[i]);
    }
  });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().values()) acc += v;
  return detail::make_result<T>("sum", Tensor<T>(Shape{}, std::vector<T>{acc}), {x}, [](Node<T>& self) {
    T* g = detail::pgrad(self, 0).data();
    const std::size_t n = self.parents[0]->value.size();
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

/// x[..., K] times M[K, P] -> [..., P].
template <class T>
Var<T> matmul_last(const Var<T>& x, const Var<T>& m) {
  const Shape& ms = m.shape();
  if (x.shape().empty() || ms.size() != 2 || ms[0] != x.shape().back())
    detail::shape_fail("matmul", shape_str(x.shape()) + " vs " + shape_str(ms));
  const std::size_t k = ms[0], p = ms[1], rows = x.size() / k;
  Shape ys = x.shape();
  ys.back() = p;
  Tensor<T> y(ys);
  const T *xv = x.value().data(), *mv = m.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* out = y.data() + r * p;
    for (std::size_t j = 0; j < k; ++j) {
      const T a = xv[r * k + j];
      const T* mrow = mv + j * p;
      for (std::size_t q = 0; q < p; ++q) out[q] += a * mrow[q];
    }
  }
  return detail::make_result<T>("matmul", std::move(y), {x, m}, [=](Node<T>& self) {
    const T* g = self.grad.data();
    const T* xv2 = self.parents[0]->value.data();
    const T* mv2 = self.parents[1]->value.data();
    if (detail::wants(self, 0)) {
      T* gx = detail::pgrad(self, 0).data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < k; ++j) {
          T acc = 0;
          for (std::size_t q = 0; q < p; ++q) acc += g[r * p + q] * mv2[j * p + q];
          gx[r * k + j] += acc;
        }
    }
    if (detail::wants(self, 1)) {
      T* gm = detail::pgrad(self, 1).data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < k; ++j) {
          const T a = xv2[r * k + j];
          for (std::size_t q = 0; q < p; ++q) gm[j * p + q] += a * g[r * p + q];
        }
    }
  });
}

/// Rows of table[N, d] selected by index -> [n, d]. Gradients scatter-add into the table.
template <class T>
Var<T> gather_rows(const Var<T>& table, std::vector<int> idx) {
  const Shape& ts = table.shape();
  if (ts.size() != 2) detail::shape_fail("gather", "table " + shape_str(ts));
  const std::size_t n = ts[0], d = ts[1];
  Tensor<T> y(Shape{idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= n)
      detail::shape_fail("gather", "index " + std::to_string(idx[r]) + " out of range " + std::to_string(n));
    std::copy_n(table.value().data() + idx[r] * d, d, y.data() + r * d);
  }
  return detail::make_result<T>("gather", std::move(y), {table}, [idx = std::move(idx), d](Node<T>& self) {
    T* g = detail::pgrad(self, 0).data();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) g[idx[r] * d + j] += self.grad[r * d + j];
  });
}

/// Identity on values, zero gradient to every upstream node.
template <class T>
Var<T> stop_gradient(const Var<T>& x) {
  auto n = std::make_shared<Node<T>>();
  n->value = x.value();
  n->op = "stop-gradient";
  return Var<T>(std::move(n));
}

/// Value of `quantized`, gradient copied unchanged to `continuous`.
template <class T>
Var<T> straight_through(const Var<T>& continuous, const Var<T>& quantized) {
  detail::same_shape("straight-through", continuous, quantized);
  return detail::make_result<T>("straight-through", quantized.value(), {continuous}, [](Node<T>& self) {
    T* g = detail::pgrad(self, 0).data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape s) {
  Tensor<T> y = x.value().reshaped(std::move(s));
  return detail::make_result<T>("reshape", std::move(y), {x}, [](Node<T>& self) {
    T* g = detail::pgrad(self, 0).data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

namespace detail {
// (B, A, C) <-> (B, C, A) transpose of the trailing two logical axes.
template <class T>
Var<T> swap_inner(const char* op, const Var<T>& x, std::size_t batch, std::size_t a, std::size_t c,
                  Shape out_shape) {
  Tensor<T> y(std::move(out_shape));
  const T* xv = x.value().data();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < c; ++j) y[(n * c + j) * a + i] = xv[(n * a + i) * c + j];
  return make_result<T>(op, std::move(y), {x}, [=](Node<T>& self) {
    T* g = pgrad(self, 0).data();
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t i = 0; i < a; ++i)
        for (std::size_t j = 0; j < c; ++j) g[(n * a + i) * c + j] += self.grad[(n * c + j) * a + i];
  });
}
}  // namespace detail

/// (B, C, H, W) -> (B, H, W, C).
template <class T>
Var<T> to_channels_last(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 4) detail::shape_fail("to-channels-last", shape_str(s));
  return detail::swap_inner("to-channels-last", x, s[0], s[1], s[2] * s[3], Shape{s[0], s[2], s[3], s[1]});
}

/// (B, H, W, C) -> (B, C, H, W).
template <class T>
Var<T> to_channels_first(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 4) detail::shape_fail("to-channels-first", shape_str(s));
  return detail::swap_inner("to-channels-first", x, s[0], s[1] * s[2], s[3], Shape{s[0], s[3], s[1], s[2]});
}

// ---------------------------------------------------------------------------
// Backward pass

namespace detail {
template <class T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}
}  // namespace detail

/// Accumulate d(loss)/d(node) into every reachable node that requires a gradient.
/// Throws if the loss is not a scalar or if an op produces a non-finite gradient.
template <class T>
void backward(const Var<T>& loss) {
  if (loss.size() != 1) throw Error("grad: loss must be a scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  auto order = detail::topo_order(loss.node());
  for (Node<T>* n : order) n->grad = Tensor<T>();
  loss.node()->grad_buffer()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->backward || n->grad.empty()) continue;
    n->backward(*n);
    for (const auto& p : n->parents)
      if (p->requires_grad && !p->grad.all_finite())
        throw Error(std::string("grad: non-finite gradient produced by op '") + n->op + "'");
  }
}

/// Binds parameter-store entries to graph leaves. Frozen entries become
/// leaves that never receive a gradient.
template <class T>
class Tape {
 public:
  explicit Tape(const ParameterStore<T>& store) : store_(&store) {}

  Var<T> param(const std::string& name) {
    if (auto it = leaves_.find(name); it != leaves_.end()) return it->second;
    auto n = std::make_shared<Node<T>>();
    n->value = store_->get(name);
    n->requires_grad = store_->trainable(name);
    n->op = "param";
    n->param = name;
    Var<T> v(std::move(n));
    leaves_.emplace(name, v);
    return v;
  }

  /// Gradient of `loss` for every store entry; zeros for frozen or unreached ones.
  std::map<std::string, Tensor<T>> grad(const Var<T>& loss) {
    for (auto& [_, v] : leaves_) v.node()->grad = Tensor<T>();  // leaves off this loss's graph keep no stale grads
    sfp::backward(loss);
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, e] : *store_) {
      auto it = leaves_.find(name);
      if (e.trainable && it != leaves_.end() && !it->second.grad().empty())
        out.emplace(name, it->second.grad());
      else
        out.emplace(name, Tensor<T>(e.value.shape()));
    }
    return out;
  }

  const ParameterStore<T>& store() const { return *store_; }

 private:
  const ParameterStore<T>* store_;
  std::unordered_map<std::string, Var<T>> leaves_;
};

template <class T>
std::map<std::string, Tensor<T>> grad(const Var<T>& loss, Tape<T>& tape) {
  return tape.grad(loss);
}

}  // namespace sfp
