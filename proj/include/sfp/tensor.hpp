#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sfp {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible operand shapes. The message names the operation and the dims.
class ShapeError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major tensor of floating values.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("tensor: " + std::to_string(data_.size()) + " values for shape " +
                       shape_str(shape_));
  }
  Tensor(Shape shape, std::initializer_list<T> data) : Tensor(std::move(shape), std::vector<T>(data)) {}

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != size())
      throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) throw ShapeError("at: rank mismatch for " + shape_str(shape_));
    std::size_t off = 0, k = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[k]) throw ShapeError("at: index out of range for " + shape_str(shape_));
      off = off * shape_[k++] + i;
    }
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Slice `count` consecutive entries along the leading axis.
template <class T>
Tensor<T> slice_leading(const Tensor<T>& t, std::size_t begin, std::size_t count) {
  if (t.rank() == 0 || begin + count > t.dim(0))
    throw ShapeError("slice_leading: range out of bounds for " + shape_str(t.shape()));
  Shape s = t.shape();
  s[0] = count;
  const std::size_t inner = t.size() / t.dim(0);
  std::vector<T> out(t.data() + begin * inner, t.data() + (begin + count) * inner);
  return Tensor<T>(std::move(s), std::move(out));
}

/// Stack equally shaped tensors along a new leading axis.
template <class T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
  if (items.empty()) throw ShapeError("stack: no items");
  Shape s = items.front().shape();
  std::vector<T> out;
  out.reserve(items.size() * items.front().size());
  for (const auto& it : items) {
    if (it.shape() != s)
      throw ShapeError("stack: " + shape_str(it.shape()) + " vs " + shape_str(s));
    out.insert(out.end(), it.storage().begin(), it.storage().end());
  }
  s.insert(s.begin(), items.size());
  return Tensor<T>(std::move(s), std::move(out));
}

template <class T>
T mean_of(std::span<const T> v) {
  long double acc = 0;
  for (T x : v) acc += x;
  return v.empty() ? T(0) : static_cast<T>(acc / static_cast<long double>(v.size()));
}

template <class T>
T variance_of(std::span<const T> v) {
  if (v.empty()) return T(0);
  const long double m = mean_of(v);
  long double acc = 0;
  for (T x : v) acc += (x - m) * (x - m);
  return static_cast<T>(acc / static_cast<long double>(v.size()));
}

}  // namespace sfp
