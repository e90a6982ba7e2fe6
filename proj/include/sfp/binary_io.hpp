#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include "sfp/tensor.hpp"

namespace sfp {

/// Malformed or unreadable file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

namespace io {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline std::size_t dtype_bytes(DType d) { return d == DType::f32 ? 4 : 8; }

/// Little-endian byte sink.
class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <class U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  template <class T>
  void floats(std::span<const T> v) {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    buf_.reserve(buf_.size() + v.size() * sizeof(T));
    for (T x : v) uint(std::bit_cast<Bits>(x));
  }
  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Little-endian byte source; every read past the end raises "truncated".
class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size, std::string what)
      : p_(data), end_(data + size), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (static_cast<std::size_t>(end_ - p_) < n) throw FormatError(what_ + ": truncated");
  }
  template <class U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p_[i]) << (8 * i);
    p_ += sizeof(U);
    return v;
  }
  std::uint8_t u8() { return uint<std::uint8_t>(); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(p_), n);
    p_ += n;
    return s;
  }
  template <class T>
  std::vector<T> floats(std::size_t n) {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    need(n * sizeof(T));
    std::vector<T> out(n);
    for (auto& x : out) x = std::bit_cast<T>(uint<Bits>());
    return out;
  }
  std::size_t remaining() const { return static_cast<std::size_t>(end_ - p_); }
  const std::uint8_t* position() const { return p_; }

 private:
  const std::uint8_t* p_;
  const std::uint8_t* end_;
  std::string what_;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to '" + path + "'");
}

// Shared tensor block layout: u8 dtype, u8 rank, rank x u64 dims, payload.
template <class T>
void put_block(Writer& w, const Tensor<T>& t) {
  if (t.rank() < 1 || t.rank() > 8) throw FormatError("tensor rank must be in 1..8, got " + std::to_string(t.rank()));
  w.u8(static_cast<std::uint8_t>(dtype_of<T>()));
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) w.uint<std::uint64_t>(d);
  w.floats<T>(t.values());
}

template <class T>
Tensor<T> get_block(Reader& r, const std::string& what) {
  const auto tag = r.u8();
  if (tag != 1 && tag != 2) throw FormatError(what + ": unknown dtype tag " + std::to_string(tag));
  const std::size_t rank = r.u8();
  if (rank < 1 || rank > 8) throw FormatError(what + ": rank " + std::to_string(rank) + " outside 1..8");
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(r.uint<std::uint64_t>());
  const std::size_t n = shape_numel(shape);
  if (static_cast<DType>(tag) == DType::f32) {
    auto v = r.floats<float>(n);
    return Tensor<T>(std::move(shape), std::vector<T>(v.begin(), v.end()));
  }
  auto v = r.floats<double>(n);
  return Tensor<T>(std::move(shape), std::vector<T>(v.begin(), v.end()));
}

}  // namespace io

inline constexpr std::uint32_t kTensorFileVersion = 1;

/// Serialize to the SFPT tensor file layout.
template <class T>
std::vector<std::uint8_t> encode_tensor(const Tensor<T>& t) {
  io::Writer w;
  w.bytes("SFPT", 4);
  w.uint<std::uint32_t>(kTensorFileVersion);
  io::put_block(w, t);
  return std::move(w.buffer());
}

/// Parse an SFPT buffer. Values stored in the other precision are converted.
template <class T>
Tensor<T> decode_tensor(const std::vector<std::uint8_t>& bytes, const std::string& what = "tensor file") {
  io::Reader r(bytes.data(), bytes.size(), what);
  if (r.remaining() < 4 || std::memcmp(bytes.data(), "SFPT", 4) != 0) throw FormatError(what + ": bad magic");
  r.str(4);
  const auto version = r.uint<std::uint32_t>();
  if (version != kTensorFileVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  auto t = io::get_block<T>(r, what);
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes");
  return t;
}

/// Stored dtype of an SFPT buffer without decoding the payload.
inline io::DType tensor_file_dtype(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 9 || std::memcmp(bytes.data(), "SFPT", 4) != 0) throw FormatError("tensor file: bad magic");
  return static_cast<io::DType>(bytes[8]);
}

template <class T>
void write_tensor_file(const std::string& path, const Tensor<T>& t) {
  io::write_file(path, encode_tensor(t));
}

template <class T>
Tensor<T> read_tensor_file(const std::string& path) {
  return decode_tensor<T>(io::read_file(path), path);
}

}  // namespace sfp
