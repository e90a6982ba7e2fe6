#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "sfp/tensor.hpp"

namespace sfp {

/// Raised when a training operation touches a frozen model.
class FrozenError : public Error {
 public:
  using Error::Error;
};

/// Named parameter tensors. Iteration order is lexicographic by name.
template <class T>
class ParameterStore {
 public:
  struct Entry {
    Tensor<T> value;
    bool trainable = true;
  };

  void add(const std::string& name, Tensor<T> value, bool trainable = true) {
    if (!entries_.emplace(name, Entry{std::move(value), trainable}).second)
      throw Error("parameter store: duplicate name '" + name + "'");
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const { return entry(name).value; }
  Tensor<T>& mutable_value(const std::string& name) { return entry(name).value; }
  bool trainable(const std::string& name) const { return entry(name).trainable; }

  void set_trainable(const std::string& name, bool on) { entry(name).trainable = on; }
  void freeze_all() {
    for (auto& [_, e] : entries_) e.trainable = false;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += e.value.size();
    return n;
  }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  /// FNV-1a over names, shapes and raw value bytes.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
      }
    };
    for (const auto& [name, e] : entries_) {
      mix(name.data(), name.size());
      for (std::size_t d : e.value.shape()) mix(&d, sizeof d);
      mix(e.value.data(), e.value.size() * sizeof(T));
    }
    return h;
  }

  template <class U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& [name, e] : entries_) out.add(name, e.value.template cast<U>(), e.trainable);
    return out;
  }

  friend bool operator==(const ParameterStore& a, const ParameterStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    auto it = b.entries_.begin();
    for (const auto& [name, e] : a.entries_) {
      if (name != it->first || !(e.value == it->second.value) || e.trainable != it->second.trainable)
        return false;
      ++it;
    }
    return true;
  }

 private:
  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw Error("parameter store: no entry '" + name + "'");
    return it->second;
  }
  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw Error("parameter store: no entry '" + name + "'");
    return it->second;
  }

  std::map<std::string, Entry> entries_;
};

}  // namespace sfp
