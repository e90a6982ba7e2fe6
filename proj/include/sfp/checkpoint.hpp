#pragma once

// SFPC checkpoint: magic, u32 version, u8 component tag, u64 config digest,
// u32 block count, named tensor blocks, CRC32 trailer over everything before it.

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include <zlib.h>

#include "sfp/binary_io.hpp"
#include "sfp/params.hpp"

namespace sfp {

enum class Component : std::uint8_t { world_model = 1, policy = 2 };

inline const char* component_name(Component c) { return c == Component::world_model ? "world-model" : "policy"; }

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), p, static_cast<uInt>(n)));
}

template <class T>
struct Checkpoint {
  Component component = Component::world_model;
  std::uint64_t digest = 0;
  ParameterStore<T> params;
};

template <class T>
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint<T>& ck) {
  io::Writer w;
  w.bytes("SFPC", 4);
  w.uint<std::uint32_t>(kCheckpointVersion);
  w.u8(static_cast<std::uint8_t>(ck.component));
  w.uint<std::uint64_t>(ck.digest);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& [name, e] : ck.params) {
    if (name.size() > 0xFFFF) throw FormatError("checkpoint: parameter name too long");
    w.uint<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    io::put_block(w, e.value);
  }
  w.uint<std::uint32_t>(crc32_of(w.buffer().data(), w.buffer().size()));
  return std::move(w.buffer());
}

/// Parse and verify a checkpoint. Blocks stored in the other precision are converted.
template <class T>
Checkpoint<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& what = "checkpoint") {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "SFPC", 4) != 0) throw FormatError(what + ": bad magic");
  if (bytes.size() < 25) throw FormatError(what + ": truncated");
  io::Reader tail(bytes.data() + bytes.size() - 4, 4, what);
  if (tail.uint<std::uint32_t>() != crc32_of(bytes.data(), bytes.size() - 4)) throw FormatError("checkpoint CRC mismatch");
  io::Reader r(bytes.data(), bytes.size() - 4, what);
  r.str(4);
  const auto version = r.uint<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  Checkpoint<T> ck;
  const auto tag = r.u8();
  if (tag != 1 && tag != 2) throw FormatError(what + ": unknown component tag " + std::to_string(tag));
  ck.component = static_cast<Component>(tag);
  ck.digest = r.uint<std::uint64_t>();
  const auto count = r.uint<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.uint<std::uint16_t>());
    ck.params.add(name, io::get_block<T>(r, what + ": " + name));
  }
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes");
  return ck;
}

template <class T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
  io::write_file(path, encode_checkpoint(ck));
}

/// Load and check the component tag and, when `expected_digest` is nonzero, the config digest.
template <class T>
Checkpoint<T> load_checkpoint(const std::string& path, Component expected, std::uint64_t expected_digest = 0) {
  auto ck = decode_checkpoint<T>(io::read_file(path), path);
  if (ck.component != expected)
    throw FormatError(path + ": holds a " + component_name(ck.component) + ", expected a " + component_name(expected));
  if (expected_digest && ck.digest != expected_digest)
    throw FormatError(path + ": checkpoint was written under a different model configuration");
  return ck;
}

}  // namespace sfp
