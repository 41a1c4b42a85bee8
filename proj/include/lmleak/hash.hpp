// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>

namespace lmleak {

// FNV-1a over a little-endian byte view of the words. Used for residue
// snapshots in the schedule log and for report digests; stability across
// runs matters, cryptographic strength does not.
inline std::uint64_t fnv1a64(std::span<const std::uint32_t> words,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
  std::uint64_t h = seed;
  for (std::uint32_t w : words) {
    for (int shift = 0; shift < 32; shift += 8) {
      h ^= (w >> shift) & 0xffu;
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

inline std::uint64_t fnv1a64_mix(std::uint64_t h, std::uint64_t value) {
  for (int shift = 0; shift < 64; shift += 8) {
    h ^= (value >> shift) & 0xffu;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex_digest(std::uint64_t h);

inline std::string hex_digest(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out = "0x";
  for (int shift = 60; shift >= 0; shift -= 4) {
    out.push_back(digits[(h >> shift) & 0xf]);
  }
  return out;
}

}  // namespace lmleak
