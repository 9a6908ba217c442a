#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace stf {

inline uint64_t fnv1a64(std::string_view bytes, uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(uint64_t v);

// FNV-1a over a whole file's bytes, rendered as 16 hex digits.
std::string file_hash_hex(const std::string& path);  // throws IoError

}  // namespace stf
