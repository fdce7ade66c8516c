#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace msl {

// FNV-1a, used for config digests and data fingerprints. Not cryptographic.
inline uint64_t fnv1a64(std::string_view bytes,
                        uint64_t h = 14695981039346656037ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace msl
