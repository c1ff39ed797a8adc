// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace qeprop {

// Thrown for invalid configuration files, CLI arguments, or mismatched
// artifacts (fingerprints, missing K rows). Maps to process exit code 2.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown by the NaN watchdog when a trajectory produces a non-finite value.
// Maps to process exit code 3.
class NumericalAbort : public std::runtime_error {
 public:
  NumericalAbort(const std::string& msg, int step_index, int t)
      : std::runtime_error(msg), step_index(step_index), t(t) {}
  int step_index;
  int t;
};

// FNV-1a, 64-bit. Used for schedule/plan/config fingerprints.
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64_append(std::uint64_t h, std::uint64_t value) {
  unsigned char b[8];
  std::memcpy(b, &value, 8);
  return fnv1a64(b, 8, h);
}

inline std::uint64_t fnv1a64_append(std::uint64_t h, double value) {
  std::uint64_t bits;
  std::memcpy(&bits, &value, 8);
  return fnv1a64_append(h, bits);
}

// Independent deterministic RNG streams: one tag per purpose, so adding a
// stream never shifts another one's draws.
inline std::uint64_t derive_seed(const char* tag, std::uint64_t a) {
  return fnv1a64_append(fnv1a64(tag, std::strlen(tag)), a);
}

inline std::uint64_t derive_seed(const char* tag, std::uint64_t a,
                                 std::uint64_t b) {
  return fnv1a64_append(derive_seed(tag, a), b);
}

inline std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// 17 significant digits round-trips IEEE doubles exactly.
inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace qeprop
