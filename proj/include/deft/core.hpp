// Copyright 2025-present the deft project
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace deft {

/// Error with a short machine-readable code alongside the human message.
/// The CLI maps these to single-line `error[<code>] <message>` output.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

[[noreturn]] inline void fail(std::string code, const std::string& message) {
  throw Error(std::move(code), message);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64_bytes(const void* data, size_t n,
                              uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t splitmix64_next(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Key-derivation scheme for per-module seed streams: every random decision
/// in the pipeline draws from derive_seed(root, "<module>.<purpose>", salt).
/// Same root + same tag + same salt gives the same stream on every platform.
inline uint64_t derive_seed(uint64_t root, std::string_view tag,
                            uint64_t salt = 0) {
  uint64_t s = root ^ (0x9e3779b97f4a7c15ull + fnv1a64(tag));
  uint64_t a = splitmix64_next(s);
  s ^= salt * 0xd6e8feb86659fd93ull + 0x2545f4914f6cdd1dull;
  uint64_t b = splitmix64_next(s);
  return a ^ (b + (salt << 1));
}

/// Deterministic cross-platform generator (splitmix64 core).
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return splitmix64_next(state_); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform in (0, 1]; safe to feed into log().
  double uniform_open() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller with a cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform_open();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Unbiased integer in [0, n); rejection sampling.
  uint64_t below(uint64_t n) {
    if (n == 0) fail("rng-range", "below(0) is undefined");
    uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// First n positions of a seeded Fisher-Yates pass over [0, total):
  /// a uniform sample without replacement, in draw order.
  std::vector<size_t> sample_indices(size_t total, size_t n) {
    std::vector<size_t> idx(total);
    for (size_t i = 0; i < total; ++i) idx[i] = i;
    n = std::min(n, total);
    for (size_t i = 0; i < n; ++i) {
      size_t j = i + static_cast<size_t>(below(total - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(n);
    return idx;
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Little-endian binary primitives shared by the index, embedding and
// checkpoint file formats.
namespace io {

inline void write_bytes(std::ostream& out, const void* data, size_t n) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) fail("io-write", "write failed");
}

inline void read_bytes(std::istream& in, void* data, size_t n) {
  in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in.gcount()) != n)
    fail("io-truncated", "unexpected end of file");
}

inline void write_u8(std::ostream& out, uint8_t v) { write_bytes(out, &v, 1); }

inline void write_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  write_bytes(out, b, 4);
}

inline void write_u64(std::ostream& out, uint64_t v) {
  write_u32(out, static_cast<uint32_t>(v));
  write_u32(out, static_cast<uint32_t>(v >> 32));
}

inline void write_i32(std::ostream& out, int32_t v) {
  write_u32(out, static_cast<uint32_t>(v));
}

inline void write_f32(std::ostream& out, float v) {
  uint32_t bits;
  static_assert(sizeof(bits) == sizeof(v));
  __builtin_memcpy(&bits, &v, 4);
  write_u32(out, bits);
}

inline void write_f64(std::ostream& out, double v) {
  uint64_t bits;
  __builtin_memcpy(&bits, &v, 8);
  write_u64(out, bits);
}

inline void write_string(std::ostream& out, std::string_view s) {
  write_u32(out, static_cast<uint32_t>(s.size()));
  write_bytes(out, s.data(), s.size());
}

inline uint8_t read_u8(std::istream& in) {
  uint8_t v;
  read_bytes(in, &v, 1);
  return v;
}

inline uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  read_bytes(in, b, 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

inline uint64_t read_u64(std::istream& in) {
  uint64_t lo = read_u32(in);
  uint64_t hi = read_u32(in);
  return lo | (hi << 32);
}

inline int32_t read_i32(std::istream& in) {
  return static_cast<int32_t>(read_u32(in));
}

inline float read_f32(std::istream& in) {
  uint32_t bits = read_u32(in);
  float v;
  __builtin_memcpy(&v, &bits, 4);
  return v;
}

inline double read_f64(std::istream& in) {
  uint64_t bits = read_u64(in);
  double v;
  __builtin_memcpy(&v, &bits, 8);
  return v;
}

inline std::string read_string(std::istream& in) {
  uint32_t n = read_u32(in);
  std::string s(n, '\0');
  if (n > 0) read_bytes(in, s.data(), n);
  return s;
}

inline void expect_magic(std::istream& in, std::string_view magic,
                         std::string_view what) {
  std::string got(magic.size(), '\0');
  in.read(got.data(), static_cast<std::streamsize>(magic.size()));
  if (static_cast<size_t>(in.gcount()) != magic.size() || got != magic)
    fail("bad-magic", std::string(what) + ": bad magic header");
}

}  // namespace io

/// Worker cap for the few places that fan out across threads.
/// DEFT_THREADS overrides; unset means hardware concurrency.
inline size_t max_workers() {
  if (const char* env = std::getenv("DEFT_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<size_t>(v);
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

}  // namespace deft
