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
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "deft/core.hpp"
#include "deft/matrix.hpp"
#include "deft/pool.hpp"

namespace deft {

// ---------------------------------------------------------------------------
// Tokenization: whitespace split, leading/trailing punctuation peeled into
// separate tokens, lowercased. Intra-word punctuation (a-b, don't) is kept.
// ---------------------------------------------------------------------------

namespace detail {

// Unicode code points with the White_Space property.
inline bool is_unicode_space(uint32_t cp) {
  switch (cp) {
    case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D:
    case 0x20: case 0x85: case 0xA0: case 0x1680:
    case 0x2028: case 0x2029: case 0x202F: case 0x205F: case 0x3000:
      return true;
    default:
      return cp >= 0x2000 && cp <= 0x200A;
  }
}

inline bool is_ascii_punct(char c) {
  return (c >= '!' && c <= '/') || (c >= ':' && c <= '@') ||
         (c >= '[' && c <= '`') || (c >= '{' && c <= '~');
}

inline char ascii_lower(char c) {
  return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
}

// Decodes one UTF-8 code point; malformed bytes decode as themselves so
// arbitrary input never throws.
inline uint32_t utf8_next(std::string_view s, size_t& i) {
  unsigned char c = static_cast<unsigned char>(s[i]);
  if (c < 0x80) {
    ++i;
    return c;
  }
  size_t len = (c >= 0xF0) ? 4 : (c >= 0xE0) ? 3 : (c >= 0xC0) ? 2 : 1;
  if (len == 1 || i + len > s.size()) {
    ++i;
    return c;
  }
  uint32_t cp = c & (0x7F >> len);
  for (size_t k = 1; k < len; ++k) {
    unsigned char cc = static_cast<unsigned char>(s[i + k]);
    if ((cc & 0xC0) != 0x80) {
      ++i;
      return c;
    }
    cp = (cp << 6) | (cc & 0x3F);
  }
  i += len;
  return cp;
}

}  // namespace detail

inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string word;
  auto flush_word = [&]() {
    if (word.empty()) return;
    // Peel leading punctuation.
    size_t begin = 0;
    while (begin < word.size() && detail::is_ascii_punct(word[begin])) {
      tokens.emplace_back(1, word[begin]);
      ++begin;
    }
    // Find the trailing punctuation run.
    size_t end = word.size();
    while (end > begin && detail::is_ascii_punct(word[end - 1])) --end;
    if (end > begin) tokens.emplace_back(word.substr(begin, end - begin));
    for (size_t k = end; k < word.size(); ++k)
      tokens.emplace_back(1, word[k]);
    word.clear();
  };
  size_t i = 0;
  while (i < text.size()) {
    size_t start = i;
    uint32_t cp = detail::utf8_next(text, i);
    if (detail::is_unicode_space(cp)) {
      flush_word();
    } else {
      for (size_t k = start; k < i; ++k)
        word.push_back(detail::ascii_lower(text[k]));
    }
  }
  flush_word();
  return tokens;
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

struct Embedding {
  std::vector<float> values;
  bool normalized = false;

  size_t dim() const { return values.size(); }
};

enum class EmbedderVariant { kHashedToken, kPrecomputedFile };

/// The hashed-token variant is the self-contained stand-in for an external
/// neural encoder; the precomputed-file variant drops in vectors produced
/// elsewhere (see the DEFTEMB1 file format below).
struct EmbedderConfig {
  EmbedderVariant variant = EmbedderVariant::kHashedToken;
  size_t dim = 256;
  uint64_t seed = 0;
  bool include_instruction = false;
};

/// Deterministic pseudo-random unit vector for one token, keyed by
/// hash(token, seed). The same token always maps to the same direction.
inline std::vector<float> token_unit_vector(std::string_view token, size_t dim,
                                            uint64_t seed) {
  Rng rng(derive_seed(seed, "embed.token", fnv1a64(token)));
  std::vector<float> v(dim);
  for (size_t i = 0; i < dim; ++i) v[i] = static_cast<float>(rng.normal());
  l2_normalize(v.data(), dim);
  return v;
}

/// Mean of the token unit vectors, L2-normalized. Empty input yields the
/// zero vector with the normalized flag unset.
inline Embedding embed_mean_pool(const std::vector<std::string>& tokens,
                                 const EmbedderConfig& cfg) {
  if (cfg.variant != EmbedderVariant::kHashedToken)
    fail("embedder-variant", "embed_mean_pool requires the hashed-token variant");
  if (cfg.dim < 8) fail("bad-dim", "embedding dimension must be >= 8");
  Embedding out;
  out.values.assign(cfg.dim, 0.0f);
  if (tokens.empty()) return out;
  std::vector<double> acc(cfg.dim, 0.0);
  for (const auto& tok : tokens) {
    std::vector<float> v = token_unit_vector(tok, cfg.dim, cfg.seed);
    for (size_t i = 0; i < cfg.dim; ++i) acc[i] += v[i];
  }
  for (size_t i = 0; i < cfg.dim; ++i)
    out.values[i] = static_cast<float>(acc[i] / static_cast<double>(tokens.size()));
  out.normalized = l2_normalize(out.values.data(), cfg.dim);
  return out;
}

inline Embedding embed_text(std::string_view text, const EmbedderConfig& cfg) {
  return embed_mean_pool(tokenize(text), cfg);
}

inline Embedding embed_instance(const PromptedInstance& inst,
                                const EmbedderConfig& cfg) {
  return embed_text(compose_text(inst, cfg.include_instruction), cfg);
}

/// Embeds a whole pool into a row-per-instance matrix (pool order).
inline FloatMatrix embed_pool(const Pool& pool, const EmbedderConfig& cfg) {
  FloatMatrix m(pool.size(), cfg.dim);
  for (size_t i = 0; i < pool.size(); ++i) {
    Embedding e = embed_instance(pool.instances[i], cfg);
    std::copy(e.values.begin(), e.values.end(), m.row(i));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Precomputed-embedding file: magic "DEFTEMB1", u32 count, u32 dim, then
// count*dim float32 row-major, little-endian. Rows align with pool order.
// ---------------------------------------------------------------------------

inline constexpr const char kEmbeddingMagic[] = "DEFTEMB1";

inline void write_precomputed(const FloatMatrix& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("io-open", "cannot open " + path);
  io::write_bytes(out, kEmbeddingMagic, 8);
  io::write_u32(out, static_cast<uint32_t>(m.rows));
  io::write_u32(out, static_cast<uint32_t>(m.cols));
  for (float v : m.data) io::write_f32(out, v);
  if (!out) fail("io-write", "failed writing " + path);
}

/// Raw reader: bytes in, floats out, no normalization. Checks the header
/// and payload length but not the values.
inline FloatMatrix read_precomputed_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("no-such-file", "cannot open embedding file " + path);
  io::expect_magic(in, std::string_view(kEmbeddingMagic, 8), path);
  uint32_t count = io::read_u32(in);
  uint32_t dim = io::read_u32(in);
  FloatMatrix m(count, dim);
  for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = io::read_f32(in);
  return m;
}

/// Loads exactly expected_count vectors of dimension d, L2-normalized.
/// Header mismatches, truncated payloads and NaN entries are distinct errors.
inline FloatMatrix load_precomputed(const std::string& path,
                                    size_t expected_count, size_t d) {
  FloatMatrix m = read_precomputed_raw(path);
  if (m.rows != expected_count)
    fail("count-mismatch", path + ": header count " + std::to_string(m.rows) +
                               " != expected " + std::to_string(expected_count));
  if (m.cols != d)
    fail("dim-mismatch", path + ": header dim " + std::to_string(m.cols) +
                             " != expected " + std::to_string(d));
  for (size_t i = 0; i < m.rows; ++i) {
    const float* r = m.row(i);
    for (size_t j = 0; j < m.cols; ++j)
      if (!std::isfinite(r[j]))
        fail("nan-entry", path + ": non-finite value in record " +
                              std::to_string(i));
    l2_normalize(m.row(i), m.cols);
  }
  return m;
}

}  // namespace deft
