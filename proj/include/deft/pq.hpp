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

//
// Product quantization with an optional learned orthogonal rotation.
//
// train_pq   : per-subspace k-means (k-means++ init, Lloyd iterations).
// train_opq  : alternates a Procrustes rotation update with warm-started
//              k-means; the reconstruction MSE never increases.
// ADC        : per-subspace lookup tables score a raw query against codes.
//

#pragma once

#include <algorithm>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <vector>

#include "deft/core.hpp"
#include "deft/matrix.hpp"

namespace deft {

struct PqCodebook {
  size_t m = 0;    // subspaces
  size_t ks = 0;   // centroids per subspace
  size_t dim = 0;  // full vector dimension, divisible by m
  std::vector<float> centroids;  // m * ks * dsub, subspace-major
  std::vector<double> rotation;  // empty, or dim*dim row-major; y = R x

  size_t dsub() const { return dim / m; }
  bool has_rotation() const { return !rotation.empty(); }

  float* centroid(size_t sub, size_t k) {
    return centroids.data() + (sub * ks + k) * dsub();
  }
  const float* centroid(size_t sub, size_t k) const {
    return centroids.data() + (sub * ks + k) * dsub();
  }

  /// y = R x (identity when no rotation is set).
  std::vector<float> rotate(const float* v) const {
    std::vector<float> out(dim);
    if (!has_rotation()) {
      std::copy(v, v + dim, out.begin());
      return out;
    }
    for (size_t i = 0; i < dim; ++i) {
      double s = 0.0;
      const double* row = rotation.data() + i * dim;
      for (size_t j = 0; j < dim; ++j) s += row[j] * v[j];
      out[i] = static_cast<float>(s);
    }
    return out;
  }

  /// x = R^T y, the inverse of rotate() for orthogonal R.
  std::vector<float> unrotate(const std::vector<float>& v) const {
    if (!has_rotation()) return v;
    std::vector<float> out(dim);
    for (size_t j = 0; j < dim; ++j) {
      double s = 0.0;
      for (size_t i = 0; i < dim; ++i) s += rotation[i * dim + j] * v[i];
      out[j] = static_cast<float>(s);
    }
    return out;
  }
};

namespace detail {

/// Lloyd k-means over flat row-major data. When centroids is empty a
/// k-means++ init runs first, otherwise iterations warm-start from the
/// given centroids. Empty clusters steal the point farthest from its
/// current centroid.
inline void kmeans(const std::vector<float>& data, size_t n, size_t dim,
                   size_t k, size_t iters, Rng& rng,
                   std::vector<float>& centroids) {
  if (n < k) fail("too-few-vectors", "k-means needs at least k points");
  const bool warm = !centroids.empty();
  if (!warm) {
    centroids.assign(k * dim, 0.0f);
    // k-means++: first pick uniform, then proportional to squared distance.
    std::vector<double> dist2(n, std::numeric_limits<double>::max());
    size_t first = static_cast<size_t>(rng.below(n));
    std::copy_n(data.begin() + first * dim, dim, centroids.begin());
    for (size_t c = 1; c < k; ++c) {
      const float* prev = centroids.data() + (c - 1) * dim;
      double total = 0.0;
      for (size_t i = 0; i < n; ++i) {
        double d = squared_l2(data.data() + i * dim, prev, dim);
        if (d < dist2[i]) dist2[i] = d;
        total += dist2[i];
      }
      size_t pick = 0;
      if (total > 0.0) {
        double target = rng.uniform() * total;
        double acc = 0.0;
        pick = n - 1;
        for (size_t i = 0; i < n; ++i) {
          if (dist2[i] == 0.0) continue;  // already a centroid
          acc += dist2[i];
          if (acc >= target) {
            pick = i;
            break;
          }
        }
      } else {
        pick = static_cast<size_t>(rng.below(n));
      }
      std::copy_n(data.begin() + pick * dim, dim, centroids.begin() + c * dim);
    }
  }

  std::vector<size_t> assign(n, 0);
  std::vector<double> point_dist(n, 0.0);
  for (size_t it = 0; it < iters; ++it) {
    for (size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      size_t best_k = 0;
      for (size_t c = 0; c < k; ++c) {
        double d = squared_l2(data.data() + i * dim,
                              centroids.data() + c * dim, dim);
        if (d < best) {
          best = d;
          best_k = c;
        }
      }
      assign[i] = best_k;
      point_dist[i] = best;
    }
    std::vector<double> sums(k * dim, 0.0);
    std::vector<size_t> counts(k, 0);
    for (size_t i = 0; i < n; ++i) {
      size_t c = assign[i];
      ++counts[c];
      const float* row = data.data() + i * dim;
      double* acc = sums.data() + c * dim;
      for (size_t j = 0; j < dim; ++j) acc[j] += row[j];
    }
    for (size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (size_t j = 0; j < dim; ++j)
        centroids[c * dim + j] =
            static_cast<float>(sums[c * dim + j] / counts[c]);
    }
    // Empty-cluster repair: the point farthest from its centroid becomes
    // the empty cluster's centroid.
    for (size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      size_t far = 0;
      double far_d = -1.0;
      for (size_t i = 0; i < n; ++i) {
        if (counts[assign[i]] <= 1) continue;  // do not orphan another cluster
        if (point_dist[i] > far_d) {
          far_d = point_dist[i];
          far = i;
        }
      }
      std::copy_n(data.begin() + far * dim, dim, centroids.begin() + c * dim);
      --counts[assign[far]];
      assign[far] = c;
      counts[c] = 1;
      point_dist[far] = 0.0;
    }
  }
}

inline std::vector<float> gather_subspace(const FloatMatrix& x, size_t sub,
                                          size_t dsub) {
  std::vector<float> out(x.rows * dsub);
  for (size_t i = 0; i < x.rows; ++i)
    std::copy_n(x.row(i) + sub * dsub, dsub, out.begin() + i * dsub);
  return out;
}

}  // namespace detail

inline std::vector<uint8_t> encode_pq(const PqCodebook& cb, const float* v) {
  std::vector<float> r = cb.rotate(v);
  std::vector<uint8_t> code(cb.m);
  const size_t dsub = cb.dsub();
  for (size_t sub = 0; sub < cb.m; ++sub) {
    double best = std::numeric_limits<double>::max();
    size_t best_k = 0;
    for (size_t k = 0; k < cb.ks; ++k) {
      double d = squared_l2(r.data() + sub * dsub, cb.centroid(sub, k), dsub);
      if (d < best) {
        best = d;
        best_k = k;
      }
    }
    code[sub] = static_cast<uint8_t>(best_k);
  }
  return code;
}

inline std::vector<float> decode_pq(const PqCodebook& cb,
                                    const uint8_t* code) {
  const size_t dsub = cb.dsub();
  std::vector<float> r(cb.dim);
  for (size_t sub = 0; sub < cb.m; ++sub) {
    if (code[sub] >= cb.ks) fail("bad-code", "PQ code entry out of range");
    std::copy_n(cb.centroid(sub, code[sub]), dsub, r.begin() + sub * dsub);
  }
  return cb.unrotate(r);
}

/// Per-query lookup table: table[sub*ks + k] = ||rot(q)_sub - centroid||^2.
struct AdcTable {
  size_t m = 0;
  size_t ks = 0;
  std::vector<double> table;

  double distance(const uint8_t* code) const {
    double s = 0.0;
    for (size_t sub = 0; sub < m; ++sub) {
      if (code[sub] >= ks) fail("bad-code", "PQ code entry out of range");
      s += table[sub * ks + code[sub]];
    }
    return s;
  }
};

inline AdcTable make_adc_table(const PqCodebook& cb, const float* query) {
  std::vector<float> r = cb.rotate(query);
  AdcTable t;
  t.m = cb.m;
  t.ks = cb.ks;
  t.table.resize(cb.m * cb.ks);
  const size_t dsub = cb.dsub();
  for (size_t sub = 0; sub < cb.m; ++sub)
    for (size_t k = 0; k < cb.ks; ++k)
      t.table[sub * cb.ks + k] =
          squared_l2(r.data() + sub * dsub, cb.centroid(sub, k), dsub);
  return t;
}

/// Squared L2 between a raw query and a coded vector via table lookups;
/// equal to ||q - decode(code)||^2 for orthogonal rotations.
inline double adc_distance(const PqCodebook& cb, const float* query,
                           const uint8_t* code) {
  return make_adc_table(cb, query).distance(code);
}

inline double pq_mse(const PqCodebook& cb, const FloatMatrix& x) {
  double total = 0.0;
  for (size_t i = 0; i < x.rows; ++i) {
    std::vector<uint8_t> code = encode_pq(cb, x.row(i));
    std::vector<float> rec = decode_pq(cb, code.data());
    total += squared_l2(x.row(i), rec.data(), x.cols);
  }
  return x.rows == 0 ? 0.0 : total / static_cast<double>(x.rows);
}

inline void check_pq_args(const FloatMatrix& x, size_t m, size_t ks) {
  if (x.cols % m != 0)
    fail("bad-subspaces", "dimension " + std::to_string(x.cols) +
                              " not divisible by m=" + std::to_string(m));
  if (x.rows < ks)
    fail("too-few-vectors", "need at least ks=" + std::to_string(ks) +
                                " training vectors, got " +
                                std::to_string(x.rows));
  if (ks == 0 || ks > 256) fail("bad-ks", "ks must be in [1, 256]");
}

inline PqCodebook train_pq(const FloatMatrix& x, size_t m, size_t ks,
                           size_t iters, uint64_t seed) {
  check_pq_args(x, m, ks);
  PqCodebook cb;
  cb.m = m;
  cb.ks = ks;
  cb.dim = x.cols;
  cb.centroids.resize(m * ks * cb.dsub());
  const size_t dsub = cb.dsub();
  for (size_t sub = 0; sub < m; ++sub) {
    std::vector<float> data = detail::gather_subspace(x, sub, dsub);
    Rng rng(derive_seed(seed, "pq.kmeans", sub));
    std::vector<float> centroids;
    detail::kmeans(data, x.rows, dsub, ks, iters, rng, centroids);
    std::copy(centroids.begin(), centroids.end(), cb.centroid(sub, 0));
  }
  return cb;
}

/// Optimized product quantization: starts from the plain PQ solution, then
/// alternates (a) the orthogonal Procrustes rotation update against the
/// current reconstructions and (b) warm-started Lloyd iterations on the
/// re-rotated data. Records the per-iteration MSE when a trace is given and
/// checks that it never increases.
inline PqCodebook train_opq(const FloatMatrix& x, size_t m, size_t ks,
                            size_t iters, size_t outer_iters, uint64_t seed,
                            std::vector<double>* mse_trace = nullptr) {
  check_pq_args(x, m, ks);
  const size_t d = x.cols;
  PqCodebook cb = train_pq(x, m, ks, iters, seed);
  cb.rotation.assign(d * d, 0.0);
  for (size_t i = 0; i < d; ++i) cb.rotation[i * d + i] = 1.0;

  double prev_mse = pq_mse(cb, x);
  if (mse_trace) mse_trace->push_back(prev_mse);

  FloatMatrix rotated(x.rows, d);
  for (size_t outer = 0; outer < outer_iters; ++outer) {
    // Reconstructions of the rotated data under the current codebooks.
    // M = X^T Y accumulates the cross-correlation for the Procrustes step.
    DMat xty(d, d);
    for (size_t i = 0; i < x.rows; ++i) {
      std::vector<float> rot = cb.rotate(x.row(i));
      std::vector<uint8_t> code(cb.m);
      const size_t dsub = cb.dsub();
      std::vector<float> rec(d);
      for (size_t sub = 0; sub < cb.m; ++sub) {
        double best = std::numeric_limits<double>::max();
        size_t best_k = 0;
        for (size_t k = 0; k < ks; ++k) {
          double dd =
              squared_l2(rot.data() + sub * dsub, cb.centroid(sub, k), dsub);
          if (dd < best) {
            best = dd;
            best_k = k;
          }
        }
        std::copy_n(cb.centroid(sub, best_k), dsub, rec.begin() + sub * dsub);
      }
      const float* xi = x.row(i);
      for (size_t a = 0; a < d; ++a) {
        double xa = xi[a];
        if (xa == 0.0) continue;
        double* row = xty.data.data() + a * d;
        for (size_t b = 0; b < d; ++b) row[b] += xa * rec[b];
      }
    }
    DMat r = procrustes_rotation(xty);
    cb.rotation.assign(r.data.begin(), r.data.end());

    // Re-rotate and refine the codebooks in place (warm start keeps the
    // MSE monotone).
    for (size_t i = 0; i < x.rows; ++i) {
      std::vector<float> rot = cb.rotate(x.row(i));
      std::copy(rot.begin(), rot.end(), rotated.row(i));
    }
    const size_t dsub = cb.dsub();
    for (size_t sub = 0; sub < m; ++sub) {
      std::vector<float> data = detail::gather_subspace(rotated, sub, dsub);
      Rng rng(derive_seed(seed, "opq.kmeans", outer * m + sub));
      std::vector<float> centroids(cb.centroid(sub, 0),
                                   cb.centroid(sub, 0) + ks * dsub);
      detail::kmeans(data, x.rows, dsub, ks, iters, rng, centroids);
      std::copy(centroids.begin(), centroids.end(), cb.centroid(sub, 0));
    }

    double mse = pq_mse(cb, x);
    if (mse > prev_mse + 1e-9)
      fail("opq-mse-increase",
           "OPQ outer iteration increased reconstruction MSE");
    prev_mse = mse;
    if (mse_trace) mse_trace->push_back(mse);
  }
  return cb;
}

// Serialization (embedded in the index file; see hnsw.hpp).
inline void write_codebook(std::ostream& out, const PqCodebook& cb) {
  io::write_u32(out, static_cast<uint32_t>(cb.m));
  io::write_u32(out, static_cast<uint32_t>(cb.ks));
  io::write_u32(out, static_cast<uint32_t>(cb.dim));
  io::write_u8(out, cb.has_rotation() ? 1 : 0);
  for (float v : cb.centroids) io::write_f32(out, v);
  if (cb.has_rotation())
    for (double v : cb.rotation) io::write_f64(out, v);
}

inline PqCodebook read_codebook(std::istream& in) {
  PqCodebook cb;
  cb.m = io::read_u32(in);
  cb.ks = io::read_u32(in);
  cb.dim = io::read_u32(in);
  uint8_t has_rot = io::read_u8(in);
  cb.centroids.resize(cb.m * cb.ks * cb.dsub());
  for (float& v : cb.centroids) v = io::read_f32(in);
  if (has_rot) {
    cb.rotation.resize(cb.dim * cb.dim);
    for (double& v : cb.rotation) v = io::read_f64(in);
  }
  return cb;
}

}  // namespace deft
