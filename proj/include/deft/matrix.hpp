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
#include <cstddef>
#include <vector>

#include "deft/core.hpp"

namespace deft {

/// Row-major float matrix; the working representation for embedding sets.
struct FloatMatrix {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<float> data;

  FloatMatrix() = default;
  FloatMatrix(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

  float* row(size_t i) { return data.data() + i * cols; }
  const float* row(size_t i) const { return data.data() + i * cols; }
};

inline double squared_l2(const float* a, const float* b, size_t n) {
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

inline double l2_norm(const float* a, size_t n) {
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * a[i];
  return std::sqrt(s);
}

/// Normalizes in place; values within 1e-6 of unit norm are left untouched so
/// already-normalized data round-trips bit-exactly. Zero vectors are left
/// as-is and reported via the return value.
inline bool l2_normalize(float* a, size_t n) {
  double norm = l2_norm(a, n);
  if (norm == 0.0) return false;
  if (std::fabs(norm - 1.0) > 1e-6) {
    for (size_t i = 0; i < n; ++i)
      a[i] = static_cast<float>(a[i] / norm);
  }
  return true;
}

/// Row-major double matrix used by the rotation solver.
struct DMat {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<double> data;

  DMat() = default;
  DMat(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& at(size_t i, size_t j) { return data[i * cols + j]; }
  double at(size_t i, size_t j) const { return data[i * cols + j]; }

  static DMat identity(size_t n) {
    DMat m(n, n);
    for (size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
  }
};

namespace detail {

/// One-sided Jacobi SVD of a square matrix: A = U * diag(sigma) * V^T.
/// Columns of A are rotated until pairwise orthogonal; V accumulates the
/// rotations. Near-zero singular directions get U columns completed by
/// Gram-Schmidt against the canonical basis, so U is always orthogonal.
inline void jacobi_svd(const DMat& a, DMat& u, std::vector<double>& sigma,
                       DMat& v) {
  const size_t n = a.rows;
  if (a.cols != n) fail("svd-shape", "jacobi_svd expects a square matrix");
  DMat b = a;
  v = DMat::identity(n);

  double max_entry = 0.0;
  for (double x : b.data) max_entry = std::max(max_entry, std::fabs(x));
  const double tol = 1e-14 * std::max(1.0, max_entry);

  for (int sweep = 0; sweep < 100; ++sweep) {
    bool rotated = false;
    for (size_t p = 0; p + 1 < n; ++p) {
      for (size_t q = p + 1; q < n; ++q) {
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (size_t i = 0; i < n; ++i) {
          double bp = b.at(i, p), bq = b.at(i, q);
          app += bp * bp;
          aqq += bq * bq;
          apq += bp * bq;
        }
        if (std::fabs(apq) <= tol * std::sqrt(std::max(app * aqq, 1e-300)))
          continue;
        rotated = true;
        double zeta = (aqq - app) / (2.0 * apq);
        double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                   (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        double c = 1.0 / std::sqrt(1.0 + t * t);
        double s = c * t;
        for (size_t i = 0; i < n; ++i) {
          double bp = b.at(i, p), bq = b.at(i, q);
          b.at(i, p) = c * bp - s * bq;
          b.at(i, q) = s * bp + c * bq;
          double vp = v.at(i, p), vq = v.at(i, q);
          v.at(i, p) = c * vp - s * vq;
          v.at(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }

  sigma.assign(n, 0.0);
  u = DMat(n, n);
  const double rank_tol = 1e-12 * std::max(1.0, max_entry);
  std::vector<bool> filled(n, false);
  for (size_t j = 0; j < n; ++j) {
    double norm = 0.0;
    for (size_t i = 0; i < n; ++i) norm += b.at(i, j) * b.at(i, j);
    norm = std::sqrt(norm);
    sigma[j] = norm;
    if (norm > rank_tol) {
      for (size_t i = 0; i < n; ++i) u.at(i, j) = b.at(i, j) / norm;
      filled[j] = true;
    }
  }
  // Complete null columns to an orthonormal basis (Gram-Schmidt against the
  // filled columns, seeded from canonical basis vectors).
  for (size_t j = 0; j < n; ++j) {
    if (filled[j]) continue;
    for (size_t cand = 0; cand < n; ++cand) {
      std::vector<double> e(n, 0.0);
      e[cand] = 1.0;
      for (size_t k = 0; k < n; ++k) {
        if (!filled[k]) continue;
        double dot = 0.0;
        for (size_t i = 0; i < n; ++i) dot += e[i] * u.at(i, k);
        for (size_t i = 0; i < n; ++i) e[i] -= dot * u.at(i, k);
      }
      double norm = 0.0;
      for (double x : e) norm += x * x;
      norm = std::sqrt(norm);
      if (norm > 0.5) {
        for (size_t i = 0; i < n; ++i) u.at(i, j) = e[i] / norm;
        filled[j] = true;
        break;
      }
    }
    if (!filled[j]) fail("svd-basis", "failed to complete orthonormal basis");
  }
}

}  // namespace detail

/// Orthogonal Procrustes: the rotation R maximizing sum_i y_i^T (R x_i),
/// i.e. minimizing sum_i ||R x_i - y_i||^2, from the SVD of M = X^T Y.
/// Rows of x and y are paired observations.
inline DMat procrustes_rotation(const DMat& m) {
  DMat u, v;
  std::vector<double> sigma;
  detail::jacobi_svd(m, u, sigma, v);
  const size_t n = m.rows;
  DMat r(n, n);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (size_t k = 0; k < n; ++k) s += v.at(i, k) * u.at(j, k);
      r.at(i, j) = s;
    }
  return r;
}

}  // namespace deft
