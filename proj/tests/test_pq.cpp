#include <doctest.h>

#include <sstream>

#include "deft/pq.hpp"

using namespace deft;

namespace {

FloatMatrix gaussian_matrix(size_t n, size_t d, uint64_t seed,
                            const std::vector<double>* scales = nullptr) {
  Rng rng(seed);
  FloatMatrix m(n, d);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < d; ++j) {
      double s = scales ? (*scales)[j] : 1.0;
      m.row(i)[j] = static_cast<float>(rng.normal() * s);
    }
  return m;
}

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian matrix.
DMat random_rotation(size_t d, uint64_t seed) {
  Rng rng(seed);
  DMat q(d, d);
  for (size_t i = 0; i < d; ++i) {
    std::vector<double> v(d);
    for (size_t j = 0; j < d; ++j) v[j] = rng.normal();
    for (size_t k = 0; k < i; ++k) {
      double dot = 0.0;
      for (size_t j = 0; j < d; ++j) dot += v[j] * q.at(k, j);
      for (size_t j = 0; j < d; ++j) v[j] -= dot * q.at(k, j);
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (size_t j = 0; j < d; ++j) q.at(i, j) = v[j] / norm;
  }
  return q;
}

}  // namespace

TEST_SUITE_BEGIN("pq");

TEST_CASE("ks = n reproduces every training vector exactly") {
  FloatMatrix x = gaussian_matrix(24, 8, 3);
  PqCodebook cb = train_pq(x, 2, 24, 3, 17);
  for (size_t i = 0; i < x.rows; ++i) {
    auto code = encode_pq(cb, x.row(i));
    auto rec = decode_pq(cb, code.data());
    for (size_t j = 0; j < x.cols; ++j) CHECK(rec[j] == x.row(i)[j]);
  }
  CHECK(pq_mse(cb, x) == 0.0);
}

TEST_CASE("m=1, ks=1 collapses to the mean of the vectors") {
  FloatMatrix x = gaussian_matrix(50, 6, 4);
  PqCodebook cb = train_pq(x, 1, 1, 5, 0);
  for (size_t j = 0; j < 6; ++j) {
    double mean = 0.0;
    for (size_t i = 0; i < 50; ++i) mean += x.row(i)[j];
    mean /= 50.0;
    CHECK(cb.centroid(0, 0)[j] == doctest::Approx(mean).epsilon(1e-5));
  }
}

TEST_CASE("larger codebooks quantize Gaussian data no worse") {
  FloatMatrix x = gaussian_matrix(1000, 64, 11);
  double mse_16 = pq_mse(train_pq(x, 8, 16, 8, 5), x);
  double mse_256 = pq_mse(train_pq(x, 8, 256, 8, 5), x);
  CHECK(mse_256 <= mse_16);
}

TEST_CASE("train_opq with zero outer iterations is train_pq plus identity") {
  FloatMatrix x = gaussian_matrix(200, 16, 8);
  PqCodebook pq = train_pq(x, 4, 8, 6, 21);
  PqCodebook opq = train_opq(x, 4, 8, 6, 0, 21);
  REQUIRE(opq.has_rotation());
  CHECK(opq.centroids == pq.centroids);
  for (size_t i = 0; i < 16; ++i)
    for (size_t j = 0; j < 16; ++j)
      CHECK(opq.rotation[i * 16 + j] == (i == j ? 1.0 : 0.0));
}

TEST_CASE("OPQ recovers a known rotation: MSE <= plain PQ, trace monotone") {
  // Axis-aligned anisotropic Gaussian, then mixed by a known rotation so
  // identity subspaces are suboptimal.
  const size_t d = 16;
  std::vector<double> scales(d);
  for (size_t j = 0; j < d; ++j) scales[j] = std::pow(0.5, double(j) / 2.0);
  FloatMatrix axis = gaussian_matrix(600, d, 13, &scales);
  DMat q = random_rotation(d, 29);
  FloatMatrix x(600, d);
  for (size_t i = 0; i < x.rows; ++i)
    for (size_t a = 0; a < d; ++a) {
      double s = 0.0;
      for (size_t b = 0; b < d; ++b) s += q.at(a, b) * axis.row(i)[b];
      x.row(i)[a] = static_cast<float>(s);
    }

  double pq_err = pq_mse(train_pq(x, 4, 16, 10, 37), x);
  std::vector<double> trace;
  PqCodebook opq = train_opq(x, 4, 16, 10, 6, 37, &trace);
  double opq_err = pq_mse(opq, x);

  CHECK(opq_err <= pq_err + 1e-9);
  REQUIRE(trace.size() == 7);  // initial + 6 outer iterations
  for (size_t i = 1; i < trace.size(); ++i)
    CHECK(trace[i] <= trace[i - 1] + 1e-9);
  // The known-rotation construction leaves real room for improvement.
  CHECK(opq_err < pq_err * 0.95);
}

TEST_CASE("OPQ rotation is orthogonal within 1e-6 per entry") {
  FloatMatrix x = gaussian_matrix(300, 12, 19);
  PqCodebook opq = train_opq(x, 3, 10, 5, 3, 7);
  REQUIRE(opq.has_rotation());
  const size_t d = 12;
  for (size_t i = 0; i < d; ++i)
    for (size_t j = 0; j < d; ++j) {
      double dot = 0.0;
      for (size_t k = 0; k < d; ++k)
        dot += opq.rotation[k * d + i] * opq.rotation[k * d + j];
      CHECK(std::fabs(dot - (i == j ? 1.0 : 0.0)) < 1e-6);
    }
}

TEST_CASE("adc_distance equals the exact decoded distance within 1e-5") {
  FloatMatrix x = gaussian_matrix(128, 16, 23);
  PqCodebook cb = train_opq(x, 4, 16, 8, 3, 41);
  Rng rng(55);
  for (int t = 0; t < 20; ++t) {
    std::vector<float> query(16);
    for (auto& v : query) v = static_cast<float>(rng.normal());
    size_t i = static_cast<size_t>(rng.below(x.rows));
    auto code = encode_pq(cb, x.row(i));
    auto rec = decode_pq(cb, code.data());
    double exact = squared_l2(query.data(), rec.data(), 16);
    double adc = adc_distance(cb, query.data(), code.data());
    CHECK(adc == doctest::Approx(exact).epsilon(1e-5));
  }
}

TEST_CASE("adc keeps separated clusters apart") {
  // Two well-separated clusters; a query from cluster A must score its own
  // code below the farthest cluster-B vector's code. Brute-force checked.
  const size_t d = 8;
  FloatMatrix x(100, d);
  Rng rng(77);
  for (size_t i = 0; i < 100; ++i) {
    double center = i < 50 ? 0.0 : 10.0;
    for (size_t j = 0; j < d; ++j)
      x.row(i)[j] = static_cast<float>(center + 0.1 * rng.normal());
  }
  PqCodebook cb = train_pq(x, 2, 16, 8, 3);
  // farthest training vector from row 0 by brute force
  size_t far = 0;
  double far_d = -1;
  for (size_t i = 0; i < x.rows; ++i) {
    double dd = squared_l2(x.row(0), x.row(i), d);
    if (dd > far_d) {
      far_d = dd;
      far = i;
    }
  }
  auto own = encode_pq(cb, x.row(0));
  auto other = encode_pq(cb, x.row(far));
  CHECK(adc_distance(cb, x.row(0), own.data()) <
        adc_distance(cb, x.row(0), other.data()));
}

TEST_CASE("reconstruction error is bounded by the set diameter") {
  FloatMatrix x = gaussian_matrix(120, 8, 31);
  PqCodebook cb = train_pq(x, 2, 8, 6, 3);
  double diameter = 0.0;
  for (size_t i = 0; i < x.rows; ++i)
    for (size_t j = i + 1; j < x.rows; ++j)
      diameter = std::max(diameter, squared_l2(x.row(i), x.row(j), x.cols));
  for (size_t i = 0; i < x.rows; ++i) {
    auto code = encode_pq(cb, x.row(i));
    auto rec = decode_pq(cb, code.data());
    CHECK(squared_l2(x.row(i), rec.data(), x.cols) <= diameter);
  }
}

TEST_CASE("argument validation") {
  FloatMatrix x = gaussian_matrix(10, 8, 3);
  CHECK_THROWS_AS(train_pq(x, 3, 4, 2, 0), Error);   // 8 % 3 != 0
  CHECK_THROWS_AS(train_pq(x, 2, 64, 2, 0), Error);  // too few vectors
  PqCodebook cb = train_pq(x, 2, 4, 2, 0);
  std::vector<uint8_t> bad_code = {9, 0};
  CHECK_THROWS_AS(decode_pq(cb, bad_code.data()), Error);
  CHECK_THROWS_AS(adc_distance(cb, x.row(0), bad_code.data()), Error);
}

TEST_CASE("codebook serialization round-trips") {
  FloatMatrix x = gaussian_matrix(64, 8, 47);
  PqCodebook cb = train_opq(x, 2, 8, 4, 2, 3);
  std::stringstream ss;
  write_codebook(ss, cb);
  PqCodebook back = read_codebook(ss);
  CHECK(back.m == cb.m);
  CHECK(back.ks == cb.ks);
  CHECK(back.dim == cb.dim);
  CHECK(back.centroids == cb.centroids);
  CHECK(back.rotation == cb.rotation);
}

TEST_SUITE_END();
