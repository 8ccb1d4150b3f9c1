#include <doctest.h>

#include <cmath>

#include "deft/bm25.hpp"

using namespace deft;

TEST_SUITE_BEGIN("bm25");

namespace {

// Independent closed-form Okapi BM25 with the same idf variant, written out
// directly from the formula so the index implementation is cross-checked.
double hand_bm25(double tf, double df, double n_docs, double doc_len,
                 double avgdl, double k1 = 0.9, double b = 0.4) {
  double idf = std::log(1.0 + (n_docs - df + 0.5) / (df + 0.5));
  return idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc_len / avgdl));
}

}  // namespace

TEST_CASE("three-document hand corpus matches the closed form") {
  std::vector<std::string> docs = {
      "the cat sat on the mat",  // len 6
      "the dog barked",          // len 3
      "cats and dogs",           // len 3
  };
  Bm25Index index(docs);
  const double avgdl = 4.0;

  SUBCASE("single-term query hits one document") {
    auto scores = index.scores("cat");
    CHECK(scores[0] == doctest::Approx(hand_bm25(1, 1, 3, 6, avgdl))
                           .epsilon(1e-12));
    CHECK(scores[1] == 0.0);
    CHECK(scores[2] == 0.0);
  }

  SUBCASE("term frequency saturates per the formula") {
    auto scores = index.scores("the");
    CHECK(scores[0] == doctest::Approx(hand_bm25(2, 2, 3, 6, avgdl))
                           .epsilon(1e-12));
    CHECK(scores[1] == doctest::Approx(hand_bm25(1, 2, 3, 3, avgdl))
                           .epsilon(1e-12));
    CHECK(scores[2] == 0.0);
  }

  SUBCASE("query tokens sum with multiplicity") {
    auto once = index.scores("dog");
    auto twice = index.scores("dog dog");
    CHECK(twice[1] == doctest::Approx(2.0 * once[1]).epsilon(1e-12));
  }

  SUBCASE("multi-term query adds per-term contributions") {
    auto scores = index.scores("cat dog");
    CHECK(scores[0] == doctest::Approx(hand_bm25(1, 1, 3, 6, avgdl))
                           .epsilon(1e-12));
    CHECK(scores[1] == doctest::Approx(hand_bm25(1, 1, 3, 3, avgdl))
                           .epsilon(1e-12));
  }
}

TEST_CASE("a document identical to the query ranks first") {
  std::vector<std::string> docs = {
      "alpha beta gamma delta",
      "alpha beta",
      "unrelated words here",
      "beta gamma",
  };
  Bm25Index index(docs);
  auto scores = index.scores("alpha beta");
  size_t best = 0;
  for (size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  CHECK(best == 1);
  CHECK(scores[2] == 0.0);
}

TEST_CASE("idf is non-negative even for terms in every document") {
  std::vector<std::string> docs = {"common word", "common thing",
                                   "common stuff"};
  Bm25Index index(docs);
  CHECK(index.idf("common") > 0.0);
  CHECK(index.idf("absent") > index.idf("common"));
}

TEST_CASE("zero-overlap query scores exactly zero everywhere") {
  Bm25Index index({"aaa bbb", "ccc ddd"});
  auto scores = index.scores("zzz yyy");
  CHECK(scores[0] == 0.0);
  CHECK(scores[1] == 0.0);
}

TEST_SUITE_END();
