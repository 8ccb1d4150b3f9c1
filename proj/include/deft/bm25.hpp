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
// Okapi BM25 over an inverted index. Scores sum per query token (repeats
// count) with the non-negative idf variant:
//
//   idf(t)      = ln(1 + (N - df + 0.5) / (df + 0.5))
//   score(q, D) = sum_t idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |D| / avgdl))
//

#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "deft/core.hpp"
#include "deft/embed.hpp"

namespace deft {

struct Bm25Params {
  double k1 = 0.9;
  double b = 0.4;
};

class Bm25Index {
 public:
  Bm25Index() = default;

  explicit Bm25Index(const std::vector<std::string>& documents,
                     Bm25Params params = {})
      : params_(params), doc_count_(documents.size()) {
    doc_len_.resize(documents.size());
    double total_len = 0.0;
    for (size_t d = 0; d < documents.size(); ++d) {
      std::vector<std::string> tokens = tokenize(documents[d]);
      doc_len_[d] = tokens.size();
      total_len += static_cast<double>(tokens.size());
      std::unordered_map<std::string, uint32_t> tf;
      for (const auto& tok : tokens) ++tf[tok];
      for (const auto& [term, count] : tf)
        postings_[term].push_back({static_cast<uint32_t>(d), count});
    }
    avgdl_ = documents.empty() ? 0.0
                               : total_len / static_cast<double>(doc_count_);
  }

  size_t doc_count() const { return doc_count_; }

  double idf(const std::string& term) const {
    auto it = postings_.find(term);
    double df = it == postings_.end() ? 0.0
                                      : static_cast<double>(it->second.size());
    double n = static_cast<double>(doc_count_);
    return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
  }

  /// BM25 score of the query against every document. Documents with no
  /// term overlap score exactly 0.
  std::vector<double> scores(const std::string& query) const {
    std::vector<double> out(doc_count_, 0.0);
    for (const auto& term : tokenize(query)) {
      auto it = postings_.find(term);
      if (it == postings_.end()) continue;
      double w = idf(term);
      for (const auto& [doc, tf] : it->second) {
        double tfd = static_cast<double>(tf);
        double norm = 1.0 - params_.b +
                      params_.b * static_cast<double>(doc_len_[doc]) / avgdl_;
        out[doc] += w * tfd * (params_.k1 + 1.0) / (tfd + params_.k1 * norm);
      }
    }
    return out;
  }

  double score_one(const std::string& query, size_t doc) const {
    return scores(query)[doc];
  }

 private:
  struct Posting {
    uint32_t doc;
    uint32_t tf;
  };

  Bm25Params params_;
  size_t doc_count_ = 0;
  double avgdl_ = 0.0;
  std::vector<size_t> doc_len_;
  std::unordered_map<std::string, std::vector<Posting>> postings_;
};

}  // namespace deft
