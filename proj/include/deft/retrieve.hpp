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
// Cross-task nearest-neighbor selection: per-query kNN over the pool index,
// union with id-keyed dedup and provenance, the BM25 sparse baseline, and
// composition analysis of what got retrieved. The retrieved set is bounded
// by |Q| * k; the overlap factor |Q| * k / |R| measures how much the
// per-query neighbor lists coincide.
//

#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "deft/bm25.hpp"
#include "deft/core.hpp"
#include "deft/embed.hpp"
#include "deft/hnsw.hpp"
#include "deft/pool.hpp"

namespace deft {

enum class RetrievalEngine { kDense, kBm25 };

struct RetrievalRequest {
  std::vector<PromptedInstance> queries;  // unlabeled
  size_t k = 500;
  bool include_instruction = false;
  RetrievalEngine engine = RetrievalEngine::kDense;
};

/// Default neighbors per query: few-shot query sets (<= 70) compensate with
/// 2000 neighbors per instance, larger query sets use 500.
inline size_t default_k(size_t query_count) {
  return query_count <= 70 ? 2000 : 500;
}

struct RetrievedSet {
  std::vector<std::string> ids;  // deduplicated, ascending
  std::map<std::string, std::vector<std::string>> provenance;  // id -> queries
  size_t union_bound = 0;   // |Q| * k
  double overlap_factor = 0.0;  // |Q| * k / |R|
};

/// Pool index plus the embedder contract it was built under. Retrieval
/// requests must match include_instruction; a mismatch is an error, not a
/// silent degradation.
struct DenseIndex {
  EmbedderConfig embedder;
  HnswIndex index;
  std::vector<std::string> row_ids;  // index id (row) -> instance id
};

struct PqOptions {
  size_t m = 16;
  size_t ks = 256;
  size_t iters = 10;
  size_t opq_iters = 0;  // 0 trains plain PQ
  bool keep_raw = true;  // re-rank ADC candidates with raw vectors
};

/// Builds the HNSW index over per-row embeddings (rows align with pool
/// order). Rows whose embedding is the zero vector are excluded.
inline DenseIndex build_dense_index(const Pool& pool,
                                    const FloatMatrix& embeddings,
                                    const EmbedderConfig& cfg,
                                    const HnswParams& params,
                                    const PqOptions* pq = nullptr) {
  if (embeddings.rows != pool.size())
    fail("count-mismatch", "embedding rows do not match pool size");
  if (embeddings.cols != cfg.dim)
    fail("dim-mismatch", "embedding dim does not match embedder config");
  DenseIndex di{cfg, HnswIndex(cfg.dim, params), {}};
  di.row_ids.reserve(pool.size());
  for (size_t i = 0; i < pool.size(); ++i)
    di.row_ids.push_back(pool.instances[i].id);
  PqCodebook cb;
  if (pq) {
    cb = pq->opq_iters > 0
             ? train_opq(embeddings, pq->m, pq->ks, pq->iters, pq->opq_iters,
                         params.seed)
             : train_pq(embeddings, pq->m, pq->ks, pq->iters, params.seed);
  }
  for (size_t i = 0; i < embeddings.rows; ++i) {
    if (l2_norm(embeddings.row(i), embeddings.cols) == 0.0) continue;
    di.index.insert(static_cast<uint32_t>(i), embeddings.row(i));
  }
  if (pq) di.index.apply_pq(cb, pq->keep_raw);
  return di;
}

/// Hashed-token convenience: embeds the pool and builds the index.
inline DenseIndex build_dense_index(const Pool& pool,
                                    const EmbedderConfig& cfg,
                                    const HnswParams& params,
                                    const PqOptions* pq = nullptr) {
  return build_dense_index(pool, embed_pool(pool, cfg), cfg, params, pq);
}

namespace detail {

struct NeighborLists {
  // Per query: instance ids of its top-k, rank order.
  std::vector<std::vector<std::string>> per_query;
};

inline RetrievedSet union_neighbors(const std::vector<PromptedInstance>& queries,
                                    const NeighborLists& lists, size_t k) {
  RetrievedSet rset;
  rset.union_bound = queries.size() * k;
  for (size_t qi = 0; qi < queries.size(); ++qi)
    for (const auto& id : lists.per_query[qi])
      rset.provenance[id].push_back(queries[qi].id);
  rset.ids.reserve(rset.provenance.size());
  for (auto& [id, sources] : rset.provenance) {
    std::sort(sources.begin(), sources.end());
    sources.erase(std::unique(sources.begin(), sources.end()), sources.end());
    rset.ids.push_back(id);
  }
  rset.overlap_factor = rset.ids.empty()
                            ? 0.0
                            : static_cast<double>(rset.union_bound) /
                                  static_cast<double>(rset.ids.size());
  return rset;
}

}  // namespace detail

/// Union of the k nearest pool neighbors of every query, deduplicated by
/// instance id with per-query provenance. Queries are embedded exactly the
/// way the index was built (targets never participate).
inline RetrievedSet cross_task_retrieve(const DenseIndex& di,
                                        const RetrievalRequest& req) {
  if (req.engine != RetrievalEngine::kDense)
    fail("bad-engine", "cross_task_retrieve requires the dense engine");
  if (req.queries.empty()) fail("empty-queries", "query set is empty");
  if (req.k < 1) fail("bad-k", "k must be >= 1");
  if (di.index.size() == 0) fail("empty-pool", "index holds no vectors");
  if (req.include_instruction != di.embedder.include_instruction)
    fail("config-mismatch",
         "query include_instruction does not match the index");

  const size_t ef = std::max(di.index.params().ef_search, req.k);
  detail::NeighborLists lists;
  lists.per_query.resize(req.queries.size());
  for (size_t qi = 0; qi < req.queries.size(); ++qi) {
    Embedding e = embed_instance(req.queries[qi], di.embedder);
    std::vector<SearchHit> hits = di.index.search(e.values, req.k, ef);
    for (const auto& hit : hits)
      lists.per_query[qi].push_back(di.row_ids[hit.id]);
  }
  return detail::union_neighbors(req.queries, lists, req.k);
}

/// Precomputed-embedding path: query vectors are supplied row-per-query.
inline RetrievedSet cross_task_retrieve(const DenseIndex& di,
                                        const RetrievalRequest& req,
                                        const FloatMatrix& query_embeddings) {
  if (req.queries.empty()) fail("empty-queries", "query set is empty");
  if (query_embeddings.rows != req.queries.size())
    fail("count-mismatch", "query embeddings do not match query count");
  if (query_embeddings.cols != di.embedder.dim)
    fail("dim-mismatch", "query embedding dim does not match the index");
  if (di.index.size() == 0) fail("empty-pool", "index holds no vectors");
  if (req.include_instruction != di.embedder.include_instruction)
    fail("config-mismatch",
         "query include_instruction does not match the index");

  const size_t ef = std::max(di.index.params().ef_search, req.k);
  detail::NeighborLists lists;
  lists.per_query.resize(req.queries.size());
  for (size_t qi = 0; qi < req.queries.size(); ++qi) {
    std::vector<SearchHit> hits =
        di.index.search(query_embeddings.row(qi), req.k, ef);
    for (const auto& hit : hits)
      lists.per_query[qi].push_back(di.row_ids[hit.id]);
  }
  return detail::union_neighbors(req.queries, lists, req.k);
}

/// Okapi BM25 baseline: same union/dedup semantics and the same size bound
/// as the dense path. Zero-overlap queries fall back to the tie rule
/// (score 0, ascending instance id).
inline RetrievedSet bm25_retrieve(const Pool& pool,
                                  const RetrievalRequest& req,
                                  Bm25Params params = {}) {
  if (req.engine != RetrievalEngine::kBm25)
    fail("bad-engine", "bm25_retrieve requires the bm25 engine");
  if (req.queries.empty()) fail("empty-queries", "query set is empty");
  if (req.k < 1) fail("bad-k", "k must be >= 1");
  if (pool.size() == 0) fail("empty-pool", "pool is empty");

  std::vector<std::string> docs;
  docs.reserve(pool.size());
  for (const auto& inst : pool.instances)
    docs.push_back(compose_text(inst, req.include_instruction));
  Bm25Index bm(docs, params);

  // Rank of every doc position under ascending instance id, for tie-breaks.
  std::vector<size_t> id_rank(pool.size());
  {
    std::vector<size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return pool.instances[a].id < pool.instances[b].id;
    });
    for (size_t r = 0; r < order.size(); ++r) id_rank[order[r]] = r;
  }

  const size_t k = std::min(req.k, pool.size());
  detail::NeighborLists lists;
  lists.per_query.resize(req.queries.size());
  for (size_t qi = 0; qi < req.queries.size(); ++qi) {
    std::vector<double> scores =
        bm.scores(compose_text(req.queries[qi], req.include_instruction));
    std::vector<size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    auto better = [&](size_t a, size_t b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return id_rank[a] < id_rank[b];
    };
    std::partial_sort(order.begin(), order.begin() + k, order.end(), better);
    for (size_t r = 0; r < k; ++r)
      lists.per_query[qi].push_back(pool.instances[order[r]].id);
  }
  return detail::union_neighbors(req.queries, lists, req.k);
}

// ---------------------------------------------------------------------------
// Composition analysis
// ---------------------------------------------------------------------------

struct TaskComposition {
  std::string task;
  size_t retrieved = 0;
  double frac_of_r = 0.0;
  double frac_of_task = 0.0;
};

struct CompositionReport {
  std::vector<TaskComposition> per_task;  // retrieved desc, then task asc
  double overlap_factor = 0.0;
  size_t union_bound = 0;
  double max_frac_of_task = 0.0;  // max per-source coverage
  std::string max_task;
};

inline CompositionReport analyze_sources(const RetrievedSet& rset,
                                         const Pool& pool) {
  std::map<std::string, size_t> per_task;
  for (const auto& id : rset.ids) ++per_task[pool.by_id(id).source_task];
  CompositionReport report;
  report.overlap_factor = rset.overlap_factor;
  report.union_bound = rset.union_bound;
  const double r_size = static_cast<double>(rset.ids.size());
  for (const auto& [task, count] : per_task) {
    TaskComposition row;
    row.task = task;
    row.retrieved = count;
    row.frac_of_r = static_cast<double>(count) / r_size;
    row.frac_of_task =
        static_cast<double>(count) / static_cast<double>(pool.counts.at(task));
    if (row.frac_of_task > report.max_frac_of_task) {
      report.max_frac_of_task = row.frac_of_task;
      report.max_task = task;
    }
    report.per_task.push_back(std::move(row));
  }
  std::sort(report.per_task.begin(), report.per_task.end(),
            [](const TaskComposition& a, const TaskComposition& b) {
              if (a.retrieved != b.retrieved) return a.retrieved > b.retrieved;
              return a.task < b.task;
            });
  return report;
}

inline nlohmann::json composition_to_json(const CompositionReport& report) {
  nlohmann::json per_task = nlohmann::json::array();
  for (const auto& row : report.per_task) {
    per_task.push_back({{"task", row.task},
                        {"retrieved", row.retrieved},
                        {"frac_of_R", row.frac_of_r},
                        {"frac_of_task", row.frac_of_task}});
  }
  return {{"per_task", per_task},
          {"overlap_factor", report.overlap_factor},
          {"union_bound", report.union_bound},
          {"max_frac_of_task", report.max_frac_of_task},
          {"max_task", report.max_task}};
}

/// Writes the retrieved instances (with targets and instructions) as pool
/// JSONL, ordered by instance id; byte-deterministic.
inline void export_training_set(const RetrievedSet& rset, const Pool& pool,
                                const std::string& path) {
  std::vector<PromptedInstance> out;
  out.reserve(rset.ids.size());
  for (const auto& id : rset.ids) out.push_back(pool.by_id(id));
  std::sort(out.begin(), out.end(),
            [](const PromptedInstance& a, const PromptedInstance& b) {
              return a.id < b.id;
            });
  write_jsonl(out, path);
}

// ---------------------------------------------------------------------------
// Retrieval sweeps
// ---------------------------------------------------------------------------

struct SweepCell {
  size_t query_size = 0;
  size_t k = 0;
  size_t r_size = 0;
  bool has_metric = false;
  double metric = 0.0;
};

using SweepMetricHook =
    std::function<double(const RetrievedSet&, size_t query_size, size_t k)>;

/// Grid over (query size, neighbors per query). Each query is searched once
/// at the largest k and smaller cells reuse ranked-list prefixes, so
/// R(k) ⊆ R(k') whenever k <= k' by construction.
inline std::vector<SweepCell> sweep_retrieval(
    const DenseIndex& di, const std::vector<PromptedInstance>& query_source,
    std::vector<size_t> query_sizes, std::vector<size_t> ks, uint64_t seed,
    const SweepMetricHook& hook = {}) {
  if (query_sizes.empty() || ks.empty())
    fail("bad-sweep", "query_sizes and ks must be non-empty");
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  const size_t k_max = ks.back();
  const size_t ef = std::max(di.index.params().ef_search, k_max);

  std::vector<SweepCell> cells;
  for (size_t q_size : query_sizes) {
    std::vector<PromptedInstance> queries = sample_queries(
        query_source, q_size, derive_seed(seed, "sweep.queries", q_size));
    std::vector<std::vector<std::string>> ranked(queries.size());
    for (size_t qi = 0; qi < queries.size(); ++qi) {
      Embedding e = embed_instance(queries[qi], di.embedder);
      for (const auto& hit : di.index.search(e.values, k_max, ef))
        ranked[qi].push_back(di.row_ids[hit.id]);
    }
    for (size_t k : ks) {
      detail::NeighborLists lists;
      lists.per_query.resize(queries.size());
      for (size_t qi = 0; qi < queries.size(); ++qi) {
        size_t take = std::min(k, ranked[qi].size());
        lists.per_query[qi].assign(ranked[qi].begin(),
                                   ranked[qi].begin() + take);
      }
      RetrievedSet rset = detail::union_neighbors(queries, lists, k);
      SweepCell cell;
      cell.query_size = queries.size();
      cell.k = k;
      cell.r_size = rset.ids.size();
      if (hook) {
        cell.metric = hook(rset, queries.size(), k);
        cell.has_metric = true;
      }
      cells.push_back(cell);
    }
  }
  return cells;
}

inline nlohmann::json retrieved_set_to_json(const RetrievedSet& rset) {
  nlohmann::json prov = nlohmann::json::object();
  for (const auto& [id, sources] : rset.provenance) prov[id] = sources;
  return {{"ids", rset.ids},
          {"provenance", prov},
          {"union_bound", rset.union_bound},
          {"overlap_factor", rset.overlap_factor}};
}

}  // namespace deft
