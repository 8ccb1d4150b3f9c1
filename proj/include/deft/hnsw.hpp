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
// Hierarchical navigable small world index.
//
// A layered proximity graph: layer 0 holds every node, higher layers are
// exponentially sparser express lanes. Inserts descend greedily from the
// entry point, then run a bounded best-first search per layer and pick
// neighbors with the closer-to-target-than-to-each-other heuristic. Links
// are directed; out-degree is capped at M per layer (2M on layer 0).
//
// Vectors are stored raw, or as product-quantization codes scored by ADC
// lookup tables, optionally with the raw matrix retained for re-ranking.
// Construction always runs on raw vectors; PQ storage is applied afterwards.
//

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <queue>
#include <string>
#include <unordered_map>
#include <vector>

#include "deft/core.hpp"
#include "deft/matrix.hpp"
#include "deft/pq.hpp"

namespace deft {

enum class Metric : uint8_t { kSquaredL2 = 0, kCosine = 1 };
enum class StorageKind : uint8_t { kRaw = 0, kPq = 1, kPqRerank = 2 };

struct HnswParams {
  size_t M = 16;
  size_t ef_construction = 200;
  size_t ef_search = 200;
  double level_mult = 0.0;  // 0 means 1/ln(M)
  uint64_t seed = 0;
  Metric metric = Metric::kCosine;

  double effective_level_mult() const {
    return level_mult > 0.0 ? level_mult
                            : 1.0 / std::log(static_cast<double>(M));
  }

  void validate() const {
    if (M < 2) fail("bad-params", "HNSW M must be >= 2");
    if (ef_construction < M)
      fail("bad-params", "ef_construction must be >= M");
    if (ef_search < 1) fail("bad-params", "ef_search must be >= 1");
  }
};

struct SearchHit {
  uint32_t id = 0;
  double distance = 0.0;
};

/// Cosine is implemented as squared L2 over unit-normalized vectors, which
/// is order-equivalent; squared-L2 compares raw vectors directly.
inline double metric_distance(Metric metric, const float* a, const float* b,
                              size_t dim) {
  if (metric == Metric::kCosine) {
    std::vector<float> na(a, a + dim), nb(b, b + dim);
    l2_normalize(na.data(), dim);
    l2_normalize(nb.data(), dim);
    return squared_l2(na.data(), nb.data(), dim);
  }
  return squared_l2(a, b, dim);
}

/// Exact k nearest by the metric; ties broken by ascending id. Ids are the
/// row positions of the matrix. This is the oracle the approximate index is
/// measured against.
inline std::vector<SearchHit> brute_force_knn(const FloatMatrix& vectors,
                                              const float* query, size_t k,
                                              Metric metric = Metric::kCosine) {
  std::vector<float> q(query, query + vectors.cols);
  FloatMatrix base = vectors;
  if (metric == Metric::kCosine) {
    l2_normalize(q.data(), q.size());
    for (size_t i = 0; i < base.rows; ++i) l2_normalize(base.row(i), base.cols);
  }
  std::vector<SearchHit> hits(base.rows);
  for (size_t i = 0; i < base.rows; ++i)
    hits[i] = {static_cast<uint32_t>(i),
               squared_l2(q.data(), base.row(i), base.cols)};
  k = std::min(k, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + k, hits.end(),
                    [](const SearchHit& a, const SearchHit& b) {
                      return a.distance != b.distance ? a.distance < b.distance
                                                      : a.id < b.id;
                    });
  hits.resize(k);
  return hits;
}

class HnswIndex {
 public:
  explicit HnswIndex(size_t dim, HnswParams params = {})
      : dim_(dim), params_(params) {
    params_.validate();
    if (dim_ == 0) fail("bad-dim", "vector dimension must be >= 1");
  }

  size_t size() const { return ids_.size(); }
  size_t dim() const { return dim_; }
  const HnswParams& params() const { return params_; }
  StorageKind storage_kind() const { return storage_; }
  int max_layer() const { return max_layer_; }
  uint32_t entry_id() const { return ids_[entry_slot_]; }

  /// Level sampler: floor(-ln(U) * level_mult) with U keyed by (seed, id),
  /// so a node's level does not depend on insertion order.
  static int sample_level(uint64_t seed, uint32_t id, double level_mult) {
    Rng rng(derive_seed(seed, "hnsw.level", id));
    double u = rng.uniform_open();
    return static_cast<int>(-std::log(u) * level_mult);
  }

  void insert(uint32_t id, const float* v) {
    if (storage_ != StorageKind::kRaw)
      fail("index-frozen", "cannot insert after PQ storage was applied");
    if (slot_of_.count(id))
      fail("duplicate-id", "id " + std::to_string(id) + " already present");
    const size_t slot = ids_.size();
    ids_.push_back(id);
    slot_of_.emplace(id, slot);
    vectors_.insert(vectors_.end(), v, v + dim_);
    if (params_.metric == Metric::kCosine)
      l2_normalize(vectors_.data() + slot * dim_, dim_);
    const float* q = vectors_.data() + slot * dim_;

    int level =
        sample_level(params_.seed, id, params_.effective_level_mult());
    levels_.push_back(level);
    links_.emplace_back(static_cast<size_t>(level) + 1);

    if (slot == 0) {
      entry_slot_ = 0;
      max_layer_ = level;
      return;
    }

    size_t cur = entry_slot_;
    double cur_dist = raw_distance(q, cur);
    for (int layer = max_layer_; layer > level; --layer)
      greedy_step(q, cur, cur_dist, layer);

    for (int layer = std::min(level, max_layer_); layer >= 0; --layer) {
      std::vector<std::pair<double, uint32_t>> found =
          search_layer_raw(q, cur, params_.ef_construction, layer);
      std::vector<std::pair<double, uint32_t>> selected =
          select_neighbors(q, found, params_.M);
      auto& own = links_[slot][layer];
      own.clear();
      for (const auto& [d, nb] : selected) {
        own.push_back(nb);
        add_backlink(nb, static_cast<uint32_t>(slot), layer);
      }
      if (!found.empty()) cur = found.front().second;
    }

    if (level > max_layer_) {
      entry_slot_ = slot;
      max_layer_ = level;
    }
  }

  void insert(uint32_t id, const std::vector<float>& v) {
    if (v.size() != dim_)
      fail("dim-mismatch", "vector dimension " + std::to_string(v.size()) +
                               " != index dimension " + std::to_string(dim_));
    insert(id, v.data());
  }

  /// k nearest stored vectors, ascending distance, ties by ascending id.
  /// ef overrides the candidate-list width (0 keeps params.ef_search); the
  /// effective width is never below k.
  std::vector<SearchHit> search(const float* query, size_t k,
                                size_t ef = 0) const {
    if (ids_.empty()) fail("empty-index", "search on empty index");
    if (k == 0) fail("bad-k", "k must be >= 1");
    std::vector<float> q(query, query + dim_);
    if (params_.metric == Metric::kCosine) l2_normalize(q.data(), dim_);

    const size_t ef_base = ef == 0 ? params_.ef_search : ef;
    const bool rerank = storage_ == StorageKind::kPqRerank;
    size_t ef_eff = std::max(ef_base, rerank ? 4 * k : k);

    AdcTable adc;
    if (storage_ != StorageKind::kRaw) adc = make_adc_table(codebook_, q.data());
    auto dist = [&](size_t slot) {
      return storage_ == StorageKind::kRaw
                 ? raw_distance(q.data(), slot)
                 : adc.distance(codes_.data() + slot * codebook_.m);
    };

    size_t cur = entry_slot_;
    double cur_dist = dist(cur);
    for (int layer = max_layer_; layer > 0; --layer)
      greedy_step_fn(dist, cur, cur_dist, layer);

    std::vector<std::pair<double, uint32_t>> found =
        search_layer_fn(dist, cur, ef_eff, 0);

    if (rerank) {
      size_t top = std::min(found.size(), 4 * k);
      found.resize(top);
      for (auto& [d, slot] : found) d = raw_distance(q.data(), slot);
    }

    std::vector<SearchHit> hits;
    hits.reserve(std::min(k, found.size()));
    std::sort(found.begin(), found.end(),
              [&](const auto& a, const auto& b) {
                return a.first != b.first ? a.first < b.first
                                          : ids_[a.second] < ids_[b.second];
              });
    for (const auto& [d, slot] : found) {
      if (hits.size() == k) break;
      hits.push_back({ids_[slot], d});
    }
    return hits;
  }

  std::vector<SearchHit> search(const std::vector<float>& q, size_t k,
                                size_t ef = 0) const {
    if (q.size() != dim_)
      fail("dim-mismatch", "query dimension mismatch");
    return search(q.data(), k, ef);
  }

  /// Converts storage to PQ codes trained elsewhere. With keep_raw the raw
  /// matrix is retained and searches re-rank the top ADC candidates.
  /// Further inserts are rejected afterwards.
  void apply_pq(const PqCodebook& cb, bool keep_raw) {
    if (storage_ != StorageKind::kRaw)
      fail("index-frozen", "PQ storage already applied");
    if (cb.dim != dim_) fail("dim-mismatch", "codebook dimension mismatch");
    codebook_ = cb;
    codes_.resize(ids_.size() * cb.m);
    for (size_t slot = 0; slot < ids_.size(); ++slot) {
      std::vector<uint8_t> code = encode_pq(cb, vectors_.data() + slot * dim_);
      std::copy(code.begin(), code.end(), codes_.begin() + slot * cb.m);
    }
    if (!keep_raw) vectors_.clear();
    storage_ = keep_raw ? StorageKind::kPqRerank : StorageKind::kPq;
  }

  // --- introspection used by tests and invariant checks ---

  int node_level(uint32_t id) const { return levels_[slot_of_.at(id)]; }

  size_t out_degree(uint32_t id, int layer) const {
    const auto& per_node = links_[slot_of_.at(id)];
    if (layer >= static_cast<int>(per_node.size())) return 0;
    return per_node[layer].size();
  }

  size_t degree_cap(int layer) const {
    return layer == 0 ? 2 * params_.M : params_.M;
  }

  /// True when every node is reachable from the entry point on layer 0.
  bool all_reachable() const {
    if (ids_.empty()) return true;
    std::vector<char> seen(ids_.size(), 0);
    std::vector<size_t> stack{entry_slot_};
    seen[entry_slot_] = 1;
    size_t count = 0;
    while (!stack.empty()) {
      size_t cur = stack.back();
      stack.pop_back();
      ++count;
      for (uint32_t nb : links_[cur][0]) {
        if (!seen[nb]) {
          seen[nb] = 1;
          stack.push_back(nb);
        }
      }
    }
    return count == ids_.size();
  }

  const float* raw_vector(uint32_t id) const {
    if (vectors_.empty()) fail("no-raw", "raw vectors not stored");
    return vectors_.data() + slot_of_.at(id) * dim_;
  }

  // --- serialization: magic "DEFTHNSW", little-endian throughout ---

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("io-open", "cannot open " + path);
    io::write_bytes(out, "DEFTHNSW", 8);
    io::write_u32(out, kFormatVersion);
    io::write_u32(out, static_cast<uint32_t>(params_.M));
    io::write_u32(out, static_cast<uint32_t>(params_.ef_construction));
    io::write_u32(out, static_cast<uint32_t>(params_.ef_search));
    io::write_f64(out, params_.level_mult);
    io::write_u64(out, params_.seed);
    io::write_u8(out, static_cast<uint8_t>(params_.metric));
    io::write_u8(out, static_cast<uint8_t>(storage_));
    io::write_u32(out, static_cast<uint32_t>(dim_));
    io::write_u32(out, static_cast<uint32_t>(ids_.size()));
    io::write_u32(out, static_cast<uint32_t>(entry_slot_));
    io::write_i32(out, max_layer_);
    for (size_t slot = 0; slot < ids_.size(); ++slot) {
      io::write_u32(out, ids_[slot]);
      io::write_i32(out, levels_[slot]);
      for (const auto& layer_links : links_[slot]) {
        io::write_u32(out, static_cast<uint32_t>(layer_links.size()));
        for (uint32_t nb : layer_links) io::write_u32(out, nb);
      }
    }
    if (storage_ == StorageKind::kRaw || storage_ == StorageKind::kPqRerank)
      for (float v : vectors_) io::write_f32(out, v);
    if (storage_ != StorageKind::kRaw) {
      write_codebook(out, codebook_);
      io::write_bytes(out, codes_.data(), codes_.size());
    }
    if (!out) fail("io-write", "failed writing " + path);
  }

  static HnswIndex load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("no-such-file", "cannot open index file " + path);
    io::expect_magic(in, "DEFTHNSW", path);
    uint32_t version = io::read_u32(in);
    if (version != kFormatVersion)
      fail("bad-version", path + ": unsupported index format version " +
                              std::to_string(version));
    HnswParams params;
    params.M = io::read_u32(in);
    params.ef_construction = io::read_u32(in);
    params.ef_search = io::read_u32(in);
    params.level_mult = io::read_f64(in);
    params.seed = io::read_u64(in);
    params.metric = static_cast<Metric>(io::read_u8(in));
    StorageKind storage = static_cast<StorageKind>(io::read_u8(in));
    uint32_t dim = io::read_u32(in);
    uint32_t count = io::read_u32(in);
    HnswIndex index(dim, params);
    index.storage_ = storage;
    index.entry_slot_ = io::read_u32(in);
    index.max_layer_ = io::read_i32(in);
    index.ids_.resize(count);
    index.levels_.resize(count);
    index.links_.resize(count);
    for (uint32_t slot = 0; slot < count; ++slot) {
      index.ids_[slot] = io::read_u32(in);
      index.slot_of_.emplace(index.ids_[slot], slot);
      int level = io::read_i32(in);
      index.levels_[slot] = level;
      index.links_[slot].resize(static_cast<size_t>(level) + 1);
      for (auto& layer_links : index.links_[slot]) {
        uint32_t deg = io::read_u32(in);
        layer_links.resize(deg);
        for (auto& nb : layer_links) nb = io::read_u32(in);
      }
    }
    if (storage == StorageKind::kRaw || storage == StorageKind::kPqRerank) {
      index.vectors_.resize(static_cast<size_t>(count) * dim);
      for (float& v : index.vectors_) v = io::read_f32(in);
    }
    if (storage != StorageKind::kRaw) {
      index.codebook_ = read_codebook(in);
      index.codes_.resize(static_cast<size_t>(count) * index.codebook_.m);
      if (!index.codes_.empty())
        io::read_bytes(in, index.codes_.data(), index.codes_.size());
    }
    return index;
  }

 private:
  static constexpr uint32_t kFormatVersion = 1;

  double raw_distance(const float* q, size_t slot) const {
    return squared_l2(q, vectors_.data() + slot * dim_, dim_);
  }

  template <class DistFn>
  void greedy_step_fn(const DistFn& dist, size_t& cur, double& cur_dist,
                      int layer) const {
    bool moved = true;
    while (moved) {
      moved = false;
      if (layer >= static_cast<int>(links_[cur].size())) return;
      for (uint32_t nb : links_[cur][layer]) {
        double d = dist(nb);
        if (d < cur_dist) {
          cur = nb;
          cur_dist = d;
          moved = true;
        }
      }
    }
  }

  void greedy_step(const float* q, size_t& cur, double& cur_dist,
                   int layer) const {
    greedy_step_fn([&](size_t slot) { return raw_distance(q, slot); }, cur,
                   cur_dist, layer);
  }

  /// Bounded best-first search on one layer; returns up to ef (distance,
  /// slot) pairs sorted ascending. Deterministic: heap keys include slots.
  template <class DistFn>
  std::vector<std::pair<double, uint32_t>> search_layer_fn(const DistFn& dist,
                                                           size_t entry,
                                                           size_t ef,
                                                           int layer) const {
    using Entry = std::pair<double, uint32_t>;
    std::priority_queue<Entry, std::vector<Entry>, std::greater<Entry>>
        candidates;
    std::priority_queue<Entry> results;
    std::vector<char> visited(ids_.size(), 0);

    double d0 = dist(entry);
    candidates.emplace(d0, static_cast<uint32_t>(entry));
    results.emplace(d0, static_cast<uint32_t>(entry));
    visited[entry] = 1;

    while (!candidates.empty()) {
      auto [cd, cslot] = candidates.top();
      candidates.pop();
      if (cd > results.top().first && results.size() >= ef) break;
      if (layer < static_cast<int>(links_[cslot].size())) {
        for (uint32_t nb : links_[cslot][layer]) {
          if (visited[nb]) continue;
          visited[nb] = 1;
          double d = dist(nb);
          if (results.size() < ef || d < results.top().first) {
            candidates.emplace(d, nb);
            results.emplace(d, nb);
            if (results.size() > ef) results.pop();
          }
        }
      }
    }
    std::vector<Entry> out(results.size());
    for (size_t i = out.size(); i-- > 0;) {
      out[i] = results.top();
      results.pop();
    }
    return out;
  }

  std::vector<std::pair<double, uint32_t>> search_layer_raw(const float* q,
                                                            size_t entry,
                                                            size_t ef,
                                                            int layer) const {
    return search_layer_fn([&](size_t slot) { return raw_distance(q, slot); },
                           entry, ef, layer);
  }

  /// Neighbor-selection heuristic: walk candidates by ascending distance to
  /// the target and keep those closer to the target than to any neighbor
  /// already kept; pruned candidates fill remaining capacity in order.
  std::vector<std::pair<double, uint32_t>> select_neighbors(
      const float* target,
      const std::vector<std::pair<double, uint32_t>>& candidates,
      size_t max_count) const {
    std::vector<std::pair<double, uint32_t>> selected;
    std::vector<std::pair<double, uint32_t>> pruned;
    for (const auto& cand : candidates) {
      if (selected.size() >= max_count) break;
      bool keep = true;
      const float* cand_vec = vectors_.data() + cand.second * dim_;
      for (const auto& sel : selected) {
        double d_cs =
            squared_l2(cand_vec, vectors_.data() + sel.second * dim_, dim_);
        if (d_cs < cand.first) {
          keep = false;
          break;
        }
      }
      (keep ? selected : pruned).push_back(cand);
    }
    for (const auto& cand : pruned) {
      if (selected.size() >= max_count) break;
      selected.push_back(cand);
    }
    return selected;
  }

  void add_backlink(uint32_t node, uint32_t target, int layer) {
    auto& adj = links_[node][layer];
    adj.push_back(target);
    const size_t cap = degree_cap(layer);
    if (adj.size() <= cap) return;
    // Over capacity: re-select among current neighbors w.r.t. this node.
    const float* base = vectors_.data() + node * dim_;
    std::vector<std::pair<double, uint32_t>> cands;
    cands.reserve(adj.size());
    for (uint32_t nb : adj)
      cands.emplace_back(raw_distance(base, nb), nb);
    std::sort(cands.begin(), cands.end());
    auto kept = select_neighbors(base, cands, cap);
    adj.clear();
    for (const auto& [d, nb] : kept) adj.push_back(nb);
  }

  size_t dim_;
  HnswParams params_;
  StorageKind storage_ = StorageKind::kRaw;

  std::vector<uint32_t> ids_;                       // slot -> external id
  std::unordered_map<uint32_t, size_t> slot_of_;    // external id -> slot
  std::vector<float> vectors_;                      // slot-major raw storage
  std::vector<int> levels_;
  std::vector<std::vector<std::vector<uint32_t>>> links_;  // [slot][layer]
  size_t entry_slot_ = 0;
  int max_layer_ = 0;

  PqCodebook codebook_;
  std::vector<uint8_t> codes_;
};

/// Mean over queries of |approximate ∩ exact| / k against the brute-force
/// oracle over the same vectors.
inline double recall_at_k(const HnswIndex& index, const FloatMatrix& vectors,
                          const FloatMatrix& queries, size_t k) {
  if (queries.rows == 0) return 1.0;
  double total = 0.0;
  for (size_t qi = 0; qi < queries.rows; ++qi) {
    std::vector<SearchHit> approx = index.search(queries.row(qi), k);
    std::vector<SearchHit> exact =
        brute_force_knn(vectors, queries.row(qi), k, index.params().metric);
    std::vector<uint32_t> exact_ids;
    exact_ids.reserve(exact.size());
    for (const auto& hit : exact) exact_ids.push_back(hit.id);
    std::sort(exact_ids.begin(), exact_ids.end());
    size_t overlap = 0;
    for (const auto& hit : approx)
      overlap += std::binary_search(exact_ids.begin(), exact_ids.end(),
                                    hit.id)
                     ? 1
                     : 0;
    total += static_cast<double>(overlap) / static_cast<double>(k);
  }
  return total / static_cast<double>(queries.rows);
}

}  // namespace deft
