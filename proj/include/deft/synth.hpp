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
// Synthetic multitask pools and the experiment harness.
//
// Tasks are grouped into latent skill clusters. Every instance carries one
// shared "sig-*" trigger token; the cluster's seeded permutation of the
// trigger inventory decides which of the cluster's two label strings is the
// target, so targets are always recomputable from inputs. Clusters overlap
// through a shared content vocabulary (default 30%) and the conflicting
// per-cluster trigger assignments, which makes retrieval non-trivial and
// off-cluster training data actively interfering.
//
// The harness runs retrieval-selected finetuning against size-matched random
// subsets, query-size/neighbor sweeps, and annotation-budget comparisons,
// all evaluated by rank classification over the target cluster's labels.
//

#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "deft/core.hpp"
#include "deft/model.hpp"
#include "deft/pool.hpp"
#include "deft/retrieve.hpp"

namespace deft {

struct SynthSpec {
  size_t n_clusters = 4;
  size_t tasks_per_cluster = 5;
  size_t instances_per_task = 200;
  size_t cluster_vocab_size = 30;  // cluster-specific content tokens
  size_t shared_vocab_size = 20;   // content tokens shared by all clusters
  size_t triggers_per_side = 16;   // trigger inventory is 2x this
  size_t tokens_per_instance = 8;
  double shared_fraction = 0.3;
  // Tasks over-sample their own trigger bucket at this rate, so sibling
  // tasks cover a held-out task's dominant triggers only thinly: in-task
  // examples carry more information per instance than cross-task ones.
  double task_trigger_bias = 0.6;
  uint64_t seed = 0;

  void validate() const {
    if (n_clusters == 0 || tasks_per_cluster == 0 || instances_per_task == 0)
      fail("bad-synth-spec", "cluster/task/instance counts must be >= 1");
    if (tokens_per_instance < 2)
      fail("bad-synth-spec", "tokens_per_instance must be >= 2");
    if (triggers_per_side == 0)
      fail("bad-synth-spec", "triggers_per_side must be >= 1");
  }
};

inline std::array<std::string, 2> cluster_labels(size_t cluster) {
  return {"lab-c" + std::to_string(cluster) + "-x",
          "lab-c" + std::to_string(cluster) + "-y"};
}

namespace detail {

/// Seeded permutation of the trigger inventory for one cluster; the first
/// half maps to label x, the second to label y.
inline std::vector<size_t> trigger_permutation(const SynthSpec& spec,
                                               size_t cluster) {
  std::vector<size_t> perm(2 * spec.triggers_per_side);
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  Rng rng(derive_seed(spec.seed, "synth.perm", cluster));
  rng.shuffle(perm);
  return perm;
}

inline size_t trigger_side(const std::vector<size_t>& perm, size_t trigger) {
  for (size_t pos = 0; pos < perm.size(); ++pos)
    if (perm[pos] == trigger) return pos < perm.size() / 2 ? 0 : 1;
  fail("bad-trigger", "trigger not in permutation");
}

}  // namespace detail

/// The cluster's deterministic label rule: find the unique sig-* token and
/// map it through the cluster's trigger permutation.
inline std::string synth_label(const SynthSpec& spec, size_t cluster,
                               const std::string& input_text) {
  std::vector<size_t> perm = detail::trigger_permutation(spec, cluster);
  std::optional<size_t> trigger;
  for (const auto& tok : tokenize(input_text)) {
    if (tok.rfind("sig-", 0) != 0) continue;
    if (trigger.has_value())
      fail("bad-instance", "instance carries more than one trigger");
    trigger = std::stoul(tok.substr(4));
  }
  if (!trigger.has_value())
    fail("bad-instance", "instance carries no trigger token");
  return cluster_labels(cluster)[detail::trigger_side(perm, *trigger)];
}

struct HeldOutTask {
  size_t cluster = 0;
  std::string task_name;
  std::vector<PromptedInstance> instances;  // labeled
};

struct GeneratedPool {
  Pool pool;
  HeldOutTask held_out;
};

/// Generates the multitask pool. One task of the target cluster is held
/// out: its instances never enter the pool and serve as unlabeled queries
/// plus the labeled evaluation split.
inline GeneratedPool gen_pool(const SynthSpec& spec, size_t target_cluster = 0) {
  spec.validate();
  if (target_cluster >= spec.n_clusters)
    fail("bad-cluster", "target cluster out of range");

  const size_t held_out_task = static_cast<size_t>(
      Rng(derive_seed(spec.seed, "synth.heldout", target_cluster))
          .below(spec.tasks_per_cluster));

  GeneratedPool out;
  out.held_out.cluster = target_cluster;

  for (size_t c = 0; c < spec.n_clusters; ++c) {
    std::vector<size_t> perm = detail::trigger_permutation(spec, c);
    auto labels = cluster_labels(c);
    for (size_t t = 0; t < spec.tasks_per_cluster; ++t) {
      std::string task_name =
          "c" + std::to_string(c) + "-task" + std::to_string(t);
      std::string instruction = "decide the signal side for family f" +
                                std::to_string(c) + " variant " +
                                std::to_string(t);
      bool is_held_out = (c == target_cluster && t == held_out_task);
      if (is_held_out) out.held_out.task_name = task_name;
      // this task's trigger bucket: every tasks_per_cluster-th trigger
      std::vector<size_t> bucket;
      for (size_t tr = t; tr < 2 * spec.triggers_per_side;
           tr += spec.tasks_per_cluster)
        bucket.push_back(tr);
      for (size_t i = 0; i < spec.instances_per_task; ++i) {
        Rng rng(derive_seed(spec.seed, "synth.inst",
                            (c * spec.tasks_per_cluster + t) *
                                    spec.instances_per_task +
                                i));
        size_t trigger =
            (!bucket.empty() && rng.uniform() < spec.task_trigger_bias)
                ? bucket[rng.below(bucket.size())]
                : static_cast<size_t>(rng.below(2 * spec.triggers_per_side));
        std::vector<std::string> tokens;
        tokens.push_back("sig-" + std::to_string(trigger));
        for (size_t w = 1; w < spec.tokens_per_instance; ++w) {
          if (rng.uniform() < spec.shared_fraction)
            tokens.push_back("com-" +
                             std::to_string(rng.below(spec.shared_vocab_size)));
          else
            tokens.push_back("c" + std::to_string(c) + "-w" +
                             std::to_string(rng.below(spec.cluster_vocab_size)));
        }
        rng.shuffle(tokens);
        std::string text;
        for (size_t w = 0; w < tokens.size(); ++w)
          text += (w ? " " : "") + tokens[w];

        PromptedInstance inst;
        inst.id = task_name + "/" + std::to_string(i);
        inst.source_task = task_name;
        inst.input_text = text;
        inst.target_text = labels[detail::trigger_side(perm, trigger)];
        inst.instruction = instruction;
        if (is_held_out)
          out.held_out.instances.push_back(std::move(inst));
        else
          out.pool.add(std::move(inst));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

struct HarnessConfig {
  size_t query_size = 50;
  size_t k = 20;
  size_t eval_size = 100;
  size_t embed_dim = 96;
  HnswParams hnsw{.M = 16, .ef_construction = 100, .ef_search = 100};

  ModelConfig model{.num_layers = 2,
                    .d_model = 64,
                    .heads = 4,
                    .d_ff = 128,
                    .max_len = 24};
  double learning_rate = 1.2e-3;  // desk-scale peak for from-scratch training
  size_t epochs = 5;
  size_t batch_size = 8;
  size_t sweep_steps = 500;   // fixed step budget for sweep cells
  size_t budget_steps = 500;  // step budget shared by both budget conditions
  size_t budget_k = 150;      // neighbors per query for the budget study
};

enum class Condition { kDeft, kRandomSubset, kAllData, kBm25 };

inline std::string condition_name(Condition c) {
  switch (c) {
    case Condition::kDeft: return "deft";
    case Condition::kRandomSubset: return "random-subset";
    case Condition::kAllData: return "all-data";
    case Condition::kBm25: return "bm25";
  }
  return "?";
}

struct ConditionResult {
  std::string name;
  size_t train_size = 0;
  double accuracy = 0.0;
  double runtime_sec = 0.0;  // logged, never serialized into artifacts
};

struct BudgetRow {
  size_t budget = 0;
  size_t labeled_train_size = 0;
  size_t deft_query_size = 0;
  size_t deft_train_size = 0;
  double labeled_accuracy = 0.0;
  double deft_accuracy = 0.0;
  bool clipped = false;
};

struct BudgetCurve {
  double cost_ratio = 3.25;
  std::vector<BudgetRow> rows;
  std::optional<size_t> crossover_budget;  // first budget where labeled wins
};

struct ExperimentReport {
  std::string target_task;
  size_t query_size = 0;
  size_t k = 0;
  size_t eval_size = 0;
  std::vector<ConditionResult> conditions;
  std::vector<SweepCell> sweep;
  std::optional<BudgetCurve> budget;
};

namespace detail {

struct EvalSplit {
  std::vector<PromptedInstance> eval;       // labeled, never trained on
  std::vector<PromptedInstance> available;  // query / budget source
};

inline EvalSplit split_held_out(const HeldOutTask& held_out, size_t eval_size,
                                uint64_t seed) {
  std::vector<size_t> order(held_out.instances.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, "synth.split"));
  rng.shuffle(order);
  EvalSplit split;
  eval_size = std::min(eval_size, order.size());
  for (size_t i = 0; i < order.size(); ++i) {
    if (i < eval_size)
      split.eval.push_back(held_out.instances[order[i]]);
    else
      split.available.push_back(held_out.instances[order[i]]);
  }
  return split;
}

inline std::vector<PromptedInstance> instances_for_ids(
    const Pool& pool, const std::vector<std::string>& ids) {
  std::vector<PromptedInstance> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(pool.by_id(id));
  std::sort(out.begin(), out.end(),
            [](const PromptedInstance& a, const PromptedInstance& b) {
              return a.id < b.id;
            });
  return out;
}

/// Trains a fresh model on the given set and scores rank-classification
/// accuracy over the cluster's label inventory.
inline double train_and_eval(const std::vector<PromptedInstance>& train_set,
                             const std::vector<PromptedInstance>& eval_set,
                             const std::array<std::string, 2>& labels,
                             const HarnessConfig& cfg, uint64_t seed,
                             size_t fixed_steps = 0) {
  if (train_set.empty()) return 0.0;
  ModelConfig mc = cfg.model;
  mc.seed = derive_seed(seed, "harness.model");
  Transformer model(mc, Vocab::build(train_set));
  TrainConfig tc;
  tc.mode = TrainMode::kFull;
  if (fixed_steps > 0)
    tc.steps = fixed_steps;
  else
    tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.learning_rate = cfg.learning_rate;
  tc.warmup_fraction = 0.1;
  tc.optimizer = OptimizerKind::kAdam;
  tc.seed = derive_seed(seed, "harness.train");
  model.train(train_set, tc);

  size_t correct = 0;
  std::vector<std::string> choices(labels.begin(), labels.end());
  for (const auto& inst : eval_set) {
    auto result = model.rank_classify(compose_text(inst, true), choices);
    if (choices[result.argmin] == inst.target_text) ++correct;
  }
  return eval_set.empty() ? 0.0
                          : static_cast<double>(correct) /
                                static_cast<double>(eval_set.size());
}

/// Runs jobs on up to max_workers() threads, results in job order.
template <class Fn>
inline void run_jobs(std::vector<Fn>& jobs) {
  size_t workers = std::min(max_workers(), jobs.size());
  if (workers <= 1) {
    for (auto& job : jobs) job();
    return;
  }
  std::vector<std::thread> threads;
  std::atomic<size_t> next{0};
  for (size_t w = 0; w < workers; ++w)
    threads.emplace_back([&]() {
      for (;;) {
        size_t i = next.fetch_add(1);
        if (i >= jobs.size()) return;
        jobs[i]();
      }
    });
  for (auto& t : threads) t.join();
}

}  // namespace detail

/// Builds the retrieval index over the pool with the hashed embedder
/// (instructions excluded from encoding by default, matching the stronger
/// no-instruction retrieval setting).
inline DenseIndex harness_index(const Pool& pool, const HarnessConfig& cfg,
                                uint64_t seed) {
  EmbedderConfig ec;
  ec.variant = EmbedderVariant::kHashedToken;
  ec.dim = cfg.embed_dim;
  ec.seed = derive_seed(seed, "harness.embed");
  ec.include_instruction = false;
  HnswParams params = cfg.hnsw;
  params.seed = derive_seed(seed, "harness.hnsw");
  return build_dense_index(pool, ec, params);
}

/// Executes embed -> index -> retrieve -> train -> rank-classify per
/// condition. The random-subset condition samples exactly |R| instances.
inline ExperimentReport run_experiment(const Pool& pool,
                                       const HeldOutTask& held_out,
                                       const std::vector<Condition>& conditions,
                                       uint64_t seed,
                                       const HarnessConfig& cfg = {}) {
  if (conditions.empty()) fail("bad-conditions", "no conditions given");
  if (pool.size() == 0) fail("empty-pool", "pool is empty");

  detail::EvalSplit split =
      detail::split_held_out(held_out, cfg.eval_size, seed);
  auto labels = cluster_labels(held_out.cluster);

  std::vector<PromptedInstance> queries = sample_queries(
      split.available, cfg.query_size, derive_seed(seed, "exp.queries"));

  DenseIndex index = harness_index(pool, cfg, seed);
  RetrievalRequest req;
  req.queries = queries;
  req.k = cfg.k;
  req.include_instruction = false;
  RetrievedSet deft_set = cross_task_retrieve(index, req);
  std::vector<PromptedInstance> deft_train =
      detail::instances_for_ids(pool, deft_set.ids);

  ExperimentReport report;
  report.target_task = held_out.task_name;
  report.query_size = queries.size();
  report.k = cfg.k;
  report.eval_size = split.eval.size();
  report.conditions.resize(conditions.size());

  std::vector<std::function<void()>> jobs;
  for (size_t ci = 0; ci < conditions.size(); ++ci) {
    jobs.emplace_back([&, ci]() {
      Condition cond = conditions[ci];
      ConditionResult result;
      result.name = condition_name(cond);
      auto start = std::chrono::steady_clock::now();
      std::vector<PromptedInstance> train_set;
      switch (cond) {
        case Condition::kDeft:
          train_set = deft_train;
          break;
        case Condition::kRandomSubset: {
          Rng rng(derive_seed(seed, "exp.random"));
          auto picks = rng.sample_indices(pool.size(), deft_train.size());
          std::sort(picks.begin(), picks.end());
          for (size_t p : picks) train_set.push_back(pool.instances[p]);
          break;
        }
        case Condition::kAllData:
          train_set = pool.instances;
          break;
        case Condition::kBm25: {
          RetrievalRequest breq = req;
          breq.engine = RetrievalEngine::kBm25;
          RetrievedSet bset = bm25_retrieve(pool, breq);
          if (bset.ids.size() > deft_train.size())
            bset.ids.resize(deft_train.size());  // size-match to DEFT
          train_set = detail::instances_for_ids(pool, bset.ids);
          break;
        }
      }
      result.train_size = train_set.size();
      result.accuracy = detail::train_and_eval(
          train_set, split.eval, labels, cfg, derive_seed(seed, "exp.cond", ci));
      result.runtime_sec =
          std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                        start)
              .count();
      report.conditions[ci] = std::move(result);
    });
  }
  detail::run_jobs(jobs);
  return report;
}

/// Accuracy-vs-retrieved-size sweep at a fixed query size. Cells share the
/// per-query ranked lists, so retrieved sets grow monotonically in k; every
/// cell trains with the same fixed step budget.
inline std::vector<SweepCell> synth_sweep(const Pool& pool,
                                          const HeldOutTask& held_out,
                                          const std::vector<size_t>& ks,
                                          uint64_t seed,
                                          const HarnessConfig& cfg = {}) {
  detail::EvalSplit split =
      detail::split_held_out(held_out, cfg.eval_size, seed);
  auto labels = cluster_labels(held_out.cluster);
  DenseIndex index = harness_index(pool, cfg, seed);
  return sweep_retrieval(
      index, split.available, {cfg.query_size}, ks,
      derive_seed(seed, "sweep"),
      [&](const RetrievedSet& rset, size_t, size_t k) {
        std::vector<PromptedInstance> train_set =
            detail::instances_for_ids(pool, rset.ids);
        return detail::train_and_eval(train_set, split.eval, labels, cfg,
                                      derive_seed(seed, "sweep.cell", k),
                                      cfg.sweep_steps);
      });
}

/// Annotation-budget comparison: B labeled target instances with full
/// finetuning versus cost_ratio * B unlabeled queries driving retrieval
/// and finetuning on the neighbors. Budgets beyond the available data are
/// clipped.
inline BudgetCurve budget_curve(const Pool& pool, const HeldOutTask& held_out,
                                double cost_ratio,
                                const std::vector<size_t>& budgets,
                                uint64_t seed, const HarnessConfig& cfg = {},
                                std::string* warnings = nullptr) {
  if (cost_ratio <= 0.0) fail("bad-cost-ratio", "cost_ratio must be > 0");
  detail::EvalSplit split =
      detail::split_held_out(held_out, cfg.eval_size, seed);
  auto labels = cluster_labels(held_out.cluster);
  DenseIndex index = harness_index(pool, cfg, seed);

  // One seeded shuffle of the available data; budgets take prefixes so
  // larger budgets strictly extend smaller ones.
  std::vector<PromptedInstance> ordered = split.available;
  {
    std::vector<size_t> order(ordered.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, "budget.order"));
    rng.shuffle(order);
    std::vector<PromptedInstance> shuffled;
    for (size_t i : order) shuffled.push_back(split.available[i]);
    ordered = std::move(shuffled);
  }

  BudgetCurve curve;
  curve.cost_ratio = cost_ratio;
  for (size_t budget : budgets) {
    BudgetRow row;
    row.budget = budget;

    size_t labeled_n = budget;
    if (labeled_n > ordered.size()) {
      labeled_n = ordered.size();
      row.clipped = true;
    }
    std::vector<PromptedInstance> labeled(ordered.begin(),
                                          ordered.begin() + labeled_n);
    row.labeled_train_size = labeled_n;
    row.labeled_accuracy = detail::train_and_eval(
        labeled, split.eval, labels, cfg,
        derive_seed(seed, "budget.labeled", budget), cfg.budget_steps);

    size_t query_n =
        static_cast<size_t>(cost_ratio * static_cast<double>(budget));
    if (query_n > ordered.size()) {
      query_n = ordered.size();
      row.clipped = true;
    }
    query_n = std::max<size_t>(query_n, 1);
    std::vector<PromptedInstance> queries(ordered.begin(),
                                          ordered.begin() + query_n);
    for (auto& q : queries) q.target_text.clear();  // unlabeled by contract
    row.deft_query_size = query_n;

    RetrievalRequest req;
    req.queries = queries;
    req.k = cfg.budget_k;
    req.include_instruction = false;
    RetrievedSet rset = cross_task_retrieve(index, req);
    std::vector<PromptedInstance> deft_train =
        detail::instances_for_ids(pool, rset.ids);
    row.deft_train_size = deft_train.size();
    row.deft_accuracy = detail::train_and_eval(
        deft_train, split.eval, labels, cfg,
        derive_seed(seed, "budget.deft", budget), cfg.budget_steps);

    if (row.clipped && warnings)
      *warnings += "budget " + std::to_string(budget) +
                   " clipped to available data\n";
    curve.rows.push_back(row);
  }
  for (const auto& row : curve.rows) {
    if (row.labeled_accuracy >= row.deft_accuracy) {
      curve.crossover_budget = row.budget;
      break;
    }
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Serialization (runtime fields are intentionally excluded so artifacts are
// byte-stable across reruns)
// ---------------------------------------------------------------------------

inline nlohmann::json report_to_json(const ExperimentReport& report) {
  nlohmann::json conditions = nlohmann::json::array();
  for (const auto& c : report.conditions)
    conditions.push_back({{"name", c.name},
                          {"train_size", c.train_size},
                          {"accuracy", c.accuracy}});
  nlohmann::json out = {{"target_task", report.target_task},
                        {"query_size", report.query_size},
                        {"k", report.k},
                        {"eval_size", report.eval_size},
                        {"conditions", conditions}};
  if (!report.sweep.empty()) {
    nlohmann::json sweep = nlohmann::json::array();
    for (const auto& cell : report.sweep)
      sweep.push_back({{"query_size", cell.query_size},
                       {"k", cell.k},
                       {"r_size", cell.r_size},
                       {"accuracy", cell.metric}});
    out["sweep"] = sweep;
  }
  if (report.budget.has_value()) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : report.budget->rows)
      rows.push_back({{"budget", row.budget},
                      {"labeled_train_size", row.labeled_train_size},
                      {"deft_query_size", row.deft_query_size},
                      {"deft_train_size", row.deft_train_size},
                      {"labeled_accuracy", row.labeled_accuracy},
                      {"deft_accuracy", row.deft_accuracy},
                      {"clipped", row.clipped}});
    nlohmann::json budget = {{"cost_ratio", report.budget->cost_ratio},
                             {"rows", rows}};
    if (report.budget->crossover_budget.has_value())
      budget["crossover_budget"] = *report.budget->crossover_budget;
    else
      budget["crossover_budget"] = nullptr;
    out["budget"] = budget;
  }
  return out;
}

inline void write_sweep_csv(const std::vector<SweepCell>& cells,
                            const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("io-open", "cannot open " + path);
  out << "query_size,k,r_size,accuracy\n";
  char buf[96];
  for (const auto& cell : cells) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%.6f\n", cell.query_size,
                  cell.k, cell.r_size, cell.metric);
    out << buf;
  }
}

}  // namespace deft
