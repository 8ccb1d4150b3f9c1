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
// Acceptance suite: the end-to-end properties the pipeline must hold, from
// retrieval-set algebra through index quality, quantization, adapters, and
// the desk-scale experiment analogs. Each criterion prints one pass/fail
// line; run the whole binary or a single criterion via --test-case.
//

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "deft/bm25.hpp"
#include "deft/embed.hpp"
#include "deft/hnsw.hpp"
#include "deft/model.hpp"
#include "deft/pool.hpp"
#include "deft/pq.hpp"
#include "deft/retrieve.hpp"
#include "deft/synth.hpp"

using namespace deft;
namespace fs = std::filesystem;

namespace {

struct Criterion {
  const char* label;
  bool ok = true;
  std::chrono::steady_clock::time_point start =
      std::chrono::steady_clock::now();

  explicit Criterion(const char* l) : label(l) {}

  double elapsed() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start)
        .count();
  }

  void done() {
    std::printf("[%s] %s (%.1fs)\n", ok ? "PASS" : "FAIL", label, elapsed());
    std::fflush(stdout);
  }
};

#define ACHECK(crit, cond)     \
  do {                         \
    bool c_ = (cond);          \
    (crit).ok &= c_;           \
    CHECK(c_);                 \
  } while (0)

double median5(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

FloatMatrix gaussian_matrix(size_t n, size_t d, uint64_t seed) {
  Rng rng(seed);
  FloatMatrix m(n, d);
  for (auto& x : m.data) x = static_cast<float>(rng.normal());
  return m;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("criterion 1: retrieval union bound and monotonicity") {
  Criterion crit(
      "criterion 1: |R| <= |Q|*k and R(k) subset of R(k') over 1000 trials");

  Rng trial_rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    uint64_t seed = 5000 + trial;
    // random pool of 2-4 tasks, 20-120 instances, word-soup texts
    Pool pool;
    Rng gen(derive_seed(seed, "acc1.pool"));
    size_t n_tasks = 2 + gen.below(3);
    size_t n = 20 + gen.below(101);
    for (size_t i = 0; i < n; ++i) {
      PromptedInstance inst;
      size_t task = gen.below(n_tasks);
      inst.id = "t" + std::to_string(task) + "/" + std::to_string(i);
      inst.source_task = "t" + std::to_string(task);
      std::string text;
      for (int w = 0; w < 6; ++w)
        text += (w ? " " : "") + std::string("v") +
                std::to_string(task * 17 + gen.below(25));
      inst.input_text = text;
      pool.add(inst);
    }
    std::vector<PromptedInstance> queries;
    size_t n_q = 1 + gen.below(8);
    for (size_t q = 0; q < n_q; ++q) {
      PromptedInstance inst;
      inst.id = "q/" + std::to_string(q);
      std::string text;
      for (int w = 0; w < 6; ++w)
        text += (w ? " " : "") + std::string("v") + std::to_string(gen.below(60));
      inst.input_text = text;
      queries.push_back(inst);
    }
    size_t k = 1 + gen.below(10);
    size_t k_big = k + 1 + gen.below(6);

    RetrievalRequest req;
    req.queries = queries;
    const bool dense = trial % 2 == 0;
    RetrievedSet small, large;
    if (dense) {
      EmbedderConfig ec;
      ec.dim = 24;
      ec.seed = derive_seed(seed, "acc1.embed");
      HnswParams params;
      params.M = 6;
      params.ef_construction = 24;
      params.ef_search = 64;  // >= every k tested: ranked lists are shared
      params.seed = derive_seed(seed, "acc1.hnsw");
      DenseIndex di = build_dense_index(pool, ec, params);
      req.k = k;
      small = cross_task_retrieve(di, req);
      req.k = k_big;
      large = cross_task_retrieve(di, req);
    } else {
      req.engine = RetrievalEngine::kBm25;
      req.k = k;
      small = bm25_retrieve(pool, req);
      req.k = k_big;
      large = bm25_retrieve(pool, req);
    }

    bool bound_ok = small.ids.size() <= n_q * k && large.ids.size() <= n_q * k_big;
    std::set<std::string> large_ids(large.ids.begin(), large.ids.end());
    bool subset_ok = true;
    for (const auto& id : small.ids) subset_ok &= large_ids.count(id) == 1;
    if (!(bound_ok && subset_ok)) {
      CAPTURE(trial);
      ACHECK(crit, bound_ok);
      ACHECK(crit, subset_ok);
    }
  }
  ACHECK(crit, true);  // reached the end with no violation recorded
  ACHECK(crit, crit.elapsed() < 60.0);
  crit.done();
}

TEST_CASE("criterion 2: HNSW recall and exhaustive equivalence") {
  Criterion crit("criterion 2: recall@10 >= 0.95 on 10k vectors; ef = n exact");

  FloatMatrix base = gaussian_matrix(10000, 64, 91);
  HnswParams params;
  params.M = 16;
  params.ef_construction = 200;
  params.ef_search = 200;
  params.metric = Metric::kSquaredL2;
  params.seed = 17;
  HnswIndex index(64, params);
  for (size_t i = 0; i < base.rows; ++i)
    index.insert(static_cast<uint32_t>(i), base.row(i));

  FloatMatrix queries = gaussian_matrix(100, 64, 93);
  double recall = recall_at_k(index, base, queries, 10);
  CAPTURE(recall);
  ACHECK(crit, recall >= 0.95);
  ACHECK(crit, crit.elapsed() < 120.0);

  // 200-vector index: ef = index size makes search exactly brute force
  FloatMatrix small = gaussian_matrix(200, 16, 95);
  HnswParams sp;
  sp.M = 8;
  sp.ef_construction = 60;
  sp.metric = Metric::kSquaredL2;
  HnswIndex small_index(16, sp);
  for (size_t i = 0; i < small.rows; ++i)
    small_index.insert(static_cast<uint32_t>(i), small.row(i));
  FloatMatrix small_queries = gaussian_matrix(40, 16, 97);
  for (size_t qi = 0; qi < small_queries.rows; ++qi) {
    auto approx = small_index.search(small_queries.row(qi), 10, 200);
    auto exact = brute_force_knn(small, small_queries.row(qi), 10, sp.metric);
    bool same = approx.size() == exact.size();
    for (size_t i = 0; same && i < approx.size(); ++i)
      same = approx[i].id == exact[i].id;
    ACHECK(crit, same);
  }
  crit.done();
}

TEST_CASE("criterion 3: PQ/OPQ quantization quality") {
  Criterion crit(
      "criterion 3: OPQ MSE monotone, OPQ <= PQ on rotated data, ks=n exact");

  // rotated anisotropic Gaussian
  const size_t d = 16;
  Rng rot_rng(29);
  std::vector<double> rotation(d * d, 0.0);
  {
    // Gram-Schmidt on a random Gaussian matrix
    std::vector<std::vector<double>> q(d, std::vector<double>(d));
    for (size_t i = 0; i < d; ++i) {
      for (size_t j = 0; j < d; ++j) q[i][j] = rot_rng.normal();
      for (size_t k = 0; k < i; ++k) {
        double dot = 0.0;
        for (size_t j = 0; j < d; ++j) dot += q[i][j] * q[k][j];
        for (size_t j = 0; j < d; ++j) q[i][j] -= dot * q[k][j];
      }
      double norm = 0.0;
      for (double x : q[i]) norm += x * x;
      norm = std::sqrt(norm);
      for (size_t j = 0; j < d; ++j) q[i][j] /= norm;
    }
    for (size_t i = 0; i < d; ++i)
      for (size_t j = 0; j < d; ++j) rotation[i * d + j] = q[i][j];
  }
  Rng data_rng(31);
  FloatMatrix x(800, d);
  for (size_t i = 0; i < x.rows; ++i) {
    std::vector<double> axis(d);
    for (size_t j = 0; j < d; ++j)
      axis[j] = data_rng.normal() * std::pow(0.55, double(j) / 2.0);
    for (size_t a = 0; a < d; ++a) {
      double s = 0.0;
      for (size_t b = 0; b < d; ++b) s += rotation[a * d + b] * axis[b];
      x.row(i)[a] = static_cast<float>(s);
    }
  }

  double pq_err = pq_mse(train_pq(x, 4, 16, 10, 37), x);
  std::vector<double> trace;
  PqCodebook opq = train_opq(x, 4, 16, 10, 6, 37, &trace);
  double opq_err = pq_mse(opq, x);
  CAPTURE(pq_err);
  CAPTURE(opq_err);
  for (size_t i = 1; i < trace.size(); ++i)
    ACHECK(crit, trace[i] <= trace[i - 1] + 1e-9);
  ACHECK(crit, opq_err <= pq_err + 1e-9);

  // ks = n reproduces the training set exactly
  FloatMatrix tiny = gaussian_matrix(32, 8, 41);
  PqCodebook exact_cb = train_pq(tiny, 2, 32, 4, 43);
  ACHECK(crit, pq_mse(exact_cb, tiny) == 0.0);
  crit.done();
}

TEST_CASE("criterion 4: IA3 identity, gradients and freeze contract") {
  Criterion crit(
      "criterion 4: adapters-at-ones identity, fd gradients < 1e-4, freeze");

  // -- exact identity of the adapters-at-ones forward pass
  std::vector<PromptedInstance> data;
  Rng gen(47);
  for (int i = 0; i < 40; ++i) {
    PromptedInstance inst;
    inst.id = "d/" + std::to_string(i);
    inst.source_task = "t";
    std::string text;
    for (int w = 0; w < 5; ++w)
      text += (w ? " " : "") + std::string("w") + std::to_string(gen.below(30));
    inst.input_text = text;
    inst.target_text = "w" + std::to_string(gen.below(30));
    data.push_back(inst);
  }
  {
    ModelConfig mc;
    mc.num_layers = 2;
    mc.d_model = 32;
    mc.heads = 4;
    mc.d_ff = 64;
    mc.max_len = 16;
    mc.seed = 53;
    Transformer model(mc, Vocab::build(data));
    for (int i = 0; i < 5; ++i) {
      model.set_ia3_enabled(true);
      double with = model.instance_loss(data[i]);
      std::string dec_with = model.greedy_decode(data[i].input_text, 6);
      model.set_ia3_enabled(false);
      double without = model.instance_loss(data[i]);
      std::string dec_without = model.greedy_decode(data[i].input_text, 6);
      ACHECK(crit, with == without);  // exact
      ACHECK(crit, dec_with == dec_without);
    }
  }

  // -- finite-difference gradients on l_k, l_v, l_ff, W1, W2
  {
    ModelConfig mc;
    mc.num_layers = 1;
    mc.d_model = 48;  // d_k = 24 so every tensor has >= 20 coordinates
    mc.heads = 2;
    mc.d_ff = 40;
    mc.max_len = 16;
    mc.activation = Activation::kGelu;
    mc.seed = 59;
    std::vector<PromptedInstance> batch(data.begin(), data.begin() + 3);
    Transformer model(mc, Vocab::build(batch));
    model.batch_loss_and_grad(batch);
    const std::vector<std::string> tensors = {
        "enc0.attn.l_k", "enc0.attn.l_v", "enc0.ffn.l_ff",
        "enc0.ffn.w1",   "enc0.ffn.w2",
    };
    std::map<std::string, std::vector<double>> analytic;
    for (const auto& name : tensors) analytic[name] = model.tensor(name).g.v;
    Rng coord_rng(61);
    const double eps = 1e-5;
    for (const auto& name : tensors) {
      auto& tensor = model.tensor(name);
      REQUIRE(tensor.w.v.size() >= 20);
      auto coords = coord_rng.sample_indices(tensor.w.v.size(), 20);
      for (size_t c : coords) {
        double original = tensor.w.v[c];
        tensor.w.v[c] = original + eps;
        double hi = model.batch_loss(batch);
        tensor.w.v[c] = original - eps;
        double lo = model.batch_loss(batch);
        tensor.w.v[c] = original;
        double fd = (hi - lo) / (2 * eps);
        double a = analytic[name][c];
        double rel =
            std::fabs(fd - a) / std::max({std::fabs(fd), std::fabs(a), 1e-6});
        if (rel >= 1e-4) {
          CAPTURE(name);
          CAPTURE(c);
        }
        ACHECK(crit, rel < 1e-4);
      }
    }
  }

  // -- freeze contract over the full 1000-step few-shot schedule
  {
    ModelConfig mc;
    mc.num_layers = 1;
    mc.d_model = 16;
    mc.heads = 2;
    mc.d_ff = 32;
    mc.max_len = 12;
    mc.seed = 67;
    std::vector<PromptedInstance> fewshot(data.begin(), data.begin() + 32);
    Transformer model(mc, Vocab::build(fewshot));
    uint64_t main_before = model.non_adapter_checksum();
    uint64_t adapters_before = model.adapter_checksum();
    TrainConfig tc = TrainConfig::fewshot_defaults();  // 1000 steps
    tc.seed = 71;
    model.finetune_ia3(fewshot, tc);
    ACHECK(crit, model.non_adapter_checksum() == main_before);
    ACHECK(crit, model.adapter_checksum() != adapters_before);
  }
  crit.done();
}

TEST_CASE("criterion 5: desk-scale selection gap vs size-matched random") {
  Criterion crit(
      "criterion 5: retrieval-selected training beats random by >= 10 points "
      "(median over 5 seeds)");

  SynthSpec spec;  // default: 4 clusters x 5 tasks x 200 instances
  HarnessConfig cfg;
  std::vector<double> gaps;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    spec.seed = seed;
    GeneratedPool gen = gen_pool(spec);
    ExperimentReport report = run_experiment(
        gen.pool, gen.held_out,
        {Condition::kDeft, Condition::kRandomSubset}, seed, cfg);
    REQUIRE(report.conditions.size() == 2);
    ACHECK(crit, report.conditions[1].train_size ==
                     report.conditions[0].train_size);
    double gap = 100.0 * (report.conditions[0].accuracy -
                          report.conditions[1].accuracy);
    std::printf("  seed %llu: deft=%.3f random=%.3f gap=%.1f (|R|=%zu)\n",
                static_cast<unsigned long long>(seed),
                report.conditions[0].accuracy, report.conditions[1].accuracy,
                gap, report.conditions[0].train_size);
    gaps.push_back(gap);
  }
  double median = median5(gaps);
  CAPTURE(median);
  ACHECK(crit, median >= 10.0);
  ACHECK(crit, crit.elapsed() < 600.0);
  crit.done();
}

TEST_CASE("criterion 6: sweep accuracy rises to a peak and never exceeds it") {
  Criterion crit(
      "criterion 6: accuracy-vs-retrieved-size curve is rise-then-plateau/"
      "decline (median over 5 seeds)");

  SynthSpec spec;
  HarnessConfig cfg;
  const std::vector<size_t> ks = {1, 2, 5, 12, 30, 76};
  std::vector<std::vector<double>> acc(ks.size());
  std::vector<size_t> sizes(ks.size(), 0);
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    spec.seed = seed;
    GeneratedPool gen = gen_pool(spec);
    auto cells = synth_sweep(gen.pool, gen.held_out, ks, seed, cfg);
    REQUIRE(cells.size() == ks.size());
    std::printf("  seed %llu:", static_cast<unsigned long long>(seed));
    for (size_t i = 0; i < cells.size(); ++i) {
      acc[i].push_back(cells[i].metric);
      sizes[i] = cells[i].r_size;
      std::printf(" (R=%zu a=%.2f)", cells[i].r_size, cells[i].metric);
    }
    std::printf("\n");
    std::fflush(stdout);
  }
  std::vector<double> median_curve;
  for (auto& column : acc) median_curve.push_back(median5(column));
  std::printf("  median curve:");
  for (size_t i = 0; i < median_curve.size(); ++i)
    std::printf(" %.3f", median_curve[i]);
  std::printf("\n");

  size_t peak = 0;
  for (size_t i = 1; i < median_curve.size(); ++i)
    if (median_curve[i] > median_curve[peak]) peak = i;
  for (size_t i = 0; i + 1 <= peak; ++i)
    ACHECK(crit, median_curve[i] <= median_curve[i + 1] + 1e-9);
  for (size_t i = peak + 1; i < median_curve.size(); ++i)
    ACHECK(crit, median_curve[i] <= median_curve[peak] + 1e-9);
  crit.done();
}

TEST_CASE("criterion 7: budget curve favors retrieval at small budgets only") {
  Criterion crit(
      "criterion 7: at cost ratio 3.25, retrieval wins the smallest budget "
      "and loses the largest (median over 5 seeds)");

  SynthSpec spec;
  HarnessConfig cfg;
  const std::vector<size_t> budgets = {4, 16, 100};
  std::vector<double> deft_small, labeled_small, deft_large, labeled_large;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    spec.seed = seed;
    GeneratedPool gen = gen_pool(spec);
    BudgetCurve curve =
        budget_curve(gen.pool, gen.held_out, 3.25, budgets, seed, cfg);
    REQUIRE(curve.rows.size() == budgets.size());
    const BudgetRow& first = curve.rows.front();
    const BudgetRow& last = curve.rows.back();
    std::printf(
        "  seed %llu: B=%zu lab=%.2f deft=%.2f | B=%zu lab=%.2f deft=%.2f%s\n",
        static_cast<unsigned long long>(seed), first.budget,
        first.labeled_accuracy, first.deft_accuracy, last.budget,
        last.labeled_accuracy, last.deft_accuracy,
        last.clipped ? " (clipped)" : "");
    std::fflush(stdout);
    deft_small.push_back(first.deft_accuracy);
    labeled_small.push_back(first.labeled_accuracy);
    deft_large.push_back(last.deft_accuracy);
    labeled_large.push_back(last.labeled_accuracy);
  }
  double ds = median5(deft_small), ls = median5(labeled_small);
  double dl = median5(deft_large), ll = median5(labeled_large);
  std::printf("  medians: small budget deft=%.3f labeled=%.3f | largest "
              "deft=%.3f labeled=%.3f\n",
              ds, ls, dl, ll);
  ACHECK(crit, ds >= ls);
  ACHECK(crit, dl <= ll);
  crit.done();
}

TEST_CASE("criterion 8: CLI subcommands rerun byte-identically") {
  Criterion crit("criterion 8: every subcommand is deterministic under a seed");

  fs::path dir = fs::temp_directory_path() / "deft-acceptance-cli";
  fs::remove_all(dir);
  fs::create_directories(dir);

  // corpus
  {
    Rng rng(3);
    std::vector<PromptedInstance> pool;
    for (const std::string cluster : {"a", "b"}) {
      for (int task = 0; task < 2; ++task)
        for (int i = 0; i < 25; ++i) {
          PromptedInstance inst;
          inst.id = cluster + std::to_string(task) + "/" + std::to_string(i);
          inst.source_task = cluster + std::to_string(task);
          std::string text;
          for (int w = 0; w < 6; ++w)
            text += (w ? " " : "") + cluster + std::to_string(rng.below(12));
          inst.input_text = text;
          inst.target_text = "label-" + cluster;
          pool.push_back(inst);
        }
    }
    write_jsonl(pool, (dir / "pool.jsonl").string());
    std::vector<PromptedInstance> queries(pool.begin(), pool.begin() + 5);
    for (auto& q : queries) {
      q.id = "q-" + q.id;
      q.target_text.clear();
    }
    write_jsonl(queries, (dir / "queries.jsonl").string());
    std::ofstream eval(dir / "eval.jsonl");
    for (int i = 0; i < 5; ++i) {
      eval << nlohmann::json{{"input", pool[i].input_text},
                             {"target", pool[i].target_text},
                             {"choices", {"label-a", "label-b"}}}
                  .dump()
           << "\n";
    }
  }

  auto write_config = [&](const std::string& name, const nlohmann::json& j) {
    std::ofstream out(dir / name);
    out << j.dump(2);
  };
  write_config("build.json",
               {{"pool.path", (dir / "pool.jsonl").string()},
                {"embed.dim", 48},
                {"index.M", 8},
                {"index.ef_construction", 32},
                {"out", (dir / "index_out").string()},
                {"seed", 11}});
  write_config("retrieve.json",
               {{"pool.path", (dir / "pool.jsonl").string()},
                {"retrieve.queries_path", (dir / "queries.jsonl").string()},
                {"retrieve.k", 6},
                {"index.path", (dir / "index_out" / "index.bin").string()},
                {"out", (dir / "retrieve_out").string()},
                {"seed", 11}});
  write_config("train.json",
               {{"train.data_path",
                 (dir / "retrieve_out" / "retrieved.jsonl").string()},
                {"train.epochs", 2},
                {"train.lr", 1e-3},
                {"model.d_model", 16},
                {"model.heads", 2},
                {"model.d_ff", 32},
                {"model.layers", 1},
                {"model.max_len", 12},
                {"out", (dir / "train_out").string()},
                {"seed", 11}});
  write_config("eval.json",
               {{"eval.checkpoint", (dir / "train_out" / "model.ckpt").string()},
                {"eval.data_path", (dir / "eval.jsonl").string()},
                {"out", (dir / "eval_out").string()},
                {"seed", 11}});
  write_config("analyze.json",
               {{"pool.path", (dir / "pool.jsonl").string()},
                {"analyze.mode", "composition"},
                {"analyze.retrieved_path",
                 (dir / "retrieve_out" / "retrieved_set.json").string()},
                {"out", (dir / "analyze_out").string()},
                {"seed", 11}});
  write_config("synth.json", {{"synth.n_clusters", 2},
                              {"synth.tasks_per_cluster", 2},
                              {"synth.instances_per_task", 30},
                              {"synth.query_size", 8},
                              {"synth.k", 4},
                              {"synth.eval_size", 10},
                              {"synth.epochs", 1},
                              {"synth.embed_dim", 32},
                              {"out", (dir / "synth_out").string()},
                              {"seed", 11}});

  struct Step {
    std::string command;
    std::string config;
    std::vector<std::string> artifacts;  // out-dir relative
    std::string out_dir;
  };
  std::vector<Step> steps = {
      {"build-index", "build.json", {"index.bin", "index.meta.json",
                                     "resolved_config.json"}, "index_out"},
      {"retrieve", "retrieve.json",
       {"retrieved.jsonl", "retrieved_set.json", "composition.json",
        "resolved_config.json"}, "retrieve_out"},
      {"train", "train.json", {"model.ckpt", "loss_trace.csv",
                               "resolved_config.json"}, "train_out"},
      {"eval", "eval.json", {"metrics.json", "resolved_config.json"},
       "eval_out"},
      {"analyze", "analyze.json", {"composition.json", "resolved_config.json"},
       "analyze_out"},
      {"synth", "synth.json", {"experiment.json", "resolved_config.json"},
       "synth_out"},
  };

  auto run_step = [&](const Step& step) {
    std::string cmd = std::string(DEFT_CLI_PATH) + " " + step.command +
                      " --config " + (dir / step.config).string() + " > " +
                      (dir / "step.log").string() + " 2>&1";
    return WEXITSTATUS(std::system(cmd.c_str())) == 0;
  };

  // first pass records artifact bytes, second pass must reproduce them
  std::map<std::string, std::string> first_bytes;
  for (const auto& step : steps) {
    ACHECK(crit, run_step(step));
    for (const auto& artifact : step.artifacts) {
      fs::path p = dir / step.out_dir / artifact;
      ACHECK(crit, fs::exists(p));
      first_bytes[step.out_dir + "/" + artifact] = file_bytes(p);
    }
  }
  for (const auto& step : steps) {
    ACHECK(crit, run_step(step));
    for (const auto& artifact : step.artifacts) {
      fs::path p = dir / step.out_dir / artifact;
      bool same = file_bytes(p) == first_bytes[step.out_dir + "/" + artifact];
      if (!same) CAPTURE(artifact);
      ACHECK(crit, same);
    }
  }
  crit.done();
}

TEST_CASE("criterion 9: BM25 scores match the closed form within 1e-9") {
  Criterion crit("criterion 9: hand-corpus Okapi BM25 oracle at 1e-9");

  std::vector<std::string> docs = {
      "the cat sat on the mat",  // len 6
      "the dog barked",          // len 3
      "cats and dogs",           // len 3
  };
  Bm25Index index(docs);
  const double n_docs = 3.0, avgdl = 4.0, k1 = 0.9, b = 0.4;
  auto hand = [&](double tf, double df, double dl) {
    double idf = std::log(1.0 + (n_docs - df + 0.5) / (df + 0.5));
    return idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
  };

  auto cat = index.scores("cat");
  ACHECK(crit, std::fabs(cat[0] - hand(1, 1, 6)) < 1e-9);
  ACHECK(crit, std::fabs(cat[1]) < 1e-9);
  ACHECK(crit, std::fabs(cat[2]) < 1e-9);

  auto the = index.scores("the");
  ACHECK(crit, std::fabs(the[0] - hand(2, 2, 6)) < 1e-9);
  ACHECK(crit, std::fabs(the[1] - hand(1, 2, 3)) < 1e-9);

  auto multi = index.scores("the cat dog");
  ACHECK(crit,
         std::fabs(multi[0] - (hand(2, 2, 6) + hand(1, 1, 6))) < 1e-9);
  ACHECK(crit, std::fabs(multi[1] - (hand(1, 2, 3) + hand(1, 1, 3))) < 1e-9);
  ACHECK(crit, std::fabs(multi[2]) < 1e-9);
  crit.done();
}
