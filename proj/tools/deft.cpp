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
// deft: cross-task data selection pipeline driver.
//
//   deft build-index --config cfg.json [--seed N] [--out DIR]
//   deft retrieve    --config cfg.json ...
//   deft train       --config cfg.json ...
//   deft eval        --config cfg.json ...
//   deft analyze     --config cfg.json ...
//   deft synth       --config cfg.json ...
//
// Configs are flat JSON objects with namespaced keys ("index.M"); unknown
// keys are errors. Every run writes a resolved-config copy next to its
// outputs. All randomness flows from one seed expanded per module. Failures
// exit 1 with a single-line `error[<code>] <message>` and remove partial
// outputs.
//

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "deft/core.hpp"
#include "deft/embed.hpp"
#include "deft/hnsw.hpp"
#include "deft/model.hpp"
#include "deft/pool.hpp"
#include "deft/retrieve.hpp"
#include "deft/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool g_verbose = false;

void log_line(const std::string& msg) {
  if (g_verbose) std::cerr << "[deft] " << msg << "\n";
}

/// Flat namespaced config with strict key validation.
class Config {
 public:
  Config(json values, std::set<std::string> allowed)
      : values_(std::move(values)), allowed_(std::move(allowed)) {
    allowed_.insert("seed");
    allowed_.insert("out");
    if (!values_.is_object())
      deft::fail("bad-config", "config root must be a JSON object");
    for (const auto& [key, value] : values_.items())
      if (!allowed_.count(key))
        deft::fail("unknown-key", "unknown config key '" + key + "'");
  }

  bool has(const std::string& key) const { return values_.contains(key); }

  template <class T>
  T get(const std::string& key, T fallback) const {
    if (!values_.contains(key)) return fallback;
    return values_.at(key).get<T>();
  }

  template <class T>
  T require(const std::string& key) const {
    if (!values_.contains(key))
      deft::fail("missing-key", "config key '" + key + "' is required");
    return values_.at(key).get<T>();
  }

  const json& raw() const { return values_; }

 private:
  json values_;
  std::set<std::string> allowed_;
};

json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) deft::fail("no-such-file", "cannot open config file " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded())
    deft::fail("bad-json", "config file " + path + " is not valid JSON");
  return j;
}

/// Tracks files created by the current run so failures can clean up.
class OutputTracker {
 public:
  explicit OutputTracker(fs::path dir) : dir_(std::move(dir)) {
    fs::create_directories(dir_);
  }

  fs::path path(const std::string& name) {
    fs::path p = dir_ / name;
    created_.push_back(p);
    return p;
  }

  void remove_partial() {
    for (const auto& p : created_) {
      std::error_code ec;
      fs::remove(p, ec);
    }
  }

 private:
  fs::path dir_;
  std::vector<fs::path> created_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) deft::fail("io-open", "cannot open " + path.string());
  out << text;
  if (!out) deft::fail("io-write", "failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) {
  write_text(path, j.dump(2) + "\n");
}

void write_resolved_config(OutputTracker& out, const Config& cfg,
                           uint64_t seed) {
  json resolved = cfg.raw();
  resolved["seed"] = seed;
  write_json(out.path("resolved_config.json"), resolved);
}

// --- shared config fragments ------------------------------------------------

const std::set<std::string> kPoolKeys = {
    "pool.path",        "pool.id_field",     "pool.task_field",
    "pool.input_field", "pool.target_field", "pool.instruction_field",
};

deft::FieldMap field_map(const Config& cfg) {
  deft::FieldMap fields;
  fields.id = cfg.get<std::string>("pool.id_field", fields.id);
  fields.task = cfg.get<std::string>("pool.task_field", fields.task);
  fields.input = cfg.get<std::string>("pool.input_field", fields.input);
  fields.target = cfg.get<std::string>("pool.target_field", fields.target);
  fields.instruction =
      cfg.get<std::string>("pool.instruction_field", fields.instruction);
  return fields;
}

deft::Pool load_pool(const Config& cfg) {
  std::string path = cfg.require<std::string>("pool.path");
  deft::Pool pool = deft::ingest_jsonl(path, field_map(cfg));
  pool.validate();
  log_line("pool: " + std::to_string(pool.size()) + " instances, " +
           std::to_string(pool.counts.size()) + " tasks");
  return pool;
}

const std::set<std::string> kEmbedKeys = {
    "embed.variant", "embed.dim", "embed.include_instruction", "embed.file"};

deft::EmbedderConfig embedder_config(const Config& cfg, uint64_t seed) {
  deft::EmbedderConfig ec;
  std::string variant = cfg.get<std::string>("embed.variant", "hashed");
  if (variant == "hashed")
    ec.variant = deft::EmbedderVariant::kHashedToken;
  else if (variant == "precomputed")
    ec.variant = deft::EmbedderVariant::kPrecomputedFile;
  else
    deft::fail("bad-config", "embed.variant must be hashed or precomputed");
  ec.dim = cfg.get<size_t>("embed.dim", 256);
  ec.include_instruction = cfg.get<bool>("embed.include_instruction", false);
  ec.seed = deft::derive_seed(seed, "cli.embed");
  return ec;
}

const std::set<std::string> kIndexKeys = {
    "index.M",          "index.ef_construction", "index.ef_search",
    "index.level_mult", "index.metric",          "index.storage",
    "index.pq.m",       "index.pq.ks",           "index.pq.iters",
    "index.pq.opq_iters", "index.path"};

deft::HnswParams hnsw_params(const Config& cfg, uint64_t seed) {
  deft::HnswParams params;
  params.M = cfg.get<size_t>("index.M", 16);
  params.ef_construction = cfg.get<size_t>("index.ef_construction", 200);
  params.ef_search = cfg.get<size_t>("index.ef_search", 200);
  params.level_mult = cfg.get<double>("index.level_mult", 0.0);
  std::string metric = cfg.get<std::string>("index.metric", "cosine");
  if (metric == "cosine")
    params.metric = deft::Metric::kCosine;
  else if (metric == "l2")
    params.metric = deft::Metric::kSquaredL2;
  else
    deft::fail("bad-config", "index.metric must be cosine or l2");
  params.seed = deft::derive_seed(seed, "cli.index");
  return params;
}

const std::set<std::string> kModelKeys = {
    "model.layers",      "model.d_model", "model.heads",
    "model.d_ff",        "model.max_len", "model.activation",
    "model.vocab_limit", "model.ia3_per_head"};

deft::ModelConfig model_config(const Config& cfg, uint64_t seed) {
  deft::ModelConfig mc;
  mc.num_layers = cfg.get<size_t>("model.layers", 2);
  mc.d_model = cfg.get<size_t>("model.d_model", 128);
  mc.heads = cfg.get<size_t>("model.heads", 4);
  mc.d_ff = cfg.get<size_t>("model.d_ff", 256);
  mc.max_len = cfg.get<size_t>("model.max_len", 64);
  std::string act = cfg.get<std::string>("model.activation", "relu");
  if (act == "relu")
    mc.activation = deft::Activation::kRelu;
  else if (act == "gelu")
    mc.activation = deft::Activation::kGelu;
  else
    deft::fail("bad-config", "model.activation must be relu or gelu");
  mc.ia3_per_head = cfg.get<bool>("model.ia3_per_head", false);
  mc.seed = deft::derive_seed(seed, "cli.model");
  return mc;
}

// --- subcommands -------------------------------------------------------------

json index_meta(const deft::EmbedderConfig& ec, const deft::Pool& pool) {
  uint64_t id_hash = 0xcbf29ce484222325ull;
  for (const auto& inst : pool.instances)
    id_hash = deft::fnv1a64_bytes(inst.id.data(), inst.id.size(), id_hash);
  return {{"embed_variant", ec.variant == deft::EmbedderVariant::kHashedToken
                                ? "hashed"
                                : "precomputed"},
          {"embed_dim", ec.dim},
          {"embed_seed", ec.seed},
          {"include_instruction", ec.include_instruction},
          {"pool_count", pool.size()},
          {"pool_id_hash", id_hash}};
}

void cmd_build_index(const Config& cfg, OutputTracker& out, uint64_t seed) {
  deft::Pool pool = load_pool(cfg);
  deft::EmbedderConfig ec = embedder_config(cfg, seed);
  deft::HnswParams params = hnsw_params(cfg, seed);

  deft::FloatMatrix embeddings;
  if (ec.variant == deft::EmbedderVariant::kHashedToken) {
    embeddings = deft::embed_pool(pool, ec);
  } else {
    std::string file = cfg.require<std::string>("embed.file");
    embeddings = deft::load_precomputed(file, pool.size(), ec.dim);
  }

  std::string storage = cfg.get<std::string>("index.storage", "raw");
  deft::PqOptions pq;
  deft::PqOptions* pq_ptr = nullptr;
  if (storage != "raw") {
    if (storage != "pq" && storage != "pq-rerank")
      deft::fail("bad-config", "index.storage must be raw, pq or pq-rerank");
    pq.m = cfg.get<size_t>("index.pq.m", 16);
    pq.ks = cfg.get<size_t>("index.pq.ks", 256);
    pq.iters = cfg.get<size_t>("index.pq.iters", 10);
    pq.opq_iters = cfg.get<size_t>("index.pq.opq_iters", 0);
    pq.keep_raw = storage == "pq-rerank";
    pq_ptr = &pq;
  }

  deft::DenseIndex di =
      deft::build_dense_index(pool, embeddings, ec, params, pq_ptr);
  di.index.save(out.path("index.bin").string());
  write_json(out.path("index.meta.json"), index_meta(ec, pool));
  log_line("index: " + std::to_string(di.index.size()) + " vectors");
}

deft::DenseIndex load_dense_index(const Config& cfg, const deft::Pool& pool,
                                  deft::EmbedderConfig& ec) {
  std::string index_path = cfg.require<std::string>("index.path");
  fs::path meta_path = fs::path(index_path).parent_path() / "index.meta.json";
  std::ifstream meta_in(meta_path);
  if (!meta_in)
    deft::fail("no-such-file",
               "cannot open index metadata " + meta_path.string());
  json meta = json::parse(meta_in);

  if (meta.at("pool_count").get<size_t>() != pool.size())
    deft::fail("config-mismatch",
               "index was built over a different pool size");
  uint64_t id_hash = 0xcbf29ce484222325ull;
  for (const auto& inst : pool.instances)
    id_hash = deft::fnv1a64_bytes(inst.id.data(), inst.id.size(), id_hash);
  if (meta.at("pool_id_hash").get<uint64_t>() != id_hash)
    deft::fail("config-mismatch", "index was built over a different pool");

  ec.variant = meta.at("embed_variant").get<std::string>() == "hashed"
                   ? deft::EmbedderVariant::kHashedToken
                   : deft::EmbedderVariant::kPrecomputedFile;
  ec.dim = meta.at("embed_dim").get<size_t>();
  ec.seed = meta.at("embed_seed").get<uint64_t>();
  ec.include_instruction = meta.at("include_instruction").get<bool>();

  deft::DenseIndex di{ec, deft::HnswIndex::load(index_path), {}};
  di.row_ids.reserve(pool.size());
  for (const auto& inst : pool.instances) di.row_ids.push_back(inst.id);
  return di;
}

const std::set<std::string> kRetrieveKeys = {
    "retrieve.queries_path", "retrieve.k", "retrieve.engine",
    "retrieve.n_queries", "retrieve.query_embed_file"};

void cmd_retrieve(const Config& cfg, OutputTracker& out, uint64_t seed) {
  deft::Pool pool = load_pool(cfg);
  deft::Pool queries_pool =
      deft::ingest_jsonl(cfg.require<std::string>("retrieve.queries_path"),
                         field_map(cfg));

  std::vector<deft::PromptedInstance> queries;
  size_t n_queries = cfg.get<size_t>("retrieve.n_queries", 0);
  if (n_queries > 0) {
    queries = deft::sample_queries(queries_pool, n_queries,
                                   deft::derive_seed(seed, "cli.queries"));
  } else {
    queries = queries_pool.instances;
    for (auto& q : queries) q.target_text.clear();
  }

  deft::RetrievalRequest req;
  req.queries = queries;
  req.k = cfg.get<size_t>("retrieve.k", deft::default_k(queries.size()));
  req.include_instruction = cfg.get<bool>("embed.include_instruction", false);

  std::string engine = cfg.get<std::string>("retrieve.engine", "dense");
  deft::RetrievedSet rset;
  if (engine == "dense") {
    req.engine = deft::RetrievalEngine::kDense;
    deft::EmbedderConfig ec;
    deft::DenseIndex di = load_dense_index(cfg, pool, ec);
    if (req.include_instruction != ec.include_instruction)
      deft::fail("config-mismatch",
                 "embed.include_instruction does not match the index");
    if (ec.variant == deft::EmbedderVariant::kPrecomputedFile) {
      std::string qfile =
          cfg.require<std::string>("retrieve.query_embed_file");
      deft::FloatMatrix qvecs =
          deft::load_precomputed(qfile, queries.size(), ec.dim);
      rset = deft::cross_task_retrieve(di, req, qvecs);
    } else {
      rset = deft::cross_task_retrieve(di, req);
    }
  } else if (engine == "bm25") {
    req.engine = deft::RetrievalEngine::kBm25;
    rset = deft::bm25_retrieve(pool, req);
  } else {
    deft::fail("bad-config", "retrieve.engine must be dense or bm25");
  }

  deft::export_training_set(rset, pool, out.path("retrieved.jsonl").string());
  write_json(out.path("retrieved_set.json"),
             deft::retrieved_set_to_json(rset));
  write_json(out.path("composition.json"),
             deft::composition_to_json(deft::analyze_sources(rset, pool)));
  log_line("retrieved " + std::to_string(rset.ids.size()) + " of bound " +
           std::to_string(rset.union_bound));
}

const std::set<std::string> kTrainKeys = {
    "train.data_path",       "train.mode",         "train.epochs",
    "train.steps",           "train.batch_size",   "train.lr",
    "train.warmup_fraction", "train.warmup_steps", "train.optimizer",
    "train.init_checkpoint"};

deft::TrainConfig train_config(const Config& cfg, uint64_t seed) {
  deft::TrainConfig tc;
  std::string mode = cfg.get<std::string>("train.mode", "full");
  if (mode == "full")
    tc = deft::TrainConfig::deft_defaults();
  else if (mode == "ia3-only")
    tc = deft::TrainConfig::fewshot_defaults();
  else
    deft::fail("bad-config", "train.mode must be full or ia3-only");
  tc.epochs = cfg.get<size_t>("train.epochs", tc.epochs);
  tc.steps = cfg.get<size_t>("train.steps", tc.steps);
  tc.batch_size = cfg.get<size_t>("train.batch_size", tc.batch_size);
  tc.learning_rate = cfg.get<double>("train.lr", tc.learning_rate);
  tc.warmup_fraction =
      cfg.get<double>("train.warmup_fraction", tc.warmup_fraction);
  tc.warmup_steps = cfg.get<size_t>("train.warmup_steps", tc.warmup_steps);
  std::string opt = cfg.get<std::string>("train.optimizer", "");
  if (opt == "adam")
    tc.optimizer = deft::OptimizerKind::kAdam;
  else if (opt == "adafactor")
    tc.optimizer = deft::OptimizerKind::kAdafactor;
  else if (!opt.empty())
    deft::fail("bad-config", "train.optimizer must be adam or adafactor");
  tc.seed = deft::derive_seed(seed, "cli.train");
  return tc;
}

void cmd_train(const Config& cfg, OutputTracker& out, uint64_t seed) {
  deft::Pool data = deft::ingest_jsonl(
      cfg.require<std::string>("train.data_path"), field_map(cfg));
  deft::TrainConfig tc = train_config(cfg, seed);

  std::vector<deft::StepStat> trace;
  if (cfg.has("train.init_checkpoint")) {
    deft::Transformer model = deft::Transformer::load(
        cfg.require<std::string>("train.init_checkpoint"));
    trace = tc.mode == deft::TrainMode::kIa3Only
                ? model.finetune_ia3(data.instances, tc)
                : model.train(data.instances, tc);
    model.save(out.path("model.ckpt").string());
  } else {
    if (tc.mode == deft::TrainMode::kIa3Only)
      deft::fail("bad-config",
                 "ia3-only training requires train.init_checkpoint");
    deft::ModelConfig mc = model_config(cfg, seed);
    size_t vocab_limit = cfg.get<size_t>("model.vocab_limit", 8192);
    deft::Transformer model(mc,
                            deft::Vocab::build(data.instances, vocab_limit));
    trace = model.train(data.instances, tc);
    model.save(out.path("model.ckpt").string());
  }
  deft::write_loss_trace(trace, out.path("loss_trace.csv").string());
  log_line("trained " + std::to_string(trace.size()) + " steps");
}

const std::set<std::string> kEvalKeys = {
    "eval.data_path", "eval.checkpoint",          "eval.mode",
    "eval.max_len",   "eval.normalize_rank_loss", "eval.choices_field"};

void cmd_eval(const Config& cfg, OutputTracker& out, uint64_t seed) {
  (void)seed;
  deft::Transformer model =
      deft::Transformer::load(cfg.require<std::string>("eval.checkpoint"));
  std::string mode = cfg.get<std::string>("eval.mode", "rank");
  std::string choices_field =
      cfg.get<std::string>("eval.choices_field", "choices");
  bool normalize = cfg.get<bool>("eval.normalize_rank_loss", false);
  size_t max_len = cfg.get<size_t>("eval.max_len", 16);
  deft::FieldMap fields = field_map(cfg);

  std::string data_path = cfg.require<std::string>("eval.data_path");
  std::ifstream in(data_path);
  if (!in) deft::fail("no-such-file", "cannot open eval file " + data_path);

  size_t n = 0, correct = 0;
  std::string line;
  size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    json obj = json::parse(line, nullptr, false);
    if (obj.is_discarded())
      deft::fail("bad-json", data_path + ": malformed JSON on line " +
                                 std::to_string(line_number));
    deft::PromptedInstance inst;
    inst.input_text = obj.at(fields.input).get<std::string>();
    if (obj.contains(fields.target))
      inst.target_text = obj.at(fields.target).get<std::string>();
    if (obj.contains(fields.instruction))
      inst.instruction = obj.at(fields.instruction).get<std::string>();
    std::string input = deft::compose_text(inst, true);

    ++n;
    if (mode == "rank") {
      if (!obj.contains(choices_field))
        deft::fail("missing-key", data_path + ": line " +
                                      std::to_string(line_number) +
                                      " lacks '" + choices_field + "'");
      std::vector<std::string> choices =
          obj.at(choices_field).get<std::vector<std::string>>();
      auto result = model.rank_classify(input, choices, normalize);
      if (choices[result.argmin] == inst.target_text) ++correct;
    } else if (mode == "generate") {
      if (model.greedy_decode(input, max_len) == inst.target_text) ++correct;
    } else {
      deft::fail("bad-config", "eval.mode must be rank or generate");
    }
  }
  if (n == 0) deft::fail("empty-dataset", "eval file has no records");
  json metrics = {{"mode", mode},
                  {"n", n},
                  {"correct", correct},
                  {"accuracy",
                   static_cast<double>(correct) / static_cast<double>(n)}};
  write_json(out.path("metrics.json"), metrics);
  log_line("eval accuracy " +
           std::to_string(metrics["accuracy"].get<double>()));
}

const std::set<std::string> kAnalyzeKeys = {
    "analyze.mode", "analyze.retrieved_path", "analyze.queries_path",
    "analyze.query_sizes", "analyze.ks"};

void cmd_analyze(const Config& cfg, OutputTracker& out, uint64_t seed) {
  std::string mode = cfg.get<std::string>("analyze.mode", "composition");
  deft::Pool pool = load_pool(cfg);
  if (mode == "composition") {
    std::string rpath = cfg.require<std::string>("analyze.retrieved_path");
    std::ifstream in(rpath);
    if (!in) deft::fail("no-such-file", "cannot open " + rpath);
    json j = json::parse(in);
    deft::RetrievedSet rset;
    rset.ids = j.at("ids").get<std::vector<std::string>>();
    rset.union_bound = j.at("union_bound").get<size_t>();
    rset.overlap_factor = j.at("overlap_factor").get<double>();
    for (const auto& [id, sources] : j.at("provenance").items())
      rset.provenance[id] = sources.get<std::vector<std::string>>();
    write_json(out.path("composition.json"),
               deft::composition_to_json(deft::analyze_sources(rset, pool)));
  } else if (mode == "sweep") {
    deft::Pool queries_pool = deft::ingest_jsonl(
        cfg.require<std::string>("analyze.queries_path"), field_map(cfg));
    deft::EmbedderConfig ec;
    deft::DenseIndex di = load_dense_index(cfg, pool, ec);
    std::vector<size_t> query_sizes =
        cfg.require<std::vector<size_t>>("analyze.query_sizes");
    std::vector<size_t> ks = cfg.require<std::vector<size_t>>("analyze.ks");
    auto cells =
        deft::sweep_retrieval(di, queries_pool.instances, query_sizes, ks,
                              deft::derive_seed(seed, "cli.sweep"));
    json rows = json::array();
    for (const auto& cell : cells)
      rows.push_back({{"query_size", cell.query_size},
                      {"k", cell.k},
                      {"r_size", cell.r_size}});
    write_json(out.path("sweep.json"), {{"cells", rows}});
    deft::write_sweep_csv(cells, out.path("sweep.csv").string());
  } else {
    deft::fail("bad-config", "analyze.mode must be composition or sweep");
  }
}

const std::set<std::string> kSynthKeys = {
    "synth.n_clusters",        "synth.tasks_per_cluster",
    "synth.instances_per_task", "synth.cluster_vocab_size",
    "synth.shared_vocab_size", "synth.triggers_per_side",
    "synth.tokens_per_instance", "synth.shared_fraction",
    "synth.task_trigger_bias", "synth.target_cluster",
    "synth.experiment",        "synth.conditions",
    "synth.query_size",        "synth.k",
    "synth.eval_size",         "synth.budgets",
    "synth.cost_ratio",        "synth.ks",
    "synth.epochs",            "synth.lr",
    "synth.sweep_steps",       "synth.budget_steps",
    "synth.budget_k",          "synth.embed_dim"};

void cmd_synth(const Config& cfg, OutputTracker& out, uint64_t seed) {
  deft::SynthSpec spec;
  spec.n_clusters = cfg.get<size_t>("synth.n_clusters", spec.n_clusters);
  spec.tasks_per_cluster =
      cfg.get<size_t>("synth.tasks_per_cluster", spec.tasks_per_cluster);
  spec.instances_per_task =
      cfg.get<size_t>("synth.instances_per_task", spec.instances_per_task);
  spec.cluster_vocab_size =
      cfg.get<size_t>("synth.cluster_vocab_size", spec.cluster_vocab_size);
  spec.shared_vocab_size =
      cfg.get<size_t>("synth.shared_vocab_size", spec.shared_vocab_size);
  spec.triggers_per_side =
      cfg.get<size_t>("synth.triggers_per_side", spec.triggers_per_side);
  spec.tokens_per_instance =
      cfg.get<size_t>("synth.tokens_per_instance", spec.tokens_per_instance);
  spec.shared_fraction =
      cfg.get<double>("synth.shared_fraction", spec.shared_fraction);
  spec.task_trigger_bias =
      cfg.get<double>("synth.task_trigger_bias", spec.task_trigger_bias);
  spec.seed = deft::derive_seed(seed, "cli.synth");

  deft::HarnessConfig harness;
  harness.query_size = cfg.get<size_t>("synth.query_size", harness.query_size);
  harness.k = cfg.get<size_t>("synth.k", harness.k);
  harness.eval_size = cfg.get<size_t>("synth.eval_size", harness.eval_size);
  harness.embed_dim = cfg.get<size_t>("synth.embed_dim", harness.embed_dim);
  harness.epochs = cfg.get<size_t>("synth.epochs", harness.epochs);
  harness.learning_rate = cfg.get<double>("synth.lr", harness.learning_rate);
  harness.sweep_steps =
      cfg.get<size_t>("synth.sweep_steps", harness.sweep_steps);
  harness.budget_steps =
      cfg.get<size_t>("synth.budget_steps", harness.budget_steps);
  harness.budget_k = cfg.get<size_t>("synth.budget_k", harness.budget_k);

  size_t target_cluster = cfg.get<size_t>("synth.target_cluster", 0);
  deft::GeneratedPool gen = deft::gen_pool(spec, target_cluster);
  log_line("synthetic pool: " + std::to_string(gen.pool.size()) +
           " instances, held-out task " + gen.held_out.task_name);

  std::string experiment =
      cfg.get<std::string>("synth.experiment", "deft-vs-random");
  if (experiment != "deft-vs-random" && experiment != "sweep" &&
      experiment != "budget" && experiment != "all")
    deft::fail("bad-config",
               "synth.experiment must be deft-vs-random, sweep, budget or all");

  deft::ExperimentReport report;
  report.target_task = gen.held_out.task_name;

  if (experiment == "deft-vs-random" || experiment == "all") {
    std::vector<deft::Condition> conditions;
    std::vector<std::string> names = cfg.get<std::vector<std::string>>(
        "synth.conditions", {"deft", "random-subset"});
    for (const auto& name : names) {
      if (name == "deft")
        conditions.push_back(deft::Condition::kDeft);
      else if (name == "random-subset")
        conditions.push_back(deft::Condition::kRandomSubset);
      else if (name == "all-data")
        conditions.push_back(deft::Condition::kAllData);
      else if (name == "bm25")
        conditions.push_back(deft::Condition::kBm25);
      else
        deft::fail("bad-config", "unknown condition '" + name + "'");
    }
    report = deft::run_experiment(gen.pool, gen.held_out, conditions,
                                  deft::derive_seed(seed, "cli.experiment"),
                                  harness);
  }
  if (experiment == "sweep" || experiment == "all") {
    std::vector<size_t> ks =
        cfg.get<std::vector<size_t>>("synth.ks", {1, 2, 5, 12, 30, 76});
    report.sweep = deft::synth_sweep(gen.pool, gen.held_out, ks,
                                     deft::derive_seed(seed, "cli.sweep"),
                                     harness);
    deft::write_sweep_csv(report.sweep, out.path("sweep.csv").string());
  }
  if (experiment == "budget" || experiment == "all") {
    std::vector<size_t> budgets =
        cfg.get<std::vector<size_t>>("synth.budgets", {4, 16, 100});
    double cost_ratio = cfg.get<double>("synth.cost_ratio", 3.25);
    std::string warnings;
    report.budget = deft::budget_curve(
        gen.pool, gen.held_out, cost_ratio, budgets,
        deft::derive_seed(seed, "cli.budget"), harness, &warnings);
    if (!warnings.empty()) log_line(warnings);
  }

  report.target_task = gen.held_out.task_name;
  write_json(out.path("experiment.json"), deft::report_to_json(report));
}

std::set<std::string> merge(
    std::initializer_list<std::set<std::string>> sets) {
  std::set<std::string> out;
  for (const auto& s : sets) out.insert(s.begin(), s.end());
  return out;
}

struct Subcommand {
  std::string name;
  std::set<std::string> allowed;
  void (*run)(const Config&, OutputTracker&, uint64_t);
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-task data selection pipeline"};
  app.require_subcommand(1);

  std::vector<Subcommand> commands = {
      {"build-index", merge({kPoolKeys, kEmbedKeys, kIndexKeys}),
       cmd_build_index},
      {"retrieve", merge({kPoolKeys, kEmbedKeys, kIndexKeys, kRetrieveKeys}),
       cmd_retrieve},
      {"train", merge({kPoolKeys, kTrainKeys, kModelKeys}), cmd_train},
      {"eval", merge({kPoolKeys, kEvalKeys}), cmd_eval},
      {"analyze", merge({kPoolKeys, kEmbedKeys, kIndexKeys, kAnalyzeKeys}),
       cmd_analyze},
      {"synth", kSynthKeys, cmd_synth},
  };

  struct Options {
    std::string config_path;
    std::string out_dir;
    uint64_t seed = 0;
  };
  std::map<std::string, Options> opts;
  std::map<std::string, CLI::App*> subs;
  std::map<std::string, CLI::Option*> seed_flags;
  for (const auto& cmd : commands) {
    CLI::App* sub = app.add_subcommand(cmd.name);
    Options& o = opts[cmd.name];
    sub->add_option("--config", o.config_path, "config JSON path")
        ->required();
    seed_flags[cmd.name] =
        sub->add_option("--seed", o.seed, "global seed (overrides config)");
    sub->add_option("--out", o.out_dir, "output directory (overrides config)");
    sub->add_flag("--verbose", g_verbose, "log progress to stderr");
    subs[cmd.name] = sub;
  }

  CLI11_PARSE(app, argc, argv);

  for (const auto& cmd : commands) {
    if (!subs[cmd.name]->parsed()) continue;
    const Options& o = opts[cmd.name];
    std::unique_ptr<OutputTracker> tracker;
    try {
      Config cfg(load_config_file(o.config_path), cmd.allowed);
      uint64_t seed = seed_flags[cmd.name]->count() > 0
                          ? o.seed
                          : cfg.get<uint64_t>("seed", 0);
      std::string out_dir =
          !o.out_dir.empty() ? o.out_dir : cfg.get<std::string>("out", ".");
      tracker = std::make_unique<OutputTracker>(out_dir);
      write_resolved_config(*tracker, cfg, seed);
      cmd.run(cfg, *tracker, seed);
      return 0;
    } catch (const deft::Error& e) {
      std::string msg = e.what();
      for (auto& c : msg)
        if (c == '\n') c = ' ';
      std::cerr << "error[" << e.code() << "] " << msg << "\n";
      if (tracker) tracker->remove_partial();
      return 1;
    } catch (const std::exception& e) {
      std::string msg = e.what();
      for (auto& c : msg)
        if (c == '\n') c = ' ';
      std::cerr << "error[internal] " << msg << "\n";
      if (tracker) tracker->remove_partial();
      return 1;
    }
  }
  return 1;
}
