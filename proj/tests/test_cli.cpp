#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "deft/core.hpp"
#include "deft/pool.hpp"

using namespace deft;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

fs::path work_dir() {
  fs::path dir = fs::temp_directory_path() / "deft-cli-tests";
  fs::create_directories(dir);
  return dir;
}

RunResult run_cli(const std::string& args) {
  fs::path log = work_dir() / "run.log";
  std::string cmd = std::string(DEFT_CLI_PATH) + " " + args + " > " +
                    log.string() + " 2>&1";
  int status = std::system(cmd.c_str());
  RunResult result;
  result.exit_code = WEXITSTATUS(status);
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  result.output = ss.str();
  return result;
}

void write_config(const fs::path& path, const json& j) {
  std::ofstream out(path);
  out << j.dump(2);
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Small two-cluster pool plus a query file, written once per test run.
void write_corpus(const fs::path& dir) {
  Rng rng(77);
  std::vector<PromptedInstance> pool_insts;
  for (const std::string cluster : {"a", "b"}) {
    for (int task = 0; task < 2; ++task) {
      for (int i = 0; i < 30; ++i) {
        PromptedInstance inst;
        inst.id = cluster + std::to_string(task) + "/" + std::to_string(i);
        inst.source_task = cluster + std::to_string(task);
        std::string text;
        for (int t = 0; t < 6; ++t)
          text += (t ? " " : "") + cluster + std::to_string(rng.below(15));
        inst.input_text = text;
        inst.target_text = "label-" + cluster;
        inst.instruction = "pick the family";
        pool_insts.push_back(inst);
      }
    }
  }
  write_jsonl(pool_insts, (dir / "pool.jsonl").string());

  std::vector<PromptedInstance> queries;
  for (int i = 0; i < 6; ++i) {
    PromptedInstance q;
    q.id = "q/" + std::to_string(i);
    q.source_task = "held-out";
    std::string text;
    for (int t = 0; t < 6; ++t)
      text += (t ? " " : "") + std::string("a") + std::to_string(rng.below(15));
    q.input_text = text;
    queries.push_back(q);
  }
  write_jsonl(queries, (dir / "queries.jsonl").string());
}

}  // namespace

TEST_SUITE_BEGIN("cli");

TEST_CASE("build-index then retrieve end to end, deterministic artifacts") {
  fs::path dir = work_dir() / "pipeline";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_corpus(dir);

  json build_cfg = {{"pool.path", (dir / "pool.jsonl").string()},
                    {"embed.dim", 64},
                    {"index.M", 8},
                    {"index.ef_construction", 32},
                    {"index.ef_search", 32},
                    {"out", (dir / "index_out").string()},
                    {"seed", 9}};
  write_config(dir / "build.json", build_cfg);
  RunResult build = run_cli("build-index --config " +
                            (dir / "build.json").string());
  CHECK(build.exit_code == 0);
  CHECK(fs::exists(dir / "index_out" / "index.bin"));
  CHECK(fs::exists(dir / "index_out" / "index.meta.json"));
  CHECK(fs::exists(dir / "index_out" / "resolved_config.json"));

  json retrieve_cfg = {{"pool.path", (dir / "pool.jsonl").string()},
                       {"retrieve.queries_path", (dir / "queries.jsonl").string()},
                       {"retrieve.k", 5},
                       {"index.path", (dir / "index_out" / "index.bin").string()},
                       {"out", (dir / "retrieve_out").string()},
                       {"seed", 9}};
  write_config(dir / "retrieve.json", retrieve_cfg);
  RunResult retrieve =
      run_cli("retrieve --config " + (dir / "retrieve.json").string());
  CHECK(retrieve.exit_code == 0);

  json rset = json::parse(file_bytes(dir / "retrieve_out" / "retrieved_set.json"));
  CHECK(rset["ids"].size() <= 6 * 5);  // |R| <= |Q| * k
  CHECK(rset["union_bound"] == 30);
  CHECK(fs::exists(dir / "retrieve_out" / "composition.json"));

  Pool retrieved = ingest_jsonl((dir / "retrieve_out" / "retrieved.jsonl").string());
  CHECK(retrieved.size() == rset["ids"].size());

  // rerun with identical config and seed: byte-identical artifacts
  std::string first_index = file_bytes(dir / "index_out" / "index.bin");
  std::string first_rset = file_bytes(dir / "retrieve_out" / "retrieved_set.json");
  std::string first_jsonl = file_bytes(dir / "retrieve_out" / "retrieved.jsonl");
  CHECK(run_cli("build-index --config " + (dir / "build.json").string())
            .exit_code == 0);
  CHECK(run_cli("retrieve --config " + (dir / "retrieve.json").string())
            .exit_code == 0);
  CHECK(file_bytes(dir / "index_out" / "index.bin") == first_index);
  CHECK(file_bytes(dir / "retrieve_out" / "retrieved_set.json") == first_rset);
  CHECK(file_bytes(dir / "retrieve_out" / "retrieved.jsonl") == first_jsonl);
}

TEST_CASE("unknown config keys fail fast and name the key") {
  fs::path dir = work_dir() / "badkey";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_config(dir / "bad.json", {{"pool.path", "x"}, {"index.bogus", 3}});
  RunResult result =
      run_cli("build-index --config " + (dir / "bad.json").string());
  CHECK(result.exit_code == 1);
  CHECK(result.output.find("error[unknown-key]") != std::string::npos);
  CHECK(result.output.find("index.bogus") != std::string::npos);
}

TEST_CASE("missing required keys and files give single-line errors") {
  fs::path dir = work_dir() / "missing";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_config(dir / "empty.json", json::object());
  RunResult result =
      run_cli("build-index --config " + (dir / "empty.json").string());
  CHECK(result.exit_code == 1);
  CHECK(result.output.find("error[missing-key]") != std::string::npos);
  CHECK(result.output.find("pool.path") != std::string::npos);
  // single line
  CHECK(std::count(result.output.begin(), result.output.end(), '\n') <= 1);

  RunResult nofile = run_cli("retrieve --config /nonexistent.json");
  CHECK(nofile.exit_code == 1);
  CHECK(nofile.output.find("error[no-such-file]") != std::string::npos);
}

TEST_CASE("failures remove partial outputs") {
  fs::path dir = work_dir() / "partial";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_corpus(dir);
  json cfg = {{"pool.path", (dir / "pool.jsonl").string()},
              {"retrieve.queries_path", (dir / "queries.jsonl").string()},
              {"index.path", (dir / "does_not_exist.bin").string()},
              {"out", (dir / "out").string()},
              {"seed", 1}};
  write_config(dir / "cfg.json", cfg);
  RunResult result = run_cli("retrieve --config " + (dir / "cfg.json").string());
  CHECK(result.exit_code == 1);
  CHECK_FALSE(fs::exists(dir / "out" / "resolved_config.json"));
  CHECK_FALSE(fs::exists(dir / "out" / "retrieved.jsonl"));
}

TEST_CASE("train then eval: checkpoint, loss trace and metrics") {
  fs::path dir = work_dir() / "train";
  fs::remove_all(dir);
  fs::create_directories(dir);

  // tiny copy task
  std::vector<PromptedInstance> data;
  Rng rng(5);
  for (int i = 0; i < 24; ++i) {
    PromptedInstance inst;
    inst.id = "d/" + std::to_string(i);
    inst.source_task = "copy";
    std::string text = "w" + std::to_string(rng.below(8)) + " w" +
                       std::to_string(rng.below(8));
    inst.input_text = text;
    inst.target_text = text;
    data.push_back(inst);
  }
  write_jsonl(data, (dir / "train.jsonl").string());

  // eval file with choices
  {
    std::ofstream out(dir / "eval.jsonl");
    for (int i = 0; i < 8; ++i) {
      json obj = {{"input", data[i].input_text},
                  {"target", data[i].target_text},
                  {"choices", {data[i].target_text, "w999 w998"}}};
      out << obj.dump() << "\n";
    }
  }

  json train_cfg = {{"train.data_path", (dir / "train.jsonl").string()},
                    {"train.epochs", 30},
                    {"train.lr", 3e-3},
                    {"model.d_model", 32},
                    {"model.heads", 2},
                    {"model.d_ff", 64},
                    {"model.layers", 1},
                    {"model.max_len", 12},
                    {"out", (dir / "model_out").string()},
                    {"seed", 3}};
  write_config(dir / "train.json", train_cfg);
  RunResult train = run_cli("train --config " + (dir / "train.json").string());
  CHECK(train.exit_code == 0);
  CHECK(fs::exists(dir / "model_out" / "model.ckpt"));
  std::ifstream trace(dir / "model_out" / "loss_trace.csv");
  std::string header;
  std::getline(trace, header);
  CHECK(header == "step,lr,loss");

  json eval_cfg = {{"eval.checkpoint", (dir / "model_out" / "model.ckpt").string()},
                   {"eval.data_path", (dir / "eval.jsonl").string()},
                   {"eval.mode", "rank"},
                   {"out", (dir / "eval_out").string()},
                   {"seed", 3}};
  write_config(dir / "eval.json", eval_cfg);
  RunResult eval_run = run_cli("eval --config " + (dir / "eval.json").string());
  CHECK(eval_run.exit_code == 0);
  json metrics = json::parse(file_bytes(dir / "eval_out" / "metrics.json"));
  CHECK(metrics["n"] == 8);
  CHECK(metrics["accuracy"].get<double>() >= 0.75);  // memorized copy task

  // ia3-only finetune from the checkpoint keeps the pipeline composable
  json ia3_cfg = {{"train.data_path", (dir / "train.jsonl").string()},
                  {"train.mode", "ia3-only"},
                  {"train.steps", 10},
                  {"train.init_checkpoint",
                   (dir / "model_out" / "model.ckpt").string()},
                  {"out", (dir / "ia3_out").string()},
                  {"seed", 4}};
  write_config(dir / "ia3.json", ia3_cfg);
  CHECK(run_cli("train --config " + (dir / "ia3.json").string()).exit_code == 0);
  CHECK(fs::exists(dir / "ia3_out" / "model.ckpt"));
}

TEST_CASE("bm25 engine and analyze composition work from files") {
  fs::path dir = work_dir() / "bm25";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_corpus(dir);

  json cfg = {{"pool.path", (dir / "pool.jsonl").string()},
              {"retrieve.queries_path", (dir / "queries.jsonl").string()},
              {"retrieve.engine", "bm25"},
              {"retrieve.k", 4},
              {"out", (dir / "out").string()},
              {"seed", 2}};
  write_config(dir / "cfg.json", cfg);
  CHECK(run_cli("retrieve --config " + (dir / "cfg.json").string()).exit_code ==
        0);

  json analyze_cfg = {{"pool.path", (dir / "pool.jsonl").string()},
                      {"analyze.mode", "composition"},
                      {"analyze.retrieved_path",
                       (dir / "out" / "retrieved_set.json").string()},
                      {"out", (dir / "analysis").string()},
                      {"seed", 2}};
  write_config(dir / "analyze.json", analyze_cfg);
  CHECK(run_cli("analyze --config " + (dir / "analyze.json").string())
            .exit_code == 0);
  json comp = json::parse(file_bytes(dir / "analysis" / "composition.json"));
  CHECK(comp.contains("per_task"));
  CHECK(comp.contains("overlap_factor"));
  CHECK(comp.contains("union_bound"));
  double frac_sum = 0.0;
  for (const auto& row : comp["per_task"])
    frac_sum += row["frac_of_R"].get<double>();
  CHECK(frac_sum == doctest::Approx(1.0));
}

TEST_CASE("synth subcommand emits an experiment report") {
  fs::path dir = work_dir() / "synth";
  fs::remove_all(dir);
  fs::create_directories(dir);
  json cfg = {{"synth.n_clusters", 2},
              {"synth.tasks_per_cluster", 2},
              {"synth.instances_per_task", 30},
              {"synth.query_size", 8},
              {"synth.k", 4},
              {"synth.eval_size", 10},
              {"synth.epochs", 1},
              {"synth.embed_dim", 32},
              {"out", (dir / "out").string()},
              {"seed", 6}};
  write_config(dir / "cfg.json", cfg);
  RunResult result = run_cli("synth --config " + (dir / "cfg.json").string());
  CHECK(result.exit_code == 0);
  json report = json::parse(file_bytes(dir / "out" / "experiment.json"));
  REQUIRE(report["conditions"].size() == 2);
  CHECK(report["conditions"][0]["name"] == "deft");
  CHECK(report["conditions"][1]["name"] == "random-subset");
  CHECK(report["conditions"][0]["train_size"] ==
        report["conditions"][1]["train_size"]);
  CHECK(report["conditions"][0].count("runtime_sec") == 0);
}

TEST_SUITE_END();
