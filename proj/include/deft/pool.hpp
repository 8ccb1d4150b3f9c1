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

#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "deft/core.hpp"

namespace deft {

/// One pool or query item in the uniform text-to-text data model.
/// Query instances carry an empty target; the instruction is kept separate
/// from the instance content so retrieval can toggle it at encode time.
struct PromptedInstance {
  std::string id;
  std::string source_task;
  std::string input_text;
  std::string target_text;
  std::optional<std::string> instruction;
};

/// Field-name mapping from JSONL keys to PromptedInstance fields.
struct FieldMap {
  std::string id = "id";
  std::string task = "task";
  std::string input = "input";
  std::string target = "target";
  std::string instruction = "instruction";
};

struct Pool {
  std::vector<PromptedInstance> instances;
  std::map<std::string, std::vector<size_t>> task_index;  // task -> positions
  std::map<std::string, size_t> counts;                   // task -> count
  std::unordered_map<std::string, size_t> id_index;       // id -> position

  size_t size() const { return instances.size(); }

  const PromptedInstance& by_id(const std::string& id) const {
    auto it = id_index.find(id);
    if (it == id_index.end()) fail("unknown-id", "no instance with id " + id);
    return instances[it->second];
  }

  void add(PromptedInstance inst) {
    if (!id_index.emplace(inst.id, instances.size()).second)
      fail("duplicate-id", "duplicate instance id " + inst.id);
    task_index[inst.source_task].push_back(instances.size());
    counts[inst.source_task] += 1;
    instances.push_back(std::move(inst));
  }

  /// Checks the structural invariants: per-task counts sum to the total and
  /// task_index covers every instance exactly once.
  void validate() const {
    size_t total = 0;
    for (const auto& [task, n] : counts) total += n;
    if (total != instances.size())
      fail("pool-counts", "per-task counts do not sum to pool size");
    size_t covered = 0;
    for (const auto& [task, positions] : task_index) {
      for (size_t pos : positions) {
        if (pos >= instances.size() || instances[pos].source_task != task)
          fail("pool-index", "task_index entry does not match instance");
        ++covered;
      }
    }
    if (covered != instances.size())
      fail("pool-index", "task_index does not cover the pool exactly once");
  }
};

/// Instruction prepended to the input with a single newline when requested
/// and present. Targets never participate.
inline std::string compose_text(const PromptedInstance& inst,
                                bool include_instruction) {
  if (include_instruction && inst.instruction.has_value())
    return *inst.instruction + "\n" + inst.input_text;
  return inst.input_text;
}

namespace detail {

inline PromptedInstance parse_instance(const nlohmann::json& obj,
                                       const FieldMap& fields,
                                       const std::string& where,
                                       size_t line_number) {
  PromptedInstance inst;
  if (!obj.is_object())
    fail("bad-record", where + ": line " + std::to_string(line_number) +
                           " is not a JSON object");
  if (!obj.contains(fields.input) || !obj[fields.input].is_string())
    fail("missing-input", where + ": line " + std::to_string(line_number) +
                              " lacks string field '" + fields.input + "'");
  inst.input_text = obj[fields.input].get<std::string>();
  if (inst.input_text.empty())
    fail("empty-input", where + ": line " + std::to_string(line_number) +
                            " has empty input text");
  if (obj.contains(fields.task) && obj[fields.task].is_string())
    inst.source_task = obj[fields.task].get<std::string>();
  else
    inst.source_task = "default";
  if (obj.contains(fields.id)) {
    if (!obj[fields.id].is_string())
      fail("bad-id", where + ": line " + std::to_string(line_number) +
                         " id field is not a string");
    inst.id = obj[fields.id].get<std::string>();
  } else {
    inst.id = inst.source_task + "/" + std::to_string(line_number);
  }
  if (obj.contains(fields.target) && obj[fields.target].is_string())
    inst.target_text = obj[fields.target].get<std::string>();
  if (obj.contains(fields.instruction) && obj[fields.instruction].is_string())
    inst.instruction = obj[fields.instruction].get<std::string>();
  return inst;
}

}  // namespace detail

/// Reads a JSON-lines pool file. Ids default to `<task>/<line_number>`
/// (1-based) when the record has none.
inline Pool ingest_jsonl(const std::string& path,
                         const FieldMap& fields = FieldMap{}) {
  std::ifstream in(path);
  if (!in) fail("no-such-file", "cannot open pool file " + path);
  Pool pool;
  std::string line;
  size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    nlohmann::json obj = nlohmann::json::parse(line, nullptr, false);
    if (obj.is_discarded())
      fail("bad-json",
           path + ": malformed JSON on line " + std::to_string(line_number));
    PromptedInstance inst =
        detail::parse_instance(obj, fields, path, line_number);
    auto dup = pool.id_index.find(inst.id);
    if (dup != pool.id_index.end())
      fail("duplicate-id", path + ": duplicate id '" + inst.id + "' on line " +
                               std::to_string(line_number));
    pool.add(std::move(inst));
  }
  return pool;
}

inline nlohmann::json instance_to_json(const PromptedInstance& inst,
                                       const FieldMap& fields = FieldMap{}) {
  nlohmann::json obj;
  obj[fields.id] = inst.id;
  obj[fields.task] = inst.source_task;
  obj[fields.input] = inst.input_text;
  obj[fields.target] = inst.target_text;
  if (inst.instruction.has_value()) obj[fields.instruction] = *inst.instruction;
  return obj;
}

/// Writes instances as JSONL in the pool schema, one compact object per line.
/// Key order is alphabetical, so the output is byte-deterministic.
inline void write_jsonl(const std::vector<PromptedInstance>& instances,
                        const std::string& path,
                        const FieldMap& fields = FieldMap{}) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("io-open", "cannot open output file " + path);
  for (const auto& inst : instances) {
    out << instance_to_json(inst, fields).dump() << "\n";
  }
  if (!out) fail("io-write", "failed writing " + path);
}

/// min(n, available) instances sampled without replacement under the seed,
/// with targets stripped: retrieval never sees labels.
inline std::vector<PromptedInstance> sample_queries(
    const std::vector<PromptedInstance>& source, size_t n, uint64_t seed) {
  if (source.empty()) fail("empty-source", "cannot sample from empty source");
  if (n == 0) fail("bad-count", "query sample size must be >= 1");
  Rng rng(derive_seed(seed, "pool.sample_queries"));
  std::vector<size_t> picks = rng.sample_indices(source.size(), n);
  std::vector<PromptedInstance> out;
  out.reserve(picks.size());
  for (size_t idx : picks) {
    PromptedInstance q = source[idx];
    q.target_text.clear();
    out.push_back(std::move(q));
  }
  return out;
}

inline std::vector<PromptedInstance> sample_queries(const Pool& pool, size_t n,
                                                    uint64_t seed) {
  return sample_queries(pool.instances, n, seed);
}

}  // namespace deft
