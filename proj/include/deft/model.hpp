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
// Desk-scale encoder-decoder transformer trained from scratch with
// teacher-forced cross entropy. Pre-RMSNorm blocks, sinusoidal positions,
// no biases. Every attention and feed-forward block carries IA3 rescaling
// vectors:
//
//   Attn(Q,K,V) = softmax(Q (l_k ⊙ K^T) / sqrt(d_k)) (l_v ⊙ V)
//   FFN(x)      = (l_ff ⊙ f(W1 x)) W2
//
// The vectors start at ones (an exact identity) and are the only trainable
// parameters in ia3-only finetuning. All math is double precision and
// single-threaded, so runs are bit-reproducible under a seed.
//

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "deft/core.hpp"
#include "deft/pool.hpp"
#include "deft/embed.hpp"

namespace deft {

// ---------------------------------------------------------------------------
// Dense double-precision activations
// ---------------------------------------------------------------------------

struct Act {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<double> v;

  Act() = default;
  Act(size_t r, size_t c) : rows(r), cols(c), v(r * c, 0.0) {}

  double* row(size_t i) { return v.data() + i * cols; }
  const double* row(size_t i) const { return v.data() + i * cols; }
  double& at(size_t i, size_t j) { return v[i * cols + j]; }
  double at(size_t i, size_t j) const { return v[i * cols + j]; }
};

namespace nn {

// out (+)= a * b, shapes (m x k)(k x n)
inline void gemm_nn(const Act& a, const Act& b, Act& out, bool accumulate) {
  if (!accumulate) {
    out.rows = a.rows;
    out.cols = b.cols;
    out.v.assign(a.rows * b.cols, 0.0);
  }
  for (size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.row(i);
    double* orow = out.row(i);
    for (size_t k = 0; k < a.cols; ++k) {
      double av = arow[k];
      if (av == 0.0) continue;
      const double* brow = b.row(k);
      for (size_t j = 0; j < b.cols; ++j) orow[j] += av * brow[j];
    }
  }
}

// out (+)= a * b^T, shapes (m x k)(n x k)
inline void gemm_nt(const Act& a, const Act& b, Act& out, bool accumulate) {
  if (!accumulate) {
    out.rows = a.rows;
    out.cols = b.rows;
    out.v.assign(a.rows * b.rows, 0.0);
  }
  for (size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.row(i);
    double* orow = out.row(i);
    for (size_t j = 0; j < b.rows; ++j) {
      const double* brow = b.row(j);
      double s = 0.0;
      for (size_t k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
      orow[j] += s;
    }
  }
}

// out (+)= a^T * b, shapes (l x m)(l x n) -> (m x n)
inline void gemm_tn(const Act& a, const Act& b, Act& out, bool accumulate) {
  if (!accumulate) {
    out.rows = a.cols;
    out.cols = b.cols;
    out.v.assign(a.cols * b.cols, 0.0);
  }
  for (size_t l = 0; l < a.rows; ++l) {
    const double* arow = a.row(l);
    const double* brow = b.row(l);
    for (size_t i = 0; i < a.cols; ++i) {
      double av = arow[i];
      if (av == 0.0) continue;
      double* orow = out.row(i);
      for (size_t j = 0; j < b.cols; ++j) orow[j] += av * brow[j];
    }
  }
}

/// Row-wise softmax that returns rows summing to one; masked entries get
/// probability zero.
inline void softmax_rows(Act& s, bool causal) {
  for (size_t i = 0; i < s.rows; ++i) {
    double* row = s.row(i);
    size_t limit = causal ? std::min(i + 1, s.cols) : s.cols;
    double max_v = row[0];
    for (size_t j = 1; j < limit; ++j) max_v = std::max(max_v, row[j]);
    double sum = 0.0;
    for (size_t j = 0; j < limit; ++j) {
      row[j] = std::exp(row[j] - max_v);
      sum += row[j];
    }
    for (size_t j = 0; j < limit; ++j) row[j] /= sum;
    for (size_t j = limit; j < s.cols; ++j) row[j] = 0.0;
  }
}

}  // namespace nn

enum class Activation : uint8_t { kRelu = 0, kGelu = 1 };

inline double activate(Activation f, double x) {
  switch (f) {
    case Activation::kRelu:
      return x > 0.0 ? x : 0.0;
    case Activation::kGelu:
      return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
  }
  return x;
}

inline double activate_grad(Activation f, double x) {
  switch (f) {
    case Activation::kRelu:
      return x > 0.0 ? 1.0 : 0.0;
    case Activation::kGelu: {
      double phi = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
      double pdf = 0.3989422804014326779 * std::exp(-0.5 * x * x);
      return phi + x * pdf;
    }
  }
  return 1.0;
}

// ---------------------------------------------------------------------------
// The rescaled attention and feed-forward primitives. These run on
// already-projected inputs; the transformer calls them per head. A null
// scale vector skips the multiplication entirely, which is how the exact
// adapters-at-ones identity is checked.
// ---------------------------------------------------------------------------

struct AttnIa3Cache {
  Act scaled_k, scaled_v;
  Act attn;  // row-stochastic attention matrix
};

/// softmax(Q (l_k ⊙ K^T) / sqrt(d_k)) (l_v ⊙ V); the vectors broadcast over
/// the key/value feature dimension. Optional causal mask for decoders.
inline Act attention_ia3(const Act& q, const Act& k, const Act& v,
                         const double* l_k, const double* l_v,
                         bool causal = false, AttnIa3Cache* cache = nullptr) {
  if (q.cols != k.cols || k.rows != v.rows)
    fail("shape-mismatch", "attention inputs do not conform");
  const size_t d_k = q.cols;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_k));

  Act ks = k;
  if (l_k)
    for (size_t j = 0; j < ks.rows; ++j)
      for (size_t f = 0; f < d_k; ++f) ks.at(j, f) *= l_k[f];
  Act vs = v;
  if (l_v)
    for (size_t j = 0; j < vs.rows; ++j)
      for (size_t f = 0; f < vs.cols; ++f) vs.at(j, f) *= l_v[f];

  Act scores;
  nn::gemm_nt(q, ks, scores, false);
  for (double& x : scores.v) x *= scale;
  nn::softmax_rows(scores, causal);

  Act out;
  nn::gemm_nn(scores, vs, out, false);
  if (cache) {
    cache->scaled_k = std::move(ks);
    cache->scaled_v = std::move(vs);
    cache->attn = std::move(scores);
  }
  return out;
}

struct AttnIa3Grads {
  Act dq, dk, dv;
  std::vector<double> dl_k, dl_v;
};

inline AttnIa3Grads attention_ia3_backward(const Act& q, const Act& k,
                                           const Act& v, const double* l_k,
                                           const double* l_v,
                                           const AttnIa3Cache& cache,
                                           const Act& d_out) {
  const size_t d_k = q.cols;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_k));
  AttnIa3Grads g;
  g.dl_k.assign(l_k ? d_k : 0, 0.0);
  g.dl_v.assign(l_v ? v.cols : 0, 0.0);

  Act d_attn;
  nn::gemm_nt(d_out, cache.scaled_v, d_attn, false);
  Act d_vs;
  nn::gemm_tn(cache.attn, d_out, d_vs, false);

  // softmax backward: ds = a ⊙ (da - rowdot(da, a))
  Act d_scores(cache.attn.rows, cache.attn.cols);
  for (size_t i = 0; i < d_scores.rows; ++i) {
    double dot = 0.0;
    for (size_t j = 0; j < d_scores.cols; ++j)
      dot += d_attn.at(i, j) * cache.attn.at(i, j);
    for (size_t j = 0; j < d_scores.cols; ++j)
      d_scores.at(i, j) =
          cache.attn.at(i, j) * (d_attn.at(i, j) - dot) * scale;
  }

  nn::gemm_nn(d_scores, cache.scaled_k, g.dq, false);
  Act d_ks;
  nn::gemm_tn(d_scores, q, d_ks, false);

  g.dk = d_ks;
  if (l_k) {
    for (size_t j = 0; j < k.rows; ++j)
      for (size_t f = 0; f < d_k; ++f) {
        g.dl_k[f] += d_ks.at(j, f) * k.at(j, f);
        g.dk.at(j, f) = d_ks.at(j, f) * l_k[f];
      }
  }
  g.dv = d_vs;
  if (l_v) {
    for (size_t j = 0; j < v.rows; ++j)
      for (size_t f = 0; f < v.cols; ++f) {
        g.dl_v[f] += d_vs.at(j, f) * v.at(j, f);
        g.dv.at(j, f) = d_vs.at(j, f) * l_v[f];
      }
  }
  return g;
}

struct FfnIa3Cache {
  Act h;  // x W1
  Act z;  // f(h)
};

/// (l_ff ⊙ f(x W1)) W2.
inline Act ffn_ia3(const Act& x, const Act& w1, const Act& w2,
                   const double* l_ff, Activation f,
                   FfnIa3Cache* cache = nullptr) {
  if (x.cols != w1.rows || w1.cols != w2.rows)
    fail("shape-mismatch", "ffn inputs do not conform");
  Act h;
  nn::gemm_nn(x, w1, h, false);
  Act z = h;
  for (double& val : z.v) val = activate(f, val);
  Act zs = z;
  if (l_ff)
    for (size_t i = 0; i < zs.rows; ++i)
      for (size_t j = 0; j < zs.cols; ++j) zs.at(i, j) *= l_ff[j];
  Act out;
  nn::gemm_nn(zs, w2, out, false);
  if (cache) {
    cache->h = std::move(h);
    cache->z = std::move(z);
  }
  return out;
}

struct FfnIa3Grads {
  Act dx, dw1, dw2;
  std::vector<double> dl_ff;
};

inline FfnIa3Grads ffn_ia3_backward(const Act& x, const Act& w1,
                                    const Act& w2, const double* l_ff,
                                    Activation f, const FfnIa3Cache& cache,
                                    const Act& d_out) {
  FfnIa3Grads g;
  g.dl_ff.assign(l_ff ? w1.cols : 0, 0.0);

  Act zs = cache.z;
  if (l_ff)
    for (size_t i = 0; i < zs.rows; ++i)
      for (size_t j = 0; j < zs.cols; ++j) zs.at(i, j) *= l_ff[j];
  nn::gemm_tn(zs, d_out, g.dw2, false);

  Act d_zs;
  nn::gemm_nt(d_out, w2, d_zs, false);
  Act d_h = d_zs;
  for (size_t i = 0; i < d_zs.rows; ++i)
    for (size_t j = 0; j < d_zs.cols; ++j) {
      if (l_ff) {
        g.dl_ff[j] += d_zs.at(i, j) * cache.z.at(i, j);
        d_h.at(i, j) = d_zs.at(i, j) * l_ff[j];
      }
      d_h.at(i, j) *= activate_grad(f, cache.h.at(i, j));
    }
  nn::gemm_nt(d_h, w1, g.dx, false);
  nn::gemm_tn(x, d_h, g.dw1, false);
  return g;
}

// ---------------------------------------------------------------------------
// Vocabulary: word-level, built from the training corpus.
// ---------------------------------------------------------------------------

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Vocab() { init_specials(); }

  static Vocab build(const std::vector<PromptedInstance>& data,
                     size_t limit = 8192) {
    std::map<std::string, size_t> freq;
    for (const auto& inst : data) {
      for (const auto& tok : tokenize(compose_text(inst, true))) ++freq[tok];
      for (const auto& tok : tokenize(inst.target_text)) ++freq[tok];
    }
    std::vector<std::pair<std::string, size_t>> ranked(freq.begin(),
                                                       freq.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocab vocab;
    for (const auto& [tok, count] : ranked) {
      if (vocab.tokens_.size() >= limit) break;
      vocab.add(tok);
    }
    return vocab;
  }

  size_t size() const { return tokens_.size(); }

  int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(int id) const { return tokens_[id]; }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> out;
    for (const auto& tok : tokenize(text)) out.push_back(id(tok));
    return out;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == kBos || id == kEos || id == kPad) continue;
      if (!out.empty()) out += ' ';
      out += tokens_[id];
    }
    return out;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  static Vocab from_tokens(const std::vector<std::string>& tokens) {
    Vocab vocab;
    vocab.tokens_.clear();
    vocab.index_.clear();
    for (const auto& tok : tokens) vocab.add(tok);
    return vocab;
  }

 private:
  void init_specials() {
    for (const char* s : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(s);
  }

  void add(const std::string& tok) {
    if (index_.count(tok)) return;
    index_.emplace(tok, static_cast<int>(tokens_.size()));
    tokens_.push_back(tok);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

struct ModelConfig {
  size_t num_layers = 2;  // per stack: encoder and decoder each
  size_t d_model = 128;
  size_t heads = 4;
  size_t d_ff = 256;
  size_t vocab_size = 0;  // filled from the vocabulary
  size_t max_len = 64;
  Activation activation = Activation::kRelu;
  bool ia3_per_head = false;  // one vector per head instead of shared
  uint64_t seed = 0;

  size_t d_k() const { return d_model / heads; }
  size_t ia3_kv_len() const { return ia3_per_head ? d_model : d_k(); }

  void validate() const {
    if (d_model == 0 || heads == 0 || d_ff == 0 || num_layers == 0 ||
        max_len == 0)
      fail("bad-model-config", "all model dimensions must be >= 1");
    if (d_model % heads != 0)
      fail("bad-model-config", "d_model must be divisible by heads");
  }
};

enum class TrainMode : uint8_t { kFull = 0, kIa3Only = 1 };
enum class OptimizerKind : uint8_t { kAdam = 0, kAdafactor = 1 };

struct TrainConfig {
  TrainMode mode = TrainMode::kFull;
  size_t epochs = 0;  // either epochs or steps must be positive
  size_t steps = 0;
  size_t batch_size = 8;
  double learning_rate = 5e-5;
  double warmup_fraction = 0.1;  // used when warmup_steps == 0
  size_t warmup_steps = 0;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  uint64_t seed = 0;

  /// Multitask finetuning schedule: 5 epochs, batch 8, Adam at 5e-5 with
  /// linear warmup over the first 10% of steps and linear decay after.
  static TrainConfig deft_defaults() {
    TrainConfig cfg;
    cfg.mode = TrainMode::kFull;
    cfg.epochs = 5;
    cfg.batch_size = 8;
    cfg.learning_rate = 5e-5;
    cfg.warmup_fraction = 0.1;
    cfg.optimizer = OptimizerKind::kAdam;
    return cfg;
  }

  /// Few-shot adapter schedule: 1000 steps, batch 8, Adafactor-style at
  /// 0.003 with 60 warmup steps and linear decay; adapters only.
  static TrainConfig fewshot_defaults() {
    TrainConfig cfg;
    cfg.mode = TrainMode::kIa3Only;
    cfg.steps = 1000;
    cfg.batch_size = 8;
    cfg.learning_rate = 3e-3;
    cfg.warmup_steps = 60;
    cfg.optimizer = OptimizerKind::kAdafactor;
    return cfg;
  }

  void validate() const {
    if (epochs == 0 && steps == 0)
      fail("bad-train-config", "set epochs or steps");
    if (batch_size == 0) fail("bad-train-config", "batch_size must be >= 1");
    if (learning_rate <= 0.0) fail("bad-train-config", "lr must be > 0");
  }
};

/// Linear warmup to the peak over warmup steps, then linear decay to zero
/// at the final step. Steps are 1-based.
inline double lr_at_step(size_t step, size_t total_steps, size_t warmup_steps,
                         double peak) {
  if (total_steps == 0) return 0.0;
  warmup_steps = std::min(warmup_steps, total_steps);
  if (warmup_steps > 0 && step <= warmup_steps)
    return peak * static_cast<double>(step) /
           static_cast<double>(warmup_steps);
  if (total_steps == warmup_steps) return peak;
  return peak * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup_steps);
}

struct StepStat {
  size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

inline void write_loss_trace(const std::vector<StepStat>& trace,
                             const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("io-open", "cannot open " + path);
  out << "step,lr,loss\n";
  char buf[96];
  for (const auto& s : trace) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", s.step, s.lr, s.loss);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// Rank classification helpers
// ---------------------------------------------------------------------------

struct RankClassificationResult {
  std::vector<double> losses;  // per choice
  size_t argmin = 0;
  double margin = 0.0;  // second best minus best; 0 when tied
};

/// First index of the minimum; ties resolve to the lowest index. The argmin
/// is invariant under any strictly increasing transform of the losses.
inline size_t argmin_index(const std::vector<double>& losses) {
  size_t best = 0;
  for (size_t i = 1; i < losses.size(); ++i)
    if (losses[i] < losses[best]) best = i;
  return best;
}

inline RankClassificationResult rank_from_losses(std::vector<double> losses) {
  RankClassificationResult result;
  result.argmin = argmin_index(losses);
  double best = losses[result.argmin];
  double second = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < losses.size(); ++i)
    if (i != result.argmin) second = std::min(second, losses[i]);
  result.margin = losses.size() > 1 ? second - best : 0.0;
  result.losses = std::move(losses);
  return result;
}

// ---------------------------------------------------------------------------
// Transformer
// ---------------------------------------------------------------------------

class Transformer {
 public:
  struct Tensor {
    std::string name;
    Act w;
    Act g;
    bool adapter = false;
    // Adam state
    Act m, v;
    // Adafactor state: factored second moments for matrices, plain for
    // vectors.
    std::vector<double> fr, fc;
  };

  Transformer(ModelConfig cfg, Vocab vocab)
      : cfg_(cfg), vocab_(std::move(vocab)) {
    cfg_.vocab_size = vocab_.size();
    cfg_.validate();
    build_parameters();
    init_parameters();
    build_positional();
  }

  const ModelConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }

  bool ia3_enabled() const { return ia3_enabled_; }
  void set_ia3_enabled(bool on) { ia3_enabled_ = on; }

  Tensor& tensor(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) fail("no-tensor", "unknown tensor " + name);
    return tensors_[it->second];
  }

  std::vector<std::string> tensor_names() const {
    std::vector<std::string> names;
    names.reserve(tensors_.size());
    for (const auto& t : tensors_) names.push_back(t.name);
    return names;
  }

  uint64_t checksum(bool adapters) const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& t : tensors_) {
      if (t.adapter != adapters) continue;
      h = fnv1a64_bytes(t.name.data(), t.name.size(), h);
      h = fnv1a64_bytes(t.w.v.data(), t.w.v.size() * sizeof(double), h);
    }
    return h;
  }
  uint64_t non_adapter_checksum() const { return checksum(false); }
  uint64_t adapter_checksum() const { return checksum(true); }

  // --- training -----------------------------------------------------------

  std::vector<StepStat> train(const std::vector<PromptedInstance>& data,
                              const TrainConfig& tc) {
    tc.validate();
    if (data.empty()) fail("empty-dataset", "training set is empty");
    std::vector<Sample> samples;
    samples.reserve(data.size());
    for (const auto& inst : data) samples.push_back(make_sample(inst));

    const size_t steps_per_epoch =
        (samples.size() + tc.batch_size - 1) / tc.batch_size;
    const size_t total_steps =
        tc.steps > 0 ? tc.steps : tc.epochs * steps_per_epoch;
    const size_t warmup =
        tc.warmup_steps > 0
            ? tc.warmup_steps
            : static_cast<size_t>(tc.warmup_fraction *
                                  static_cast<double>(total_steps));
    std::vector<StepStat> trace;
    trace.reserve(total_steps);

    std::vector<size_t> order(samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    size_t cursor = 0;
    size_t epoch = 0;
    Rng shuffle_rng(derive_seed(tc.seed, "train.shuffle"));
    shuffle_rng.shuffle(order);

    for (size_t step = 1; step <= total_steps; ++step) {
      std::vector<const Sample*> batch;
      for (size_t b = 0; b < tc.batch_size && !samples.empty(); ++b) {
        if (cursor == order.size()) {
          cursor = 0;
          ++epoch;
          shuffle_rng.shuffle(order);
        }
        batch.push_back(&samples[order[cursor++]]);
      }
      double lr = lr_at_step(step, total_steps, warmup, tc.learning_rate);
      double loss = train_step(batch, tc, lr, step);
      if (!std::isfinite(loss))
        fail("nan-loss",
             "training diverged at step " + std::to_string(step));
      trace.push_back({step, lr, loss});
    }
    return trace;
  }

  /// Adapter-only finetuning; non-adapter parameters are bit-identical
  /// before and after.
  std::vector<StepStat> finetune_ia3(const std::vector<PromptedInstance>& data,
                                     TrainConfig tc) {
    tc.mode = TrainMode::kIa3Only;
    if (tc.steps == 0 && tc.epochs == 0) return {};
    return train(data, tc);
  }

  // --- evaluation ---------------------------------------------------------

  /// Summed token cross entropy of each choice conditioned on the input;
  /// lowest loss wins, ties break toward the lower index. Optionally
  /// normalized by choice token count.
  RankClassificationResult rank_classify(const std::string& input_text,
                                         const std::vector<std::string>& choices,
                                         bool normalize_by_length = false) {
    if (choices.size() < 2)
      fail("bad-choices", "rank classification needs >= 2 choices");
    EncoderState enc = run_encoder(encode_input(input_text));
    std::vector<double> losses;
    losses.reserve(choices.size());
    for (const auto& choice : choices) {
      if (choice.empty()) fail("empty-choice", "choice string is empty");
      std::vector<int> target = vocab_.encode(choice);
      clip_target(target);
      double sum = 0.0;
      DecoderResult dec = run_decoder(enc, decoder_input(target));
      std::vector<int> want = decoder_target(target);
      for (size_t t = 0; t < want.size(); ++t)
        sum += token_nll(dec.logits, t, want[t]);
      losses.push_back(normalize_by_length
                           ? sum / static_cast<double>(want.size())
                           : sum);
    }
    return rank_from_losses(std::move(losses));
  }

  /// Argmax token per step until the end symbol or max_len tokens.
  std::string greedy_decode(const std::string& input_text, size_t max_len) {
    if (max_len == 0) fail("bad-max-len", "max_len must be >= 1");
    EncoderState enc = run_encoder(encode_input(input_text));
    std::vector<int> out_ids;
    std::vector<int> dec_in{Vocab::kBos};
    for (size_t step = 0; step < max_len; ++step) {
      DecoderResult dec = run_decoder(enc, dec_in);
      const double* logits = dec.logits.row(dec_in.size() - 1);
      int best = 0;
      for (size_t c = 1; c < vocab_.size(); ++c)
        if (logits[c] > logits[best]) best = static_cast<int>(c);
      if (best == Vocab::kEos) break;
      out_ids.push_back(best);
      dec_in.push_back(best);
      if (dec_in.size() >= cfg_.max_len) break;
    }
    return vocab_.decode(out_ids);
  }

  /// Mean token loss of the model on one instance (teacher forcing).
  double instance_loss(const PromptedInstance& inst) {
    Sample s = make_sample(inst);
    EncoderState enc = run_encoder(s.enc_ids);
    DecoderResult dec = run_decoder(enc, s.dec_in);
    double sum = 0.0;
    for (size_t t = 0; t < s.dec_target.size(); ++t)
      sum += token_nll(dec.logits, t, s.dec_target[t]);
    return sum / static_cast<double>(s.dec_target.size());
  }

  /// Mean per-token loss of a batch, forward only.
  double batch_loss(const std::vector<PromptedInstance>& batch) {
    std::vector<Sample> samples;
    for (const auto& inst : batch) samples.push_back(make_sample(inst));
    size_t total_tokens = 0;
    for (const auto& s : samples) total_tokens += s.dec_target.size();
    double sum = 0.0;
    for (const auto& s : samples) {
      EncoderState enc = run_encoder(s.enc_ids);
      DecoderResult dec = run_decoder(enc, s.dec_in);
      for (size_t t = 0; t < s.dec_target.size(); ++t)
        sum += token_nll(dec.logits, t, s.dec_target[t]);
    }
    return sum / static_cast<double>(total_tokens);
  }

  /// Same scalar as batch_loss, but fills every tensor's gradient field.
  double batch_loss_and_grad(const std::vector<PromptedInstance>& batch) {
    std::vector<Sample> samples;
    for (const auto& inst : batch) samples.push_back(make_sample(inst));
    std::vector<const Sample*> ptrs;
    for (const auto& s : samples) ptrs.push_back(&s);
    for (auto& t : tensors_) std::fill(t.g.v.begin(), t.g.v.end(), 0.0);
    return compute_batch_gradients(ptrs, /*train_all=*/true);
  }

  /// Row-stochastic attention matrices of the encoder self-attention on a
  /// given input (one per layer and head); used to check softmax
  /// normalization from the outside.
  std::vector<Act> encoder_attention_rows(const std::string& input_text) {
    EncoderState enc = run_encoder(encode_input(input_text));
    std::vector<Act> probs;
    for (const auto& call : enc.attn_calls)
      for (const auto& head : call.heads) probs.push_back(head.attn);
    return probs;
  }

  // --- checkpoint io ------------------------------------------------------

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("io-open", "cannot open " + path);
    io::write_bytes(out, "DEFTMODL", 8);
    io::write_u32(out, 1);  // version
    nlohmann::json meta = {
        {"num_layers", cfg_.num_layers},
        {"d_model", cfg_.d_model},
        {"heads", cfg_.heads},
        {"d_ff", cfg_.d_ff},
        {"vocab_size", cfg_.vocab_size},
        {"max_len", cfg_.max_len},
        {"activation", static_cast<int>(cfg_.activation)},
        {"ia3_per_head", cfg_.ia3_per_head},
        {"seed", cfg_.seed},
        {"vocab", vocab_.tokens()},
    };
    io::write_string(out, meta.dump());
    auto write_group = [&](bool adapters) {
      uint32_t count = 0;
      for (const auto& t : tensors_)
        if (t.adapter == adapters) ++count;
      io::write_u32(out, count);
      for (const auto& t : tensors_) {
        if (t.adapter != adapters) continue;
        io::write_string(out, t.name);
        io::write_u32(out, static_cast<uint32_t>(t.w.rows));
        io::write_u32(out, static_cast<uint32_t>(t.w.cols));
        for (double x : t.w.v) io::write_f64(out, x);
      }
    };
    write_group(false);  // main blocks
    write_group(true);   // adapters, separate section
    if (!out) fail("io-write", "failed writing " + path);
  }

  static Transformer load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("no-such-file", "cannot open checkpoint " + path);
    io::expect_magic(in, "DEFTMODL", path);
    uint32_t version = io::read_u32(in);
    if (version != 1)
      fail("bad-version", "unsupported checkpoint version " +
                              std::to_string(version));
    nlohmann::json meta = nlohmann::json::parse(io::read_string(in));
    ModelConfig cfg;
    cfg.num_layers = meta.at("num_layers").get<size_t>();
    cfg.d_model = meta.at("d_model").get<size_t>();
    cfg.heads = meta.at("heads").get<size_t>();
    cfg.d_ff = meta.at("d_ff").get<size_t>();
    cfg.max_len = meta.at("max_len").get<size_t>();
    cfg.activation = static_cast<Activation>(meta.at("activation").get<int>());
    cfg.ia3_per_head = meta.at("ia3_per_head").get<bool>();
    cfg.seed = meta.at("seed").get<uint64_t>();
    Vocab vocab =
        Vocab::from_tokens(meta.at("vocab").get<std::vector<std::string>>());
    Transformer model(cfg, std::move(vocab));
    auto read_group = [&](bool adapters) {
      uint32_t count = io::read_u32(in);
      for (uint32_t i = 0; i < count; ++i) {
        std::string name = io::read_string(in);
        uint32_t rows = io::read_u32(in);
        uint32_t cols = io::read_u32(in);
        Tensor& t = model.tensor(name);
        if (t.adapter != adapters || t.w.rows != rows || t.w.cols != cols)
          fail("bad-checkpoint", "tensor shape mismatch for " + name);
        for (double& x : t.w.v) x = io::read_f64(in);
      }
    };
    read_group(false);
    read_group(true);
    return model;
  }

 private:
  struct Sample {
    std::vector<int> enc_ids;
    std::vector<int> dec_in;
    std::vector<int> dec_target;
  };

  struct AttnBlock {
    size_t wq, wk, wv, wo, l_k, l_v, norm;  // tensor indices
  };
  struct FfnBlock {
    size_t w1, w2, l_ff, norm;
  };
  struct EncLayer {
    AttnBlock attn;
    FfnBlock ffn;
  };
  struct DecLayer {
    AttnBlock self_attn;
    AttnBlock cross_attn;
    FfnBlock ffn;
  };

  // ---- parameter construction ----

  size_t add_tensor(const std::string& name, size_t rows, size_t cols,
                    bool adapter = false) {
    Tensor t;
    t.name = name;
    t.w = Act(rows, cols);
    t.g = Act(rows, cols);
    t.adapter = adapter;
    tensors_.push_back(std::move(t));
    by_name_.emplace(name, tensors_.size() - 1);
    return tensors_.size() - 1;
  }

  AttnBlock add_attn_block(const std::string& prefix) {
    AttnBlock block;
    const size_t d = cfg_.d_model;
    block.norm = add_tensor(prefix + ".norm.g", 1, d);
    block.wq = add_tensor(prefix + ".wq", d, d);
    block.wk = add_tensor(prefix + ".wk", d, d);
    block.wv = add_tensor(prefix + ".wv", d, d);
    block.wo = add_tensor(prefix + ".wo", d, d);
    block.l_k = add_tensor(prefix + ".l_k", 1, cfg_.ia3_kv_len(), true);
    block.l_v = add_tensor(prefix + ".l_v", 1, cfg_.ia3_kv_len(), true);
    return block;
  }

  FfnBlock add_ffn_block(const std::string& prefix) {
    FfnBlock block;
    block.norm = add_tensor(prefix + ".norm.g", 1, cfg_.d_model);
    block.w1 = add_tensor(prefix + ".w1", cfg_.d_model, cfg_.d_ff);
    block.w2 = add_tensor(prefix + ".w2", cfg_.d_ff, cfg_.d_model);
    block.l_ff = add_tensor(prefix + ".l_ff", 1, cfg_.d_ff, true);
    return block;
  }

  void build_parameters() {
    embed_ = add_tensor("embed.tokens", cfg_.vocab_size, cfg_.d_model);
    for (size_t l = 0; l < cfg_.num_layers; ++l) {
      EncLayer layer;
      layer.attn = add_attn_block("enc" + std::to_string(l) + ".attn");
      layer.ffn = add_ffn_block("enc" + std::to_string(l) + ".ffn");
      enc_layers_.push_back(layer);
    }
    enc_final_norm_ = add_tensor("enc.final_norm.g", 1, cfg_.d_model);
    for (size_t l = 0; l < cfg_.num_layers; ++l) {
      DecLayer layer;
      layer.self_attn = add_attn_block("dec" + std::to_string(l) + ".self");
      layer.cross_attn = add_attn_block("dec" + std::to_string(l) + ".cross");
      layer.ffn = add_ffn_block("dec" + std::to_string(l) + ".ffn");
      dec_layers_.push_back(layer);
    }
    dec_final_norm_ = add_tensor("dec.final_norm.g", 1, cfg_.d_model);
    out_proj_ = add_tensor("out.proj", cfg_.d_model, cfg_.vocab_size);
  }

  void init_parameters() {
    Rng rng(derive_seed(cfg_.seed, "model.init"));
    for (auto& t : tensors_) {
      if (t.adapter || t.name.find(".norm.g") != std::string::npos ||
          t.name == "enc.final_norm.g" || t.name == "dec.final_norm.g") {
        std::fill(t.w.v.begin(), t.w.v.end(), 1.0);  // gains and adapters
        continue;
      }
      double std_dev;
      if (t.name == "embed.tokens") {
        std_dev = 1.0;
      } else {
        std_dev = std::sqrt(2.0 / static_cast<double>(t.w.rows + t.w.cols));
      }
      for (double& x : t.w.v) x = rng.normal() * std_dev;
    }
  }

  void build_positional() {
    pos_ = Act(cfg_.max_len, cfg_.d_model);
    for (size_t p = 0; p < cfg_.max_len; ++p)
      for (size_t i = 0; i < cfg_.d_model; i += 2) {
        double angle = static_cast<double>(p) /
                       std::pow(10000.0, static_cast<double>(i) /
                                             static_cast<double>(cfg_.d_model));
        pos_.at(p, i) = std::sin(angle);
        if (i + 1 < cfg_.d_model) pos_.at(p, i + 1) = std::cos(angle);
      }
  }

  // ---- sample construction ----

  std::vector<int> encode_input(const std::string& text) const {
    std::vector<int> ids = vocab_.encode(text);
    if (ids.size() > cfg_.max_len) ids.resize(cfg_.max_len);
    if (ids.empty()) ids.push_back(Vocab::kUnk);
    return ids;
  }

  void clip_target(std::vector<int>& target) const {
    if (target.size() > cfg_.max_len - 1) target.resize(cfg_.max_len - 1);
  }

  static std::vector<int> decoder_input(const std::vector<int>& target) {
    std::vector<int> in{Vocab::kBos};
    in.insert(in.end(), target.begin(), target.end());
    return in;
  }

  static std::vector<int> decoder_target(const std::vector<int>& target) {
    std::vector<int> out = target;
    out.push_back(Vocab::kEos);
    return out;
  }

  Sample make_sample(const PromptedInstance& inst) const {
    Sample s;
    s.enc_ids = encode_input(compose_text(inst, true));
    std::vector<int> target = vocab_.encode(inst.target_text);
    clip_target(target);
    s.dec_in = decoder_input(target);
    s.dec_target = decoder_target(target);
    return s;
  }

  // ---- forward caches ----

  struct NormCache {
    Act x;
    std::vector<double> inv;  // per row 1/rms
  };

  struct AttnCall {
    Act norm_out;
    NormCache norm;
    Act q, k, v;                        // full projections
    std::vector<AttnIa3Cache> heads;    // per head
    std::vector<Act> head_q, head_k, head_v;
    Act concat;
  };

  struct FfnCall {
    Act norm_out;
    NormCache norm;
    FfnIa3Cache ffn;
  };

  struct EncoderState {
    std::vector<int> ids;
    Act embedded;
    std::vector<AttnCall> attn_calls;
    std::vector<FfnCall> ffn_calls;
    NormCache final_norm;
    Act output;
  };

  struct DecoderResult {
    std::vector<int> ids;
    Act embedded;
    std::vector<AttnCall> self_calls, cross_calls;
    std::vector<FfnCall> ffn_calls;
    NormCache final_norm;
    Act hidden;
    Act logits;
  };

  // ---- forward primitives ----

  Act rmsnorm_forward(const Act& x, const Tensor& gain, NormCache& cache) const {
    const double eps = 1e-6;
    Act out(x.rows, x.cols);
    cache.x = x;
    cache.inv.resize(x.rows);
    for (size_t i = 0; i < x.rows; ++i) {
      double ms = 0.0;
      for (size_t j = 0; j < x.cols; ++j) ms += x.at(i, j) * x.at(i, j);
      ms /= static_cast<double>(x.cols);
      double inv = 1.0 / std::sqrt(ms + eps);
      cache.inv[i] = inv;
      for (size_t j = 0; j < x.cols; ++j)
        out.at(i, j) = x.at(i, j) * inv * gain.w.v[j];
    }
    return out;
  }

  void rmsnorm_backward(const Act& d_out, const NormCache& cache,
                        Tensor& gain, Act& d_x) const {
    const size_t cols = cache.x.cols;
    for (size_t i = 0; i < cache.x.rows; ++i) {
      double inv = cache.inv[i];
      double dot = 0.0;
      for (size_t j = 0; j < cols; ++j) {
        gain.g.v[j] += d_out.at(i, j) * cache.x.at(i, j) * inv;
        dot += d_out.at(i, j) * gain.w.v[j] * cache.x.at(i, j);
      }
      double corr = dot * inv * inv * inv / static_cast<double>(cols);
      for (size_t j = 0; j < cols; ++j)
        d_x.at(i, j) +=
            d_out.at(i, j) * gain.w.v[j] * inv - cache.x.at(i, j) * corr;
    }
  }

  const double* adapter_ptr(const Tensor& t, size_t head) const {
    if (!ia3_enabled_) return nullptr;
    return cfg_.ia3_per_head ? t.w.v.data() + head * cfg_.d_k()
                             : t.w.v.data();
  }

  /// Pre-norm multi-head attention block with residual: x + Attn(norm(x)).
  /// kv_src is the same tensor for self-attention or the encoder output for
  /// cross-attention.
  Act attn_block_forward(const Act& x, const Act& kv_src, bool self,
                         bool causal, const AttnBlock& block,
                         AttnCall& call) const {
    const Tensor& norm = tensors_[block.norm];
    call.norm_out = rmsnorm_forward(x, norm, call.norm);
    const Act& q_in = call.norm_out;
    const Act& kv_in = self ? call.norm_out : kv_src;

    nn::gemm_nn(q_in, tensors_[block.wq].w, call.q, false);
    nn::gemm_nn(kv_in, tensors_[block.wk].w, call.k, false);
    nn::gemm_nn(kv_in, tensors_[block.wv].w, call.v, false);

    const size_t h = cfg_.heads;
    const size_t dk = cfg_.d_k();
    call.heads.resize(h);
    call.head_q.resize(h);
    call.head_k.resize(h);
    call.head_v.resize(h);
    call.concat = Act(q_in.rows, cfg_.d_model);
    for (size_t head = 0; head < h; ++head) {
      Act& q = call.head_q[head];
      Act& k = call.head_k[head];
      Act& v = call.head_v[head];
      q = Act(call.q.rows, dk);
      k = Act(call.k.rows, dk);
      v = Act(call.v.rows, dk);
      for (size_t i = 0; i < q.rows; ++i)
        for (size_t f = 0; f < dk; ++f) q.at(i, f) = call.q.at(i, head * dk + f);
      for (size_t i = 0; i < k.rows; ++i)
        for (size_t f = 0; f < dk; ++f) {
          k.at(i, f) = call.k.at(i, head * dk + f);
          v.at(i, f) = call.v.at(i, head * dk + f);
        }
      Act out = attention_ia3(q, k, v, adapter_ptr(tensors_[block.l_k], head),
                              adapter_ptr(tensors_[block.l_v], head), causal,
                              &call.heads[head]);
      for (size_t i = 0; i < out.rows; ++i)
        for (size_t f = 0; f < dk; ++f)
          call.concat.at(i, head * dk + f) = out.at(i, f);
    }
    Act proj;
    nn::gemm_nn(call.concat, tensors_[block.wo].w, proj, false);
    Act result = x;
    for (size_t i = 0; i < result.v.size(); ++i) result.v[i] += proj.v[i];
    return result;
  }

  /// Backward through the attention block. d_x accumulates the gradient of
  /// the block input; for cross-attention kv_src is the encoder output and
  /// d_kv accumulates its gradient.
  void attn_block_backward(const Act& d_res, const AttnBlock& block,
                           AttnCall& call, bool self, const Act* kv_src,
                           Act& d_x, Act* d_kv, bool train_all) {
    // residual: d flows to x directly and through the attention.
    for (size_t i = 0; i < d_res.v.size(); ++i) d_x.v[i] += d_res.v[i];

    Act d_concat;
    nn::gemm_nt(d_res, tensors_[block.wo].w, d_concat, false);
    if (train_all) nn::gemm_tn(call.concat, d_res, tensors_[block.wo].g, true);

    const size_t h = cfg_.heads;
    const size_t dk = cfg_.d_k();
    Act d_q_full(call.q.rows, cfg_.d_model);
    Act d_k_full(call.k.rows, cfg_.d_model);
    Act d_v_full(call.v.rows, cfg_.d_model);
    for (size_t head = 0; head < h; ++head) {
      Act d_head(call.concat.rows, dk);
      for (size_t i = 0; i < d_head.rows; ++i)
        for (size_t f = 0; f < dk; ++f)
          d_head.at(i, f) = d_concat.at(i, head * dk + f);
      AttnIa3Grads g = attention_ia3_backward(
          call.head_q[head], call.head_k[head], call.head_v[head],
          adapter_ptr(tensors_[block.l_k], head),
          adapter_ptr(tensors_[block.l_v], head), call.heads[head], d_head);
      for (size_t i = 0; i < g.dq.rows; ++i)
        for (size_t f = 0; f < dk; ++f)
          d_q_full.at(i, head * dk + f) = g.dq.at(i, f);
      for (size_t i = 0; i < g.dk.rows; ++i)
        for (size_t f = 0; f < dk; ++f) {
          d_k_full.at(i, head * dk + f) = g.dk.at(i, f);
          d_v_full.at(i, head * dk + f) = g.dv.at(i, f);
        }
      if (!g.dl_k.empty()) {
        Tensor& lk = tensors_[block.l_k];
        Tensor& lv = tensors_[block.l_v];
        size_t base = cfg_.ia3_per_head ? head * dk : 0;
        for (size_t f = 0; f < dk; ++f) {
          lk.g.v[base + f] += g.dl_k[f];
          lv.g.v[base + f] += g.dl_v[f];
        }
      }
    }

    const Act& q_in = call.norm_out;

    Act d_norm_out(call.norm_out.rows, call.norm_out.cols);
    nn::gemm_nt(d_q_full, tensors_[block.wq].w, d_norm_out, true);
    if (train_all) nn::gemm_tn(q_in, d_q_full, tensors_[block.wq].g, true);

    if (self) {
      nn::gemm_nt(d_k_full, tensors_[block.wk].w, d_norm_out, true);
      nn::gemm_nt(d_v_full, tensors_[block.wv].w, d_norm_out, true);
      if (train_all) {
        nn::gemm_tn(call.norm_out, d_k_full, tensors_[block.wk].g, true);
        nn::gemm_tn(call.norm_out, d_v_full, tensors_[block.wv].g, true);
      }
    } else {
      Act d_src(d_kv->rows, d_kv->cols);
      nn::gemm_nt(d_k_full, tensors_[block.wk].w, d_src, true);
      nn::gemm_nt(d_v_full, tensors_[block.wv].w, d_src, true);
      for (size_t i = 0; i < d_src.v.size(); ++i) d_kv->v[i] += d_src.v[i];
      if (train_all) {
        nn::gemm_tn(*kv_src, d_k_full, tensors_[block.wk].g, true);
        nn::gemm_tn(*kv_src, d_v_full, tensors_[block.wv].g, true);
      }
    }
    rmsnorm_backward(d_norm_out, call.norm, tensors_[block.norm], d_x);
  }

  Act ffn_block_forward(const Act& x, const FfnBlock& block,
                        FfnCall& call) const {
    call.norm_out = rmsnorm_forward(x, tensors_[block.norm], call.norm);
    Act out = ffn_ia3(call.norm_out, tensors_[block.w1].w,
                      tensors_[block.w2].w,
                      ia3_enabled_ ? tensors_[block.l_ff].w.v.data() : nullptr,
                      cfg_.activation, &call.ffn);
    Act result = x;
    for (size_t i = 0; i < result.v.size(); ++i) result.v[i] += out.v[i];
    return result;
  }

  void ffn_block_backward(const Act& d_res, const FfnBlock& block,
                          FfnCall& call, Act& d_x, bool train_all) {
    for (size_t i = 0; i < d_res.v.size(); ++i) d_x.v[i] += d_res.v[i];
    FfnIa3Grads g = ffn_ia3_backward(
        call.norm_out, tensors_[block.w1].w, tensors_[block.w2].w,
        ia3_enabled_ ? tensors_[block.l_ff].w.v.data() : nullptr,
        cfg_.activation, call.ffn, d_res);
    if (train_all) {
      for (size_t i = 0; i < g.dw1.v.size(); ++i)
        tensors_[block.w1].g.v[i] += g.dw1.v[i];
      for (size_t i = 0; i < g.dw2.v.size(); ++i)
        tensors_[block.w2].g.v[i] += g.dw2.v[i];
    }
    if (!g.dl_ff.empty())
      for (size_t i = 0; i < g.dl_ff.size(); ++i)
        tensors_[block.l_ff].g.v[i] += g.dl_ff[i];
    Act d_norm_out = g.dx;
    rmsnorm_backward(d_norm_out, call.norm, tensors_[block.norm], d_x);
  }

  Act embed_ids(const std::vector<int>& ids) const {
    Act x(ids.size(), cfg_.d_model);
    const Tensor& emb = tensors_[embed_];
    for (size_t i = 0; i < ids.size(); ++i)
      for (size_t j = 0; j < cfg_.d_model; ++j)
        x.at(i, j) = emb.w.at(ids[i], j) + pos_.at(i, j);
    return x;
  }

  EncoderState run_encoder(const std::vector<int>& ids) const {
    EncoderState state;
    state.ids = ids;
    state.embedded = embed_ids(ids);
    Act x = state.embedded;
    state.attn_calls.resize(cfg_.num_layers);
    state.ffn_calls.resize(cfg_.num_layers);
    for (size_t l = 0; l < cfg_.num_layers; ++l) {
      x = attn_block_forward(x, x, /*self=*/true, /*causal=*/false,
                             enc_layers_[l].attn, state.attn_calls[l]);
      x = ffn_block_forward(x, enc_layers_[l].ffn, state.ffn_calls[l]);
    }
    state.output = rmsnorm_forward(x, tensors_[enc_final_norm_],
                                   state.final_norm);
    return state;
  }

  DecoderResult run_decoder(const EncoderState& enc,
                            const std::vector<int>& dec_in) const {
    DecoderResult dec;
    dec.ids = dec_in;
    dec.embedded = embed_ids(dec_in);
    Act y = dec.embedded;
    dec.self_calls.resize(cfg_.num_layers);
    dec.cross_calls.resize(cfg_.num_layers);
    dec.ffn_calls.resize(cfg_.num_layers);
    for (size_t l = 0; l < cfg_.num_layers; ++l) {
      y = attn_block_forward(y, y, /*self=*/true, /*causal=*/true,
                             dec_layers_[l].self_attn, dec.self_calls[l]);
      y = attn_block_forward(y, enc.output, /*self=*/false, /*causal=*/false,
                             dec_layers_[l].cross_attn, dec.cross_calls[l]);
      y = ffn_block_forward(y, dec_layers_[l].ffn, dec.ffn_calls[l]);
    }
    dec.hidden = rmsnorm_forward(y, tensors_[dec_final_norm_], dec.final_norm);
    nn::gemm_nn(dec.hidden, tensors_[out_proj_].w, dec.logits, false);
    return dec;
  }

  double token_nll(const Act& logits, size_t row, int target) const {
    const double* l = logits.row(row);
    double max_v = l[0];
    for (size_t c = 1; c < cfg_.vocab_size; ++c) max_v = std::max(max_v, l[c]);
    double sum = 0.0;
    for (size_t c = 0; c < cfg_.vocab_size; ++c) sum += std::exp(l[c] - max_v);
    return -(l[target] - max_v - std::log(sum));
  }

  // ---- training step ----

  double train_step(const std::vector<const Sample*>& batch,
                    const TrainConfig& tc, double lr, size_t step) {
    for (auto& t : tensors_) std::fill(t.g.v.begin(), t.g.v.end(), 0.0);
    double loss =
        compute_batch_gradients(batch, tc.mode == TrainMode::kFull);
    apply_updates(tc, lr, step);
    return loss;
  }

  /// Teacher-forced cross entropy over the batch, mean per target token;
  /// gradients accumulate into the tensors (callers zero them first).
  double compute_batch_gradients(const std::vector<const Sample*>& batch,
                                 bool train_all) {
    size_t total_tokens = 0;
    for (const Sample* s : batch) total_tokens += s->dec_target.size();
    const double inv_tokens = 1.0 / static_cast<double>(total_tokens);

    double loss_sum = 0.0;
    for (const Sample* s : batch) {
      EncoderState enc = run_encoder(s->enc_ids);
      DecoderResult dec = run_decoder(enc, s->dec_in);

      Act d_logits(dec.logits.rows, dec.logits.cols);
      for (size_t t = 0; t < s->dec_target.size(); ++t) {
        const double* l = dec.logits.row(t);
        double max_v = l[0];
        for (size_t c = 1; c < cfg_.vocab_size; ++c)
          max_v = std::max(max_v, l[c]);
        double sum = 0.0;
        for (size_t c = 0; c < cfg_.vocab_size; ++c)
          sum += std::exp(l[c] - max_v);
        double log_z = max_v + std::log(sum);
        loss_sum += (log_z - l[s->dec_target[t]]) * inv_tokens;
        for (size_t c = 0; c < cfg_.vocab_size; ++c) {
          double p = std::exp(l[c] - log_z);
          d_logits.at(t, c) =
              (p - (static_cast<int>(c) == s->dec_target[t] ? 1.0 : 0.0)) *
              inv_tokens;
        }
      }
      backward_sample(enc, dec, d_logits, train_all);
    }
    return loss_sum;
  }

  void backward_sample(EncoderState& enc, DecoderResult& dec,
                       const Act& d_logits, bool train_all) {
    // output projection
    Act d_hidden;
    nn::gemm_nt(d_logits, tensors_[out_proj_].w, d_hidden, false);
    if (train_all) nn::gemm_tn(dec.hidden, d_logits, tensors_[out_proj_].g, true);

    Act d_y(dec.embedded.rows, cfg_.d_model);
    rmsnorm_backward(d_hidden, dec.final_norm, tensors_[dec_final_norm_], d_y);

    Act d_enc_out(enc.output.rows, cfg_.d_model);
    for (size_t l = cfg_.num_layers; l-- > 0;) {
      Act d_prev(d_y.rows, d_y.cols);
      ffn_block_backward(d_y, dec_layers_[l].ffn, dec.ffn_calls[l], d_prev,
                         train_all);
      d_y = std::move(d_prev);

      d_prev = Act(d_y.rows, d_y.cols);
      attn_block_backward(d_y, dec_layers_[l].cross_attn, dec.cross_calls[l],
                          /*self=*/false, &enc.output, d_prev, &d_enc_out,
                          train_all);
      d_y = std::move(d_prev);

      d_prev = Act(d_y.rows, d_y.cols);
      attn_block_backward(d_y, dec_layers_[l].self_attn, dec.self_calls[l],
                          /*self=*/true, nullptr, d_prev, nullptr, train_all);
      d_y = std::move(d_prev);
    }
    if (train_all) accumulate_embedding(dec.ids, d_y);

    // encoder stack
    Act d_x(enc.embedded.rows, cfg_.d_model);
    rmsnorm_backward(d_enc_out, enc.final_norm, tensors_[enc_final_norm_],
                     d_x);
    for (size_t l = cfg_.num_layers; l-- > 0;) {
      Act d_prev(d_x.rows, d_x.cols);
      ffn_block_backward(d_x, enc_layers_[l].ffn, enc.ffn_calls[l], d_prev,
                         train_all);
      d_x = std::move(d_prev);

      d_prev = Act(d_x.rows, d_x.cols);
      attn_block_backward(d_x, enc_layers_[l].attn, enc.attn_calls[l],
                          /*self=*/true, nullptr, d_prev, nullptr, train_all);
      d_x = std::move(d_prev);
    }
    if (train_all) accumulate_embedding(enc.ids, d_x);
  }

  void accumulate_embedding(const std::vector<int>& ids, const Act& d_x) {
    Tensor& emb = tensors_[embed_];
    for (size_t i = 0; i < ids.size(); ++i)
      for (size_t j = 0; j < cfg_.d_model; ++j)
        emb.g.at(ids[i], j) += d_x.at(i, j);
  }

  // ---- optimizers ----

  void apply_updates(const TrainConfig& tc, double lr, size_t step) {
    for (auto& t : tensors_) {
      if (tc.mode == TrainMode::kIa3Only && !t.adapter) continue;
      if (tc.optimizer == OptimizerKind::kAdam)
        adam_update(t, lr, step);
      else
        adafactor_update(t, lr, step);
    }
  }

  void adam_update(Tensor& t, double lr, size_t step) {
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    if (t.m.v.empty()) {
      t.m = Act(t.w.rows, t.w.cols);
      t.v = Act(t.w.rows, t.w.cols);
    }
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (size_t i = 0; i < t.w.v.size(); ++i) {
      double g = t.g.v[i];
      t.m.v[i] = beta1 * t.m.v[i] + (1.0 - beta1) * g;
      t.v.v[i] = beta2 * t.v.v[i] + (1.0 - beta2) * g * g;
      double mhat = t.m.v[i] / bc1;
      double vhat = t.v.v[i] / bc2;
      t.w.v[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }

  /// Simplified Adafactor: factored second moments for matrices, plain for
  /// vectors; no momentum; update RMS clipped to 1.
  void adafactor_update(Tensor& t, double lr, size_t step) {
    const double eps1 = 1e-30;
    const double decay =
        1.0 - std::pow(static_cast<double>(step), -0.8);
    const size_t rows = t.w.rows, cols = t.w.cols;
    std::vector<double> update(t.w.v.size());
    if (rows > 1 && cols > 1) {
      if (t.fr.empty()) {
        t.fr.assign(rows, 0.0);
        t.fc.assign(cols, 0.0);
      }
      std::vector<double> row_mean(rows, 0.0), col_mean(cols, 0.0);
      for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < cols; ++j) {
          double g2 = t.g.at(i, j) * t.g.at(i, j) + eps1;
          row_mean[i] += g2;
          col_mean[j] += g2;
        }
      for (auto& x : row_mean) x /= static_cast<double>(cols);
      for (auto& x : col_mean) x /= static_cast<double>(rows);
      double fr_sum = 0.0;
      for (size_t i = 0; i < rows; ++i) {
        t.fr[i] = decay * t.fr[i] + (1.0 - decay) * row_mean[i];
        fr_sum += t.fr[i];
      }
      for (size_t j = 0; j < cols; ++j)
        t.fc[j] = decay * t.fc[j] + (1.0 - decay) * col_mean[j];
      double fr_mean = fr_sum / static_cast<double>(rows);
      for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < cols; ++j) {
          double vhat = t.fr[i] * t.fc[j] / fr_mean;
          update[i * cols + j] = t.g.at(i, j) / std::sqrt(vhat);
        }
    } else {
      if (t.fr.empty()) t.fr.assign(t.w.v.size(), 0.0);
      for (size_t i = 0; i < t.w.v.size(); ++i) {
        double g2 = t.g.v[i] * t.g.v[i] + eps1;
        t.fr[i] = decay * t.fr[i] + (1.0 - decay) * g2;
        update[i] = t.g.v[i] / std::sqrt(t.fr[i]);
      }
    }
    double rms = 0.0;
    for (double u : update) rms += u * u;
    rms = std::sqrt(rms / static_cast<double>(update.size()));
    double clip = rms > 1.0 ? 1.0 / rms : 1.0;
    for (size_t i = 0; i < t.w.v.size(); ++i)
      t.w.v[i] -= lr * clip * update[i];
  }

  ModelConfig cfg_;
  Vocab vocab_;
  bool ia3_enabled_ = true;

  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, size_t> by_name_;
  size_t embed_ = 0, out_proj_ = 0, enc_final_norm_ = 0, dec_final_norm_ = 0;
  std::vector<EncLayer> enc_layers_;
  std::vector<DecLayer> dec_layers_;
  Act pos_;
};

}  // namespace deft
