#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dream/checkpoint.hpp"
#include "dream/kernels.hpp"
#include "dream/optim.hpp"
#include "dream/tensor.hpp"

namespace dream {

struct ModelConfig {
  int vocab_size = 32;
  int d_model = 32;
  int n_heads = 4;
  int target_layers = 8;
  int max_seq_len = 160;
  int grid_h = 6;
  int grid_w = 6;
  std::uint64_t seed = 42;
  double init_std = 0.02;

  int visual_tokens() const { return grid_h * grid_w; }
  int head_dim() const { return d_model / n_heads; }
  // prompt_tokens: number of non-visual prompt tokens q.
  void validate(int prompt_tokens) const;
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
  bool operator==(const ModelConfig&) const = default;
};

// Which blocks the draft carries; the defaults are the full architecture.
struct DraftArch {
  bool initial_block = true;
  int cross_blocks = 1;
  bool final_block = true;

  std::string to_text() const;
  static DraftArch from_text(const std::string& text);
  bool operator==(const DraftArch&) const = default;
};

// Per-layer keys and values of the committed prefix.
class KVCache {
 public:
  KVCache() = default;
  KVCache(int layers, int width, int capacity);

  int layers() const { return static_cast<int>(k_.size()); }
  int width() const { return width_; }
  int capacity() const { return capacity_; }
  int length() const;

  std::span<const double> keys(int layer) const { return k_[static_cast<std::size_t>(layer)]; }
  std::span<const double> values(int layer) const { return v_[static_cast<std::size_t>(layer)]; }
  void append(int layer, std::span<const double> k, std::span<const double> v);

  void truncate(int n);
  // Keeps only the listed rows (ascending), in order.
  void compact(std::span<const int> keep);
  bool operator==(const KVCache&) const = default;

 private:
  int width_ = 0;
  int capacity_ = 0;
  std::vector<std::vector<double>> k_, v_;
};

struct Block {
  Tensor ln1_g, ln1_b, wq, wk, wv, wo;
  Tensor ln2_g, ln2_b, w1, b1, w2, b2;

  void register_params(ParamStore& ps, const std::string& prefix) const;
};

struct CrossBlock {
  Tensor ln_g, ln_b, wq, wk, wv, wo;

  void register_params(ParamStore& ps, const std::string& prefix) const;
};

struct LayerTrace {
  int rows = 0;
  int keys = 0;
  int heads = 0;
  // hidden[0] is the embedding; hidden[i + 1] the output of block i.
  std::vector<Tensor> hidden;
  // Final-norm output (the LM head input).
  Tensor final;
  // attn[i]: [heads x rows x keys] weights of block i.
  std::vector<std::vector<double>> attn;

  int layers() const { return static_cast<int>(attn.size()); }
  double weight(int layer, int head, int row, int key) const {
    return attn[static_cast<std::size_t>(layer)]
               [(static_cast<std::size_t>(head) * rows + row) * keys + key];
  }
};

class TargetModel {
 public:
  ModelConfig config;
  Tensor tok_emb, pos_emb, lnf_g, lnf_b, lm_head;
  std::vector<Block> blocks;

  ParamStore params() const;
  KVCache make_cache() const;
  std::size_t parameter_count() const { return params().element_count(); }

  Checkpoint to_checkpoint() const;
  static TargetModel from_checkpoint(const Checkpoint& ckpt);
};

class DraftModel {
 public:
  ModelConfig config;
  DraftArch arch;
  // Shared with the target and frozen.
  Tensor tok_emb, pos_emb, lm_head;
  std::optional<Block> initial;
  std::vector<CrossBlock> cross;
  std::optional<Block> final;
  Tensor lnf_g, lnf_b;

  // Trainable parameters only.
  ParamStore params() const;
  KVCache make_cache() const;
  std::size_t trainable_count() const { return params().element_count(); }

  Checkpoint to_checkpoint() const;
  static DraftModel from_checkpoint(const Checkpoint& ckpt, const TargetModel& target);
};

struct TargetOutput {
  Tensor logits;  // [n x V]
  Tensor final;   // [n x d], final-norm features S^L of the new rows
  std::optional<LayerTrace> trace;
};

// Runs the target over new tokens at the given positions. Keys are the
// cached rows followed by the new rows; mask (optional) addresses that key
// list, defaulting to causal. The cache is extended with the new rows.
TargetOutput target_forward(const TargetModel& model, std::span<const int> tokens,
                            std::span<const int> positions, KVCache* cache,
                            const kernels::AttentionMask* mask, bool trace);
// Sequential convenience: positions continue after the cache.
TargetOutput target_forward(const TargetModel& model, std::span<const int> tokens, KVCache* cache,
                            bool trace = false);

// Greedy (argmax, lowest id on ties) continuation by the target with a KV
// cache. Stops after emitting stop_token (included) or max_new tokens.
std::vector<int> greedy_continuation(const TargetModel& model, std::span<const int> prompt, int max_new,
                                     int stop_token);

int argmax_row(std::span<const double> row);

// Bank rows projected to keys and values, one pair per cross-attention block.
struct BankKV {
  std::vector<Tensor> k, v;
  int rows() const { return k.empty() ? 0 : static_cast<int>(k[0].rows()); }
};

BankKV project_bank(const DraftModel& model, const Tensor& bank_rows);
// Row concatenation of two projections (verified + speculative).
BankKV concat_bank(const BankKV& a, const BankKV& b);

// The fusion term of one cross-attention block: per-head
// softmax(Q K^T / sqrt(z)) V with Q from the normed queries, heads
// concatenated and output-projected. Returned without the residual.
Tensor cross_attention_fuse(const CrossBlock& blk, const Tensor& e1, const Tensor& bank_k,
                            const Tensor& bank_v, int heads, const kernels::AttentionMask& bank_mask,
                            std::vector<double>* probs = nullptr);

struct DraftOutput {
  Tensor logits;  // [n x V]
  Tensor e1;      // post-initial-block features
  Tensor em;      // post-final-norm features
};

// self_mask addresses (cached rows + new rows); bank_mask addresses bank
// rows. Both default to the teacher-forced layout when null: causal self
// attention, and row i seeing bank rows [0, offset + i).
DraftOutput draft_forward(const DraftModel& model, std::span<const int> tokens,
                          std::span<const int> positions, KVCache* cache, const BankKV& bank,
                          const kernels::AttentionMask* self_mask,
                          const kernels::AttentionMask* bank_mask);

struct ModelPair {
  TargetModel target;
  DraftModel draft;
};

ModelPair init_models(const ModelConfig& config, const DraftArch& arch = {});
DraftModel init_draft(const TargetModel& target, const DraftArch& arch, std::uint64_t seed);

}  // namespace dream
