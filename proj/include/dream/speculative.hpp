#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dream/model.hpp"
#include "dream/sampling.hpp"
#include "dream/sequence.hpp"
#include "dream/vtc.hpp"

namespace dream::spec {

enum class Mode { kChain, kTree };

std::string mode_name(Mode m);
Mode parse_mode(const std::string& s);

struct DecodeConfig {
  Mode mode = Mode::kTree;
  int gamma = 6;  // chain draft length
  int k = 4;      // tree width
  int depth = 6;
  int max_draft_tokens = 32;
  double temperature = 0.0;
  double keep_fraction = 0.75;
  bool vtc = true;  // false skips scoring and selection altogether
  int max_new_tokens = 64;
  bool stop_at_eos = true;
  std::uint64_t seed = 0;

  void validate() const;
};

// Target features S^L for verified positions, plus speculative draft rows
// e^M appended during a round. Rows are indexed by draft-side position.
class FeatureBank {
 public:
  FeatureBank() = default;
  explicit FeatureBank(const DraftModel* model);

  int watermark() const { return verified_rows_; }
  int rows() const { return verified_rows_ + speculative_rows_; }

  void append_verified(const Tensor& rows);
  void push_speculative(const Tensor& rows);
  void rollback();

  // Projected keys/values of every row, verified first.
  BankKV view() const;
  const std::vector<double>& verified() const { return verified_data_; }

 private:
  const DraftModel* model_ = nullptr;
  std::vector<double> verified_data_;
  int verified_rows_ = 0;
  int speculative_rows_ = 0;
  BankKV verified_kv_, speculative_kv_;
};

// Proposes tokens for one session. Rows are the draft-side positions of
// committed tokens; speculative nodes of the current round sit above them.
class Drafter {
 public:
  virtual ~Drafter() = default;
  // Prompt tokens as seen by the draft, with their target features.
  virtual void prefill(const std::vector<int>& tokens, const std::vector<int>& positions,
                       const Tensor& features) = 0;
  // Feeds committed tokens the draft has not seen; returns the logits row
  // predicting the next token.
  virtual std::vector<double> catch_up(const std::vector<int>& tokens, const std::vector<int>& positions) = 0;
  // Adds round nodes. parents[i] is -1 for a child of the last committed
  // token, else the index of an earlier node of this round. Returns one
  // logits row per node.
  virtual std::vector<std::vector<double>> extend(const std::vector<int>& tokens,
                                                  const std::vector<int>& positions,
                                                  const std::vector<int>& parents) = 0;
  // Drops the round's nodes; features are target rows for the last
  // committed token and the accepted nodes.
  virtual void end_round(const Tensor& features) = 0;
  virtual int cache_length() const = 0;
};

class DreamDrafter final : public Drafter {
 public:
  explicit DreamDrafter(const DraftModel& model);
  void prefill(const std::vector<int>& tokens, const std::vector<int>& positions, const Tensor& features) override;
  std::vector<double> catch_up(const std::vector<int>& tokens, const std::vector<int>& positions) override;
  std::vector<std::vector<double>> extend(const std::vector<int>& tokens, const std::vector<int>& positions,
                                          const std::vector<int>& parents) override;
  void end_round(const Tensor& features) override;
  int cache_length() const override { return cache_.length(); }

  const KVCache& cache() const { return cache_; }
  const FeatureBank& bank() const { return bank_; }

 private:
  const DraftModel& model_;
  KVCache cache_;
  FeatureBank bank_;
  int committed_ = 0;
  std::vector<std::vector<int>> ancestors_;  // per round node, ascending
};

// Uses the target itself as the drafter.
class SelfDrafter final : public Drafter {
 public:
  explicit SelfDrafter(const TargetModel& model) : model_(model), cache_(model.make_cache()) {}
  void prefill(const std::vector<int>& tokens, const std::vector<int>& positions, const Tensor& features) override;
  std::vector<double> catch_up(const std::vector<int>& tokens, const std::vector<int>& positions) override;
  std::vector<std::vector<double>> extend(const std::vector<int>& tokens, const std::vector<int>& positions,
                                          const std::vector<int>& parents) override;
  void end_round(const Tensor& features) override;
  int cache_length() const override { return cache_.length(); }

 private:
  const TargetModel& model_;
  KVCache cache_;
  int committed_ = 0;
  std::vector<std::vector<int>> ancestors_;
};

struct TreeNode {
  int token = 0;
  int parent = -1;  // -1: child of the last committed token
  int depth = 1;
  double prob = 0.0;  // draft probability of the token at its parent
  double logp = 0.0;  // cumulative draft log-probability along the path
};

struct DraftTree {
  std::vector<TreeNode> nodes;  // parents before children
  // Renormalized draft distribution over the kept children: entry 0 for
  // the root, entry 1 + j for node j. Empty when there are no children.
  std::vector<Dist> child_dist;

  int size() const { return static_cast<int>(nodes.size()); }
  std::vector<int> children(int parent) const;
  // Ancestors of node j (excluding j), root side first.
  std::vector<int> ancestors(int j) const;
};

// mask[i][j] = 1 iff node j is node i or one of its ancestors. Throws
// ValidationError on a cycle, a dangling parent, or a child listed before
// its parent.
std::vector<std::vector<std::uint8_t>> build_tree_mask(const DraftTree& tree);

// Key mask for verifying [last committed token, tree nodes...] on top of
// `prefix` cached rows.
kernels::AttentionMask tree_attention_mask(const DraftTree& tree, int prefix);

struct RoundRecord {
  int round = 0;
  int drafted = 0;
  int accepted = 0;
  std::vector<int> committed;
  int rejection_index = -1;  // first rejected depth (0-based), -1 if none
  Mode mode = Mode::kChain;

  std::string to_json() const;
};

struct DecodeMetrics {
  std::vector<int> commits;    // tokens committed per round
  std::vector<int> histogram;  // histogram[a]: rounds that accepted a drafts
  int generated = 0;
  double wall_seconds = 0.0;
  std::uint64_t target_flops = 0;
  std::uint64_t draft_flops = 0;

  double tau() const;
  double seconds_per_token() const;
};

class Session {
 public:
  Session(const TargetModel& target, std::unique_ptr<Drafter> drafter, DecodeConfig config, Sampler& sampler);

  // Target pass over the full prompt, visual selection, draft prefill and
  // the first committed token.
  void prefill(const TokenSequence& prompt);
  RoundRecord chain_round();
  RoundRecord tree_round();
  RoundRecord round() { return config_.mode == Mode::kChain ? chain_round() : tree_round(); }
  // Rounds until EOS or the token budget; times the loop.
  void run();

  // Drafts a tree from the given logits row of the last committed token.
  DraftTree build_tree(const std::vector<double>& root_logits, int budget, int depth);

  bool done() const { return done_; }
  const std::vector<int>& generated() const { return generated_; }
  const DecodeMetrics& metrics() const { return metrics_; }
  const std::vector<RoundRecord>& transcript() const { return transcript_; }
  const vtc::Selection& selection() const { return selection_; }
  const std::vector<int>& draft_prompt() const { return draft_tokens_; }
  const KVCache& target_cache() const { return target_cache_; }
  const DecodeConfig& config() const { return config_; }
  const Drafter& drafter() const { return *drafter_; }
  std::string transcript_jsonl() const;

 private:
  int sample_from_logits(const std::vector<double>& logits);
  int remaining() const;
  void commit(RoundRecord& rec, const std::vector<int>& tokens);

  const TargetModel& target_;
  std::unique_ptr<Drafter> drafter_;
  DecodeConfig config_;
  Sampler& sampler_;

  KVCache target_cache_;
  vtc::Selection selection_;
  std::vector<int> draft_tokens_;  // draft-side prompt
  std::vector<int> generated_;
  std::vector<int> pending_;  // committed tokens the drafter has not seen
  int next_position_ = 0;     // target position of the next committed token
  bool done_ = false;
  DecodeMetrics metrics_;
  std::vector<RoundRecord> transcript_;
};

struct DecodeResult {
  std::vector<int> tokens;
  DecodeMetrics metrics;
  std::vector<RoundRecord> transcript;
  vtc::Selection selection;
};

// Builds a session with a DreamDrafter (or the target itself when draft is
// null), prefills, and runs to completion.
DecodeResult decode(const TargetModel& target, const DraftModel* draft, const TokenSequence& prompt,
                    const DecodeConfig& config, Sampler& sampler);
DecodeResult decode(const TargetModel& target, const DraftModel* draft, const TokenSequence& prompt,
                    const DecodeConfig& config);

struct BaselineResult {
  std::vector<int> tokens;
  double wall_seconds = 0.0;
  std::uint64_t flops = 0;
  std::vector<std::uint64_t> step_flops;  // per generated token after prefill

  double seconds_per_token() const;
};

// Plain target decoding with a KV cache, same sampling rules and stopping
// criteria as decode().
BaselineResult ar_baseline(const TargetModel& target, const TokenSequence& prompt, const DecodeConfig& config,
                           Sampler& sampler);
BaselineResult ar_baseline(const TargetModel& target, const TokenSequence& prompt, const DecodeConfig& config);

}  // namespace dream::spec
