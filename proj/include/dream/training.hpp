#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dream/entropy.hpp"
#include "dream/model.hpp"
#include "dream/task.hpp"
#include "dream/tensor.hpp"

namespace dream::train {

struct LossWeights {
  double feat = 0.2;
  double intermed = 0.2;
  double kl = 1.0;

  void validate() const;
};

// Where the intermediate supervision comes from.
enum class LayerStrategy {
  kDynamic,  // calibrated per sample
  kPerStep,  // per row, lowest prefix entropy
  kStatic,   // one fixed block for every sample
};

std::string strategy_name(LayerStrategy s);
LayerStrategy parse_strategy(const std::string& s);

struct SampleOptions {
  double keep_fraction = 0.75;
  bool vtc = true;
  LayerStrategy strategy = LayerStrategy::kDynamic;
  int static_layer = 0;  // 0-based block index for kStatic
};

// Block index for a static fraction of depth: round(L * fraction) counted
// from 1, returned 0-based and clamped to [0, L-1].
int static_layer_for(int layers, double fraction);

// One teacher-forced draft example. Every tensor row is aligned with a
// draft-side token.
struct TrainingSample {
  std::uint64_t sample_id = 0;
  std::vector<int> tokens;
  std::vector<int> positions;  // original positions in the full sequence
  Tensor s_final;              // target S^L
  Tensor s_mid;                // target S^{l*}
  Tensor target_logits;
  std::vector<int> layers;  // l* per row, 0-based block index
  int first_supervised = 0;

  int rows() const { return static_cast<int>(tokens.size()); }
  // Rows that predict a generated token.
  std::vector<int> supervised_rows() const;
};

struct LossParts {
  Tensor total, feat, intermed, kl;
};

// w.feat * feat + w.intermed * intermed + w.kl * kl.
Tensor weighted_total(const Tensor& feat, const Tensor& intermed, const Tensor& kl, const LossWeights& w);

LossParts compute_losses(const Tensor& em, const Tensor& e1, const Tensor& draft_logits,
                         const TrainingSample& sample, const LossWeights& w);

// One traced target pass over the teacher sequence, visual selection from
// the prompt rows, and gathers at the surviving positions.
TrainingSample build_training_sample(const task::TaskSample& raw, const TargetModel& target,
                                     const entropy::CalibrationMap& calib, const SampleOptions& opt);

struct DraftHyper {
  int steps = 4000;
  int batch_size = 4;
  double lr = 1e-3;
  double clip = 0.5;
  std::uint64_t seed = 0;
  LossWeights weights;
  int checkpoint_every = 0;
  std::string checkpoint_path;
};

struct StepLog {
  int step = 0;
  double loss_total = 0, loss_feat = 0, loss_intermed = 0, loss_kl = 0, grad_norm = 0;
  std::string to_json() const;
};

using DraftCallback = std::function<void(const StepLog&)>;

// Trains the draft against cached target features; the target is not
// touched. Throws NumericError on a non-finite loss.
std::vector<StepLog> train_draft(DraftModel& draft, const std::vector<TrainingSample>& data, const DraftHyper& hp,
                                 const DraftCallback& on_step = {});

// Loss of one sample through the current draft (with autodiff when grad
// mode is on).
LossParts draft_sample_loss(const DraftModel& draft, const TrainingSample& sample, const LossWeights& w);

struct TargetHyper {
  int steps = 6000;
  int batch_size = 4;
  double lr = 3e-3;
  double clip = 1.0;
  std::uint64_t seed = 0;
  int eval_every = 250;
  double stop_accuracy = 0.99;
};

struct TargetLog {
  int step = 0;
  double loss = 0;
  double grad_norm = 0;
  double accuracy = -1;  // held-out greedy accuracy, -1 when not evaluated
  std::string to_json() const;
};

using TargetCallback = std::function<void(const TargetLog&)>;

// Next-token cross entropy on the response positions of prompt + gold
// response. Stops after hp.steps or once held-out greedy accuracy reaches
// hp.stop_accuracy.
std::vector<TargetLog> train_target(TargetModel& target, const std::vector<task::TaskSample>& train_set,
                                    const std::vector<task::TaskSample>& heldout, const TargetHyper& hp,
                                    const TargetCallback& on_step = {});

Tensor target_sample_loss(const TargetModel& target, const task::TaskSample& sample);

// Fraction of samples whose greedy response equals the gold response.
double greedy_accuracy(const TargetModel& target, const std::vector<task::TaskSample>& samples);

}  // namespace dream::train
