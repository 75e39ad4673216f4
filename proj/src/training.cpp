#include "dream/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "dream/checkpoint.hpp"
#include "dream/errors.hpp"
#include "dream/optim.hpp"
#include "dream/rng.hpp"
#include "dream/vtc.hpp"

namespace dream::train {

namespace {

// Epoch-wise shuffled index stream.
class BatchStream {
 public:
  BatchStream(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    std::iota(order_.begin(), order_.end(), 0);
    reshuffle();
  }
  std::size_t next() {
    if (pos_ == order_.size()) reshuffle();
    return order_[pos_++];
  }

 private:
  void reshuffle() {
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
    pos_ = 0;
  }
  std::vector<std::size_t> order_;
  SplitMix64 rng_;
  std::size_t pos_ = 0;
};

void require_finite(double v, const std::string& what, int step) {
  if (!std::isfinite(v)) {
    throw NumericError(what + " became non-finite at step " + std::to_string(step) +
                       "; lower the learning rate or check the input data");
  }
}

}  // namespace

void LossWeights::validate() const {
  if (!(feat >= 0.0) || !(intermed >= 0.0) || !(kl >= 0.0)) throw ParameterError("loss weights must be >= 0");
}

std::string strategy_name(LayerStrategy s) {
  switch (s) {
    case LayerStrategy::kDynamic: return "dynamic";
    case LayerStrategy::kPerStep: return "per_step";
    case LayerStrategy::kStatic: return "static";
  }
  return "?";
}

LayerStrategy parse_strategy(const std::string& s) {
  if (s == "dynamic") return LayerStrategy::kDynamic;
  if (s == "per_step") return LayerStrategy::kPerStep;
  if (s == "static") return LayerStrategy::kStatic;
  throw ValidationError("unknown layer strategy '" + s + "' (dynamic, per_step, static)");
}

int static_layer_for(int layers, double fraction) {
  const int one_based = static_cast<int>(std::round(layers * fraction));
  return std::clamp(one_based - 1, 0, layers - 1);
}

std::vector<int> TrainingSample::supervised_rows() const {
  std::vector<int> r;
  for (int i = first_supervised; i + 1 < rows(); ++i) r.push_back(i);
  return r;
}

Tensor weighted_total(const Tensor& feat, const Tensor& intermed, const Tensor& kl, const LossWeights& w) {
  w.validate();
  return add(add(scale(feat, w.feat), scale(intermed, w.intermed)), scale(kl, w.kl));
}

LossParts compute_losses(const Tensor& em, const Tensor& e1, const Tensor& draft_logits,
                         const TrainingSample& sample, const LossWeights& w) {
  w.validate();
  const auto n = static_cast<std::size_t>(sample.rows());
  if (em.rows() != n || e1.rows() != n || draft_logits.rows() != n || sample.s_final.rows() != n ||
      sample.s_mid.rows() != n || sample.target_logits.rows() != n) {
    throw DimensionError("compute_losses: draft outputs and cached target rows are misaligned");
  }
  const auto rows = sample.supervised_rows();
  if (rows.empty()) throw ValidationError("compute_losses: sample has no supervised rows");
  LossParts p;
  p.feat = smooth_l1(gather_rows(em, rows), gather_rows(sample.s_final, rows));
  p.intermed = smooth_l1(gather_rows(e1, rows), gather_rows(sample.s_mid, rows));
  p.kl = kl_divergence(gather_rows(draft_logits, rows), gather_rows(sample.target_logits, rows));
  p.total = weighted_total(p.feat, p.intermed, p.kl, w);
  return p;
}

TrainingSample build_training_sample(const task::TaskSample& raw, const TargetModel& target,
                                     const entropy::CalibrationMap& calib, const SampleOptions& opt) {
  NoGradGuard ng;
  const TokenSequence seq = task::teacher_sequence(target, raw);
  const auto out = target_forward(target, seq.ids, nullptr, true);
  const LayerTrace& trace = *out.trace;
  const int n = static_cast<int>(seq.size());
  const int prompt_len = n - static_cast<int>(seq.count(Modality::kGenerated));
  const int v = static_cast<int>(seq.count(Modality::kVisual));

  std::vector<int> retained;
  if (opt.vtc && v > 0) {
    const auto scores =
        vtc::visual_importance_scores(trace, static_cast<int>(seq.first(Modality::kVisual)), v, prompt_len);
    retained = vtc::retained_positions(seq, vtc::select_tokens(scores, opt.keep_fraction));
  } else {
    retained.resize(static_cast<std::size_t>(n));
    std::iota(retained.begin(), retained.end(), 0);
  }

  std::vector<int> row_layer(static_cast<std::size_t>(n));
  switch (opt.strategy) {
    case LayerStrategy::kDynamic: {
      const auto it = calib.find(raw.seed);
      if (it == calib.end()) {
        throw ValidationError("no calibration entry for sample " + std::to_string(raw.seed) + "; run calibrate first");
      }
      std::fill(row_layer.begin(), row_layer.end(), it->second);
      break;
    }
    case LayerStrategy::kPerStep: row_layer = entropy::select_layer_per_step(trace); break;
    case LayerStrategy::kStatic:
      if (opt.static_layer < 0 || opt.static_layer >= trace.layers()) throw ParameterError("static layer out of range");
      std::fill(row_layer.begin(), row_layer.end(), opt.static_layer);
      break;
  }

  TrainingSample s;
  s.sample_id = raw.seed;
  s.positions = retained;
  const std::size_t d = static_cast<std::size_t>(target.config.d_model);
  std::vector<double> mid;
  mid.reserve(retained.size() * d);
  for (int r : retained) {
    s.tokens.push_back(seq.ids[static_cast<std::size_t>(r)]);
    const int layer = row_layer[static_cast<std::size_t>(r)];
    s.layers.push_back(layer);
    const auto row = trace.hidden[static_cast<std::size_t>(layer) + 1].row(static_cast<std::size_t>(r));
    mid.insert(mid.end(), row.begin(), row.end());
  }
  s.s_final = gather_rows(out.final, retained).detach();
  s.s_mid = Tensor(Shape{retained.size(), d}, std::move(mid));
  s.target_logits = gather_rows(out.logits, retained).detach();
  // First row whose next token is generated: the last prompt row.
  const auto first_gen = std::find(retained.begin(), retained.end(), prompt_len);
  s.first_supervised = static_cast<int>(first_gen - retained.begin()) - 1;
  if (s.first_supervised < 0) throw ValidationError("build_training_sample: empty prompt");
  return s;
}

std::string StepLog::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["loss_total"] = loss_total;
  j["loss_feat"] = loss_feat;
  j["loss_intermed"] = loss_intermed;
  j["loss_kl"] = loss_kl;
  j["grad_norm"] = grad_norm;
  return j.dump();
}

std::string TargetLog::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["loss"] = loss;
  j["grad_norm"] = grad_norm;
  if (accuracy >= 0) j["accuracy"] = accuracy;
  return j.dump();
}

LossParts draft_sample_loss(const DraftModel& draft, const TrainingSample& sample, const LossWeights& w) {
  const BankKV bank = project_bank(draft, sample.s_final);
  const auto out = draft_forward(draft, sample.tokens, sample.positions, nullptr, bank, nullptr, nullptr);
  return compute_losses(out.em, out.e1, out.logits, sample, w);
}

std::vector<StepLog> train_draft(DraftModel& draft, const std::vector<TrainingSample>& data, const DraftHyper& hp,
                                 const DraftCallback& on_step) {
  if (data.empty()) throw ValidationError("train_draft: no training samples");
  if (hp.steps < 0 || hp.batch_size < 1) throw ParameterError("train_draft: steps >= 0 and batch_size >= 1");
  hp.weights.validate();
  ParamStore ps = draft.params();
  ps.set_requires_grad(true);
  AdamState state;
  const AdamHyper adam{hp.lr, 0.9, 0.95, 1e-8, 0.0};
  BatchStream batches(data.size(), hp.seed);
  std::vector<StepLog> log;
  for (int step = 1; step <= hp.steps; ++step) {
    ps.zero_grad();
    StepLog rec;
    rec.step = step;
    for (int b = 0; b < hp.batch_size; ++b) {
      const auto& s = data[batches.next()];
      const LossParts parts = draft_sample_loss(draft, s, hp.weights);
      const double total = parts.total.item();
      require_finite(total, "draft loss", step);
      rec.loss_total += total / hp.batch_size;
      rec.loss_feat += parts.feat.item() / hp.batch_size;
      rec.loss_intermed += parts.intermed.item() / hp.batch_size;
      rec.loss_kl += parts.kl.item() / hp.batch_size;
      backward(scale(parts.total, 1.0 / hp.batch_size));
    }
    rec.grad_norm = clip_global_norm(ps, hp.clip);
    require_finite(rec.grad_norm, "draft gradient norm", step);
    adamw_step(ps, state, adam);
    log.push_back(rec);
    if (on_step) on_step(rec);
    if (hp.checkpoint_every > 0 && !hp.checkpoint_path.empty() && step % hp.checkpoint_every == 0) {
      save_checkpoint(hp.checkpoint_path, draft.to_checkpoint());
    }
  }
  ps.set_requires_grad(false);
  return log;
}

Tensor target_sample_loss(const TargetModel& target, const task::TaskSample& sample) {
  const TokenSequence prompt = task::prompt_sequence(sample);
  const auto response = task::gold_response(sample);
  std::vector<int> seq = prompt.ids;
  seq.insert(seq.end(), response.begin(), response.end());
  const int n = static_cast<int>(seq.size()) - 1;
  const int p = static_cast<int>(prompt.size());
  std::vector<int> targets(static_cast<std::size_t>(n), -1);
  for (int r = p - 1; r < n; ++r) targets[static_cast<std::size_t>(r)] = seq[static_cast<std::size_t>(r) + 1];
  const auto out = target_forward(target, std::span<const int>(seq.data(), static_cast<std::size_t>(n)), nullptr, false);
  return cross_entropy(out.logits, targets);
}

double greedy_accuracy(const TargetModel& target, const std::vector<task::TaskSample>& samples) {
  if (samples.empty()) return 0.0;
  NoGradGuard ng;
  int ok = 0;
  for (const auto& s : samples) {
    const auto gold = task::gold_response(s);
    const auto got = greedy_continuation(target, task::prompt_sequence(s).ids, static_cast<int>(gold.size()), task::kEos);
    ok += got == gold;
  }
  return static_cast<double>(ok) / static_cast<double>(samples.size());
}

std::vector<TargetLog> train_target(TargetModel& target, const std::vector<task::TaskSample>& train_set,
                                    const std::vector<task::TaskSample>& heldout, const TargetHyper& hp,
                                    const TargetCallback& on_step) {
  if (train_set.empty()) throw ValidationError("train_target: empty dataset");
  if (hp.steps < 0 || hp.batch_size < 1) throw ParameterError("train_target: steps >= 0 and batch_size >= 1");
  ParamStore ps = target.params();
  ps.set_requires_grad(true);
  AdamState state;
  const AdamHyper adam{hp.lr, 0.9, 0.95, 1e-8, 0.0};
  BatchStream batches(train_set.size(), hp.seed);
  std::vector<TargetLog> log;
  for (int step = 1; step <= hp.steps; ++step) {
    ps.zero_grad();
    TargetLog rec;
    rec.step = step;
    for (int b = 0; b < hp.batch_size; ++b) {
      const Tensor loss = target_sample_loss(target, train_set[batches.next()]);
      rec.loss += loss.item() / hp.batch_size;
      require_finite(rec.loss, "target loss", step);
      backward(scale(loss, 1.0 / hp.batch_size));
    }
    rec.grad_norm = clip_global_norm(ps, hp.clip);
    require_finite(rec.grad_norm, "target gradient norm", step);
    adamw_step(ps, state, adam);
    const bool eval = !heldout.empty() && hp.eval_every > 0 && (step % hp.eval_every == 0 || step == hp.steps);
    if (eval) {
      ps.set_requires_grad(false);
      rec.accuracy = greedy_accuracy(target, heldout);
      ps.set_requires_grad(true);
    }
    log.push_back(rec);
    if (on_step) on_step(rec);
    if (eval && rec.accuracy >= hp.stop_accuracy) break;
  }
  ps.set_requires_grad(false);
  return log;
}

}  // namespace dream::train
