#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "dream/entropy.hpp"
#include "dream/errors.hpp"
#include "dream/training.hpp"
#include "dream/vtc.hpp"

using namespace dream;
using namespace dream::train;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.target_layers = 4;
  c.init_std = 0.3;
  c.seed = 5;
  return c;
}

struct Fixture {
  ModelConfig config = small_config();
  ModelPair models = init_models(config);
  std::vector<task::TaskSample> raw = task::make_dataset(8, 3, config);
  entropy::CalibrationMap calib = entropy::calibrate(raw, models.target);

  std::vector<TrainingSample> samples(const SampleOptions& opt = {}) const {
    std::vector<TrainingSample> out;
    for (const auto& r : raw) out.push_back(build_training_sample(r, models.target, calib, opt));
    return out;
  }
};

std::vector<double> flat_grads(const ParamStore& ps) {
  std::vector<double> g;
  for (const auto& [name, t] : ps) {
    if (t.has_grad()) {
      g.insert(g.end(), t.grad().begin(), t.grad().end());
    } else {
      g.insert(g.end(), t.numel(), 0.0);
    }
  }
  return g;
}

std::vector<double> loss_grads(const DraftModel& draft, const TrainingSample& s, const LossWeights& w) {
  ParamStore ps = draft.params();
  ps.set_requires_grad(true);
  ps.zero_grad();
  backward(draft_sample_loss(draft, s, w).total);
  auto g = flat_grads(ps);
  ps.set_requires_grad(false);
  return g;
}

}  // namespace

TEST(Losses, WeightedTotalExample) {
  const auto t = weighted_total(Tensor::scalar(1.0), Tensor::scalar(2.0), Tensor::scalar(3.0), LossWeights{});
  EXPECT_NEAR(t.item(), 3.6, 1e-12);
  EXPECT_THROW(weighted_total(Tensor::scalar(1.0), Tensor::scalar(1.0), Tensor::scalar(1.0), LossWeights{-1, 0, 0}),
               ParameterError);
}

TEST(Losses, TotalIsWeightedSumOfParts) {
  Fixture f;
  const auto s = f.samples();
  for (const LossWeights w : {LossWeights{}, LossWeights{0.5, 0.0, 2.0}, LossWeights{0.0, 1.0, 0.0}}) {
    const auto p = draft_sample_loss(f.models.draft, s[0], w);
    EXPECT_NEAR(p.total.item(), w.feat * p.feat.item() + w.intermed * p.intermed.item() + w.kl * p.kl.item(), 1e-12);
    EXPECT_GE(p.feat.item(), 0.0);
    EXPECT_GE(p.intermed.item(), 0.0);
    EXPECT_GE(p.kl.item(), -1e-12);
  }
}

TEST(Losses, GradientsAreLinearInWeights) {
  Fixture f;
  const auto s = f.samples()[1];
  const auto& d = f.models.draft;
  const auto gf = loss_grads(d, s, {1, 0, 0});
  const auto gi = loss_grads(d, s, {0, 1, 0});
  const auto gk = loss_grads(d, s, {0, 0, 1});
  const LossWeights w{0.3, 0.7, 1.9};
  const auto g = loss_grads(d, s, w);
  ASSERT_EQ(g.size(), gf.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    EXPECT_NEAR(g[i], w.feat * gf[i] + w.intermed * gi[i] + w.kl * gk[i], 1e-10);
  }
  for (double v : loss_grads(d, s, {0, 0, 0})) EXPECT_EQ(v, 0.0);
}

TEST(Losses, ZeroWhenDraftMatchesTarget) {
  Fixture f;
  auto s = f.samples()[0];
  NoGradGuard ng;
  const BankKV bank = project_bank(f.models.draft, s.s_final);
  const auto out = draft_forward(f.models.draft, s.tokens, s.positions, nullptr, bank, nullptr, nullptr);
  s.s_final = out.em.detach();
  s.s_mid = out.e1.detach();
  s.target_logits = out.logits.detach();
  const auto p = compute_losses(out.em, out.e1, out.logits, s, {});
  EXPECT_NEAR(p.total.item(), 0.0, 1e-12);
}

TEST(Losses, FiniteDifferenceGradient) {
  Fixture f;
  const auto s = f.samples()[2];
  DraftModel& d = f.models.draft;
  ParamStore ps = d.params();
  ps.set_requires_grad(true);
  ps.zero_grad();
  backward(draft_sample_loss(d, s, {}).total);
  ps.set_requires_grad(false);
  int checked = 0;
  for (auto& [name, t] : ps) {
    const std::vector<double> g(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.numel(); i += std::max<std::size_t>(1, t.numel() / 3)) {
      NoGradGuard ng;
      const double h = 1e-5;
      const double orig = t.values()[i];
      t.mutable_values()[i] = orig + h;
      const double up = draft_sample_loss(d, s, {}).total.item();
      t.mutable_values()[i] = orig - h;
      const double down = draft_sample_loss(d, s, {}).total.item();
      t.mutable_values()[i] = orig;
      const double fd = (up - down) / (2 * h);
      EXPECT_NEAR(g[i], fd, 1e-6 + 1e-4 * std::abs(fd)) << name << "[" << i << "]";
      ++checked;
    }
  }
  EXPECT_GT(checked, 10);
}

TEST(Losses, MisalignedRowsRejected) {
  Fixture f;
  auto s = f.samples()[0];
  s.s_mid = Tensor(Shape{1, static_cast<std::size_t>(f.config.d_model)});
  EXPECT_THROW(draft_sample_loss(f.models.draft, s, {}), DimensionError);
}

TEST(TrainingSample, FullKeepIsIdentity) {
  Fixture f;
  for (const auto& r : f.raw) {
    const auto seq = task::teacher_sequence(f.models.target, r);
    const auto a = build_training_sample(r, f.models.target, f.calib, {1.0, true});
    const auto b = build_training_sample(r, f.models.target, f.calib, {0.75, false});
    std::vector<int> all(seq.size());
    std::iota(all.begin(), all.end(), 0);
    EXPECT_EQ(a.tokens, seq.ids);
    EXPECT_EQ(a.positions, all);
    EXPECT_EQ(b.positions, all);
    EXPECT_EQ(std::vector<double>(a.s_final.values().begin(), a.s_final.values().end()),
              std::vector<double>(b.s_final.values().begin(), b.s_final.values().end()));
    const int prompt = static_cast<int>(task::prompt_sequence(r).size());
    EXPECT_EQ(a.first_supervised, prompt - 1);
  }
}

TEST(TrainingSample, GatheredRowsMatchFullForward) {
  Fixture f;
  const SampleOptions opt{0.5, true};
  for (const auto& r : f.raw) {
    const auto s = build_training_sample(r, f.models.target, f.calib, opt);
    const auto seq = task::teacher_sequence(f.models.target, r);
    NoGradGuard ng;
    const auto full = target_forward(f.models.target, seq.ids, nullptr, true);
    const int layer = f.calib.at(r.seed);
    const auto v = static_cast<int>(seq.count(Modality::kVisual));
    EXPECT_EQ(s.rows(), static_cast<int>(seq.size()) - v + vtc::kept_count(v, 0.5));
    for (int i = 0; i < s.rows(); ++i) {
      const auto pos = static_cast<std::size_t>(s.positions[static_cast<std::size_t>(i)]);
      const auto ui = static_cast<std::size_t>(i);
      EXPECT_EQ(s.tokens[ui], seq.ids[pos]);
      for (std::size_t c = 0; c < s.s_final.cols(); ++c) {
        EXPECT_EQ(s.s_final.at(ui, c), full.final.at(pos, c));
        EXPECT_EQ(s.s_mid.at(ui, c), full.trace->hidden[static_cast<std::size_t>(layer) + 1].at(pos, c));
      }
      for (std::size_t c = 0; c < s.target_logits.cols(); ++c) {
        EXPECT_EQ(s.target_logits.at(ui, c), full.logits.at(pos, c));
      }
    }
    for (std::size_t i = 1; i < s.positions.size(); ++i) EXPECT_LT(s.positions[i - 1], s.positions[i]);
    // Supervised rows predict exactly the generated tokens.
    const auto rows = s.supervised_rows();
    ASSERT_FALSE(rows.empty());
    EXPECT_EQ(static_cast<std::size_t>(s.rows() - rows.front()), seq.count(Modality::kGenerated) + 1);
  }
}

TEST(TrainingSample, LayerStrategies) {
  Fixture f;
  const auto& r = f.raw[0];
  EXPECT_THROW(build_training_sample(r, f.models.target, {}, {}), ValidationError);
  const auto st = build_training_sample(r, f.models.target, {}, {0.75, true, LayerStrategy::kStatic, 2});
  for (int l : st.layers) EXPECT_EQ(l, 2);
  EXPECT_THROW(build_training_sample(r, f.models.target, {}, {0.75, true, LayerStrategy::kStatic, 4}),
               ParameterError);
  const auto ps = build_training_sample(r, f.models.target, {}, {1.0, true, LayerStrategy::kPerStep, 0});
  const auto seq = task::teacher_sequence(f.models.target, r);
  NoGradGuard ng;
  const auto full = target_forward(f.models.target, seq.ids, nullptr, true);
  EXPECT_EQ(ps.layers, entropy::select_layer_per_step(*full.trace));
  EXPECT_EQ(parse_strategy(strategy_name(LayerStrategy::kPerStep)), LayerStrategy::kPerStep);
  EXPECT_THROW(parse_strategy("middle"), ValidationError);
}

TEST(TrainingSample, StaticLayerMapping) {
  EXPECT_EQ(static_layer_for(8, 0.25), 1);
  EXPECT_EQ(static_layer_for(8, 0.5), 3);
  EXPECT_EQ(static_layer_for(8, 0.75), 5);
  EXPECT_EQ(static_layer_for(8, 1.0), 7);
  EXPECT_EQ(static_layer_for(4, 0.0), 0);
}

TEST(TrainDraft, TargetStaysFrozenAndRunIsDeterministic) {
  Fixture f;
  const auto data = f.samples();
  const auto before = f.models.target.to_checkpoint();
  DraftHyper hp;
  hp.steps = 5;
  hp.batch_size = 2;
  hp.seed = 9;
  DraftModel d1 = init_draft(f.models.target, {}, 11);
  DraftModel d2 = init_draft(f.models.target, {}, 11);
  const auto l1 = train_draft(d1, data, hp);
  const auto l2 = train_draft(d2, data, hp);
  ASSERT_EQ(l1.size(), 5u);
  for (std::size_t i = 0; i < l1.size(); ++i) {
    EXPECT_EQ(l1[i].loss_total, l2[i].loss_total);
    EXPECT_EQ(l1[i].grad_norm, l2[i].grad_norm);
  }
  const auto after = f.models.target.to_checkpoint();
  for (const auto& [name, t] : f.models.target.params()) EXPECT_FALSE(t.requires_grad()) << name;
  ASSERT_EQ(before.size(), after.size());
  for (const auto& [name, e] : before) EXPECT_EQ(e.data, after.at(name).data) << name;
  EXPECT_NE(l1.front().to_json().find("\"loss_kl\""), std::string::npos);
}

TEST(TrainDraft, OverfitsSmallSet) {
  Fixture f;
  const auto data = f.samples();
  DraftHyper hp;
  hp.steps = 300;
  hp.batch_size = 4;
  hp.lr = 3e-3;
  hp.seed = 1;
  DraftModel d = init_draft(f.models.target, {}, 2);
  double initial = 0.0;
  for (const auto& s : data) initial += draft_sample_loss(d, s, hp.weights).total.item();
  train_draft(d, data, hp);
  double final_loss = 0.0;
  for (const auto& s : data) final_loss += draft_sample_loss(d, s, hp.weights).total.item();
  EXPECT_LT(final_loss, 0.1 * initial) << initial << " -> " << final_loss;
}

TEST(TrainDraft, NonFiniteLossRaises) {
  Fixture f;
  auto data = f.samples();
  data[0].s_final.mutable_values()[0] = std::nan("");
  DraftHyper hp;
  hp.steps = 3;
  hp.batch_size = 8;
  EXPECT_THROW(train_draft(f.models.draft, data, hp), NumericError);
}

TEST(TrainTarget, LossDecreasesAndAccuracyInRange) {
  ModelConfig c = small_config();
  c.init_std = 0.02;
  auto models = init_models(c);
  const auto data = task::make_dataset(16, 4, c);
  const std::vector<task::TaskSample> held(data.begin(), data.begin() + 4);
  TargetHyper hp;
  hp.steps = 60;
  hp.eval_every = 30;
  const auto log = train_target(models.target, data, held, hp);
  ASSERT_EQ(log.size(), 60u);
  EXPECT_LT(log.back().loss, log.front().loss);
  EXPECT_GE(log[29].accuracy, 0.0);
  EXPECT_LE(log[29].accuracy, 1.0);
  EXPECT_EQ(log[0].accuracy, -1.0);
  const double acc = greedy_accuracy(models.target, held);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
  EXPECT_EQ(log[0].to_json().find("accuracy"), std::string::npos);
}
