#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "dream/entropy.hpp"
#include "dream/errors.hpp"
#include "dream/flops.hpp"
#include "dream/rng.hpp"
#include "dream/vtc.hpp"

using namespace dream;

namespace {

// Random row-stochastic causal layer [heads x n x n].
std::vector<double> random_causal(int heads, int n, SplitMix64& rng) {
  std::vector<double> a(static_cast<std::size_t>(heads * n * n), 0.0);
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = 0; j <= i; ++j) {
        // sprinkle exact zeros to exercise 0 log 0
        const double w = rng.uniform() < 0.2 ? 0.0 : rng.uniform();
        a[static_cast<std::size_t>((h * n + i) * n + j)] = w;
        s += w;
      }
      if (s == 0.0) {
        a[static_cast<std::size_t>((h * n + i) * n)] = 1.0;
        s = 1.0;
      }
      for (int j = 0; j <= i; ++j) a[static_cast<std::size_t>((h * n + i) * n + j)] /= s;
    }
  return a;
}

double direct_entropy(const std::vector<double>& a, int heads, int n) {
  double total = 0.0;
  for (int h = 0; h < heads; ++h) {
    double sum = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const double x = a[static_cast<std::size_t>((h * n + i) * n + j)];
        if (x > 0) sum -= x * std::log(x);
      }
    total += sum / n;
  }
  return total / heads;
}

LayerTrace make_trace(const std::vector<std::vector<double>>& layers, int heads, int n) {
  LayerTrace t;
  t.rows = n;
  t.keys = n;
  t.heads = heads;
  t.attn = layers;
  return t;
}

}  // namespace

TEST(Entropy, OneHotIsZero) {
  const int n = 5;
  std::vector<double> a(n * n, 0.0);
  for (int i = 0; i < n; ++i) a[static_cast<std::size_t>(i * n + (i % 2 ? 0 : i))] = 1.0;
  EXPECT_EQ(entropy::attention_entropy(a, 1, n, n), 0.0);
}

TEST(Entropy, UniformFourIsLnFour) {
  Tensor a({1, 4, 4}, 0.25);
  EXPECT_NEAR(entropy::attention_entropy(a), std::log(4.0), 1e-9);
}

TEST(Entropy, CausalUniformThree) {
  const std::vector<double> a{1, 0, 0, 0.5, 0.5, 0, 1.0 / 3, 1.0 / 3, 1.0 / 3};
  const double want = (0.0 + std::log(2.0) + std::log(3.0)) / 3.0;
  EXPECT_NEAR(entropy::attention_entropy(a, 1, 3, 3), want, 1e-12);
  EXPECT_NEAR(want, 0.5973, 1e-4);
}

TEST(Entropy, NonStochasticRowsRejected) {
  const std::vector<double> a{0.5, 0.4, 0.5, 0.5};
  EXPECT_THROW(entropy::attention_entropy(a, 1, 2, 2), ValidationError);
}

TEST(Entropy, BoundedAndMatchesDirectSum) {
  SplitMix64 rng(4);
  for (int t = 0; t < 100; ++t) {
    const int n = 1 + static_cast<int>(rng.below(12)), heads = 1 + static_cast<int>(rng.below(4));
    const auto a = random_causal(heads, n, rng);
    const double ae = entropy::attention_entropy(a, heads, n, n);
    EXPECT_GE(ae, 0.0);
    EXPECT_LE(ae, std::log(static_cast<double>(n)) + 1e-9);
    EXPECT_NEAR(ae, direct_entropy(a, heads, n), 1e-12);
  }
}

TEST(Entropy, HeadPermutationInvariant) {
  SplitMix64 rng(8);
  const int n = 6, heads = 3;
  const auto a = random_causal(heads, n, rng);
  std::vector<double> b;
  for (int h : {2, 0, 1}) b.insert(b.end(), a.begin() + h * n * n, a.begin() + (h + 1) * n * n);
  EXPECT_NEAR(entropy::attention_entropy(a, heads, n, n), entropy::attention_entropy(b, heads, n, n), 1e-12);
}

TEST(SelectLayer, Examples) {
  const int n = 4;
  std::vector<double> onehot(n * n, 0.0), uniform(n * n, 0.25);
  for (int i = 0; i < n; ++i) onehot[static_cast<std::size_t>(i * n)] = 1.0;
  auto p = entropy::select_layer(make_trace({onehot, uniform}, 1, n));
  EXPECT_EQ(p.layer, 0);
  EXPECT_EQ(entropy::select_layer(make_trace({uniform, uniform, uniform}, 1, n)).layer, 0);
  EXPECT_EQ(entropy::select_layer(make_trace({uniform, onehot}, 1, n)).layer, 1);
  EXPECT_THROW(entropy::select_layer(LayerTrace{}), ValidationError);
}

TEST(SelectLayer, MatchesRecomputeAndArgmin) {
  SplitMix64 rng(12);
  for (int t = 0; t < 50; ++t) {
    const int n = 2 + static_cast<int>(rng.below(8)), heads = 2, layers = 1 + static_cast<int>(rng.below(6));
    std::vector<std::vector<double>> ls;
    for (int l = 0; l < layers; ++l) ls.push_back(random_causal(heads, n, rng));
    const auto p = entropy::select_layer(make_trace(ls, heads, n));
    int best = 0;
    double best_v = direct_entropy(ls[0], heads, n);
    for (int l = 1; l < layers; ++l) {
      const double v = direct_entropy(ls[static_cast<std::size_t>(l)], heads, n);
      if (v < best_v) {
        best_v = v;
        best = l;
      }
    }
    EXPECT_EQ(p.layer, best);
  }
}

TEST(SelectLayer, PerStepLastRowEqualsWholeSequence) {
  SplitMix64 rng(13);
  const int n = 7, heads = 2;
  std::vector<std::vector<double>> ls;
  for (int l = 0; l < 5; ++l) ls.push_back(random_causal(heads, n, rng));
  const auto trace = make_trace(ls, heads, n);
  const auto steps = entropy::select_layer_per_step(trace);
  ASSERT_EQ(steps.size(), static_cast<std::size_t>(n));
  EXPECT_EQ(steps.back(), entropy::select_layer(trace).layer);
  for (int r = 0; r < n; ++r) EXPECT_EQ(steps[static_cast<std::size_t>(r)], entropy::select_layer(trace, r + 1).layer);
}

TEST(Calibrate, RangeDeterminismAndCache) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.target_layers = 4;
  auto models = init_models(c);
  const auto data = task::make_dataset(6, 1, c);
  const auto a = entropy::calibrate(data, models.target);
  const auto b = entropy::calibrate(data, models.target);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), 6u);
  for (const auto& [id, layer] : a) {
    EXPECT_GE(layer, 0);
    EXPECT_LE(layer, c.target_layers - 1);
  }
  const std::string path = ::testing::TempDir() + "calib.tsv";
  std::remove(path.c_str());
  const auto first = entropy::calibrate(data, models.target, path);
  flops::Scope scope;
  const auto second = entropy::calibrate(data, models.target, path);
  EXPECT_EQ(scope.elapsed(), 0u);
  EXPECT_EQ(first, second);
  EXPECT_EQ(first, a);
  std::remove(path.c_str());
}

TEST(VTC, ScoresUniformAndOneHot) {
  const int n = 5;
  LayerTrace t = make_trace({std::vector<double>(n * n, 1.0 / n)}, 1, n);
  for (double s : vtc::visual_importance_scores(t, 1, 3)) EXPECT_NEAR(s, 1.0, 1e-12);
  std::vector<double> col(n * n, 0.0);
  for (int i = 0; i < n; ++i) col[static_cast<std::size_t>(i * n + 1 + 2)] = 1.0;
  const auto s = vtc::visual_importance_scores(make_trace({col}, 1, n), 1, 3);
  EXPECT_EQ(s, (std::vector<double>{0.0, 0.0, 5.0}));
  EXPECT_THROW(vtc::visual_importance_scores(t, 3, 3), DimensionError);
}

TEST(VTC, ScoresMatchDoubleLoop) {
  SplitMix64 rng(21);
  const int n = 9, heads = 3;
  std::vector<std::vector<double>> ls{random_causal(heads, n, rng), random_causal(heads, n, rng)};
  const auto t = make_trace(ls, heads, n);
  const auto got = vtc::visual_importance_scores(t, 2, 5);
  for (int j = 0; j < 5; ++j) {
    double want = 0.0;
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < n; ++i) want += ls[1][static_cast<std::size_t>((h * n + i) * n + 2 + j)];
    EXPECT_DOUBLE_EQ(got[static_cast<std::size_t>(j)], want / heads);
  }
}

TEST(VTC, SelectExamples) {
  const auto sel = vtc::select_tokens({0.1, 0.4, 0.2, 0.3}, 0.5);
  EXPECT_EQ(sel.indices, (std::vector<int>{1, 3}));
  EXPECT_EQ(vtc::select_tokens({3, 1, 2}, 1.0).indices, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(vtc::select_tokens(std::vector<double>(36, 1.0), 0.75).kept(), 27);
  EXPECT_EQ(vtc::select_tokens({1, 1, 1, 1}, 0.5).indices, (std::vector<int>{0, 1}));
  EXPECT_THROW(vtc::select_tokens({}, 0.5), ValidationError);
  EXPECT_THROW(vtc::select_tokens({1.0}, 0.0), ParameterError);
  EXPECT_EQ(vtc::kept_count(36, 0.25), 9);
  EXPECT_EQ(vtc::kept_count(5, 0.5), 3);  // 2.5 rounds away from zero
}

TEST(VTC, SelectMatchesSortThenTakeAndIsMonotone) {
  SplitMix64 rng(31);
  for (int t = 0; t < 200; ++t) {
    const int v = 1 + static_cast<int>(rng.below(40));
    std::vector<double> s(static_cast<std::size_t>(v));
    for (double& x : s) x = static_cast<double>(rng.below(6));  // many ties
    const double kf = 0.05 + 0.95 * rng.uniform();
    const auto sel = vtc::select_tokens(s, kf);
    // oracle: sort (score desc, index asc) pairs
    std::vector<std::pair<double, int>> pairs;
    for (int i = 0; i < v; ++i) pairs.emplace_back(-s[static_cast<std::size_t>(i)], i);
    std::sort(pairs.begin(), pairs.end());
    std::vector<int> want;
    for (int i = 0; i < vtc::kept_count(v, kf); ++i) want.push_back(pairs[static_cast<std::size_t>(i)].second);
    std::sort(want.begin(), want.end());
    EXPECT_EQ(sel.indices, want);
  }
  int prev = 0;
  for (int i = 1; i <= 100; ++i) {
    const int k = vtc::kept_count(36, i / 100.0);
    EXPECT_GE(k, prev);
    prev = k;
  }
}

TEST(VTC, ApplySelection) {
  TokenSequence seq;
  seq.push(0, Modality::kText);
  for (int i = 0; i < 4; ++i) seq.push(10 + i, Modality::kVisual);
  seq.push(5, Modality::kText);
  const auto all = vtc::select_tokens({1, 2, 3, 4}, 1.0);
  EXPECT_EQ(vtc::apply_selection(seq, all), seq);
  const auto half = vtc::select_tokens({0.1, 0.4, 0.2, 0.3}, 0.5);
  const auto out = vtc::apply_selection(seq, half);
  EXPECT_EQ(out.ids, (std::vector<int>{0, 11, 13, 5}));
  EXPECT_EQ(out.count(Modality::kVisual), static_cast<std::size_t>(half.kept()));
  const auto pos = vtc::retained_positions(seq, half);
  for (std::size_t i = 0; i < pos.size(); ++i) {
    EXPECT_EQ(out.ids[i], seq.ids[static_cast<std::size_t>(pos[i])]);
    EXPECT_EQ(out.tags[i], seq.tags[static_cast<std::size_t>(pos[i])]);
  }
  auto bad = half;
  bad.original_v = 5;
  EXPECT_THROW(vtc::apply_selection(seq, bad), ValidationError);
  EXPECT_EQ(vtc::selection_line(7, half), "7\t1,3");
}
