#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>

#include "dream/checkpoint.hpp"
#include "dream/errors.hpp"
#include "dream/model.hpp"
#include "dream/rng.hpp"

using namespace dream;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 12;
  c.d_model = 16;
  c.n_heads = 2;
  c.target_layers = 4;
  c.max_seq_len = 40;
  c.grid_h = 2;
  c.grid_w = 2;
  c.seed = 9;
  c.init_std = 0.3;
  return c;
}

std::vector<int> random_tokens(int n, int vocab, std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<int> t(static_cast<std::size_t>(n));
  for (int& x : t) x = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
  return t;
}

std::vector<int> iota(int from, int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), from);
  return v;
}

Tensor random_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<double> v(n * d);
  for (double& x : v) x = rng.gaussian();
  return Tensor({n, d}, std::move(v));
}

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate(5));
  c.n_heads = 5;
  EXPECT_THROW(c.validate(5), ValidationError);
  c = ModelConfig{};
  c.target_layers = 3;
  EXPECT_THROW(c.validate(5), ValidationError);
  c = ModelConfig{};
  c.max_seq_len = 100;
  EXPECT_THROW(c.validate(5), ValidationError);
}

TEST(ModelConfig, TextRoundTrip) {
  ModelConfig c = small_config();
  c.init_std = 0.1 / 3.0;
  EXPECT_EQ(ModelConfig::from_text(c.to_text()), c);
  DraftArch a{false, 2, true};
  EXPECT_EQ(DraftArch::from_text(a.to_text()), a);
}

TEST(Init, SameSeedBitIdenticalAndFinite) {
  auto a = init_models(small_config());
  auto b = init_models(small_config());
  auto pa = a.target.params(), pb = b.target.params();
  for (auto& [name, t] : pa) {
    const auto& u = pb.at(name);
    ASSERT_TRUE(std::equal(t.values().begin(), t.values().end(), u.values().begin())) << name;
    for (double x : t.values()) EXPECT_TRUE(std::isfinite(x));
  }
  auto da = a.draft.params(), db = b.draft.params();
  for (auto& [name, t] : da) {
    ASSERT_TRUE(std::equal(t.values().begin(), t.values().end(), db.at(name).values().begin())) << name;
  }
}

TEST(Init, DraftSharesFrozenEmbeddingAndHead) {
  auto m = init_models(ModelConfig{});
  EXPECT_TRUE(m.draft.tok_emb.same_storage(m.target.tok_emb));
  EXPECT_TRUE(m.draft.lm_head.same_storage(m.target.lm_head));
  auto ps = m.draft.params();
  EXPECT_FALSE(ps.contains("tok_emb"));
  EXPECT_FALSE(ps.contains("lm_head"));
}

TEST(Init, DraftTrainableBelowThirtyFivePercent) {
  auto m = init_models(ModelConfig{});
  const double ratio = static_cast<double>(m.draft.trainable_count()) /
                       static_cast<double>(m.target.parameter_count());
  EXPECT_LT(ratio, 0.35);
  auto two = init_draft(m.target, DraftArch{true, 2, true}, 1);
  EXPECT_LT(two.trainable_count(), m.target.parameter_count());
}

TEST(Init, ArchNeedsOneBlock) {
  auto m = init_models(small_config());
  EXPECT_THROW(init_draft(m.target, DraftArch{false, 1, false}, 1), ValidationError);
}

TEST(TargetForward, ShapeAndTrace) {
  auto m = init_models(small_config());
  KVCache cache = m.target.make_cache();
  const std::vector<int> one{3};
  auto out = target_forward(m.target, one, &cache, false);
  EXPECT_EQ(out.logits.shape(), (Shape{1, 12}));
  EXPECT_EQ(cache.length(), 1);

  const auto toks = random_tokens(9, 12, 4);
  auto full = target_forward(m.target, toks, nullptr, true);
  ASSERT_TRUE(full.trace.has_value());
  const auto& tr = *full.trace;
  EXPECT_EQ(tr.layers(), 4);
  EXPECT_EQ(tr.hidden.size(), 5u);
  for (int l = 0; l < tr.layers(); ++l)
    for (int h = 0; h < tr.heads; ++h)
      for (int i = 0; i < tr.rows; ++i) {
        double s = 0.0;
        for (int j = 0; j < tr.keys; ++j) {
          s += tr.weight(l, h, i, j);
          if (j > i) {
            EXPECT_EQ(tr.weight(l, h, i, j), 0.0);
          }
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
}

TEST(TargetForward, IncrementalMatchesFull) {
  auto m = init_models(small_config());
  const auto toks = random_tokens(15, 12, 5);
  auto full = target_forward(m.target, toks, nullptr, false);
  KVCache cache = m.target.make_cache();
  // prefix of 6, then single tokens, then a chunk of 3
  std::vector<Tensor> pieces;
  pieces.push_back(target_forward(m.target, std::span(toks).subspan(0, 6), &cache).logits);
  for (int i = 6; i < 12; ++i) pieces.push_back(target_forward(m.target, std::span(toks).subspan(i, 1), &cache).logits);
  pieces.push_back(target_forward(m.target, std::span(toks).subspan(12, 3), &cache).logits);
  std::size_t row = 0;
  for (const auto& p : pieces) {
    for (std::size_t i = 0; i < p.rows(); ++i, ++row)
      for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR(p.at(i, j), full.logits.at(row, j), 1e-9);
  }
  EXPECT_EQ(row, 15u);
}

TEST(TargetForward, Causality) {
  auto m = init_models(small_config());
  auto toks = random_tokens(10, 12, 6);
  auto a = target_forward(m.target, toks, nullptr);
  toks[7] = (toks[7] + 1) % 12;
  toks[9] = (toks[9] + 5) % 12;
  auto b = target_forward(m.target, toks, nullptr);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 12; ++j) EXPECT_EQ(a.logits.at(i, j), b.logits.at(i, j));
}

TEST(TargetForward, OverflowIsDimensionError) {
  auto m = init_models(small_config());
  const auto toks = random_tokens(41, 12, 1);
  EXPECT_THROW(target_forward(m.target, toks, nullptr), DimensionError);
  KVCache cache = m.target.make_cache();
  EXPECT_THROW(target_forward(m.target, toks, &cache), DimensionError);
}

TEST(KVCache, TruncateThenReextendIsBitIdentical) {
  auto m = init_models(small_config());
  const auto toks = random_tokens(12, 12, 8);
  KVCache c1 = m.target.make_cache();
  target_forward(m.target, toks, &c1);
  KVCache c2 = m.target.make_cache();
  target_forward(m.target, std::span(toks).subspan(0, 8), &c2);
  target_forward(m.target, std::vector<int>{1, 2, 3}, &c2);
  c2.truncate(8);
  target_forward(m.target, std::span(toks).subspan(8, 4), &c2);
  EXPECT_EQ(c1, c2);
}

TEST(KVCache, CompactKeepsRowsInOrder) {
  KVCache c(1, 2, 10);
  c.append(0, std::vector<double>{0, 0, 1, 1, 2, 2, 3, 3}, std::vector<double>{0, 0, 10, 10, 20, 20, 30, 30});
  const std::vector<int> keep{0, 2, 3};
  c.compact(keep);
  EXPECT_EQ(c.length(), 3);
  EXPECT_EQ(std::vector<double>(c.keys(0).begin(), c.keys(0).end()), (std::vector<double>{0, 0, 2, 2, 3, 3}));
  EXPECT_EQ(c.values(0)[2], 20.0);
  const std::vector<int> bad{1, 0};
  EXPECT_THROW(c.compact(bad), ValidationError);
}

TEST(CrossAttention, SingleBankEntryGivesItsValueProjection) {
  auto m = init_models(small_config());
  const auto& blk = m.draft.cross[0];
  Tensor e1 = random_rows(3, 16, 1);
  Tensor bank = random_rows(1, 16, 2);
  BankKV kv = project_bank(m.draft, bank);
  std::vector<double> probs;
  Tensor f = cross_attention_fuse(blk, e1, kv.k[0], kv.v[0], 2, kernels::AttentionMask::full(3, 1), &probs);
  for (double p : probs) EXPECT_EQ(p, 1.0);
  Tensor want = matmul(matmul(bank, blk.wv), blk.wo);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(f.at(i, j), want.at(0, j), 1e-12);
}

TEST(CrossAttention, ZeroQueryKeyGivesUniformAverage) {
  auto m = init_models(small_config());
  CrossBlock blk = m.draft.cross[0];
  const std::size_t d = 16;
  std::vector<double> eye(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  blk.wq = Tensor({d, d}, 0.0);
  blk.wk = Tensor({d, d}, 0.0);
  blk.wv = Tensor({d, d}, eye);
  blk.wo = Tensor({d, d}, eye);
  Tensor bank = random_rows(3, d, 3);
  Tensor e1 = random_rows(2, d, 4);
  Tensor f = cross_attention_fuse(blk, e1, matmul(bank, blk.wk), matmul(bank, blk.wv), 2,
                                  kernels::AttentionMask::full(2, 3));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double avg = (bank.at(0, j) + bank.at(1, j) + bank.at(2, j)) / 3.0;
      EXPECT_NEAR(f.at(i, j), avg, 1e-12);
    }
}

TEST(CrossAttention, SingleHeadMatchesDirectFormula) {
  ModelConfig c = small_config();
  c.n_heads = 1;
  auto m = init_models(c);
  const auto& blk = m.draft.cross[0];
  Tensor e1 = random_rows(2, 16, 5), bank = random_rows(4, 16, 6);
  Tensor f = cross_attention_fuse(blk, e1, matmul(bank, blk.wk), matmul(bank, blk.wv), 1,
                                  kernels::AttentionMask::full(2, 4));
  // direct: Q = LN(E1) W_Q (unit gain, zero bias), K = B W_K, V = B W_V
  for (std::size_t i = 0; i < 2; ++i) {
    auto r = e1.row(i);
    double mean = 0, var = 0;
    for (double x : r) mean += x;
    mean /= 16;
    for (double x : r) var += (x - mean) * (x - mean);
    var /= 16;
    std::vector<double> ln(16), q(16, 0.0);
    for (std::size_t j = 0; j < 16; ++j) ln[j] = (r[j] - mean) / std::sqrt(var + 1e-5);
    for (std::size_t a = 0; a < 16; ++a)
      for (std::size_t b = 0; b < 16; ++b) q[b] += ln[a] * blk.wq.at(a, b);
    std::vector<double> score(4, 0.0);
    std::vector<std::vector<double>> vrow(4, std::vector<double>(16, 0.0));
    for (std::size_t j = 0; j < 4; ++j) {
      std::vector<double> k(16, 0.0);
      for (std::size_t a = 0; a < 16; ++a)
        for (std::size_t b = 0; b < 16; ++b) {
          k[b] += bank.at(j, a) * blk.wk.at(a, b);
          vrow[j][b] += bank.at(j, a) * blk.wv.at(a, b);
        }
      for (std::size_t b = 0; b < 16; ++b) score[j] += q[b] * k[b];
      score[j] /= 4.0;  // sqrt(16)
    }
    double mx = *std::max_element(score.begin(), score.end()), z = 0;
    for (double& s : score) z += (s = std::exp(s - mx));
    std::vector<double> fv(16, 0.0);
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t b = 0; b < 16; ++b) fv[b] += score[j] / z * vrow[j][b];
    for (std::size_t b = 0; b < 16; ++b) {
      double want = 0.0;
      for (std::size_t a = 0; a < 16; ++a) want += fv[a] * blk.wo.at(a, b);
      EXPECT_NEAR(f.at(i, b), want, 1e-12);
    }
  }
}

TEST(CrossAttention, WidthMismatchThrows) {
  auto m = init_models(small_config());
  Tensor e1 = random_rows(2, 8, 1), bank = random_rows(2, 16, 1);
  EXPECT_THROW(cross_attention_fuse(m.draft.cross[0], e1, bank, bank, 2, kernels::AttentionMask::full(2, 2)),
               DimensionError);
}

TEST(DraftForward, ShapesAndDeterminism) {
  auto m = init_models(small_config());
  const auto toks = random_tokens(7, 12, 11);
  BankKV kv = project_bank(m.draft, random_rows(7, 16, 12));
  auto a = draft_forward(m.draft, toks, iota(0, 7), nullptr, kv, nullptr, nullptr);
  auto b = draft_forward(m.draft, toks, iota(0, 7), nullptr, kv, nullptr, nullptr);
  EXPECT_EQ(a.logits.shape(), (Shape{7, 12}));
  EXPECT_EQ(a.em.shape(), (Shape{7, 16}));
  EXPECT_EQ(a.e1.shape(), (Shape{7, 16}));
  EXPECT_TRUE(std::equal(a.logits.values().begin(), a.logits.values().end(), b.logits.values().begin()));
}

TEST(DraftForward, IncrementalMatchesFullWithFixedBank) {
  auto m = init_models(small_config());
  for (DraftArch arch : {DraftArch{}, DraftArch{false, 1, true}, DraftArch{true, 0, true}, DraftArch{true, 2, false}}) {
    DraftModel d = init_draft(m.target, arch, 77);
    const auto toks = random_tokens(10, 12, 13);
    BankKV kv = project_bank(d, random_rows(10, 16, 14));
    auto full = draft_forward(d, toks, iota(0, 10), nullptr, kv, nullptr, nullptr);
    KVCache cache = d.make_cache();
    std::size_t row = 0;
    auto check = [&](const DraftOutput& o) {
      for (std::size_t i = 0; i < o.logits.rows(); ++i, ++row) {
        for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR(o.logits.at(i, j), full.logits.at(row, j), 1e-9);
        for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(o.em.at(i, j), full.em.at(row, j), 1e-9);
      }
    };
    check(draft_forward(d, std::span(toks).subspan(0, 4), iota(0, 4), &cache, kv, nullptr, nullptr));
    for (int i = 4; i < 10; ++i) {
      check(draft_forward(d, std::span(toks).subspan(static_cast<std::size_t>(i), 1), iota(i, 1), &cache, kv,
                          nullptr, nullptr));
    }
    EXPECT_EQ(row, 10u);
  }
}

TEST(DraftForward, FirstRowSeesNoBank) {
  auto m = init_models(small_config());
  const auto toks = random_tokens(3, 12, 15);
  auto a = draft_forward(m.draft, toks, iota(0, 3), nullptr, project_bank(m.draft, random_rows(3, 16, 1)), nullptr,
                         nullptr);
  auto b = draft_forward(m.draft, toks, iota(0, 3), nullptr, project_bank(m.draft, random_rows(3, 16, 2)), nullptr,
                         nullptr);
  for (std::size_t j = 0; j < 12; ++j) EXPECT_EQ(a.logits.at(0, j), b.logits.at(0, j));
  EXPECT_NE(a.logits.at(1, 0), b.logits.at(1, 0));
}

TEST(Checkpoint, ModelsRoundTripBitExact) {
  auto m = init_models(small_config(), DraftArch{true, 2, true});
  const std::string tpath = ::testing::TempDir() + "target.drmt";
  const std::string dpath = ::testing::TempDir() + "draft.drmt";
  save_checkpoint(tpath, m.target.to_checkpoint());
  save_checkpoint(dpath, m.draft.to_checkpoint());
  TargetModel t = TargetModel::from_checkpoint(load_checkpoint(tpath));
  DraftModel d = DraftModel::from_checkpoint(load_checkpoint(dpath), t);
  EXPECT_EQ(t.config, m.target.config);
  EXPECT_EQ(d.arch, m.draft.arch);
  auto check = [](const ParamStore& a, const ParamStore& b) {
    ASSERT_EQ(a.size(), b.size());
    for (const auto& [name, ta] : a) {
      const auto& tb = b.at(name);
      ASSERT_EQ(ta.shape(), tb.shape());
      EXPECT_EQ(0, std::memcmp(ta.values().data(), tb.values().data(), ta.numel() * sizeof(double))) << name;
    }
  };
  check(m.target.params(), t.params());
  check(m.draft.params(), d.params());
  EXPECT_EQ(encode_checkpoint(m.target.to_checkpoint()), encode_checkpoint(t.to_checkpoint()));
  std::remove(tpath.c_str());
  std::remove(dpath.c_str());
}

TEST(Checkpoint, FormatLayout) {
  Checkpoint ck;
  ck["ab"] = CheckpointEntry{{2}, {1.0, -0.0}};
  const auto bytes = encode_checkpoint(ck);
  // magic + version + count + (u16 + 2 + u8 + u64 + 2*f64)
  ASSERT_EQ(bytes.size(), 4u + 4 + 4 + 2 + 2 + 1 + 8 + 16);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "DRMT");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[12], 2);
  EXPECT_EQ(bytes[16], 1);  // rank
  EXPECT_EQ(bytes[17], 2);  // extent, little-endian
  EXPECT_EQ(bytes[25 + 7], 0x3F);  // 1.0 high byte
  EXPECT_EQ(bytes[33 + 7], 0x80);  // -0.0 sign bit
  auto back = decode_checkpoint(bytes);
  EXPECT_TRUE(std::signbit(back["ab"].data[1]));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), ValidationError);
  bad = bytes;
  bad.pop_back();
  EXPECT_THROW(decode_checkpoint(bad), ValidationError);
}
