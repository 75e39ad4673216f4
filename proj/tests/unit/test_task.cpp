#include <gtest/gtest.h>

#include <set>

#include "dream/errors.hpp"
#include "dream/task.hpp"

using namespace dream;
using namespace dream::task;

namespace {

int red() { return color_token(0); }
int blue() { return color_token(1); }
int green() { return color_token(2); }

TaskSample two_by_two() {
  TaskSample s;
  s.grid_h = 2;
  s.grid_w = 2;
  s.visual = {red(), blue(), green(), red()};
  return s;
}

// Independent recount straight from the grid.
std::vector<int> brute_force(const TaskSample& s) {
  std::vector<int> out;
  const int kind = s.query[0];
  if (kind == kColorAt) {
    out.push_back(s.visual[static_cast<std::size_t>((s.query[1] - kDigitBase) * s.grid_w + (s.query[2] - kDigitBase))]);
  } else if (kind == kCount) {
    int n = 0;
    for (std::size_t i = 0; i < s.visual.size(); ++i)
      if (s.visual[i] == s.query[1]) n += 1;
    if (n >= 10) out.push_back(kDigitBase + n / 10);
    out.push_back(kDigitBase + n % 10);
  } else {
    const int r = s.query[1] - kDigitBase;
    if (kind == kRowDescribe) {
      for (int c = 0; c < s.grid_w; ++c) out.push_back(s.visual[static_cast<std::size_t>(r * s.grid_w + c)]);
    } else {
      int best_tok = -1, best_n = -1;
      for (int tok = kColorBase; tok < kColorBase + kColors; ++tok) {
        int n = 0;
        for (int c = 0; c < s.grid_w; ++c) n += s.visual[static_cast<std::size_t>(r * s.grid_w + c)] == tok;
        if (n > best_n) {
          best_n = n;
          best_tok = tok;
        }
      }
      out.push_back(best_tok);
    }
  }
  out.push_back(kEos);
  return out;
}

}  // namespace

TEST(Vocab, RangesDisjointAndFit) {
  std::set<int> seen{kBos, kEos, kSep};
  for (int c = 0; c < kColors; ++c) EXPECT_TRUE(seen.insert(color_token(c)).second);
  for (int d = 0; d < kDigits; ++d) EXPECT_TRUE(seen.insert(digit_token(d)).second);
  for (int t : {kColorAt, kCount, kRowMode, kRowDescribe, kNone}) EXPECT_TRUE(seen.insert(t).second);
  EXPECT_LE(vocab_required(), ModelConfig{}.vocab_size);
  EXPECT_EQ(static_cast<int>(seen.size()), vocab_required());
}

TEST(Oracle, ColorAtOnKnownGrid) {
  TaskSample s = two_by_two();
  s.query = {kColorAt, digit_token(0), digit_token(1)};
  EXPECT_EQ(answer_oracle(s), (std::vector<int>{blue(), kEos}));
  EXPECT_STREQ(kColorNames[blue() - kColorBase], "blue");
}

TEST(Oracle, CountOnKnownGrid) {
  TaskSample s = two_by_two();
  s.query = {kCount, red(), kNone};
  EXPECT_EQ(answer_oracle(s), (std::vector<int>{digit_token(2), kEos}));
}

TEST(Oracle, MonochromeAndAbsentCounts) {
  TaskSample s;
  s.grid_h = 3;
  s.grid_w = 3;
  s.visual.assign(9, blue());
  s.query = {kCount, blue(), kNone};
  EXPECT_EQ(answer_oracle(s), (std::vector<int>{digit_token(9), kEos}));
  s.query = {kCount, green(), kNone};
  EXPECT_EQ(answer_oracle(s), (std::vector<int>{digit_token(0), kEos}));
}

TEST(Oracle, RowModeTiesToLowestColor) {
  TaskSample s = two_by_two();
  s.query = {kRowMode, digit_token(0), kNone};  // red, blue: tie
  EXPECT_EQ(answer_oracle(s), (std::vector<int>{red(), kEos}));
  s.query = {kRowDescribe, digit_token(1), kNone};
  EXPECT_EQ(answer_oracle(s), (std::vector<int>{green(), red(), kEos}));
}

TEST(Oracle, MalformedQueries) {
  TaskSample s = two_by_two();
  s.query = {kColorAt, digit_token(2), digit_token(0)};
  EXPECT_THROW(answer_oracle(s), ValidationError);
  s.query = {kCount, digit_token(1), kNone};
  EXPECT_THROW(answer_oracle(s), ValidationError);
  s.query = {kSep, kNone, kNone};
  EXPECT_THROW(answer_oracle(s), ValidationError);
  s.query = {kRowMode};
  EXPECT_THROW(answer_oracle(s), ValidationError);
}

TEST(Oracle, MatchesBruteForceRecount) {
  const ModelConfig c;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const TaskSample s = gen_sample(seed * 7919 + 1, c);
    EXPECT_EQ(s.answer, brute_force(s)) << "seed " << seed;
    EXPECT_GE(s.answer.size(), 2u);
  }
}

TEST(GenSample, DeterministicAndWellFormed) {
  const ModelConfig c;
  const TaskSample a = gen_sample(123, c), b = gen_sample(123, c);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.visual.size(), 36u);
  for (int t : a.visual) EXPECT_TRUE(is_color(t));
  const TokenSequence p = prompt_sequence(a);
  EXPECT_EQ(p.size(), 36u + kPromptTextTokens);
  EXPECT_EQ(p.count(Modality::kVisual), 36u);
  EXPECT_EQ(p.first(Modality::kVisual), static_cast<std::size_t>(kVisualOffset));
  EXPECT_EQ(p.ids.back(), kSep);
}

TEST(GenSample, VisualDependence) {
  // Changing one cell changes the oracle answer of at least one query kind.
  const ModelConfig c;
  const TaskSample base = gen_sample(5, c, QueryKind::kRowDescribe);
  for (int cell = 0; cell < 36; ++cell) {
    TaskSample s = base;
    s.visual[static_cast<std::size_t>(cell)] = color_token((s.visual[static_cast<std::size_t>(cell)] - kColorBase + 1) % kColors);
    bool changed = false;
    for (int kind = 0; kind < kQueryKinds && !changed; ++kind) {
      TaskSample a = base, b = s;
      const int r = cell / 6, col = cell % 6;
      std::vector<int> q;
      switch (static_cast<QueryKind>(kind)) {
        case QueryKind::kColorAt: q = {kColorAt, digit_token(r), digit_token(col)}; break;
        case QueryKind::kCount: q = {kCount, base.visual[static_cast<std::size_t>(cell)], kNone}; break;
        case QueryKind::kRowMode: q = {kRowMode, digit_token(r), kNone}; break;
        case QueryKind::kRowDescribe: q = {kRowDescribe, digit_token(r), kNone}; break;
      }
      a.query = b.query = q;
      changed = answer_oracle(a) != answer_oracle(b);
    }
    EXPECT_TRUE(changed) << "cell " << cell;
  }
}

TEST(Dataset, StratifiedDeterministicDisjoint) {
  const ModelConfig c;
  const auto three = make_dataset(3, 42, c);
  std::set<int> kinds;
  for (const auto& s : three) kinds.insert(s.query[0]);
  EXPECT_EQ(kinds.size(), 3u);
  EXPECT_EQ(make_dataset(50, 42, c), make_dataset(50, 42, c));
  std::set<std::uint64_t> train;
  for (const auto& s : make_dataset(2000, 42, c)) train.insert(sample_hash(s));
  for (const auto& s : make_dataset(2000, 43, c)) EXPECT_EQ(train.count(sample_hash(s)), 0u);
  EXPECT_THROW(make_dataset(0, 1, c), ValidationError);
}

TEST(Dataset, GoldResponseEchoesQuery) {
  const auto s = gen_sample(77, ModelConfig{});
  const auto r = gold_response(s);
  ASSERT_EQ(r.size(), s.query.size() + s.answer.size());
  EXPECT_TRUE(std::equal(s.query.begin(), s.query.end(), r.begin()));
  EXPECT_EQ(r.back(), kEos);
}

TEST(Dataset, TsvExport) {
  TaskSample s = two_by_two();
  s.query = {kCount, red(), kNone};
  s.answer = answer_oracle(s);
  const std::string line = to_tsv({s});
  const std::string want = std::to_string(red()) + " " + std::to_string(blue()) + " " + std::to_string(green()) + " " +
                           std::to_string(red()) + "\t" + std::to_string(kCount) + " " + std::to_string(red()) + " " +
                           std::to_string(kNone) + "\t" + std::to_string(digit_token(2)) + " " +
                           std::to_string(kEos) + "\n";
  EXPECT_EQ(line, want);
}
