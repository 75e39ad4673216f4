#include "dream/task.hpp"

#include <fstream>
#include <sstream>

#include "dream/errors.hpp"
#include "dream/rng.hpp"

namespace dream::task {

namespace {

void check_grid(int h, int w) {
  if (h < 1 || w < 1 || h > kDigits || w > kDigits) {
    throw ValidationError("task: grid extents must lie in [1, 10]");
  }
}

int digit_value(int tok, int bound, const char* what) {
  if (!is_digit(tok)) throw ValidationError(std::string("task: ") + what + " argument is not a digit token");
  const int v = tok - kDigitBase;
  if (v >= bound) throw ValidationError(std::string("task: ") + what + " argument out of range");
  return v;
}

void append_number(std::vector<int>& out, int n) {
  const std::string s = std::to_string(n);
  for (char ch : s) out.push_back(digit_token(ch - '0'));
}

}  // namespace

QueryKind TaskSample::kind() const {
  if (query.size() != kQueryTokens) throw ValidationError("task: query must have 3 tokens");
  switch (query[0]) {
    case kColorAt: return QueryKind::kColorAt;
    case kCount: return QueryKind::kCount;
    case kRowMode: return QueryKind::kRowMode;
    case kRowDescribe: return QueryKind::kRowDescribe;
    default: throw ValidationError("task: unknown query keyword " + std::to_string(query[0]));
  }
}

int vocab_required() { return kVocabUsed; }

TaskSample gen_sample(std::uint64_t seed, const ModelConfig& config, std::optional<QueryKind> kind) {
  check_grid(config.grid_h, config.grid_w);
  if (config.vocab_size < kVocabUsed) throw ValidationError("task: vocab_size too small for the task vocabulary");
  SplitMix64 rng(seed);
  TaskSample s;
  s.seed = seed;
  s.grid_h = config.grid_h;
  s.grid_w = config.grid_w;
  const int v = config.grid_h * config.grid_w;
  s.visual.resize(static_cast<std::size_t>(v));
  for (int& c : s.visual) c = color_token(static_cast<int>(rng.below(kColors)));
  const auto k = kind ? *kind : static_cast<QueryKind>(rng.below(kQueryKinds));
  const int r = static_cast<int>(rng.below(static_cast<std::uint64_t>(config.grid_h)));
  const int c = static_cast<int>(rng.below(static_cast<std::uint64_t>(config.grid_w)));
  const int col = static_cast<int>(rng.below(kColors));
  switch (k) {
    case QueryKind::kColorAt: s.query = {kColorAt, digit_token(r), digit_token(c)}; break;
    case QueryKind::kCount: s.query = {kCount, color_token(col), kNone}; break;
    case QueryKind::kRowMode: s.query = {kRowMode, digit_token(r), kNone}; break;
    case QueryKind::kRowDescribe: s.query = {kRowDescribe, digit_token(r), kNone}; break;
  }
  s.answer = answer_oracle(s);
  return s;
}

std::vector<int> answer_oracle(const TaskSample& s) {
  if (s.grid_h < 1 || s.grid_w < 1 || static_cast<int>(s.visual.size()) != s.grid_h * s.grid_w) {
    throw ValidationError("task: grid does not match its extents");
  }
  for (int t : s.visual) {
    if (!is_color(t)) throw ValidationError("task: visual token is not a color");
  }
  const QueryKind k = s.kind();
  auto cell = [&](int r, int c) { return s.visual[static_cast<std::size_t>(r * s.grid_w + c)]; };
  std::vector<int> out;
  switch (k) {
    case QueryKind::kColorAt: {
      const int r = digit_value(s.query[1], s.grid_h, "row");
      const int c = digit_value(s.query[2], s.grid_w, "column");
      out.push_back(cell(r, c));
      break;
    }
    case QueryKind::kCount: {
      if (!is_color(s.query[1]) || s.query[2] != kNone) throw ValidationError("task: malformed COUNT query");
      int n = 0;
      for (int t : s.visual) n += t == s.query[1];
      append_number(out, n);
      break;
    }
    case QueryKind::kRowMode: {
      if (s.query[2] != kNone) throw ValidationError("task: malformed ROW_MODE query");
      const int r = digit_value(s.query[1], s.grid_h, "row");
      int hist[kColors] = {};
      for (int c = 0; c < s.grid_w; ++c) ++hist[cell(r, c) - kColorBase];
      int best = 0;
      for (int c = 1; c < kColors; ++c)
        if (hist[c] > hist[best]) best = c;  // ties keep the lowest color
      out.push_back(color_token(best));
      break;
    }
    case QueryKind::kRowDescribe: {
      if (s.query[2] != kNone) throw ValidationError("task: malformed ROW_DESCRIBE query");
      const int r = digit_value(s.query[1], s.grid_h, "row");
      for (int c = 0; c < s.grid_w; ++c) out.push_back(cell(r, c));
      break;
    }
  }
  out.push_back(kEos);
  return out;
}

std::vector<int> gold_response(const TaskSample& s) {
  std::vector<int> out(s.query.begin(), s.query.end());
  const auto a = answer_oracle(s);
  out.insert(out.end(), a.begin(), a.end());
  return out;
}

TokenSequence prompt_sequence(const TaskSample& s) {
  TokenSequence seq;
  seq.push(kBos, Modality::kText);
  for (int t : s.visual) seq.push(t, Modality::kVisual);
  for (int t : s.query) seq.push(t, Modality::kText);
  seq.push(kSep, Modality::kText);
  return seq;
}

TokenSequence teacher_sequence(const TargetModel& target, const TaskSample& s) {
  TokenSequence seq = prompt_sequence(s);
  for (int t : greedy_continuation(target, seq.ids, kMaxResponse, kEos)) seq.push(t, Modality::kGenerated);
  return seq;
}

std::vector<TaskSample> make_dataset(int n, std::uint64_t seed, const ModelConfig& config) {
  if (n <= 0) throw ValidationError("make_dataset: n must be positive");
  std::vector<TaskSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto kind = static_cast<QueryKind>(i % kQueryKinds);
    out.push_back(gen_sample(mix_seed(seed, static_cast<std::uint64_t>(i)), config, kind));
  }
  return out;
}

std::uint64_t sample_hash(const TaskSample& s) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](int t) {
    h ^= static_cast<std::uint64_t>(t) + 0x9E3779B97F4A7C15ULL;
    h *= 1099511628211ULL;
  };
  mix(s.grid_h);
  mix(s.grid_w);
  for (int t : s.visual) mix(t);
  for (int t : s.query) mix(t);
  return h;
}

std::string to_tsv(const std::vector<TaskSample>& samples) {
  std::ostringstream o;
  auto ids = [&o](const std::vector<int>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) o << (i ? " " : "") << v[i];
  };
  for (const auto& s : samples) {
    ids(s.visual);
    o << '\t';
    ids(s.query);
    o << '\t';
    ids(s.answer);
    o << '\n';
  }
  return o.str();
}

void write_tsv(const std::string& path, const std::vector<TaskSample>& samples) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot open for writing: " + path);
  f << to_tsv(samples);
}

}  // namespace dream::task
