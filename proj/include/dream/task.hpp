#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dream/model.hpp"
#include "dream/sequence.hpp"

namespace dream::task {

// Token ids. Ranges are disjoint: specials, colors, digits, query words.
inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kSep = 2;
inline constexpr int kColorBase = 3;
inline constexpr int kColors = 8;
inline constexpr int kDigitBase = kColorBase + kColors;  // 11
inline constexpr int kDigits = 10;
inline constexpr int kColorAt = kDigitBase + kDigits;  // 21
inline constexpr int kCount = kColorAt + 1;
inline constexpr int kRowMode = kColorAt + 2;
inline constexpr int kRowDescribe = kColorAt + 3;
inline constexpr int kNone = kColorAt + 4;  // 25, argument padding
inline constexpr int kVocabUsed = kNone + 1;

// Prompt layout: [BOS] [visual grid, row-major] [kind, arg1, arg2, SEP].
inline constexpr int kVisualOffset = 1;
inline constexpr int kQueryTokens = 3;
inline constexpr int kPromptTextTokens = 2 + kQueryTokens;  // q

inline constexpr const char* kColorNames[kColors] = {"red",    "blue",   "green", "yellow",
                                                     "purple", "orange", "cyan",  "white"};

// Upper bound on generated response length when the target writes the
// teacher response.
inline constexpr int kMaxResponse = 16;

enum class QueryKind { kColorAt = 0, kCount = 1, kRowMode = 2, kRowDescribe = 3 };
inline constexpr int kQueryKinds = 4;

inline int color_token(int c) { return kColorBase + c; }
inline int digit_token(int d) { return kDigitBase + d; }
inline bool is_color(int t) { return t >= kColorBase && t < kColorBase + kColors; }
inline bool is_digit(int t) { return t >= kDigitBase && t < kDigitBase + kDigits; }

struct TaskSample {
  std::uint64_t seed = 0;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<int> visual;  // grid_h * grid_w color tokens
  std::vector<int> query;   // kind, arg1, arg2
  std::vector<int> answer;  // oracle answer, EOS-terminated

  QueryKind kind() const;
  bool operator==(const TaskSample&) const = default;
};

TaskSample gen_sample(std::uint64_t seed, const ModelConfig& config,
                      std::optional<QueryKind> kind = std::nullopt);

// Pure function of grid and query. Throws ValidationError on a malformed
// query encoding.
std::vector<int> answer_oracle(const TaskSample& sample);

// Conversational response used as the generation target: the query echoed
// back, then the oracle answer.
std::vector<int> gold_response(const TaskSample& sample);

TokenSequence prompt_sequence(const TaskSample& sample);

// Prompt followed by the target's own greedy response (stopping after EOS
// or kMaxResponse tokens), tagged as generated. This is the teacher-forced
// sequence for calibration and draft training.
TokenSequence teacher_sequence(const TargetModel& target, const TaskSample& sample);

// Stratified by query kind (round-robin). Sample i is seeded from
// (seed, i), so datasets under different seeds are disjoint namespaces.
std::vector<TaskSample> make_dataset(int n, std::uint64_t seed, const ModelConfig& config);

std::uint64_t sample_hash(const TaskSample& sample);

// One line per sample: grid, query, answer (tab-separated fields,
// space-separated ids).
std::string to_tsv(const std::vector<TaskSample>& samples);
void write_tsv(const std::string& path, const std::vector<TaskSample>& samples);

int vocab_required();

}  // namespace dream::task
