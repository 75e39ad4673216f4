#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dream/model.hpp"
#include "dream/speculative.hpp"
#include "dream/task.hpp"
#include "dream/training.hpp"

namespace dream::harness {

using Json = nlohmann::ordered_json;

struct DataConfig {
  int train = 4000;
  int heldout = 200;
  int test = 100;
  std::uint64_t seed = 1;
};

struct BenchConfig {
  int seeds = 3;
  int prompts = 100;
  std::vector<double> temperatures{0.0, 1.0};
  bool sweep_modes = false;
};

struct VerifyConfig {
  int mc_samples = 200000;
  int greedy_prompts = 100;
  std::uint64_t seed = 17;
  double enum_tolerance = 1e-12;
  double mc_tolerance = 0.01;
};

struct ProfileConfig {
  std::vector<int> grids{2, 4, 6};  // square grid sides
  int prompts = 20;
  int new_tokens = 64;
};

struct AblateConfig {
  bool arch = true;
  bool layer = true;
  bool keep = true;
  bool lambda = true;
  bool modes = true;
  int prompts = 50;
  int draft_steps = 0;  // 0: draft.steps
};

// Everything a command needs. Keys in the text form are dotted
// ("model.d_model = 32"); "[section]" lines prefix the keys that follow.
struct RunConfig {
  std::string out_dir = "dream_run";
  ModelConfig model;
  DraftArch arch;
  spec::DecodeConfig decode;
  train::LossWeights loss;
  std::string layer_strategy = "dynamic";
  double static_fraction = 0.5;
  DataConfig data;
  train::TargetHyper target;
  train::DraftHyper draft;
  int draft_samples = 2000;
  BenchConfig bench;
  VerifyConfig verify;
  ProfileConfig profile;
  AblateConfig ablate;

  RunConfig();

  // Throws ValidationError for an unknown key or a malformed value.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static std::vector<std::string> keys();
  // Canonical "key = value" listing of every field.
  std::string to_text() const;
  void validate() const;

  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path, const std::vector<std::string>& overrides = {});
  void apply_overrides(const std::vector<std::string>& overrides);

  // Fingerprints of the settings each artifact depends on.
  std::uint64_t target_key() const;
  std::uint64_t draft_key() const;

  std::string target_path() const;
  std::string calibration_path() const;
  std::string draft_path() const;
  std::string report_dir(const std::string& command) const;
};

struct Splits {
  std::vector<task::TaskSample> train, heldout, test;
};

// Held-out and test samples never repeat a training grid/query pair.
Splits make_splits(const RunConfig& cfg);

// Rows of one report, written as JSON lines and as CSV with the union of
// keys as header. Arrays become ';'-joined cells.
class Report {
 public:
  void add(Json row) { rows_.push_back(std::move(row)); }
  const std::vector<Json>& rows() const { return rows_; }
  std::vector<std::string> columns() const;
  std::string to_jsonl() const;
  std::string to_csv() const;
  void write(const std::string& dir) const;

 private:
  std::vector<Json> rows_;
};

struct Options {
  bool reuse = false;  // skip work whose artifact already matches the config
  std::ostream* log = nullptr;
};

enum Status { kOk = 0, kValidation = 1, kThreshold = 2 };

struct Outcome {
  Status status = kOk;
  Report report;
};

Outcome cmd_train_target(const RunConfig& cfg, const Options& opt = {});
Outcome cmd_calibrate(const RunConfig& cfg, const Options& opt = {});
Outcome cmd_train_draft(const RunConfig& cfg, const Options& opt = {});
Outcome cmd_bench(const RunConfig& cfg, const Options& opt = {});
Outcome cmd_verify_lossless(const RunConfig& cfg, const Options& opt = {});
Outcome cmd_profile_flops(const RunConfig& cfg, const Options& opt = {});
Outcome cmd_ablate(const RunConfig& cfg, const Options& opt = {});
Outcome cmd_export_dataset(const RunConfig& cfg, const Options& opt = {});

// Loaders that enforce the pipeline order; errors name the command to run.
TargetModel load_target(const RunConfig& cfg);
DraftModel load_draft(const RunConfig& cfg, const TargetModel& target);

// Bookkeeping written next to an artifact (training seconds and the like);
// empty when absent.
Json artifact_meta(const std::string& artifact);

struct BenchRow {
  std::string config;
  spec::Mode mode = spec::Mode::kTree;
  double temperature = 0.0;
  std::uint64_t seed = 0;
  int prompts = 0;
  double tau = 0.0;
  double ar_seconds_per_token = 0.0;
  double sd_seconds_per_token = 0.0;
  double ar_flops_per_token = 0.0;
  double sd_flops_per_token = 0.0;
  std::vector<int> histogram;
  int greedy_matches = 0;  // prompts whose output equals the AR output

  double speedup() const { return ar_seconds_per_token / sd_seconds_per_token; }
  double flop_speedup() const { return ar_flops_per_token / sd_flops_per_token; }
  Json to_json() const;
};

// AR baseline and speculative decoding over the prompts, one sampler seed
// per prompt derived from `seed`.
BenchRow measure(const TargetModel& target, const DraftModel* draft, const std::vector<task::TaskSample>& prompts,
                 const spec::DecodeConfig& decode, std::uint64_t seed, const std::string& config_id);

struct FlopProfile {
  std::uint64_t multimodal = 0;
  std::uint64_t text_only = 0;
  double ratio() const { return static_cast<double>(multimodal) / static_cast<double>(text_only); }
};

// Forward FLOPs of prefill plus new_tokens cached steps, with and without
// the visual tokens of the prompt.
FlopProfile profile_prompt(const TargetModel& target, const TokenSequence& prompt, int new_tokens);

struct AblationVariant {
  std::string name;
  std::string group;
  RunConfig config;
};

std::vector<AblationVariant> ablation_variants(const RunConfig& base);

// Number of parallel trials: DREAM_THREADS when set, else the OpenMP
// default.
int trial_threads();

}  // namespace dream::harness
