#include "dream/harness.hpp"

#include <omp.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "dream/checkpoint.hpp"
#include "dream/entropy.hpp"
#include "dream/errors.hpp"
#include "dream/flops.hpp"
#include "dream/rng.hpp"
#include "dream/sampling.hpp"

namespace fs = std::filesystem;

namespace dream::harness {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw ValidationError("config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

void parse_value(const std::string& key, const std::string& v, int& out) {
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, v, "an integer");
}
void parse_value(const std::string& key, const std::string& v, std::uint64_t& out) {
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, v, "an unsigned integer");
}
void parse_value(const std::string& key, const std::string& v, double& out) {
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, v, "a number");
}
void parse_value(const std::string& key, const std::string& v, bool& out) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") {
    out = true;
  } else if (v == "false" || v == "0" || v == "no" || v == "off") {
    out = false;
  } else {
    bad_value(key, v, "a boolean");
  }
}
void parse_value(const std::string&, const std::string& v, std::string& out) { out = v; }
void parse_value(const std::string& key, const std::string& v, spec::Mode& out) {
  try {
    out = spec::parse_mode(v);
  } catch (const Error&) {
    bad_value(key, v, "chain or tree");
  }
}
template <class T>
void parse_value(const std::string& key, const std::string& v, std::vector<T>& out) {
  out.clear();
  if (v.empty()) return;
  for (const auto& item : split(v, ',')) {
    T x{};
    parse_value(key, item, x);
    out.push_back(x);
  }
}

std::string format_value(int v) { return std::to_string(v); }
std::string format_value(std::uint64_t v) { return std::to_string(v); }
std::string format_value(double v) { return fmt_double(v); }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(const std::string& v) { return v; }
std::string format_value(spec::Mode m) { return spec::mode_name(m); }
template <class T>
std::string format_value(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_value(v[i]);
  return s;
}

// Which artifact a key feeds into.
enum class Scope { kTarget, kDraft, kOther };

struct Field {
  std::string key;
  Scope scope;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Acc>
Field field(std::string key, Scope scope, Acc acc) {
  return {key, scope,
          [acc, key](RunConfig& c, const std::string& v) { parse_value(key, v, acc(c)); },
          [acc](const RunConfig& c) { return format_value(acc(const_cast<RunConfig&>(c))); }};
}

#define DREAM_FIELD(key, scope, member) field(key, scope, [](RunConfig& c) -> auto& { return c.member; })

const std::vector<Field>& fields() {
  using enum Scope;
  static const std::vector<Field> f = {
      DREAM_FIELD("run.out_dir", kOther, out_dir),
      DREAM_FIELD("model.vocab_size", kTarget, model.vocab_size),
      DREAM_FIELD("model.d_model", kTarget, model.d_model),
      DREAM_FIELD("model.n_heads", kTarget, model.n_heads),
      DREAM_FIELD("model.target_layers", kTarget, model.target_layers),
      DREAM_FIELD("model.max_seq_len", kTarget, model.max_seq_len),
      DREAM_FIELD("model.grid_h", kTarget, model.grid_h),
      DREAM_FIELD("model.grid_w", kTarget, model.grid_w),
      DREAM_FIELD("model.seed", kTarget, model.seed),
      DREAM_FIELD("model.init_std", kTarget, model.init_std),
      DREAM_FIELD("data.train", kTarget, data.train),
      DREAM_FIELD("data.heldout", kTarget, data.heldout),
      DREAM_FIELD("data.test", kOther, data.test),
      DREAM_FIELD("data.seed", kTarget, data.seed),
      DREAM_FIELD("target.steps", kTarget, target.steps),
      DREAM_FIELD("target.batch_size", kTarget, target.batch_size),
      DREAM_FIELD("target.lr", kTarget, target.lr),
      DREAM_FIELD("target.clip", kTarget, target.clip),
      DREAM_FIELD("target.seed", kTarget, target.seed),
      DREAM_FIELD("target.eval_every", kTarget, target.eval_every),
      DREAM_FIELD("target.stop_accuracy", kTarget, target.stop_accuracy),
      DREAM_FIELD("draft.initial_block", kDraft, arch.initial_block),
      DREAM_FIELD("draft.cross_blocks", kDraft, arch.cross_blocks),
      DREAM_FIELD("draft.final_block", kDraft, arch.final_block),
      DREAM_FIELD("draft.samples", kDraft, draft_samples),
      DREAM_FIELD("draft.steps", kDraft, draft.steps),
      DREAM_FIELD("draft.batch_size", kDraft, draft.batch_size),
      DREAM_FIELD("draft.lr", kDraft, draft.lr),
      DREAM_FIELD("draft.clip", kDraft, draft.clip),
      DREAM_FIELD("draft.seed", kDraft, draft.seed),
      DREAM_FIELD("draft.checkpoint_every", kOther, draft.checkpoint_every),
      DREAM_FIELD("loss.feat", kDraft, loss.feat),
      DREAM_FIELD("loss.intermed", kDraft, loss.intermed),
      DREAM_FIELD("loss.kl", kDraft, loss.kl),
      DREAM_FIELD("layer.strategy", kDraft, layer_strategy),
      DREAM_FIELD("layer.static_fraction", kDraft, static_fraction),
      DREAM_FIELD("decode.mode", kOther, decode.mode),
      DREAM_FIELD("decode.gamma", kOther, decode.gamma),
      DREAM_FIELD("decode.k", kOther, decode.k),
      DREAM_FIELD("decode.depth", kOther, decode.depth),
      DREAM_FIELD("decode.max_draft_tokens", kOther, decode.max_draft_tokens),
      DREAM_FIELD("decode.temperature", kOther, decode.temperature),
      DREAM_FIELD("decode.keep_fraction", kDraft, decode.keep_fraction),
      DREAM_FIELD("decode.vtc", kDraft, decode.vtc),
      DREAM_FIELD("decode.max_new_tokens", kOther, decode.max_new_tokens),
      DREAM_FIELD("decode.stop_at_eos", kOther, decode.stop_at_eos),
      DREAM_FIELD("decode.seed", kOther, decode.seed),
      DREAM_FIELD("bench.seeds", kOther, bench.seeds),
      DREAM_FIELD("bench.prompts", kOther, bench.prompts),
      DREAM_FIELD("bench.temperatures", kOther, bench.temperatures),
      DREAM_FIELD("bench.sweep_modes", kOther, bench.sweep_modes),
      DREAM_FIELD("verify.mc_samples", kOther, verify.mc_samples),
      DREAM_FIELD("verify.greedy_prompts", kOther, verify.greedy_prompts),
      DREAM_FIELD("verify.seed", kOther, verify.seed),
      DREAM_FIELD("verify.enum_tolerance", kOther, verify.enum_tolerance),
      DREAM_FIELD("verify.mc_tolerance", kOther, verify.mc_tolerance),
      DREAM_FIELD("profile.grids", kOther, profile.grids),
      DREAM_FIELD("profile.prompts", kOther, profile.prompts),
      DREAM_FIELD("profile.new_tokens", kOther, profile.new_tokens),
      DREAM_FIELD("ablate.arch", kOther, ablate.arch),
      DREAM_FIELD("ablate.layer", kOther, ablate.layer),
      DREAM_FIELD("ablate.keep", kOther, ablate.keep),
      DREAM_FIELD("ablate.lambda", kOther, ablate.lambda),
      DREAM_FIELD("ablate.modes", kOther, ablate.modes),
      DREAM_FIELD("ablate.prompts", kOther, ablate.prompts),
      DREAM_FIELD("ablate.draft_steps", kOther, ablate.draft_steps),
  };
  return f;
}

#undef DREAM_FIELD

const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ValidationError("unknown config key '" + key + "'");
}

std::uint64_t fnv(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << v;
  return o.str();
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  std::ostringstream o;
  o << in.rdbuf();
  return o.str();
}

void write_file(const std::string& path, const std::string& text) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  out << text;
}

std::string key_path(const std::string& artifact) { return artifact + ".key"; }

void write_meta(const std::string& artifact, const Json& meta) {
  write_file(artifact + ".meta.json", meta.dump(2) + "\n");
}

bool artifact_current(const std::string& path, std::uint64_t key) {
  if (!fs::exists(path) || !fs::exists(key_path(path))) return false;
  return trim(read_file(key_path(path))) == hex(key);
}

std::ostream& out(const Options& opt) {
  thread_local std::ostream discard(nullptr);
  return opt.log ? *opt.log : discard;
}

std::vector<task::TaskSample> fresh_samples(int n, std::uint64_t seed, const ModelConfig& config,
                                            std::set<std::uint64_t>& seen) {
  std::vector<task::TaskSample> outv;
  for (std::uint64_t i = 0; static_cast<int>(outv.size()) < n; ++i) {
    const auto kind = static_cast<task::QueryKind>(outv.size() % task::kQueryKinds);
    auto s = task::gen_sample(mix_seed(seed, i), config, kind);
    if (seen.insert(task::sample_hash(s)).second) outv.push_back(std::move(s));
  }
  return outv;
}

std::vector<task::TaskSample> draft_set(const RunConfig& cfg, const Splits& sp) {
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(cfg.draft_samples), sp.train.size());
  return {sp.train.begin(), sp.train.begin() + static_cast<std::ptrdiff_t>(n)};
}

std::vector<task::TaskSample> first_n(const std::vector<task::TaskSample>& v, int n) {
  const auto m = std::min<std::size_t>(static_cast<std::size_t>(std::max(n, 0)), v.size());
  return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(m)};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string csv_cell(const Json& v) {
  std::string s;
  if (v.is_null()) return "";
  if (v.is_string()) {
    s = v.get<std::string>();
  } else if (v.is_array()) {
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ";" : "") + csv_cell(v[i]);
  } else if (v.is_number_float()) {
    s = fmt_double(v.get<double>());
  } else {
    s = v.dump();
  }
  if (s.find_first_of(",\"\n") != std::string::npos) {
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  }
  return s;
}

}  // namespace

// ---- config ----------------------------------------------------------------

RunConfig::RunConfig() {
  data.train = 40000;
  target.steps = 12000;
  target.batch_size = 8;
  target.lr = 1e-3;
  target.eval_every = 1000;
  draft.lr = 1e-3;
  decode.max_new_tokens = 64;
}

void RunConfig::set(const std::string& key, const std::string& value) { find_field(key).set(*this, trim(value)); }

std::string RunConfig::get(const std::string& key) const { return find_field(key).get(*this); }

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> k;
  for (const auto& f : fields()) k.push_back(f.key);
  return k;
}

std::string RunConfig::to_text() const {
  std::string s;
  for (const auto& f : fields()) s += f.key + " = " + f.get(*this) + "\n";
  return s;
}

void RunConfig::validate() const {
  model.validate(task::kPromptTextTokens);
  if (model.vocab_size < task::vocab_required()) {
    throw ValidationError("model.vocab_size must be >= " + std::to_string(task::vocab_required()));
  }
  decode.validate();
  loss.validate();
  train::parse_strategy(layer_strategy);
  if (static_fraction <= 0.0 || static_fraction > 1.0) throw ValidationError("layer.static_fraction must be in (0, 1]");
  if (data.train < 1 || data.heldout < 1 || data.test < 1) throw ValidationError("data sizes must be positive");
  if (draft_samples < 1) throw ValidationError("draft.samples must be positive");
  if (bench.seeds < 1 || bench.prompts < 1) throw ValidationError("bench.seeds and bench.prompts must be positive");
  for (double t : bench.temperatures)
    if (t < 0.0) throw ValidationError("bench.temperatures must be >= 0");
  if (verify.mc_samples < 1) throw ValidationError("verify.mc_samples must be positive");
  for (int g : profile.grids)
    if (g < 1 || g * g > model.visual_tokens()) {
      throw ValidationError("profile.grids entries must be in [1, grid side]");
    }
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ValidationError("config line " + std::to_string(lineno) + ": bad section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    c.set(key, line.substr(eq + 1));
  }
  return c;
}

void RunConfig::apply_overrides(const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + o + "'");
    set(trim(o.substr(0, eq)), o.substr(eq + 1));
  }
}

RunConfig RunConfig::load(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig c = path.empty() ? RunConfig{} : parse(read_file(path));
  c.apply_overrides(overrides);
  c.validate();
  return c;
}

std::uint64_t RunConfig::target_key() const {
  std::string s;
  for (const auto& f : fields())
    if (f.scope == Scope::kTarget) s += f.key + "=" + f.get(*this) + "\n";
  return fnv(s);
}

std::uint64_t RunConfig::draft_key() const {
  std::string s = hex(target_key()) + "\n";
  for (const auto& f : fields())
    if (f.scope == Scope::kDraft) s += f.key + "=" + f.get(*this) + "\n";
  return fnv(s);
}

std::string RunConfig::target_path() const { return (fs::path(out_dir) / "target.drmt").string(); }
std::string RunConfig::calibration_path() const { return (fs::path(out_dir) / "calibration.tsv").string(); }
std::string RunConfig::draft_path() const {
  return (fs::path(out_dir) / "drafts" / (hex(draft_key()) + ".drmt")).string();
}
std::string RunConfig::report_dir(const std::string& command) const { return (fs::path(out_dir) / command).string(); }

Splits make_splits(const RunConfig& cfg) {
  Splits s;
  s.train = task::make_dataset(cfg.data.train, cfg.data.seed, cfg.model);
  std::set<std::uint64_t> seen;
  for (const auto& x : s.train) seen.insert(task::sample_hash(x));
  s.heldout = fresh_samples(cfg.data.heldout, mix_seed(cfg.data.seed, 0x4E1D), cfg.model, seen);
  s.test = fresh_samples(cfg.data.test, mix_seed(cfg.data.seed, 0x7E57), cfg.model, seen);
  return s;
}

int trial_threads() {
  if (const char* env = std::getenv("DREAM_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return omp_get_max_threads();
}

// ---- reports ---------------------------------------------------------------

std::vector<std::string> Report::columns() const {
  std::vector<std::string> cols;
  for (const auto& r : rows_)
    for (const auto& [k, v] : r.items())
      if (std::find(cols.begin(), cols.end(), k) == cols.end()) cols.push_back(k);
  return cols;
}

std::string Report::to_jsonl() const {
  std::string s;
  for (const auto& r : rows_) s += r.dump() + "\n";
  return s;
}

std::string Report::to_csv() const {
  const auto cols = columns();
  std::string s;
  for (std::size_t i = 0; i < cols.size(); ++i) s += (i ? "," : "") + cols[i];
  s += "\n";
  for (const auto& r : rows_) {
    for (std::size_t i = 0; i < cols.size(); ++i) {
      if (i) s += ",";
      if (r.contains(cols[i])) s += csv_cell(r.at(cols[i]));
    }
    s += "\n";
  }
  return s;
}

void Report::write(const std::string& dir) const {
  write_file((fs::path(dir) / "report.json").string(), to_jsonl());
  write_file((fs::path(dir) / "report.csv").string(), to_csv());
}

// ---- artifacts -------------------------------------------------------------

Json artifact_meta(const std::string& artifact) {
  const auto path = artifact + ".meta.json";
  if (!fs::exists(path)) return Json::object();
  return Json::parse(read_file(path));
}

TargetModel load_target(const RunConfig& cfg) {
  const auto path = cfg.target_path();
  if (!fs::exists(path)) {
    throw StateError("target checkpoint '" + path + "' not found; run `dream train-target` first");
  }
  if (!artifact_current(path, cfg.target_key())) {
    throw StateError("target checkpoint '" + path +
                     "' was trained with different settings; rerun `dream train-target`");
  }
  return TargetModel::from_checkpoint(load_checkpoint(path));
}

DraftModel load_draft(const RunConfig& cfg, const TargetModel& target) {
  const auto path = cfg.draft_path();
  if (!artifact_current(path, cfg.draft_key())) {
    throw StateError("no draft checkpoint for this configuration at '" + path + "'; run `dream train-draft` first");
  }
  return DraftModel::from_checkpoint(load_checkpoint(path), target);
}

namespace {

entropy::CalibrationMap load_calibration(const RunConfig& cfg, const TargetModel& target) {
  entropy::CalibrationMap m;
  if (!entropy::read_cache(cfg.calibration_path(), entropy::model_fingerprint(target), m)) {
    throw StateError("no calibration for the current target at '" + cfg.calibration_path() +
                     "'; run `dream calibrate` first");
  }
  return m;
}

Json histogram_json(const std::vector<int>& h) { return Json(h); }

}  // namespace

// ---- commands --------------------------------------------------------------

Outcome cmd_train_target(const RunConfig& cfg, const Options& opt) {
  cfg.validate();
  auto& log = out(opt);
  Outcome res;
  const auto path = cfg.target_path();
  const auto splits = make_splits(cfg);
  if (opt.reuse && artifact_current(path, cfg.target_key())) {
    log << "target: reusing " << path << "\n";
    const auto target = load_target(cfg);
    const double acc = train::greedy_accuracy(target, splits.heldout);
    res.report.add(Json{{"command", "train-target"}, {"steps", 0}, {"heldout_accuracy", acc}, {"reused", true}});
    res.status = acc >= cfg.target.stop_accuracy ? kOk : kThreshold;
    return res;
  }
  fs::create_directories(cfg.out_dir);
  ModelPair models = init_models(cfg.model);
  TargetModel& target = models.target;
  std::ofstream jl((fs::path(cfg.out_dir) / "target_log.jsonl").string());
  const auto t0 = std::chrono::steady_clock::now();
  const auto history = train::train_target(target, splits.train, splits.heldout, cfg.target, [&](const train::TargetLog& l) {
    jl << l.to_json() << "\n";
    if (l.accuracy >= 0) {
      log << "target step " << l.step << " loss " << l.loss << " heldout accuracy " << l.accuracy << " ("
          << seconds_since(t0) << " s)\n";
    }
  });
  const double train_seconds = seconds_since(t0);
  save_checkpoint(path, target.to_checkpoint());
  write_file(key_path(path), hex(cfg.target_key()) + "\n");
  const double acc = train::greedy_accuracy(target, splits.heldout);
  write_meta(path, Json{{"seconds", train_seconds},
                        {"steps", history.empty() ? 0 : history.back().step},
                        {"heldout_accuracy", acc}});
  res.report.add(Json{{"command", "train-target"},
                      {"steps", history.empty() ? 0 : history.back().step},
                      {"final_loss", history.empty() ? 0.0 : history.back().loss},
                      {"heldout_accuracy", acc},
                      {"seconds", seconds_since(t0)},
                      {"reused", false}});
  log << "target: heldout greedy accuracy " << acc << " -> " << path << "\n";
  if (acc < cfg.target.stop_accuracy) {
    log << "target: accuracy below target.stop_accuracy " << cfg.target.stop_accuracy << "\n";
    res.status = kThreshold;
  }
  res.report.write(cfg.report_dir("train-target"));
  return res;
}

Outcome cmd_calibrate(const RunConfig& cfg, const Options& opt) {
  cfg.validate();
  auto& log = out(opt);
  const TargetModel target = load_target(cfg);
  const auto data = draft_set(cfg, make_splits(cfg));
  entropy::CalibrationMap m;
  const bool cached = opt.reuse && entropy::read_cache(cfg.calibration_path(), entropy::model_fingerprint(target), m) &&
                      std::all_of(data.begin(), data.end(), [&](const auto& s) { return m.count(s.seed) != 0; });
  if (!cached) {
    const auto t0 = std::chrono::steady_clock::now();
    fs::remove(cfg.calibration_path());
    m = entropy::calibrate(data, target, cfg.calibration_path());
    write_meta(cfg.calibration_path(), Json{{"seconds", seconds_since(t0)}, {"samples", data.size()}});
  }
  std::vector<int> counts(static_cast<std::size_t>(cfg.model.target_layers), 0);
  for (const auto& s : data) ++counts[static_cast<std::size_t>(m.at(s.seed))];
  Outcome res;
  for (std::size_t l = 0; l < counts.size(); ++l) {
    res.report.add(Json{{"command", "calibrate"}, {"layer", l}, {"samples", counts[l]}});
  }
  log << "calibrate: " << data.size() << " samples, layer histogram " << Json(counts).dump() << " -> "
      << cfg.calibration_path() << "\n";
  res.report.write(cfg.report_dir("calibrate"));
  return res;
}

Outcome cmd_train_draft(const RunConfig& cfg, const Options& opt) {
  cfg.validate();
  auto& log = out(opt);
  const TargetModel target = load_target(cfg);
  const auto calib = load_calibration(cfg, target);
  const auto path = cfg.draft_path();
  Outcome res;
  if (opt.reuse && artifact_current(path, cfg.draft_key())) {
    log << "draft: reusing " << path << "\n";
    res.report.add(Json{{"command", "train-draft"}, {"checkpoint", path}, {"reused", true}});
    return res;
  }
  train::SampleOptions so;
  so.keep_fraction = cfg.decode.keep_fraction;
  so.vtc = cfg.decode.vtc;
  so.strategy = train::parse_strategy(cfg.layer_strategy);
  so.static_layer = train::static_layer_for(cfg.model.target_layers, cfg.static_fraction);
  const auto raw = draft_set(cfg, make_splits(cfg));
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<train::TrainingSample> samples;
  samples.reserve(raw.size());
  for (const auto& r : raw) samples.push_back(train::build_training_sample(r, target, calib, so));
  log << "draft: " << samples.size() << " training samples (" << seconds_since(t0) << " s)\n";

  DraftModel draft = init_draft(target, cfg.arch, cfg.draft.seed);
  train::DraftHyper hp = cfg.draft;
  hp.weights = cfg.loss;
  if (hp.checkpoint_every > 0) hp.checkpoint_path = path + ".partial";
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream jl(path + ".log.jsonl");
  const int every = std::max(1, hp.steps / 10);
  const auto history = train::train_draft(draft, samples, hp, [&](const train::StepLog& l) {
    jl << l.to_json() << "\n";
    if (l.step % every == 0) {
      log << "draft step " << l.step << " loss " << l.loss_total << " (feat " << l.loss_feat << ", intermed "
          << l.loss_intermed << ", kl " << l.loss_kl << ") " << seconds_since(t0) << " s\n";
    }
  });
  save_checkpoint(path, draft.to_checkpoint());
  write_file(key_path(path), hex(cfg.draft_key()) + "\n");
  write_meta(path, Json{{"seconds", seconds_since(t0)}, {"steps", hp.steps}, {"samples", samples.size()}});
  if (!hp.checkpoint_path.empty()) fs::remove(hp.checkpoint_path);
  const auto& last = history.empty() ? train::StepLog{} : history.back();
  res.report.add(Json{{"command", "train-draft"},
                      {"checkpoint", path},
                      {"steps", last.step},
                      {"loss_total", last.loss_total},
                      {"loss_feat", last.loss_feat},
                      {"loss_intermed", last.loss_intermed},
                      {"loss_kl", last.loss_kl},
                      {"seconds", seconds_since(t0)},
                      {"reused", false}});
  log << "draft: -> " << path << "\n";
  res.report.write(cfg.report_dir("train-draft"));
  return res;
}

Json BenchRow::to_json() const {
  return Json{{"config", config},
              {"mode", spec::mode_name(mode)},
              {"temperature", temperature},
              {"seed", seed},
              {"prompts", prompts},
              {"tau", tau},
              {"speedup", speedup()},
              {"ar_seconds_per_token", ar_seconds_per_token},
              {"sd_seconds_per_token", sd_seconds_per_token},
              {"ar_flops_per_token", ar_flops_per_token},
              {"sd_flops_per_token", sd_flops_per_token},
              {"flop_speedup", flop_speedup()},
              {"greedy_matches", greedy_matches},
              {"histogram", histogram_json(histogram)}};
}

BenchRow measure(const TargetModel& target, const DraftModel* draft, const std::vector<task::TaskSample>& prompts,
                 const spec::DecodeConfig& decode, std::uint64_t seed, const std::string& config_id) {
  BenchRow row;
  row.config = config_id;
  row.mode = decode.mode;
  row.temperature = decode.temperature;
  row.seed = seed;
  row.prompts = static_cast<int>(prompts.size());
  double ar_time = 0, sd_time = 0, ar_flops = 0, sd_flops = 0;
  long ar_tokens = 0, sd_tokens = 0, ar_all = 0, sd_all = 0;
  long commits = 0, rounds = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto prompt = task::prompt_sequence(prompts[i]);
    RandomSampler s1(mix_seed(seed, i));
    const auto ar = spec::ar_baseline(target, prompt, decode, s1);
    RandomSampler s2(mix_seed(seed, i));
    const auto sd = spec::decode(target, draft, prompt, decode, s2);
    // Timed loops exclude the token sampled from the prefill logits.
    ar_time += ar.wall_seconds;
    ar_tokens += static_cast<long>(ar.tokens.size()) - 1;
    sd_time += sd.metrics.wall_seconds;
    sd_tokens += sd.metrics.generated - 1;
    ar_flops += static_cast<double>(ar.flops);
    sd_flops += static_cast<double>(sd.metrics.target_flops + sd.metrics.draft_flops);
    ar_all += static_cast<long>(ar.tokens.size());
    sd_all += sd.metrics.generated;
    for (int c : sd.metrics.commits) commits += c;
    rounds += static_cast<long>(sd.metrics.commits.size());
    if (row.histogram.size() < sd.metrics.histogram.size()) row.histogram.resize(sd.metrics.histogram.size(), 0);
    for (std::size_t a = 0; a < sd.metrics.histogram.size(); ++a) row.histogram[a] += sd.metrics.histogram[a];
    row.greedy_matches += sd.tokens == ar.tokens;
  }
  row.tau = rounds ? static_cast<double>(commits) / static_cast<double>(rounds) : 0.0;
  row.ar_seconds_per_token = ar_tokens ? ar_time / static_cast<double>(ar_tokens) : 0.0;
  row.sd_seconds_per_token = sd_tokens ? sd_time / static_cast<double>(sd_tokens) : 0.0;
  row.ar_flops_per_token = ar_all ? ar_flops / static_cast<double>(ar_all) : 0.0;
  row.sd_flops_per_token = sd_all ? sd_flops / static_cast<double>(sd_all) : 0.0;
  return row;
}

Outcome cmd_bench(const RunConfig& cfg, const Options& opt) {
  cfg.validate();
  auto& log = out(opt);
  const TargetModel target = load_target(cfg);
  const DraftModel draft = load_draft(cfg, target);
  const auto prompts = first_n(make_splits(cfg).test, cfg.bench.prompts);
  std::vector<spec::Mode> modes{cfg.decode.mode};
  if (cfg.bench.sweep_modes) modes = {spec::Mode::kChain, spec::Mode::kTree};
  Outcome res;
  for (double temp : cfg.bench.temperatures) {
    for (spec::Mode mode : modes) {
      spec::DecodeConfig dc = cfg.decode;
      dc.temperature = temp;
      dc.mode = mode;
      BenchRow mean;
      std::vector<BenchRow> per_seed;
      for (int s = 0; s < cfg.bench.seeds; ++s) {
        const std::uint64_t seed = mix_seed(cfg.decode.seed, static_cast<std::uint64_t>(s));
        auto row = measure(target, &draft, prompts, dc, seed, "dream");
        Json j = row.to_json();
        j["run"] = s;
        j["lossless"] = temp == 0.0 ? Json(row.greedy_matches == row.prompts) : Json();
        if (temp == 0.0 && row.greedy_matches != row.prompts) res.status = kThreshold;
        log << "bench " << spec::mode_name(mode) << " T=" << temp << " run " << s << ": tau " << row.tau << " S "
            << row.speedup() << "\n";
        res.report.add(std::move(j));
        per_seed.push_back(std::move(row));
      }
      mean = per_seed.front();
      mean.tau = mean.ar_seconds_per_token = mean.sd_seconds_per_token = 0;
      mean.ar_flops_per_token = mean.sd_flops_per_token = 0;
      mean.prompts = mean.greedy_matches = 0;
      std::fill(mean.histogram.begin(), mean.histogram.end(), 0);
      for (const auto& r : per_seed) {
        mean.prompts += r.prompts;
        mean.greedy_matches += r.greedy_matches;
        mean.histogram.resize(std::max(mean.histogram.size(), r.histogram.size()), 0);
        for (std::size_t i = 0; i < r.histogram.size(); ++i) mean.histogram[i] += r.histogram[i];
        const double w = 1.0 / static_cast<double>(per_seed.size());
        mean.tau += w * r.tau;
        mean.ar_seconds_per_token += w * r.ar_seconds_per_token;
        mean.sd_seconds_per_token += w * r.sd_seconds_per_token;
        mean.ar_flops_per_token += w * r.ar_flops_per_token;
        mean.sd_flops_per_token += w * r.sd_flops_per_token;
      }
      Json j = mean.to_json();
      j["seed"] = cfg.decode.seed;
      j["run"] = "mean";
      res.report.add(std::move(j));
    }
  }
  res.report.write(cfg.report_dir("bench"));
  return res;
}

namespace {

ModelConfig tiny_verify_config(std::uint64_t seed) {
  ModelConfig c;
  c.vocab_size = 4;
  c.d_model = 8;
  c.n_heads = 2;
  c.target_layers = 4;
  c.max_seq_len = 80;
  c.grid_h = 2;
  c.grid_w = 2;
  c.seed = seed;
  c.init_std = 0.3;
  return c;
}

TokenSequence random_prompt(SplitMix64& rng, int vocab) {
  TokenSequence s;
  s.push(static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab))), Modality::kText);
  for (int i = 0; i < 4; ++i) s.push(static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab))), Modality::kVisual);
  s.push(static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab))), Modality::kText);
  return s;
}

std::map<std::vector<int>, double> exact_target(const TargetModel& t, const TokenSequence& p,
                                                const spec::DecodeConfig& dc) {
  return EnumerationSampler::enumerate([&](Sampler& s) { return spec::ar_baseline(t, p, dc, s).tokens; });
}

double per_position_tv(const std::map<std::vector<int>, double>& a, const std::map<std::vector<int>, double>& b,
                       int len, int vocab) {
  double worst = 0.0;
  for (int pos = 0; pos < len; ++pos) {
    std::vector<double> x(static_cast<std::size_t>(vocab), 0.0), y(static_cast<std::size_t>(vocab), 0.0);
    for (const auto& [k, v] : a) x[static_cast<std::size_t>(k[static_cast<std::size_t>(pos)])] += v;
    for (const auto& [k, v] : b) y[static_cast<std::size_t>(k[static_cast<std::size_t>(pos)])] += v;
    worst = std::max(worst, total_variation(x, y));
  }
  return worst;
}

}  // namespace

Outcome cmd_verify_lossless(const RunConfig& cfg, const Options& opt) {
  cfg.validate();
  auto& log = out(opt);
  Outcome res;
  const ModelConfig mc = tiny_verify_config(cfg.verify.seed);
  const ModelPair models = init_models(mc);
  const TargetModel& target = models.target;
  const DraftModel& draft = models.draft;
  SplitMix64 prng(mix_seed(cfg.verify.seed, 1));
  const TokenSequence prompt = random_prompt(prng, mc.vocab_size);

  spec::DecodeConfig base;
  base.temperature = 1.0;
  base.max_new_tokens = 3;
  base.stop_at_eos = false;
  base.seed = cfg.verify.seed;
  const auto exact = exact_target(target, prompt, base);

  // Exact enumeration of chain decoding.
  for (double kf : {1.0, 0.5}) {
    spec::DecodeConfig dc = base;
    dc.mode = spec::Mode::kChain;
    dc.gamma = 2;
    dc.keep_fraction = kf;
    const auto t0 = std::chrono::steady_clock::now();
    const auto sd = EnumerationSampler::enumerate([&](Sampler& s) { return spec::decode(target, &draft, prompt, dc, s).tokens; });
    const double tv = total_variation(sd, exact);
    const bool pass = tv < cfg.verify.enum_tolerance;
    if (!pass) res.status = kThreshold;
    res.report.add(Json{{"check", "chain_enumeration"},
                        {"keep_fraction", kf},
                        {"outcomes", sd.size()},
                        {"tv", tv},
                        {"threshold", cfg.verify.enum_tolerance},
                        {"seconds", seconds_since(t0)},
                        {"pass", pass}});
    log << "verify: chain enumeration kf=" << kf << " TV " << tv << (pass ? " PASS" : " FAIL") << "\n";
  }

  // Monte Carlo of tree decoding.
  {
    spec::DecodeConfig dc = base;
    dc.mode = spec::Mode::kTree;
    dc.k = 2;
    dc.depth = 2;
    dc.max_draft_tokens = 8;
    const int n = cfg.verify.mc_samples;
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::vector<int>> outputs(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(dynamic, 256) num_threads(trial_threads())
    for (int i = 0; i < n; ++i) {
      RandomSampler s(mix_seed(cfg.verify.seed ^ 0x7EE, static_cast<std::uint64_t>(i)));
      outputs[static_cast<std::size_t>(i)] = spec::decode(target, &draft, prompt, dc, s).tokens;
    }
    std::map<std::vector<int>, double> emp;
    for (const auto& o : outputs) emp[o] += 1.0 / n;
    const double tv = per_position_tv(emp, exact, base.max_new_tokens, mc.vocab_size);
    const double joint = total_variation(emp, exact);
    const bool pass = tv < cfg.verify.mc_tolerance;
    if (!pass) res.status = kThreshold;
    res.report.add(Json{{"check", "tree_monte_carlo"},
                        {"samples", n},
                        {"tv", tv},
                        {"joint_tv", joint},
                        {"threshold", cfg.verify.mc_tolerance},
                        {"seconds", seconds_since(t0)},
                        {"pass", pass}});
    log << "verify: tree Monte Carlo N=" << n << " per-position TV " << tv << " (joint " << joint << ")"
        << (pass ? " PASS" : " FAIL") << "\n";
  }

  // Greedy equality on random prompts.
  {
    spec::DecodeConfig dc = base;
    dc.temperature = 0.0;
    dc.max_new_tokens = 16;
    int total = 0, matches = 0;
    SplitMix64 rng(mix_seed(cfg.verify.seed, 2));
    for (int p = 0; p < cfg.verify.greedy_prompts; ++p) {
      const auto pr = random_prompt(rng, mc.vocab_size);
      const auto ref = spec::ar_baseline(target, pr, dc).tokens;
      for (spec::Mode m : {spec::Mode::kChain, spec::Mode::kTree}) {
        for (double kf : {1.0, 0.75}) {
          dc.mode = m;
          dc.keep_fraction = kf;
          ++total;
          matches += spec::decode(target, &draft, pr, dc).tokens == ref;
        }
      }
    }
    const bool pass = matches == total;
    if (!pass) res.status = kThreshold;
    res.report.add(Json{{"check", "greedy_equality"}, {"runs", total}, {"matches", matches}, {"pass", pass}});
    log << "verify: greedy equality " << matches << "/" << total << (pass ? " PASS" : " FAIL") << "\n";
  }
  res.report.write(cfg.report_dir("verify-lossless"));
  return res;
}

FlopProfile profile_prompt(const TargetModel& target, const TokenSequence& prompt, int new_tokens) {
  TokenSequence text;
  for (std::size_t i = 0; i < prompt.size(); ++i)
    if (prompt.tags[i] != Modality::kVisual) text.push(prompt.ids[i], prompt.tags[i]);
  spec::DecodeConfig dc;
  dc.temperature = 0.0;
  dc.max_new_tokens = new_tokens;
  dc.stop_at_eos = false;
  FlopProfile p;
  p.multimodal = spec::ar_baseline(target, prompt, dc).flops;
  p.text_only = spec::ar_baseline(target, text, dc).flops;
  return p;
}

Outcome cmd_profile_flops(const RunConfig& cfg, const Options& opt) {
  cfg.validate();
  auto& log = out(opt);
  const TargetModel target = load_target(cfg);
  Outcome res;
  for (int g : cfg.profile.grids) {
    ModelConfig mc = cfg.model;
    mc.grid_h = mc.grid_w = g;
    double mm = 0, text = 0;
    for (int i = 0; i < cfg.profile.prompts; ++i) {
      const auto s = task::gen_sample(mix_seed(cfg.data.seed ^ 0xF10B, static_cast<std::uint64_t>(i)), mc);
      const auto p = profile_prompt(target, task::prompt_sequence(s), cfg.profile.new_tokens);
      mm += static_cast<double>(p.multimodal);
      text += static_cast<double>(p.text_only);
    }
    const double ratio = mm / text;
    res.report.add(Json{{"grid", std::to_string(g) + "x" + std::to_string(g)},
                        {"visual_tokens", g * g},
                        {"new_tokens", cfg.profile.new_tokens},
                        {"multimodal_flops", mm / cfg.profile.prompts},
                        {"text_only_flops", text / cfg.profile.prompts},
                        {"ratio", ratio}});
    log << "profile: grid " << g << "x" << g << " FLOP ratio " << ratio << "\n";
  }
  res.report.write(cfg.report_dir("profile-flops"));
  return res;
}

std::vector<AblationVariant> ablation_variants(const RunConfig& base) {
  RunConfig b = base;
  if (b.ablate.draft_steps > 0) b.draft.steps = b.ablate.draft_steps;
  std::vector<AblationVariant> v;
  auto add = [&](std::string name, std::string group, const std::function<void(RunConfig&)>& edit) {
    RunConfig c = b;
    edit(c);
    v.push_back({std::move(name), std::move(group), std::move(c)});
  };
  add("full", "base", [](RunConfig&) {});
  if (b.ablate.arch) {
    add("no_initial", "arch", [](RunConfig& c) { c.arch.initial_block = false; });
    add("no_ca", "arch", [](RunConfig& c) { c.arch.cross_blocks = 0; });
    add("no_final", "arch", [](RunConfig& c) { c.arch.final_block = false; });
    add("two_ca", "arch", [](RunConfig& c) { c.arch.cross_blocks = 2; });
  }
  if (b.ablate.layer) {
    add("no_mid", "layer", [](RunConfig& c) { c.loss.intermed = 0.0; });
    for (double f : {0.25, 0.5, 0.75}) {
      add("static_" + std::to_string(static_cast<int>(f * 100)), "layer", [f](RunConfig& c) {
        c.layer_strategy = "static";
        c.static_fraction = f;
      });
    }
    add("dyn_ent", "layer", [](RunConfig& c) { c.layer_strategy = "dynamic"; });
  }
  if (b.ablate.keep) {
    for (double kf : {1.0, 0.75, 0.5, 0.25}) {
      add("keep_" + fmt_double(kf), "keep", [kf](RunConfig& c) { c.decode.keep_fraction = kf; });
    }
  }
  if (b.ablate.lambda) {
    for (double l : {0.05, 0.1, 0.2, 0.4}) {
      add("lambda_" + fmt_double(l), "lambda", [l](RunConfig& c) { c.loss.feat = c.loss.intermed = l; });
    }
  }
  if (b.ablate.modes) {
    add("chain", "mode", [](RunConfig& c) { c.decode.mode = spec::Mode::kChain; });
    add("tree", "mode", [](RunConfig& c) { c.decode.mode = spec::Mode::kTree; });
  }
  return v;
}

Outcome cmd_ablate(const RunConfig& cfg, const Options& opt) {
  cfg.validate();
  auto& log = out(opt);
  const TargetModel target = load_target(cfg);
  load_calibration(cfg, target);
  const auto prompts = first_n(make_splits(cfg).test, cfg.ablate.prompts);
  Options inner = opt;
  inner.reuse = true;
  Outcome res;
  std::vector<std::pair<AblationVariant, BenchRow>> rows;
  for (const auto& var : ablation_variants(cfg)) {
    cmd_train_draft(var.config, inner);
    const DraftModel draft = load_draft(var.config, target);
    spec::DecodeConfig dc = var.config.decode;
    dc.temperature = 0.0;
    auto row = measure(target, &draft, prompts, dc, cfg.decode.seed, var.name);
    log << "ablate " << var.name << ": tau " << row.tau << " S " << row.speedup() << "\n";
    rows.emplace_back(var, std::move(row));
  }
  const BenchRow& full = rows.front().second;
  for (const auto& [var, row] : rows) {
    Json j = row.to_json();
    j["variant"] = var.name;
    j["group"] = var.group;
    j["draft_steps"] = var.config.draft.steps;
    j["normalized_tau"] = row.tau / full.tau;
    j["normalized_speedup"] = row.speedup() / full.speedup();
    res.report.add(std::move(j));
  }
  res.report.write(cfg.report_dir("ablate"));
  return res;
}

Outcome cmd_export_dataset(const RunConfig& cfg, const Options& opt) {
  cfg.validate();
  auto& log = out(opt);
  const auto sp = make_splits(cfg);
  const auto dir = fs::path(cfg.report_dir("export-dataset"));
  fs::create_directories(dir);
  Outcome res;
  for (const auto& [name, set] : {std::pair{"train", &sp.train}, {"heldout", &sp.heldout}, {"test", &sp.test}}) {
    const auto path = (dir / (std::string(name) + ".tsv")).string();
    task::write_tsv(path, *set);
    res.report.add(Json{{"split", name}, {"samples", set->size()}, {"path", path}});
    log << "export: " << set->size() << " " << name << " samples -> " << path << "\n";
  }
  res.report.write(dir.string());
  return res;
}

}  // namespace dream::harness
