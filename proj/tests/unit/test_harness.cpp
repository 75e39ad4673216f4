#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "dream/errors.hpp"
#include "dream/harness.hpp"

using namespace dream;
using namespace dream::harness;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run(const std::string& dir) {
  RunConfig c;
  c.out_dir = dir;
  c.model.d_model = 16;
  c.model.n_heads = 2;
  c.model.target_layers = 4;
  c.model.grid_h = c.model.grid_w = 3;
  c.model.max_seq_len = 96;
  c.model.init_std = 0.3;
  c.data.train = 40;
  c.data.heldout = 8;
  c.data.test = 4;
  c.target.steps = 20;
  c.target.eval_every = 10;
  c.draft.steps = 10;
  c.draft_samples = 16;
  c.bench.prompts = 3;
  c.bench.seeds = 2;
  c.profile.grids = {1, 2, 3};
  c.profile.prompts = 2;
  c.profile.new_tokens = 8;
  c.ablate.prompts = 2;
  c.verify.mc_samples = 2000;
  c.verify.greedy_prompts = 5;
  return c;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream o;
  o << in.rdbuf();
  return o.str();
}

// Minimal RFC 4180 reader.
std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows(1);
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        cell += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cell += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      rows.back().push_back(cell);
      cell.clear();
    } else if (ch == '\n') {
      rows.back().push_back(cell);
      cell.clear();
      rows.emplace_back();
    } else {
      cell += ch;
    }
  }
  if (rows.back().empty()) rows.pop_back();
  return rows;
}

// CSV and JSON lines carry the same values.
void expect_same_content(const Report& r) {
  const auto csv = parse_csv(r.to_csv());
  std::vector<Json> json;
  std::istringstream in(r.to_jsonl());
  for (std::string line; std::getline(in, line);) json.push_back(Json::parse(line));
  ASSERT_EQ(csv.size(), json.size() + 1);
  const auto& header = csv[0];
  for (std::size_t i = 0; i < json.size(); ++i) {
    ASSERT_EQ(csv[i + 1].size(), header.size());
    for (std::size_t c = 0; c < header.size(); ++c) {
      const std::string& cell = csv[i + 1][c];
      if (!json[i].contains(header[c])) {
        EXPECT_EQ(cell, "");
        continue;
      }
      const Json& v = json[i][header[c]];
      if (v.is_number()) {
        EXPECT_EQ(std::stod(cell), v.get<double>()) << header[c];
      } else if (v.is_string()) {
        EXPECT_EQ(cell, v.get<std::string>());
      } else if (v.is_boolean()) {
        EXPECT_EQ(cell, v.get<bool>() ? "true" : "false");
      } else if (v.is_array()) {
        std::string joined;
        for (std::size_t k = 0; k < v.size(); ++k) joined += (k ? ";" : "") + v[k].dump();
        EXPECT_EQ(cell, joined);
      } else if (v.is_null()) {
        EXPECT_EQ(cell, "");
      }
    }
  }
}

class Pipeline : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::path(::testing::TempDir()) / ("dream_pipeline_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

}  // namespace

TEST(RunConfig, TextRoundTrip) {
  RunConfig c;
  c.model.d_model = 48;
  c.decode.mode = spec::Mode::kChain;
  c.bench.temperatures = {0.0, 0.5, 1.0};
  c.loss.feat = 0.05;
  const auto again = RunConfig::parse(c.to_text());
  EXPECT_EQ(again.to_text(), c.to_text());
  EXPECT_EQ(again.get("model.d_model"), "48");
  EXPECT_EQ(again.get("bench.temperatures"), "0,0.5,1");
  EXPECT_EQ(again.get("decode.mode"), "chain");
  const auto text = c.to_text();
  EXPECT_EQ(RunConfig::keys().size(), static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')));
}

TEST(RunConfig, SectionsCommentsAndOverrides) {
  const auto c = RunConfig::parse(
      "# comment\n"
      "decode.gamma = 3\n"
      "[model]\n"
      "d_model = 16   # inline\n"
      "n_heads = 2\n"
      "[loss]\n"
      "kl = 0.5\n");
  EXPECT_EQ(c.decode.gamma, 3);
  EXPECT_EQ(c.model.d_model, 16);
  EXPECT_EQ(c.model.n_heads, 2);
  EXPECT_EQ(c.loss.kl, 0.5);
  RunConfig d = c;
  d.apply_overrides({"loss.kl=2", "decode.vtc = false"});
  EXPECT_EQ(d.loss.kl, 2.0);
  EXPECT_FALSE(d.decode.vtc);
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(RunConfig::parse("model.depth = 3\n"), ValidationError);
  EXPECT_THROW(RunConfig::parse("[model]\nlayers = 3\n"), ValidationError);
  EXPECT_THROW(RunConfig::parse("model.d_model = abc\n"), ValidationError);
  EXPECT_THROW(RunConfig::parse("decode.vtc = maybe\n"), ValidationError);
  EXPECT_THROW(RunConfig::parse("decode.mode = star\n"), ValidationError);
  EXPECT_THROW(RunConfig::parse("just a line\n"), ValidationError);
  RunConfig c;
  EXPECT_THROW(c.apply_overrides({"nokey"}), ValidationError);
  c.set("layer.strategy", "middle");
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(RunConfig, ArtifactKeysTrackTheirInputs) {
  RunConfig a;
  RunConfig b = a;
  b.bench.seeds = 7;
  b.decode.temperature = 1.0;
  EXPECT_EQ(a.target_key(), b.target_key());
  EXPECT_EQ(a.draft_key(), b.draft_key());
  b.loss.feat = 0.4;
  EXPECT_EQ(a.target_key(), b.target_key());
  EXPECT_NE(a.draft_key(), b.draft_key());
  RunConfig c = a;
  c.target.steps = 10;
  EXPECT_NE(a.target_key(), c.target_key());
  EXPECT_NE(a.draft_key(), c.draft_key());
  RunConfig d = a;
  d.decode.keep_fraction = 0.5;
  EXPECT_NE(a.draft_key(), d.draft_key());
}

TEST(Splits, DisjointAndStratified) {
  RunConfig c;
  c.data.train = 400;
  c.data.heldout = 40;
  c.data.test = 40;
  const auto s = make_splits(c);
  std::set<std::uint64_t> train;
  for (const auto& x : s.train) train.insert(task::sample_hash(x));
  std::set<std::uint64_t> other;
  for (const auto* set : {&s.heldout, &s.test}) {
    ASSERT_EQ(set->size(), 40u);
    int per_kind[task::kQueryKinds] = {};
    for (const auto& x : *set) {
      EXPECT_EQ(train.count(task::sample_hash(x)), 0u);
      EXPECT_TRUE(other.insert(task::sample_hash(x)).second);
      ++per_kind[x.query[0] - task::kColorAt];
    }
    for (int k : per_kind) EXPECT_EQ(k, 10);
  }
  EXPECT_EQ(make_splits(c).test.front().seed, s.test.front().seed);
}

TEST(Report, CsvAndJsonAgree) {
  Report r;
  r.add(Json{{"a", 1}, {"b", 0.1}, {"name", "x,y"}, {"hist", {1, 2, 3}}});
  r.add(Json{{"a", 2}, {"flag", true}, {"name", "quote\"d"}});
  EXPECT_EQ(r.columns(), (std::vector<std::string>{"a", "b", "name", "hist", "flag"}));
  expect_same_content(r);
}

TEST(Bench, SpeedupRecomputesFromStoredTimings) {
  BenchRow row;
  row.ar_seconds_per_token = 0.0031;
  row.sd_seconds_per_token = 0.0017;
  row.ar_flops_per_token = 1e6;
  row.sd_flops_per_token = 4e5;
  const Json j = Json::parse(row.to_json().dump());
  EXPECT_NEAR(j["speedup"].get<double>(),
              j["ar_seconds_per_token"].get<double>() / j["sd_seconds_per_token"].get<double>(), 1e-9);
  EXPECT_NEAR(j["flop_speedup"].get<double>(), 2.5, 1e-12);
}

TEST(Profile, NoVisualTokensGivesUnitRatio) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.target_layers = 4;
  const auto m = init_models(c);
  TokenSequence text;
  for (int t : {0, 21, 14, 16, 2}) text.push(t, Modality::kText);
  const auto p = profile_prompt(m.target, text, 8);
  EXPECT_EQ(p.multimodal, p.text_only);
  EXPECT_EQ(p.ratio(), 1.0);
  const auto q = profile_prompt(m.target, task::prompt_sequence(task::gen_sample(3, c)), 8);
  EXPECT_GT(q.ratio(), 1.0);
}

TEST(Ablation, VariantList) {
  RunConfig c;
  c.ablate.draft_steps = 123;
  const auto v = ablation_variants(c);
  std::vector<std::string> names;
  std::map<std::string, int> groups;
  for (const auto& x : v) {
    names.push_back(x.name);
    ++groups[x.group];
    EXPECT_EQ(x.config.draft.steps, 123);
  }
  EXPECT_EQ(names.front(), "full");
  EXPECT_EQ(groups["arch"], 4);
  EXPECT_EQ(groups["layer"], 5);
  EXPECT_EQ(groups["keep"], 4);
  EXPECT_EQ(groups["lambda"], 4);
  EXPECT_EQ(groups["mode"], 2);
  const auto find = [&](const std::string& n) {
    return *std::find_if(v.begin(), v.end(), [&](const auto& x) { return x.name == n; });
  };
  EXPECT_EQ(find("no_ca").config.arch.cross_blocks, 0);
  EXPECT_EQ(find("two_ca").config.arch.cross_blocks, 2);
  EXPECT_EQ(find("no_mid").config.loss.intermed, 0.0);
  EXPECT_EQ(find("static_25").config.static_fraction, 0.25);
  EXPECT_EQ(find("lambda_0.05").config.loss.feat, 0.05);
  EXPECT_EQ(find("lambda_0.05").config.loss.intermed, 0.05);
  EXPECT_EQ(find("keep_0.25").config.decode.keep_fraction, 0.25);
  // Variants equal to the base configuration share its draft.
  for (const char* same : {"dyn_ent", "keep_0.75", "lambda_0.2", "tree", "chain"}) {
    EXPECT_EQ(find(same).config.draft_key(), v.front().config.draft_key()) << same;
  }
}

TEST(Threads, EnvironmentCap) {
  ::setenv("DREAM_THREADS", "3", 1);
  EXPECT_EQ(trial_threads(), 3);
  ::unsetenv("DREAM_THREADS");
  EXPECT_GE(trial_threads(), 1);
}

TEST_F(Pipeline, OrderingErrorsNameTheMissingCommand) {
  const auto c = tiny_run(dir_.string());
  auto expect_msg = [](auto&& fn, const std::string& needle) {
    try {
      fn();
      ADD_FAILURE() << "expected an error naming " << needle;
    } catch (const Error& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_msg([&] { cmd_calibrate(c); }, "dream train-target");
  expect_msg([&] { cmd_profile_flops(c); }, "dream train-target");
  cmd_train_target(c);
  expect_msg([&] { cmd_train_draft(c); }, "dream calibrate");
  cmd_calibrate(c);
  expect_msg([&] { cmd_bench(c); }, "dream train-draft");
  RunConfig changed = c;
  changed.target.steps = 21;
  expect_msg([&] { cmd_calibrate(changed); }, "dream train-target");
}

TEST_F(Pipeline, EndToEnd) {
  const auto c = tiny_run(dir_.string());
  cmd_train_target(c);
  const auto first = slurp(c.target_path());
  cmd_train_target(c);
  EXPECT_EQ(slurp(c.target_path()), first);

  const auto cal = cmd_calibrate(c);
  EXPECT_EQ(cal.report.rows().size(), static_cast<std::size_t>(c.model.target_layers));

  cmd_train_draft(c);
  const auto draft_bytes = slurp(c.draft_path());
  std::ifstream log(c.draft_path() + ".log.jsonl");
  int lines = 0;
  for (std::string line; std::getline(log, line); ++lines) {
    const auto j = Json::parse(line);
    for (const char* k : {"loss_feat", "loss_intermed", "loss_kl", "loss_total", "grad_norm", "step"}) {
      EXPECT_TRUE(j.contains(k)) << k;
    }
  }
  EXPECT_EQ(lines, c.draft.steps);
  cmd_train_draft(c);
  EXPECT_EQ(slurp(c.draft_path()), draft_bytes);

  const auto bench = cmd_bench(c);
  EXPECT_EQ(bench.status, kOk);
  ASSERT_EQ(bench.report.rows().size(), 2u * 3u);
  for (const auto& row : bench.report.rows()) {
    EXPECT_GE(row["tau"].get<double>(), 1.0);
    EXPECT_NEAR(row["speedup"].get<double>(),
                row["ar_seconds_per_token"].get<double>() / row["sd_seconds_per_token"].get<double>(), 1e-9);
    if (row["temperature"].get<double>() == 0.0 && row["run"] != "mean") {
      EXPECT_TRUE(row["lossless"].get<bool>());
    }
  }
  // The mean row pools prompts, matches and histograms over the seeds.
  int pooled_prompts = 0, pooled_matches = 0;
  for (const auto& row : bench.report.rows()) {
    if (row["run"] != "mean") {
      pooled_prompts += row["prompts"].get<int>();
      pooled_matches += row["greedy_matches"].get<int>();
      continue;
    }
    EXPECT_EQ(row["prompts"].get<int>(), pooled_prompts);
    EXPECT_EQ(row["greedy_matches"].get<int>(), pooled_matches);
    pooled_prompts = pooled_matches = 0;
  }
  expect_same_content(bench.report);
  EXPECT_EQ(slurp((fs::path(c.report_dir("bench")) / "report.json").string()), bench.report.to_jsonl());

  // Rerunning with the stored seed reproduces tau exactly.
  const auto again = cmd_bench(c);
  for (std::size_t i = 0; i < again.report.rows().size(); ++i) {
    EXPECT_EQ(again.report.rows()[i]["tau"], bench.report.rows()[i]["tau"]);
  }

  const auto prof = cmd_profile_flops(c);
  double prev = 1.0;
  for (const auto& row : prof.report.rows()) {
    EXPECT_GT(row["ratio"].get<double>(), prev);
    prev = row["ratio"].get<double>();
  }

  const auto exported = cmd_export_dataset(c);
  EXPECT_EQ(exported.report.rows().size(), 3u);
  EXPECT_TRUE(fs::exists(fs::path(c.report_dir("export-dataset")) / "test.tsv"));
}

TEST_F(Pipeline, AblationNormalizesToFull) {
  auto c = tiny_run(dir_.string());
  c.ablate.layer = c.ablate.keep = c.ablate.lambda = false;
  c.ablate.draft_steps = 4;
  cmd_train_target(c);
  cmd_calibrate(c);
  const auto res = cmd_ablate(c);
  ASSERT_EQ(res.report.rows().size(), 1u + 4u + 2u);
  const auto& full = res.report.rows().front();
  EXPECT_EQ(full["variant"], "full");
  EXPECT_EQ(full["normalized_tau"].get<double>(), 1.0);
  EXPECT_EQ(full["normalized_speedup"].get<double>(), 1.0);
  for (const auto& row : res.report.rows()) {
    EXPECT_EQ(row["draft_steps"].get<int>(), 4);
    EXPECT_EQ(row["greedy_matches"].get<int>(), row["prompts"].get<int>());
  }
}

TEST(VerifyLossless, SmallRunPasses) {
  RunConfig c = tiny_run((fs::path(::testing::TempDir()) / "dream_verify").string());
  c.verify.mc_tolerance = 0.05;
  const auto res = cmd_verify_lossless(c);
  EXPECT_EQ(res.status, kOk);
  ASSERT_EQ(res.report.rows().size(), 4u);
  EXPECT_LT(res.report.rows()[0]["tv"].get<double>(), 1e-12);
  EXPECT_LT(res.report.rows()[1]["tv"].get<double>(), 1e-12);
  EXPECT_EQ(res.report.rows()[3]["matches"], res.report.rows()[3]["runs"]);
  fs::remove_all(c.out_dir);
}
