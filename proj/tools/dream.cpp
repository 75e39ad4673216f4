#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "dream/errors.hpp"
#include "dream/harness.hpp"

using namespace dream;

namespace {

struct Command {
  const char* name;
  const char* help;
  harness::Outcome (*run)(const harness::RunConfig&, const harness::Options&);
};

const Command kCommands[] = {
    {"train-target", "Train the toy target model", harness::cmd_train_target},
    {"calibrate", "Pick the distillation layer for each draft training sample", harness::cmd_calibrate},
    {"train-draft", "Train the draft model against the frozen target", harness::cmd_train_draft},
    {"bench", "Measure acceptance length and speedup against plain decoding", harness::cmd_bench},
    {"verify-lossless", "Check that speculative decoding preserves the target distribution",
     harness::cmd_verify_lossless},
    {"profile-flops", "Compare forward FLOPs with and without visual tokens", harness::cmd_profile_flops},
    {"ablate", "Retrain and measure the ablation variants", harness::cmd_ablate},
    {"export-dataset", "Write the train/heldout/test splits as TSV", harness::cmd_export_dataset},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speculative decoding toolkit for toy multimodal models"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  bool reuse = false;
  bool print_config = false;
  const Command* chosen = nullptr;
  for (const auto& c : kCommands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--set", overrides, "Override one config key (key=value)")->take_all();
    sub->add_flag("--reuse", reuse, "Keep artifacts that already match the config");
    sub->add_flag("--print-config", print_config, "Print the effective config before running");
    sub->callback([&chosen, &c] { chosen = &c; });
  }
  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = harness::RunConfig::load(config_path, overrides);
    if (print_config) std::cout << cfg.to_text() << std::flush;
    harness::Options opt;
    opt.reuse = reuse;
    opt.log = &std::cout;
    const auto outcome = chosen->run(cfg, opt);
    std::cout << "report: " << cfg.report_dir(chosen->name) << "\n";
    return outcome.status;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return harness::kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return harness::kValidation;
  }
}
