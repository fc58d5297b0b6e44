// Command-line front end for the experiment pipeline.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "bard/lab.hpp"

namespace {

struct Common {
  std::string config_path;
  std::string preset = "bard";
  std::optional<std::uint64_t> seed;
  std::optional<int> k_budgets;
  std::string out;
  std::string reuse;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out = true) {
  cmd->add_option("--config", c.config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--preset", c.preset, "Preset applied on top of the config")
      ->check(CLI::IsMember(bard::lab::kPresets));
  cmd->add_option("--seed", c.seed, "Global seed (overrides the config)");
  cmd->add_option("--k-budgets", c.k_budgets, "Budgets per trace in the contrastive set");
  if (needs_out) {
    cmd->add_option("--out", c.out, "Run directory")->required();
    cmd->add_option("--reuse", c.reuse, "Copy matching finished stages from this run directory")
        ->check(CLI::ExistingDirectory);
  }
}

bard::lab::ExperimentConfig resolve(const Common& c) {
  auto base = c.config_path.empty() ? bard::lab::ExperimentConfig{} : bard::lab::load_config(c.config_path);
  if (c.seed) base.seed = *c.seed;
  if (c.k_budgets) base.compress.k = *c.k_budgets;
  auto config = bard::lab::apply_preset(base, c.preset);
  config.validate();
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bardlab: budget-conditioned reasoning experiments on the toy task suite"};
  app.require_subcommand(1);

  Common common;
  std::optional<std::string> until;
  std::string data_path, init_path;
  for (const auto& stage : bard::lab::kStages) {
    auto* cmd = app.add_subcommand(stage, fmt::format("Run the pipeline up to the {} stage", stage));
    add_common(cmd, common);
    cmd->callback([&until, stage] { until = stage; });
    if (stage == "sft")
      cmd->add_option("--data", data_path, "Train on this JSONL dataset alone, outside the pipeline")
          ->check(CLI::ExistingFile);
    if (stage == "rl")
      cmd->add_option("--init", init_path, "Run RL alone from this checkpoint, outside the pipeline")
          ->check(CLI::ExistingFile);
  }
  auto* run = app.add_subcommand("run", "Run every stage (resuming from the ledger)");
  add_common(run, common);

  auto* show = app.add_subcommand("config", "Print the resolved config and its hash");
  add_common(show, common, false);

  std::string run_a, run_b, csv_path;
  auto* compare = app.add_subcommand("compare", "Per-budget Acc/Fid/UPS deltas of run B against run A");
  compare->add_option("run_a", run_a, "Baseline run directory")->required()->check(CLI::ExistingDirectory);
  compare->add_option("run_b", run_b, "Compared run directory")->required()->check(CLI::ExistingDirectory);
  compare->add_option("--csv", csv_path, "Also write the comparison as CSV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (compare->parsed()) {
      const auto cmp = bard::lab::compare_runs(run_a, run_b);
      std::cout << bard::lab::to_table(cmp);
      if (!csv_path.empty()) bard::lab::write_text(csv_path, bard::lab::to_csv(cmp));
      return 0;
    }
    const auto config = resolve(common);
    if (show->parsed()) {
      std::cout << bard::lab::to_json(config).dump(2) << "\nconfig_hash " << bard::lab::config_hash(config) << "\n";
      return 0;
    }
    if (!data_path.empty()) {
      const auto report = bard::lab::train_sft_from(config, data_path, common.out);
      std::cout << fmt::format("sft: {} steps, {} sequences -> {}/model.ckpt\n", report.steps,
                               report.train_sequences, common.out);
      return 0;
    }
    if (!init_path.empty()) {
      const auto report = bard::lab::train_rl_from(config, init_path, common.out);
      std::cout << fmt::format("rl: {} steps, {} rollouts -> {}/rl_report.json\n", report.log.size(),
                               report.rollouts, common.out);
      return 0;
    }
    bard::lab::RunOptions options;
    options.until = until;
    if (!common.reuse.empty()) options.reuse_from = common.reuse;
    const auto ledger = bard::lab::run_pipeline(config, common.out, options);
    std::cout << fmt::format("run {} ({} stages) -> {}/ledger.json\n", ledger.run_id, ledger.stages.size(), common.out);
    return 0;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
}
