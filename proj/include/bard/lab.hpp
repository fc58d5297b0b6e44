#pragma once

// Experiment configuration, presets, the staged pipeline and run comparison.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bard/budgetpress.hpp"
#include "bard/evalkit.hpp"
#include "bard/grpo.hpp"
#include "bard/nanolm.hpp"
#include "bard/sft.hpp"
#include "bard/taskgen.hpp"

namespace bard::lab {

struct TaskSuiteConfig {
  int train_tasks = 500;
  int heldout_tasks = 50;
  int eval_tasks = 100;
  int min_difficulty = 1;
  int max_difficulty = 4;
  taskgen::TaskGenOptions generator;
};

struct CompressConfig {
  int k = 3;
  budgetpress::CompressionPolicy policy;
  int histogram_bucket = 16;
};

// Which stages run and how they are wired; presets toggle these.
struct PipelineConfig {
  bool compress = true;       // build budget-aware records (false: unconditioned traces only)
  bool budget_tokens = true;  // put budgets in SFT prompts
  bool rl = true;
};

struct EvalConfig {
  std::vector<int> budgets{16, 32, 64, 128, 256, 512};
  bool include_unconstrained = true;
  double w = 0.5;
  double budget_scale = 1.0 / 15.625;  // 16 toy tokens per 250 reference tokens
  std::vector<int> probe_in_range{16, 24, 32, 48, 64, 96};
  std::vector<int> probe_out_of_range{160, 256, 384, 512};
  int probe_tasks = 50;
  int behavior_bucket = 1;
};

struct ExperimentConfig {
  std::string preset = "bard";
  std::uint64_t seed = 0;
  TaskSuiteConfig tasks;
  CompressConfig compress;
  PipelineConfig pipeline;
  nanolm::ModelConfig model{4, 4, 128, 512, 1024, static_cast<int>(textcodec::Vocab::standard().size())};
  double init_std = 0.02;
  sft::SftConfig sft;
  grpo::RlConfig rl;
  grpo::RewardConfig reward;
  EvalConfig eval;

  // Throws std::invalid_argument naming the first invalid field.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
// Missing keys keep their defaults; unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

// SHA-256 of the canonical (sorted-key, compact) JSON form.
std::string config_hash(const ExperimentConfig& c);
std::string sha256_hex(const std::string& bytes);

inline const std::vector<std::string> kPresets = {"bard",          "sft-full",  "no-contrastive",
                                                  "additive-reward", "rl-direct", "bard-no-budget"};

// Applies a preset on top of `base` (normally a bard config). Throws
// std::invalid_argument for unknown names.
ExperimentConfig apply_preset(ExperimentConfig base, const std::string& preset);

// JSON pointers a preset may change relative to bard.
std::vector<std::string> preset_fields(const std::string& preset);

// JSON pointers of every leaf that differs between two configs.
std::vector<std::string> config_diff(const ExperimentConfig& a, const ExperimentConfig& b);

// Stage seeds, all derived from the global seed.
std::uint64_t stage_seed(const ExperimentConfig& c, std::string_view stage);

// ---- artifacts ----

struct TaskSuites {
  std::vector<budgetpress::TracedTask> train;
  std::vector<taskgen::Task> heldout;
  std::vector<taskgen::Task> eval;
};

TaskSuites generate_suites(const ExperimentConfig& c);

// Budget-aware and/or unconditioned SFT records as the pipeline config asks.
budgetpress::Dataset build_sft_dataset(const ExperimentConfig& c, std::span<const budgetpress::TracedTask> train);

struct ProbeResult {
  double r_in_range = 0.0;
  double r_out_of_range = 0.0;
  evalkit::EvalReport in_range;
  evalkit::EvalReport out_of_range;
};

// Greedy probe sweep over the configured in-range and out-of-range budgets.
ProbeResult probe_sweep(const nanolm::ParameterStore& params, std::span<const taskgen::Task> tasks,
                        const EvalConfig& eval, bool budget_in_prompt = true);

nlohmann::json to_json(const ProbeResult& p);

// Pearson r(budget, think_len) over the budgeted samples of a report.
double budget_length_r(const evalkit::EvalReport& report);

struct StageRecord {
  std::string stage_hash;
  std::map<std::string, std::string> artifacts;  // name -> path relative to the run root
  double wall_seconds = 0.0;
};

struct RunLedger {
  std::string run_id;
  std::string preset;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::map<std::string, StageRecord> stages;  // keyed by stage name

  bool complete(const std::string& stage) const { return stages.count(stage) > 0; }
};

nlohmann::json to_json(const RunLedger& l);
RunLedger ledger_from_json(const nlohmann::json& j);
RunLedger load_ledger(const std::filesystem::path& run_dir);

inline const std::vector<std::string> kStages = {"gen-data", "compress", "sft", "rl", "eval"};

struct RunOptions {
  // Copy finished stages with matching stage hashes from another run.
  std::optional<std::filesystem::path> reuse_from;
  // Stop after this stage (inclusive).
  std::optional<std::string> until;
};

// gen-data -> compress -> sft -> rl -> eval under out_dir, with the ledger at
// out_dir/ledger.json. Stages already recorded with the same stage hash are
// skipped, so rerunning after a failure resumes where it stopped.
RunLedger run_pipeline(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                       const RunOptions& options = {});

// Standalone trainers, outside the staged pipeline. Both write their reports into out_dir.
sft::SftReport train_sft_from(const ExperimentConfig& config, const std::filesystem::path& data,
                              const std::filesystem::path& out_dir);
// RL trains on the config's train suite, starting from a checkpoint.
grpo::RlReport train_rl_from(const ExperimentConfig& config, const std::filesystem::path& init,
                             const std::filesystem::path& out_dir);

// ---- comparison ----

struct ComparisonRow {
  std::optional<int> budget;
  double acc_a = 0.0, acc_b = 0.0;
  std::optional<double> fid_a, fid_b, ups_a, ups_b;

  double d_acc() const { return acc_b - acc_a; }
  std::optional<double> d_fid() const;
  std::optional<double> d_ups() const;
};

struct Comparison {
  std::vector<ComparisonRow> rows;
  double mean_ups_a = 0.0, mean_ups_b = 0.0;

  double d_mean_ups() const { return mean_ups_b - mean_ups_a; }
};

// Per-budget deltas (b - a). Throws std::invalid_argument listing the
// budgets present in only one report.
Comparison compare_reports(const evalkit::EvalReport& a, const evalkit::EvalReport& b);

// Compares the final eval reports recorded in two run directories.
Comparison compare_runs(const std::filesystem::path& run_a, const std::filesystem::path& run_b);

std::string to_csv(const Comparison& c);
std::string to_table(const Comparison& c);

// Reads a run's final (or SFT-stage) eval report.
evalkit::EvalReport load_eval_report(const std::filesystem::path& run_dir, const std::string& which = "final");

// Small file helpers shared by the stages and the CLI.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);
template <class T>
void write_jsonl(const std::filesystem::path& path, const std::vector<T>& items);
template <class T>
std::vector<T> read_jsonl(const std::filesystem::path& path);

}  // namespace bard::lab

#include "bard/lab_io.ipp"
