#pragma once

// Group-relative policy optimization with the budget-fidelity reward.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bard/nanolm.hpp"
#include "bard/taskgen.hpp"
#include "bard/textcodec.hpp"

namespace bard::grpo {

enum class RewardMode { Multiplicative, Additive };

std::string_view to_string(RewardMode mode);
RewardMode reward_mode_from_string(std::string_view name);

struct RewardConfig {
  double alpha = 1.0 / 512.0;
  double delta = 1.0;
  RewardMode mode = RewardMode::Multiplicative;

  void validate() const;
};

void to_json(nlohmann::json& j, const RewardConfig& c);
void from_json(const nlohmann::json& j, RewardConfig& c);

// clip(alpha * (b - L) + delta, 0, 1)
double reward_bud(int budget, int think_len, const RewardConfig& cfg);

// Product, or the mean in additive mode.
double reward_total(double r_acc, double r_bud, RewardMode mode);

// (r - mean) / max(sample std, 1e-8). Throws std::invalid_argument for G < 2.
std::vector<double> compute_advantages(std::span<const double> rewards);

// True when the group is kept: low <= mean accuracy <= high.
bool filter_group(std::span<const double> r_acc, double low, double high);

struct Trajectory {
  std::string task_id;
  std::optional<int> budget;  // empty for unconditioned prompts (r_bud = 1)
  textcodec::Tokens prompt;
  textcodec::Tokens tokens;
  std::vector<double> logprobs;  // old-policy log-probs of `tokens`
  int think_len = 0;
  bool malformed = false;
  double r_acc = 0.0;
  double r_bud = 0.0;
  double reward = 0.0;
};

struct RolloutGroup {
  std::vector<Trajectory> trajectories;
  std::vector<double> rewards;
  std::vector<double> advantages;  // empty when filtered
  double accuracy = 0.0;
  bool filtered = false;
};

struct RlConfig {
  int group_size = 16;
  int batch_size = 64;  // groups per step
  double clip_eps = 0.2;
  double low = 0.1;
  double high = 0.95;
  int b_min = 16;
  int b_max = 768;
  int steps = 100;
  std::uint64_t seed = 0;
  double kl_coef = 0.0;
  double lr = 1e-5;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  int updates_per_step = 1;  // policy updates on each rollout batch
  double temperature = 1.0;  // rollout sampling; old log-probs are always untempered
  int max_new = 0;         // 0 = up to the context limit
  bool use_budget = true;  // false: unconditioned prompts, reward = r_acc
  int log_buckets = 4;     // think_len columns in the log, over [b_min, b_max]

  void validate() const;
};

void to_json(nlohmann::json& j, const RlConfig& c);
void from_json(const nlohmann::json& j, RlConfig& c);

// Scores one rollout and fills r_acc, r_bud and reward.
void score(Trajectory& t, std::string_view gold, const RewardConfig& cfg,
           const textcodec::Vocab& vocab = textcodec::Vocab::standard());

// Rewards, accuracy, filter decision and advantages for a finished group.
void finalize_group(RolloutGroup& group, double low, double high);

struct SurrogateStats {
  double objective = 0.0;  // mean clipped surrogate over kept trajectories
  std::size_t trajectories = 0;
  std::size_t excluded_nonfinite = 0;
  std::size_t clipped_tokens = 0;
  std::size_t tokens = 0;
};

// Accumulates the gradient of the negated clipped surrogate (plus the KL
// term when kl_coef > 0 and a reference is given) into grads. Filtered
// groups are ignored.
SurrogateStats surrogate_gradient(const nanolm::ParameterStore& params, std::span<const RolloutGroup> groups,
                                  double clip_eps, std::span<double> grads, double kl_coef = 0.0,
                                  const nanolm::ParameterStore* reference = nullptr);

struct StepLog {
  long step = 0;
  double mean_reward = 0.0;
  double mean_r_acc = 0.0;
  double mean_r_bud = 0.0;
  double frac_filtered = 0.0;
  double mean_think_len = 0.0;
  std::vector<std::optional<double>> think_len_by_bucket;
  std::size_t excluded_nonfinite = 0;
  bool skipped = false;
};

struct RlReport {
  std::vector<StepLog> log;
  std::vector<int> bucket_edges;  // log_buckets + 1 edges
  std::size_t rollouts = 0;
  std::size_t skipped_steps = 0;
  std::size_t excluded_nonfinite = 0;
  std::size_t annihilation_violations = 0;  // r_acc = 0 with nonzero reward (multiplicative)
  std::vector<std::filesystem::path> checkpoints;
};

void to_json(nlohmann::json& j, const RlReport& r);
std::string log_csv(const RlReport& r);

enum class Phase { BeforeUpdate, AfterUpdate };

struct StepView {
  long step = 0;
  Phase phase = Phase::BeforeUpdate;
  std::span<const RolloutGroup> groups;
  const nanolm::ParameterStore* params = nullptr;
};

struct RlOptions {
  std::optional<std::filesystem::path> out_dir;
  int checkpoint_every = 0;  // 0 = final checkpoint only
  std::function<void(const StepView&)> observer;
  bool log_progress = true;
};

// Rolls out `group_size` samples for the given prompt with its own RNG
// stream. Trajectories are scored but the group is not finalized.
RolloutGroup rollout_group(const nanolm::ParameterStore& params, const taskgen::Task& task, std::optional<int> budget,
                           const RlConfig& rl, const RewardConfig& reward, Rng& rng);

// Runs rl.steps policy updates in place; deterministic given rl.seed.
RlReport train_rl(nanolm::ParameterStore& params, std::span<const taskgen::Task> tasks, const RlConfig& rl,
                  const RewardConfig& reward, const RlOptions& options = {});

}  // namespace bard::grpo
