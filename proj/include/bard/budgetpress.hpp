#pragma once

// Rule-based compression of teacher traces to a token budget, and the
// multi-budget contrastive dataset built from it.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bard/rng.hpp"
#include "bard/taskgen.hpp"
#include "bard/textcodec.hpp"

namespace bard::budgetpress {

using taskgen::StepKind;

struct CompressionPolicy {
  // Lowest priority first. Derive and Decompose steps are never dropped.
  std::vector<StepKind> drop_order{StepKind::Explore, StepKind::Verify, StepKind::Restate};
  bool compact_derive = true;

  void validate() const;
};

// One SFT record. `budget` is empty for standard (unconditioned) CoT records,
// which carry the full trace.
struct BudgetedExample {
  std::string task_id;
  std::string question;
  int difficulty = 0;
  std::optional<int> budget;
  std::vector<taskgen::Step> cot;
  int cot_len = 0;
  std::string answer;
  int source_len = 0;
  bool min_core_exceeds = false;

  bool operator==(const BudgetedExample&) const = default;
};

// Teacher trace together with the task it solves.
struct TracedTask {
  taskgen::Task task;
  taskgen::TeacherTrace trace;
};

struct DatasetManifest {
  std::size_t record_count = 0;
  std::size_t budgeted_count = 0;
  std::size_t unconditioned_count = 0;
  std::size_t min_core_exceeds_count = 0;
  int budgets_per_trace = 0;
  int histogram_bucket = 16;
  std::map<int, std::size_t> budget_histogram;  // bucket lower bound -> count
  std::map<int, std::size_t> difficulty_counts;
  std::uint64_t seed = 0;
};

struct Dataset {
  std::vector<BudgetedExample> records;
  DatasetManifest manifest;
};

// k distinct budgets drawn uniformly without replacement from [1, full_len].
// Throws std::invalid_argument unless full_len >= k >= 1.
std::vector<int> sample_budgets(int full_len, int k, Rng& rng);

// Removes whole steps in drop order (latest first within a kind) until the
// think segment fits the budget, then compacts Derive steps front to back.
// If the compacted core is still too long it is returned with
// min_core_exceeds set. Throws std::invalid_argument when budget < 1.
BudgetedExample compress_trace(const taskgen::TeacherTrace& trace, int budget, const CompressionPolicy& policy = {},
                               const textcodec::Vocab& vocab = textcodec::Vocab::standard());

// Expands every trace into k compressions at distinct sampled budgets, sorts
// by (task_id, budget) and then shuffles. All draws come from `seed`.
// Throws std::invalid_argument when k < 2.
Dataset build_contrastive_set(std::span<const TracedTask> traces, int k, std::uint64_t seed,
                              const CompressionPolicy& policy = {}, int histogram_bucket = 16);

// Single-budget ablation: one compression per trace.
Dataset build_single_budget_set(std::span<const TracedTask> traces, std::uint64_t seed,
                                const CompressionPolicy& policy = {}, int histogram_bucket = 16);

// Full, uncompressed traces without a budget (standard distillation data).
Dataset build_unconditioned_set(std::span<const TracedTask> traces, int histogram_bucket = 16);

DatasetManifest make_manifest(std::span<const BudgetedExample> records, int budgets_per_trace, std::uint64_t seed,
                              int histogram_bucket);

void to_json(nlohmann::json& j, const BudgetedExample& e);
void from_json(const nlohmann::json& j, BudgetedExample& e);
void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

}  // namespace bard::budgetpress
