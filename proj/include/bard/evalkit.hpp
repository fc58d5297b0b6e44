#pragma once

// Accuracy, budget fidelity, UPS, length quantiles and step-type profiles
// for a model evaluated under a sweep of thinking budgets.

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bard/nanolm.hpp"
#include "bard/taskgen.hpp"
#include "bard/textcodec.hpp"

namespace bard::evalkit {

// Fraction of lengths <= budget. Throws std::invalid_argument when empty.
double fidelity(std::span<const int> think_lens, int budget);

// w * acc + (1 - w) * fid.
double ups(double acc, double fid, double w = 0.5);

double mean(std::span<const double> values);

// Pearson correlation; 0 when either side has zero variance. Throws
// std::invalid_argument on mismatched or fewer than two samples.
double pearson(std::span<const double> x, std::span<const double> y);

struct Quantiles {
  int min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
  bool operator==(const Quantiles&) const = default;
};

// Nearest-rank quantiles: the p-quantile is the ceil(p * n)-th smallest
// value. Throws std::invalid_argument when empty.
Quantiles quantiles(std::span<const int> values);

struct EvalSample {
  std::string task_id;
  int difficulty = 0;
  std::optional<int> budget;
  int think_len = 0;
  bool correct = false;
  bool malformed = false;
  textcodec::Tokens think_tokens;
};

struct BudgetRow {
  std::optional<int> budget;  // empty for the unconstrained ("n/a") row
  std::size_t n = 0;
  double accuracy = 0.0;
  std::optional<double> fidelity;  // undefined without a budget
  std::optional<double> ups;
  Quantiles lengths;
  double mean_think_len = 0.0;
};

struct EvalReport {
  double w = 0.5;
  double budget_scale = 1.0;       // toy budget units per reference budget unit
  std::vector<BudgetRow> rows;     // sweep order; the n/a row comes last
  double mean_ups = 0.0;           // arithmetic mean of per-budget UPS
  double pooled_accuracy = 0.0;    // over every budgeted sample
  double pooled_fidelity = 0.0;
  double pooled_ups = 0.0;         // UPS from the pooled Acc and Fid
  std::vector<EvalSample> samples;

  const BudgetRow* row(std::optional<int> budget) const;
};

struct EvalOptions {
  int samples_per_task = 1;
  bool include_unconstrained = false;
  double w = 0.5;
  double budget_scale = 1.0;
  double temperature = 0.0;   // > 0 only for diagnostics; evaluation is greedy
  std::uint64_t seed = 0;     // used only when temperature > 0
  int max_new = 0;            // 0 = up to the context limit
  bool budget_in_prompt = true;  // false: prompts omit the budget, Fid still scores against it
};

// Decodes every task once per budget (plus the unconstrained row when
// requested), parses, verifies and aggregates. Truncated generations count
// as wrong and are compliant only if their truncated length fits.
EvalReport run_eval(const nanolm::ParameterStore& params, std::span<const taskgen::Task> tasks,
                    std::span<const int> budgets, const EvalOptions& options = {});

// Builds rows and averages from already-scored samples.
EvalReport aggregate(std::vector<EvalSample> samples, std::span<const int> budgets, bool include_unconstrained,
                     double w = 0.5, double budget_scale = 1.0);

inline constexpr std::size_t kStepKindCount = 5;

struct BehaviorProfile {
  std::optional<int> bucket;  // budget bucket lower bound; empty = no budget
  std::array<double, kStepKindCount> proportions{};  // indexed by StepKind
  std::size_t tagged_steps = 0;
  std::size_t residual_tokens = 0;  // tokens before the first step marker
  std::size_t generations = 0;

  double proportion(taskgen::StepKind kind) const { return proportions[static_cast<std::size_t>(kind)]; }
};

struct Generation {
  std::optional<int> budget;
  textcodec::Tokens think_tokens;
};

// Step-type proportions per budget bucket (bucket_width 1 = per budget),
// tagging spans by their step-marker token.
std::vector<BehaviorProfile> behavior_profile(std::span<const Generation> generations, int bucket_width = 1,
                                              const textcodec::Vocab& vocab = textcodec::Vocab::standard());

std::vector<BehaviorProfile> behavior_profile(const EvalReport& report, int bucket_width = 1);

nlohmann::json to_json(const EvalReport& report, bool include_samples = false);
nlohmann::json to_json(std::span<const BehaviorProfile> profiles);
EvalReport report_from_json(const nlohmann::json& j);

// One line per row: budget,n,accuracy,fidelity,ups,min,q1,median,q3,max,mean_think_len.
std::string to_csv(const EvalReport& report);

// One column per budget, one think length per row (ragged columns are blank).
std::string plot_data_csv(const EvalReport& report);

}  // namespace bard::evalkit
