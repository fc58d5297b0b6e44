#pragma once

// Synthetic verifiable reasoning tasks: left-to-right integer arithmetic
// chains, a rule-based "teacher" that writes typed reasoning steps for them,
// and the binary answer verifier used for the accuracy reward.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace bard::taskgen {

enum class StepKind { Decompose, Derive, Verify, Explore, Restate };

inline constexpr StepKind kAllStepKinds[] = {StepKind::Decompose, StepKind::Derive, StepKind::Verify,
                                             StepKind::Explore, StepKind::Restate};

std::string_view to_string(StepKind kind);
StepKind step_kind_from_string(std::string_view name);

enum class Verbosity { Low, High };

std::string_view to_string(Verbosity v);
Verbosity verbosity_from_string(std::string_view name);

struct Task {
  std::string id;
  std::uint64_t seed = 0;
  int difficulty = 0;
  std::string question_text;
  std::string gold_answer;

  bool operator==(const Task&) const = default;
};

struct Step {
  StepKind kind = StepKind::Derive;
  std::string text;

  bool operator==(const Step&) const = default;
};

struct TeacherTrace {
  std::string task_id;
  std::vector<Step> steps;
  std::string answer;
  Verbosity verbosity = Verbosity::High;

  bool operator==(const TeacherTrace&) const = default;
};

// Value range of every operand and intermediate result. The defaults keep
// chains small enough for a desk-scale model; any range inside [-999, 999]
// is accepted.
struct TaskGenOptions {
  int min_value = 0;
  int max_value = 99;
  int max_operand = 9;
  int max_start = 20;

  void validate() const;
};

// Throws std::invalid_argument when difficulty < 1.
Task generate_task(std::uint64_t seed, int difficulty, const TaskGenOptions& options = {});

TeacherTrace teacher_trace(const Task& task, Verbosity verbosity);

// Canonical integer comparison: surrounding whitespace is ignored, leading
// zeros are stripped, and "-0" equals "0". Anything that is not an optionally
// signed run of digits is a wrong answer.
bool verify_answer(std::string_view predicted, std::string_view gold);

// Canonical form used by verify_answer, or nullopt when unparseable.
std::optional<std::string> canonical_integer(std::string_view text);

// One "a op b = c" equation extracted from a Derive step.
struct Equation {
  long long lhs = 0;
  char op = '+';
  long long rhs = 0;
  long long result = 0;
};

std::optional<Equation> parse_equation(std::string_view step_text);

// Compact form of a Derive step ("a op b = c"); idempotent.
std::string compact_derive_text(std::string_view step_text);

// Replays the Derive steps in order: every equation must be arithmetically
// correct and consume the previous result. Returns the final value, or
// nullopt if the chain is broken or empty.
std::optional<long long> replay_derive_chain(const std::vector<Step>& steps);

void to_json(nlohmann::json& j, const Task& t);
void from_json(const nlohmann::json& j, Task& t);
void to_json(nlohmann::json& j, const Step& s);
void from_json(const nlohmann::json& j, Step& s);
void to_json(nlohmann::json& j, const TeacherTrace& t);
void from_json(const nlohmann::json& j, TeacherTrace& t);

}  // namespace bard::taskgen
