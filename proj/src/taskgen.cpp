#include "bard/taskgen.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <stdexcept>

#include <fmt/format.h>

#include "bard/rng.hpp"

namespace bard::taskgen {
namespace {

struct Op {
  char symbol = '+';
  long long operand = 0;
};

std::vector<std::string_view> split_ws(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::optional<long long> parse_int(std::string_view s) {
  long long v = 0;
  if (s.empty()) return std::nullopt;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::optional<long long> apply_op(long long a, char op, long long b) {
  switch (op) {
    case '+': return a + b;
    case '-': return a - b;
    case '*': return a * b;
    case '/':
      if (b == 0 || a % b != 0) return std::nullopt;
      return a / b;
    default: return std::nullopt;
  }
}

char inverse_op(char op) {
  switch (op) {
    case '+': return '-';
    case '-': return '+';
    case '*': return '/';
    default: return '*';
  }
}

std::string render_question(long long start, const std::vector<Op>& ops) {
  std::string q;
  for (std::size_t i = 1; i < ops.size(); ++i) q += "( ";
  q += std::to_string(start);
  for (std::size_t i = 0; i < ops.size(); ++i) {
    q += fmt::format(" {} {}", ops[i].symbol, ops[i].operand);
    if (i + 1 < ops.size()) q += " )";
  }
  return q;
}

// The teacher reads the chain back out of the rendered question.
std::pair<long long, std::vector<Op>> parse_chain(std::string_view question) {
  std::vector<std::string_view> tokens;
  for (auto tok : split_ws(question))
    if (tok != "(" && tok != ")") tokens.push_back(tok);
  if (tokens.empty() || tokens.size() % 2 == 0)
    throw std::invalid_argument(fmt::format("malformed question: '{}'", question));
  auto start = parse_int(tokens[0]);
  if (!start) throw std::invalid_argument(fmt::format("malformed question: '{}'", question));
  std::vector<Op> ops;
  for (std::size_t i = 1; i + 1 < tokens.size(); i += 2) {
    auto operand = parse_int(tokens[i + 1]);
    if (tokens[i].size() != 1 || !operand)
      throw std::invalid_argument(fmt::format("malformed question: '{}'", question));
    ops.push_back({tokens[i][0], *operand});
  }
  return {*start, ops};
}

std::string derive_prose(long long a, char op, long long b, long long c) {
  switch (op) {
    case '+': return fmt::format("add {} to {} : {} + {} = {}", b, a, a, b, c);
    case '-': return fmt::format("subtract {} from {} : {} - {} = {}", b, a, a, b, c);
    case '*': return fmt::format("multiply {} by {} : {} * {} = {}", a, b, a, b, c);
    default: return fmt::format("divide {} by {} : {} / {} = {}", a, b, a, b, c);
  }
}

constexpr std::array<std::string_view, 4> kExplorePhrases = {
    "what if we reorder ? no , order matters",
    "maybe a shortcut exists ? none here",
    "try another path ? same result , keep going",
    "consider grouping terms ? not needed here",
};

}  // namespace

std::string_view to_string(StepKind kind) {
  switch (kind) {
    case StepKind::Decompose: return "decompose";
    case StepKind::Derive: return "derive";
    case StepKind::Verify: return "verify";
    case StepKind::Explore: return "explore";
    case StepKind::Restate: return "restate";
  }
  return "derive";
}

StepKind step_kind_from_string(std::string_view name) {
  for (auto kind : kAllStepKinds)
    if (to_string(kind) == name) return kind;
  throw std::invalid_argument(fmt::format("unknown step kind '{}'", name));
}

std::string_view to_string(Verbosity v) { return v == Verbosity::Low ? "low" : "high"; }

Verbosity verbosity_from_string(std::string_view name) {
  if (name == "low") return Verbosity::Low;
  if (name == "high") return Verbosity::High;
  throw std::invalid_argument(fmt::format("unknown verbosity '{}'", name));
}

void TaskGenOptions::validate() const {
  if (min_value < -999 || max_value > 999 || min_value >= max_value)
    throw std::invalid_argument("task value range must satisfy -999 <= min < max <= 999");
  if (max_operand < 2 || max_operand > max_value - min_value)
    throw std::invalid_argument("max_operand must be in [2, max_value - min_value]");
  if (max_start < std::max(min_value, 1) || max_start > max_value)
    throw std::invalid_argument("max_start must lie inside the value range and be >= 1");
}

Task generate_task(std::uint64_t seed, int difficulty, const TaskGenOptions& options) {
  if (difficulty < 1) throw std::invalid_argument(fmt::format("difficulty must be >= 1, got {}", difficulty));
  options.validate();

  Rng rng{derive_seed(seed, "taskgen.task", static_cast<std::uint64_t>(difficulty))};
  auto uniform = [&rng](long long lo, long long hi) {
    return std::uniform_int_distribution<long long>{lo, hi}(rng);
  };

  const long long lo = options.min_value;
  const long long hi = options.max_value;
  long long value = uniform(std::max<long long>(lo, 1), options.max_start);
  const long long start = value;

  std::vector<Op> ops;
  for (int hop = 0; hop < difficulty; ++hop) {
    std::vector<std::pair<char, std::vector<long long>>> feasible;
    for (char op : {'+', '-', '*', '/'}) {
      std::vector<long long> operands;
      const long long first = (op == '*' || op == '/') ? 2 : 1;
      for (long long b = first; b <= options.max_operand; ++b) {
        if (op == '*' && value == 0) break;
        if (op == '/' && (value == 0 || value % b != 0)) continue;
        auto r = apply_op(value, op, b);
        if (r && *r >= lo && *r <= hi) operands.push_back(b);
      }
      if (!operands.empty()) feasible.emplace_back(op, std::move(operands));
    }
    const auto& [op, operands] = feasible[static_cast<std::size_t>(uniform(0, static_cast<long long>(feasible.size()) - 1))];
    const long long b = operands[static_cast<std::size_t>(uniform(0, static_cast<long long>(operands.size()) - 1))];
    ops.push_back({op, b});
    value = *apply_op(value, op, b);
  }

  Task task;
  task.id = fmt::format("task-{:016x}-d{}", seed, difficulty);
  task.seed = seed;
  task.difficulty = difficulty;
  task.question_text = render_question(start, ops);
  task.gold_answer = std::to_string(value);
  return task;
}

TeacherTrace teacher_trace(const Task& task, Verbosity verbosity) {
  auto [start, ops] = parse_chain(task.question_text);
  Rng rng{derive_seed(task.seed, "taskgen.teacher", static_cast<std::uint64_t>(task.difficulty))};
  auto coin = [&rng] { return std::bernoulli_distribution{0.5}(rng); };

  TeacherTrace trace;
  trace.task_id = task.id;
  trace.verbosity = verbosity;
  trace.steps.push_back({StepKind::Decompose, fmt::format("plan : {} ops in order", ops.size())});

  const bool high = verbosity == Verbosity::High;
  // Slot 0 follows the plan, slot i follows hop i. High verbosity always
  // explores at least once.
  std::vector<bool> explore_at(ops.size() + 1, false);
  if (high) {
    explore_at[std::uniform_int_distribution<std::size_t>{0, ops.size()}(rng)] = true;
    for (std::size_t s = 0; s < explore_at.size(); ++s)
      if (!explore_at[s] && std::bernoulli_distribution{0.25}(rng)) explore_at[s] = true;
  }
  std::size_t explore_index = std::uniform_int_distribution<std::size_t>{0, kExplorePhrases.size() - 1}(rng);
  auto explore = [&] {
    trace.steps.push_back({StepKind::Explore, std::string{kExplorePhrases[explore_index % kExplorePhrases.size()]}});
    ++explore_index;
  };

  if (explore_at[0]) explore();
  long long value = start;
  for (std::size_t i = 0; i < ops.size(); ++i) {
    const auto [op, b] = ops[i];
    const long long next = *apply_op(value, op, b);
    trace.steps.push_back({StepKind::Derive, derive_prose(value, op, b, next)});
    if (high) {
      const bool last = i + 1 == ops.size();
      if (last || coin())
        trace.steps.push_back({StepKind::Verify, fmt::format("check : {} {} {} = {} , ok", next, inverse_op(op), b, value)});
      if (explore_at[i + 1]) explore();
      if (!last && coin()) trace.steps.push_back({StepKind::Restate, fmt::format("so far : {}", next)});
    }
    value = next;
  }
  if (high) trace.steps.push_back({StepKind::Restate, fmt::format("so the answer is {}", value)});
  trace.answer = std::to_string(value);
  return trace;
}

std::optional<std::string> canonical_integer(std::string_view text) {
  std::size_t b = 0, e = text.size();
  while (b < e && std::isspace(static_cast<unsigned char>(text[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(text[e - 1]))) --e;
  text = text.substr(b, e - b);
  bool negative = false;
  if (!text.empty() && (text[0] == '-' || text[0] == '+')) {
    negative = text[0] == '-';
    text.remove_prefix(1);
  }
  if (text.empty()) return std::nullopt;
  for (char c : text)
    if (c < '0' || c > '9') return std::nullopt;
  const auto nz = text.find_first_not_of('0');
  if (nz == std::string_view::npos) return std::string{"0"};
  std::string out = negative ? "-" : "";
  out.append(text.substr(nz));
  return out;
}

bool verify_answer(std::string_view predicted, std::string_view gold) {
  auto p = canonical_integer(predicted);
  auto g = canonical_integer(gold);
  return p && g && *p == *g;
}

std::optional<Equation> parse_equation(std::string_view step_text) {
  const auto tokens = split_ws(step_text);
  auto eq = std::find(tokens.begin(), tokens.end(), std::string_view{"="});
  if (eq == tokens.end()) return std::nullopt;
  const auto i = static_cast<std::size_t>(eq - tokens.begin());
  if (i < 3 || i + 1 >= tokens.size()) return std::nullopt;
  auto lhs = parse_int(tokens[i - 3]);
  auto rhs = parse_int(tokens[i - 1]);
  auto result = parse_int(tokens[i + 1]);
  const auto op = tokens[i - 2];
  if (!lhs || !rhs || !result || op.size() != 1 || std::string_view{"+-*/"}.find(op[0]) == std::string_view::npos)
    return std::nullopt;
  return Equation{*lhs, op[0], *rhs, *result};
}

std::string compact_derive_text(std::string_view step_text) {
  auto eq = parse_equation(step_text);
  if (!eq) return std::string{step_text};
  return fmt::format("{} {} {} = {}", eq->lhs, eq->op, eq->rhs, eq->result);
}

std::optional<long long> replay_derive_chain(const std::vector<Step>& steps) {
  std::optional<long long> value;
  for (const auto& step : steps) {
    if (step.kind != StepKind::Derive) continue;
    auto eq = parse_equation(step.text);
    if (!eq) return std::nullopt;
    if (value && eq->lhs != *value) return std::nullopt;
    auto r = apply_op(eq->lhs, eq->op, eq->rhs);
    if (!r || *r != eq->result) return std::nullopt;
    value = *r;
  }
  return value;
}

void to_json(nlohmann::json& j, const Task& t) {
  j = {{"id", t.id},
       {"seed", t.seed},
       {"difficulty", t.difficulty},
       {"question_text", t.question_text},
       {"gold_answer", t.gold_answer}};
}

void from_json(const nlohmann::json& j, Task& t) {
  j.at("id").get_to(t.id);
  j.at("seed").get_to(t.seed);
  j.at("difficulty").get_to(t.difficulty);
  j.at("question_text").get_to(t.question_text);
  j.at("gold_answer").get_to(t.gold_answer);
}

void to_json(nlohmann::json& j, const Step& s) { j = {{"kind", to_string(s.kind)}, {"text", s.text}}; }

void from_json(const nlohmann::json& j, Step& s) {
  s.kind = step_kind_from_string(j.at("kind").get<std::string>());
  j.at("text").get_to(s.text);
}

void to_json(nlohmann::json& j, const TeacherTrace& t) {
  j = {{"task_id", t.task_id}, {"steps", t.steps}, {"answer", t.answer}, {"verbosity", to_string(t.verbosity)}};
}

void from_json(const nlohmann::json& j, TeacherTrace& t) {
  j.at("task_id").get_to(t.task_id);
  j.at("steps").get_to(t.steps);
  j.at("answer").get_to(t.answer);
  t.verbosity = verbosity_from_string(j.at("verbosity").get<std::string>());
}

}  // namespace bard::taskgen
