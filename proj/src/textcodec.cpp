#include "bard/textcodec.hpp"

#include <array>
#include <cctype>
#include <stdexcept>

#include <fmt/format.h>
#include <openssl/sha.h>

namespace bard::textcodec {
namespace {

constexpr std::array<std::string_view, 9> kStructural = {
    "<pad>", "<bos>", "<eos>", "<think>", "</think>", "<answer>", "</answer>", "<budget>", "</budget>"};

constexpr std::array<std::string_view, 12> kSymbols = {"+", "-", "*", "/", "=", "(", ")", ",", ":", "?", ".", "neg"};

// Closed word list. The generators use a subset; the rest keeps the
// vocabulary stable if phrasing is extended later.
constexpr std::array<std::string_view, 200> kWords = {
    "a",        "about",    "above",     "add",       "after",    "again",    "all",      "also",
    "alternative", "an",    "and",       "another",   "answer",   "any",      "apply",    "are",
    "as",       "assume",   "at",        "back",      "be",       "because",  "before",   "below",
    "best",     "both",     "but",       "by",        "can",      "carry",    "case",     "certain",
    "change",   "check",    "choose",    "clear",     "combine",  "compare",  "compute",  "confirm",
    "consider", "correct",  "count",     "current",  "depends",  "derive",   "different", "direct",
    "divide",   "do",       "does",      "done",      "double",   "each",     "eight",    "either",
    "else",     "end",      "equal",     "equals",    "error",    "even",     "exact",    "exists",
    "expand",   "fact",     "far",       "faster",    "final",    "find",     "first",    "five",
    "fix",      "for",      "four",      "from",      "gives",    "go",       "going",    "good",
    "group",    "grouping", "guess",     "half",      "have",     "here",     "hold",     "holds",
    "how",      "idea",     "if",        "in",        "instead",  "into",     "is",       "it",
    "just",     "keep",     "last",      "left",      "less",     "let",      "like",     "look",
    "make",     "matters",  "maybe",     "method",    "minus",    "more",     "most",     "multiply",
    "must",     "need",     "needed",    "next",      "nine",     "no",       "none",     "not",
    "now",      "number",   "odd",       "of",        "ok",       "on",       "one",      "only",
    "op",       "ops",      "or",        "order",     "other",    "over",     "part",     "path",
    "plan",     "plus",     "product",   "quick",     "recheck",  "reorder",  "repeat",   "rest",
    "result",   "right",    "same",      "second",    "see",      "seven",    "shortcut", "should",
    "since",    "six",      "so",        "solve",     "start",    "step",     "steps",    "still",
    "subtract", "sum",      "sure",      "take",      "ten",      "term",     "terms",    "test",
    "than",     "that",     "the",       "then",      "there",    "third",    "this",     "three",
    "through",  "times",    "to",        "total",     "try",      "two",      "until",    "up",
    "use",      "value",    "verify",    "wait",      "was",      "way",      "we",       "what",
    "when",     "which",    "why",      "will",      "with",     "work",     "yes",      "zero",
};

constexpr std::array<std::string_view, 5> kMarkers = {"<decompose>", "<derive>", "<verify>", "<explore>",
                                                      "<restate>"};

std::vector<std::string> standard_tokens() {
  std::vector<std::string> tokens;
  for (auto t : kStructural) tokens.emplace_back(t);
  for (int d = 0; d < 10; ++d) tokens.push_back(std::to_string(d));
  for (auto t : kSymbols) tokens.emplace_back(t);
  for (auto t : kMarkers) tokens.emplace_back(t);
  for (auto t : kWords) tokens.emplace_back(t);
  return tokens;
}

bool is_integer_literal(std::string_view piece) {
  if (!piece.empty() && piece[0] == '-') piece.remove_prefix(1);
  if (piece.empty()) return false;
  for (char c : piece)
    if (c < '0' || c > '9') return false;
  return true;
}

}  // namespace

const Vocab& Vocab::standard() {
  static const Vocab vocab{standard_tokens()};
  return vocab;
}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.empty() || tokens_[0] != "<pad>") throw std::invalid_argument("vocabulary must start with <pad>");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
      throw std::invalid_argument(fmt::format("duplicate vocabulary token '{}'", tokens_[i]));
  }
  pad_ = id("<pad>");
  bos_ = id("<bos>");
  eos_ = id("<eos>");
  think_open_ = id("<think>");
  think_close_ = id("</think>");
  answer_open_ = id("<answer>");
  answer_close_ = id("</answer>");
  budget_open_ = id("<budget>");
  budget_close_ = id("</budget>");
  neg_ = id("neg");
  digit0_ = id("0");
  for (int d = 1; d < 10; ++d)
    if (id(std::to_string(d)) != digit0_ + d) throw std::invalid_argument("digit tokens must be contiguous");
  for (std::size_t k = 0; k < kMarkers.size(); ++k) markers_[k] = id(kMarkers[k]);
}

Vocab Vocab::from_json(const nlohmann::json& j) { return Vocab{j.get<std::vector<std::string>>()}; }

nlohmann::json Vocab::to_json() const { return tokens_; }

std::string Vocab::hash() const {
  const std::string bytes = to_json().dump();
  unsigned char digest[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), digest);
  std::string hex;
  for (unsigned char c : digest) hex += fmt::format("{:02x}", c);
  return hex;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw std::out_of_range(fmt::format("token id {} out of range", id));
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string{token});
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocab::id(std::string_view token) const {
  auto found = find(token);
  if (!found) throw std::invalid_argument(fmt::format("token '{}' is not in the vocabulary", token));
  return *found;
}

std::optional<taskgen::StepKind> Vocab::step_kind(TokenId id) const {
  for (std::size_t k = 0; k < kMarkers.size(); ++k)
    if (markers_[k] == id) return taskgen::kAllStepKinds[k];
  return std::nullopt;
}

TokenId Vocab::step_marker(taskgen::StepKind kind) const { return markers_[static_cast<int>(kind)]; }

Tokens tokenize(const Vocab& vocab, std::string_view text) {
  Tokens out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j == i) break;
    const auto piece = text.substr(i, j - i);
    i = j;
    if (auto id = vocab.find(piece)) {
      out.push_back(*id);
      continue;
    }
    if (!is_integer_literal(piece)) throw std::invalid_argument(fmt::format("cannot tokenize '{}'", piece));
    auto digits = piece;
    if (digits[0] == '-') {
      out.push_back(vocab.negative_sign());
      digits.remove_prefix(1);
    }
    for (char c : digits) out.push_back(vocab.digit(c - '0'));
  }
  return out;
}

std::string detokenize(const Vocab& vocab, std::span<const TokenId> tokens) {
  std::string out;
  bool glue = false;  // next token continues the current number
  for (auto t : tokens) {
    const bool digit = vocab.is_digit(t);
    if (!(digit && glue) && !out.empty()) out += ' ';
    if (t == vocab.negative_sign()) {
      out += '-';
      glue = true;
      continue;
    }
    out += vocab.token(t);
    glue = digit;
  }
  return out;
}

Tokens encode_prompt(const Vocab& vocab, std::string_view question, std::optional<int> budget) {
  Tokens out{vocab.bos()};
  if (budget) {
    if (*budget < 0) throw std::invalid_argument(fmt::format("budget must be >= 0, got {}", *budget));
    out.push_back(vocab.budget_open());
    for (char c : std::to_string(*budget)) out.push_back(vocab.digit(c - '0'));
    out.push_back(vocab.budget_close());
  }
  const auto q = tokenize(vocab, question);
  out.insert(out.end(), q.begin(), q.end());
  out.push_back(vocab.think_open());
  return out;
}

Tokens encode_prompt(const Vocab& vocab, const taskgen::Task& task, std::optional<int> budget) {
  return encode_prompt(vocab, task.question_text, budget);
}

DecodedPrompt decode_prompt(const Vocab& vocab, std::span<const TokenId> prompt) {
  if (prompt.size() < 2 || prompt.front() != vocab.bos() || prompt.back() != vocab.think_open())
    throw std::invalid_argument("not a prompt: expected <bos> ... <think>");
  DecodedPrompt out;
  std::size_t i = 1;
  if (prompt[i] == vocab.budget_open()) {
    int budget = 0;
    ++i;
    const std::size_t first_digit = i;
    for (; i < prompt.size() && vocab.is_digit(prompt[i]); ++i) budget = budget * 10 + (prompt[i] - vocab.digit(0));
    if (i == first_digit || i >= prompt.size() || prompt[i] != vocab.budget_close())
      throw std::invalid_argument("malformed budget segment");
    ++i;
    out.budget = budget;
  }
  out.question = detokenize(vocab, prompt.subspan(i, prompt.size() - 1 - i));
  return out;
}

Tokens encode_steps(const Vocab& vocab, std::span<const taskgen::Step> steps) {
  Tokens out;
  for (const auto& step : steps) {
    out.push_back(vocab.step_marker(step.kind));
    const auto body = tokenize(vocab, step.text);
    out.insert(out.end(), body.begin(), body.end());
  }
  return out;
}

int steps_token_count(const Vocab& vocab, std::span<const taskgen::Step> steps) {
  return static_cast<int>(encode_steps(vocab, steps).size());
}

TaggedSteps split_steps(const Vocab& vocab, std::span<const TokenId> think_tokens) {
  TaggedSteps out;
  std::optional<taskgen::StepKind> current;
  std::size_t body_start = 0;
  auto flush = [&](std::size_t end) {
    if (current) out.steps.push_back({*current, detokenize(vocab, think_tokens.subspan(body_start, end - body_start))});
  };
  for (std::size_t i = 0; i < think_tokens.size(); ++i) {
    auto kind = vocab.step_kind(think_tokens[i]);
    if (!kind) {
      if (!current) out.preamble.push_back(think_tokens[i]);
      continue;
    }
    flush(i);
    current = kind;
    body_start = i + 1;
  }
  flush(think_tokens.size());
  return out;
}

Tokens encode_completion(const Vocab& vocab, std::span<const TokenId> cot, std::string_view answer) {
  Tokens out(cot.begin(), cot.end());
  out.push_back(vocab.think_close());
  out.push_back(vocab.answer_open());
  const auto a = tokenize(vocab, answer);
  out.insert(out.end(), a.begin(), a.end());
  out.push_back(vocab.answer_close());
  out.push_back(vocab.eos());
  return out;
}

ParsedGeneration parse_generation(const Vocab& vocab, std::span<const TokenId> tokens) {
  ParsedGeneration out;
  std::size_t close = 0;
  while (close < tokens.size() && tokens[close] != vocab.think_close()) ++close;
  out.think_tokens.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(close));
  out.think_len = static_cast<int>(close);
  if (close == tokens.size()) {
    out.malformed = true;
    return out;
  }
  std::size_t open = close + 1;
  while (open < tokens.size() && tokens[open] != vocab.answer_open()) ++open;
  std::size_t end = open + 1;
  while (end < tokens.size() && tokens[end] != vocab.answer_close()) ++end;
  if (open >= tokens.size() || end >= tokens.size()) {
    out.malformed = true;
    return out;
  }
  out.answer_text = detokenize(vocab, tokens.subspan(open + 1, end - open - 1));
  return out;
}

}  // namespace bard::textcodec
