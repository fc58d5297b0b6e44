#pragma once

// Token vocabulary, budget-conditioned prompt layout and generation parsing.
//
// Prompt:      <bos> <budget> d d d </budget> question... <think>
// Completion:  cot... </think> <answer> d d </answer> <eos>
//
// Unconditioned prompts omit the budget segment entirely. Reasoning length is
// the number of tokens strictly between <think> and </think>; budgets are
// counted in the same unit.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "bard/taskgen.hpp"

namespace bard::textcodec {

using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;

class Vocab {
 public:
  // The closed vocabulary every generator in this project emits into.
  static const Vocab& standard();

  // Tokens in id order. Throws std::invalid_argument on duplicates or when
  // "<pad>" is not first.
  explicit Vocab(std::vector<std::string> tokens);

  static Vocab from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  std::string hash() const;

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(std::string_view token) const;
  TokenId id(std::string_view token) const;

  bool is_digit(TokenId id) const { return id >= digit0_ && id < digit0_ + 10; }
  TokenId digit(int d) const { return digit0_ + d; }
  std::optional<taskgen::StepKind> step_kind(TokenId id) const;
  TokenId step_marker(taskgen::StepKind kind) const;

  TokenId pad() const { return pad_; }
  TokenId bos() const { return bos_; }
  TokenId eos() const { return eos_; }
  TokenId think_open() const { return think_open_; }
  TokenId think_close() const { return think_close_; }
  TokenId answer_open() const { return answer_open_; }
  TokenId answer_close() const { return answer_close_; }
  TokenId budget_open() const { return budget_open_; }
  TokenId budget_close() const { return budget_close_; }
  TokenId negative_sign() const { return neg_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId pad_, bos_, eos_, think_open_, think_close_, answer_open_, answer_close_, budget_open_, budget_close_;
  TokenId neg_, digit0_;
  TokenId markers_[5];
};

// Splits on whitespace; integers become an optional sign token plus one token
// per digit. Throws std::invalid_argument on words outside the vocabulary.
Tokens tokenize(const Vocab& vocab, std::string_view text);

// Inverse of tokenize for canonical text (single spaces, numbers glued).
std::string detokenize(const Vocab& vocab, std::span<const TokenId> tokens);

// Throws std::invalid_argument for a negative budget.
Tokens encode_prompt(const Vocab& vocab, const taskgen::Task& task, std::optional<int> budget);
Tokens encode_prompt(const Vocab& vocab, std::string_view question, std::optional<int> budget);

struct DecodedPrompt {
  std::optional<int> budget;
  std::string question;
};

// Throws std::invalid_argument if the sequence is not a prompt.
DecodedPrompt decode_prompt(const Vocab& vocab, std::span<const TokenId> prompt);

// Think segment for a list of steps: each step is its marker token followed
// by the step text.
Tokens encode_steps(const Vocab& vocab, std::span<const taskgen::Step> steps);
int steps_token_count(const Vocab& vocab, std::span<const taskgen::Step> steps);

// Splits a think segment back into steps. Tokens before the first marker are
// returned as `preamble`.
struct TaggedSteps {
  std::vector<taskgen::Step> steps;
  Tokens preamble;
};
TaggedSteps split_steps(const Vocab& vocab, std::span<const TokenId> think_tokens);

// cot ++ </think> <answer> answer </answer> <eos>
Tokens encode_completion(const Vocab& vocab, std::span<const TokenId> cot, std::string_view answer);

struct ParsedGeneration {
  Tokens think_tokens;
  std::string answer_text;
  int think_len = 0;
  bool malformed = false;
};

// `tokens` is the continuation after <think>. A missing </think> makes the
// whole continuation count as thinking; a missing answer span leaves
// answer_text empty. Either sets `malformed`.
ParsedGeneration parse_generation(const Vocab& vocab, std::span<const TokenId> tokens);

}  // namespace bard::textcodec
