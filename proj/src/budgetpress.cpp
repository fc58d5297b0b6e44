#include "bard/budgetpress.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

#include <fmt/format.h>

namespace bard::budgetpress {

void CompressionPolicy::validate() const {
  std::set<StepKind> seen;
  for (auto kind : drop_order) {
    if (kind == StepKind::Decompose || kind == StepKind::Derive)
      throw std::invalid_argument(fmt::format("drop_order may not contain '{}'", taskgen::to_string(kind)));
    if (!seen.insert(kind).second)
      throw std::invalid_argument(fmt::format("drop_order lists '{}' twice", taskgen::to_string(kind)));
  }
}

std::vector<int> sample_budgets(int full_len, int k, Rng& rng) {
  if (k < 1 || full_len < k)
    throw std::invalid_argument(fmt::format("need full_len >= k >= 1, got full_len={} k={}", full_len, k));
  std::uniform_int_distribution<int> pick{1, full_len};
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(k));
  while (static_cast<int>(out.size()) < k) {
    const int b = pick(rng);
    if (std::find(out.begin(), out.end(), b) == out.end()) out.push_back(b);
  }
  return out;
}

BudgetedExample compress_trace(const taskgen::TeacherTrace& trace, int budget, const CompressionPolicy& policy,
                               const textcodec::Vocab& vocab) {
  if (budget < 1) throw std::invalid_argument(fmt::format("budget must be >= 1, got {}", budget));
  policy.validate();

  std::vector<taskgen::Step> steps = trace.steps;
  std::vector<int> lengths;
  lengths.reserve(steps.size());
  for (const auto& s : steps) lengths.push_back(textcodec::steps_token_count(vocab, std::span{&s, 1}));
  std::vector<bool> kept(steps.size(), true);
  int total = 0;
  for (int len : lengths) total += len;
  const int source_len = total;

  // Each reduction is one whole-step removal or one Derive compaction, in a
  // fixed order, so a smaller budget always walks further along the sequence.
  for (auto kind : policy.drop_order) {
    for (std::size_t i = steps.size(); i-- > 0 && total > budget;) {
      if (!kept[i] || steps[i].kind != kind) continue;
      kept[i] = false;
      total -= lengths[i];
    }
  }
  if (policy.compact_derive) {
    for (std::size_t i = 0; i < steps.size() && total > budget; ++i) {
      if (!kept[i] || steps[i].kind != StepKind::Derive) continue;
      steps[i].text = taskgen::compact_derive_text(steps[i].text);
      const int len = textcodec::steps_token_count(vocab, std::span{&steps[i], 1});
      total -= lengths[i] - len;
      lengths[i] = len;
    }
  }

  BudgetedExample out;
  out.task_id = trace.task_id;
  out.budget = budget;
  for (std::size_t i = 0; i < steps.size(); ++i)
    if (kept[i]) out.cot.push_back(std::move(steps[i]));
  out.cot_len = total;
  out.answer = trace.answer;
  out.source_len = source_len;
  out.min_core_exceeds = total > budget;
  return out;
}

namespace {

BudgetedExample attach(BudgetedExample e, const TracedTask& t) {
  e.question = t.task.question_text;
  e.difficulty = t.task.difficulty;
  return e;
}

void sort_and_shuffle(std::vector<BudgetedExample>& records, Rng& rng) {
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
    return std::tie(a.task_id, a.budget) < std::tie(b.task_id, b.budget);
  });
  std::shuffle(records.begin(), records.end(), rng);
}

Dataset build_sampled(std::span<const TracedTask> traces, int k, std::uint64_t seed, const CompressionPolicy& policy,
                      int histogram_bucket) {
  const auto& vocab = textcodec::Vocab::standard();
  std::vector<BudgetedExample> records;
  records.reserve(traces.size() * static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto& t = traces[i];
    const int full_len = textcodec::steps_token_count(vocab, t.trace.steps);
    Rng rng = make_rng(seed, "budgetpress.budgets", i);
    for (int b : sample_budgets(full_len, k, rng)) records.push_back(attach(compress_trace(t.trace, b, policy, vocab), t));
  }
  Rng shuffle_rng = make_rng(seed, "budgetpress.shuffle");
  sort_and_shuffle(records, shuffle_rng);
  Dataset out;
  out.manifest = make_manifest(records, k, seed, histogram_bucket);
  out.records = std::move(records);
  return out;
}

}  // namespace

Dataset build_contrastive_set(std::span<const TracedTask> traces, int k, std::uint64_t seed,
                              const CompressionPolicy& policy, int histogram_bucket) {
  if (k < 2) throw std::invalid_argument(fmt::format("contrastive sets need k >= 2 budgets per trace, got {}", k));
  return build_sampled(traces, k, seed, policy, histogram_bucket);
}

Dataset build_single_budget_set(std::span<const TracedTask> traces, std::uint64_t seed,
                                const CompressionPolicy& policy, int histogram_bucket) {
  return build_sampled(traces, 1, seed, policy, histogram_bucket);
}

Dataset build_unconditioned_set(std::span<const TracedTask> traces, int histogram_bucket) {
  const auto& vocab = textcodec::Vocab::standard();
  std::vector<BudgetedExample> records;
  for (const auto& t : traces) {
    BudgetedExample e;
    e.task_id = t.trace.task_id;
    e.cot = t.trace.steps;
    e.cot_len = textcodec::steps_token_count(vocab, e.cot);
    e.source_len = e.cot_len;
    e.answer = t.trace.answer;
    records.push_back(attach(std::move(e), t));
  }
  Dataset out;
  out.manifest = make_manifest(records, 0, 0, histogram_bucket);
  out.records = std::move(records);
  return out;
}

DatasetManifest make_manifest(std::span<const BudgetedExample> records, int budgets_per_trace, std::uint64_t seed,
                              int histogram_bucket) {
  if (histogram_bucket < 1) throw std::invalid_argument("histogram bucket width must be >= 1");
  DatasetManifest m;
  m.record_count = records.size();
  m.budgets_per_trace = budgets_per_trace;
  m.histogram_bucket = histogram_bucket;
  m.seed = seed;
  for (const auto& r : records) {
    ++m.difficulty_counts[r.difficulty];
    if (r.min_core_exceeds) ++m.min_core_exceeds_count;
    if (!r.budget) {
      ++m.unconditioned_count;
      continue;
    }
    ++m.budgeted_count;
    ++m.budget_histogram[(*r.budget / histogram_bucket) * histogram_bucket];
  }
  return m;
}

void to_json(nlohmann::json& j, const BudgetedExample& e) {
  const auto& vocab = textcodec::Vocab::standard();
  std::vector<std::string> cot_tokens;
  for (auto id : textcodec::encode_steps(vocab, e.cot)) cot_tokens.push_back(vocab.token(id));
  j = {{"task_id", e.task_id},
       {"question", e.question},
       {"difficulty", e.difficulty},
       {"budget", e.budget ? nlohmann::json(*e.budget) : nlohmann::json(nullptr)},
       {"cot_tokens", cot_tokens},
       {"answer", e.answer},
       {"source_len", e.source_len},
       {"min_core_exceeds", e.min_core_exceeds}};
}

void from_json(const nlohmann::json& j, BudgetedExample& e) {
  const auto& vocab = textcodec::Vocab::standard();
  j.at("task_id").get_to(e.task_id);
  j.at("question").get_to(e.question);
  j.at("difficulty").get_to(e.difficulty);
  const auto& b = j.at("budget");
  e.budget = b.is_null() ? std::nullopt : std::optional<int>(b.get<int>());
  textcodec::Tokens ids;
  for (const auto& tok : j.at("cot_tokens")) ids.push_back(vocab.id(tok.get<std::string>()));
  auto tagged = textcodec::split_steps(vocab, ids);
  if (!tagged.preamble.empty()) throw std::invalid_argument("cot_tokens must start with a step marker");
  e.cot = std::move(tagged.steps);
  e.cot_len = static_cast<int>(ids.size());
  j.at("answer").get_to(e.answer);
  j.at("source_len").get_to(e.source_len);
  j.at("min_core_exceeds").get_to(e.min_core_exceeds);
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
  nlohmann::json hist = nlohmann::json::object();
  for (auto [lo, n] : m.budget_histogram) hist[std::to_string(lo)] = n;
  nlohmann::json diff = nlohmann::json::object();
  for (auto [d, n] : m.difficulty_counts) diff[std::to_string(d)] = n;
  j = {{"record_count", m.record_count},
       {"budgeted_count", m.budgeted_count},
       {"unconditioned_count", m.unconditioned_count},
       {"min_core_exceeds_count", m.min_core_exceeds_count},
       {"budgets_per_trace", m.budgets_per_trace},
       {"histogram_bucket", m.histogram_bucket},
       {"budget_histogram", hist},
       {"difficulty_counts", diff},
       {"seed", m.seed}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
  j.at("record_count").get_to(m.record_count);
  j.at("budgeted_count").get_to(m.budgeted_count);
  j.at("unconditioned_count").get_to(m.unconditioned_count);
  j.at("min_core_exceeds_count").get_to(m.min_core_exceeds_count);
  j.at("budgets_per_trace").get_to(m.budgets_per_trace);
  j.at("histogram_bucket").get_to(m.histogram_bucket);
  j.at("seed").get_to(m.seed);
  m.budget_histogram.clear();
  for (auto& [k, v] : j.at("budget_histogram").items()) m.budget_histogram[std::stoi(k)] = v.get<std::size_t>();
  m.difficulty_counts.clear();
  for (auto& [k, v] : j.at("difficulty_counts").items()) m.difficulty_counts[std::stoi(k)] = v.get<std::size_t>();
}

}  // namespace bard::budgetpress
