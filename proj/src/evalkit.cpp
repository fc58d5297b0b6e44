#include "bard/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace bard::evalkit {

double fidelity(std::span<const int> think_lens, int budget) {
  if (think_lens.empty()) throw std::invalid_argument("fidelity of an empty sample");
  const auto ok = std::count_if(think_lens.begin(), think_lens.end(), [budget](int l) { return l <= budget; });
  return static_cast<double>(ok) / static_cast<double>(think_lens.size());
}

double ups(double acc, double fid, double w) { return w * acc + (1.0 - w) * fid; }

double mean(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("mean of an empty sample");
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("pearson needs two equal samples of size >= 2");
  const double mx = mean(x), my = mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

Quantiles quantiles(std::span<const int> values) {
  if (values.empty()) throw std::invalid_argument("quantiles of an empty sample");
  std::vector<int> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  auto rank = [&](double p) {
    auto k = static_cast<std::size_t>(std::ceil(p * static_cast<double>(v.size())));
    return v[std::clamp<std::size_t>(k, 1, v.size()) - 1];
  };
  return {v.front(), rank(0.25), rank(0.5), rank(0.75), v.back()};
}

const BudgetRow* EvalReport::row(std::optional<int> budget) const {
  for (const auto& r : rows)
    if (r.budget == budget) return &r;
  return nullptr;
}

EvalReport aggregate(std::vector<EvalSample> samples, std::span<const int> budgets, bool include_unconstrained,
                     double w, double budget_scale) {
  if (budgets.empty()) throw std::invalid_argument("evaluation needs at least one budget");
  EvalReport report;
  report.w = w;
  report.budget_scale = budget_scale;

  auto make_row = [&](std::optional<int> budget) {
    BudgetRow row;
    row.budget = budget;
    std::vector<int> lens;
    std::size_t correct = 0;
    for (const auto& s : samples) {
      if (s.budget != budget) continue;
      lens.push_back(s.think_len);
      correct += s.correct;
    }
    if (lens.empty())
      throw std::invalid_argument(
          fmt::format("no samples for budget {}", budget ? std::to_string(*budget) : std::string("n/a")));
    row.n = lens.size();
    row.accuracy = static_cast<double>(correct) / static_cast<double>(row.n);
    if (budget) {
      row.fidelity = fidelity(lens, *budget);
      row.ups = ups(row.accuracy, *row.fidelity, w);
    }
    row.lengths = quantiles(lens);
    double total = 0.0;
    for (int l : lens) total += l;
    row.mean_think_len = total / static_cast<double>(row.n);
    return row;
  };

  std::vector<double> per_budget_ups;
  std::size_t pooled_n = 0, pooled_correct = 0, pooled_fit = 0;
  for (int b : budgets) {
    report.rows.push_back(make_row(b));
    per_budget_ups.push_back(*report.rows.back().ups);
  }
  for (const auto& s : samples) {
    if (!s.budget) continue;
    ++pooled_n;
    pooled_correct += s.correct;
    pooled_fit += s.think_len <= *s.budget;
  }
  if (include_unconstrained) report.rows.push_back(make_row(std::nullopt));
  report.mean_ups = mean(per_budget_ups);
  report.pooled_accuracy = static_cast<double>(pooled_correct) / static_cast<double>(pooled_n);
  report.pooled_fidelity = static_cast<double>(pooled_fit) / static_cast<double>(pooled_n);
  report.pooled_ups = ups(report.pooled_accuracy, report.pooled_fidelity, w);
  report.samples = std::move(samples);
  return report;
}

EvalReport run_eval(const nanolm::ParameterStore& params, std::span<const taskgen::Task> tasks,
                    std::span<const int> budgets, const EvalOptions& options) {
  if (tasks.empty()) throw std::invalid_argument("evaluation needs at least one task");
  if (options.samples_per_task < 1) throw std::invalid_argument("samples_per_task must be >= 1");
  const auto& vocab = textcodec::Vocab::standard();
  const int context = params.config().context_len;

  std::vector<std::optional<int>> sweep(budgets.begin(), budgets.end());
  if (options.include_unconstrained) sweep.push_back(std::nullopt);

  std::vector<EvalSample> samples;
  for (std::size_t bi = 0; bi < sweep.size(); ++bi) {
    for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
      const auto& task = tasks[ti];
      const auto prompt =
          textcodec::encode_prompt(vocab, task, options.budget_in_prompt ? sweep[bi] : std::nullopt);
      const int room = context - static_cast<int>(prompt.size());
      const int max_new = options.max_new > 0 ? std::min(options.max_new, room) : room;
      for (int k = 0; k < options.samples_per_task; ++k) {
        Rng rng = make_rng(options.seed, "evalkit.sample", (bi * tasks.size() + ti) * 1000 + static_cast<std::size_t>(k));
        const auto gen = nanolm::sample(params, prompt, options.temperature, max_new, vocab.eos(), rng);
        auto parsed = textcodec::parse_generation(vocab, gen.tokens);
        EvalSample s;
        s.task_id = task.id;
        s.difficulty = task.difficulty;
        s.budget = sweep[bi];
        s.think_len = parsed.think_len;
        s.malformed = parsed.malformed;
        s.correct = !parsed.malformed && taskgen::verify_answer(parsed.answer_text, task.gold_answer);
        s.think_tokens = std::move(parsed.think_tokens);
        samples.push_back(std::move(s));
      }
    }
  }
  return aggregate(std::move(samples), budgets, options.include_unconstrained, options.w, options.budget_scale);
}

std::vector<BehaviorProfile> behavior_profile(std::span<const Generation> generations, int bucket_width,
                                              const textcodec::Vocab& vocab) {
  if (bucket_width < 1) throw std::invalid_argument("bucket width must be >= 1");
  std::map<std::optional<int>, BehaviorProfile> by_bucket;
  std::map<std::optional<int>, std::array<std::size_t, kStepKindCount>> counts;
  for (const auto& g : generations) {
    std::optional<int> bucket;
    if (g.budget) bucket = (*g.budget / bucket_width) * bucket_width;
    auto& prof = by_bucket[bucket];
    prof.bucket = bucket;
    ++prof.generations;
    const auto tagged = textcodec::split_steps(vocab, g.think_tokens);
    prof.residual_tokens += tagged.preamble.size();
    for (const auto& step : tagged.steps) {
      ++counts[bucket][static_cast<std::size_t>(step.kind)];
      ++prof.tagged_steps;
    }
  }
  std::vector<BehaviorProfile> out;
  for (auto& [bucket, prof] : by_bucket) {
    if (prof.tagged_steps > 0)
      for (std::size_t k = 0; k < kStepKindCount; ++k)
        prof.proportions[k] = static_cast<double>(counts[bucket][k]) / static_cast<double>(prof.tagged_steps);
    out.push_back(prof);
  }
  // Budgeted buckets in ascending order, the unbudgeted bucket last.
  std::stable_partition(out.begin(), out.end(), [](const auto& p) { return p.bucket.has_value(); });
  return out;
}

std::vector<BehaviorProfile> behavior_profile(const EvalReport& report, int bucket_width) {
  std::vector<Generation> gens;
  gens.reserve(report.samples.size());
  for (const auto& s : report.samples) gens.push_back({s.budget, s.think_tokens});
  return behavior_profile(gens, bucket_width);
}

namespace {

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }
nlohmann::json opt_json(const std::optional<int>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::string opt_csv(const std::optional<double>& v) { return v ? fmt::format("{}", *v) : std::string("n/a"); }

}  // namespace

nlohmann::json to_json(const EvalReport& report, bool include_samples) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"budget", opt_json(r.budget)},
                    {"n", r.n},
                    {"accuracy", r.accuracy},
                    {"fidelity", opt_json(r.fidelity)},
                    {"ups", opt_json(r.ups)},
                    {"lengths",
                     {{"min", r.lengths.min},
                      {"q1", r.lengths.q1},
                      {"median", r.lengths.median},
                      {"q3", r.lengths.q3},
                      {"max", r.lengths.max}}},
                    {"mean_think_len", r.mean_think_len}});
  }
  nlohmann::json j = {{"w", report.w},
                      {"budget_scale", report.budget_scale},
                      {"rows", rows},
                      {"mean_ups_per_budget", report.mean_ups},
                      {"pooled_accuracy", report.pooled_accuracy},
                      {"pooled_fidelity", report.pooled_fidelity},
                      {"pooled_ups", report.pooled_ups}};
  if (include_samples) {
    const auto& vocab = textcodec::Vocab::standard();
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& s : report.samples)
      samples.push_back({{"task_id", s.task_id},
                         {"difficulty", s.difficulty},
                         {"budget", opt_json(s.budget)},
                         {"think_len", s.think_len},
                         {"correct", s.correct},
                         {"malformed", s.malformed},
                         {"think", textcodec::detokenize(vocab, s.think_tokens)}});
    j["samples"] = samples;
  }
  return j;
}

nlohmann::json to_json(std::span<const BehaviorProfile> profiles) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& p : profiles) {
    nlohmann::json props = nlohmann::json::object();
    for (auto kind : taskgen::kAllStepKinds) props[std::string(taskgen::to_string(kind))] = p.proportion(kind);
    out.push_back({{"bucket", opt_json(p.bucket)},
                   {"proportions", props},
                   {"tagged_steps", p.tagged_steps},
                   {"residual_tokens", p.residual_tokens},
                   {"generations", p.generations}});
  }
  return out;
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.w = j.at("w").get<double>();
  r.budget_scale = j.value("budget_scale", 1.0);
  r.mean_ups = j.at("mean_ups_per_budget").get<double>();
  r.pooled_accuracy = j.at("pooled_accuracy").get<double>();
  r.pooled_fidelity = j.at("pooled_fidelity").get<double>();
  r.pooled_ups = j.at("pooled_ups").get<double>();
  for (const auto& jr : j.at("rows")) {
    BudgetRow row;
    if (!jr.at("budget").is_null()) row.budget = jr.at("budget").get<int>();
    row.n = jr.at("n").get<std::size_t>();
    row.accuracy = jr.at("accuracy").get<double>();
    if (!jr.at("fidelity").is_null()) row.fidelity = jr.at("fidelity").get<double>();
    if (!jr.at("ups").is_null()) row.ups = jr.at("ups").get<double>();
    const auto& l = jr.at("lengths");
    row.lengths = {l.at("min"), l.at("q1"), l.at("median"), l.at("q3"), l.at("max")};
    row.mean_think_len = jr.at("mean_think_len").get<double>();
    r.rows.push_back(row);
  }
  return r;
}

std::string to_csv(const EvalReport& report) {
  std::string out = "budget,n,accuracy,fidelity,ups,min,q1,median,q3,max,mean_think_len\n";
  for (const auto& r : report.rows)
    out += fmt::format("{},{},{},{},{},{},{},{},{},{},{}\n", r.budget ? std::to_string(*r.budget) : "n/a", r.n,
                       r.accuracy, opt_csv(r.fidelity), opt_csv(r.ups), r.lengths.min, r.lengths.q1,
                       r.lengths.median, r.lengths.q3, r.lengths.max, r.mean_think_len);
  return out;
}

std::string plot_data_csv(const EvalReport& report) {
  std::vector<std::vector<int>> columns;
  std::string out;
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto& r = report.rows[i];
    out += (i ? "," : "") + (r.budget ? fmt::format("b{}", *r.budget) : std::string("n/a"));
    std::vector<int> col;
    for (const auto& s : report.samples)
      if (s.budget == r.budget) col.push_back(s.think_len);
    columns.push_back(std::move(col));
  }
  out += "\n";
  std::size_t depth = 0;
  for (const auto& c : columns) depth = std::max(depth, c.size());
  for (std::size_t k = 0; k < depth; ++k) {
    for (std::size_t i = 0; i < columns.size(); ++i) {
      if (i) out += ",";
      if (k < columns[i].size()) out += std::to_string(columns[i][k]);
    }
    out += "\n";
  }
  return out;
}

}  // namespace bard::evalkit
