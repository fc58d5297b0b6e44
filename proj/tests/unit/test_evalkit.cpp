#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "bard/budgetpress.hpp"
#include "bard/evalkit.hpp"

using namespace bard::evalkit;
using bard::taskgen::StepKind;

namespace {

// Row average the way the results table reports it: plain arithmetic mean.
double table_mean(std::vector<double> v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

EvalSample sample_of(std::optional<int> budget, int len, bool correct) {
  EvalSample s;
  s.task_id = "t";
  s.budget = budget;
  s.think_len = len;
  s.correct = correct;
  return s;
}

}  // namespace

TEST(Fidelity, Counts) {
  const std::vector<int> all_in = {1, 2, 3};
  EXPECT_EQ(fidelity(all_in, 3), 1.0);
  const std::vector<int> half = {400, 600};
  EXPECT_EQ(fidelity(half, 500), 0.5);
  const std::vector<int> boundary = {500};
  EXPECT_EQ(fidelity(boundary, 500), 1.0);
  EXPECT_THROW(fidelity(std::vector<int>{}, 5), std::invalid_argument);
}

TEST(Ups, FixedPointAndMonotone) {
  for (double w : {0.0, 0.3, 0.5, 1.0}) EXPECT_DOUBLE_EQ(ups(0.42, 0.42, w), 0.42);
  EXPECT_EQ(ups(0.0, 1.0), 0.5);
  for (double a = 0.0; a <= 1.0; a += 0.1)
    for (double f = 0.0; f <= 1.0; f += 0.1) {
      EXPECT_LE(ups(a, f, 0.3), ups(a + 0.05, f, 0.3));
      EXPECT_LE(ups(a, f, 0.3), ups(a, f + 0.05, 0.3));
    }
}

TEST(Ups, PublishedRowAverages) {
  // Per-budget UPS rows from the published results table, rounded there to
  // three places.
  EXPECT_NEAR(table_mean({0.697, 0.672, 0.656, 0.649, 0.742, 0.763}), 0.696, 0.0005 + 1e-9);
  EXPECT_NEAR(table_mean({0.561, 0.587, 0.537, 0.528, 0.646, 0.670}), 0.588, 0.0005);
  EXPECT_NEAR(table_mean({0.269, 0.397, 0.337, 0.432, 0.458, 0.607}), 0.417, 0.0005);
  EXPECT_NEAR(mean(std::vector<double>{0.561, 0.587, 0.537, 0.528, 0.646, 0.670}), 0.588, 0.0005);
}

TEST(Quantiles, NearestRank) {
  const std::vector<int> v = {5, 3, 1, 4, 2};
  EXPECT_EQ(quantiles(v), (Quantiles{1, 2, 3, 4, 5}));
  const std::vector<int> one = {7};
  EXPECT_EQ(quantiles(one), (Quantiles{7, 7, 7, 7, 7}));
  const std::vector<int> four = {10, 20, 30, 40};
  EXPECT_EQ(quantiles(four), (Quantiles{10, 10, 20, 30, 40}));
  EXPECT_THROW(quantiles(std::vector<int>{}), std::invalid_argument);
}

TEST(Pearson, KnownValues) {
  const std::vector<double> x = {1, 2, 3, 4};
  const std::vector<double> y = {2, 4, 6, 8};
  const std::vector<double> z = {8, 6, 4, 2};
  const std::vector<double> c = {5, 5, 5, 5};
  EXPECT_NEAR(pearson(x, y), 1.0, 1e-15);
  EXPECT_NEAR(pearson(x, z), -1.0, 1e-15);
  EXPECT_EQ(pearson(x, c), 0.0);
  const std::vector<double> a = {1, 2, 3}, b = {1, 3, 2};
  EXPECT_NEAR(pearson(a, b), 0.5, 1e-15);
}

TEST(Aggregate, DegenerateShortWrongPolicy) {
  std::vector<EvalSample> samples;
  for (int b : {16, 32})
    for (int i = 0; i < 5; ++i) samples.push_back(sample_of(b, 0, false));
  const std::vector<int> budgets = {16, 32};
  const auto r = aggregate(samples, budgets, false);
  for (const auto& row : r.rows) {
    EXPECT_EQ(*row.fidelity, 1.0);
    EXPECT_EQ(row.accuracy, 0.0);
    EXPECT_EQ(*row.ups, 0.5);
  }
  EXPECT_EQ(r.mean_ups, 0.5);
}

TEST(Aggregate, SelfConsistentColumnsAndPooling) {
  bard::Rng rng{3};
  std::uniform_int_distribution<int> len{0, 60};
  std::bernoulli_distribution coin{0.6};
  std::vector<EvalSample> samples;
  const std::vector<int> budgets = {16, 24, 40, 64};
  for (int b : budgets)
    for (int i = 0; i < 37; ++i) samples.push_back(sample_of(b, len(rng), coin(rng)));
  for (int i = 0; i < 37; ++i) samples.push_back(sample_of(std::nullopt, len(rng), coin(rng)));
  const auto r = aggregate(samples, budgets, true, 0.5);
  ASSERT_EQ(r.rows.size(), 5u);
  EXPECT_FALSE(r.rows.back().budget);
  EXPECT_FALSE(r.rows.back().fidelity);
  double sum = 0.0, acc = 0.0, fid = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& row = r.rows[i];
    EXPECT_NEAR(*row.ups, 0.5 * row.accuracy + 0.5 * *row.fidelity, 1e-12);
    sum += *row.ups;
    acc += row.accuracy;
    fid += *row.fidelity;
    // Direct per-budget pooling of the indicators.
    int c = 0, f = 0;
    for (const auto& s : samples)
      if (s.budget == row.budget) {
        c += s.correct;
        f += s.think_len <= *s.budget;
      }
    EXPECT_DOUBLE_EQ(row.accuracy, c / 37.0);
    EXPECT_DOUBLE_EQ(*row.fidelity, f / 37.0);
  }
  EXPECT_NEAR(r.mean_ups, sum / 4.0, 1e-12);
  // Equal row sizes: pooled values equal the row means.
  EXPECT_NEAR(r.pooled_accuracy, acc / 4.0, 1e-12);
  EXPECT_NEAR(r.pooled_fidelity, fid / 4.0, 1e-12);
}

TEST(Report, JsonAndCsv) {
  std::vector<EvalSample> samples = {sample_of(8, 4, true), sample_of(8, 10, false), sample_of(std::nullopt, 3, true)};
  const std::vector<int> budgets = {8};
  const auto r = aggregate(samples, budgets, true);
  const auto csv = to_csv(r);
  EXPECT_NE(csv.find("8,2,0.5,0.5,0.5,4,4,4,10,10,7"), std::string::npos) << csv;
  EXPECT_NE(csv.find("n/a,1,1,n/a,n/a"), std::string::npos) << csv;
  const auto back = report_from_json(to_json(r));
  EXPECT_EQ(back.rows.size(), 2u);
  EXPECT_EQ(back.rows[0].fidelity, r.rows[0].fidelity);
  EXPECT_FALSE(back.rows[1].budget);
  const auto plot = plot_data_csv(r);
  EXPECT_EQ(plot, "b8,n/a\n4,3\n10,\n");
}

TEST(Behavior, TeacherTracesShowVerifyAndExplore) {
  const auto& vocab = bard::textcodec::Vocab::standard();
  std::vector<Generation> gens;
  for (std::uint64_t s = 0; s < 30; ++s) {
    const auto tr = bard::taskgen::teacher_trace(bard::taskgen::generate_task(s, 3), bard::taskgen::Verbosity::High);
    gens.push_back({100, bard::textcodec::encode_steps(vocab, tr.steps)});
  }
  const auto prof = behavior_profile(gens);
  ASSERT_EQ(prof.size(), 1u);
  EXPECT_GT(prof[0].proportion(StepKind::Verify), 0.0);
  EXPECT_GT(prof[0].proportion(StepKind::Explore), 0.0);
  double total = 0.0;
  for (double p : prof[0].proportions) total += p;
  EXPECT_NEAR(total, 1.0, 1e-9);
  EXPECT_EQ(prof[0].residual_tokens, 0u);
}

TEST(Behavior, TightCompressionHasNoExplore) {
  const auto& vocab = bard::textcodec::Vocab::standard();
  std::vector<Generation> gens;
  for (std::uint64_t s = 0; s < 30; ++s) {
    const auto tr = bard::taskgen::teacher_trace(bard::taskgen::generate_task(s, 3), bard::taskgen::Verbosity::High);
    const auto e = bard::budgetpress::compress_trace(tr, 20);
    gens.push_back({20, bard::textcodec::encode_steps(vocab, e.cot)});
  }
  const auto prof = behavior_profile(gens);
  EXPECT_EQ(prof[0].proportion(StepKind::Explore), 0.0);
}

TEST(Behavior, ResidualAndBuckets) {
  const auto& vocab = bard::textcodec::Vocab::standard();
  bard::textcodec::Tokens think = {vocab.id("so"), vocab.step_marker(StepKind::Derive), vocab.digit(1)};
  std::vector<Generation> gens = {{10, think}, {17, think}, {std::nullopt, {}}};
  const auto prof = behavior_profile(gens, 8);
  ASSERT_EQ(prof.size(), 3u);
  EXPECT_EQ(prof[0].bucket, 8);
  EXPECT_EQ(prof[1].bucket, 16);
  EXPECT_FALSE(prof[2].bucket);
  EXPECT_EQ(prof[0].residual_tokens, 1u);
  EXPECT_EQ(prof[0].proportion(StepKind::Derive), 1.0);
  EXPECT_EQ(prof[2].tagged_steps, 0u);
}

TEST(RunEval, DeterministicOnFixedCheckpoint) {
  bard::nanolm::ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.model_dim = 16;
  c.ff_dim = 32;
  c.context_len = 64;
  c.vocab_size = static_cast<int>(bard::textcodec::Vocab::standard().size());
  bard::nanolm::ParameterStore p{c};
  p.init_normal(4, 0.5);
  std::vector<bard::taskgen::Task> tasks;
  for (std::uint64_t s = 0; s < 4; ++s) tasks.push_back(bard::taskgen::generate_task(s, 2));
  const std::vector<int> budgets = {8, 16};
  EvalOptions o;
  o.include_unconstrained = true;
  const auto a = run_eval(p, tasks, budgets, o), b = run_eval(p, tasks, budgets, o);
  EXPECT_EQ(to_csv(a), to_csv(b));
  EXPECT_EQ(a.rows.size(), 3u);
  EXPECT_EQ(a.samples.size(), 12u);
  for (const auto& s : a.samples) EXPECT_FALSE(s.correct && s.malformed);
}
