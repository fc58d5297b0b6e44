#include <filesystem>

#include <gtest/gtest.h>

#include "bard/sft.hpp"

using namespace bard;
using namespace bard::sft;

namespace {

const textcodec::Vocab& V() { return textcodec::Vocab::standard(); }

std::vector<budgetpress::TracedTask> traces(int n, int difficulty) {
  std::vector<budgetpress::TracedTask> out;
  for (int i = 0; i < n; ++i) {
    auto t = taskgen::generate_task(static_cast<std::uint64_t>(i), difficulty);
    auto tr = taskgen::teacher_trace(t, taskgen::Verbosity::High);
    out.push_back({std::move(t), std::move(tr)});
  }
  return out;
}

nanolm::ModelConfig tiny_model(int context) {
  nanolm::ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.model_dim = 32;
  c.ff_dim = 64;
  c.context_len = context;
  c.vocab_size = static_cast<int>(V().size());
  return c;
}

}  // namespace

TEST(TrainingSequence, MaskCoversCompletionOnly) {
  const auto ds = budgetpress::build_contrastive_set(traces(20, 3), 3, 1);
  for (const auto& r : ds.records) {
    const auto seq = make_training_sequence(r);
    const auto prompt = textcodec::encode_prompt(V(), r.question, r.budget);
    ASSERT_EQ(seq.prompt_len, static_cast<int>(prompt.size()));
    ASSERT_TRUE(std::equal(prompt.begin(), prompt.end(), seq.tokens.begin()));
    for (int i = 0; i < seq.prompt_len; ++i) EXPECT_EQ(seq.loss_mask[static_cast<std::size_t>(i)], 0);
    for (std::size_t i = static_cast<std::size_t>(seq.prompt_len); i < seq.tokens.size(); ++i)
      EXPECT_EQ(seq.loss_mask[i], 1);
    const auto answer_len = textcodec::tokenize(V(), r.answer).size();
    // </think> <answer> ... </answer> <eos>
    EXPECT_EQ(seq.tokens.size(), prompt.size() + static_cast<std::size_t>(r.cot_len) + answer_len + 4);
    EXPECT_EQ(seq.tokens.back(), V().eos());
    // Budget digits come before every reasoning token.
    EXPECT_EQ(seq.tokens[1], V().budget_open());
  }
}

TEST(TrainingSequence, CodecRecoversThinkLength) {
  const auto ds = budgetpress::build_contrastive_set(traces(70, 4), 3, 2);
  ASSERT_GE(ds.records.size(), 200u);
  for (std::size_t i = 0; i < 200; ++i) {
    const auto& r = ds.records[i];
    const auto seq = make_training_sequence(r);
    const auto parsed = textcodec::parse_generation(V(), std::span{seq.tokens}.subspan(static_cast<std::size_t>(seq.prompt_len)));
    EXPECT_EQ(parsed.think_len, r.cot_len);
    EXPECT_EQ(parsed.answer_text, r.answer);
    EXPECT_FALSE(parsed.malformed);
  }
}

TEST(TrainingSequence, ContrastivePairsShareQuestion) {
  const auto ds = budgetpress::build_contrastive_set(traces(10, 2), 3, 3);
  std::map<std::string, textcodec::Tokens> question_tokens;
  for (const auto& r : ds.records) {
    const auto seq = make_training_sequence(r);
    const auto decoded = textcodec::decode_prompt(V(), std::span{seq.tokens}.first(static_cast<std::size_t>(seq.prompt_len)));
    EXPECT_EQ(decoded.budget, r.budget);
    auto q = textcodec::tokenize(V(), decoded.question);
    auto [it, fresh] = question_tokens.emplace(r.task_id, q);
    if (!fresh) EXPECT_EQ(it->second, q);
  }
}

TEST(Prepare, SkipsOverLength) {
  const auto ds = budgetpress::build_contrastive_set(traces(10, 5), 3, 1);
  const auto all = prepare(ds.records, 10000);
  EXPECT_EQ(all.skipped_over_length, 0u);
  const auto none = prepare(ds.records, 10);
  EXPECT_EQ(none.skipped_over_length, ds.records.size());
  EXPECT_TRUE(none.sequences.empty());
}

TEST(MixRecords, Ratio) {
  const auto tr = traces(40, 2);
  const auto aware = budgetpress::build_contrastive_set(tr, 3, 1).records;
  const auto standard = budgetpress::build_unconditioned_set(tr).records;
  const auto mixed = mix_records(aware, standard, 0.75, 1);
  std::size_t n_aware = 0;
  for (const auto& r : mixed) n_aware += r.budget.has_value();
  EXPECT_EQ(n_aware, 120u);
  EXPECT_EQ(mixed.size(), 160u);
  EXPECT_EQ(mix_records(aware, standard, 0.0, 1).size(), 40u);
  EXPECT_EQ(mix_records(aware, standard, 1.0, 1).size(), 120u);
  EXPECT_THROW(mix_records(aware, standard, 1.5, 1), std::invalid_argument);
}

TEST(TrainSft, EmptyDatasetThrows) {
  nanolm::ParameterStore p{tiny_model(64)};
  EXPECT_THROW(train_sft(p, {}, SftConfig{}), std::invalid_argument);
}

TEST(TrainSft, MemorizesSmallSet) {
  auto ds = budgetpress::build_contrastive_set(traces(11, 1), 3, 4).records;
  ds.resize(32);
  nanolm::ParameterStore p{tiny_model(64)};
  p.init_normal(1);
  SftConfig c;
  c.epochs = 50;
  c.batch_size = 8;  // 4 steps per epoch, 200 steps
  c.lr = 3e-3;
  SftOptions o;
  o.log_progress = false;
  const auto report = train_sft(p, ds, c, o);
  EXPECT_EQ(report.steps, 200);
  EXPECT_LT(report.epoch_train_loss.back(), 0.1);
  for (double l : report.epoch_train_loss) EXPECT_GE(l, 0.0);
}

TEST(TrainSft, DeterministicAndCheckpointsEachEpoch) {
  auto ds = budgetpress::build_contrastive_set(traces(6, 2), 3, 4).records;
  SftConfig c;
  c.epochs = 2;
  c.batch_size = 4;
  const auto dir = std::filesystem::temp_directory_path() / "bard_sft_test";
  std::filesystem::remove_all(dir);
  SftOptions o;
  o.out_dir = dir;
  o.log_progress = false;
  o.heldout = {ds.back()};
  nanolm::ParameterStore a{tiny_model(96)}, b{tiny_model(96)};
  a.init_normal(2);
  b.init_normal(2);
  const auto ra = train_sft(a, ds, c, o);
  o.out_dir.reset();
  train_sft(b, ds, c, o);
  EXPECT_EQ(a, b);
  ASSERT_EQ(ra.checkpoints.size(), 2u);
  EXPECT_EQ(nanolm::load_checkpoint(ra.checkpoints.back()).params, a);
  EXPECT_TRUE(std::filesystem::exists(dir / "sft_report.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "sft_curve.csv"));
  EXPECT_TRUE(ra.heldout_loss.has_value());
  std::filesystem::remove_all(dir);
}

TEST(TrainSft, NonFiniteLossAborts) {
  auto ds = budgetpress::build_contrastive_set(traces(3, 1), 3, 4).records;
  nanolm::ParameterStore p{tiny_model(64)};
  p.init_normal(3);
  p.array("head.w")[0] = std::numeric_limits<double>::infinity();
  SftOptions o;
  o.log_progress = false;
  try {
    train_sft(p, ds, SftConfig{}, o);
    FAIL() << "expected an exception";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("task-"), std::string::npos) << e.what();
  }
}
