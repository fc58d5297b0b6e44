#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "bard/nanolm.hpp"
#include "gradcheck.hpp"

using namespace bard::nanolm;

namespace {

ParameterStore random_params(const ModelConfig& c, std::uint64_t seed, double stddev = 0.3) {
  return oracle::random_params(c, seed, stddev);
}

ModelConfig small_config() {
  ModelConfig c = oracle::micro_config();
  c.context_len = 24;
  c.vocab_size = 30;
  return c;
}

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig c = small_config();
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config();
  c.vocab_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Forward, ZeroParamsGiveUniformLogits) {
  ParameterStore p{small_config()};
  const auto cache = forward(p, std::vector<TokenId>{1, 5, 7, 2});
  for (double v : cache.logits) EXPECT_EQ(v, cache.logits[0]);
}

TEST(Forward, Causal) {
  const auto p = random_params(small_config(), 1);
  std::vector<TokenId> a = {1, 2, 3, 4, 5, 6, 7, 8};
  auto b = a;
  std::swap(b[6], b[7]);
  const auto ca = forward(p, a), cb = forward(p, b);
  const std::size_t V = 30;
  for (std::size_t i = 0; i < 6 * V; ++i) EXPECT_EQ(ca.logits[i], cb.logits[i]);
  bool differs = false;
  for (std::size_t i = 6 * V; i < 8 * V; ++i) differs |= ca.logits[i] != cb.logits[i];
  EXPECT_TRUE(differs);
}

TEST(Forward, DeterministicAndFinite) {
  const auto p = random_params(small_config(), 2);
  const std::vector<TokenId> toks = {3, 1, 4, 1, 5, 9, 2, 6};
  const auto a = forward(p, toks), b = forward(p, toks);
  EXPECT_EQ(a.logits, b.logits);
  for (double v : a.logits) EXPECT_TRUE(std::isfinite(v));
}

TEST(Forward, RejectsBadInput) {
  const auto p = random_params(small_config(), 3);
  EXPECT_THROW(forward(p, std::vector<TokenId>(25, 1)), std::invalid_argument);
  EXPECT_THROW(forward(p, std::vector<TokenId>{}), std::invalid_argument);
  EXPECT_THROW(forward(p, std::vector<TokenId>{30}), std::invalid_argument);
  EXPECT_NO_THROW(forward(p, std::vector<TokenId>(24, 1)));
}

TEST(Loss, UniformLogitsGiveLogV) {
  const int V = 17;
  std::vector<double> logits(3 * V, 0.25);
  const std::vector<TokenId> targets = {1, 2, 3};
  const std::vector<std::uint8_t> mask = {1, 0, 1};
  EXPECT_NEAR(loss_xent(logits, V, targets, mask), std::log(17.0), 1e-12);
}

TEST(Loss, ConfidentCorrectLogitApproachesZero) {
  const int V = 10;
  std::vector<double> logits(V, 0.0);
  logits[4] = 50.0;
  const std::vector<TokenId> targets = {4};
  const std::vector<std::uint8_t> mask = {1};
  const double l = loss_xent(logits, V, targets, mask);
  EXPECT_GE(l, 0.0);
  EXPECT_LT(l, 1e-3);
}

TEST(Loss, AllZeroMaskThrows) {
  std::vector<double> logits(4, 0.0);
  const std::vector<TokenId> targets = {1, 1};
  const std::vector<std::uint8_t> mask = {0, 0};
  EXPECT_THROW(loss_xent(logits, 2, targets, mask), std::invalid_argument);
  const std::vector<std::uint8_t> short_mask = {1};
  EXPECT_THROW(loss_xent(logits, 2, targets, short_mask), std::invalid_argument);
}

TEST(Backward, MatchesFiniteDifferences) {
  const auto c = oracle::micro_config();
  bard::Rng rng{17};
  for (int draw = 0; draw < 10; ++draw) {
    auto p = random_params(c, 100 + static_cast<std::uint64_t>(draw));
    const auto prob = oracle::random_problem(c, 4 + draw % 8, rng);
    const auto r = oracle::check_gradients(p, prob);
    EXPECT_LT(r.max_rel_error, 1e-4) << "draw " << draw;
    EXPECT_EQ(r.checked, p.size());
  }
}

TEST(Backward, AttentionAndFeedForwardSubsetsMatchFiniteDifferences) {
  const auto c = oracle::micro_config();
  bard::Rng rng{23};
  auto p = random_params(c, 5);
  const auto prob = oracle::random_problem(c, 10, rng);
  const auto attn = oracle::check_gradients(p, prob, [](const std::string& n) { return n.find(".attn.") != n.npos; });
  const auto ff = oracle::check_gradients(p, prob, [](const std::string& n) { return n.find(".ff.") != n.npos; });
  EXPECT_LT(attn.max_rel_error, 1e-4);
  EXPECT_LT(ff.max_rel_error, 1e-4);
  EXPECT_EQ(attn.checked, 2u * 4 * 64);
  EXPECT_EQ(ff.checked, 2u * (8 * 16 + 16 + 16 * 8 + 8));
}

TEST(Backward, DoublingLossDoublesGradients) {
  const auto c = small_config();
  const auto p = random_params(c, 6);
  bard::Rng rng{1};
  const auto prob = oracle::random_problem(c, 9, rng);
  const auto cache = forward(p, prob.tokens);
  std::vector<double> d1, d2;
  loss_xent(cache.logits, c.vocab_size, prob.targets, prob.mask, &d1, 1.0);
  loss_xent(cache.logits, c.vocab_size, prob.targets, prob.mask, &d2, 2.0);
  std::vector<double> g1(p.size(), 0.0), g2(p.size(), 0.0);
  backward(p, cache, d1, g1);
  backward(p, cache, d2, g2);
  for (std::size_t i = 0; i < g1.size(); ++i) ASSERT_EQ(g2[i], 2.0 * g1[i]);
}

TEST(Backward, MaskedOutPositionsContributeNothing) {
  const auto c = small_config();
  const auto p = random_params(c, 7);
  bard::Rng rng{2};
  auto prob = oracle::random_problem(c, 12, rng);
  const auto g = oracle::analytic_grad(p, prob);
  for (std::size_t t = 0; t < prob.mask.size(); ++t)
    if (!prob.mask[t]) prob.targets[t] = (prob.targets[t] + 7) % c.vocab_size;
  EXPECT_EQ(oracle::analytic_grad(p, prob), g);
}

TEST(Backward, PositionsAfterLastMaskedTargetAreDead) {
  // Tokens after the last supervised position cannot influence the loss, and
  // embedding rows of tokens that never appear receive exactly zero gradient.
  const auto c = small_config();
  const auto p = random_params(c, 8);
  oracle::GradProblem prob;
  prob.tokens = {1, 2, 3, 4, 5, 6, 7, 8};
  prob.targets = {2, 3, 4, 5, 6, 7, 8, 9};
  prob.mask = {0, 1, 1, 1, 0, 0, 0, 0};
  const auto g = oracle::analytic_grad(p, prob);
  auto other = prob;
  other.tokens[5] = 20;
  other.tokens[7] = 21;
  EXPECT_EQ(oracle::analytic_grad(p, other), g);

  const auto& emb = p.info("tok_emb");
  for (TokenId tok = 9; tok < c.vocab_size; ++tok)
    for (int i = 0; i < c.model_dim; ++i)
      ASSERT_EQ(g[emb.offset + static_cast<std::size_t>(tok * c.model_dim + i)], 0.0);
  const auto& pos = p.info("pos_emb");
  for (std::size_t i = 4 * 8; i < pos.size; ++i) ASSERT_EQ(g[pos.offset + i], 0.0);
}

TEST(Backward, MissingCacheIsAStateError) {
  const auto p = random_params(small_config(), 9);
  std::vector<double> grads(p.size(), 0.0);
  EXPECT_THROW(backward(p, ForwardCache{}, {}, grads), std::logic_error);
}

TEST(Sample, GreedyIsDeterministic) {
  const auto p = random_params(small_config(), 10, 1.0);
  const std::vector<TokenId> prompt = {1, 2, 3};
  bard::Rng r1{1}, r2{2};
  const auto a = sample(p, prompt, 0.0, 10, 0, r1);
  const auto b = sample(p, prompt, 0.0, 10, 0, r2);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.logprobs, b.logprobs);
}

TEST(Sample, GreedyTieBreaksToLowestId) {
  ParameterStore p{small_config()};
  bard::Rng rng{1};
  const auto out = sample(p, std::vector<TokenId>{4}, 0.0, 3, 29, rng);
  ASSERT_EQ(out.tokens.size(), 3u);
  for (auto t : out.tokens) EXPECT_EQ(t, 0);
}

TEST(Sample, LogprobsMatchTeacherForcedForward) {
  const auto p = random_params(small_config(), 11, 1.0);
  const std::vector<TokenId> prompt = {1, 2, 3, 4};
  for (double temp : {0.0, 1.0}) {
    bard::Rng rng{5};
    const auto out = sample(p, prompt, temp, 15, 0, rng);
    ASSERT_FALSE(out.tokens.empty());
    std::vector<TokenId> full = prompt;
    full.insert(full.end(), out.tokens.begin(), out.tokens.end());
    const auto lp = sequence_logprobs(p, full, prompt.size());
    ASSERT_EQ(lp.size(), out.logprobs.size());
    for (std::size_t i = 0; i < lp.size(); ++i) EXPECT_NEAR(lp[i], out.logprobs[i], 1e-12);
  }
}

TEST(Sample, StopsAtStopTokenAndContext) {
  const auto p = random_params(small_config(), 12, 1.0);
  bard::Rng rng{3};
  EXPECT_TRUE(sample(p, std::vector<TokenId>{1, 2}, 1.0, 0, 0, rng).tokens.empty());
  const auto long_run = sample(p, std::vector<TokenId>{1, 2}, 1.0, 100, -1, rng);
  EXPECT_EQ(long_run.tokens.size(), 22u);
  for (int rep = 0; rep < 20; ++rep) {
    const auto out = sample(p, std::vector<TokenId>{1}, 1.0, 20, 5, rng);
    for (std::size_t i = 0; i + 1 < out.tokens.size(); ++i) EXPECT_NE(out.tokens[i], 5);
  }
}

TEST(AdamW, ZeroGradientLeavesParamsUnchanged) {
  auto p = random_params(small_config(), 13);
  const auto before = p;
  AdamW opt{p};
  std::vector<double> zero(p.size(), 0.0);
  opt.step(p, zero, AdamConfig{});
  EXPECT_EQ(p, before);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(AdamW, NonFiniteGradientIsRejected) {
  auto p = random_params(small_config(), 14);
  const auto before = p;
  AdamW opt{p};
  std::vector<double> g(p.size(), 0.0);
  g[3] = std::nan("");
  EXPECT_THROW(opt.step(p, g, AdamConfig{}), std::runtime_error);
  EXPECT_EQ(p, before);
}

TEST(AdamW, ReducesLossOnMemorization) {
  const auto c = small_config();
  auto p = random_params(c, 15, 0.02);
  bard::Rng rng{4};
  const auto prob = oracle::random_problem(c, 12, rng);
  AdamW opt{p};
  AdamConfig ac;
  ac.lr = 1e-2;
  const double start = oracle::problem_loss(p, prob);
  for (int i = 0; i < 150; ++i) opt.step(p, oracle::analytic_grad(p, prob), ac);
  EXPECT_LT(oracle::problem_loss(p, prob), 0.05 * start);
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  std::vector<double> g = {3.0, 4.0};
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 1.0), 5.0);
  EXPECT_NEAR(std::hypot(g[0], g[1]), 1.0, 1e-15);
  std::vector<double> h = {0.3, 0.4};
  clip_grad_norm(h, 1.0);
  EXPECT_EQ(h, (std::vector<double>{0.3, 0.4}));
}

TEST(Checkpoint, BitExactRoundTrip) {
  const auto p = random_params(small_config(), 16);
  const auto path = std::filesystem::temp_directory_path() / "bard_ckpt_test.bin";
  CheckpointHeader h{p.config(), "abc123", 42, {{"note", "x"}}};
  save_checkpoint(path, p, h);
  const auto loaded = load_checkpoint(path);
  EXPECT_EQ(loaded.params, p);
  EXPECT_EQ(loaded.header.step, 42);
  EXPECT_EQ(loaded.header.vocab_hash, "abc123");
  EXPECT_EQ(loaded.header.config, p.config());
  EXPECT_EQ(loaded.header.extra["note"], "x");
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsGarbage) {
  const auto path = std::filesystem::temp_directory_path() / "bard_ckpt_garbage.bin";
  {
    std::ofstream out(path);
    out << "not a checkpoint";
  }
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
  std::filesystem::remove(path);
}

TEST(ParameterStore, LayoutIsSortedAndCoversBuffer) {
  const ParameterStore p{small_config()};
  std::size_t next = 0;
  for (std::size_t i = 0; i < p.layout().size(); ++i) {
    if (i) EXPECT_LT(p.layout()[i - 1].name, p.layout()[i].name);
    EXPECT_EQ(p.layout()[i].offset, next);
    next += p.layout()[i].size;
  }
  EXPECT_EQ(next, p.size());
  EXPECT_THROW(p.info("nope"), std::invalid_argument);
}
