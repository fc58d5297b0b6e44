#include "bard/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace bard::grpo {

std::string_view to_string(RewardMode mode) { return mode == RewardMode::Additive ? "additive" : "multiplicative"; }

RewardMode reward_mode_from_string(std::string_view name) {
  if (name == "multiplicative") return RewardMode::Multiplicative;
  if (name == "additive") return RewardMode::Additive;
  throw std::invalid_argument(fmt::format("unknown reward mode '{}'", name));
}

void RewardConfig::validate() const {
  if (!(alpha > 0.0)) throw std::invalid_argument("reward.alpha must be > 0");
  if (delta < 0.0 || delta > 1.0) throw std::invalid_argument("reward.delta must be in [0, 1]");
}

void to_json(nlohmann::json& j, const RewardConfig& c) {
  j = {{"alpha", c.alpha}, {"delta", c.delta}, {"mode", to_string(c.mode)}};
}

void from_json(const nlohmann::json& j, RewardConfig& c) {
  c.alpha = j.value("alpha", c.alpha);
  c.delta = j.value("delta", c.delta);
  if (j.contains("mode")) c.mode = reward_mode_from_string(j.at("mode").get<std::string>());
}

double reward_bud(int budget, int think_len, const RewardConfig& cfg) {
  return std::clamp(cfg.alpha * static_cast<double>(budget - think_len) + cfg.delta, 0.0, 1.0);
}

double reward_total(double r_acc, double r_bud, RewardMode mode) {
  return mode == RewardMode::Multiplicative ? r_acc * r_bud : 0.5 * (r_acc + r_bud);
}

std::vector<double> compute_advantages(std::span<const double> rewards) {
  const std::size_t g = rewards.size();
  if (g < 2) throw std::invalid_argument("advantages need a group of at least 2");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(g);
  double ss = 0.0;
  for (double r : rewards) ss += (r - mean) * (r - mean);
  const double sd = std::max(std::sqrt(ss / static_cast<double>(g - 1)), 1e-8);
  std::vector<double> out;
  out.reserve(g);
  for (double r : rewards) out.push_back((r - mean) / sd);
  return out;
}

bool filter_group(std::span<const double> r_acc, double low, double high) {
  if (r_acc.empty()) return false;
  double acc = 0.0;
  for (double a : r_acc) acc += a;
  acc /= static_cast<double>(r_acc.size());
  return !(acc < low || acc > high);
}

void RlConfig::validate() const {
  if (group_size < 2) throw std::invalid_argument("rl.group_size must be >= 2");
  if (batch_size < 1 || steps < 0) throw std::invalid_argument("rl.batch_size must be >= 1 and rl.steps >= 0");
  if (!(clip_eps > 0.0)) throw std::invalid_argument("rl.clip_eps must be > 0");
  if (!(0.0 <= low && low < high && high <= 1.0)) throw std::invalid_argument("rl thresholds need 0 <= low < high <= 1");
  if (b_min < 1 || b_max < b_min) throw std::invalid_argument("rl budget range needs 1 <= b_min <= b_max");
  if (kl_coef < 0.0 || weight_decay < 0.0 || grad_clip < 0.0) throw std::invalid_argument("rl regularizers must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("rl.lr must be > 0");
  if (updates_per_step < 1) throw std::invalid_argument("rl.updates_per_step must be >= 1");
  if (!(temperature > 0.0)) throw std::invalid_argument("rl.temperature must be > 0");
  if (max_new < 0 || log_buckets < 1) throw std::invalid_argument("rl.max_new must be >= 0, rl.log_buckets >= 1");
}

void to_json(nlohmann::json& j, const RlConfig& c) {
  j = {{"group_size", c.group_size},
       {"batch_size", c.batch_size},
       {"clip_eps", c.clip_eps},
       {"low", c.low},
       {"high", c.high},
       {"b_min", c.b_min},
       {"b_max", c.b_max},
       {"steps", c.steps},
       {"seed", c.seed},
       {"kl_coef", c.kl_coef},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"grad_clip", c.grad_clip},
       {"updates_per_step", c.updates_per_step},
       {"temperature", c.temperature},
       {"max_new", c.max_new},
       {"use_budget", c.use_budget},
       {"log_buckets", c.log_buckets}};
}

void from_json(const nlohmann::json& j, RlConfig& c) {
  c.group_size = j.value("group_size", c.group_size);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.clip_eps = j.value("clip_eps", c.clip_eps);
  c.low = j.value("low", c.low);
  c.high = j.value("high", c.high);
  c.b_min = j.value("b_min", c.b_min);
  c.b_max = j.value("b_max", c.b_max);
  c.steps = j.value("steps", c.steps);
  c.seed = j.value("seed", c.seed);
  c.kl_coef = j.value("kl_coef", c.kl_coef);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.updates_per_step = j.value("updates_per_step", c.updates_per_step);
  c.temperature = j.value("temperature", c.temperature);
  c.max_new = j.value("max_new", c.max_new);
  c.use_budget = j.value("use_budget", c.use_budget);
  c.log_buckets = j.value("log_buckets", c.log_buckets);
}

void score(Trajectory& t, std::string_view gold, const RewardConfig& cfg, const textcodec::Vocab& vocab) {
  const auto parsed = textcodec::parse_generation(vocab, t.tokens);
  t.think_len = parsed.think_len;
  t.malformed = parsed.malformed;
  t.r_acc = !parsed.malformed && taskgen::verify_answer(parsed.answer_text, gold) ? 1.0 : 0.0;
  t.r_bud = t.budget ? reward_bud(*t.budget, t.think_len, cfg) : 1.0;
  t.reward = reward_total(t.r_acc, t.r_bud, cfg.mode);
}

void finalize_group(RolloutGroup& group, double low, double high) {
  group.rewards.clear();
  std::vector<double> acc;
  for (const auto& t : group.trajectories) {
    group.rewards.push_back(t.reward);
    acc.push_back(t.r_acc);
  }
  double sum = 0.0;
  for (double a : acc) sum += a;
  group.accuracy = acc.empty() ? 0.0 : sum / static_cast<double>(acc.size());
  group.filtered = !filter_group(acc, low, high);
  group.advantages.clear();
  if (!group.filtered) group.advantages = compute_advantages(group.rewards);
}

SurrogateStats surrogate_gradient(const nanolm::ParameterStore& params, std::span<const RolloutGroup> groups,
                                  double clip_eps, std::span<double> grads, double kl_coef,
                                  const nanolm::ParameterStore* reference) {
  if (grads.size() != params.size()) throw std::invalid_argument("gradient buffer has the wrong size");
  const auto V = static_cast<std::size_t>(params.config().vocab_size);

  struct Item {
    const Trajectory* t;
    double advantage;
  };
  std::vector<Item> items;
  for (const auto& g : groups) {
    if (g.filtered) continue;
    for (std::size_t i = 0; i < g.trajectories.size(); ++i)
      if (!g.trajectories[i].tokens.empty()) items.push_back({&g.trajectories[i], g.advantages.at(i)});
  }

  // Per-trajectory gradients go into a local buffer first: the 1/N average
  // is only known once non-finite trajectories have been excluded.
  SurrogateStats stats;
  std::vector<double> local(params.size(), 0.0);
  for (const auto& item : items) {
    const auto& t = *item.t;
    textcodec::Tokens seq = t.prompt;
    seq.insert(seq.end(), t.tokens.begin(), t.tokens.end() - 1);
    const auto cache = nanolm::forward(params, seq);
    const std::size_t m = t.tokens.size();
    std::vector<std::vector<double>> lps(m);
    bool finite = true;
    for (std::size_t k = 0; k < m; ++k) {
      const std::size_t pos = t.prompt.size() - 1 + k;
      lps[k] = nanolm::log_softmax(std::span{cache.logits}.subspan(pos * V, V));
      finite &= std::isfinite(std::exp(lps[k][static_cast<std::size_t>(t.tokens[k])] - t.logprobs[k]));
    }
    if (!finite) {
      ++stats.excluded_nonfinite;
      continue;
    }

    std::vector<double> ref_lps;
    if (kl_coef > 0.0 && reference) {
      textcodec::Tokens full = t.prompt;
      full.insert(full.end(), t.tokens.begin(), t.tokens.end());
      ref_lps = nanolm::sequence_logprobs(*reference, full, t.prompt.size());
    }

    const double a = item.advantage;
    const double tok_scale = 1.0 / static_cast<double>(m);
    std::vector<double> dlogits(cache.logits.size(), 0.0);
    double traj_obj = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      const auto tok = static_cast<std::size_t>(t.tokens[k]);
      const double new_lp = lps[k][tok];
      const double ratio = std::exp(new_lp - t.logprobs[k]);
      const double clipped = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
      const double unclipped_term = ratio * a, clipped_term = clipped * a;
      traj_obj += std::min(unclipped_term, clipped_term);
      // d surrogate / d logp; zero where the clipped branch is the minimum.
      double g = 0.0;
      if (unclipped_term <= clipped_term)
        g = a * ratio;
      else
        ++stats.clipped_tokens;
      double dlogp = -g;  // the loss is the negated surrogate
      if (!ref_lps.empty()) {
        // k3 estimator exp(r - p) - (r - p) - 1 with r = ref, p = new.
        const double diff = ref_lps[k] - new_lp;
        traj_obj -= kl_coef * (std::exp(diff) - diff - 1.0);
        dlogp += kl_coef * (1.0 - std::exp(diff));
      }
      dlogp *= tok_scale;
      double* d = dlogits.data() + (t.prompt.size() - 1 + k) * V;
      for (std::size_t v = 0; v < V; ++v) d[v] -= dlogp * std::exp(lps[k][v]);
      d[tok] += dlogp;
    }
    nanolm::backward(params, cache, dlogits, local);
    stats.objective += traj_obj * tok_scale;
    stats.tokens += m;
    ++stats.trajectories;
  }
  if (stats.trajectories == 0) return stats;
  const double inv = 1.0 / static_cast<double>(stats.trajectories);
  stats.objective *= inv;
  for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += local[i] * inv;
  return stats;
}

RolloutGroup rollout_group(const nanolm::ParameterStore& params, const taskgen::Task& task, std::optional<int> budget,
                           const RlConfig& rl, const RewardConfig& reward, Rng& rng) {
  const auto& vocab = textcodec::Vocab::standard();
  RolloutGroup group;
  const auto prompt = textcodec::encode_prompt(vocab, task, budget);
  const int room = params.config().context_len - static_cast<int>(prompt.size());
  if (room < 1) throw std::invalid_argument(fmt::format("prompt for {} does not fit the context", task.id));
  const int max_new = rl.max_new > 0 ? std::min(rl.max_new, room) : room;
  for (int i = 0; i < rl.group_size; ++i) {
    auto gen = nanolm::sample(params, prompt, rl.temperature, max_new, vocab.eos(), rng);
    Trajectory t;
    t.task_id = task.id;
    t.budget = budget;
    t.prompt = prompt;
    t.tokens = std::move(gen.tokens);
    if (rl.temperature == 1.0 || t.tokens.empty()) {
      t.logprobs = std::move(gen.logprobs);
    } else {
      // The surrogate ratio is taken against the untempered policy.
      textcodec::Tokens full = prompt;
      full.insert(full.end(), t.tokens.begin(), t.tokens.end());
      t.logprobs = nanolm::sequence_logprobs(params, full, prompt.size());
    }
    score(t, task.gold_answer, reward, vocab);
    group.trajectories.push_back(std::move(t));
  }
  return group;
}

void to_json(nlohmann::json& j, const RlReport& r) {
  std::vector<std::string> ckpts;
  for (const auto& p : r.checkpoints) ckpts.push_back(p.filename().string());
  j = {{"steps", r.log.size()},
       {"rollouts", r.rollouts},
       {"skipped_steps", r.skipped_steps},
       {"excluded_nonfinite", r.excluded_nonfinite},
       {"annihilation_violations", r.annihilation_violations},
       {"bucket_edges", r.bucket_edges},
       {"checkpoints", ckpts}};
  if (!r.log.empty()) {
    const auto& last = r.log.back();
    j["final"] = {{"mean_reward", last.mean_reward}, {"mean_r_acc", last.mean_r_acc}, {"mean_r_bud", last.mean_r_bud}};
  }
}

std::string log_csv(const RlReport& r) {
  std::string out = "step,mean_reward,mean_r_acc,mean_r_bud,frac_filtered,mean_think_len,excluded_nonfinite,skipped";
  for (std::size_t b = 0; b + 1 < r.bucket_edges.size(); ++b)
    out += fmt::format(",think_len_{}_{}", r.bucket_edges[b], r.bucket_edges[b + 1]);
  out += "\n";
  for (const auto& s : r.log) {
    out += fmt::format("{},{},{},{},{},{},{},{}", s.step, s.mean_reward, s.mean_r_acc, s.mean_r_bud, s.frac_filtered,
                       s.mean_think_len, s.excluded_nonfinite, s.skipped ? 1 : 0);
    for (const auto& v : s.think_len_by_bucket) out += v ? fmt::format(",{}", *v) : std::string(",");
    out += "\n";
  }
  return out;
}

namespace {

std::vector<int> bucket_edges(const RlConfig& rl) {
  std::vector<int> edges;
  const double width = static_cast<double>(rl.b_max - rl.b_min + 1) / rl.log_buckets;
  for (int i = 0; i <= rl.log_buckets; ++i) edges.push_back(rl.b_min + static_cast<int>(std::lround(width * i)));
  return edges;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out << text;
}

}  // namespace

RlReport train_rl(nanolm::ParameterStore& params, std::span<const taskgen::Task> tasks, const RlConfig& rl,
                  const RewardConfig& reward, const RlOptions& options) {
  rl.validate();
  reward.validate();
  if (tasks.empty()) throw std::invalid_argument("RL needs at least one task");
  if (options.out_dir) std::filesystem::create_directories(*options.out_dir);

  RlReport report;
  report.bucket_edges = bucket_edges(rl);
  std::optional<nanolm::ParameterStore> reference;
  if (rl.kl_coef > 0.0) reference = params;
  nanolm::AdamW opt{params};
  std::vector<double> grads(params.size());

  auto save = [&](long step, const std::string& name) {
    const auto path = *options.out_dir / name;
    nanolm::CheckpointHeader header{params.config(), textcodec::Vocab::standard().hash(), step, {{"stage", "rl"}}};
    nanolm::save_checkpoint(path, params, header);
    report.checkpoints.push_back(path);
  };

  for (long step = 0; step < rl.steps; ++step) {
    Rng batch_rng = make_rng(rl.seed, "grpo.batch", static_cast<std::uint64_t>(step));
    std::uniform_int_distribution<std::size_t> pick_task{0, tasks.size() - 1};
    std::uniform_int_distribution<int> pick_budget{rl.b_min, rl.b_max};
    std::vector<RolloutGroup> groups;
    for (int p = 0; p < rl.batch_size; ++p) {
      const auto& task = tasks[pick_task(batch_rng)];
      const int b = pick_budget(batch_rng);
      const std::optional<int> budget = rl.use_budget ? std::optional<int>(b) : std::nullopt;
      Rng rng{derive_seed(derive_seed(rl.seed, "grpo.step", static_cast<std::uint64_t>(step)), "grpo.prompt",
                          static_cast<std::uint64_t>(p))};
      auto group = rollout_group(params, task, budget, rl, reward, rng);
      finalize_group(group, rl.low, rl.high);
      groups.push_back(std::move(group));
    }

    StepLog log;
    log.step = step;
    std::size_t n = 0, filtered = 0;
    std::vector<double> bucket_sum(static_cast<std::size_t>(rl.log_buckets), 0.0);
    std::vector<std::size_t> bucket_n(static_cast<std::size_t>(rl.log_buckets), 0);
    for (const auto& g : groups) {
      filtered += g.filtered;
      for (const auto& t : g.trajectories) {
        ++n;
        log.mean_reward += t.reward;
        log.mean_r_acc += t.r_acc;
        log.mean_r_bud += t.r_bud;
        log.mean_think_len += t.think_len;
        if (reward.mode == RewardMode::Multiplicative && t.r_acc == 0.0 && t.reward != 0.0)
          ++report.annihilation_violations;
        if (t.budget) {
          const auto it = std::upper_bound(report.bucket_edges.begin(), report.bucket_edges.end(), *t.budget);
          const auto b = std::clamp<std::ptrdiff_t>(it - report.bucket_edges.begin() - 1, 0, rl.log_buckets - 1);
          bucket_sum[static_cast<std::size_t>(b)] += t.think_len;
          ++bucket_n[static_cast<std::size_t>(b)];
        }
      }
    }
    report.rollouts += n;
    log.mean_reward /= static_cast<double>(n);
    log.mean_r_acc /= static_cast<double>(n);
    log.mean_r_bud /= static_cast<double>(n);
    log.mean_think_len /= static_cast<double>(n);
    log.frac_filtered = static_cast<double>(filtered) / static_cast<double>(groups.size());
    for (std::size_t b = 0; b < bucket_sum.size(); ++b)
      log.think_len_by_bucket.push_back(bucket_n[b] ? std::optional<double>(bucket_sum[b] / static_cast<double>(bucket_n[b]))
                                                    : std::nullopt);

    if (options.observer) options.observer({step, Phase::BeforeUpdate, groups, &params});
    if (filtered == groups.size()) {
      log.skipped = true;
      ++report.skipped_steps;
      spdlog::warn("rl step {}: every group was filtered, skipping the update", step);
    } else {
      for (int u = 0; u < rl.updates_per_step; ++u) {
        std::fill(grads.begin(), grads.end(), 0.0);
        const auto stats =
            surrogate_gradient(params, groups, rl.clip_eps, grads, rl.kl_coef, reference ? &*reference : nullptr);
        log.excluded_nonfinite += stats.excluded_nonfinite;
        if (stats.trajectories == 0) break;
        nanolm::clip_grad_norm(grads, rl.grad_clip);
        nanolm::AdamConfig ac;
        ac.lr = rl.lr;
        ac.weight_decay = rl.weight_decay;
        opt.step(params, grads, ac);
      }
      report.excluded_nonfinite += log.excluded_nonfinite;
    }
    if (options.observer) options.observer({step, Phase::AfterUpdate, groups, &params});
    if (options.log_progress && (step % 10 == 0 || step + 1 == rl.steps))
      spdlog::info("rl step {}/{}: reward {:.3f} acc {:.3f} bud {:.3f} filtered {:.2f} think_len {:.1f}", step + 1,
                   rl.steps, log.mean_reward, log.mean_r_acc, log.mean_r_bud, log.frac_filtered, log.mean_think_len);
    report.log.push_back(std::move(log));
    if (options.out_dir && options.checkpoint_every > 0 && (step + 1) % options.checkpoint_every == 0 &&
        step + 1 < rl.steps)
      save(step + 1, fmt::format("step-{}.ckpt", step + 1));
  }

  if (options.out_dir) {
    save(rl.steps, "model.ckpt");
    nlohmann::json j = report;
    write_text(*options.out_dir / "rl_report.json", j.dump(2) + "\n");
    write_text(*options.out_dir / "rl_log.csv", log_csv(report));
  }
  return report;
}

}  // namespace bard::grpo
