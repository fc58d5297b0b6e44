#include "bard/sft.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace bard::sft {

void SftConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("sft.epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("sft.batch_size must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("sft.lr must be > 0");
  if (min_lr_ratio < 0.0 || min_lr_ratio > 1.0) throw std::invalid_argument("sft.min_lr_ratio must be in [0, 1]");
  if (warmup_steps < 0 || eval_every < 0) throw std::invalid_argument("sft step counts must be >= 0");
  if (weight_decay < 0.0 || grad_clip < 0.0) throw std::invalid_argument("sft regularizers must be >= 0");
  if (mix_ratio < 0.0 || mix_ratio > 1.0) throw std::invalid_argument("sft.mix_ratio must be in [0, 1]");
}

void to_json(nlohmann::json& j, const SftConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"min_lr_ratio", c.min_lr_ratio},
       {"warmup_steps", c.warmup_steps},
       {"weight_decay", c.weight_decay},
       {"grad_clip", c.grad_clip},
       {"mix_ratio", c.mix_ratio},
       {"eval_every", c.eval_every},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SftConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.min_lr_ratio = j.value("min_lr_ratio", c.min_lr_ratio);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.mix_ratio = j.value("mix_ratio", c.mix_ratio);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.seed = j.value("seed", c.seed);
}

TrainingSequence make_training_sequence(const budgetpress::BudgetedExample& example, const textcodec::Vocab& vocab) {
  TrainingSequence seq;
  seq.task_id = example.task_id;
  seq.tokens = textcodec::encode_prompt(vocab, example.question, example.budget);
  seq.prompt_len = static_cast<int>(seq.tokens.size());
  const auto completion =
      textcodec::encode_completion(vocab, textcodec::encode_steps(vocab, example.cot), example.answer);
  seq.tokens.insert(seq.tokens.end(), completion.begin(), completion.end());
  seq.loss_mask.assign(seq.tokens.size(), 0);
  std::fill(seq.loss_mask.begin() + seq.prompt_len, seq.loss_mask.end(), 1);
  return seq;
}

PreparedSet prepare(std::span<const budgetpress::BudgetedExample> records, int context_len) {
  PreparedSet out;
  for (const auto& r : records) {
    auto seq = make_training_sequence(r);
    if (static_cast<int>(seq.tokens.size()) > context_len) {
      ++out.skipped_over_length;
      continue;
    }
    out.sequences.push_back(std::move(seq));
  }
  if (out.skipped_over_length > 0)
    spdlog::warn("skipped {} records longer than context_len {}", out.skipped_over_length, context_len);
  return out;
}

std::vector<budgetpress::BudgetedExample> mix_records(std::span<const budgetpress::BudgetedExample> aware,
                                                      std::span<const budgetpress::BudgetedExample> standard,
                                                      double mix_ratio, std::uint64_t seed) {
  if (mix_ratio < 0.0 || mix_ratio > 1.0) throw std::invalid_argument("mix_ratio must be in [0, 1]");
  if (mix_ratio == 0.0) return {standard.begin(), standard.end()};
  std::vector<budgetpress::BudgetedExample> out(aware.begin(), aware.end());
  if (mix_ratio == 1.0 || standard.empty()) return out;
  const auto wanted =
      static_cast<std::size_t>(std::llround(static_cast<double>(aware.size()) * (1.0 - mix_ratio) / mix_ratio));
  std::vector<std::size_t> order(standard.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, "sft.mix");
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < std::min(wanted, order.size()); ++i) out.push_back(standard[order[i]]);
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

double sequence_loss(const nanolm::ParameterStore& params, const TrainingSequence& seq, std::span<double> grads,
                     double scale) {
  const std::size_t n = seq.tokens.size();
  if (n < 2) throw std::invalid_argument("training sequence is too short");
  const auto input = std::span{seq.tokens}.first(n - 1);
  const auto targets = std::span{seq.tokens}.subspan(1);
  const auto mask = std::span{seq.loss_mask}.subspan(1);
  const auto cache = nanolm::forward(params, input);
  if (grads.empty()) return nanolm::loss_xent(cache.logits, params.config().vocab_size, targets, mask);
  std::vector<double> dlogits;
  const double loss = nanolm::loss_xent(cache.logits, params.config().vocab_size, targets, mask, &dlogits, scale);
  nanolm::backward(params, cache, dlogits, grads);
  return loss;
}

void to_json(nlohmann::json& j, const SftReport& r) {
  std::vector<std::string> ckpts;
  for (const auto& p : r.checkpoints) ckpts.push_back(p.filename().string());
  j = {{"epoch_train_loss", r.epoch_train_loss},
       {"heldout_loss", r.heldout_loss ? nlohmann::json(*r.heldout_loss) : nlohmann::json(nullptr)},
       {"probe_r", r.probe_r ? nlohmann::json(*r.probe_r) : nlohmann::json(nullptr)},
       {"train_sequences", r.train_sequences},
       {"skipped_over_length", r.skipped_over_length},
       {"steps", r.steps},
       {"checkpoints", ckpts}};
}

std::string curve_csv(const SftReport& r) {
  std::string out = "step,epoch,loss,heldout_loss\n";
  for (const auto& p : r.curve)
    out += fmt::format("{},{},{},{}\n", p.step, p.epoch, p.loss, p.heldout_loss ? fmt::format("{}", *p.heldout_loss) : "");
  return out;
}

namespace {

double heldout_loss(const nanolm::ParameterStore& params, std::span<const TrainingSequence> seqs) {
  double total = 0.0;
  for (const auto& s : seqs) total += sequence_loss(params, s);
  return total / static_cast<double>(seqs.size());
}

double lr_at(const SftConfig& c, long step, long total) {
  if (step < c.warmup_steps) return c.lr * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  const double span = std::max<long>(1, total - c.warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - c.warmup_steps) / span);
  const double cosine = 0.5 * (1.0 + std::cos(M_PI * progress));
  return c.lr * (c.min_lr_ratio + (1.0 - c.min_lr_ratio) * cosine);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out << text;
}

}  // namespace

SftReport train_sft(nanolm::ParameterStore& params, std::span<const budgetpress::BudgetedExample> records,
                    const SftConfig& config, const SftOptions& options) {
  config.validate();
  if (records.empty()) throw std::invalid_argument("SFT dataset is empty");
  const int context = params.config().context_len;
  auto train = prepare(records, context);
  if (train.sequences.empty()) throw std::invalid_argument("every SFT record exceeds context_len");
  const auto heldout = prepare(options.heldout, context).sequences;

  SftReport report;
  report.train_sequences = train.sequences.size();
  report.skipped_over_length = train.skipped_over_length;
  if (options.out_dir) std::filesystem::create_directories(*options.out_dir);

  const auto n = train.sequences.size();
  const auto batch = static_cast<std::size_t>(config.batch_size);
  const long steps_per_epoch = static_cast<long>((n + batch - 1) / batch);
  const long total_steps = steps_per_epoch * config.epochs;
  nanolm::AdamW opt{params};
  std::vector<double> grads(params.size());
  std::vector<std::size_t> order(n);
  long step = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(config.seed, "sft.shuffle", static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t end = std::min(n, start + batch);
      const double scale = 1.0 / static_cast<double>(end - start);
      std::fill(grads.begin(), grads.end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) batch_loss += sequence_loss(params, train.sequences[order[i]], grads, scale);
      batch_loss *= scale;
      if (!std::isfinite(batch_loss)) {
        std::string ids;
        for (std::size_t i = start; i < end; ++i) ids += (i > start ? "," : "") + train.sequences[order[i]].task_id;
        throw std::runtime_error(fmt::format("non-finite SFT loss at step {} (epoch {}), batch records [{}]", step,
                                             epoch, ids));
      }
      nanolm::clip_grad_norm(grads, config.grad_clip);
      nanolm::AdamConfig ac;
      ac.lr = lr_at(config, step, total_steps);
      ac.weight_decay = config.weight_decay;
      opt.step(params, grads, ac);
      epoch_loss += batch_loss * static_cast<double>(end - start);

      CurvePoint point{step, epoch, batch_loss, std::nullopt};
      if (config.eval_every > 0 && !heldout.empty() && (step + 1) % config.eval_every == 0)
        point.heldout_loss = heldout_loss(params, heldout);
      report.curve.push_back(point);
      ++step;
    }
    report.epoch_train_loss.push_back(epoch_loss / static_cast<double>(n));
    if (!heldout.empty()) {
      report.heldout_loss = heldout_loss(params, heldout);
      if (config.eval_every == 0) report.curve.back().heldout_loss = report.heldout_loss;
    }
    if (options.log_progress)
      spdlog::info("sft epoch {}/{}: train loss {:.4f}{}", epoch + 1, config.epochs, report.epoch_train_loss.back(),
                   report.heldout_loss ? fmt::format(", held-out {:.4f}", *report.heldout_loss) : "");
    if (options.out_dir) {
      const auto path = *options.out_dir / fmt::format("epoch-{}.ckpt", epoch + 1);
      nanolm::CheckpointHeader header{params.config(), textcodec::Vocab::standard().hash(), step,
                                      {{"stage", "sft"}, {"epoch", epoch + 1}}};
      nanolm::save_checkpoint(path, params, header);
      report.checkpoints.push_back(path);
    }
  }
  report.steps = step;
  if (options.probe) report.probe_r = options.probe(params);
  if (options.out_dir) {
    nlohmann::json j = report;
    write_text(*options.out_dir / "sft_report.json", j.dump(2) + "\n");
    write_text(*options.out_dir / "sft_curve.csv", curve_csv(report));
  }
  return report;
}

}  // namespace bard::sft
