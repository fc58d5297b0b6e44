#pragma once

// Budget-conditioned supervised fine-tuning on compressed teacher traces.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bard/budgetpress.hpp"
#include "bard/nanolm.hpp"

namespace bard::sft {

struct SftConfig {
  int epochs = 4;
  int batch_size = 16;
  double lr = 3e-4;
  double min_lr_ratio = 1.0;  // cosine decay to lr * ratio; 1 keeps lr constant
  int warmup_steps = 0;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  double mix_ratio = 0.53;  // share of budget-aware records in the mixed set
  int eval_every = 0;       // held-out loss every N steps; 0 = once per epoch
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SftConfig& c);
void from_json(const nlohmann::json& j, SftConfig& c);

struct TrainingSequence {
  textcodec::Tokens tokens;
  std::vector<std::uint8_t> loss_mask;  // per token: 1 if the token is predicted in the loss
  int prompt_len = 0;
  std::string task_id;
};

// prompt ++ cot ++ </think> <answer> answer </answer> <eos>, with the mask
// set on everything after the prompt.
TrainingSequence make_training_sequence(const budgetpress::BudgetedExample& example,
                                        const textcodec::Vocab& vocab = textcodec::Vocab::standard());

struct PreparedSet {
  std::vector<TrainingSequence> sequences;
  std::size_t skipped_over_length = 0;
};

// Encodes every record; ones longer than context_len are skipped and counted.
PreparedSet prepare(std::span<const budgetpress::BudgetedExample> records, int context_len);

// Budget-aware records plus enough unconditioned ones that the aware share
// is mix_ratio (mix_ratio 0 keeps only the unconditioned records, 1 only the
// aware ones). The unconditioned draw is seeded.
std::vector<budgetpress::BudgetedExample> mix_records(std::span<const budgetpress::BudgetedExample> aware,
                                                      std::span<const budgetpress::BudgetedExample> standard,
                                                      double mix_ratio, std::uint64_t seed);

// Mean masked cross-entropy of one sequence; fills grads (accumulating,
// scaled by `scale`) when given.
double sequence_loss(const nanolm::ParameterStore& params, const TrainingSequence& seq,
                     std::span<double> grads = {}, double scale = 1.0);

struct CurvePoint {
  long step = 0;
  int epoch = 0;
  double loss = 0.0;
  std::optional<double> heldout_loss;
};

struct SftReport {
  std::vector<double> epoch_train_loss;
  std::optional<double> heldout_loss;
  std::optional<double> probe_r;  // Pearson r(budget, think_len) on the probe sweep
  std::vector<CurvePoint> curve;
  std::size_t train_sequences = 0;
  std::size_t skipped_over_length = 0;
  long steps = 0;
  std::vector<std::filesystem::path> checkpoints;
};

void to_json(nlohmann::json& j, const SftReport& r);
std::string curve_csv(const SftReport& r);

struct SftOptions {
  std::optional<std::filesystem::path> out_dir;  // epoch checkpoints, report, curve
  std::vector<budgetpress::BudgetedExample> heldout;
  // Called after training to fill probe_r.
  std::function<double(const nanolm::ParameterStore&)> probe;
  bool log_progress = true;
};

// Minimizes the masked cross-entropy in place. Deterministic for a given
// seed. Throws std::invalid_argument on an empty dataset and
// std::runtime_error (naming the step and record ids) on a non-finite loss.
SftReport train_sft(nanolm::ParameterStore& params, std::span<const budgetpress::BudgetedExample> records,
                    const SftConfig& config, const SftOptions& options = {});

}  // namespace bard::sft
