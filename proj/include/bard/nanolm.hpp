#pragma once

// Tiny decoder-only transformer (pre-LayerNorm, learned absolute positions,
// GELU feed-forward) with a hand-written backward pass. Everything is 64-bit.
//
// The full forward pass and the incremental decoder share the same per-row
// kernels, so logits computed either way are bitwise identical.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "bard/rng.hpp"
#include "bard/textcodec.hpp"

namespace bard::nanolm {

using textcodec::TokenId;

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int model_dim = 128;
  int ff_dim = 512;
  int context_len = 1024;
  int vocab_size = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct ParamInfo {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

// Offsets of every array inside the flat value buffer.
struct LayerOffsets {
  std::size_t ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, w1, b1, w2, b2;
};
struct Offsets {
  std::size_t tok_emb, pos_emb, lnf_gain, lnf_bias, head;
  std::vector<LayerOffsets> layers;
};

// All model weights in one flat buffer, laid out by sorted array name.
// Linear weights are stored [in, out] row-major.
class ParameterStore {
 public:
  // Every value starts at zero.
  explicit ParameterStore(const ModelConfig& config);

  // GPT-2 style init: N(0, stddev) for matrices and embeddings, residual
  // projections scaled by 1/sqrt(2 * n_layers), LayerNorm gain 1, biases 0.
  void init_normal(std::uint64_t seed, double stddev = 0.02);

  const ModelConfig& config() const { return config_; }
  const std::vector<ParamInfo>& layout() const { return layout_; }
  const Offsets& offsets() const { return offsets_; }
  std::size_t size() const { return values_.size(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<double> array(std::string_view name);
  std::span<const double> array(std::string_view name) const;
  const ParamInfo& info(std::string_view name) const;

  bool all_finite() const;
  bool operator==(const ParameterStore& other) const;

 private:
  ModelConfig config_;
  std::vector<ParamInfo> layout_;
  Offsets offsets_;
  std::vector<double> values_;
};

// Same layout as ParameterStore::values().
using Gradients = std::vector<double>;

struct LayerCache {
  std::vector<double> x_in, ln1, ln1_mean, ln1_rstd;
  std::vector<double> q, k, v, probs, att;
  std::vector<double> x_mid, ln2, ln2_mean, ln2_rstd;
  std::vector<double> ff_pre, ff_act;
};

// Activations kept by forward() for backward().
struct ForwardCache {
  std::vector<TokenId> tokens;
  std::vector<LayerCache> layers;
  std::vector<double> x_final, lnf, lnf_mean, lnf_rstd;
  std::vector<double> logits;  // [T, vocab]

  int length() const { return static_cast<int>(tokens.size()); }
  bool empty() const { return tokens.empty(); }
};

// Throws std::invalid_argument when the sequence is empty, longer than
// context_len, or contains an out-of-range id.
ForwardCache forward(const ParameterStore& params, std::span<const TokenId> tokens);

// Mean negative log-likelihood over positions with mask != 0, where
// targets[t] is the token expected after position t. When `dlogits` is given
// it receives d(scale * loss)/d(logits). Throws std::invalid_argument when the
// mask has no active position or shapes disagree.
double loss_xent(std::span<const double> logits, int vocab_size, std::span<const TokenId> targets,
                 std::span<const std::uint8_t> mask, std::vector<double>* dlogits = nullptr, double scale = 1.0);

// Accumulates parameter gradients into `grads`. Throws std::logic_error when
// the cache is empty.
void backward(const ParameterStore& params, const ForwardCache& cache, std::span<const double> dlogits,
              std::span<double> grads);

// log softmax of one logits row.
std::vector<double> log_softmax(std::span<const double> row);

// Log-probabilities of tokens[start..] under the model, each conditioned on
// everything before it.
std::vector<double> sequence_logprobs(const ParameterStore& params, std::span<const TokenId> tokens, std::size_t start);

// Incremental decoder with a key/value cache.
class Decoder {
 public:
  explicit Decoder(const ParameterStore& params);

  // Appends one token and returns the next-token logits. Throws
  // std::invalid_argument past context_len.
  std::span<const double> push(TokenId token);
  int position() const { return position_; }

 private:
  const ParameterStore& params_;
  int position_ = 0;
  std::vector<std::vector<double>> keys_, values_;
  std::vector<double> x_, a_, q_, att_, tmp_, ff_, probs_, logits_;
};

struct SampleResult {
  textcodec::Tokens tokens;
  std::vector<double> logprobs;
};

// Generates up to max_new tokens after `prompt`, stopping after emitting
// `stop` or when prompt plus continuation fills context_len. temperature == 0 is argmax with the lowest
// id winning ties; its log-probs are the model's (temperature 1) log-probs.
// Otherwise log-probs are taken under softmax(logits / temperature).
SampleResult sample(const ParameterStore& params, std::span<const TokenId> prompt, double temperature, int max_new,
                    TokenId stop, Rng& rng);

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; matrices and embeddings only
};

class AdamW {
 public:
  explicit AdamW(const ParameterStore& params);

  // Throws std::runtime_error if any updated value is non-finite; the
  // parameters are left untouched in that case.
  void step(ParameterStore& params, std::span<const double> grads, const AdamConfig& config);
  long steps() const { return steps_; }

 private:
  std::vector<double> m_, v_;
  std::vector<std::uint8_t> decay_;
  long steps_ = 0;
};

// Scales grads in place so their L2 norm is at most max_norm (<= 0 disables).
// Returns the norm before clipping.
double clip_grad_norm(std::span<double> grads, double max_norm);

struct CheckpointHeader {
  ModelConfig config;
  std::string vocab_hash;
  long step = 0;
  nlohmann::json extra = nlohmann::json::object();
};

// Layout: "BARDCKPT", u64 header length, header JSON, u64 array count, then
// per array in sorted name order: u32 name length, name, u32 rank, u64 dims,
// raw little-endian doubles.
void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params, const CheckpointHeader& header);

struct LoadedCheckpoint {
  ParameterStore params;
  CheckpointHeader header;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace bard::nanolm
