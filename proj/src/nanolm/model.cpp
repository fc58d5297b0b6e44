#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>

#include "bard/nanolm.hpp"

namespace bard::nanolm {
namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

inline double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u))); }

inline double gelu_grad(double u) {
  const double th = std::tanh(kGeluC * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
}

// out = x W (+ bias), W is [in, out].
inline void matvec(const double* x, const double* w, const double* bias, double* out, int in, int n_out) {
  if (bias)
    std::copy(bias, bias + n_out, out);
  else
    std::fill(out, out + n_out, 0.0);
  for (int k = 0; k < in; ++k) {
    const double xk = x[k];
    const double* row = w + static_cast<std::size_t>(k) * n_out;
    for (int j = 0; j < n_out; ++j) out[j] += xk * row[j];
  }
}

inline void layer_norm(const double* x, const double* gain, const double* bias, double* out, double* mean_out,
                       double* rstd_out, int d) {
  double mean = 0.0;
  for (int i = 0; i < d; ++i) mean += x[i];
  mean /= d;
  double var = 0.0;
  for (int i = 0; i < d; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= d;
  const double rstd = 1.0 / std::sqrt(var + kLnEps);
  for (int i = 0; i < d; ++i) out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
  if (mean_out) *mean_out = mean;
  if (rstd_out) *rstd_out = rstd;
}

// Causal attention for one query row over keys/values 0..t (row stride d).
// probs receives the t+1 attention weights per head, head-major.
inline void attend(const double* q, const double* keys, const double* values, int t, int d, int n_heads, double* out,
                   double* probs, std::size_t probs_head_stride) {
  const int hd = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int h = 0; h < n_heads; ++h) {
    double* p = probs + static_cast<std::size_t>(h) * probs_head_stride;
    const double* qh = q + h * hd;
    double max_s = -std::numeric_limits<double>::infinity();
    for (int j = 0; j <= t; ++j) {
      const double* kj = keys + static_cast<std::size_t>(j) * d + h * hd;
      double s = 0.0;
      for (int i = 0; i < hd; ++i) s += qh[i] * kj[i];
      s *= scale;
      p[j] = s;
      max_s = std::max(max_s, s);
    }
    double z = 0.0;
    for (int j = 0; j <= t; ++j) {
      p[j] = std::exp(p[j] - max_s);
      z += p[j];
    }
    double* oh = out + h * hd;
    std::fill(oh, oh + hd, 0.0);
    for (int j = 0; j <= t; ++j) {
      p[j] /= z;
      const double* vj = values + static_cast<std::size_t>(j) * d + h * hd;
      for (int i = 0; i < hd; ++i) oh[i] += p[j] * vj[i];
    }
  }
}

// dx = dy W^T, accumulated; dW += x^T dy; db += sum dy.
void linear_backward(const double* x, const double* w, const double* dy, int rows, int in, int n_out, double* dx,
                     double* dw, double* db) {
  for (int t = 0; t < rows; ++t) {
    const double* xt = x + static_cast<std::size_t>(t) * in;
    const double* dyt = dy + static_cast<std::size_t>(t) * n_out;
    for (int k = 0; k < in; ++k) {
      const double* wrow = w + static_cast<std::size_t>(k) * n_out;
      double* dwrow = dw + static_cast<std::size_t>(k) * n_out;
      const double xk = xt[k];
      double acc = 0.0;
      for (int j = 0; j < n_out; ++j) {
        acc += dyt[j] * wrow[j];
        dwrow[j] += xk * dyt[j];
      }
      if (dx) dx[static_cast<std::size_t>(t) * in + k] += acc;
    }
    if (db)
      for (int j = 0; j < n_out; ++j) db[j] += dyt[j];
  }
}

// Adds the LayerNorm input gradient into dx.
void layer_norm_backward(const double* x, const double* mean, const double* rstd, const double* gain, const double* dy,
                         int rows, int d, double* dx, double* dgain, double* dbias) {
  std::vector<double> xhat(static_cast<std::size_t>(d)), dxhat(static_cast<std::size_t>(d));
  for (int t = 0; t < rows; ++t) {
    const double* xt = x + static_cast<std::size_t>(t) * d;
    const double* dyt = dy + static_cast<std::size_t>(t) * d;
    double m1 = 0.0, m2 = 0.0;
    for (int i = 0; i < d; ++i) {
      xhat[i] = (xt[i] - mean[t]) * rstd[t];
      dxhat[i] = dyt[i] * gain[i];
      dgain[i] += dyt[i] * xhat[i];
      dbias[i] += dyt[i];
      m1 += dxhat[i];
      m2 += dxhat[i] * xhat[i];
    }
    m1 /= d;
    m2 /= d;
    double* dxt = dx + static_cast<std::size_t>(t) * d;
    for (int i = 0; i < d; ++i) dxt[i] += rstd[t] * (dxhat[i] - m1 - xhat[i] * m2);
  }
}

std::vector<std::pair<std::string, std::vector<std::size_t>>> array_shapes(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.model_dim);
  const auto f = static_cast<std::size_t>(c.ff_dim);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  std::vector<std::pair<std::string, std::vector<std::size_t>>> out = {
      {"tok_emb", {v, d}},
      {"pos_emb", {static_cast<std::size_t>(c.context_len), d}},
      {"final_ln.gain", {d}},
      {"final_ln.bias", {d}},
      {"head.w", {d, v}},
  };
  for (int l = 0; l < c.n_layers; ++l) {
    const auto p = fmt::format("layers.{}.", l);
    out.push_back({p + "ln1.gain", {d}});
    out.push_back({p + "ln1.bias", {d}});
    out.push_back({p + "attn.wq", {d, d}});
    out.push_back({p + "attn.wk", {d, d}});
    out.push_back({p + "attn.wv", {d, d}});
    out.push_back({p + "attn.wo", {d, d}});
    out.push_back({p + "ln2.gain", {d}});
    out.push_back({p + "ln2.bias", {d}});
    out.push_back({p + "ff.w1", {d, f}});
    out.push_back({p + "ff.b1", {f}});
    out.push_back({p + "ff.w2", {f, d}});
    out.push_back({p + "ff.b2", {d}});
  }
  return out;
}

void check_tokens(const ModelConfig& c, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw std::invalid_argument("cannot run the model on an empty sequence");
  if (static_cast<int>(tokens.size()) > c.context_len)
    throw std::invalid_argument(
        fmt::format("sequence length {} exceeds context_len {}", tokens.size(), c.context_len));
  for (auto t : tokens)
    if (t < 0 || t >= c.vocab_size) throw std::invalid_argument(fmt::format("token id {} out of range", t));
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || model_dim < 1 || ff_dim < 1 || context_len < 1 || vocab_size < 1)
    throw std::invalid_argument("model dimensions must all be positive");
  if (model_dim % n_heads != 0)
    throw std::invalid_argument(fmt::format("model_dim {} is not divisible by n_heads {}", model_dim, n_heads));
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers}, {"n_heads", c.n_heads},         {"model_dim", c.model_dim},
       {"ff_dim", c.ff_dim},     {"context_len", c.context_len}, {"vocab_size", c.vocab_size}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.model_dim = j.value("model_dim", c.model_dim);
  c.ff_dim = j.value("ff_dim", c.ff_dim);
  c.context_len = j.value("context_len", c.context_len);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
}

ParameterStore::ParameterStore(const ModelConfig& config) : config_(config) {
  config_.validate();
  auto shapes = array_shapes(config_);
  std::sort(shapes.begin(), shapes.end());
  std::size_t offset = 0;
  for (auto& [name, shape] : shapes) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    layout_.push_back({name, shape, offset, n});
    offset += n;
  }
  values_.assign(offset, 0.0);

  auto at = [this](std::string_view name) { return info(name).offset; };
  offsets_.tok_emb = at("tok_emb");
  offsets_.pos_emb = at("pos_emb");
  offsets_.lnf_gain = at("final_ln.gain");
  offsets_.lnf_bias = at("final_ln.bias");
  offsets_.head = at("head.w");
  for (int l = 0; l < config_.n_layers; ++l) {
    const auto p = fmt::format("layers.{}.", l);
    offsets_.layers.push_back({at(p + "ln1.gain"), at(p + "ln1.bias"), at(p + "attn.wq"), at(p + "attn.wk"),
                               at(p + "attn.wv"), at(p + "attn.wo"), at(p + "ln2.gain"), at(p + "ln2.bias"),
                               at(p + "ff.w1"), at(p + "ff.b1"), at(p + "ff.w2"), at(p + "ff.b2")});
  }
}

void ParameterStore::init_normal(std::uint64_t seed, double stddev) {
  Rng rng{derive_seed(seed, "nanolm.init")};
  std::normal_distribution<double> normal{0.0, stddev};
  const double residual_scale = 1.0 / std::sqrt(2.0 * config_.n_layers);
  for (const auto& p : layout_) {
    auto values = std::span{values_}.subspan(p.offset, p.size);
    const bool gain = p.name.ends_with(".gain");
    const bool bias = p.name.ends_with(".bias") || p.name.ends_with(".b1") || p.name.ends_with(".b2");
    const bool residual = p.name.ends_with("attn.wo") || p.name.ends_with("ff.w2");
    for (auto& x : values) {
      if (gain)
        x = 1.0;
      else if (bias)
        x = 0.0;
      else
        x = normal(rng) * (residual ? residual_scale : 1.0);
    }
  }
}

const ParamInfo& ParameterStore::info(std::string_view name) const {
  auto it = std::lower_bound(layout_.begin(), layout_.end(), name,
                             [](const ParamInfo& p, std::string_view n) { return p.name < n; });
  if (it == layout_.end() || it->name != name) throw std::invalid_argument(fmt::format("no parameter '{}'", name));
  return *it;
}

std::span<double> ParameterStore::array(std::string_view name) {
  const auto& p = info(name);
  return std::span{values_}.subspan(p.offset, p.size);
}

std::span<const double> ParameterStore::array(std::string_view name) const {
  const auto& p = info(name);
  return std::span{values_}.subspan(p.offset, p.size);
}

bool ParameterStore::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double x) { return std::isfinite(x); });
}

bool ParameterStore::operator==(const ParameterStore& other) const {
  return config_ == other.config_ && values_ == other.values_;
}

ForwardCache forward(const ParameterStore& params, std::span<const TokenId> tokens) {
  const auto& c = params.config();
  check_tokens(c, tokens);
  const int T = static_cast<int>(tokens.size());
  const int d = c.model_dim, F = c.ff_dim, V = c.vocab_size, H = c.n_heads;
  const auto Td = static_cast<std::size_t>(T) * d;
  const double* w = params.values().data();
  const auto& off = params.offsets();

  ForwardCache cache;
  cache.tokens.assign(tokens.begin(), tokens.end());
  std::vector<double> x(Td);
  for (int t = 0; t < T; ++t) {
    const double* te = w + off.tok_emb + static_cast<std::size_t>(tokens[t]) * d;
    const double* pe = w + off.pos_emb + static_cast<std::size_t>(t) * d;
    for (int i = 0; i < d; ++i) x[static_cast<std::size_t>(t) * d + i] = te[i] + pe[i];
  }

  std::vector<double> tmp(static_cast<std::size_t>(d));
  for (const auto& lo : off.layers) {
    LayerCache lc;
    lc.x_in = x;
    lc.ln1.resize(Td);
    lc.ln1_mean.resize(T);
    lc.ln1_rstd.resize(T);
    lc.q.resize(Td);
    lc.k.resize(Td);
    lc.v.resize(Td);
    lc.probs.assign(static_cast<std::size_t>(H) * T * T, 0.0);
    lc.att.resize(Td);
    lc.ln2.resize(Td);
    lc.ln2_mean.resize(T);
    lc.ln2_rstd.resize(T);
    lc.ff_pre.resize(static_cast<std::size_t>(T) * F);
    lc.ff_act.resize(static_cast<std::size_t>(T) * F);

    for (int t = 0; t < T; ++t) {
      const auto r = static_cast<std::size_t>(t) * d;
      layer_norm(&x[r], w + lo.ln1_gain, w + lo.ln1_bias, &lc.ln1[r], &lc.ln1_mean[t], &lc.ln1_rstd[t], d);
      matvec(&lc.ln1[r], w + lo.wq, nullptr, &lc.q[r], d, d);
      matvec(&lc.ln1[r], w + lo.wk, nullptr, &lc.k[r], d, d);
      matvec(&lc.ln1[r], w + lo.wv, nullptr, &lc.v[r], d, d);
    }
    for (int t = 0; t < T; ++t) {
      const auto r = static_cast<std::size_t>(t) * d;
      attend(&lc.q[r], lc.k.data(), lc.v.data(), t, d, H, &lc.att[r], &lc.probs[static_cast<std::size_t>(t) * T],
             static_cast<std::size_t>(T) * T);
      matvec(&lc.att[r], w + lo.wo, nullptr, tmp.data(), d, d);
      for (int i = 0; i < d; ++i) x[r + i] += tmp[i];
    }
    lc.x_mid = x;
    for (int t = 0; t < T; ++t) {
      const auto r = static_cast<std::size_t>(t) * d;
      const auto rf = static_cast<std::size_t>(t) * F;
      layer_norm(&x[r], w + lo.ln2_gain, w + lo.ln2_bias, &lc.ln2[r], &lc.ln2_mean[t], &lc.ln2_rstd[t], d);
      matvec(&lc.ln2[r], w + lo.w1, w + lo.b1, &lc.ff_pre[rf], d, F);
      for (int i = 0; i < F; ++i) lc.ff_act[rf + i] = gelu(lc.ff_pre[rf + i]);
      matvec(&lc.ff_act[rf], w + lo.w2, w + lo.b2, tmp.data(), F, d);
      for (int i = 0; i < d; ++i) x[r + i] += tmp[i];
    }
    cache.layers.push_back(std::move(lc));
  }

  cache.x_final = x;
  cache.lnf.resize(Td);
  cache.lnf_mean.resize(T);
  cache.lnf_rstd.resize(T);
  cache.logits.resize(static_cast<std::size_t>(T) * V);
  for (int t = 0; t < T; ++t) {
    const auto r = static_cast<std::size_t>(t) * d;
    layer_norm(&x[r], w + off.lnf_gain, w + off.lnf_bias, &cache.lnf[r], &cache.lnf_mean[t], &cache.lnf_rstd[t], d);
    matvec(&cache.lnf[r], w + off.head, nullptr, &cache.logits[static_cast<std::size_t>(t) * V], d, V);
  }
  return cache;
}

std::vector<double> log_softmax(std::span<const double> row) {
  const double m = *std::max_element(row.begin(), row.end());
  double z = 0.0;
  for (double v : row) z += std::exp(v - m);
  const double lz = m + std::log(z);
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i] - lz;
  return out;
}

double loss_xent(std::span<const double> logits, int vocab_size, std::span<const TokenId> targets,
                 std::span<const std::uint8_t> mask, std::vector<double>* dlogits, double scale) {
  const std::size_t T = targets.size();
  if (mask.size() != T || logits.size() != T * static_cast<std::size_t>(vocab_size))
    throw std::invalid_argument("loss_xent: logits, targets and mask disagree in length");
  const auto active = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
  if (active == 0) throw std::invalid_argument("loss_xent: mask has no active position");
  if (dlogits) dlogits->assign(logits.size(), 0.0);

  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(active);
  for (std::size_t t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    const auto row = logits.subspan(t * vocab_size, static_cast<std::size_t>(vocab_size));
    const auto target = static_cast<std::size_t>(targets[t]);
    if (target >= static_cast<std::size_t>(vocab_size))
      throw std::invalid_argument(fmt::format("target id {} out of range", targets[t]));
    const auto lp = log_softmax(row);
    total -= lp[target];
    if (dlogits) {
      double* g = dlogits->data() + t * vocab_size;
      for (int i = 0; i < vocab_size; ++i) g[i] = scale * inv * std::exp(lp[static_cast<std::size_t>(i)]);
      g[target] -= scale * inv;
    }
  }
  return total * inv;
}

void backward(const ParameterStore& params, const ForwardCache& cache, std::span<const double> dlogits,
              std::span<double> grads) {
  if (cache.empty()) throw std::logic_error("backward called without a forward cache");
  const auto& c = params.config();
  const int T = cache.length();
  const int d = c.model_dim, F = c.ff_dim, V = c.vocab_size, H = c.n_heads;
  const int hd = d / H;
  const auto Td = static_cast<std::size_t>(T) * d;
  if (dlogits.size() != static_cast<std::size_t>(T) * V) throw std::invalid_argument("dlogits has the wrong size");
  if (grads.size() != params.size()) throw std::invalid_argument("gradient buffer has the wrong size");
  const double* w = params.values().data();
  double* g = grads.data();
  const auto& off = params.offsets();

  std::vector<double> dx(Td, 0.0), dln(Td, 0.0);
  linear_backward(cache.lnf.data(), w + off.head, dlogits.data(), T, d, V, dln.data(), g + off.head, nullptr);
  layer_norm_backward(cache.x_final.data(), cache.lnf_mean.data(), cache.lnf_rstd.data(), w + off.lnf_gain,
                      dln.data(), T, d, dx.data(), g + off.lnf_gain, g + off.lnf_bias);

  std::vector<double> dff(static_cast<std::size_t>(T) * F), datt(Td), dq(Td), dk(Td), dv(Td);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& lo = off.layers[static_cast<std::size_t>(l)];
    const auto& lc = cache.layers[static_cast<std::size_t>(l)];

    // Feed-forward block; dx flows through the residual unchanged.
    std::fill(dff.begin(), dff.end(), 0.0);
    linear_backward(lc.ff_act.data(), w + lo.w2, dx.data(), T, F, d, dff.data(), g + lo.w2, g + lo.b2);
    for (std::size_t i = 0; i < dff.size(); ++i) dff[i] *= gelu_grad(lc.ff_pre[i]);
    std::fill(dln.begin(), dln.end(), 0.0);
    linear_backward(lc.ln2.data(), w + lo.w1, dff.data(), T, d, F, dln.data(), g + lo.w1, g + lo.b1);
    layer_norm_backward(lc.x_mid.data(), lc.ln2_mean.data(), lc.ln2_rstd.data(), w + lo.ln2_gain, dln.data(), T, d,
                        dx.data(), g + lo.ln2_gain, g + lo.ln2_bias);

    // Attention block.
    std::fill(datt.begin(), datt.end(), 0.0);
    linear_backward(lc.att.data(), w + lo.wo, dx.data(), T, d, d, datt.data(), g + lo.wo, nullptr);
    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    std::vector<double> dp(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
      for (int h = 0; h < H; ++h) {
        const double* p = &lc.probs[static_cast<std::size_t>(h) * T * T + static_cast<std::size_t>(t) * T];
        const double* dout = &datt[static_cast<std::size_t>(t) * d + h * hd];
        double dot = 0.0;
        for (int j = 0; j <= t; ++j) {
          const double* vj = &lc.v[static_cast<std::size_t>(j) * d + h * hd];
          double* dvj = &dv[static_cast<std::size_t>(j) * d + h * hd];
          double s = 0.0;
          for (int i = 0; i < hd; ++i) {
            s += dout[i] * vj[i];
            dvj[i] += p[j] * dout[i];
          }
          dp[static_cast<std::size_t>(j)] = s;
          dot += p[j] * s;
        }
        const double* qt = &lc.q[static_cast<std::size_t>(t) * d + h * hd];
        double* dqt = &dq[static_cast<std::size_t>(t) * d + h * hd];
        for (int j = 0; j <= t; ++j) {
          const double ds = p[j] * (dp[static_cast<std::size_t>(j)] - dot) * scale;
          const double* kj = &lc.k[static_cast<std::size_t>(j) * d + h * hd];
          double* dkj = &dk[static_cast<std::size_t>(j) * d + h * hd];
          for (int i = 0; i < hd; ++i) {
            dqt[i] += ds * kj[i];
            dkj[i] += ds * qt[i];
          }
        }
      }
    }
    std::fill(dln.begin(), dln.end(), 0.0);
    linear_backward(lc.ln1.data(), w + lo.wq, dq.data(), T, d, d, dln.data(), g + lo.wq, nullptr);
    linear_backward(lc.ln1.data(), w + lo.wk, dk.data(), T, d, d, dln.data(), g + lo.wk, nullptr);
    linear_backward(lc.ln1.data(), w + lo.wv, dv.data(), T, d, d, dln.data(), g + lo.wv, nullptr);
    layer_norm_backward(lc.x_in.data(), lc.ln1_mean.data(), lc.ln1_rstd.data(), w + lo.ln1_gain, dln.data(), T, d,
                        dx.data(), g + lo.ln1_gain, g + lo.ln1_bias);
  }

  for (int t = 0; t < T; ++t) {
    double* gt = g + off.tok_emb + static_cast<std::size_t>(cache.tokens[static_cast<std::size_t>(t)]) * d;
    double* gp = g + off.pos_emb + static_cast<std::size_t>(t) * d;
    const double* dxt = &dx[static_cast<std::size_t>(t) * d];
    for (int i = 0; i < d; ++i) {
      gt[i] += dxt[i];
      gp[i] += dxt[i];
    }
  }
}

std::vector<double> sequence_logprobs(const ParameterStore& params, std::span<const TokenId> tokens, std::size_t start) {
  if (start == 0 || start > tokens.size()) throw std::invalid_argument("sequence_logprobs: start must be in [1, size]");
  std::vector<double> out;
  if (start == tokens.size()) return out;
  const auto cache = forward(params, tokens.first(tokens.size() - 1));
  const auto V = static_cast<std::size_t>(params.config().vocab_size);
  for (std::size_t t = start; t < tokens.size(); ++t) {
    const auto lp = log_softmax(std::span{cache.logits}.subspan((t - 1) * V, V));
    out.push_back(lp[static_cast<std::size_t>(tokens[t])]);
  }
  return out;
}

Decoder::Decoder(const ParameterStore& params) : params_(params) {
  const auto& c = params.config();
  const auto d = static_cast<std::size_t>(c.model_dim);
  keys_.assign(static_cast<std::size_t>(c.n_layers), std::vector<double>(static_cast<std::size_t>(c.context_len) * d));
  values_ = keys_;
  x_.resize(d);
  a_.resize(d);
  q_.resize(d);
  att_.resize(d);
  tmp_.resize(d);
  ff_.resize(static_cast<std::size_t>(c.ff_dim));
  probs_.resize(static_cast<std::size_t>(c.n_heads) * c.context_len);
  logits_.resize(static_cast<std::size_t>(c.vocab_size));
}

std::span<const double> Decoder::push(TokenId token) {
  const auto& c = params_.config();
  if (position_ >= c.context_len) throw std::invalid_argument("decoder is at context_len");
  if (token < 0 || token >= c.vocab_size) throw std::invalid_argument(fmt::format("token id {} out of range", token));
  const int d = c.model_dim, F = c.ff_dim, H = c.n_heads, t = position_;
  const double* w = params_.values().data();
  const auto& off = params_.offsets();

  const double* te = w + off.tok_emb + static_cast<std::size_t>(token) * d;
  const double* pe = w + off.pos_emb + static_cast<std::size_t>(t) * d;
  for (int i = 0; i < d; ++i) x_[i] = te[i] + pe[i];

  for (std::size_t l = 0; l < off.layers.size(); ++l) {
    const auto& lo = off.layers[l];
    double* kc = keys_[l].data();
    double* vc = values_[l].data();
    const auto r = static_cast<std::size_t>(t) * d;
    layer_norm(x_.data(), w + lo.ln1_gain, w + lo.ln1_bias, a_.data(), nullptr, nullptr, d);
    matvec(a_.data(), w + lo.wq, nullptr, q_.data(), d, d);
    matvec(a_.data(), w + lo.wk, nullptr, kc + r, d, d);
    matvec(a_.data(), w + lo.wv, nullptr, vc + r, d, d);
    attend(q_.data(), kc, vc, t, d, H, att_.data(), probs_.data(), static_cast<std::size_t>(c.context_len));
    matvec(att_.data(), w + lo.wo, nullptr, tmp_.data(), d, d);
    for (int i = 0; i < d; ++i) x_[i] += tmp_[i];
    layer_norm(x_.data(), w + lo.ln2_gain, w + lo.ln2_bias, a_.data(), nullptr, nullptr, d);
    matvec(a_.data(), w + lo.w1, w + lo.b1, ff_.data(), d, F);
    for (int i = 0; i < F; ++i) ff_[i] = gelu(ff_[i]);
    matvec(ff_.data(), w + lo.w2, w + lo.b2, tmp_.data(), F, d);
    for (int i = 0; i < d; ++i) x_[i] += tmp_[i];
  }
  layer_norm(x_.data(), w + off.lnf_gain, w + off.lnf_bias, a_.data(), nullptr, nullptr, d);
  matvec(a_.data(), w + off.head, nullptr, logits_.data(), d, c.vocab_size);
  ++position_;
  return logits_;
}

SampleResult sample(const ParameterStore& params, std::span<const TokenId> prompt, double temperature, int max_new,
                    TokenId stop, Rng& rng) {
  if (temperature < 0.0) throw std::invalid_argument("temperature must be >= 0");
  SampleResult out;
  if (max_new <= 0 || prompt.empty()) return out;
  const auto& c = params.config();
  check_tokens(c, prompt);
  if (static_cast<int>(prompt.size()) >= c.context_len) return out;

  Decoder decoder{params};
  std::span<const double> logits;
  for (auto t : prompt) logits = decoder.push(t);

  std::uniform_real_distribution<double> unit{0.0, 1.0};
  std::vector<double> scaled(logits.size());
  for (int n = 0; n < max_new; ++n) {
    TokenId next = 0;
    double lp = 0.0;
    if (temperature == 0.0) {
      next = static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
      lp = log_softmax(logits)[static_cast<std::size_t>(next)];
    } else {
      for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = logits[i] / temperature;
      const auto lps = log_softmax(scaled);
      double u = unit(rng);
      next = static_cast<TokenId>(lps.size() - 1);
      for (std::size_t i = 0; i < lps.size(); ++i) {
        u -= std::exp(lps[i]);
        if (u < 0.0) {
          next = static_cast<TokenId>(i);
          break;
        }
      }
      lp = lps[static_cast<std::size_t>(next)];
    }
    out.tokens.push_back(next);
    out.logprobs.push_back(lp);
    if (next == stop || prompt.size() + out.tokens.size() >= static_cast<std::size_t>(c.context_len)) break;
    logits = decoder.push(next);
  }
  return out;
}

}  // namespace bard::nanolm
