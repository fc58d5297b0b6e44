#include <cmath>
#include <stdexcept>

#include "bard/nanolm.hpp"

namespace bard::nanolm {

AdamW::AdamW(const ParameterStore& params)
    : m_(params.size(), 0.0), v_(params.size(), 0.0), decay_(params.size(), 0) {
  for (const auto& p : params.layout())
    if (p.shape.size() >= 2) std::fill_n(decay_.begin() + static_cast<std::ptrdiff_t>(p.offset), p.size, 1);
}

void AdamW::step(ParameterStore& params, std::span<const double> grads, const AdamConfig& config) {
  if (grads.size() != params.size()) throw std::invalid_argument("gradient size does not match parameters");
  for (double g : grads)
    if (!std::isfinite(g)) throw std::runtime_error("non-finite gradient");

  const long t = steps_ + 1;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
  auto values = params.values();
  std::vector<double> next(values.begin(), values.end());
  std::vector<double> m = m_, v = v_;
  for (std::size_t i = 0; i < next.size(); ++i) {
    m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grads[i];
    v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grads[i] * grads[i];
    if (decay_[i]) next[i] -= config.lr * config.weight_decay * next[i];
    next[i] -= config.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.eps);
    if (!std::isfinite(next[i])) throw std::runtime_error("optimizer step produced a non-finite parameter");
  }
  std::copy(next.begin(), next.end(), values.begin());
  m_ = std::move(m);
  v_ = std::move(v);
  steps_ = t;
}

double clip_grad_norm(std::span<double> grads, double max_norm) {
  double sq = 0.0;
  for (double g : grads) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (double& g : grads) g *= s;
  }
  return norm;
}

}  // namespace bard::nanolm
