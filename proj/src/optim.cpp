#include "persa/optim.hpp"

#include <algorithm>
#include <cmath>

#include "persa/errors.hpp"

namespace persa {

AdamW::AdamW(std::vector<NamedTensor> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  if (params_.empty()) throw ContractError("AdamW: no trainable parameters");
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

double AdamW::current_lr() const {
  const double warmup =
      std::ceil(config_.warmup_fraction * static_cast<double>(config_.total_steps));
  if (warmup <= 0.0) return config_.lr;
  return config_.lr * std::min(1.0, static_cast<double>(step_ + 1) / warmup);
}

double AdamW::step() {
  double sq = 0.0;
  for (const auto& p : params_) {
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double clip = (config_.clip_norm > 0.0 && norm > config_.clip_norm)
                          ? config_.clip_norm / norm
                          : 1.0;
  const double lr = current_lr();
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ad::Tensor& t = params_[i].tensor;
    auto w = t.mutable_data();
    const auto g = t.grad();
    const bool decay = t.rank() >= 2 && config_.weight_decay > 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j] * clip;
      m_[i][j] = config_.beta1 * m_[i][j] + (1.0 - config_.beta1) * gj;
      v_[i][j] = config_.beta2 * v_[i][j] + (1.0 - config_.beta2) * gj * gj;
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      if (decay) w[j] -= lr * config_.weight_decay * w[j];
      w[j] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
  return norm;
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::vector<std::vector<double>> snapshot(const std::vector<NamedTensor>& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

void restore(std::vector<NamedTensor>& params, const std::vector<std::vector<double>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.mutable_data();
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

}  // namespace persa
