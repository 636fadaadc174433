#pragma once

#include <cstddef>
#include <vector>

#include "persa/model.hpp"

namespace persa {

struct AdamWConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Decoupled decay, applied to matrices only (not norms or vectors).
  double weight_decay = 0.01;
  // Linear warmup over this fraction of total_steps, then constant.
  double warmup_fraction = 0.05;
  std::size_t total_steps = 0;
  // Global gradient-norm clip; <= 0 disables.
  double clip_norm = 1.0;
};

// Adaptive-moment optimizer with decoupled weight decay. Holds per-parameter
// first/second moments of the same length as each parameter.
class AdamW {
 public:
  AdamW(std::vector<NamedTensor> params, AdamWConfig config);

  // Applies one update from the accumulated gradients and returns the
  // pre-clip global gradient norm. Parameters without a gradient are treated
  // as having a zero gradient.
  double step();
  void zero_grad();

  double current_lr() const;
  std::size_t step_count() const { return step_; }
  const std::vector<NamedTensor>& params() const { return params_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  std::vector<NamedTensor> params_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t step_ = 0;
};

// Snapshot/restore of parameter values (used for best-checkpoint tracking).
std::vector<std::vector<double>> snapshot(const std::vector<NamedTensor>& params);
void restore(std::vector<NamedTensor>& params, const std::vector<std::vector<double>>& values);

}  // namespace persa
