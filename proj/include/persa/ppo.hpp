#pragma once

// KL-regularized policy optimization with the clipped surrogate.
//
// Per token the shaped reward is -beta * (log pi(a_t|s_t) - log pi_ref(a_t|s_t)),
// and the standardized reward-model score is added at the final token.
// Advantages come from GAE over a linear value head that reads the policy's
// hidden states (detached, so the critic never moves policy weights).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "persa/model.hpp"
#include "persa/reward_model.hpp"

namespace persa {

struct PPOConfig {
  double clip = 0.2;
  double kl_coeff = 0.02;
  int rollout_prompts = 32;
  int ppo_epochs = 2;
  int minibatch_size = 8;
  double gamma = 1.0;
  double gae_lambda = 0.95;
  int max_new_tokens = 16;
  double temperature = 1.0;
  double value_coeff = 0.5;
  double entropy_coeff = 0.0;
  double lr = 3e-3;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  // Early stop once the mean sequence KL to the reference exceeds
  // kl_cap_factor * kl_target.
  double kl_target = 0.5;
  double kl_cap_factor = 10.0;
  int eos_id = 0;
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  static PPOConfig from_json(const nlohmann::json& j);
};

class ValueHead {
 public:
  explicit ValueHead(int d_model);
  ValueHead(const ValueHead& other);
  ValueHead& operator=(const ValueHead& other);
  ValueHead(ValueHead&&) noexcept = default;
  ValueHead& operator=(ValueHead&&) noexcept = default;

  // Vector of per-row values for hidden states (rows x d_model).
  ad::Tensor forward(const ad::Tensor& hidden) const;
  std::vector<NamedTensor> parameters() const;
  ad::Tensor& weight() { return weight_; }
  ad::Tensor& bias() { return bias_; }
  const ad::Tensor& weight() const { return weight_; }
  const ad::Tensor& bias() const { return bias_; }

 private:
  ad::Tensor weight_;  // d_model x 1
  ad::Tensor bias_;    // 1
};

struct Trajectory {
  std::vector<int> prompt;
  std::vector<int> response;
  std::vector<double> old_log_probs;
  std::vector<double> ref_log_probs;
  double raw_reward = 0.0;
  double reward = 0.0;  // standardized
  std::vector<double> shaped_rewards;
  std::vector<double> values;
  std::vector<double> advantages;
  std::vector<double> returns;
};

struct RolloutBatch {
  std::vector<Trajectory> trajectories;
  std::size_t dropped_empty = 0;
};

// Welford mean/variance over every raw reward seen so far.
class RunningStats {
 public:
  void push(double x);
  std::size_t count() const { return n_; }
  double mean() const { return mean_; }
  // Population standard deviation; 1 until two samples have been seen.
  double stddev() const;

 private:
  std::size_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

// GAE over one trajectory: delta_t = r_t + gamma * V_{t+1} - V_t with
// V_T = 0, A_t = delta_t + gamma * lambda * A_{t+1}; returns = A + V.
void compute_gae(std::span<const double> rewards, std::span<const double> values, double gamma,
                 double lambda, std::vector<double>& advantages, std::vector<double>& returns);

// Samples one response per prompt from `policy`, scores it and fills the
// per-token arrays. Responses with no tokens before <eos> are dropped and
// counted. `stats` accumulates raw rewards for standardization.
RolloutBatch collect_rollouts(const PolicyModel& policy, const ValueHead& value_head,
                              const PolicyModel& ref_policy, const RewardModel& rm,
                              std::span<const std::vector<int>> prompts, const PPOConfig& cfg,
                              RunningStats& stats, Rng& rng);

// Diagnostic: exact KL(policy || ref) over the whole vocabulary at each
// response position. The rollout path uses the sampled estimator instead.
std::vector<double> exact_kl(const PolicyModel& policy, const PolicyModel& ref_policy,
                             std::span<const int> prompt, std::span<const int> response);

struct PpoLoss {
  ad::Tensor total;
  double policy_term = 0.0;
  double value_term = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double max_ratio_deviation = 0.0;
};

// Loss over the trajectories picked by `indices`; advantages are normalized
// across the minibatch's tokens. Throws DivergenceError naming the
// trajectory and token on a non-finite ratio.
PpoLoss ppo_loss(const PolicyModel& policy, const ValueHead& value_head, const RolloutBatch& batch,
                 std::span<const std::size_t> indices, const PPOConfig& cfg);

struct PpoIteration {
  int iter = 0;
  double mean_reward = 0.0;
  double mean_kl = 0.0;
  double clip_frac = 0.0;
  double entropy = 0.0;
  double value_loss = 0.0;
  std::size_t dropped = 0;
  // Largest |ratio - 1| on the first minibatch of the iteration.
  double first_ratio_deviation = 0.0;
};

struct PpoResult {
  std::vector<PpoIteration> iterations;
  bool kl_stopped = false;
  std::string status = "ok";
};

// Runs `iterations` rounds of rollout + clipped updates. `on_iteration`, if
// set, is invoked after each round (e.g. for periodic checkpoints). When the
// measured KL breaks the cap the run stops and the policy and value head are
// restored to the last parameters whose rollouts stayed within it.
PpoResult ppo_update(PolicyModel& policy, ValueHead& value_head, const PolicyModel& ref_policy,
                     const RewardModel& rm, std::span<const std::vector<int>> prompts,
                     const PPOConfig& cfg, int iterations,
                     const std::function<void(const PpoIteration&)>& on_iteration = {});

void write_diagnostics(const std::filesystem::path& path, const PpoResult& result);

}  // namespace persa
