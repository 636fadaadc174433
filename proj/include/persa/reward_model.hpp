#pragma once

// Scalar reward r(x, y): an independent transformer backbone whose final
// position hidden state feeds a linear head. Trained on preference pairs
// with the Bradley-Terry likelihood sigma(r_w - r_l).

#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"
#include "persa/checkpoint.hpp"
#include "persa/model.hpp"

namespace persa {

struct PreferencePair {
  std::vector<int> prompt;
  std::vector<int> chosen;
  std::vector<int> rejected;
};

class RewardModel {
 public:
  // Fresh backbone from config; head and bias start at zero.
  explicit RewardModel(const ModelConfig& config);
  // Deep copy of `backbone`, fully trainable; head and bias start at zero.
  explicit RewardModel(const PolicyModel& backbone);

  // Deep copy.
  RewardModel(const RewardModel& other);
  RewardModel& operator=(const RewardModel& other);
  RewardModel(RewardModel&&) noexcept = default;
  RewardModel& operator=(RewardModel&&) noexcept = default;

  // Differentiable 1-element tensor. Throws LengthError when prompt + response
  // exceeds the context window.
  ad::Tensor reward_tensor(std::span<const int> prompt, std::span<const int> response) const;
  double reward(std::span<const int> prompt, std::span<const int> response) const;
  // Final-position hidden state (1 x d_model) that the head reads.
  ad::Tensor pooled(std::span<const int> prompt, std::span<const int> response) const;

  PolicyModel& backbone() { return backbone_; }
  const PolicyModel& backbone() const { return backbone_; }
  ad::Tensor& head() { return head_; }  // d_model x 1
  ad::Tensor& bias() { return bias_; }  // 1
  const ad::Tensor& head() const { return head_; }
  const ad::Tensor& bias() const { return bias_; }

  std::vector<NamedTensor> trainable_parameters() const;

 private:
  PolicyModel backbone_;
  ad::Tensor head_;
  ad::Tensor bias_;
};

// -log sigmoid(r(x, chosen) - r(x, rejected)).
ad::Tensor bt_loss(const RewardModel& rm, const PreferencePair& pair);
// Mean of bt_loss over the batch.
ad::Tensor bt_loss(const RewardModel& rm, std::span<const PreferencePair> batch);

// Fraction of pairs with r(chosen) > r(rejected); exact ties count 0.5.
double preference_accuracy(const RewardModel& rm, std::span<const PreferencePair> pairs);

struct RmSchedule {
  double lr = 1e-3;
  int epochs = 3;
  int batch_size = 16;
  double warmup_fraction = 0.05;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  int patience = 3;
  // Steps between validation passes; 0 means once per epoch.
  int eval_every = 0;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static RmSchedule from_json(const nlohmann::json& j);
};

struct RmResult {
  std::vector<double> train_loss;
  // (step, validation accuracy) at each evaluation.
  std::vector<std::pair<std::size_t, double>> validation;
  std::size_t best_step = 0;
  double best_accuracy = 0.0;
  double best_validation_loss = 0.0;
};

// Keeps the parameters with the highest validation accuracy seen so far,
// breaking ties by the lower validation loss.
// Throws ContractError on fewer than 2 training pairs or an empty validation
// set, DivergenceError on a non-finite loss.
RmResult train_rm(RewardModel& rm, std::span<const PreferencePair> train,
                  std::span<const PreferencePair> validation, const RmSchedule& schedule);

Checkpoint to_checkpoint(const RewardModel& rm);
RewardModel reward_model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace persa
