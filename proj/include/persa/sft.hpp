#pragma once

// Supervised fine-tuning under teacher forcing. The loss covers target
// positions only; prompt tokens are context, never predictions.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "persa/model.hpp"
#include "persa/optim.hpp"

namespace persa {

struct Demonstration {
  std::vector<int> prompt;
  std::vector<int> target;
};

struct SftSchedule {
  double lr = 3e-3;
  int epochs = 5;
  int batch_size = 16;
  double warmup_fraction = 0.05;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double label_smoothing = 0.0;
  // Evaluations without validation improvement before stopping; 0 disables.
  int patience = 3;
  // Steps between validation passes; 0 means once per epoch.
  int eval_every = 0;
  // Step cap that overrides epochs when > 0.
  int max_steps = 0;
  std::uint64_t seed = 0;
  // Trains without adapters (every weight trainable).
  bool full_param = false;

  void validate() const;
  nlohmann::json to_json() const;
  static SftSchedule from_json(const nlohmann::json& j);
};

// Per-token mean of -log pi(target_t | prompt, target_<t) over the batch.
// With label smoothing eps the per-token term mixes in eps times the mean
// negative log-probability over the vocabulary.
ad::Tensor sft_loss(const PolicyModel& model, std::span<const Demonstration> batch,
                    double label_smoothing = 0.0);

struct SftStep {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct SftResult {
  std::vector<SftStep> curve;
  // (step, validation loss) at each evaluation.
  std::vector<std::pair<std::size_t, double>> validation;
  std::size_t best_step = 0;
  double best_validation = 0.0;
  bool stopped_early = false;
};

// Restores the parameters of the best validation evaluation before
// returning. Throws ContractError when the model has no adapters and
// full_param is off, DivergenceError on a non-finite loss.
SftResult train_sft(PolicyModel& model, std::span<const Demonstration> train,
                    std::span<const Demonstration> validation, const SftSchedule& schedule);

void write_loss_curve(const std::filesystem::path& path, const SftResult& result);

}  // namespace persa
