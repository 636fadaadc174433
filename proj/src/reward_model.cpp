#include "persa/reward_model.hpp"

#include <cmath>
#include <numeric>

#include "persa/errors.hpp"
#include "persa/optim.hpp"
#include "persa/rng.hpp"

namespace persa {

using ad::Tensor;

RewardModel::RewardModel(const ModelConfig& config) : RewardModel(PolicyModel(config)) {}

RewardModel::RewardModel(const PolicyModel& backbone)
    : backbone_(backbone),
      head_(Tensor::zeros({static_cast<std::size_t>(backbone.config().d_model), 1}, true)),
      bias_(Tensor::zeros({1}, true)) {
  backbone_.unfreeze_all();
}

RewardModel::RewardModel(const RewardModel& other)
    : backbone_(other.backbone_), head_(other.head_.clone()), bias_(other.bias_.clone()) {}

RewardModel& RewardModel::operator=(const RewardModel& other) {
  if (this != &other) {
    backbone_ = other.backbone_;
    head_ = other.head_.clone();
    bias_ = other.bias_.clone();
  }
  return *this;
}

Tensor RewardModel::pooled(std::span<const int> prompt, std::span<const int> response) const {
  if (prompt.empty()) throw ContractError("reward: empty prompt");
  const std::vector<int> seq = concat_tokens(prompt, response);
  const Tensor hidden = backbone_.forward_hidden(seq);
  return ad::slice(hidden, 0, seq.size() - 1, seq.size());
}

Tensor RewardModel::reward_tensor(std::span<const int> prompt, std::span<const int> response) const {
  return ad::add(ad::reshape(ad::matmul(pooled(prompt, response), head_), {1}), bias_);
}

double RewardModel::reward(std::span<const int> prompt, std::span<const int> response) const {
  ad::NoGradGuard no_grad;
  return reward_tensor(prompt, response).item();
}

std::vector<NamedTensor> RewardModel::trainable_parameters() const {
  std::vector<NamedTensor> out = backbone_.trainable_parameters();
  if (head_.requires_grad()) out.push_back({"reward.head", head_});
  if (bias_.requires_grad()) out.push_back({"reward.bias", bias_});
  return out;
}

Tensor bt_loss(const RewardModel& rm, const PreferencePair& pair) {
  // The bias cancels in r_w - r_l, so the margin is taken on the pooled
  // states directly; this keeps the loss exactly shift invariant.
  const Tensor diff = ad::sub(rm.pooled(pair.prompt, pair.chosen), rm.pooled(pair.prompt, pair.rejected));
  return ad::neg(ad::sum(ad::log_sigmoid(ad::matmul(diff, rm.head()))));
}

Tensor bt_loss(const RewardModel& rm, std::span<const PreferencePair> batch) {
  if (batch.empty()) throw ContractError("bt_loss: empty batch");
  std::vector<Tensor> parts;
  parts.reserve(batch.size());
  for (const auto& p : batch) parts.push_back(ad::reshape(bt_loss(rm, p), {1}));
  return ad::mean(ad::concat(parts, 0));
}

double preference_accuracy(const RewardModel& rm, std::span<const PreferencePair> pairs) {
  if (pairs.empty()) throw ContractError("preference_accuracy: no pairs");
  double wins = 0.0;
  for (const auto& p : pairs) {
    const double rw = rm.reward(p.prompt, p.chosen);
    const double rl = rm.reward(p.prompt, p.rejected);
    if (rw > rl) {
      wins += 1.0;
    } else if (rw == rl) {
      wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs.size());
}

void RmSchedule::validate() const {
  if (!(lr > 0.0)) throw ConfigError("rm: lr must be positive");
  if (epochs < 1) throw ConfigError("rm: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("rm: batch_size must be >= 1");
  if (warmup_fraction < 0.0 || warmup_fraction > 1.0) throw ConfigError("rm: warmup_fraction outside [0, 1]");
  if (weight_decay < 0.0 || patience < 0 || eval_every < 0) {
    throw ConfigError("rm: negative weight_decay/patience/eval_every");
  }
}

nlohmann::json RmSchedule::to_json() const {
  return {{"lr", lr},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"warmup_fraction", warmup_fraction},
          {"weight_decay", weight_decay},
          {"clip_norm", clip_norm},
          {"patience", patience},
          {"eval_every", eval_every},
          {"seed", seed}};
}

RmSchedule RmSchedule::from_json(const nlohmann::json& j) {
  RmSchedule s;
  s.lr = j.value("lr", s.lr);
  s.epochs = j.value("epochs", s.epochs);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.warmup_fraction = j.value("warmup_fraction", s.warmup_fraction);
  s.weight_decay = j.value("weight_decay", s.weight_decay);
  s.clip_norm = j.value("clip_norm", s.clip_norm);
  s.patience = j.value("patience", s.patience);
  s.eval_every = j.value("eval_every", s.eval_every);
  s.seed = j.value("seed", s.seed);
  return s;
}

RmResult train_rm(RewardModel& rm, std::span<const PreferencePair> train,
                  std::span<const PreferencePair> validation, const RmSchedule& schedule) {
  schedule.validate();
  if (train.size() < 2) throw ContractError("train_rm: need at least 2 training pairs");
  if (validation.empty()) throw ContractError("train_rm: empty validation split");

  const std::size_t n = train.size();
  const std::size_t batch = std::min<std::size_t>(schedule.batch_size, n);
  const std::size_t per_epoch = (n + batch - 1) / batch;
  const std::size_t total = per_epoch * static_cast<std::size_t>(schedule.epochs);
  const std::size_t eval_every = schedule.eval_every > 0 ? static_cast<std::size_t>(schedule.eval_every) : per_epoch;

  AdamWConfig opt_cfg;
  opt_cfg.lr = schedule.lr;
  opt_cfg.weight_decay = schedule.weight_decay;
  opt_cfg.warmup_fraction = schedule.warmup_fraction;
  opt_cfg.total_steps = total;
  opt_cfg.clip_norm = schedule.clip_norm;
  std::vector<NamedTensor> params = rm.trainable_parameters();
  AdamW opt(params, opt_cfg);

  auto validation_loss = [&] {
    ad::NoGradGuard no_grad;
    return bt_loss(rm, validation).item();
  };
  RmResult result;
  result.best_accuracy = preference_accuracy(rm, validation);
  result.best_validation_loss = validation_loss();
  result.validation.emplace_back(0, result.best_accuracy);
  auto best = snapshot(params);
  int bad_evals = 0;

  std::vector<std::size_t> order(n);
  std::vector<PreferencePair> mb;
  for (std::size_t step = 0; step < total; ++step) {
    const std::size_t slot = step % per_epoch;
    if (slot == 0) {
      Rng rng(derive_seed(schedule.seed, step / per_epoch));
      std::iota(order.begin(), order.end(), 0);
      rng.shuffle(std::span(order));
    }
    mb.clear();
    for (std::size_t i = slot * batch; i < std::min(n, (slot + 1) * batch); ++i) mb.push_back(train[order[i]]);
    opt.zero_grad();
    const Tensor loss = bt_loss(rm, std::span<const PreferencePair>(mb));
    if (!std::isfinite(loss.item())) throw DivergenceError("train_rm: non-finite loss", step);
    ad::backward(loss);
    opt.step();
    result.train_loss.push_back(loss.item());

    if ((step + 1) % eval_every == 0 || step + 1 == total) {
      const double acc = preference_accuracy(rm, validation);
      const double vloss = validation_loss();
      result.validation.emplace_back(step + 1, acc);
      if (acc > result.best_accuracy || (acc == result.best_accuracy && vloss < result.best_validation_loss)) {
        result.best_accuracy = acc;
        result.best_validation_loss = vloss;
        result.best_step = step + 1;
        best = snapshot(params);
        bad_evals = 0;
      } else if (schedule.patience > 0 && ++bad_evals >= schedule.patience) {
        break;
      }
    }
  }
  restore(params, best);
  return result;
}

Checkpoint to_checkpoint(const RewardModel& rm) {
  Checkpoint ckpt = to_checkpoint(rm.backbone());
  ckpt.meta["kind"] = "reward_model";
  ckpt.add("reward.head", "head", rm.head());
  ckpt.add("reward.bias", "head", rm.bias());
  return ckpt;
}

RewardModel reward_model_from_checkpoint(const Checkpoint& ckpt) {
  RewardModel rm(policy_from_checkpoint(ckpt));
  const Tensor& head = ckpt.get("reward.head");
  const Tensor& bias = ckpt.get("reward.bias");
  if (head.shape() != rm.head().shape() || bias.shape() != rm.bias().shape()) {
    throw std::runtime_error("checkpoint: reward head shape mismatch");
  }
  std::copy(head.data().begin(), head.data().end(), rm.head().mutable_data().begin());
  std::copy(bias.data().begin(), bias.data().end(), rm.bias().mutable_data().begin());
  return rm;
}

}  // namespace persa
