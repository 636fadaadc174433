#include "persa/sft.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "persa/errors.hpp"
#include "persa/rng.hpp"

namespace persa {

using ad::Tensor;

void SftSchedule::validate() const {
  if (!(lr > 0.0)) throw ConfigError("sft: lr must be positive");
  if (epochs < 1 && max_steps < 1) throw ConfigError("sft: need epochs >= 1 or max_steps >= 1");
  if (batch_size < 1) throw ConfigError("sft: batch_size must be >= 1");
  if (warmup_fraction < 0.0 || warmup_fraction > 1.0) throw ConfigError("sft: warmup_fraction outside [0, 1]");
  if (weight_decay < 0.0) throw ConfigError("sft: negative weight_decay");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw ConfigError("sft: label_smoothing outside [0, 1)");
  if (patience < 0 || eval_every < 0 || max_steps < 0) throw ConfigError("sft: negative patience/eval_every/max_steps");
}

nlohmann::json SftSchedule::to_json() const {
  return {{"lr", lr},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"warmup_fraction", warmup_fraction},
          {"weight_decay", weight_decay},
          {"clip_norm", clip_norm},
          {"label_smoothing", label_smoothing},
          {"patience", patience},
          {"eval_every", eval_every},
          {"max_steps", max_steps},
          {"seed", seed},
          {"full_param", full_param}};
}

SftSchedule SftSchedule::from_json(const nlohmann::json& j) {
  SftSchedule s;
  s.lr = j.value("lr", s.lr);
  s.epochs = j.value("epochs", s.epochs);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.warmup_fraction = j.value("warmup_fraction", s.warmup_fraction);
  s.weight_decay = j.value("weight_decay", s.weight_decay);
  s.clip_norm = j.value("clip_norm", s.clip_norm);
  s.label_smoothing = j.value("label_smoothing", s.label_smoothing);
  s.patience = j.value("patience", s.patience);
  s.eval_every = j.value("eval_every", s.eval_every);
  s.max_steps = j.value("max_steps", s.max_steps);
  s.seed = j.value("seed", s.seed);
  s.full_param = j.value("full_param", s.full_param);
  return s;
}

Tensor sft_loss(const PolicyModel& model, std::span<const Demonstration> batch, double label_smoothing) {
  if (batch.empty()) throw ContractError("sft_loss: empty batch");
  const auto max_len = static_cast<std::size_t>(model.config().max_seq_len);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& ex = batch[i];
    if (ex.prompt.empty() || ex.target.empty()) {
      throw ContractError("sft_loss: example " + std::to_string(i) + " has an empty prompt or target");
    }
    const std::size_t len = ex.prompt.size() + ex.target.size();
    if (len > max_len) {
      throw LengthError("sft_loss: example " + std::to_string(i) + " has length " + std::to_string(len) +
                        " > max_seq_len " + std::to_string(max_len));
    }
  }
  std::vector<Tensor> per_example;
  per_example.reserve(batch.size());
  std::size_t tokens = 0;
  for (const auto& ex : batch) {
    const std::vector<int> seq = concat_tokens(ex.prompt, ex.target);
    const Tensor logits = forward_logits(model, seq);
    const Tensor rows = ad::slice(logits, 0, ex.prompt.size() - 1, seq.size() - 1);
    const Tensor logp = ad::log_softmax(rows);
    Tensor nll = ad::neg(ad::sum(ad::pick(logp, ex.target)));
    if (label_smoothing > 0.0) {
      const double v = static_cast<double>(model.config().vocab_size);
      const Tensor uniform_nll = ad::scale(ad::sum(logp), -1.0 / v);
      nll = ad::add(ad::scale(nll, 1.0 - label_smoothing), ad::scale(uniform_nll, label_smoothing));
    }
    per_example.push_back(nll);
    tokens += ex.target.size();
  }
  return ad::scale(ad::sum(ad::concat(per_example, 0)), 1.0 / static_cast<double>(tokens));
}

namespace {

double validation_loss(const PolicyModel& model, std::span<const Demonstration> validation) {
  ad::NoGradGuard no_grad;
  return sft_loss(model, validation).item();
}

}  // namespace

SftResult train_sft(PolicyModel& model, std::span<const Demonstration> train,
                    std::span<const Demonstration> validation, const SftSchedule& schedule) {
  schedule.validate();
  if (train.empty()) throw ContractError("train_sft: empty training set");
  if (schedule.full_param) {
    model.unfreeze_all();
  } else if (model.adapters().empty()) {
    throw ContractError("train_sft: no adapters attached and full_param is off");
  }

  const std::size_t n = train.size();
  const std::size_t batch = std::min<std::size_t>(schedule.batch_size, n);
  const std::size_t per_epoch = (n + batch - 1) / batch;
  const std::size_t total = schedule.max_steps > 0 ? static_cast<std::size_t>(schedule.max_steps)
                                                   : per_epoch * static_cast<std::size_t>(schedule.epochs);
  const std::size_t eval_every = schedule.eval_every > 0 ? static_cast<std::size_t>(schedule.eval_every) : per_epoch;

  AdamWConfig opt_cfg;
  opt_cfg.lr = schedule.lr;
  opt_cfg.weight_decay = schedule.weight_decay;
  opt_cfg.warmup_fraction = schedule.warmup_fraction;
  opt_cfg.total_steps = total;
  opt_cfg.clip_norm = schedule.clip_norm;
  std::vector<NamedTensor> params = model.trainable_parameters();
  AdamW opt(params, opt_cfg);

  SftResult result;
  std::vector<std::vector<double>> best;
  int bad_evals = 0;
  if (!validation.empty()) {
    result.best_validation = validation_loss(model, validation);
    result.validation.emplace_back(0, result.best_validation);
    best = snapshot(params);
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<Demonstration> mb;
  for (std::size_t step = 0; step < total; ++step) {
    const std::size_t slot = step % per_epoch;
    if (slot == 0) {
      Rng rng(derive_seed(schedule.seed, step / per_epoch));
      std::iota(order.begin(), order.end(), 0);
      rng.shuffle(std::span(order));
    }
    mb.clear();
    for (std::size_t i = slot * batch; i < std::min(n, (slot + 1) * batch); ++i) mb.push_back(train[order[i]]);

    const double lr = opt.current_lr();
    opt.zero_grad();
    const Tensor loss = sft_loss(model, mb, schedule.label_smoothing);
    if (!std::isfinite(loss.item())) throw DivergenceError("train_sft: non-finite loss", step);
    ad::backward(loss);
    opt.step();
    result.curve.push_back({step, loss.item(), lr});

    if (!validation.empty() && ((step + 1) % eval_every == 0 || step + 1 == total)) {
      const double v = validation_loss(model, validation);
      result.validation.emplace_back(step + 1, v);
      if (v < result.best_validation) {
        result.best_validation = v;
        result.best_step = step + 1;
        best = snapshot(params);
        bad_evals = 0;
      } else if (schedule.patience > 0 && ++bad_evals >= schedule.patience) {
        result.stopped_early = true;
        break;
      }
    }
  }
  if (!validation.empty()) {
    restore(params, best);
  } else {
    result.best_step = total;
  }
  return result;
}

void write_loss_curve(const std::filesystem::path& path, const SftResult& result) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "step,loss,lr\n";
  for (const auto& s : result.curve) out << s.step << ',' << s.loss << ',' << s.lr << '\n';
}

}  // namespace persa
