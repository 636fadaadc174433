#include "persa/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "persa/errors.hpp"
#include "persa/optim.hpp"

namespace persa {

using ad::Tensor;

void PPOConfig::validate() const {
  if (!(clip > 0.0 && clip < 1.0)) throw ConfigError("ppo: clip must lie in (0, 1)");
  if (kl_coeff < 0.0) throw ConfigError("ppo: kl_coeff must be >= 0");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("ppo: gamma must lie in (0, 1]");
  if (!(gae_lambda > 0.0 && gae_lambda <= 1.0)) throw ConfigError("ppo: gae_lambda must lie in (0, 1]");
  if (ppo_epochs < 1 || ppo_epochs > 4) throw ConfigError("ppo: ppo_epochs must lie in [1, 4]");
  if (rollout_prompts < 1 || minibatch_size < 1 || max_new_tokens < 1) {
    throw ConfigError("ppo: rollout_prompts, minibatch_size and max_new_tokens must be >= 1");
  }
  if (temperature <= 0.0) throw ConfigError("ppo: temperature must be positive");
  if (!(lr > 0.0)) throw ConfigError("ppo: lr must be positive");
  if (value_coeff < 0.0 || entropy_coeff < 0.0 || weight_decay < 0.0) {
    throw ConfigError("ppo: negative value_coeff/entropy_coeff/weight_decay");
  }
  if (!(kl_target > 0.0) || !(kl_cap_factor > 0.0)) throw ConfigError("ppo: kl_target and kl_cap_factor must be positive");
}

nlohmann::json PPOConfig::to_json() const {
  return {{"clip", clip},
          {"kl_coeff", kl_coeff},
          {"rollout_prompts", rollout_prompts},
          {"ppo_epochs", ppo_epochs},
          {"minibatch_size", minibatch_size},
          {"gamma", gamma},
          {"gae_lambda", gae_lambda},
          {"max_new_tokens", max_new_tokens},
          {"temperature", temperature},
          {"value_coeff", value_coeff},
          {"entropy_coeff", entropy_coeff},
          {"lr", lr},
          {"weight_decay", weight_decay},
          {"clip_norm", clip_norm},
          {"kl_target", kl_target},
          {"kl_cap_factor", kl_cap_factor},
          {"eos_id", eos_id},
          {"seed", seed}};
}

PPOConfig PPOConfig::from_json(const nlohmann::json& j) {
  PPOConfig c;
  c.clip = j.value("clip", c.clip);
  c.kl_coeff = j.value("kl_coeff", c.kl_coeff);
  c.rollout_prompts = j.value("rollout_prompts", c.rollout_prompts);
  c.ppo_epochs = j.value("ppo_epochs", c.ppo_epochs);
  c.minibatch_size = j.value("minibatch_size", c.minibatch_size);
  c.gamma = j.value("gamma", c.gamma);
  c.gae_lambda = j.value("gae_lambda", c.gae_lambda);
  c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
  c.temperature = j.value("temperature", c.temperature);
  c.value_coeff = j.value("value_coeff", c.value_coeff);
  c.entropy_coeff = j.value("entropy_coeff", c.entropy_coeff);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.kl_target = j.value("kl_target", c.kl_target);
  c.kl_cap_factor = j.value("kl_cap_factor", c.kl_cap_factor);
  c.eos_id = j.value("eos_id", c.eos_id);
  c.seed = j.value("seed", c.seed);
  return c;
}

ValueHead::ValueHead(int d_model)
    : weight_(Tensor::zeros({static_cast<std::size_t>(d_model), 1}, true)), bias_(Tensor::zeros({1}, true)) {}

ValueHead::ValueHead(const ValueHead& other) : weight_(other.weight_.clone()), bias_(other.bias_.clone()) {}

ValueHead& ValueHead::operator=(const ValueHead& other) {
  if (this != &other) {
    weight_ = other.weight_.clone();
    bias_ = other.bias_.clone();
  }
  return *this;
}

Tensor ValueHead::forward(const Tensor& hidden) const {
  const Tensor v = ad::add(ad::matmul(hidden, weight_), bias_);
  return ad::reshape(v, {v.numel()});
}

std::vector<NamedTensor> ValueHead::parameters() const {
  return {{"value.head", weight_}, {"value.bias", bias_}};
}

void RunningStats::push(double x) {
  ++n_;
  const double delta = x - mean_;
  mean_ += delta / static_cast<double>(n_);
  m2_ += delta * (x - mean_);
}

double RunningStats::stddev() const {
  if (n_ < 2) return 1.0;
  return std::sqrt(m2_ / static_cast<double>(n_));
}

void compute_gae(std::span<const double> rewards, std::span<const double> values, double gamma, double lambda,
                 std::vector<double>& advantages, std::vector<double>& returns) {
  if (rewards.size() != values.size()) throw DimensionError("compute_gae: rewards and values differ in length");
  const std::size_t n = rewards.size();
  advantages.assign(n, 0.0);
  returns.assign(n, 0.0);
  double next_adv = 0.0;
  for (std::size_t i = n; i > 0; --i) {
    const std::size_t t = i - 1;
    const double next_value = t + 1 < n ? values[t + 1] : 0.0;
    const double delta = rewards[t] + gamma * next_value - values[t];
    next_adv = delta + gamma * lambda * next_adv;
    advantages[t] = next_adv;
    returns[t] = next_adv + values[t];
  }
}

namespace {

struct PolicyPass {
  Tensor hidden;     // response rows of the final hidden states
  Tensor log_probs;  // log-softmax over response rows
  Tensor taken;      // log-prob of each response token
};

// The rollout and loss paths share this exact op sequence, which makes the
// first-step ratio exp(new - old) equal to 1 bit for bit.
PolicyPass policy_pass(const PolicyModel& policy, std::span<const int> prompt, std::span<const int> response) {
  const std::vector<int> seq = concat_tokens(prompt, response);
  const Tensor hidden = policy.forward_hidden(seq);
  const Tensor rows = ad::slice(hidden, 0, prompt.size() - 1, seq.size() - 1);
  const Tensor logp = ad::log_softmax(policy.logits_from_hidden(rows));
  return {rows, logp, ad::pick(logp, response)};
}

}  // namespace

RolloutBatch collect_rollouts(const PolicyModel& policy, const ValueHead& value_head,
                              const PolicyModel& ref_policy, const RewardModel& rm,
                              std::span<const std::vector<int>> prompts, const PPOConfig& cfg,
                              RunningStats& stats, Rng& rng) {
  cfg.validate();
  ad::NoGradGuard no_grad;
  RolloutBatch batch;
  const int max_len = policy.config().max_seq_len;
  for (const auto& prompt : prompts) {
    const int budget = std::min(cfg.max_new_tokens, max_len - static_cast<int>(prompt.size()));
    if (budget < 1) {
      throw LengthError("collect_rollouts: prompt of length " + std::to_string(prompt.size()) +
                        " leaves no room to generate");
    }
    const SampleResult s = sample(policy, prompt, budget, cfg.temperature, cfg.eos_id, rng);
    const bool empty = s.tokens.empty() || (s.tokens.size() == 1 && s.tokens[0] == cfg.eos_id);
    if (empty) {
      ++batch.dropped_empty;
      continue;
    }
    Trajectory t;
    t.prompt = prompt;
    t.response = s.tokens;
    const PolicyPass pass = policy_pass(policy, prompt, t.response);
    t.old_log_probs.assign(pass.taken.data().begin(), pass.taken.data().end());
    const Tensor values = value_head.forward(pass.hidden);
    t.values.assign(values.data().begin(), values.data().end());
    const PolicyPass ref = policy_pass(ref_policy, prompt, t.response);
    t.ref_log_probs.assign(ref.taken.data().begin(), ref.taken.data().end());
    t.raw_reward = rm.reward(prompt, t.response);
    batch.trajectories.push_back(std::move(t));
  }
  for (const auto& t : batch.trajectories) stats.push(t.raw_reward);
  const double mu = stats.mean();
  const double sd = std::max(stats.stddev(), 1e-8);
  for (auto& t : batch.trajectories) {
    t.reward = (t.raw_reward - mu) / sd;
    const std::size_t n = t.response.size();
    t.shaped_rewards.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double diff = t.old_log_probs[i] - t.ref_log_probs[i];
      t.shaped_rewards[i] = cfg.kl_coeff == 0.0 ? 0.0 : -cfg.kl_coeff * diff;
    }
    t.shaped_rewards[n - 1] += t.reward;
    compute_gae(t.shaped_rewards, t.values, cfg.gamma, cfg.gae_lambda, t.advantages, t.returns);
  }
  return batch;
}

std::vector<double> exact_kl(const PolicyModel& policy, const PolicyModel& ref_policy,
                             std::span<const int> prompt, std::span<const int> response) {
  if (prompt.empty() || response.empty()) throw ContractError("exact_kl: empty prompt or response");
  ad::NoGradGuard no_grad;
  const PolicyPass p = policy_pass(policy, prompt, response);
  const PolicyPass q = policy_pass(ref_policy, prompt, response);
  const std::size_t rows = p.log_probs.shape()[0], cols = p.log_probs.shape()[1];
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double lp = p.log_probs.at(r, c);
      out[r] += std::exp(lp) * (lp - q.log_probs.at(r, c));
    }
  }
  return out;
}

PpoLoss ppo_loss(const PolicyModel& policy, const ValueHead& value_head, const RolloutBatch& batch,
                 std::span<const std::size_t> indices, const PPOConfig& cfg) {
  if (indices.empty()) throw ContractError("ppo_loss: empty minibatch");
  double sum = 0.0, sq = 0.0;
  std::size_t count = 0;
  for (std::size_t i : indices) {
    for (double a : batch.trajectories.at(i).advantages) {
      sum += a;
      sq += a * a;
      ++count;
    }
  }
  const double adv_mean = sum / static_cast<double>(count);
  const double adv_std = std::max(std::sqrt(std::max(sq / static_cast<double>(count) - adv_mean * adv_mean, 0.0)), 1e-8);

  std::vector<Tensor> objectives, value_errors, entropies;
  std::size_t clipped = 0;
  double max_dev = 0.0;
  for (std::size_t i : indices) {
    const Trajectory& t = batch.trajectories[i];
    const PolicyPass pass = policy_pass(policy, t.prompt, t.response);
    const std::size_t n = t.response.size();
    std::vector<double> adv(n);
    for (std::size_t k = 0; k < n; ++k) adv[k] = (t.advantages[k] - adv_mean) / adv_std;
    const Tensor old_lp = Tensor::vector(t.old_log_probs);
    const Tensor advantage = Tensor::vector(adv);
    const Tensor ratio = ad::exp(ad::sub(pass.taken, old_lp));
    for (std::size_t k = 0; k < n; ++k) {
      if (!std::isfinite(ratio[k])) {
        throw DivergenceError("ppo_loss: non-finite ratio in trajectory " + std::to_string(i) + " token " +
                                  std::to_string(k),
                              0);
      }
      const double dev = std::abs(ratio[k] - 1.0);
      max_dev = std::max(max_dev, dev);
      if (dev > cfg.clip) ++clipped;
    }
    const Tensor unclipped = ad::mul(ratio, advantage);
    const Tensor clipped_obj = ad::mul(ad::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), advantage);
    objectives.push_back(ad::reshape(ad::sum(ad::minimum(unclipped, clipped_obj)), {1}));

    const Tensor values = value_head.forward(pass.hidden.detach());
    const Tensor err = ad::sub(values, Tensor::vector(t.returns));
    value_errors.push_back(ad::reshape(ad::sum(ad::square(err)), {1}));

    const Tensor probs = ad::exp(pass.log_probs);
    entropies.push_back(ad::reshape(ad::neg(ad::sum(ad::mul(probs, pass.log_probs))), {1}));
  }
  const double inv = 1.0 / static_cast<double>(count);
  const Tensor policy_term = ad::scale(ad::sum(ad::concat(objectives, 0)), -inv);
  const Tensor value_mse = ad::scale(ad::sum(ad::concat(value_errors, 0)), inv);
  const Tensor entropy = ad::scale(ad::sum(ad::concat(entropies, 0)), inv);

  PpoLoss out;
  out.total = ad::add(policy_term, ad::scale(value_mse, cfg.value_coeff));
  if (cfg.entropy_coeff > 0.0) out.total = ad::sub(out.total, ad::scale(entropy, cfg.entropy_coeff));
  out.policy_term = policy_term.item();
  out.value_term = cfg.value_coeff * value_mse.item();
  out.entropy = entropy.item();
  out.clip_fraction = static_cast<double>(clipped) * inv;
  out.max_ratio_deviation = max_dev;
  return out;
}

PpoResult ppo_update(PolicyModel& policy, ValueHead& value_head, const PolicyModel& ref_policy,
                     const RewardModel& rm, std::span<const std::vector<int>> prompts, const PPOConfig& cfg,
                     int iterations, const std::function<void(const PpoIteration&)>& on_iteration) {
  cfg.validate();
  if (prompts.empty()) throw ContractError("ppo_update: no prompts");
  if (iterations < 1) throw ConfigError("ppo_update: iterations must be >= 1");

  std::vector<NamedTensor> params = policy.trainable_parameters();
  for (auto& p : value_head.parameters()) params.push_back(p);
  const std::size_t per_iter = static_cast<std::size_t>(cfg.ppo_epochs) *
                               ((static_cast<std::size_t>(cfg.rollout_prompts) + cfg.minibatch_size - 1) /
                                static_cast<std::size_t>(cfg.minibatch_size));
  AdamWConfig opt_cfg;
  opt_cfg.lr = cfg.lr;
  opt_cfg.weight_decay = cfg.weight_decay;
  opt_cfg.warmup_fraction = 0.0;
  opt_cfg.total_steps = per_iter * static_cast<std::size_t>(iterations);
  opt_cfg.clip_norm = cfg.clip_norm;
  AdamW opt(params, opt_cfg);

  Rng rng(derive_seed(cfg.seed, 0x50504f));
  RunningStats stats;
  PpoResult result;
  std::vector<std::size_t> pool(prompts.size());
  std::iota(pool.begin(), pool.end(), 0);
  std::size_t cursor = pool.size();
  std::vector<std::vector<int>> round;
  // Parameters whose rollouts last measured within the KL cap.
  std::vector<std::vector<double>> within_cap;
  for (int iter = 0; iter < iterations; ++iter) {
    round.clear();
    while (static_cast<int>(round.size()) < cfg.rollout_prompts) {
      if (cursor == pool.size()) {
        rng.shuffle(std::span(pool));
        cursor = 0;
      }
      round.push_back(prompts[pool[cursor++]]);
    }
    RolloutBatch batch = collect_rollouts(policy, value_head, ref_policy, rm, round, cfg, stats, rng);

    PpoIteration diag;
    diag.iter = iter;
    diag.dropped = batch.dropped_empty;
    const auto& trajs = batch.trajectories;
    for (const auto& t : trajs) {
      diag.mean_reward += t.raw_reward;
      for (std::size_t k = 0; k < t.response.size(); ++k) diag.mean_kl += t.old_log_probs[k] - t.ref_log_probs[k];
    }
    if (!trajs.empty()) {
      diag.mean_reward /= static_cast<double>(trajs.size());
      diag.mean_kl /= static_cast<double>(trajs.size());
    }
    if (diag.mean_kl > cfg.kl_cap_factor * cfg.kl_target) {
      result.kl_stopped = true;
      result.status = "warning: mean KL " + std::to_string(diag.mean_kl) + " exceeded cap " +
                      std::to_string(cfg.kl_cap_factor * cfg.kl_target) + " at iteration " + std::to_string(iter);
      result.iterations.push_back(diag);
      if (on_iteration) on_iteration(diag);
      for (std::size_t i = 0; i < within_cap.size(); ++i) {
        auto dst = params[i].tensor.mutable_data();
        std::copy(within_cap[i].begin(), within_cap[i].end(), dst.begin());
      }
      break;
    }
    within_cap.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto src = params[i].tensor.data();
      within_cap[i].assign(src.begin(), src.end());
    }

    std::size_t minibatches = 0;
    std::vector<std::size_t> order(trajs.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.ppo_epochs && !trajs.empty(); ++epoch) {
      rng.shuffle(std::span(order));
      for (std::size_t start = 0; start < order.size(); start += cfg.minibatch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.minibatch_size);
        const std::span<const std::size_t> mb(order.data() + start, end - start);
        opt.zero_grad();
        const PpoLoss loss = ppo_loss(policy, value_head, batch, mb, cfg);
        if (epoch == 0 && start == 0) diag.first_ratio_deviation = loss.max_ratio_deviation;
        if (!std::isfinite(loss.total.item())) {
          throw DivergenceError("ppo_update: non-finite loss in iteration " + std::to_string(iter), opt.step_count());
        }
        ad::backward(loss.total);
        opt.step();
        diag.clip_frac += loss.clip_fraction;
        diag.entropy += loss.entropy;
        diag.value_loss += cfg.value_coeff > 0.0 ? loss.value_term / cfg.value_coeff : 0.0;
        ++minibatches;
      }
    }
    if (minibatches > 0) {
      diag.clip_frac /= static_cast<double>(minibatches);
      diag.entropy /= static_cast<double>(minibatches);
      diag.value_loss /= static_cast<double>(minibatches);
    }
    result.iterations.push_back(diag);
    if (on_iteration) on_iteration(diag);
  }
  return result;
}

void write_diagnostics(const std::filesystem::path& path, const PpoResult& result) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "iter,mean_reward,mean_kl,clip_frac,entropy,value_loss\n";
  for (const auto& d : result.iterations) {
    out << d.iter << ',' << d.mean_reward << ',' << d.mean_kl << ',' << d.clip_frac << ',' << d.entropy << ','
        << d.value_loss << '\n';
  }
}

}  // namespace persa
