#include "persa/model.hpp"

#include <algorithm>
#include <cmath>

#include "persa/errors.hpp"

namespace persa {

using ad::Tensor;

namespace {

constexpr double kInitStd = 0.02;

Tensor gaussian(ad::Shape shape, double stddev, Rng& rng) {
  std::vector<double> values(ad::numel(shape));
  for (double& v : values) v = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(values), true);
}

std::string block_prefix(int block) { return "blocks." + std::to_string(block) + "."; }

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("model.") + name + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(n_layers, "n_layers");
  if (d_model % n_heads != 0) {
    throw ConfigError("model.d_model (" + std::to_string(d_model) +
                      ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
  }
  if (max_seq_len < 2) throw ConfigError("model.max_seq_len must be at least 2");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"d_model", d_model}, {"n_heads", n_heads},
          {"d_ff", d_ff},             {"n_layers", n_layers}, {"max_seq_len", max_seq_len},
          {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

const std::vector<TargetKind>& all_target_kinds() {
  static const std::vector<TargetKind> kinds = {TargetKind::q,  TargetKind::k,
                                                TargetKind::v,  TargetKind::o,
                                                TargetKind::up, TargetKind::down,
                                                TargetKind::gate};
  return kinds;
}

std::string to_string(TargetKind kind) {
  switch (kind) {
    case TargetKind::q: return "q";
    case TargetKind::k: return "k";
    case TargetKind::v: return "v";
    case TargetKind::o: return "o";
    case TargetKind::up: return "up";
    case TargetKind::down: return "down";
    case TargetKind::gate: return "gate";
  }
  return "?";
}

TargetKind target_kind_from_string(const std::string& name) {
  for (TargetKind k : all_target_kinds()) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown LoRA target kind '" + name + "'");
}

std::string target_weight_name(int block, TargetKind kind) {
  const bool attn = kind == TargetKind::q || kind == TargetKind::k ||
                    kind == TargetKind::v || kind == TargetKind::o;
  return block_prefix(block) + (attn ? "attn." : "ffn.") + to_string(kind);
}

LayerSelection LayerSelection::top(int top, int n_layers, std::set<TargetKind> kinds) {
  if (top <= 0 || top > n_layers) {
    throw ConfigError("top-" + std::to_string(top) + " selection needs 1 <= L <= n_layers (" +
                      std::to_string(n_layers) + "); cap L at " + std::to_string(n_layers));
  }
  LayerSelection s;
  for (int b = n_layers - top; b < n_layers; ++b) s.block_indices.insert(b);
  s.target_kinds = kinds.empty()
                       ? std::set<TargetKind>(all_target_kinds().begin(), all_target_kinds().end())
                       : std::move(kinds);
  return s;
}

LayerSelection LayerSelection::all_layers(int n_layers, std::set<TargetKind> kinds) {
  return top(n_layers, n_layers, std::move(kinds));
}

void LayerSelection::validate(const ModelConfig& config) const {
  if (block_indices.empty() || target_kinds.empty()) {
    throw ConfigError("layer selection must name at least one block and one target kind");
  }
  for (int b : block_indices) {
    if (b < 0 || b >= config.n_layers) {
      throw ConfigError("layer selection block " + std::to_string(b) +
                        " outside [0, " + std::to_string(config.n_layers) + ")");
    }
  }
}

PolicyModel::PolicyModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  Rng rng(config_.seed);
  const auto V = static_cast<std::size_t>(config_.vocab_size);
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto f = static_cast<std::size_t>(config_.d_ff);
  const auto T = static_cast<std::size_t>(config_.max_seq_len);
  // Creation order fixes the RNG stream; keep it stable.
  weights_["tok_emb"] = gaussian({V, d}, kInitStd, rng);
  weights_["pos_emb"] = gaussian({T, d}, kInitStd, rng);
  for (int b = 0; b < config_.n_layers; ++b) {
    const std::string p = block_prefix(b);
    weights_[p + "ln1.gain"] = Tensor::full({d}, 1.0, true);
    weights_[p + "ln1.bias"] = Tensor::zeros({d}, true);
    for (const char* name : {"attn.q", "attn.k", "attn.v", "attn.o"}) {
      weights_[p + name] = gaussian({d, d}, kInitStd, rng);
    }
    weights_[p + "ln2.gain"] = Tensor::full({d}, 1.0, true);
    weights_[p + "ln2.bias"] = Tensor::zeros({d}, true);
    weights_[p + "ffn.gate"] = gaussian({d, f}, kInitStd, rng);
    weights_[p + "ffn.up"] = gaussian({d, f}, kInitStd, rng);
    weights_[p + "ffn.down"] = gaussian({f, d}, kInitStd, rng);
  }
  weights_["ln_f.gain"] = Tensor::full({d}, 1.0, true);
  weights_["ln_f.bias"] = Tensor::zeros({d}, true);
  weights_["head"] = gaussian({d, V}, kInitStd, rng);
}

PolicyModel::PolicyModel(const PolicyModel& other) : config_(other.config_) {
  for (const auto& [name, t] : other.weights_) weights_[name] = t.clone();
  for (const auto& [name, a] : other.adapters_) {
    LoRAAdapter copy = a;
    copy.A = a.A.clone();
    copy.B = a.B.clone();
    adapters_[name] = std::move(copy);
  }
}

PolicyModel& PolicyModel::operator=(const PolicyModel& other) {
  if (this != &other) {
    PolicyModel copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void PolicyModel::check_tokens(std::span<const int> tokens) const {
  if (tokens.empty()) throw ContractError("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(config_.max_seq_len)) {
    throw LengthError("forward: sequence of " + std::to_string(tokens.size()) +
                      " tokens exceeds max_seq_len " + std::to_string(config_.max_seq_len));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= config_.vocab_size) {
      throw VocabularyError("forward: token " + std::to_string(tokens[i]) + " at position " +
                            std::to_string(i) + " outside vocabulary of " +
                            std::to_string(config_.vocab_size));
    }
  }
}

Tensor PolicyModel::linear(const Tensor& x, const std::string& name) const {
  Tensor y = ad::matmul(x, weights_.at(name));
  if (auto it = adapters_.find(name); it != adapters_.end()) {
    const LoRAAdapter& lora = it->second;
    y = ad::add(y, ad::scale(ad::matmul(ad::matmul(x, lora.B), lora.A), lora.scaling()));
  }
  return y;
}

Tensor PolicyModel::attention(const Tensor& x, int block) const {
  const std::string p = block_prefix(block);
  const Tensor q = linear(x, p + "attn.q");
  const Tensor k = linear(x, p + "attn.k");
  const Tensor v = linear(x, p + "attn.v");
  const auto head_dim = static_cast<std::size_t>(config_.d_model / config_.n_heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Tensor> heads;
  heads.reserve(config_.n_heads);
  for (int h = 0; h < config_.n_heads; ++h) {
    const std::size_t lo = h * head_dim, hi = lo + head_dim;
    const Tensor qh = ad::slice(q, 1, lo, hi);
    const Tensor kh = ad::slice(k, 1, lo, hi);
    const Tensor vh = ad::slice(v, 1, lo, hi);
    const Tensor scores = ad::causal_mask(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt));
    heads.push_back(ad::matmul(ad::softmax(scores), vh));
  }
  return linear(ad::concat(heads, 1), p + "attn.o");
}

Tensor PolicyModel::feed_forward(const Tensor& x, int block) const {
  const std::string p = block_prefix(block);
  const Tensor gated = ad::mul(ad::gelu(linear(x, p + "ffn.gate")), linear(x, p + "ffn.up"));
  return linear(gated, p + "ffn.down");
}

Tensor PolicyModel::forward_hidden(std::span<const int> tokens) const {
  check_tokens(tokens);
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
  Tensor h = ad::add(ad::embedding(weights_.at("tok_emb"), tokens),
                     ad::embedding(weights_.at("pos_emb"), positions));
  for (int b = 0; b < config_.n_layers; ++b) {
    const std::string p = block_prefix(b);
    h = ad::add(h, attention(ad::layer_norm(h, weights_.at(p + "ln1.gain"),
                                            weights_.at(p + "ln1.bias")),
                             b));
    h = ad::add(h, feed_forward(ad::layer_norm(h, weights_.at(p + "ln2.gain"),
                                               weights_.at(p + "ln2.bias")),
                                b));
  }
  return ad::layer_norm(h, weights_.at("ln_f.gain"), weights_.at("ln_f.bias"));
}

Tensor PolicyModel::logits_from_hidden(const Tensor& hidden) const {
  return ad::matmul(hidden, weights_.at("head"));
}

void PolicyModel::attach_lora(const LayerSelection& selection, int rank, double alpha) {
  selection.validate(config_);
  if (rank <= 0) throw ConfigError("LoRA rank must be positive");
  if (!(alpha > 0.0)) throw ConfigError("LoRA alpha must be positive");
  std::vector<std::string> targets;
  for (int b : selection.block_indices) {
    for (TargetKind kind : selection.target_kinds) {
      const std::string name = target_weight_name(b, kind);
      if (adapters_.count(name)) {
        throw ConfigError("LoRA adapter already attached to " + name);
      }
      targets.push_back(name);
    }
  }
  for (auto& [name, w] : weights_) w.set_requires_grad(false);
  for (const std::string& name : targets) {
    const Tensor& w = weights_.at(name);
    const std::size_t d = w.shape()[0], k = w.shape()[1];
    // Each adapter draws from its own stream so attach order is irrelevant.
    std::uint64_t stream = 0;
    for (char c : name) stream = stream * 131 + static_cast<unsigned char>(c);
    Rng rng(derive_seed(config_.seed, stream));
    LoRAAdapter lora;
    lora.target = name;
    lora.rank = rank;
    lora.alpha = alpha;
    lora.A = gaussian({static_cast<std::size_t>(rank), k}, kInitStd, rng);
    lora.B = Tensor::zeros({d, static_cast<std::size_t>(rank)}, true);
    adapters_[name] = std::move(lora);
  }
  for (auto& [name, lora] : adapters_) {
    lora.A.set_requires_grad(true);
    lora.B.set_requires_grad(true);
  }
}

void PolicyModel::unfreeze_all() {
  for (auto& [name, w] : weights_) w.set_requires_grad(true);
  for (auto& [name, lora] : adapters_) {
    lora.A.set_requires_grad(true);
    lora.B.set_requires_grad(true);
  }
}

void PolicyModel::freeze_all() {
  for (auto& [name, w] : weights_) w.set_requires_grad(false);
  for (auto& [name, lora] : adapters_) {
    lora.A.set_requires_grad(false);
    lora.B.set_requires_grad(false);
  }
}

std::vector<NamedTensor> PolicyModel::named_tensors() const {
  std::vector<NamedTensor> out;
  for (const auto& [name, w] : weights_) out.push_back({name, w});
  for (const auto& [name, lora] : adapters_) {
    out.push_back({name + ".lora_A", lora.A});
    out.push_back({name + ".lora_B", lora.B});
  }
  return out;
}

std::vector<NamedTensor> PolicyModel::trainable_parameters() const {
  std::vector<NamedTensor> out;
  for (auto& nt : named_tensors()) {
    if (nt.tensor.requires_grad()) out.push_back(std::move(nt));
  }
  return out;
}

Tensor& PolicyModel::weight(const std::string& name) {
  auto it = weights_.find(name);
  if (it == weights_.end()) throw ContractError("no weight named '" + name + "'");
  return it->second;
}

const Tensor& PolicyModel::weight(const std::string& name) const {
  auto it = weights_.find(name);
  if (it == weights_.end()) throw ContractError("no weight named '" + name + "'");
  return it->second;
}

LoRAAdapter& PolicyModel::adapter(const std::string& target) {
  auto it = adapters_.find(target);
  if (it == adapters_.end()) throw ContractError("no adapter on '" + target + "'");
  return it->second;
}

Tensor PolicyModel::effective_weight(const std::string& name) const {
  ad::NoGradGuard no_grad;
  const Tensor& w = weight(name);
  auto it = adapters_.find(name);
  if (it == adapters_.end()) return w.detach();
  const LoRAAdapter& lora = it->second;
  return ad::add(w, ad::scale(ad::matmul(lora.B, lora.A), lora.scaling())).detach();
}

std::size_t PolicyModel::trainable_count() const {
  std::size_t n = 0;
  for (const auto& nt : trainable_parameters()) n += nt.tensor.numel();
  return n;
}

std::size_t PolicyModel::total_count() const {
  std::size_t n = 0;
  for (const auto& nt : named_tensors()) n += nt.tensor.numel();
  return n;
}

nlohmann::json PolicyModel::to_json_meta() const {
  nlohmann::json adapters = nlohmann::json::array();
  for (const auto& [name, lora] : adapters_) {
    adapters.push_back({{"target", name}, {"rank", lora.rank}, {"alpha", lora.alpha}});
  }
  return {{"model", config_.to_json()}, {"adapters", adapters}};
}

PolicyModel clone_frozen(const PolicyModel& model) {
  PolicyModel copy(model);
  copy.freeze_all();
  return copy;
}

Tensor forward_logits(const PolicyModel& model, std::span<const int> tokens) {
  return model.logits_from_hidden(model.forward_hidden(tokens));
}

std::vector<int> concat_tokens(std::span<const int> a, std::span<const int> b) {
  std::vector<int> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

Tensor response_log_probs(const PolicyModel& model, std::span<const int> prompt,
                          std::span<const int> response) {
  if (response.empty()) throw ContractError("log_prob: empty response");
  if (prompt.empty()) throw ContractError("log_prob: empty prompt");
  const std::vector<int> tokens = concat_tokens(prompt, response);
  const Tensor logits = forward_logits(model, tokens);
  // Row p-1+t predicts response[t].
  const Tensor rows = ad::slice(logits, 0, prompt.size() - 1, tokens.size() - 1);
  return ad::pick(ad::log_softmax(rows), response);
}

LogProbResult log_prob(const PolicyModel& model, std::span<const int> prompt,
                       std::span<const int> response) {
  ad::NoGradGuard no_grad;
  const Tensor lp = response_log_probs(model, prompt, response);
  LogProbResult out;
  out.per_token.assign(lp.data().begin(), lp.data().end());
  for (double v : out.per_token) out.sum += v;
  return out;
}

SampleResult sample(const PolicyModel& model, std::span<const int> prompt,
                    int max_new, double temperature, int eos_id, Rng& rng) {
  if (prompt.empty()) throw ContractError("sample: empty prompt");
  if (temperature < 0.0) throw ContractError("sample: negative temperature");
  ad::NoGradGuard no_grad;
  std::vector<int> tokens(prompt.begin(), prompt.end());
  SampleResult out;
  const auto V = static_cast<std::size_t>(model.config().vocab_size);
  std::vector<double> weights(V);
  while (static_cast<int>(out.tokens.size()) < max_new &&
         tokens.size() < static_cast<std::size_t>(model.config().max_seq_len)) {
    const Tensor logits = forward_logits(model, tokens);
    const Tensor last = ad::slice(logits, 0, tokens.size() - 1, tokens.size());
    const Tensor logp = ad::log_softmax(last);
    std::size_t choice = 0;
    if (temperature == 0.0) {
      for (std::size_t c = 1; c < V; ++c) {
        if (last[c] > last[choice]) choice = c;
      }
    } else {
      double mx = last[0] / temperature;
      for (std::size_t c = 1; c < V; ++c) mx = std::max(mx, last[c] / temperature);
      for (std::size_t c = 0; c < V; ++c) weights[c] = std::exp(last[c] / temperature - mx);
      choice = rng.categorical(weights);
    }
    const int token = static_cast<int>(choice);
    out.tokens.push_back(token);
    out.log_probs.push_back(logp[choice]);
    tokens.push_back(token);
    if (token == eos_id) break;
  }
  return out;
}

}  // namespace persa
