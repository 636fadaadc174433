#pragma once

// Decoder-only transformer used as a token-level stochastic policy, with
// low-rank adapters that can be attached to selected blocks.
//
// Blocks are pre-norm: h += attn(ln1(h)); h += ffn(ln2(h)), where the FFN is
// gated: down(gelu(x * gate) . (x * up)). Linear weights are stored input-major
// (y = x * W), so a target of shape d x k gets B: d x r and A: r x k, and the
// adapted product is x * W + (alpha / r) * (x * B) * A.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "persa/rng.hpp"
#include "persa/tensor.hpp"

namespace persa {

struct ModelConfig {
  int vocab_size = 64;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 128;
  int n_layers = 4;
  int max_seq_len = 48;
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

enum class TargetKind { q, k, v, o, up, down, gate };

const std::vector<TargetKind>& all_target_kinds();
std::string to_string(TargetKind kind);
TargetKind target_kind_from_string(const std::string& name);
// Weight name of a target inside block `block`, e.g. "blocks.3.ffn.up".
std::string target_weight_name(int block, TargetKind kind);

struct LayerSelection {
  std::set<int> block_indices;
  std::set<TargetKind> target_kinds;

  // Blocks {n_layers - top, ..., n_layers - 1}.
  static LayerSelection top(int top, int n_layers,
                            std::set<TargetKind> kinds = {});
  static LayerSelection all_layers(int n_layers, std::set<TargetKind> kinds = {});
  void validate(const ModelConfig& config) const;
};

struct LoRAAdapter {
  std::string target;
  int rank = 0;
  double alpha = 0.0;
  ad::Tensor A;  // rank x k
  ad::Tensor B;  // d x rank, zero at creation

  double scaling() const { return alpha / rank; }
  std::size_t trainable_count() const { return A.numel() + B.numel(); }
};

struct NamedTensor {
  std::string name;
  ad::Tensor tensor;
};

class PolicyModel {
 public:
  explicit PolicyModel(const ModelConfig& config);

  // Deep copy; requires_grad flags are preserved.
  PolicyModel(const PolicyModel& other);
  PolicyModel& operator=(const PolicyModel& other);
  PolicyModel(PolicyModel&&) noexcept = default;
  PolicyModel& operator=(PolicyModel&&) noexcept = default;

  const ModelConfig& config() const { return config_; }

  // Final-norm hidden states, len x d_model.
  ad::Tensor forward_hidden(std::span<const int> tokens) const;
  // hidden x head, len x vocab.
  ad::Tensor logits_from_hidden(const ad::Tensor& hidden) const;

  // Installs zero-initialized-B adapters on every selected target and freezes
  // all base weights. Throws ConfigError on a target that already has one.
  void attach_lora(const LayerSelection& selection, int rank, double alpha);
  // Full-parameter mode: every base weight and adapter becomes trainable.
  void unfreeze_all();
  void freeze_all();

  // Tensors with requires_grad, in a stable order.
  std::vector<NamedTensor> trainable_parameters() const;
  // Every tensor: base weights by name, adapters as "<target>.lora_A/B".
  std::vector<NamedTensor> named_tensors() const;
  const std::map<std::string, ad::Tensor>& base_weights() const { return weights_; }
  const std::map<std::string, LoRAAdapter>& adapters() const { return adapters_; }
  ad::Tensor& weight(const std::string& name);
  const ad::Tensor& weight(const std::string& name) const;
  LoRAAdapter& adapter(const std::string& target);

  // W + (alpha / r) * B * A for a weight with an adapter, else W itself.
  ad::Tensor effective_weight(const std::string& name) const;

  std::size_t trainable_count() const;
  std::size_t total_count() const;

  nlohmann::json to_json_meta() const;

 private:
  ad::Tensor linear(const ad::Tensor& x, const std::string& name) const;
  ad::Tensor attention(const ad::Tensor& x, int block) const;
  ad::Tensor feed_forward(const ad::Tensor& x, int block) const;
  void check_tokens(std::span<const int> tokens) const;

  ModelConfig config_;
  std::map<std::string, ad::Tensor> weights_;
  std::map<std::string, LoRAAdapter> adapters_;
};

// Deep copy with every tensor's requires_grad cleared.
PolicyModel clone_frozen(const PolicyModel& model);

ad::Tensor forward_logits(const PolicyModel& model, std::span<const int> tokens);

// Differentiable per-token log pi(response_t | prompt, response_<t), a vector
// of length response.size().
ad::Tensor response_log_probs(const PolicyModel& model, std::span<const int> prompt,
                              std::span<const int> response);

struct LogProbResult {
  std::vector<double> per_token;
  double sum = 0.0;
};

LogProbResult log_prob(const PolicyModel& model, std::span<const int> prompt,
                       std::span<const int> response);

struct SampleResult {
  std::vector<int> tokens;
  // Log-probabilities of the drawn tokens at temperature 1.
  std::vector<double> log_probs;
};

// Temperature 0 is greedy with ties broken toward the lowest id. Generation
// stops after emitting eos_id, after max_new tokens, or at max_seq_len.
SampleResult sample(const PolicyModel& model, std::span<const int> prompt,
                    int max_new, double temperature, int eos_id, Rng& rng);

std::vector<int> concat_tokens(std::span<const int> a, std::span<const int> b);

}  // namespace persa
