#pragma once

// Experiment driver: dataset synthesis, the staged pipeline (pretrain base,
// attach adapters, SFT, freeze reference, reward model, PPO, evaluate), the
// seven-row ablation grid, checkpoint evaluation and split audits.
//
// Every run lives in one directory:
//   data/       vocab.json, std/*.jsonl, new_problems/*.jsonl,
//               preferences/*.jsonl, pretrain.jsonl, style/*.jsonl
//   checkpoints/ base.ckpt, sft.ckpt, rm.ckpt, policy.ckpt
//   reports/    loss curves, PPO diagnostics, metrics.{csv,md}, report.json
//   manifest.json

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "persa/audit.hpp"
#include "persa/metrics.hpp"
#include "persa/model.hpp"
#include "persa/ppo.hpp"
#include "persa/reward_model.hpp"
#include "persa/sft.hpp"
#include "persa/task.hpp"

namespace persa::exp {

namespace fs = std::filesystem;

struct LoraSettings {
  // "top": the top `top_layers` blocks, "all": every block, "full": no
  // adapters, every weight trainable.
  std::string mode = "top";
  int top_layers = 4;
  int rank = 2;
  double alpha = 4.0;
  // Target kinds by name (q, k, v, o, up, down, gate); empty means all.
  std::vector<std::string> targets;
  // Multiplies the SFT and PPO learning rates in "full" mode.
  double full_lr_scale = 0.1;

  // Throws ConfigError, e.g. when top_layers exceeds the model depth.
  void validate(const ModelConfig& model) const;
  LayerSelection selection(const ModelConfig& model) const;
  nlohmann::json to_json() const;
  static LoraSettings from_json(const nlohmann::json& j);
};

struct DataSettings {
  int demonstrations = 300;
  int preferences = 300;
  int pretrain_examples = 2000;
  double pretrain_professor_fraction = 0.1;
  // Labeled feedback for the style classifier: half fit, a quarter
  // calibration, a quarter held out for reliability numbers.
  int style_examples = 800;

  void validate() const;
  nlohmann::json to_json() const;
  static DataSettings from_json(const nlohmann::json& j);
};

struct EvalSettings {
  int max_new_tokens = 16;
  int calibration_bins = 10;
  double near_duplicate = 0.8;

  void validate() const;
  nlohmann::json to_json() const;
  static EvalSettings from_json(const nlohmann::json& j);
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "runs/default";
  task::SyntheticSpec synthetic;
  DataSettings data;
  ModelConfig model;
  SftSchedule pretrain;
  LoraSettings lora;
  SftSchedule sft;
  RmSchedule rm;
  PPOConfig ppo;
  int ppo_iterations = 30;
  bool skip_sft = false;
  bool skip_ppo = false;
  EvalSettings eval;
  std::vector<std::uint64_t> ablation_seeds = {0, 1, 2};

  RunConfig();

  // Sets the master seed and every component seed derived from it, plus the
  // vocabulary-dependent fields (model.vocab_size, ppo.eos_id).
  void apply_seed(std::uint64_t master);
  void validate() const;
  // Component seeds and derived fields are omitted; they follow from `seed`.
  nlohmann::json to_json() const;
  // Throws ConfigError on unknown keys or invalid values.
  static RunConfig from_json(const nlohmann::json& j);
  // Reads a config file, or the config snapshot inside a run manifest.
  static RunConfig load(const fs::path& path);
  nlohmann::json seeds() const;
};

struct Dataset {
  task::Vocabulary vocab{std::vector<std::string>{}};
  std::vector<task::LabeledExample> train, val, test;
  std::vector<task::LabeledExample> np_train, np_val, np_test;
  std::vector<task::LabeledPreference> pref_train, pref_val;
  std::vector<task::LabeledExample> pretrain;
  std::vector<std::vector<int>> style_sequences;
  std::vector<int> style_labels;
};

struct SynthSummary {
  std::size_t generated = 0;
  std::size_t exact_removed = 0;
  std::size_t near_removed = 0;
  std::array<std::size_t, 3> std_sizes{};
  std::array<std::size_t, 3> new_problem_sizes{};
};

// Sizes of a floor-floor-remainder 70/10/20 split of n items.
std::array<std::size_t, 3> split_sizes(std::size_t n);

SynthSummary synthesize(const RunConfig& cfg, const fs::path& data_dir);
// Throws ConfigError when the stored vocabulary differs from the config's.
Dataset load_dataset(const RunConfig& cfg, const fs::path& data_dir);

metrics::StyleClassifier train_style_classifier(const Dataset& data, const EvalSettings& settings,
                                                metrics::ClassifierReport* held_out = nullptr);

struct EvalContext {
  const task::Vocabulary* vocab = nullptr;
  std::span<const task::LabeledExample> test;
  const metrics::StyleClassifier* classifier = nullptr;
  const metrics::PolitenessScorer* politeness = nullptr;
  const RewardModel* rm = nullptr;  // PWR needs it
  int max_new_tokens = 16;
};

struct Evaluation {
  metrics::MetricsReport report;
  std::vector<std::vector<int>> responses;  // as generated, <eos> included
  std::vector<double> rewards;              // empty without a reward model
};

// Greedy decoding on every test prompt. PWR is filled when baseline rewards
// are given.
Evaluation evaluate_policy(const PolicyModel& policy, const EvalContext& ctx,
                           const std::vector<double>* baseline_rewards = nullptr);

using Log = std::function<void(const std::string&)>;

struct PipelineResult {
  nlohmann::json report;    // content of reports/report.json
  nlohmann::json manifest;  // content of manifest.json
  PpoResult ppo;
};

// Runs every stage into `cfg.out`. Throws StageError naming the failing
// stage; artifacts of earlier stages stay on disk.
PipelineResult run_pipeline(const RunConfig& cfg, const Log& log = {});

struct AblationRow {
  std::string name;   // CLI name, e.g. "top-4"
  std::string label;  // table label, e.g. "SFT+PPO (top-4 LoRA)"
  std::vector<metrics::MetricsReport> per_seed;
  metrics::MetricsReport median;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<std::uint64_t> seeds;
  std::string markdown() const;
  std::string csv() const;
  nlohmann::json to_json() const;
};

// CLI names of the seven conditions, in table order.
const std::vector<std::string>& ablation_conditions();
std::string ablation_label(const std::string& condition);

// Runs the grid (or one condition) over cfg.ablation_seeds. Writes
// ablation.{md,csv,json} under cfg.out.
AblationResult run_ablation(const RunConfig& cfg, const std::optional<std::string>& condition = {},
                            const Log& log = {});

// Synthesizes data if absent, then audits both split variants and writes
// audit.{md,json} under cfg.out.
std::vector<audit::AuditColumn> run_audit(const RunConfig& cfg, const Log& log = {});

struct EvalRequest {
  fs::path checkpoint;
  std::optional<fs::path> baseline;
  std::optional<fs::path> reward_model;
};

// Evaluates a policy checkpoint on the test split of cfg.out's dataset.
// Throws ConfigError on a vocabulary mismatch.
Evaluation run_eval(const RunConfig& cfg, const EvalRequest& request, const Log& log = {});

}  // namespace persa::exp
