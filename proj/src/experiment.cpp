#include "persa/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "persa/checkpoint.hpp"
#include "persa/errors.hpp"
#include "persa/hash.hpp"

namespace persa::exp {

using nlohmann::json;
using task::LabeledExample;
using task::LabeledPreference;
using Sequence = std::vector<int>;

namespace {

// Seed streams; data streams mix the synthetic seed, model streams the master.
enum : std::uint64_t {
  kDemoStream = 1001,
  kStdSplitStream,
  kProblemSplitStream,
  kPreferenceStream,
  kPretrainStream,
  kAuditStream,
  kStyleStream,
  kStyleNoiseStream,
  kModelStream = 11,
  kPretrainTrainStream,
  kSftStream,
  kRmStream,
  kPpoStream,
};

void check_keys(const json& j, const json& allowed, const std::string& section,
                std::initializer_list<const char*> excluded = {}) {
  if (!j.is_object()) throw ConfigError("config: section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = allowed.contains(key);
    for (const char* ex : excluded) ok = ok && key != ex;
    if (!ok) throw ConfigError("config: unknown key '" + section + (section.empty() ? "" : ".") + key + "'");
  }
}

json without(json j, std::initializer_list<const char*> keys) {
  for (const char* k : keys) j.erase(k);
  return j;
}

template <typename T, typename Parse>
T parse_section(const json& root, const char* name, const json& allowed, std::initializer_list<const char*> excluded,
                Parse parse, T fallback) {
  if (!root.contains(name)) return fallback;
  check_keys(root[name], allowed, name, excluded);
  try {
    return parse(root[name]);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: section '") + name + "': " + e.what());
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void say(const Log& log, const std::string& msg) {
  if (log) log(msg);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

// ---- settings -------------------------------------------------------------

void LoraSettings::validate(const ModelConfig& model) const {
  if (mode != "top" && mode != "all" && mode != "full") {
    throw ConfigError("lora.mode must be one of top, all, full (got '" + mode + "')");
  }
  if (rank < 1) throw ConfigError("lora.rank must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("lora.alpha must be positive");
  if (!(full_lr_scale > 0.0)) throw ConfigError("lora.full_lr_scale must be positive");
  if (mode == "top" && (top_layers < 1 || top_layers > model.n_layers)) {
    throw ConfigError("lora.top_layers = " + std::to_string(top_layers) + " but the model has " +
                      std::to_string(model.n_layers) + " blocks; use top_layers <= " +
                      std::to_string(model.n_layers));
  }
  for (const auto& t : targets) target_kind_from_string(t);
}

LayerSelection LoraSettings::selection(const ModelConfig& model) const {
  validate(model);
  std::set<TargetKind> kinds;
  for (const auto& t : targets) kinds.insert(target_kind_from_string(t));
  if (mode == "all") return LayerSelection::all_layers(model.n_layers, kinds);
  return LayerSelection::top(top_layers, model.n_layers, kinds);
}

json LoraSettings::to_json() const {
  return {{"mode", mode}, {"top_layers", top_layers}, {"rank", rank}, {"alpha", alpha}, {"targets", targets},
          {"full_lr_scale", full_lr_scale}};
}

LoraSettings LoraSettings::from_json(const json& j) {
  LoraSettings s;
  s.mode = j.value("mode", s.mode);
  s.top_layers = j.value("top_layers", s.top_layers);
  s.rank = j.value("rank", s.rank);
  s.alpha = j.value("alpha", s.alpha);
  s.targets = j.value("targets", s.targets);
  s.full_lr_scale = j.value("full_lr_scale", s.full_lr_scale);
  return s;
}

void DataSettings::validate() const {
  if (demonstrations < 10) throw ConfigError("data.demonstrations must be >= 10");
  if (preferences < 10) throw ConfigError("data.preferences must be >= 10");
  if (pretrain_examples < 20) throw ConfigError("data.pretrain_examples must be >= 20");
  if (!(pretrain_professor_fraction >= 0.0 && pretrain_professor_fraction <= 1.0)) {
    throw ConfigError("data.pretrain_professor_fraction must be in [0, 1]");
  }
  if (style_examples < 16) throw ConfigError("data.style_examples must be >= 16");
}

json DataSettings::to_json() const {
  return {{"demonstrations", demonstrations},
          {"preferences", preferences},
          {"pretrain_examples", pretrain_examples},
          {"pretrain_professor_fraction", pretrain_professor_fraction},
          {"style_examples", style_examples}};
}

DataSettings DataSettings::from_json(const json& j) {
  DataSettings s;
  s.demonstrations = j.value("demonstrations", s.demonstrations);
  s.preferences = j.value("preferences", s.preferences);
  s.pretrain_examples = j.value("pretrain_examples", s.pretrain_examples);
  s.pretrain_professor_fraction = j.value("pretrain_professor_fraction", s.pretrain_professor_fraction);
  s.style_examples = j.value("style_examples", s.style_examples);
  return s;
}

void EvalSettings::validate() const {
  if (max_new_tokens < 1) throw ConfigError("eval.max_new_tokens must be >= 1");
  if (calibration_bins < 1) throw ConfigError("eval.calibration_bins must be >= 1");
  if (!(near_duplicate > 0.0 && near_duplicate <= 1.0)) throw ConfigError("eval.near_duplicate must be in (0, 1]");
}

json EvalSettings::to_json() const {
  return {{"max_new_tokens", max_new_tokens}, {"calibration_bins", calibration_bins}, {"near_duplicate", near_duplicate}};
}

EvalSettings EvalSettings::from_json(const json& j) {
  EvalSettings s;
  s.max_new_tokens = j.value("max_new_tokens", s.max_new_tokens);
  s.calibration_bins = j.value("calibration_bins", s.calibration_bins);
  s.near_duplicate = j.value("near_duplicate", s.near_duplicate);
  return s;
}

RunConfig::RunConfig() {
  pretrain.epochs = 3;
  pretrain.lr = 1e-3;
  pretrain.full_param = true;
  sft.epochs = 20;
  sft.patience = 3;
  rm.epochs = 6;
  rm.lr = 3e-4;
  rm.batch_size = 8;
  ppo.lr = 1e-3;
  ppo.kl_coeff = 0.05;
  apply_seed(0);
}

void RunConfig::apply_seed(std::uint64_t master) {
  seed = master;
  synthetic.seed = master;
  model.seed = derive_seed(master, kModelStream);
  pretrain.seed = derive_seed(master, kPretrainTrainStream);
  sft.seed = derive_seed(master, kSftStream);
  rm.seed = derive_seed(master, kRmStream);
  ppo.seed = derive_seed(master, kPpoStream);
  pretrain.full_param = true;
  sft.full_param = lora.mode == "full";
  const task::Vocabulary vocab = synthetic.vocabulary();
  model.vocab_size = vocab.size();
  ppo.eos_id = vocab.id(task::kEos);
}

void RunConfig::validate() const {
  synthetic.validate();
  data.validate();
  model.validate();
  pretrain.validate();
  lora.validate(model);
  sft.validate();
  rm.validate();
  ppo.validate();
  eval.validate();
  if (ppo_iterations < 0) throw ConfigError("ppo_iterations must be >= 0");
  if (out.empty()) throw ConfigError("out must be a non-empty path");
  if (ablation_seeds.empty()) throw ConfigError("ablation_seeds must not be empty");
  const int prompt_max = synthetic.code_max + 3;
  if (prompt_max + eval.max_new_tokens > model.max_seq_len || prompt_max + ppo.max_new_tokens > model.max_seq_len) {
    throw ConfigError("model.max_seq_len too small for prompts of up to " + std::to_string(prompt_max) +
                      " tokens plus generation");
  }
}

json RunConfig::to_json() const {
  return {{"seed", seed},
          {"out", out},
          {"synthetic", without(synthetic.to_json(), {"seed"})},
          {"data", data.to_json()},
          {"model", without(model.to_json(), {"seed", "vocab_size"})},
          {"pretrain", without(pretrain.to_json(), {"seed", "full_param"})},
          {"lora", lora.to_json()},
          {"sft", without(sft.to_json(), {"seed", "full_param"})},
          {"rm", without(rm.to_json(), {"seed"})},
          {"ppo", without(ppo.to_json(), {"seed", "eos_id"})},
          {"ppo_iterations", ppo_iterations},
          {"skip_sft", skip_sft},
          {"skip_ppo", skip_ppo},
          {"eval", eval.to_json()},
          {"ablation_seeds", ablation_seeds}};
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig def;
  check_keys(j, def.to_json(), "");
  RunConfig c = def;
  try {
    c.seed = j.value("seed", c.seed);
    c.out = j.value("out", c.out);
    c.ppo_iterations = j.value("ppo_iterations", c.ppo_iterations);
    c.skip_sft = j.value("skip_sft", c.skip_sft);
    c.skip_ppo = j.value("skip_ppo", c.skip_ppo);
    c.ablation_seeds = j.value("ablation_seeds", c.ablation_seeds);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  const auto merged = [](const json& base, const json& over) {
    json m = base;
    m.update(over);
    return m;
  };
  c.synthetic = parse_section(j, "synthetic", def.synthetic.to_json(), {"seed"},
                              [&](const json& s) { return task::SyntheticSpec::from_json(merged(def.synthetic.to_json(), s)); },
                              c.synthetic);
  c.data = parse_section(j, "data", def.data.to_json(), {}, DataSettings::from_json, c.data);
  c.model = parse_section(j, "model", def.model.to_json(), {"seed", "vocab_size"},
                          [&](const json& s) { return ModelConfig::from_json(merged(def.model.to_json(), s)); }, c.model);
  c.pretrain = parse_section(j, "pretrain", def.pretrain.to_json(), {"seed", "full_param"},
                             [&](const json& s) { return SftSchedule::from_json(merged(def.pretrain.to_json(), s)); },
                             c.pretrain);
  c.lora = parse_section(j, "lora", def.lora.to_json(), {}, LoraSettings::from_json, c.lora);
  c.sft = parse_section(j, "sft", def.sft.to_json(), {"seed", "full_param"},
                        [&](const json& s) { return SftSchedule::from_json(merged(def.sft.to_json(), s)); }, c.sft);
  c.rm = parse_section(j, "rm", def.rm.to_json(), {"seed"},
                       [&](const json& s) { return RmSchedule::from_json(merged(def.rm.to_json(), s)); }, c.rm);
  c.ppo = parse_section(j, "ppo", def.ppo.to_json(), {"seed", "eos_id"},
                        [&](const json& s) { return PPOConfig::from_json(merged(def.ppo.to_json(), s)); }, c.ppo);
  c.eval = parse_section(j, "eval", def.eval.to_json(), {}, EvalSettings::from_json, c.eval);
  c.synthetic.validate();
  c.apply_seed(c.seed);
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  if (j.is_object() && j.contains("manifest_version")) j = j.at("config");
  return from_json(j);
}

json RunConfig::seeds() const {
  return {{"master", seed},   {"synthetic", synthetic.seed}, {"model", model.seed}, {"pretrain", pretrain.seed},
          {"sft", sft.seed},  {"rm", rm.seed},               {"ppo", ppo.seed}};
}

// ---- data -----------------------------------------------------------------

std::array<std::size_t, 3> split_sizes(std::size_t n) {
  const std::size_t train = n * 7 / 10;
  const std::size_t val = n / 10;
  return {train, val, n - train - val};
}

namespace {

json example_record(const task::Vocabulary& v, const LabeledExample& e, std::size_t id) {
  return {{"id", id},
          {"problem_id", e.problem_id},
          {"buggy", e.buggy},
          {"bug_type", e.bug_type},
          {"prompt", v.decode(e.prompt)},
          {"reference", v.decode(e.reference)}};
}

LabeledExample example_from(const task::Vocabulary& v, const json& j) {
  LabeledExample e;
  e.problem_id = j.at("problem_id").get<int>();
  e.buggy = j.at("buggy").get<bool>();
  e.bug_type = j.at("bug_type").get<int>();
  e.prompt = v.encode(j.at("prompt").get<std::string>());
  e.reference = v.encode(j.at("reference").get<std::string>());
  return e;
}

const char* loser_name(task::LoserKind k) {
  switch (k) {
    case task::LoserKind::GenericCorrect:
      return "generic_correct";
    case task::LoserKind::ProfessorWrong:
      return "professor_wrong";
    case task::LoserKind::GenericWrong:
      return "generic_wrong";
  }
  return "unknown";
}

task::LoserKind loser_from(const std::string& s) {
  if (s == "generic_correct") return task::LoserKind::GenericCorrect;
  if (s == "professor_wrong") return task::LoserKind::ProfessorWrong;
  if (s == "generic_wrong") return task::LoserKind::GenericWrong;
  throw ConfigError("unknown loser_kind '" + s + "'");
}

void write_jsonl(const fs::path& path, const std::vector<json>& records) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : records) out << r.dump() << '\n';
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing dataset file " + path.string() + " (run synth first)");
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::vector<json> example_records(const task::Vocabulary& v, const std::vector<LabeledExample>& xs) {
  std::vector<json> out;
  for (std::size_t i = 0; i < xs.size(); ++i) out.push_back(example_record(v, xs[i], i));
  return out;
}

std::vector<LabeledExample> examples_from(const task::Vocabulary& v, const fs::path& path) {
  std::vector<LabeledExample> out;
  for (const auto& j : read_jsonl(path)) out.push_back(example_from(v, j));
  return out;
}

audit::AuditItem audit_item(const task::Vocabulary& v, const LabeledExample& e) {
  // Prompt: p<k> code.. =>. The problem is the id token, the solution the rest.
  audit::AuditItem item;
  item.problem = {e.prompt.front()};
  item.solution.assign(e.prompt.begin() + 1, e.prompt.end());
  item.feedback = task::strip_eos(v, e.reference);
  return item;
}

audit::AuditThresholds audit_thresholds(const RunConfig& cfg) {
  audit::AuditThresholds t;
  t.near_duplicate = cfg.eval.near_duplicate;
  t.seed = derive_seed(cfg.synthetic.seed, kAuditStream);
  return t;
}

}  // namespace

SynthSummary synthesize(const RunConfig& cfg, const fs::path& data_dir) {
  const auto& spec = cfg.synthetic;
  const std::uint64_t s = spec.seed;
  const task::Vocabulary vocab = spec.vocabulary();
  SynthSummary summary;

  auto generated = task::gen_demonstrations(spec, cfg.data.demonstrations, derive_seed(s, kDemoStream));
  summary.generated = generated.size();
  std::vector<audit::AuditItem> items;
  for (const auto& e : generated) items.push_back(audit_item(vocab, e));
  const audit::DedupeResult d = audit::dedupe(items, audit_thresholds(cfg));
  summary.exact_removed = d.exact_removed;
  summary.near_removed = d.near_removed;
  std::vector<LabeledExample> kept;
  for (std::size_t i : d.kept) kept.push_back(generated[i]);

  // Standard split: shuffled instances.
  std::vector<std::size_t> order(kept.size());
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed(s, kStdSplitStream));
  split_rng.shuffle(std::span(order));
  const auto sizes = split_sizes(kept.size());
  summary.std_sizes = sizes;
  std::array<std::vector<LabeledExample>, 3> std_split;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const int part = i < sizes[0] ? 0 : (i < sizes[0] + sizes[1] ? 1 : 2);
    std_split[part].push_back(kept[order[i]]);
  }

  // New-Problems split: whole problem ids go to one part.
  std::vector<int> problems;
  for (const auto& e : kept) problems.push_back(e.problem_id);
  std::sort(problems.begin(), problems.end());
  problems.erase(std::unique(problems.begin(), problems.end()), problems.end());
  Rng prob_rng(derive_seed(s, kProblemSplitStream));
  prob_rng.shuffle(std::span(problems));
  const auto psizes = split_sizes(problems.size());
  std::map<int, int> part_of;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    part_of[problems[i]] = i < psizes[0] ? 0 : (i < psizes[0] + psizes[1] ? 1 : 2);
  }
  std::array<std::vector<LabeledExample>, 3> np_split;
  for (const auto& e : kept) np_split[part_of.at(e.problem_id)].push_back(e);
  for (int p = 0; p < 3; ++p) summary.new_problem_sizes[p] = np_split[p].size();

  // Held-out prompts never appear in preference or pretraining data.
  std::set<Sequence> held_out;
  for (int p = 1; p < 3; ++p) {
    for (const auto& e : std_split[p]) held_out.insert(e.prompt);
  }

  std::vector<LabeledPreference> prefs;
  for (auto& p : task::gen_preferences(spec, cfg.data.preferences, derive_seed(s, kPreferenceStream))) {
    if (!held_out.count(p.example.prompt)) prefs.push_back(std::move(p));
  }
  const std::size_t pref_train = prefs.size() * 7 / 10;
  std::vector<json> pref_records[2];
  for (std::size_t i = 0; i < prefs.size(); ++i) {
    const auto& p = prefs[i];
    json r = example_record(vocab, p.example, i);
    r["chosen"] = vocab.decode(p.chosen);
    r["rejected"] = vocab.decode(p.rejected);
    r["loser_kind"] = loser_name(p.loser_kind);
    pref_records[i < pref_train ? 0 : 1].push_back(std::move(r));
  }

  std::vector<LabeledExample> pretrain;
  for (auto& e : task::gen_pretraining_corpus(spec, cfg.data.pretrain_examples, cfg.data.pretrain_professor_fraction,
                                              derive_seed(s, kPretrainStream))) {
    if (!held_out.count(e.prompt)) pretrain.push_back(std::move(e));
  }

  // Style classifier data: professor (label 1) and generic (label 0)
  // feedback, each with some wrong judgments so style is the only signal.
  std::vector<json> style_records;
  Rng noise(derive_seed(s, kStyleNoiseStream));
  const auto style_src = task::gen_demonstrations(spec, cfg.data.style_examples, derive_seed(s, kStyleStream));
  for (std::size_t i = 0; i < style_src.size(); ++i) {
    const auto& e = style_src[i];
    const int label = i % 2 == 0 ? 1 : 0;
    const bool flip = noise.bernoulli(0.3);
    const Sequence fb = label ? task::professor_feedback(vocab, e.buggy, e.bug_type, flip)
                              : task::generic_feedback(vocab, e.buggy, e.bug_type, noise, flip);
    style_records.push_back({{"feedback", vocab.decode(task::strip_eos(vocab, fb))}, {"label", label}});
  }

  fs::create_directories(data_dir);
  const auto scorer = metrics::PolitenessScorer::for_vocabulary(vocab);
  json vj = {{"tokens", vocab.tokens()},
             {"fingerprint", vocab.fingerprint()},
             {"eos", task::kEos},
             {"separator", task::kSep},
             {"politeness", scorer.to_json(vocab)},
             {"synthetic", spec.to_json()}};
  write_text(data_dir / "vocab.json", vj.dump(2) + "\n");
  const char* names[3] = {"train", "val", "test"};
  for (int p = 0; p < 3; ++p) {
    write_jsonl(data_dir / "std" / (std::string(names[p]) + ".jsonl"), example_records(vocab, std_split[p]));
    write_jsonl(data_dir / "new_problems" / (std::string(names[p]) + ".jsonl"), example_records(vocab, np_split[p]));
  }
  write_jsonl(data_dir / "preferences" / "train.jsonl", pref_records[0]);
  write_jsonl(data_dir / "preferences" / "val.jsonl", pref_records[1]);
  write_jsonl(data_dir / "pretrain.jsonl", example_records(vocab, pretrain));
  write_jsonl(data_dir / "style" / "labeled.jsonl", style_records);
  return summary;
}

Dataset load_dataset(const RunConfig& cfg, const fs::path& data_dir) {
  std::ifstream vin(data_dir / "vocab.json");
  if (!vin) throw std::runtime_error("missing " + (data_dir / "vocab.json").string() + " (run synth first)");
  const json vj = json::parse(vin);
  Dataset d;
  d.vocab = task::Vocabulary::from_json(vj);
  if (d.vocab.fingerprint() != cfg.synthetic.vocabulary().fingerprint()) {
    throw ConfigError("dataset vocabulary in " + data_dir.string() + " does not match the configuration");
  }
  const auto& v = d.vocab;
  d.train = examples_from(v, data_dir / "std" / "train.jsonl");
  d.val = examples_from(v, data_dir / "std" / "val.jsonl");
  d.test = examples_from(v, data_dir / "std" / "test.jsonl");
  d.np_train = examples_from(v, data_dir / "new_problems" / "train.jsonl");
  d.np_val = examples_from(v, data_dir / "new_problems" / "val.jsonl");
  d.np_test = examples_from(v, data_dir / "new_problems" / "test.jsonl");
  for (const char* part : {"train", "val"}) {
    auto& dst = std::string(part) == "train" ? d.pref_train : d.pref_val;
    for (const auto& j : read_jsonl(data_dir / "preferences" / (std::string(part) + ".jsonl"))) {
      LabeledPreference p;
      p.example = example_from(v, j);
      p.chosen = v.encode(j.at("chosen").get<std::string>());
      p.rejected = v.encode(j.at("rejected").get<std::string>());
      p.loser_kind = loser_from(j.at("loser_kind").get<std::string>());
      dst.push_back(std::move(p));
    }
  }
  d.pretrain = examples_from(v, data_dir / "pretrain.jsonl");
  for (const auto& j : read_jsonl(data_dir / "style" / "labeled.jsonl")) {
    d.style_sequences.push_back(v.encode(j.at("feedback").get<std::string>()));
    d.style_labels.push_back(j.at("label").get<int>());
  }
  if (d.train.empty() || d.val.empty() || d.test.empty()) throw ConfigError("dataset has an empty split");
  return d;
}

metrics::StyleClassifier train_style_classifier(const Dataset& data, const EvalSettings& settings,
                                                metrics::ClassifierReport* held_out) {
  const std::size_t n = data.style_sequences.size();
  const std::size_t fit_end = n / 2, cal_end = n * 3 / 4;
  const std::span<const Sequence> seqs(data.style_sequences);
  const std::span<const int> labels(data.style_labels);
  metrics::StyleClassifier c(data.vocab.size());
  c.fit(seqs.subspan(0, fit_end), labels.subspan(0, fit_end));
  c.calibrate(seqs.subspan(fit_end, cal_end - fit_end), labels.subspan(fit_end, cal_end - fit_end),
              settings.calibration_bins);
  if (held_out) *held_out = metrics::evaluate_classifier(c, seqs.subspan(cal_end), labels.subspan(cal_end));
  return c;
}

// ---- evaluation -----------------------------------------------------------

Evaluation evaluate_policy(const PolicyModel& policy, const EvalContext& ctx,
                           const std::vector<double>* baseline_rewards) {
  if (!ctx.vocab || !ctx.classifier || !ctx.politeness) throw ContractError("evaluate_policy: incomplete context");
  if (ctx.test.empty()) throw ContractError("evaluate_policy: no test examples");
  const auto& v = *ctx.vocab;
  const int eos = v.id(task::kEos);
  Evaluation ev;
  std::vector<Sequence> stripped, refs;
  std::vector<bool> buggy;
  std::size_t style = 0;
  Rng rng(0);
  for (const auto& e : ctx.test) {
    SampleResult s = sample(policy, e.prompt, ctx.max_new_tokens, 0.0, eos, rng);
    style += task::oracle_style(v, s.tokens);
    stripped.push_back(task::strip_eos(v, s.tokens));
    refs.push_back(task::strip_eos(v, e.reference));
    buggy.push_back(e.buggy);
    if (ctx.rm) ev.rewards.push_back(ctx.rm->reward(e.prompt, s.tokens));
    ev.responses.push_back(std::move(s.tokens));
  }
  auto& r = ev.report;
  r.responses = stripped.size();
  r.empty_responses = static_cast<std::size_t>(std::count_if(stripped.begin(), stripped.end(), [](const Sequence& x) { return x.empty(); }));
  r.style_rate = static_cast<double>(style) / static_cast<double>(stripped.size());
  r.sac = metrics::sac(stripped, *ctx.classifier);
  r.apc = metrics::apc(stripped, refs, *ctx.politeness);
  r.bleu4 = metrics::bleu4(stripped, refs);
  const auto ca = metrics::ca(v, stripped, buggy);
  r.ca = ca.accuracy;
  r.ca_extraction_failures = ca.extraction_failures;
  if (baseline_rewards) {
    if (!ctx.rm) throw ContractError("evaluate_policy: PWR needs a reward model");
    r.pwr = metrics::pwr(ev.rewards, *baseline_rewards);
  }
  return ev;
}

// ---- shared stages --------------------------------------------------------

namespace {

std::vector<Demonstration> demonstrations(std::span<const LabeledExample> xs) {
  std::vector<Demonstration> out;
  out.reserve(xs.size());
  for (const auto& e : xs) out.push_back({e.prompt, e.reference});
  return out;
}

std::vector<PreferencePair> preference_pairs(std::span<const LabeledPreference> xs) {
  std::vector<PreferencePair> out;
  out.reserve(xs.size());
  for (const auto& p : xs) out.push_back({p.example.prompt, p.chosen, p.rejected});
  return out;
}

void stamp(Checkpoint& ckpt, const task::Vocabulary& vocab, const std::string& kind) {
  ckpt.meta["vocab_fingerprint"] = vocab.fingerprint();
  if (!ckpt.meta.contains("kind")) ckpt.meta["kind"] = kind;
}

void save_policy(const PolicyModel& policy, const ValueHead* value_head, const task::Vocabulary& vocab,
                 const fs::path& path) {
  Checkpoint ckpt = to_checkpoint(policy);
  stamp(ckpt, vocab, "policy");
  if (value_head) {
    ckpt.add("value.head", "head", value_head->weight());
    ckpt.add("value.bias", "head", value_head->bias());
  }
  fs::create_directories(path.parent_path());
  ckpt.save(path.string());
}

void save_rm(const RewardModel& rm, const task::Vocabulary& vocab, const fs::path& path) {
  Checkpoint ckpt = to_checkpoint(rm);
  stamp(ckpt, vocab, "reward_model");
  fs::create_directories(path.parent_path());
  ckpt.save(path.string());
}

void check_vocab(const Checkpoint& ckpt, const task::Vocabulary& vocab, const std::string& what) {
  if (ckpt.meta.contains("vocab_fingerprint") && ckpt.meta["vocab_fingerprint"] != vocab.fingerprint()) {
    throw ConfigError(what + " was trained on a different vocabulary than the dataset");
  }
  const auto& model = ckpt.config.contains("model") ? ckpt.config["model"] : ckpt.config;
  if (model.contains("vocab_size") && model["vocab_size"] != vocab.size()) {
    throw ConfigError(what + " has vocab_size " + model["vocab_size"].dump() + " but the dataset has " +
                      std::to_string(vocab.size()));
  }
}

PolicyModel pretrain_base(const RunConfig& cfg, const Dataset& data, SftResult* result) {
  PolicyModel base(cfg.model);
  const auto demos = demonstrations(data.pretrain);
  const std::size_t cut = demos.size() * 19 / 20;
  SftSchedule sched = cfg.pretrain;
  sched.full_param = true;
  const SftResult r = train_sft(base, std::span(demos).subspan(0, cut), std::span(demos).subspan(cut), sched);
  if (result) *result = r;
  base.freeze_all();
  return base;
}

RewardModel train_reward_model(const RunConfig& cfg, const Dataset& data, const PolicyModel& base, RmResult* result) {
  RewardModel rm(base);
  const auto train = preference_pairs(data.pref_train);
  const auto val = preference_pairs(data.pref_val);
  const RmResult r = train_rm(rm, train, val, cfg.rm);
  if (result) *result = r;
  return rm;
}

PolicyModel adapt(const PolicyModel& base, const RunConfig& cfg, const LoraSettings& lora) {
  PolicyModel policy = base;
  if (lora.mode == "full") {
    policy.unfreeze_all();
  } else {
    policy.attach_lora(lora.selection(cfg.model), lora.rank, lora.alpha);
  }
  return policy;
}

SftResult run_sft(PolicyModel& policy, const RunConfig& cfg, const LoraSettings& lora, const Dataset& data) {
  SftSchedule sched = cfg.sft;
  sched.full_param = lora.mode == "full";
  if (sched.full_param) sched.lr *= lora.full_lr_scale;
  const auto train = demonstrations(data.train);
  const auto val = demonstrations(data.val);
  return train_sft(policy, train, val, sched);
}

PpoResult run_ppo(PolicyModel& policy, ValueHead& value_head, const PolicyModel& ref, const RewardModel& rm,
                  const RunConfig& cfg, const LoraSettings& lora, const Dataset& data, const Log& log) {
  std::vector<Sequence> prompts;
  for (const auto& e : data.train) prompts.push_back(e.prompt);
  PPOConfig ppo = cfg.ppo;
  if (lora.mode == "full") ppo.lr *= lora.full_lr_scale;
  return ppo_update(policy, value_head, ref, rm, prompts, ppo, cfg.ppo_iterations, [&](const PpoIteration& it) {
    if (log && (it.iter + 1) % 10 == 0) {
      log("  ppo iter " + std::to_string(it.iter + 1) + " reward " + fmt("%.3f", it.mean_reward) + " kl " +
          fmt("%.3f", it.mean_kl));
    }
  });
}

void write_rm_curve(const fs::path& path, const RmResult& r) {
  std::ostringstream out;
  out << "step,val_accuracy\n";
  for (const auto& [step, acc] : r.validation) out << step << ',' << acc << '\n';
  write_text(path, out.str());
}

template <typename F>
void stage(const std::string& name, json& timings, const Log& log, F&& body) {
  say(log, "[" + name + "]");
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
  timings.push_back({{"stage", name}, {"seconds", seconds_since(t0)}});
}

void ensure_data(const RunConfig& cfg, const fs::path& data_dir, const Log& log) {
  if (fs::exists(data_dir / "vocab.json")) return;
  say(log, "synthesizing data into " + data_dir.string());
  synthesize(cfg, data_dir);
}

json hash_tree(const fs::path& root, const std::vector<std::string>& subdirs) {
  json out = json::object();
  for (const auto& sub : subdirs) {
    const fs::path dir = root / sub;
    if (!fs::exists(dir)) continue;
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) out[fs::relative(f, root).generic_string()] = sha256_file(f.string());
  }
  return out;
}

std::string stage_table(const std::vector<std::pair<std::string, metrics::MetricsReport>>& rows) {
  std::string out = "| Stage | SAC | APC | BLEU-4 | CA | PWR |\n|---|---|---|---|---|---|\n";
  for (const auto& [name, r] : rows) {
    out += "| " + name + " | " + metrics::format_percent(r.sac) + " | " + metrics::format_percent(r.apc) + " | " +
           metrics::format_percent(r.bleu4) + " | " + metrics::format_percent(r.ca) + " | " +
           (r.pwr ? metrics::format_percent(*r.pwr) : std::string("--")) + " |\n";
  }
  return out;
}

}  // namespace

// ---- pipeline -------------------------------------------------------------

PipelineResult run_pipeline(const RunConfig& cfg, const Log& log) {
  cfg.validate();
  const fs::path root(cfg.out);
  const fs::path data_dir = root / "data", ckpt_dir = root / "checkpoints", rep_dir = root / "reports";
  fs::create_directories(ckpt_dir);
  fs::create_directories(rep_dir);
  json timings = json::array();
  PipelineResult result;
  Dataset data;

  stage("synth", timings, log, [&] {
    ensure_data(cfg, data_dir, log);
    data = load_dataset(cfg, data_dir);
  });

  std::optional<PolicyModel> base;
  stage("pretrain", timings, log, [&] {
    SftResult r;
    base = pretrain_base(cfg, data, &r);
    write_loss_curve(rep_dir / "pretrain_loss.csv", r);
    save_policy(*base, nullptr, data.vocab, ckpt_dir / "base.ckpt");
  });

  std::optional<PolicyModel> policy;
  stage("attach_lora", timings, log, [&] {
    policy = adapt(*base, cfg, cfg.lora);
    say(log, "  trainable " + std::to_string(policy->trainable_count()) + " / " +
                 std::to_string(policy->total_count()));
  });

  std::optional<PolicyModel> after_sft;
  json sft_info = nullptr;
  if (!cfg.skip_sft) {
    stage("sft", timings, log, [&] {
      const SftResult r = run_sft(*policy, cfg, cfg.lora, data);
      write_loss_curve(rep_dir / "sft_loss.csv", r);
      save_policy(*policy, nullptr, data.vocab, ckpt_dir / "sft.ckpt");
      after_sft = *policy;
      sft_info = {{"best_step", r.best_step}, {"best_validation", r.best_validation}, {"stopped_early", r.stopped_early}};
    });
  }

  std::optional<PolicyModel> ref;
  stage("set_reference", timings, log, [&] { ref = clone_frozen(*policy); });

  std::optional<RewardModel> rm;
  json rm_info;
  stage("reward_model", timings, log, [&] {
    RmResult r;
    rm = train_reward_model(cfg, data, *base, &r);
    write_rm_curve(rep_dir / "rm_validation.csv", r);
    save_rm(*rm, data.vocab, ckpt_dir / "rm.ckpt");
    rm_info = {{"best_accuracy", r.best_accuracy}, {"best_step", r.best_step}};
    say(log, "  validation accuracy " + fmt("%.3f", r.best_accuracy));
  });

  ValueHead value_head(cfg.model.d_model);
  json ppo_info = nullptr;
  if (!cfg.skip_ppo) {
    stage("ppo", timings, log, [&] {
      result.ppo = run_ppo(*policy, value_head, *ref, *rm, cfg, cfg.lora, data, log);
      write_diagnostics(rep_dir / "ppo_diagnostics.csv", result.ppo);
      if (result.ppo.status != "ok") say(log, "  " + result.ppo.status);
      ppo_info = {{"status", result.ppo.status},
                  {"iterations", result.ppo.iterations.size()},
                  {"kl_stopped", result.ppo.kl_stopped}};
    });
  }
  save_policy(*policy, cfg.skip_ppo ? nullptr : &value_head, data.vocab, ckpt_dir / "policy.ckpt");

  stage("evaluate", timings, log, [&] {
    metrics::ClassifierReport reliability;
    const auto classifier = train_style_classifier(data, cfg.eval, &reliability);
    const auto politeness = metrics::PolitenessScorer::for_vocabulary(data.vocab);
    EvalContext ctx{&data.vocab, data.test, &classifier, &politeness, &*rm, cfg.eval.max_new_tokens};
    const Evaluation base_eval = evaluate_policy(*base, ctx);
    std::vector<std::pair<std::string, metrics::MetricsReport>> rows = {{"Base", base_eval.report}};
    json stages = {{"base", base_eval.report.to_json()}};
    if (after_sft) {
      const Evaluation e = evaluate_policy(*after_sft, ctx, &base_eval.rewards);
      rows.emplace_back("SFT", e.report);
      stages["sft"] = e.report.to_json();
    }
    const Evaluation final_eval = evaluate_policy(*policy, ctx, &base_eval.rewards);
    rows.emplace_back("Final", final_eval.report);
    stages["final"] = final_eval.report.to_json();

    std::vector<json> responses;
    for (std::size_t i = 0; i < data.test.size(); ++i) {
      responses.push_back({{"prompt", data.vocab.decode(data.test[i].prompt)},
                           {"response", data.vocab.decode(final_eval.responses[i])},
                           {"reference", data.vocab.decode(data.test[i].reference)},
                           {"reward", final_eval.rewards[i]}});
    }
    write_jsonl(rep_dir / "responses.jsonl", responses);
    write_text(rep_dir / "metrics.csv",
               metrics::MetricsReport::csv_header() + "\n" + final_eval.report.csv_row() + "\n");
    write_text(rep_dir / "metrics.md", stage_table(rows));
    result.report = {{"stages", stages},
                     {"reward_model", rm_info},
                     {"sft", sft_info},
                     {"ppo", ppo_info},
                     {"lora", cfg.lora.to_json()},
                     {"trainable_parameters", policy->trainable_count()},
                     {"total_parameters", policy->total_count()},
                     {"style_classifier",
                      {{"accuracy", reliability.accuracy}, {"macro_f1", reliability.macro_f1}, {"ece", reliability.ece}}}};
    write_text(rep_dir / "report.json", result.report.dump(2) + "\n");
  });

  result.manifest = {{"manifest_version", 1},
                     {"config", cfg.to_json()},
                     {"seeds", cfg.seeds()},
                     {"stages", timings},
                     {"artifacts", hash_tree(root, {"data", "checkpoints", "reports"})}};
  write_text(root / "manifest.json", result.manifest.dump(2) + "\n");
  return result;
}

// ---- ablation -------------------------------------------------------------

const std::vector<std::string>& ablation_conditions() {
  static const std::vector<std::string> names = {"base",     "sft-only",  "ppo-only", "full-param",
                                                 "all-layer", "top-2",    "top-4"};
  return names;
}

std::string ablation_label(const std::string& condition) {
  static const std::map<std::string, std::string> labels = {
      {"base", "Base (no adapt.)"},
      {"sft-only", "SFT only"},
      {"ppo-only", "PPO only (no SFT)"},
      {"full-param", "SFT+PPO (full-param)"},
      {"all-layer", "SFT+PPO (all-layer LoRA)"},
      {"top-2", "SFT+PPO (top-2 LoRA)"},
      {"top-4", "SFT+PPO (top-4 LoRA)"},
  };
  const auto it = labels.find(condition);
  if (it == labels.end()) {
    std::string known;
    for (const auto& n : ablation_conditions()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown condition '" + condition + "' (expected one of " + known + ")");
  }
  return it->second;
}

namespace {

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

metrics::MetricsReport median_report(const std::vector<metrics::MetricsReport>& rs) {
  metrics::MetricsReport m;
  auto med = [&](auto field) {
    std::vector<double> xs;
    for (const auto& r : rs) xs.push_back(field(r));
    return median(xs);
  };
  m.sac = med([](const auto& r) { return r.sac; });
  m.apc = med([](const auto& r) { return r.apc; });
  m.bleu4 = med([](const auto& r) { return r.bleu4; });
  m.ca = med([](const auto& r) { return r.ca; });
  m.style_rate = med([](const auto& r) { return r.style_rate; });
  if (!rs.empty() && rs.front().pwr) m.pwr = med([](const auto& r) { return *r.pwr; });
  for (const auto& r : rs) {
    m.ca_extraction_failures += r.ca_extraction_failures;
    m.empty_responses += r.empty_responses;
    m.responses += r.responses;
  }
  return m;
}

struct ConditionSpec {
  LoraSettings lora;
  bool sft = true;
  bool ppo = true;
};

ConditionSpec condition_spec(const RunConfig& cfg, const std::string& name) {
  ConditionSpec c{cfg.lora};
  if (name == "sft-only") {
    c.ppo = false;
  } else if (name == "ppo-only") {
    c.sft = false;
  } else if (name == "full-param") {
    c.lora.mode = "full";
  } else if (name == "all-layer") {
    c.lora.mode = "all";
  } else if (name == "top-2" || name == "top-4") {
    c.lora.mode = "top";
    c.lora.top_layers = name == "top-2" ? 2 : 4;
    if (c.lora.top_layers > cfg.model.n_layers) {
      throw ConfigError("condition " + name + " needs " + std::to_string(c.lora.top_layers) +
                        " blocks but the model has " + std::to_string(cfg.model.n_layers) +
                        "; raise model.n_layers or cap top-L at " + std::to_string(cfg.model.n_layers));
    }
  } else {
    ablation_label(name);
  }
  return c;
}

}  // namespace

std::string AblationResult::markdown() const {
  std::string out = "| PERSA Ablation | SAC | APC | BLEU-4 | CA | PWR |\n|---|---|---|---|---|---|\n";
  for (const auto& row : rows) {
    const auto& r = row.median;
    out += "| " + row.label + " | " + metrics::format_percent(r.sac) + " | " + metrics::format_percent(r.apc) + " | " +
           metrics::format_percent(r.bleu4) + " | " + metrics::format_percent(r.ca) + " | " +
           (r.pwr ? metrics::format_percent(*r.pwr) : std::string("--")) + " |\n";
  }
  return out;
}

std::string AblationResult::csv() const {
  std::string out = "condition," + metrics::MetricsReport::csv_header() + "\n";
  for (const auto& row : rows) out += row.name + "," + row.median.csv_row() + "\n";
  return out;
}

json AblationResult::to_json() const {
  json j = {{"seeds", seeds}, {"rows", json::array()}};
  for (const auto& row : rows) {
    json per_seed = json::array();
    for (const auto& r : row.per_seed) per_seed.push_back(r.to_json());
    j["rows"].push_back({{"condition", row.name}, {"label", row.label}, {"median", row.median.to_json()}, {"per_seed", per_seed}});
  }
  return j;
}

AblationResult run_ablation(const RunConfig& cfg_in, const std::optional<std::string>& condition, const Log& log) {
  cfg_in.validate();
  std::vector<std::string> names = ablation_conditions();
  if (condition) {
    ablation_label(*condition);
    names = {*condition};
  }
  for (const auto& n : names) condition_spec(cfg_in, n);

  AblationResult result;
  result.seeds = cfg_in.ablation_seeds;
  for (const auto& n : names) result.rows.push_back({n, ablation_label(n), {}, {}});

  for (const std::uint64_t seed : cfg_in.ablation_seeds) {
    RunConfig cfg = cfg_in;
    cfg.apply_seed(seed);
    const fs::path root = fs::path(cfg_in.out) / ("seed_" + std::to_string(seed));
    json timings = json::array();
    Dataset data;
    std::optional<PolicyModel> base;
    std::optional<RewardModel> rm;
    stage("synth", timings, log, [&] {
      ensure_data(cfg, root / "data", log);
      data = load_dataset(cfg, root / "data");
    });
    stage("pretrain", timings, log, [&] {
      base = pretrain_base(cfg, data, nullptr);
      save_policy(*base, nullptr, data.vocab, root / "checkpoints" / "base.ckpt");
    });
    stage("reward_model", timings, log, [&] {
      RmResult r;
      rm = train_reward_model(cfg, data, *base, &r);
      save_rm(*rm, data.vocab, root / "checkpoints" / "rm.ckpt");
      say(log, "  validation accuracy " + fmt("%.3f", r.best_accuracy));
    });
    const auto classifier = train_style_classifier(data, cfg.eval);
    const auto politeness = metrics::PolitenessScorer::for_vocabulary(data.vocab);
    const EvalContext ctx{&data.vocab, data.test, &classifier, &politeness, &*rm, cfg.eval.max_new_tokens};
    const Evaluation base_eval = evaluate_policy(*base, ctx);

    for (auto& row : result.rows) {
      stage("seed " + std::to_string(seed) + " " + row.name, timings, log, [&] {
        if (row.name == "base") {
          row.per_seed.push_back(base_eval.report);
          return;
        }
        const ConditionSpec spec = condition_spec(cfg, row.name);
        PolicyModel policy = adapt(*base, cfg, spec.lora);
        if (spec.sft) run_sft(policy, cfg, spec.lora, data);
        if (spec.ppo) {
          const PolicyModel ref = clone_frozen(policy);
          ValueHead vh(cfg.model.d_model);
          const PpoResult pr = run_ppo(policy, vh, ref, *rm, cfg, spec.lora, data, {});
          if (pr.status != "ok") say(log, "  " + pr.status);
        }
        save_policy(policy, nullptr, data.vocab, root / "checkpoints" / (row.name + ".ckpt"));
        const Evaluation e = evaluate_policy(policy, ctx, &base_eval.rewards);
        say(log, "  SAC " + metrics::format_percent(e.report.sac) + " style " +
                     metrics::format_percent(e.report.style_rate) + " CA " + metrics::format_percent(e.report.ca) +
                     " PWR " + metrics::format_percent(*e.report.pwr));
        row.per_seed.push_back(e.report);
      });
    }
  }
  for (auto& row : result.rows) row.median = median_report(row.per_seed);

  const fs::path root(cfg_in.out);
  const std::string suffix = condition ? "_" + *condition : "";
  write_text(root / ("ablation" + suffix + ".md"), result.markdown());
  write_text(root / ("ablation" + suffix + ".csv"), result.csv());
  write_text(root / ("ablation" + suffix + ".json"), result.to_json().dump(2) + "\n");
  return result;
}

// ---- audit ----------------------------------------------------------------

std::vector<audit::AuditColumn> run_audit(const RunConfig& cfg, const Log& log) {
  cfg.validate();
  const fs::path root(cfg.out);
  ensure_data(cfg, root / "data", log);
  const Dataset data = load_dataset(cfg, root / "data");
  const auto thresholds = audit_thresholds(cfg);
  auto items = [&](const std::vector<LabeledExample>& xs) {
    std::vector<audit::AuditItem> out;
    for (const auto& e : xs) out.push_back(audit_item(data.vocab, e));
    return out;
  };
  std::vector<audit::AuditColumn> cols;
  audit::AuditBlock std_block = audit::audit_corpus(items(data.train), items(data.test), thresholds);
  std_block.split_key = "inst.";
  cols.push_back({"Std.", std_block});
  audit::AuditBlock np_block = audit::audit_corpus(items(data.np_train), items(data.np_test), thresholds);
  np_block.split_key = "prob. ID";
  cols.push_back({"New-Problems", np_block});
  write_text(root / "audit.md", audit::audit_table(cols));
  write_text(root / "audit.json", audit::audit_json(cols).dump(2) + "\n");
  return cols;
}

// ---- eval -----------------------------------------------------------------

Evaluation run_eval(const RunConfig& cfg, const EvalRequest& request, const Log& log) {
  cfg.validate();
  const fs::path root(cfg.out);
  ensure_data(cfg, root / "data", log);
  const Dataset data = load_dataset(cfg, root / "data");

  const Checkpoint ckpt = Checkpoint::load(request.checkpoint.string());
  check_vocab(ckpt, data.vocab, request.checkpoint.string());
  const PolicyModel policy = policy_from_checkpoint(ckpt);

  std::optional<RewardModel> rm;
  const fs::path rm_path = request.reward_model.value_or(root / "checkpoints" / "rm.ckpt");
  if (request.reward_model || fs::exists(rm_path)) {
    const Checkpoint rc = Checkpoint::load(rm_path.string());
    check_vocab(rc, data.vocab, rm_path.string());
    rm = reward_model_from_checkpoint(rc);
  }
  if (request.baseline && !rm) throw ConfigError("PWR against a baseline needs a reward model checkpoint");

  const auto classifier = train_style_classifier(data, cfg.eval);
  const auto politeness = metrics::PolitenessScorer::for_vocabulary(data.vocab);
  const EvalContext ctx{&data.vocab, data.test, &classifier, &politeness, rm ? &*rm : nullptr,
                        cfg.eval.max_new_tokens};
  if (!request.baseline) return evaluate_policy(policy, ctx);
  const Checkpoint bc = Checkpoint::load(request.baseline->string());
  check_vocab(bc, data.vocab, request.baseline->string());
  const Evaluation baseline = evaluate_policy(policy_from_checkpoint(bc), ctx);
  return evaluate_policy(policy, ctx, &baseline.rewards);
}

}  // namespace persa::exp

