#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <set>

#include "persa/checkpoint.hpp"
#include "persa/errors.hpp"
#include "persa/experiment.hpp"

using namespace persa;
using namespace persa::exp;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(testing::TempDir()) / ("persa_exp_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2); }

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + PERSA_CLI + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Synthesized once per test binary; generation takes a few seconds.
struct SharedData {
  RunConfig cfg;
  fs::path dir;
  SynthSummary summary;
  Dataset data;
};

const SharedData& shared() {
  static const SharedData s = [] {
    SharedData d;
    d.dir = scratch("shared");
    d.cfg.out = d.dir.string();
    d.summary = synthesize(d.cfg, d.dir / "data");
    d.data = load_dataset(d.cfg, d.dir / "data");
    return d;
  }();
  return s;
}

}  // namespace

TEST(RunConfig, JsonRoundTrip) {
  RunConfig cfg;
  cfg.apply_seed(5);
  cfg.lora.full_lr_scale = 0.25;
  cfg.lora.targets = {"q", "v"};
  cfg.ppo_iterations = 7;
  const RunConfig back = RunConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
  EXPECT_EQ(back.seeds(), cfg.seeds());
  EXPECT_EQ(back.lora.full_lr_scale, 0.25);
}

TEST(RunConfig, SeedDerivation) {
  RunConfig a, b;
  a.apply_seed(1);
  b.apply_seed(2);
  EXPECT_NE(a.seeds()["model"], b.seeds()["model"]);
  EXPECT_NE(a.seeds()["sft"], a.seeds()["ppo"]);
  RunConfig c;
  c.apply_seed(1);
  EXPECT_EQ(a.seeds(), c.seeds());
}

TEST(RunConfig, RejectsUnknownAndDerivedKeys) {
  const json base = RunConfig{}.to_json();
  auto rejects = [&](const json::json_pointer& ptr) {
    json j = base;
    j[ptr] = 1;
    EXPECT_THROW(RunConfig::from_json(j), ConfigError) << ptr.to_string();
  };
  rejects(json::json_pointer("/bogus"));
  rejects(json::json_pointer("/model/bogus"));
  rejects(json::json_pointer("/model/seed"));
  rejects(json::json_pointer("/model/vocab_size"));
  rejects(json::json_pointer("/ppo/eos_id"));
  rejects(json::json_pointer("/synthetic/seed"));
  rejects(json::json_pointer("/lora/bogus"));
}

TEST(RunConfig, RejectsInvalidValues) {
  json j = RunConfig{}.to_json();
  j["lora"]["top_layers"] = 5;  // deeper than the 4-block model
  EXPECT_THROW(RunConfig::from_json(j), ConfigError);
  j = RunConfig{}.to_json();
  j["lora"]["full_lr_scale"] = 0.0;
  EXPECT_THROW(RunConfig::from_json(j), ConfigError);
  j = RunConfig{}.to_json();
  j["model"]["max_seq_len"] = 8;
  EXPECT_THROW(RunConfig::from_json(j), ConfigError);
  j = RunConfig{}.to_json();
  j["lora"]["mode"] = "middle";
  EXPECT_THROW(RunConfig::from_json(j), ConfigError);
}

TEST(RunConfig, LoadsManifestSnapshot) {
  const fs::path dir = scratch("manifest");
  RunConfig cfg;
  cfg.apply_seed(3);
  write_json(dir / "manifest.json", {{"manifest_version", 1}, {"config", cfg.to_json()}});
  EXPECT_EQ(RunConfig::load(dir / "manifest.json").to_json(), cfg.to_json());
  EXPECT_THROW(RunConfig::load(dir / "missing.json"), ConfigError);
  std::ofstream(dir / "broken.json") << "{ not json";
  EXPECT_THROW(RunConfig::load(dir / "broken.json"), ConfigError);
}

TEST(Splits, FloorFloorRemainder) {
  EXPECT_EQ(split_sizes(100), (std::array<std::size_t, 3>{70, 10, 20}));
  EXPECT_EQ(split_sizes(9), (std::array<std::size_t, 3>{6, 0, 3}));
  EXPECT_EQ(split_sizes(287), (std::array<std::size_t, 3>{200, 28, 59}));
  for (std::size_t n = 0; n < 300; ++n) {
    const auto s = split_sizes(n);
    EXPECT_EQ(s[0] + s[1] + s[2], n);
  }
}

TEST(Synthesis, SplitsAreConsistent) {
  const auto& s = shared();
  EXPECT_EQ(s.summary.std_sizes[0], s.data.train.size());
  EXPECT_EQ(s.summary.std_sizes[1], s.data.val.size());
  EXPECT_EQ(s.summary.std_sizes[2], s.data.test.size());
  EXPECT_EQ(s.summary.std_sizes, split_sizes(s.data.train.size() + s.data.val.size() + s.data.test.size()));
  EXPECT_EQ(s.summary.generated - s.summary.exact_removed - s.summary.near_removed,
            s.data.train.size() + s.data.val.size() + s.data.test.size());
  std::set<std::vector<int>> train_prompts;
  for (const auto& e : s.data.train) train_prompts.insert(e.prompt);
  for (const auto& e : s.data.test) EXPECT_EQ(train_prompts.count(e.prompt), 0u);
}

TEST(Synthesis, NewProblemSplitSharesNoProblemIds) {
  const auto& d = shared().data;
  ASSERT_FALSE(d.np_train.empty());
  ASSERT_FALSE(d.np_test.empty());
  std::set<int> train_ids;
  for (const auto& e : d.np_train) train_ids.insert(e.problem_id);
  for (const auto& e : d.np_val) EXPECT_EQ(train_ids.count(e.problem_id), 0u);
  for (const auto& e : d.np_test) EXPECT_EQ(train_ids.count(e.problem_id), 0u);
}

TEST(Synthesis, Deterministic) {
  const auto& s = shared();
  const fs::path dir = scratch("again");
  RunConfig cfg = s.cfg;
  cfg.out = dir.string();
  synthesize(cfg, dir / "data");
  for (const char* f : {"vocab.json", "std/train.jsonl", "std/test.jsonl", "new_problems/test.jsonl"}) {
    std::ifstream a(s.dir / "data" / f), b(dir / "data" / f);
    ASSERT_TRUE(a && b) << f;
    const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
    EXPECT_EQ(sa, sb) << f;
  }
}

TEST(Evaluation, ReferencesScorePerfectBleuAndCa) {
  const auto& d = shared().data;
  std::vector<std::vector<int>> refs;
  std::vector<bool> buggy;
  for (const auto& e : d.test) {
    refs.push_back(task::strip_eos(d.vocab, e.reference));
    buggy.push_back(e.buggy);
  }
  EXPECT_DOUBLE_EQ(metrics::bleu4(refs, refs), 1.0);
  const auto ca = metrics::ca(d.vocab, refs, buggy);
  EXPECT_DOUBLE_EQ(ca.accuracy, 1.0);
  EXPECT_EQ(ca.extraction_failures, 0u);
}

TEST(Evaluation, SelfComparisonPwrIsHalf) {
  const auto& s = shared();
  const auto classifier = train_style_classifier(s.data, s.cfg.eval);
  const auto politeness = metrics::PolitenessScorer::for_vocabulary(s.data.vocab);
  const PolicyModel policy(s.cfg.model);
  const RewardModel rm(s.cfg.model);
  const std::span<const task::LabeledExample> test = std::span(s.data.test).first(20);
  const EvalContext ctx{&s.data.vocab, test, &classifier, &politeness, &rm, s.cfg.eval.max_new_tokens};
  const Evaluation base = evaluate_policy(policy, ctx);
  ASSERT_EQ(base.rewards.size(), test.size());
  EXPECT_FALSE(base.report.pwr.has_value());
  const Evaluation self = evaluate_policy(policy, ctx, &base.rewards);
  ASSERT_TRUE(self.report.pwr.has_value());
  EXPECT_DOUBLE_EQ(*self.report.pwr, 0.5);
  EXPECT_EQ(self.responses, base.responses);
  EXPECT_EQ(self.report.responses, test.size());
}

TEST(Ablation, SevenConditions) {
  const auto& names = ablation_conditions();
  ASSERT_EQ(names.size(), 7u);
  std::set<std::string> labels;
  for (const auto& n : names) labels.insert(ablation_label(n));
  EXPECT_EQ(labels.size(), 7u);
  EXPECT_EQ(ablation_label("top-4"), "SFT+PPO (top-4 LoRA)");
  EXPECT_THROW(ablation_label("top-3"), ConfigError);
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("cli");
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("ablate --condition nope"), 2);
  EXPECT_EQ(run_cli("synth --config \"" + (dir / "missing.json").string() + "\""), 2);

  json bad = RunConfig{}.to_json();
  bad["model"]["vocab_size"] = 10;
  write_json(dir / "bad.json", bad);
  EXPECT_EQ(run_cli("synth --config \"" + (dir / "bad.json").string() + "\""), 2);

  // Eval of an untrained policy: the style accuracy is far below 0.99.
  const auto& s = shared();
  const fs::path ckpt = dir / "untrained.ckpt";
  to_checkpoint(PolicyModel(s.cfg.model)).save(ckpt.string());
  const std::string common = "eval --out \"" + s.dir.string() + "\" --checkpoint \"" + ckpt.string() + "\"";
  EXPECT_EQ(run_cli(common + " --min-sac 0.99"), 4);
  EXPECT_EQ(run_cli(common + " --min-sac 0"), 0);
  EXPECT_EQ(run_cli("eval --out \"" + s.dir.string() + "\" --checkpoint \"" + (dir / "none.ckpt").string() + "\""), 3);

  // A checkpoint for another vocabulary is a configuration mismatch.
  ModelConfig other = s.cfg.model;
  other.vocab_size += 1;
  to_checkpoint(PolicyModel(other)).save((dir / "other.ckpt").string());
  EXPECT_EQ(run_cli("eval --out \"" + s.dir.string() + "\" --checkpoint \"" + (dir / "other.ckpt").string() + "\""),
            2);
}
