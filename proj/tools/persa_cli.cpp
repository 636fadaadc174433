// persa: synth | pipeline | ablate | eval | audit
//
// Exit codes: 0 success, 2 configuration or schema error, 3 stage failure,
// 4 evaluation below a requested threshold.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "persa/errors.hpp"
#include "persa/experiment.hpp"

namespace {

namespace exp = persa::exp;

enum ExitCode { kOk = 0, kConfig = 2, kStage = 3, kThreshold = 4 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Run configuration (JSON) or a run manifest");
  cmd->add_option("--seed", c.seed, "Master seed; overrides the config");
  cmd->add_option("--out", c.out, "Run directory; overrides the config");
}

exp::RunConfig resolve(const Common& c) {
  exp::RunConfig cfg = c.config.empty() ? exp::RunConfig{} : exp::RunConfig::load(c.config);
  if (c.seed) {
    cfg.apply_seed(*c.seed);
    cfg.ablation_seeds = {*c.seed};
  }
  if (!c.out.empty()) cfg.out = c.out;
  cfg.validate();
  return cfg;
}

void log_line(const std::string& msg) { std::cerr << msg << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-selective RLHF pipeline for style-aligned feedback generation"};
  app.require_subcommand(1);

  Common synth_opts, pipe_opts, ablate_opts, eval_opts, audit_opts;
  auto* synth = app.add_subcommand("synth", "Generate datasets, splits and the vocabulary manifest");
  add_common(synth, synth_opts);

  auto* pipeline = app.add_subcommand("pipeline", "Pretrain, adapt, SFT, reward model, PPO, evaluate");
  add_common(pipeline, pipe_opts);

  auto* ablate = app.add_subcommand("ablate", "Run the seven-condition ablation grid");
  add_common(ablate, ablate_opts);
  std::string condition;
  ablate->add_option("--condition", condition, "Run a single condition")
      ->check(CLI::IsMember(exp::ablation_conditions()));

  auto* eval = app.add_subcommand("eval", "Evaluate a policy checkpoint on the test split");
  add_common(eval, eval_opts);
  std::string checkpoint, baseline, reward_model;
  std::optional<double> min_sac, min_ca, min_style;
  eval->add_option("--checkpoint", checkpoint, "Policy checkpoint")->required();
  eval->add_option("--baseline", baseline, "Baseline policy checkpoint for PWR");
  eval->add_option("--reward-model", reward_model, "Reward model checkpoint (default: <out>/checkpoints/rm.ckpt)");
  eval->add_option("--min-sac", min_sac, "Fail with exit code 4 below this SAC");
  eval->add_option("--min-ca", min_ca, "Fail with exit code 4 below this CA");
  eval->add_option("--min-style", min_style, "Fail with exit code 4 below this oracle style rate");

  auto* audit = app.add_subcommand("audit", "Leakage and diversity audit of both split variants");
  add_common(audit, audit_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*synth) {
      const auto cfg = resolve(synth_opts);
      const auto s = exp::synthesize(cfg, std::filesystem::path(cfg.out) / "data");
      std::printf("generated %zu, removed %zu exact and %zu near duplicates\n", s.generated, s.exact_removed,
                  s.near_removed);
      std::printf("std split %zu/%zu/%zu, new-problems split %zu/%zu/%zu\n", s.std_sizes[0], s.std_sizes[1],
                  s.std_sizes[2], s.new_problem_sizes[0], s.new_problem_sizes[1], s.new_problem_sizes[2]);
    } else if (*pipeline) {
      const auto cfg = resolve(pipe_opts);
      const auto r = exp::run_pipeline(cfg, log_line);
      std::ifstream md(std::filesystem::path(cfg.out) / "reports" / "metrics.md");
      std::cout << md.rdbuf();
    } else if (*ablate) {
      const auto cfg = resolve(ablate_opts);
      const auto r = exp::run_ablation(cfg, condition.empty() ? std::nullopt : std::optional(condition), log_line);
      std::cout << r.markdown();
    } else if (*eval) {
      const auto cfg = resolve(eval_opts);
      exp::EvalRequest req{checkpoint, {}, {}};
      if (!baseline.empty()) req.baseline = baseline;
      if (!reward_model.empty()) req.reward_model = reward_model;
      const auto e = exp::run_eval(cfg, req, log_line);
      std::cout << e.report.markdown();
      std::cout << "oracle style " << persa::metrics::format_percent(e.report.style_rate) << "%, extraction failures "
                << e.report.ca_extraction_failures << ", empty responses " << e.report.empty_responses << '\n';
      bool below = false;
      if (min_sac && e.report.sac < *min_sac) below = true;
      if (min_ca && e.report.ca < *min_ca) below = true;
      if (min_style && e.report.style_rate < *min_style) below = true;
      if (below) {
        std::cerr << "evaluation below the requested threshold\n";
        return kThreshold;
      }
    } else if (*audit) {
      const auto cfg = resolve(audit_opts);
      const auto cols = exp::run_audit(cfg, log_line);
      std::cout << persa::audit::audit_table(cols);
    }
  } catch (const persa::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const persa::StageError& e) {
    std::cerr << e.what() << '\n';
    return kStage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kStage;
  }
  return kOk;
}
