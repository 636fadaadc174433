// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Long stages (three pipelines, the ablation grid) run
// under ./acceptance_runs relative to the working directory.
//
//   acceptance [--out DIR] [--only N,N,...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "grad_cases.hpp"
#include "oracles.hpp"
#include "persa/audit.hpp"
#include "persa/checkpoint.hpp"
#include "persa/experiment.hpp"
#include "persa/grad_check.hpp"
#include "persa/hash.hpp"
#include "persa/metrics.hpp"
#include "persa/ppo.hpp"
#include "persa/reward_model.hpp"
#include "persa/task.hpp"

using namespace persa;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void progress(const std::string& msg) { std::cerr << "  .. " << msg << '\n'; }

// ---- 1 -------------------------------------------------------------------

Verdict gradient_suite() {
  const auto t0 = Clock::now();
  std::vector<std::string> bad;
  std::size_t checked = 0;
  double worst = 0;
  for (const auto& c : testing::grad_cases()) {
    Rng rng(123);
    const auto r = ad::grad_check(c.f, testing::random_tensor(c.shape, rng, c.lo, c.hi), 1e-4);
    worst = std::max(worst, r.max_rel_error);
    ++checked;
    if (!r.passed) bad.push_back(c.name);
  }
  // Full transformer NLL through every weight, with adapters carrying
  // non-zero B so both low-rank factors receive gradient.
  ModelConfig mc;
  mc.vocab_size = 11;
  mc.d_model = 8;
  mc.n_heads = 2;
  mc.d_ff = 12;
  mc.n_layers = 2;
  mc.max_seq_len = 12;
  mc.seed = 5;
  PolicyModel m(mc);
  m.attach_lora(LayerSelection::top(1, 2), 2, 4.0);
  m.unfreeze_all();
  Rng rng(9);
  for (const auto& [name, lora] : m.adapters()) {
    auto b = lora.B;
    for (auto& x : b.mutable_data()) x = 0.3 * rng.normal();
  }
  const std::vector<int> toks = {3, 1, 4, 1, 5, 9, 2, 6, 5, 3};
  const std::vector<int> in(toks.begin(), toks.end() - 1), tgt(toks.begin() + 1, toks.end());
  const auto nll = [&](const ad::Tensor&) { return ad::cross_entropy(forward_logits(m, in), tgt); };
  double worst_deep = 0;
  for (const auto& t : m.named_tensors()) {
    const auto r = ad::grad_check(nll, t.tensor, 1e-3);
    worst_deep = std::max(worst_deep, r.max_rel_error);
    ++checked;
    if (!r.passed) bad.push_back(t.name);
  }
  const double secs = seconds(t0);
  std::string detail = std::to_string(checked) + " checks, max rel err primitives " + fmt("%.2e", worst) +
                       ", transformer " + fmt("%.2e", worst_deep) + ", " + fmt("%.1f", secs) + " s";
  for (const auto& b : bad) detail += "; failed " + b;
  return {bad.empty() && secs < 60.0, detail};
}

// ---- 2 -------------------------------------------------------------------

Verdict lora_identity(const exp::RunConfig& cfg) {
  const PolicyModel base(cfg.model);
  PolicyModel adapted = clone_frozen(base);
  adapted.attach_lora(cfg.lora.selection(cfg.model), cfg.lora.rank, cfg.lora.alpha);
  Rng rng(2024);
  double max_diff = 0;
  for (int i = 0; i < 100; ++i) {
    std::vector<int> toks(1 + rng.below(static_cast<std::uint64_t>(cfg.model.max_seq_len)));
    for (auto& t : toks) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.model.vocab_size)));
    const auto a = forward_logits(base, toks), b = forward_logits(adapted, toks);
    for (std::size_t k = 0; k < a.numel(); ++k) max_diff = std::max(max_diff, std::abs(a[k] - b[k]));
  }
  return {max_diff == 0.0, std::to_string(adapted.adapters().size()) + " adapters, max |dlogit| over 100 inputs = " +
                               fmt("%.3g", max_diff)};
}

// ---- 3 -------------------------------------------------------------------

Verdict analytic_goldens(const exp::RunConfig& cfg) {
  std::vector<std::string> notes;
  bool ok = true;

  const RewardModel rm(cfg.model);  // zero head: equal rewards
  const PreferencePair pair{{1, 2, 3}, {4, 5}, {6, 7, 8}};
  const double bt = bt_loss(rm, pair).item();
  ok &= std::abs(bt - std::log(2.0)) <= 1e-9;
  notes.push_back("bt-ln2 " + fmt("%.1e", std::abs(bt - std::log(2.0))));

  const int v = cfg.model.vocab_size;
  const ad::Tensor zeros = ad::Tensor::zeros({5, static_cast<std::size_t>(v)});
  const double nll = ad::cross_entropy(zeros, std::vector<int>{0, 3, 7, 1, v - 1}).item();
  ok &= std::abs(nll - std::log(static_cast<double>(v))) <= 1e-9;
  notes.push_back("nll-ln(V) " + fmt("%.1e", std::abs(nll - std::log(static_cast<double>(v)))));

  PolicyModel policy(cfg.model);
  policy.attach_lora(cfg.lora.selection(cfg.model), cfg.lora.rank, cfg.lora.alpha);
  const PolicyModel ref = clone_frozen(policy);
  RewardModel scorer(cfg.model);
  Rng hr(4);
  for (auto& x : scorer.head().mutable_data()) x = hr.normal();
  ValueHead vh(cfg.model.d_model);
  PPOConfig pc = cfg.ppo;
  const auto demos = task::gen_demonstrations(cfg.synthetic, 16, 77);
  std::vector<std::vector<int>> prompts;
  for (const auto& d : demos) prompts.push_back(d.prompt);
  RunningStats stats;
  Rng rng(5);
  const RolloutBatch batch = collect_rollouts(policy, vh, ref, scorer, prompts, pc, stats, rng);
  std::vector<std::size_t> idx(std::min<std::size_t>(batch.trajectories.size(),
                                                     static_cast<std::size_t>(pc.minibatch_size)));
  std::iota(idx.begin(), idx.end(), 0);
  const PpoLoss loss = ppo_loss(policy, vh, batch, idx, pc);
  ok &= !idx.empty() && loss.max_ratio_deviation < 1e-10;
  notes.push_back("max|rho-1| " + fmt("%.1e", loss.max_ratio_deviation));

  // Clone as reference: the sampled KL term is zero token by token.
  double kl_abs = 0;
  for (const auto& t : batch.trajectories) {
    for (std::size_t i = 0; i < t.response.size(); ++i) kl_abs += std::abs(t.old_log_probs[i] - t.ref_log_probs[i]);
    for (double k : exact_kl(policy, ref, t.prompt, t.response)) kl_abs += std::abs(k);
  }
  ok &= kl_abs == 0.0;
  notes.push_back("KL(clone) " + fmt("%.1e", kl_abs));

  std::string detail;
  for (const auto& n : notes) detail += (detail.empty() ? "" : ", ") + n;
  return {ok, detail};
}

// ---- pipelines (4, 6, 10) -------------------------------------------------

struct PipelineRun {
  exp::RunConfig cfg;
  json report;
  double seconds = 0;
};

PipelineRun run_pipeline_seed(const exp::RunConfig& base, std::uint64_t seed, const fs::path& root) {
  PipelineRun r;
  r.cfg = base;
  r.cfg.apply_seed(seed);
  r.cfg.out = (root / ("pipeline_seed" + std::to_string(seed))).string();
  fs::remove_all(r.cfg.out);
  const auto t0 = Clock::now();
  r.report = exp::run_pipeline(r.cfg).report;
  r.seconds = seconds(t0);
  progress("pipeline seed " + std::to_string(seed) + " done in " + fmt("%.0f", r.seconds) + " s");
  return r;
}

Verdict frozen_weights(const PipelineRun& run) {
  const fs::path ck = fs::path(run.cfg.out) / "checkpoints";
  const Checkpoint base = Checkpoint::load((ck / "base.ckpt").string());
  std::map<std::string, std::string> snapshot;
  for (const auto& e : base.entries) snapshot[e.name] = content_hash(e.tensor);
  std::size_t compared = 0, mismatched = 0, adapters = 0, heads = 0;
  for (const char* file : {"sft.ckpt", "policy.ckpt"}) {
    const Checkpoint c = Checkpoint::load((ck / file).string());
    std::set<std::string> seen;
    for (const auto& e : c.entries) {
      if (e.section == "adapter") {
        ++adapters;
        continue;
      }
      if (e.section == "head") {
        ++heads;
        continue;
      }
      seen.insert(e.name);
      ++compared;
      const auto it = snapshot.find(e.name);
      if (it == snapshot.end() || it->second != content_hash(e.tensor)) ++mismatched;
    }
    mismatched += snapshot.size() - seen.size();
  }
  return {mismatched == 0 && compared == 2 * snapshot.size() && adapters > 0,
          std::to_string(compared) + " frozen tensors compared against the pre-adaptation snapshot, " +
              std::to_string(mismatched) + " differ (" + std::to_string(adapters) + " adapter and " +
              std::to_string(heads) + " head tensors excluded)"};
}

Verdict directional_table1(const std::vector<PipelineRun>& runs) {
  bool ok = true;
  double total = 0;
  std::string detail;
  for (const auto& r : runs) {
    const auto& s = r.report.at("stages");
    const double base = s["base"]["style_rate"], sft = s["sft"]["style_rate"], fin = s["final"]["style_rate"],
                 ca = s["final"]["ca"];
    ok &= base <= 0.20 && sft >= 0.80 && fin >= 0.90 && ca >= 0.95;
    total += r.seconds;
    detail += "seed " + std::to_string(r.cfg.seed) + ": style " + fmt("%.2f", base) + " -> " + fmt("%.2f", sft) +
              " -> " + fmt("%.2f", fin) + " CA " + fmt("%.2f", ca) + "; ";
  }
  ok &= total < 15 * 60.0;
  return {ok, detail + "total " + fmt("%.0f", total) + " s"};
}

Verdict reproducibility(const PipelineRun& first, const fs::path& root) {
  exp::RunConfig cfg = exp::RunConfig::load(fs::path(first.cfg.out) / "manifest.json");
  cfg.out = (root / "pipeline_replay").string();
  fs::remove_all(cfg.out);
  exp::run_pipeline(cfg);
  const fs::path a(first.cfg.out), b(cfg.out);
  const bool report_same = read_file(a / "reports" / "report.json") == read_file(b / "reports" / "report.json");
  std::size_t ckpts = 0, differ = 0;
  for (const auto& e : fs::directory_iterator(a / "checkpoints")) {
    ++ckpts;
    const fs::path other = b / "checkpoints" / e.path().filename();
    if (!fs::exists(other) || sha256_file(e.path().string()) != sha256_file(other.string())) ++differ;
  }
  const json ma = json::parse(read_file(a / "manifest.json")), mb = json::parse(read_file(b / "manifest.json"));
  const bool artifacts_same = ma.at("artifacts") == mb.at("artifacts");
  return {report_same && differ == 0 && ckpts > 0 && artifacts_same,
          std::string("report.json ") + (report_same ? "identical" : "differs") + ", " + std::to_string(ckpts - differ) +
              "/" + std::to_string(ckpts) + " checkpoint hashes identical, artifact manifest " +
              (artifacts_same ? "identical" : "differs")};
}

// ---- 5 -------------------------------------------------------------------

Verdict metric_oracles() {
  Rng rng(31);
  auto seq = [&](std::size_t lo, std::size_t hi, int vocab) {
    std::vector<int> s(lo + rng.below(hi - lo + 1));
    for (auto& t : s) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
    return s;
  };
  double bleu_err = 0;
  for (int i = 0; i < 50; ++i) {
    const std::vector<std::vector<int>> c = {seq(1, 12, 6)}, r = {seq(1, 12, 6)};
    bleu_err = std::max(bleu_err, std::abs(metrics::bleu4(c, r) - oracle::bleu4(c, r)));
  }

  // Pairs spread over the whole similarity range: a 40-token sequence and a
  // copy with a random number of substituted positions.
  const audit::MinHasher hasher(128, 3, 0);
  int within = 0;
  double sq = 0;
  for (int i = 0; i < 100; ++i) {
    const std::vector<int> a = seq(40, 40, 200);
    std::vector<int> b = a;
    const std::size_t edits = rng.below(41);
    for (std::size_t e = 0; e < edits; ++e) b[rng.below(40)] = static_cast<int>(200 + rng.below(200));
    const double err = audit::MinHasher::estimate(hasher.signature(a), hasher.signature(b)) - oracle::jaccard(a, b);
    within += std::abs(err) <= 0.05 ? 1 : 0;
    sq += err * err;
  }

  bool pwr_ok = true;
  for (int i = 0; i < 50; ++i) {
    std::vector<double> x(1 + rng.below(20)), y(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) {
      x[k] = static_cast<double>(rng.below(4));
      y[k] = static_cast<double>(rng.below(4));
    }
    pwr_ok &= metrics::pwr(x, y) + metrics::pwr(y, x) == 1.0;
  }
  const bool ok = bleu_err <= 1e-12 && within == 100 && pwr_ok;
  return {ok, "bleu max |diff| " + fmt("%.1e", bleu_err) + "; minhash " + std::to_string(within) +
                  "/100 pairs within 0.05 (rms " + fmt("%.3f", std::sqrt(sq / 100.0)) + "); pwr antisymmetry " +
                  (pwr_ok ? "exact" : "violated")};
}

// ---- 7 -------------------------------------------------------------------

Verdict directional_table3(const exp::RunConfig& base, const fs::path& root) {
  exp::RunConfig cfg = base;
  cfg.out = (root / "ablation").string();
  fs::remove_all(cfg.out);
  const auto t0 = Clock::now();
  const exp::AblationResult res = exp::run_ablation(cfg, std::nullopt, [](const std::string&) {});
  const double secs = seconds(t0);
  progress("ablation done in " + fmt("%.0f", secs) + " s");
  std::cerr << res.markdown();
  std::map<std::string, const metrics::MetricsReport*> m;
  for (const auto& row : res.rows) m[row.name] = &row.median;
  const std::string top = "top-" + std::to_string(cfg.lora.top_layers);
  for (const std::string n : {"base", "sft-only", "ppo-only", "full-param"}) {
    if (!m.count(n)) return {false, "missing row " + n};
  }
  if (!m.count(top)) return {false, "missing row " + top};
  const double s_top = m[top]->sac, s_full = m["full-param"]->sac, s_sft = m["sft-only"]->sac,
               s_ppo = m["ppo-only"]->sac, s_base = m["base"]->sac;
  const double pwr = m[top]->pwr.value_or(0.0);
  const bool ok = s_top >= s_full - 0.02 && s_top >= s_sft && s_full >= s_sft && s_sft >= s_ppo && s_ppo >= s_base &&
                  pwr >= 0.85 && secs < 30 * 60.0;
  return {ok, "median SAC " + top + " " + fmt("%.3f", s_top) + ", full " + fmt("%.3f", s_full) + ", sft " +
                  fmt("%.3f", s_sft) + ", ppo " + fmt("%.3f", s_ppo) + ", base " + fmt("%.3f", s_base) + "; PWR " +
                  fmt("%.3f", pwr) + "; " + fmt("%.0f", secs) + " s"};
}

// ---- 8 -------------------------------------------------------------------

// Uses the reward model a pipeline run trained, then retrains the same
// configuration from the same backbone with half of every split flipped.
Verdict reward_model_quality(const PipelineRun& run) {
  const exp::RunConfig& cfg = run.cfg;
  const fs::path dir(cfg.out);
  const exp::Dataset data = exp::load_dataset(cfg, dir / "data");
  auto pairs = [](const std::vector<task::LabeledPreference>& prefs) {
    std::vector<PreferencePair> out;
    for (const auto& p : prefs) out.push_back({p.example.prompt, p.chosen, p.rejected});
    return out;
  };
  auto flip_half = [](std::vector<PreferencePair>& ps, std::uint64_t seed) {
    std::vector<std::size_t> idx(ps.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    rng.shuffle(std::span(idx));
    for (std::size_t i = 0; i < idx.size() / 2; ++i) std::swap(ps[idx[i]].chosen, ps[idx[i]].rejected);
  };
  const auto train = pairs(data.pref_train), val = pairs(data.pref_val);
  const RewardModel trained = reward_model_from_checkpoint(Checkpoint::load((dir / "checkpoints" / "rm.ckpt").string()));
  const double clean_acc = preference_accuracy(trained, val);

  const PolicyModel base = policy_from_checkpoint(Checkpoint::load((dir / "checkpoints" / "base.ckpt").string()));
  auto ftrain = train, fval = val, ftest = pairs(task::gen_preferences(cfg.synthetic, 200, cfg.seed + 1000));
  flip_half(ftrain, 11);
  flip_half(fval, 12);
  flip_half(ftest, 13);
  RewardModel noisy(base);
  train_rm(noisy, ftrain, fval, cfg.rm);
  const double noisy_acc = preference_accuracy(noisy, ftest);
  return {clean_acc >= 0.95 && noisy_acc >= 0.40 && noisy_acc <= 0.60,
          "validation accuracy " + fmt("%.3f", clean_acc) + " on " + std::to_string(val.size()) +
              " pairs; with half the labels flipped " + fmt("%.3f", noisy_acc) + " on " +
              std::to_string(ftest.size()) + " held-out pairs"};
}

// ---- 9 -------------------------------------------------------------------

Verdict audit_fidelity(const exp::RunConfig& base, const fs::path& root) {
  Rng rng(3);
  auto seq = [&](std::size_t len) {
    audit::Sequence s(len);
    for (auto& t : s) t = static_cast<int>(rng.below(500));
    return s;
  };
  std::vector<audit::AuditItem> items;
  for (int i = 0; i < 60; ++i) items.push_back({{i}, seq(30), seq(8)});
  const std::size_t clean_n = items.size();
  const audit::DedupeResult clean = audit::dedupe(items, audit::AuditThresholds{});
  for (int k = 0; k < 5; ++k) {
    audit::AuditItem copy = items[static_cast<std::size_t>(10 + k)];
    copy.solution[copy.solution.size() / 2] = 900 + k;  // Jaccard 35/41 on the prompt
    copy.feedback = seq(8);
    items.push_back(copy);
  }
  const audit::DedupeResult d = audit::dedupe(items, audit::AuditThresholds{});
  std::size_t recalled = 0;
  for (std::size_t i = clean_n; i < items.size(); ++i) {
    recalled += std::find(d.kept.begin(), d.kept.end(), i) == d.kept.end() ? 1 : 0;
  }

  exp::RunConfig cfg = base;
  cfg.out = (root / "audit").string();
  fs::remove_all(cfg.out);
  const auto summary = exp::synthesize(cfg, fs::path(cfg.out) / "data");
  const auto cols = exp::run_audit(cfg);
  const std::string table = audit::audit_table(cols);
  const bool shaped = cols.size() == 2 && table.find("Std.") != std::string::npos &&
                      table.find("New-Problems") != std::string::npos &&
                      table.find("Near-dups rm. (%)") != std::string::npos;
  const bool ok = recalled >= 4 && clean.exact_removed == 0 && clean.near_removed == 0 &&
                  summary.exact_removed == 0 && shaped;
  return {ok, "planted recall " + std::to_string(recalled) + "/5; exact dups in clean corpora " +
                  std::to_string(clean.exact_removed) + " (toy) and " + std::to_string(summary.exact_removed) +
                  " (synthetic); table columns " + std::to_string(cols.size())};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path root = "acceptance_runs";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--out" && i + 1 < argc) {
      root = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    } else {
      std::cerr << "usage: acceptance [--out DIR] [--only N,N,...]\n";
      return 2;
    }
  }
  const auto want = [&](int n) { return only.empty() || only.count(n) > 0; };
  fs::create_directories(root);
  const exp::RunConfig cfg;

  const std::vector<std::pair<int, std::string>> names = {
      {1, "gradient suite"},          {2, "LoRA identity at attach"},       {3, "analytic goldens"},
      {4, "frozen-weight preservation"}, {5, "metric oracle equivalence"}, {6, "pipeline direction, 3 seeds"},
      {7, "ablation ordering"},        {8, "reward-model quality"},        {9, "audit fidelity"},
      {10, "reproducibility"}};
  std::map<int, Verdict> results;
  const auto guarded = [&](int n, const std::function<Verdict()>& f) {
    if (!want(n)) return;
    progress("criterion " + std::to_string(n));
    try {
      results[n] = f();
    } catch (const std::exception& e) {
      results[n] = {false, std::string("exception: ") + e.what()};
    }
    std::cerr << "  " << (results[n].pass ? "pass" : "FAIL") << ": " << results[n].detail << '\n';
  };

  guarded(1, gradient_suite);
  guarded(2, [&] { return lora_identity(cfg); });
  guarded(3, [&] { return analytic_goldens(cfg); });
  guarded(5, metric_oracles);
  guarded(9, [&] { return audit_fidelity(cfg, root); });

  std::vector<PipelineRun> runs;
  if (want(4) || want(6) || want(8) || want(10)) {
    try {
      for (std::uint64_t s : {0, 1, 2}) {
        runs.push_back(run_pipeline_seed(cfg, s, root));
        if (!want(6)) break;
      }
    } catch (const std::exception& e) {
      for (int n : {4, 6, 8, 10}) {
        if (want(n)) results[n] = {false, std::string("pipeline failed: ") + e.what()};
      }
    }
  }
  if (!runs.empty()) {
    guarded(4, [&] { return frozen_weights(runs.front()); });
    guarded(8, [&] { return reward_model_quality(runs.front()); });
    if (runs.size() == 3) guarded(6, [&] { return directional_table1(runs); });
    guarded(10, [&] { return reproducibility(runs.front(), root); });
  }
  guarded(7, [&] { return directional_table3(cfg, root); });

  int failed = 0;
  std::cout << "\nacceptance summary\n";
  for (const auto& [n, name] : names) {
    if (!want(n)) continue;
    const auto it = results.find(n);
    const bool pass = it != results.end() && it->second.pass;
    failed += pass ? 0 : 1;
    std::cout << (pass ? "PASS" : "FAIL") << "  criterion " << n << " (" << name
              << "): " << (it == results.end() ? "not run" : it->second.detail) << '\n';
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criterion(s) failed") << '\n';
  return failed == 0 ? 0 : 1;
}
