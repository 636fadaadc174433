#include "persa/audit.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <unordered_set>

#include "persa/errors.hpp"
#include "persa/hash.hpp"
#include "persa/metrics.hpp"
#include "persa/rng.hpp"

namespace persa::audit {

namespace {

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::string triple_bytes(const AuditItem& item) {
  std::string out;
  auto put = [&](const Sequence& s) {
    out += std::to_string(s.size());
    out += ':';
    for (int t : s) {
      out += std::to_string(t);
      out += ',';
    }
    out += '|';
  };
  put(item.problem);
  put(item.solution);
  put(item.feedback);
  return out;
}

}  // namespace

std::vector<std::uint64_t> shingles(std::span<const int> tokens, int k) {
  if (k < 1) throw ContractError("shingles: k must be >= 1");
  std::vector<std::uint64_t> out;
  if (tokens.empty()) return out;
  const std::size_t width = std::min<std::size_t>(k, tokens.size());
  for (std::size_t i = 0; i + width <= tokens.size(); ++i) {
    std::uint64_t h = 0x243F6A8885A308D3ULL ^ width;
    for (std::size_t j = 0; j < width; ++j) h = mix64(h ^ static_cast<std::uint64_t>(static_cast<std::uint32_t>(tokens[i + j])));
    out.push_back(h);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

double jaccard(std::span<const int> a, std::span<const int> b, int k) {
  const auto sa = shingles(a, k);
  const auto sb = shingles(b, k);
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t inter = 0;
  std::size_t i = 0, j = 0;
  while (i < sa.size() && j < sb.size()) {
    if (sa[i] == sb[j]) {
      ++inter;
      ++i;
      ++j;
    } else if (sa[i] < sb[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
}

MinHasher::MinHasher(int num_hashes, int shingle_size, std::uint64_t seed) : shingle_size_(shingle_size) {
  if (num_hashes < 1 || shingle_size < 1) throw ContractError("MinHasher: num_hashes and shingle_size must be >= 1");
  seeds_.reserve(num_hashes);
  for (int i = 0; i < num_hashes; ++i) seeds_.push_back(derive_seed(seed, static_cast<std::uint64_t>(i)));
}

std::vector<std::uint64_t> MinHasher::signature(std::span<const int> tokens) const {
  const auto sh = shingles(tokens, shingle_size_);
  std::vector<std::uint64_t> sig(seeds_.size(), UINT64_MAX);
  for (std::size_t i = 0; i < seeds_.size(); ++i) {
    for (std::uint64_t s : sh) sig[i] = std::min(sig[i], mix64(s ^ seeds_[i]));
  }
  return sig;
}

double MinHasher::estimate(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
  if (a.size() != b.size() || a.empty()) throw DimensionError("MinHasher::estimate: signature sizes differ");
  std::size_t equal = 0;
  for (std::size_t i = 0; i < a.size(); ++i) equal += a[i] == b[i];
  return static_cast<double>(equal) / static_cast<double>(a.size());
}

LshIndex::LshIndex(int bands, int rows) : bands_(bands), rows_(rows), buckets_(bands) {
  if (bands < 1 || rows < 1) throw ContractError("LshIndex: bands and rows must be >= 1");
}

std::uint64_t LshIndex::band_key(std::span<const std::uint64_t> signature, int band) const {
  if (signature.size() < static_cast<std::size_t>(bands_ * rows_)) {
    throw DimensionError("LshIndex: signature shorter than bands * rows");
  }
  std::uint64_t h = 0x13198A2E03707344ULL;
  for (int r = 0; r < rows_; ++r) h = mix64(h ^ signature[band * rows_ + r]);
  return h;
}

void LshIndex::insert(std::size_t id, std::span<const std::uint64_t> signature) {
  for (int b = 0; b < bands_; ++b) buckets_[b].emplace_back(band_key(signature, b), id);
}

std::vector<std::size_t> LshIndex::query(std::span<const std::uint64_t> signature) const {
  std::set<std::size_t> hits;
  for (int b = 0; b < bands_; ++b) {
    const std::uint64_t key = band_key(signature, b);
    for (const auto& [k, id] : buckets_[b]) {
      if (k == key) hits.insert(id);
    }
  }
  return {hits.begin(), hits.end()};
}

Sequence AuditItem::prompt_text() const {
  Sequence out = problem;
  out.insert(out.end(), solution.begin(), solution.end());
  return out;
}

namespace {

int rows_per_band(const AuditThresholds& t) {
  if (t.bands < 1 || t.num_hashes % t.bands != 0) {
    throw ConfigError("audit: num_hashes must be a multiple of bands");
  }
  return t.num_hashes / t.bands;
}

}  // namespace

DedupeResult dedupe(std::span<const AuditItem> items, const AuditThresholds& thresholds) {
  DedupeResult out;
  std::unordered_set<std::string> seen;
  const MinHasher hasher(thresholds.num_hashes, thresholds.shingle_size, thresholds.seed);
  LshIndex index(thresholds.bands, rows_per_band(thresholds));
  std::vector<Sequence> kept_text;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!seen.insert(sha256_hex(triple_bytes(items[i]))).second) {
      ++out.exact_removed;
      continue;
    }
    const Sequence text = items[i].prompt_text();
    const auto sig = hasher.signature(text);
    bool near = false;
    for (std::size_t cand : index.query(sig)) {
      if (jaccard(text, kept_text[cand], thresholds.shingle_size) >= thresholds.near_duplicate) {
        near = true;
        break;
      }
    }
    if (near) {
      ++out.near_removed;
      continue;
    }
    index.insert(kept_text.size(), sig);
    kept_text.push_back(text);
    out.kept.push_back(i);
  }
  return out;
}

nlohmann::json AuditBlock::to_json() const {
  nlohmann::json j = {{"split_key", split_key},
                      {"items", items},
                      {"exact_dups_removed", exact_dups_removed},
                      {"near_dups_removed", near_dups_removed},
                      {"max_train_test_sim_problem", max_train_test_sim_problem},
                      {"max_train_test_sim_feedback", max_train_test_sim_feedback},
                      {"count_over_threshold", count_over_threshold},
                      {"flagged_test_items", flagged_test_items},
                      {"distinct2", distinct2}};
  j["self_bleu"] = self_bleu ? nlohmann::json(*self_bleu) : nlohmann::json(nullptr);
  return j;
}

AuditBlock audit_corpus(std::span<const AuditItem> train, std::span<const AuditItem> test,
                        const AuditThresholds& thresholds) {
  AuditBlock block;
  std::vector<AuditItem> all(train.begin(), train.end());
  all.insert(all.end(), test.begin(), test.end());
  const DedupeResult d = dedupe(all, thresholds);
  block.items = all.size();
  block.exact_dups_removed = d.exact_removed;
  block.near_dups_removed = d.near_removed;

  const int k = thresholds.shingle_size;
  std::vector<Sequence> train_text;
  train_text.reserve(train.size());
  for (const auto& item : train) train_text.push_back(item.prompt_text());
  for (std::size_t t = 0; t < test.size(); ++t) {
    const Sequence text = test[t].prompt_text();
    for (std::size_t r = 0; r < train.size(); ++r) {
      block.max_train_test_sim_problem = std::max(block.max_train_test_sim_problem, jaccard(text, train_text[r], k));
      block.max_train_test_sim_feedback =
          std::max(block.max_train_test_sim_feedback, jaccard(test[t].feedback, train[r].feedback, k));
    }
  }

  const MinHasher hasher(thresholds.num_hashes, k, thresholds.seed);
  LshIndex index(thresholds.bands, rows_per_band(thresholds));
  for (std::size_t r = 0; r < train_text.size(); ++r) index.insert(r, hasher.signature(train_text[r]));
  for (std::size_t t = 0; t < test.size(); ++t) {
    const Sequence text = test[t].prompt_text();
    for (std::size_t cand : index.query(hasher.signature(text))) {
      if (jaccard(text, train_text[cand], k) > thresholds.near_duplicate) {
        block.flagged_test_items.push_back(t);
        break;
      }
    }
  }
  block.count_over_threshold = block.flagged_test_items.size();

  std::vector<Sequence> feedback;
  feedback.reserve(test.size());
  for (const auto& item : test) feedback.push_back(item.feedback);
  block.self_bleu = metrics::self_bleu(feedback);
  block.distinct2 = metrics::distinct_n(feedback, 2);
  return block;
}

namespace {

std::string fixed(double v, int digits) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double percent(std::size_t count, std::size_t total) {
  return total == 0 ? 0.0 : 100.0 * static_cast<double>(count) / static_cast<double>(total);
}

}  // namespace

std::string audit_table(std::span<const AuditColumn> columns) {
  std::string out = "| Audit / Split |";
  std::string rule = "|---|";
  for (const auto& c : columns) {
    out += ' ' + c.name + " |";
    rule += "---|";
  }
  out += '\n' + rule + '\n';
  auto row = [&](const std::string& label, auto&& cell) {
    out += "| " + label + " |";
    for (const auto& c : columns) out += ' ' + cell(c.block) + " |";
    out += '\n';
  };
  row("Split key", [](const AuditBlock& b) { return b.split_key; });
  row("Exact dups rm. (%)", [](const AuditBlock& b) { return fixed(percent(b.exact_dups_removed, b.items), 1); });
  row("Near-dups rm. (%)", [](const AuditBlock& b) { return fixed(percent(b.near_dups_removed, b.items), 1); });
  row("Max train-test sim. (problem)", [](const AuditBlock& b) { return fixed(b.max_train_test_sim_problem, 2); });
  row("Max train-test sim. (ref. fb)", [](const AuditBlock& b) { return fixed(b.max_train_test_sim_feedback, 2); });
  row("# test items >0.8 (Jaccard)", [](const AuditBlock& b) { return std::to_string(b.count_over_threshold); });
  row("Self-BLEU", [](const AuditBlock& b) { return b.self_bleu ? fixed(*b.self_bleu, 2) : std::string("--"); });
  row("Distinct-2", [](const AuditBlock& b) { return fixed(b.distinct2, 2); });
  return out;
}

nlohmann::json audit_json(std::span<const AuditColumn> columns) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& c : columns) j[c.name] = c.block.to_json();
  return j;
}

}  // namespace persa::audit
