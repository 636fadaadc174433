#pragma once

// Near-duplicate and leakage audits over token sequences.
//
// Sequences are shingled into overlapping k-grams (a sequence shorter than k
// is one shingle). MinHash signatures estimate Jaccard similarity; LSH bands
// over the signature propose candidate pairs, which are then verified with
// exact Jaccard.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace persa::audit {

using Sequence = std::vector<int>;

std::vector<std::uint64_t> shingles(std::span<const int> tokens, int k = 3);

// Exact Jaccard over shingle sets. Two empty sets count as identical.
double jaccard(std::span<const int> a, std::span<const int> b, int k = 3);

class MinHasher {
 public:
  explicit MinHasher(int num_hashes = 128, int shingle_size = 3, std::uint64_t seed = 0);

  std::vector<std::uint64_t> signature(std::span<const int> tokens) const;
  static double estimate(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b);

  int num_hashes() const { return static_cast<int>(seeds_.size()); }
  int shingle_size() const { return shingle_size_; }

 private:
  std::vector<std::uint64_t> seeds_;
  int shingle_size_;
};

// Banded LSH index: two signatures collide when any band of `rows` values
// matches exactly.
class LshIndex {
 public:
  LshIndex(int bands, int rows);

  void insert(std::size_t id, std::span<const std::uint64_t> signature);
  // Ids sharing at least one band with `signature`, ascending, deduplicated.
  std::vector<std::size_t> query(std::span<const std::uint64_t> signature) const;

 private:
  std::uint64_t band_key(std::span<const std::uint64_t> signature, int band) const;

  int bands_;
  int rows_;
  std::vector<std::vector<std::pair<std::uint64_t, std::size_t>>> buckets_;
};

// One corpus record: problem text, student solution and reference feedback.
struct AuditItem {
  Sequence problem;
  Sequence solution;
  Sequence feedback;

  // Problem and solution concatenated: the text compared for leakage.
  Sequence prompt_text() const;
};

struct AuditThresholds {
  double near_duplicate = 0.8;
  int num_hashes = 128;
  int shingle_size = 3;
  int bands = 32;
  std::uint64_t seed = 0;
};

struct DedupeResult {
  std::vector<std::size_t> kept;  // indices into the input, in input order
  std::size_t exact_removed = 0;
  std::size_t near_removed = 0;
};

// Content-hash exact duplicates of the (problem, solution, feedback) triple,
// then MinHash near-duplicates of the prompt text at the threshold. The first
// occurrence survives.
DedupeResult dedupe(std::span<const AuditItem> items, const AuditThresholds& thresholds);

struct AuditBlock {
  std::string split_key;  // "inst." or "prob. ID"
  // Items examined by the duplicate pass (train + test).
  std::size_t items = 0;
  std::size_t exact_dups_removed = 0;
  std::size_t near_dups_removed = 0;
  double max_train_test_sim_problem = 0.0;
  double max_train_test_sim_feedback = 0.0;
  // Test items whose prompt text is above the near-duplicate threshold
  // against some training item.
  std::size_t count_over_threshold = 0;
  std::vector<std::size_t> flagged_test_items;
  // Over the test feedback; absent with fewer than two sequences.
  std::optional<double> self_bleu;
  double distinct2 = 0.0;

  nlohmann::json to_json() const;
};

AuditBlock audit_corpus(std::span<const AuditItem> train, std::span<const AuditItem> test,
                        const AuditThresholds& thresholds = {});

struct AuditColumn {
  std::string name;  // "Std." or "New-Problems"
  AuditBlock block;
};

// Markdown table with one column per split variant; duplicate counts are
// shown as a percentage of the items examined.
std::string audit_table(std::span<const AuditColumn> columns);
nlohmann::json audit_json(std::span<const AuditColumn> columns);

}  // namespace persa::audit
