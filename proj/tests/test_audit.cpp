#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "persa/audit.hpp"
#include "persa/errors.hpp"
#include "persa/rng.hpp"

using namespace persa;
using namespace persa::audit;

namespace {

Sequence random_seq(Rng& rng, std::size_t len, int vocab) {
  Sequence s(len);
  for (auto& t : s) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
  return s;
}

// Copy of `s` with one interior token replaced: Jaccard (k=3) of 35/41.
Sequence near_copy(const Sequence& s, int fresh_token) {
  Sequence out = s;
  out[out.size() / 2] = fresh_token;
  return out;
}

AuditItem item(const Sequence& problem, const Sequence& solution, const Sequence& feedback) {
  return {problem, solution, feedback};
}

std::vector<AuditItem> clean_corpus(Rng& rng, std::size_t n) {
  std::vector<AuditItem> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(item({static_cast<int>(i)}, random_seq(rng, 30, 500), random_seq(rng, 8, 500)));
  }
  return out;
}

}  // namespace

TEST(Shingles, ShortSequenceIsOneShingle) {
  EXPECT_EQ(shingles(std::vector<int>{1, 2}, 3).size(), 1u);
  EXPECT_TRUE(shingles(std::vector<int>{}, 3).empty());
  EXPECT_EQ(shingles(std::vector<int>{1, 2, 1, 2, 1}, 3).size(), 2u);
  EXPECT_THROW(shingles(std::vector<int>{1}, 0), ContractError);
}

TEST(Jaccard, MatchesSetOracle) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const Sequence a = random_seq(rng, 1 + rng.below(15), 4), b = random_seq(rng, 1 + rng.below(15), 4);
    EXPECT_NEAR(jaccard(a, b), oracle::jaccard(a, b), 1e-15);
  }
  EXPECT_EQ(jaccard(std::vector<int>{}, std::vector<int>{}), 1.0);
}

TEST(MinHash, EstimateMatchesBinomialErrorAt128Hashes) {
  // Per pair the estimate is a mean of 128 Bernoulli(J) draws: standard
  // error sqrt(J (1 - J) / 128) <= 0.044. Check the aggregate error sits at
  // that level, no pair is beyond 4 sigma and there is no bias.
  Rng rng(2);
  const MinHasher h(128, 3, 7);
  double sq = 0, signed_sum = 0;
  for (int t = 0; t < 100; ++t) {
    const Sequence base = random_seq(rng, 40, 200);
    Sequence other = base;
    const std::size_t edits = rng.below(41);
    for (std::size_t e = 0; e < edits; ++e) other[rng.below(40)] = static_cast<int>(200 + rng.below(200));
    const double exact = oracle::jaccard(base, other);
    const double err = MinHasher::estimate(h.signature(base), h.signature(other)) - exact;
    EXPECT_LE(std::abs(err), 4.0 * std::sqrt(exact * (1 - exact) / 128.0) + 1e-12) << t;
    sq += err * err;
    signed_sum += err;
  }
  EXPECT_LE(std::sqrt(sq / 100.0), 0.05);
  EXPECT_LE(std::abs(signed_sum / 100.0), 0.02);
}

TEST(MinHash, DeterministicPerSeed) {
  const Sequence s = {1, 2, 3, 4, 5, 6};
  EXPECT_EQ(MinHasher(64, 3, 1).signature(s), MinHasher(64, 3, 1).signature(s));
  EXPECT_NE(MinHasher(64, 3, 1).signature(s), MinHasher(64, 3, 2).signature(s));
}

TEST(Lsh, FindsIdenticalSignatures) {
  const MinHasher h(128, 3, 0);
  LshIndex index(32, 4);
  const Sequence a = {1, 2, 3, 4, 5, 6, 7}, b = {9, 8, 7, 6, 5, 4, 3};
  index.insert(0, h.signature(a));
  index.insert(1, h.signature(b));
  const auto hits = index.query(h.signature(a));
  ASSERT_FALSE(hits.empty());
  EXPECT_EQ(hits.front(), 0u);
}

TEST(Dedupe, ExactAndPlantedNearDuplicates) {
  Rng rng(3);
  std::vector<AuditItem> items = clean_corpus(rng, 60);
  // Two exact copies and five planted near-duplicates of distinct items.
  items.push_back(items[3]);
  items.push_back(items[7]);
  for (int k = 0; k < 5; ++k) {
    const AuditItem src = items[static_cast<std::size_t>(10 + k)];
    items.push_back(item(src.problem, near_copy(src.solution, 900 + k), random_seq(rng, 8, 500)));
    ASSERT_GT(oracle::jaccard(items.back().prompt_text(), src.prompt_text()), 0.8);
  }
  const DedupeResult d = dedupe(items, AuditThresholds{});
  EXPECT_EQ(d.exact_removed, 2u);
  EXPECT_GE(d.near_removed, 4u);
  EXPECT_EQ(d.kept.size(), items.size() - d.exact_removed - d.near_removed);
  EXPECT_EQ(d.kept.front(), 0u);
}

TEST(Dedupe, CleanCorpusHasNoDuplicates) {
  Rng rng(4);
  const auto items = clean_corpus(rng, 80);
  const DedupeResult d = dedupe(items, AuditThresholds{});
  EXPECT_EQ(d.exact_removed, 0u);
  EXPECT_EQ(d.near_removed, 0u);
}

TEST(AuditCorpus, IdenticalSplitsFlagEverything) {
  Rng rng(5);
  const auto train = clean_corpus(rng, 20);
  const AuditBlock b = audit_corpus(train, train);
  EXPECT_EQ(b.max_train_test_sim_problem, 1.0);
  EXPECT_EQ(b.max_train_test_sim_feedback, 1.0);
  EXPECT_EQ(b.count_over_threshold, train.size());
}

TEST(AuditCorpus, DisjointVocabulariesScoreZero) {
  Rng rng(6);
  std::vector<AuditItem> train, test;
  for (int i = 0; i < 10; ++i) {
    train.push_back(item({i}, random_seq(rng, 20, 100), random_seq(rng, 6, 100)));
    Sequence sol = random_seq(rng, 20, 100), fb = random_seq(rng, 6, 100);
    for (auto& t : sol) t += 1000;
    for (auto& t : fb) t += 1000;
    test.push_back(item({1000 + i}, sol, fb));
  }
  const AuditBlock b = audit_corpus(train, test);
  EXPECT_EQ(b.max_train_test_sim_problem, 0.0);
  EXPECT_EQ(b.max_train_test_sim_feedback, 0.0);
  EXPECT_EQ(b.count_over_threshold, 0u);
}

TEST(AuditCorpus, PlantedLeakageRecall) {
  Rng rng(7);
  const auto train = clean_corpus(rng, 50);
  auto test = clean_corpus(rng, 20);
  for (int k = 0; k < 5; ++k) {
    const auto& src = train[static_cast<std::size_t>(5 * k)];
    test[static_cast<std::size_t>(k)] = item(src.problem, near_copy(src.solution, 900 + k), src.feedback);
  }
  const AuditBlock b = audit_corpus(train, test);
  std::size_t recalled = 0;
  for (std::size_t t : b.flagged_test_items) recalled += t < 5 ? 1 : 0;
  EXPECT_GE(recalled, 4u);
  EXPECT_EQ(b.count_over_threshold, b.flagged_test_items.size());
  // Identical inputs, identical report.
  EXPECT_EQ(audit_corpus(train, test).to_json(), b.to_json());
}

TEST(AuditTable, BothColumns) {
  Rng rng(8);
  const auto train = clean_corpus(rng, 10), test = clean_corpus(rng, 5);
  AuditBlock std_block = audit_corpus(train, test), np_block = audit_corpus(train, test);
  std_block.split_key = "inst.";
  np_block.split_key = "prob. ID";
  const std::vector<AuditColumn> cols = {{"Std.", std_block}, {"New-Problems", np_block}};
  const std::string table = audit_table(cols);
  EXPECT_NE(table.find("| Audit / Split | Std. | New-Problems |"), std::string::npos) << table;
  for (const char* row : {"Split key", "Exact dups rm. (%)", "Near-dups rm. (%)", "Max train-test sim. (problem)",
                          "Max train-test sim. (ref. fb)", "# test items >0.8 (Jaccard)", "Self-BLEU", "Distinct-2"}) {
    EXPECT_NE(table.find(row), std::string::npos) << row;
  }
  const auto j = audit_json(cols);
  EXPECT_TRUE(j.contains("Std.") && j.contains("New-Problems"));
}
