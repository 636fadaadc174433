#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "persa/errors.hpp"
#include "persa/metrics.hpp"
#include "persa/rng.hpp"
#include "persa/task.hpp"

using namespace persa;
using namespace persa::metrics;

namespace {

std::vector<Sequence> random_corpus(Rng& rng, std::size_t n, int vocab, std::size_t lo, std::size_t hi) {
  std::vector<Sequence> out(n);
  for (auto& s : out) {
    s.resize(lo + rng.below(hi - lo + 1));
    for (auto& t : s) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
  }
  return out;
}

const task::Vocabulary& vocab() {
  static const task::Vocabulary v = task::SyntheticSpec{}.vocabulary();
  return v;
}

Sequence enc(std::string_view s) { return vocab().encode(s); }

}  // namespace

TEST(Sac, ConstantAndMixedPosteriors) {
  const std::vector<Sequence> r = {{1}, {2}, {3}, {4}};
  EXPECT_DOUBLE_EQ(sac(r, [](std::span<const int>) { return 1.0; }), 1.0);
  EXPECT_DOUBLE_EQ(sac(r, [](std::span<const int> s) { return s[0] % 2 == 0 ? 1.0 : 0.0; }), 0.5);
  EXPECT_THROW(sac(std::vector<Sequence>{}, [](std::span<const int>) { return 1.0; }), ContractError);
}

TEST(Sac, TrainedClassifierOnProfessorCorpus) {
  Rng rng(2);
  std::vector<Sequence> seqs;
  std::vector<int> labels;
  for (int i = 0; i < 600; ++i) {
    const bool buggy = rng.below(2) == 1;
    const int bug = buggy ? 1 + static_cast<int>(rng.below(6)) : 0;
    const bool prof = i % 2 == 0;
    seqs.push_back(task::strip_eos(vocab(), prof ? task::professor_feedback(vocab(), buggy, bug)
                                                 : task::generic_feedback(vocab(), buggy, bug, rng)));
    labels.push_back(prof ? 1 : 0);
  }
  StyleClassifier clf(vocab().size());
  clf.fit(std::span(seqs).first(300), std::span(labels).first(300));
  clf.calibrate(std::span(seqs).subspan(300, 150), std::span(labels).subspan(300, 150));
  std::vector<Sequence> professor;
  for (std::size_t i = 450; i < 600; ++i) {
    if (labels[i] == 1) professor.push_back(seqs[i]);
  }
  EXPECT_GE(sac(professor, clf), 0.95);
  const auto rep = evaluate_classifier(clf, std::span(seqs).subspan(450), std::span(labels).subspan(450));
  EXPECT_GE(rep.accuracy, 0.98);
  EXPECT_LE(rep.ece, 0.05);
  const auto& map = clf.calibration_map();
  for (std::size_t i = 1; i < map.size(); ++i) EXPECT_GE(map[i], map[i - 1]);
  for (const auto& s : seqs) {
    EXPECT_GE(clf.posterior(s), 0.0);
    EXPECT_LE(clf.posterior(s), 1.0);
  }
}

TEST(Reliability, EceAndMacroF1ByHand) {
  // Bin [0.8, 0.9): confidences 0.8, 0.8 with one positive -> |0.8 - 0.5|.
  // Bin [0.2, 0.3): confidence 0.2, positive -> |0.2 - 1|.
  const std::vector<double> p = {0.8, 0.8, 0.2};
  const std::vector<int> y = {1, 0, 1};
  EXPECT_NEAR(expected_calibration_error(p, y, 10), (2.0 / 3.0) * 0.3 + (1.0 / 3.0) * 0.8, 1e-12);
  // Class 1: tp 1, fp 1, fn 1 -> F1 0.5. Class 0: tp 0, fp 1, fn 1 -> 0.
  const std::vector<int> pred = {1, 0, 1, 0}, gold = {1, 1, 0, 0};
  EXPECT_NEAR(macro_f1(pred, gold), (0.5 + 0.5) / 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(macro_f1(std::vector<int>{1, 1}, std::vector<int>{1, 1}), 1.0);
}

TEST(Politeness, LexiconAndRange) {
  const PolitenessScorer p = PolitenessScorer::for_vocabulary(vocab());
  EXPECT_NEAR(p.score(enc("PRAISE")), 1.0 / (1.0 + std::exp(-(1.0 - 1.0))), 1e-12);
  EXPECT_NEAR(p.score(enc("obviously just")), 1.0 / (1.0 + std::exp(2.5)), 1e-12);
  Rng rng(3);
  for (const auto& s : random_corpus(rng, 200, vocab().size(), 0, 20)) {
    EXPECT_GE(p.score(s), 0.0);
    EXPECT_LE(p.score(s), 1.0);
  }
  EXPECT_EQ(p.to_json(vocab())["weights"]["PRAISE"], 1.0);
}

TEST(Apc, Goldens) {
  const std::vector<Sequence> a = {{1}, {2}}, b = {{3}, {4}};
  EXPECT_DOUBLE_EQ(apc(a, a, PolitenessScorer::for_vocabulary(vocab())), 1.0);
  EXPECT_DOUBLE_EQ(apc(a, b, [](std::span<const int> s) { return s[0] <= 2 ? 0.0 : 1.0; }), 0.0);
  const std::vector<Sequence> x = {{1}}, y = {{2}};
  EXPECT_DOUBLE_EQ(apc(x, y, [](std::span<const int> s) { return s[0] == 1 ? 0.3 : 0.8; }), 0.5);
  EXPECT_THROW(apc(a, x, [](std::span<const int>) { return 0.0; }), DimensionError);
}

TEST(Bleu, Identity) {
  Rng rng(4);
  const auto corpus = random_corpus(rng, 20, 30, 1, 12);
  EXPECT_NEAR(bleu4(corpus, corpus), 1.0, 1e-15);
  const std::vector<Sequence> one = {{1, 2, 3, 4, 5}};
  EXPECT_DOUBLE_EQ(bleu4(one, one), 1.0);
}

TEST(Bleu, NoOverlapSmoothedGolden) {
  const std::vector<Sequence> c = {{1, 2, 3, 4}}, r = {{5, 6, 7, 8}};
  const double expect = std::pow((1.0 / 5) * (1.0 / 4) * (1.0 / 3) * (1.0 / 2), 0.25);
  EXPECT_NEAR(bleu4(c, r), expect, 1e-12);
  EXPECT_NEAR(bleu4(c, r), oracle::bleu4(c, r), 1e-12);
}

TEST(Bleu, AgreesWithLiteralOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto c = random_corpus(rng, 1 + rng.below(4), 6, 1, 10);
    const auto r = random_corpus(rng, c.size(), 6, 1, 10);
    EXPECT_NEAR(bleu4(c, r), oracle::bleu4(c, r), 1e-12) << trial;
  }
}

TEST(Bleu, BrevityAndEmptyCandidates) {
  const std::vector<Sequence> c = {{1, 2}}, r = {{1, 2, 3, 4}};
  const BleuResult b = corpus_bleu(c, std::vector<std::vector<Sequence>>{{r[0]}});
  EXPECT_NEAR(b.brevity_penalty, std::exp(1.0 - 2.0), 1e-15);
  const std::vector<Sequence> empty = {{}};
  const BleuResult e = corpus_bleu(empty, std::vector<std::vector<Sequence>>{{r[0]}});
  EXPECT_EQ(e.score, 0.0);
  EXPECT_EQ(e.empty_candidates, 1u);
  // Closest reference length, shorter on a tie.
  const BleuResult m = corpus_bleu(std::vector<Sequence>{{1, 2, 3}},
                                   std::vector<std::vector<Sequence>>{{{9, 9}, {9, 9, 9, 9}}});
  EXPECT_EQ(m.reference_length, 2u);
}

TEST(Ca, GoldensAndRecount) {
  const std::vector<Sequence> r = {enc("PRAISE INCORRECT"), enc("CORRECT VERIFY"), enc("VERIFY"),
                                   enc("CORRECT INCORRECT")};
  const std::vector<bool> z = {true, false, false, true};
  const CaResult res = ca(vocab(), r, z);
  EXPECT_DOUBLE_EQ(res.accuracy, 0.5);
  EXPECT_EQ(res.extraction_failures, 2u);
  const CaResult all = ca(vocab(), std::span(r).first(2), std::vector<bool>{true, false});
  EXPECT_DOUBLE_EQ(all.accuracy, 1.0);
  const std::vector<Sequence> none = {enc("PRAISE"), enc("VERIFY"), enc("FIX b1")};
  const CaResult zero = ca(vocab(), none, std::vector<bool>{true, false, true});
  EXPECT_DOUBLE_EQ(zero.accuracy, 0.0);
  EXPECT_EQ(zero.extraction_failures, 3u);

  Rng rng(6);
  const auto corpus = random_corpus(rng, 300, vocab().size(), 0, 6);
  std::vector<bool> labels;
  for (std::size_t i = 0; i < corpus.size(); ++i) labels.push_back(rng.below(2) == 1);
  const int corr = vocab().id(task::kCorrect), inc = vocab().id(task::kIncorrect);
  double right = 0;
  std::size_t fails = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    int nc = 0, ni = 0;
    for (int t : corpus[i]) {
      nc += t == corr;
      ni += t == inc;
    }
    if (nc + ni != 1) {
      ++fails;
      continue;
    }
    right += (ni == 1) == labels[i] ? 1 : 0;
  }
  const CaResult got = ca(vocab(), corpus, labels);
  EXPECT_EQ(got.accuracy, right / 300.0);
  EXPECT_EQ(got.extraction_failures, fails);
}

TEST(Pwr, GoldensAndAntisymmetry) {
  EXPECT_DOUBLE_EQ(pwr(std::vector<double>{2, 3}, std::vector<double>{1, 4}), 0.5);
  EXPECT_DOUBLE_EQ(pwr(std::vector<double>{2, 5}, std::vector<double>{1, 4}), 1.0);
  EXPECT_DOUBLE_EQ(pwr(std::vector<double>{1, 4}, std::vector<double>{1, 4}), 0.5);
  EXPECT_THROW(pwr(std::vector<double>{1}, std::vector<double>{1, 2}), DimensionError);
  Rng rng(7);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a(7), b(7);
    for (std::size_t i = 0; i < 7; ++i) {
      a[i] = static_cast<double>(rng.below(3));
      b[i] = static_cast<double>(rng.below(3));
    }
    EXPECT_EQ(pwr(a, b) + pwr(b, a), 1.0);
  }
}

TEST(Diversity, SelfBleuAndDistinct) {
  const std::vector<Sequence> same = {{1, 2, 3, 4}, {1, 2, 3, 4}, {1, 2, 3, 4}};
  EXPECT_NEAR(*self_bleu(same), 1.0, 1e-15);
  EXPECT_FALSE(self_bleu(std::vector<Sequence>{{1, 2}}).has_value());
  EXPECT_NEAR(distinct_n(std::vector<Sequence>{{1, 2, 1, 2}}), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(distinct_n(std::vector<Sequence>{{1}}), 0.0);
}

TEST(Report, RangesAndFormats) {
  MetricsReport r;
  r.sac = 0.9625;
  r.apc = 0.5;
  r.bleu4 = 0.25;
  r.ca = 1.0;
  EXPECT_EQ(MetricsReport::csv_header(), "SAC,APC,BLEU-4,CA,PWR");
  EXPECT_EQ(r.csv_row(), "0.962500,0.500000,0.250000,1.000000,");
  EXPECT_NE(r.markdown().find("| 96.2 |"), std::string::npos) << r.markdown();
  EXPECT_NE(r.markdown().find("--"), std::string::npos);
  r.pwr = 0.901;
  EXPECT_NE(r.markdown().find("90.1"), std::string::npos);
  EXPECT_EQ(r.to_json()["pwr"], 0.901);

  // All headline metrics stay in [0, 1] on arbitrary inputs.
  Rng rng(8);
  const auto a = random_corpus(rng, 30, vocab().size(), 0, 10);
  const auto b = random_corpus(rng, 30, vocab().size(), 1, 10);
  const PolitenessScorer p = PolitenessScorer::for_vocabulary(vocab());
  for (double v : {bleu4(a, b), apc(a, b, p), ca(vocab(), a, std::vector<bool>(30, true)).accuracy}) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}
