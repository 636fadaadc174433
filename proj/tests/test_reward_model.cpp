#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "persa/errors.hpp"
#include "persa/grad_check.hpp"
#include "persa/hash.hpp"
#include "persa/reward_model.hpp"
#include "persa/task.hpp"

using namespace persa;
using ad::Tensor;

namespace {

ModelConfig small(int vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.n_layers = 2;
  c.max_seq_len = 32;
  c.seed = 4;
  return c;
}

std::vector<PreferencePair> to_pairs(const std::vector<task::LabeledPreference>& prefs) {
  std::vector<PreferencePair> out;
  for (const auto& p : prefs) out.push_back({p.example.prompt, p.chosen, p.rejected});
  return out;
}

void set_head(RewardModel& rm, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& x : rm.head().mutable_data()) x = rng.normal();
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

const PreferencePair kPair{{1, 2, 3}, {4, 5}, {6, 7, 8}};

}  // namespace

TEST(Reward, ZeroHeadGivesZero) {
  const RewardModel rm(small(12));
  EXPECT_EQ(rm.reward(std::vector<int>{1, 2}, std::vector<int>{3}), 0.0);
  EXPECT_EQ(rm.reward(std::vector<int>{5}, std::vector<int>{9, 9, 9}), 0.0);
}

TEST(Reward, DeterministicAndOrderIndependent) {
  RewardModel rm(small(12));
  set_head(rm, 1);
  const std::vector<int> x = {1, 2, 3}, a = {4}, b = {5, 6};
  const double ra = rm.reward(x, a), rb = rm.reward(x, b);
  std::mt19937 unrelated(123);
  (void)unrelated();
  EXPECT_EQ(rm.reward(x, b), rb);
  EXPECT_EQ(rm.reward(x, a), ra);
}

TEST(Reward, LengthError) {
  const RewardModel rm(small(12));
  EXPECT_THROW(rm.reward(std::vector<int>(20, 1), std::vector<int>(13, 1)), LengthError);
}

TEST(BradleyTerry, EqualRewardsGiveLn2) {
  const RewardModel rm(small(12));
  EXPECT_NEAR(bt_loss(rm, kPair).item(), std::log(2.0), 1e-15);
}

TEST(BradleyTerry, LargeMarginLoss) {
  // -log sigma(20), then the same formula against the model's own margin.
  EXPECT_NEAR(-std::log(sigmoid(20.0)), 2.06e-9, 1e-11);
  RewardModel rm(small(12));
  set_head(rm, 2);
  const double margin = rm.reward(kPair.prompt, kPair.chosen) - rm.reward(kPair.prompt, kPair.rejected);
  EXPECT_NEAR(bt_loss(rm, kPair).item(), -std::log(sigmoid(margin)), 1e-12);
}

TEST(BradleyTerry, ShiftInvariantUnderBias) {
  RewardModel rm(small(12));
  set_head(rm, 3);
  const double before = bt_loss(rm, kPair).item();
  rm.bias().mutable_data()[0] += 5.0;
  EXPECT_EQ(bt_loss(rm, kPair).item(), before);
}

TEST(BradleyTerry, SwapProbabilitiesSumToOne) {
  RewardModel rm(small(12));
  set_head(rm, 4);
  const PreferencePair swapped{kPair.prompt, kPair.rejected, kPair.chosen};
  const double p = std::exp(-bt_loss(rm, kPair).item());
  const double q = std::exp(-bt_loss(rm, swapped).item());
  EXPECT_NEAR(p + q, 1.0, 1e-12);
}

TEST(BradleyTerry, HeadGradientMatchesFiniteDifferences) {
  RewardModel rm(small(12));
  set_head(rm, 5);
  auto f = [&](const Tensor&) { return bt_loss(rm, kPair); };
  const auto r = ad::grad_check(f, rm.head(), 1e-4);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(PreferenceAccuracy, ZeroHeadIsAllTies) {
  const RewardModel rm(small(12));
  const std::vector<PreferencePair> pairs = {kPair, {{2}, {3}, {4}}};
  EXPECT_DOUBLE_EQ(preference_accuracy(rm, pairs), 0.5);
}

TEST(PreferenceAccuracy, MatchesRecount) {
  RewardModel rm(small(12));
  set_head(rm, 6);
  Rng rng(7);
  std::vector<PreferencePair> pairs;
  for (int i = 0; i < 40; ++i) {
    auto tok = [&] { return static_cast<int>(rng.below(12)); };
    pairs.push_back({{tok(), tok()}, {tok(), tok()}, {tok()}});
  }
  double wins = 0;
  for (const auto& p : pairs) {
    const double a = rm.reward(p.prompt, p.chosen), b = rm.reward(p.prompt, p.rejected);
    wins += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
  }
  EXPECT_NEAR(preference_accuracy(rm, pairs), wins / 40.0, 1e-12);
}

class RmTraining : public ::testing::Test {
 protected:
  void SetUp() override {
    spec.seed = 0;
    vocab = spec.vocabulary().size();
    train = to_pairs(task::gen_preferences(spec, 160, 1));
    val = to_pairs(task::gen_preferences(spec, 60, 2));
    sched.epochs = 10;
    sched.lr = 1e-3;
    sched.batch_size = 8;
    sched.seed = 3;
  }
  task::SyntheticSpec spec;
  int vocab = 0;
  std::vector<PreferencePair> train, val;
  RmSchedule sched;
};

TEST_F(RmTraining, SeparatesStylePairs) {
  RewardModel rm(small(vocab));
  const RmResult r = train_rm(rm, train, val, sched);
  EXPECT_GE(r.best_accuracy, 0.95);
  EXPECT_NEAR(preference_accuracy(rm, val), r.best_accuracy, 1e-12);
  EXPECT_GE(preference_accuracy(rm, train), r.best_accuracy - 0.05);
}

TEST_F(RmTraining, HalfFlippedLabelsStayNearChance) {
  // Flip exactly half of each split, chosen by a seeded permutation.
  auto flip_half = [](std::vector<PreferencePair>& pairs, std::uint64_t seed) {
    std::vector<std::size_t> idx(pairs.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    rng.shuffle(std::span(idx));
    for (std::size_t i = 0; i < idx.size() / 2; ++i) std::swap(pairs[idx[i]].chosen, pairs[idx[i]].rejected);
  };
  flip_half(train, 11);
  flip_half(val, 12);
  RewardModel rm(small(vocab));
  sched.patience = 0;
  train_rm(rm, train, val, sched);
  // Judge on a fresh held-out set, also half flipped.
  auto test = to_pairs(task::gen_preferences(spec, 200, 3));
  flip_half(test, 13);
  const double acc = preference_accuracy(rm, test);
  EXPECT_GE(acc, 0.40);
  EXPECT_LE(acc, 0.60);
}

TEST_F(RmTraining, Errors) {
  RewardModel rm(small(vocab));
  EXPECT_THROW(train_rm(rm, std::span(train).first(1), val, sched), ContractError);
  EXPECT_THROW(train_rm(rm, train, {}, sched), ContractError);
  RmSchedule bad = sched;
  bad.lr = 1e6;
  bad.clip_norm = 0.0;
  EXPECT_ANY_THROW(train_rm(rm, train, val, bad));
}

TEST(RmCheckpoint, RoundTrip) {
  RewardModel rm(small(12));
  set_head(rm, 8);
  rm.bias().mutable_data()[0] = 0.25;
  const auto path = (std::filesystem::temp_directory_path() / "persa_rm_rt.ckpt").string();
  to_checkpoint(rm).save(path);
  const RewardModel back = reward_model_from_checkpoint(Checkpoint::load(path));
  EXPECT_EQ(back.reward(kPair.prompt, kPair.chosen), rm.reward(kPair.prompt, kPair.chosen));
  EXPECT_EQ(content_hash(back.head()), content_hash(rm.head()));
  std::filesystem::remove(path);
}

TEST(RmCopy, IsDeepAndIndependentOfPolicy) {
  PolicyModel policy(small(12));
  RewardModel rm(policy);
  rm.backbone().weight("head").mutable_data()[0] += 1.0;
  EXPECT_NE(rm.backbone().weight("head")[0], policy.weight("head")[0]);
  RewardModel copy = rm;
  copy.head().mutable_data()[0] = 3.0;
  EXPECT_EQ(rm.head()[0], 0.0);
}
