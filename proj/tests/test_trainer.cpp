#include <gtest/gtest.h>

#include <cmath>

#include "abas/trainer.hpp"

using namespace abas;

namespace {

DomainPair easy_pair(std::uint64_t seed, double rotation = 0.0) {
  PairSpec s;
  s.seed = seed;
  s.dims = 8;
  s.n_source = 300;
  s.n_target = 300;
  s.class_sep = 2.0;
  s.cluster_std = 1.0;
  s.shift.rotation_deg = rotation;
  return make_pair(s);
}

TrialSpec small_spec(const DomainPair& pair, int budget) {
  TrialSpec t;
  t.pair = &pair;
  t.budget = budget;
  t.config.n_fc_layers = 1;
  t.config.fc_h = 16;
  t.config.fc_b = 8;
  t.config.dropout_p = 0.2;
  t.hidden_dim = 32;
  t.feature_dim = 16;
  t.schedule.mu0 = 0.01;
  t.seed = 7;
  return t;
}

double centroid_accuracy(const DomainPair& p) {
  const std::size_t k = p.n_classes, d = p.dims();
  Matrix c(k, d);
  std::vector<double> n(k, 0.0);
  for (std::size_t i = 0; i < p.source_x.rows(); ++i) {
    const auto y = static_cast<std::size_t>(p.source_y[i]);
    n[y] += 1.0;
    for (std::size_t j = 0; j < d; ++j) c(y, j) += p.source_x(i, j);
  }
  const auto& truth = p.hidden_target_labels.reveal();
  std::size_t hit = 0;
  for (std::size_t i = 0; i < p.target_x.rows(); ++i) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t y = 0; y < k; ++y) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = p.target_x(i, j) - c(y, j) / n[y];
        s += diff * diff;
      }
      if (s < best_d) {
        best_d = s;
        best = y;
      }
    }
    hit += static_cast<int>(best) == truth[i];
  }
  return static_cast<double>(hit) / static_cast<double>(p.target_x.rows());
}

}  // namespace

TEST(RunTrial, RejectsBadBudgets) {
  const DomainPair p = easy_pair(1);
  TrialSpec t = small_spec(p, 0);
  EXPECT_THROW(run_trial(t), std::invalid_argument);
  t.budget = 10;
  t.max_budget = 5;
  EXPECT_THROW(run_trial(t), std::invalid_argument);
  t.max_budget = 0;
  t.pair = nullptr;
  EXPECT_THROW(run_trial(t), std::invalid_argument);
}

TEST(RunTrial, DefaultsMatchBaselineBranch) {
  const TrialSpec t;
  EXPECT_EQ(t.config.n_fc_layers, 2);
  EXPECT_EQ(t.config.fc_h, 1024);
  EXPECT_EQ(t.config.fc_b, 512);
  EXPECT_DOUBLE_EQ(t.config.dropout_p, 0.5);
  EXPECT_DOUBLE_EQ(t.config.lambda, 1.0);
  EXPECT_EQ(t.schedule.batch_size, 36u);
  EXPECT_DOUBLE_EQ(t.schedule.momentum, 0.9);
  EXPECT_DOUBLE_EQ(t.schedule.alpha, 10.0);
  EXPECT_DOUBLE_EQ(t.schedule.beta, 0.75);
  EXPECT_DOUBLE_EQ(t.schedule.gamma, 10.0);
}

TEST(RunTrial, SnapshotCountIsCeilOfBudgetOverInterval) {
  const DomainPair p = easy_pair(2);
  for (int every : {7, 10, 25}) {
    TrialSpec t = small_spec(p, 50);
    t.snapshot_every = every;
    const TrialRecord r = run_trial(t);
    ASSERT_TRUE(r.completed()) << r.divergence_reason;
    EXPECT_EQ(r.snapshots.size(), static_cast<std::size_t>((50 + every - 1) / every));
    EXPECT_EQ(r.snapshot_iterations.back(), 50);
    EXPECT_EQ(r.predictions.epochs.size(), r.snapshots.size());
    for (const auto& s : r.snapshots) EXPECT_TRUE(s.pseudo_label_acc.has_value());
  }
}

TEST(RunTrial, DeterministicGivenSeed) {
  const DomainPair p = easy_pair(3);
  TrialSpec t = small_spec(p, 60);
  const TrialRecord a = run_trial(t), b = run_trial(t);
  EXPECT_EQ(a.snapshots, b.snapshots);
  EXPECT_EQ(a.predictions.epochs, b.predictions.epochs);
  EXPECT_EQ(a.final_loss, b.final_loss);
  t.seed = 8;
  EXPECT_FALSE(run_trial(t).snapshots == a.snapshots);
}

TEST(RunTrial, NoAdversaryOnUnshiftedPairMatchesCentroidBaseline) {
  double net_acc = 0.0, base_acc = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const DomainPair p = easy_pair(seed);
    TrialSpec t = small_spec(p, 400);
    t.config.lambda = 0.0;
    t.seed = seed;
    t.evaluate_target = true;
    const TrialRecord r = run_trial(t);
    ASSERT_TRUE(r.completed()) << r.divergence_reason;
    net_acc += r.target_accuracy.back() / 5.0;
    base_acc += centroid_accuracy(p) / 5.0;
  }
  EXPECT_GT(net_acc, base_acc - 0.02) << "network " << net_acc << " baseline " << base_acc;
}

TEST(RunTrial, TargetLabelsDoNotInfluenceTrainingOrMetrics) {
  DomainPair p = easy_pair(4, 30.0);
  TrialSpec t = small_spec(p, 80);
  t.evaluate_target = true;
  const TrialRecord with = run_trial(t);
  ASSERT_FALSE(with.target_accuracy.empty());

  // Scramble the sealed labels: everything label-free must be unchanged.
  std::vector<int> scrambled = p.hidden_target_labels.reveal();
  for (int& y : scrambled) y = (y + 1) % static_cast<int>(p.n_classes);
  p.hidden_target_labels = SealedLabels(scrambled);
  const TrialRecord other = run_trial(t);
  EXPECT_EQ(other.snapshots, with.snapshots);
  EXPECT_EQ(other.predictions.epochs, with.predictions.epochs);
  EXPECT_NE(other.target_accuracy, with.target_accuracy);

  t.evaluate_target = false;
  const std::size_t before = SealedLabels::total_reads();
  const TrialRecord blind = run_trial(t);
  EXPECT_EQ(SealedLabels::total_reads(), before);
  EXPECT_TRUE(blind.target_accuracy.empty());
  EXPECT_EQ(blind.snapshots, with.snapshots);
}

TEST(RunTrial, AttachTargetAccuracyCountsHits) {
  TrialRecord r;
  r.predictions.epochs = {{0, 1, 1, 2}, {0, 1, 2, 2}};
  attach_target_accuracy(r, SealedLabels({0, 1, 2, 2}));
  EXPECT_EQ(r.target_accuracy, (std::vector<double>{0.75, 1.0}));
  EXPECT_THROW(attach_target_accuracy(r, SealedLabels({0, 1})), std::invalid_argument);
}

TEST(RunTrial, ExplodingLearningRateIsReportedAsDiverged) {
  const DomainPair p = easy_pair(5);
  TrialSpec t = small_spec(p, 200);
  t.schedule.mu0 = 1e6;
  t.config.lambda = 5.0;
  const TrialRecord r = run_trial(t);
  EXPECT_FALSE(r.completed());
  EXPECT_FALSE(r.divergence_reason.empty());
  EXPECT_EQ(r.ranking_score(), -std::numeric_limits<double>::infinity());
}

TEST(RunTrial, ChanceLevelSourceAccuracyIsDivergedAtFullBudget) {
  const DomainPair p = easy_pair(6);
  TrialSpec t = small_spec(p, 5);
  t.schedule.mu0 = 1e-12;  // effectively untrained
  t.divergence_margin = 0.95;
  EXPECT_FALSE(run_trial(t).completed());
  t.max_budget = 10;  // partial budgets are never judged on source accuracy
  EXPECT_TRUE(run_trial(t).completed());
}
