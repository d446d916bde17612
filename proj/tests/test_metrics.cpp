// Scoring-path checks: per-class precision/recall/F against closed forms,
// the two mean aggregations, the damage-restricted confusion matrix
// against a brute-force recount, and the report's JSON schema.
#include <gtest/gtest.h>

#include <array>
#include <cstdint>
#include <vector>

#include "dmg/metrics.hpp"
#include "dmg/rng.hpp"

using namespace dmg;

TEST(Aggregation, PublishedMeanValuesReproduce) {
  MeanScores m2 = aggregate_means({0.4137, 0.4714, 0.6178});
  EXPECT_NEAR(m2.arithmetic, 0.5010, 5e-4);
  MeanScores m1 = aggregate_means({0.4173, 0.4567, 0.6143});
  EXPECT_NEAR(m1.arithmetic, 0.4961, 5e-4);
}

TEST(Aggregation, HarmonicMeanAndZeroFlag) {
  MeanScores m = aggregate_means({0.5, 0.5, 0.5});
  EXPECT_DOUBLE_EQ(m.harmonic, 0.5);
  EXPECT_FALSE(m.harmonic_zero_flag);

  MeanScores z = aggregate_means({0.5, 0.0, 0.5});
  EXPECT_DOUBLE_EQ(z.harmonic, 0.0);
  EXPECT_TRUE(z.harmonic_zero_flag);
  EXPECT_NEAR(z.arithmetic, 1.0 / 3.0, 1e-12);

  EXPECT_THROW(aggregate_means({0.5, 1.5, 0.5}), Error);
}

TEST(FScore, MatchesCountingClosedForm) {
  // tp=50, fp=13 (10 from background, 3 from Moderated), fn=20.
  Counts4 c{};
  c[1][1] = 50;
  c[0][1] = 10;
  c[2][1] = 3;
  c[1][0] = 15;
  c[1][2] = 5;
  c[0][0] = 100;

  ClassScore s = fscore(c, 1);
  EXPECT_NEAR(s.precision, 50.0 / 63.0, 1e-12);
  EXPECT_NEAR(s.recall, 50.0 / 70.0, 1e-12);
  EXPECT_NEAR(s.f, 2.0 * 50.0 / (2.0 * 50.0 + 13.0 + 20.0), 1e-12);
  EXPECT_FALSE(s.zero_support);
}

TEST(FScore, ZeroDenominatorsFlagInsteadOfNaN) {
  Counts4 c{};
  c[0][0] = 10;
  c[2][1] = 4;  // predictions for class 1 exist but no true positives
  ClassScore s = fscore(c, 1);
  EXPECT_TRUE(s.zero_support);
  EXPECT_EQ(s.precision, 0.0);
  EXPECT_EQ(s.recall, 0.0);
  EXPECT_EQ(s.f, 0.0);
}

TEST(Accumulator, MatchesBruteForceRecount) {
  Rng rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 64;
    std::vector<uint8_t> truth(n), pred(n), damage(n);
    for (int i = 0; i < n; ++i) {
      truth[i] = static_cast<uint8_t>(rng.uniform_int(0, 3));
      pred[i] = static_cast<uint8_t>(rng.uniform_int(0, 3));
      damage[i] = static_cast<uint8_t>(rng.uniform_int(1, 3));
    }

    MetricsAccumulator acc;
    acc.add(pred.data(), damage.data(), truth.data(), n);

    Counts4 want4{};
    Counts3 want3{};
    int64_t building = 0;
    for (int i = 0; i < n; ++i) {
      want4[truth[i]][pred[i]]++;
      if (truth[i] >= 1) {
        want3[truth[i] - 1][damage[i] - 1]++;
        building++;
      }
    }
    EXPECT_EQ(acc.counts4, want4);
    EXPECT_EQ(acc.counts3, want3);
    EXPECT_EQ(acc.building_pixels(), building);
  }
}

TEST(Accumulator, RejectsOutOfRangeValues) {
  MetricsAccumulator acc;
  uint8_t truth = 5, pred = 0, damage = 1;
  EXPECT_THROW(acc.add(&pred, &damage, &truth, 1), Error);
  truth = 1;
  damage = 0;  // background is not a valid damage argmax
  EXPECT_THROW(acc.add(&pred, &damage, &truth, 1), Error);
}

TEST(Report, NormalizedRowsSumToOne) {
  Rng rng(7);
  MetricsAccumulator acc;
  const int n = 4096;
  std::vector<uint8_t> truth(n), pred(n), damage(n);
  for (int i = 0; i < n; ++i) {
    truth[i] = static_cast<uint8_t>(rng.uniform_int(0, 3));
    pred[i] = static_cast<uint8_t>(rng.uniform_int(0, 3));
    damage[i] = static_cast<uint8_t>(rng.uniform_int(1, 3));
  }
  acc.add(pred.data(), damage.data(), truth.data(), n);

  MetricsReport r = compute_report(acc);
  for (int g = 0; g < 3; ++g) {
    ASSERT_FALSE(r.row_zero_support[g]);
    double sum = 0.0;
    for (int p = 0; p < 3; ++p) sum += r.confusion_normalized[g][p];
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
}

TEST(Report, ZeroSupportRowIsFlaggedNotDivided) {
  MetricsAccumulator acc;
  // Only Survived ground truth appears; the Moderated and Destroyed rows
  // of the restricted matrix stay empty.
  std::vector<uint8_t> truth(16, 1), pred(16, 1), damage(16, 1);
  acc.add(pred.data(), damage.data(), truth.data(), 16);

  MetricsReport r = compute_report(acc);
  EXPECT_FALSE(r.row_zero_support[0]);
  EXPECT_TRUE(r.row_zero_support[1]);
  EXPECT_TRUE(r.row_zero_support[2]);
  EXPECT_DOUBLE_EQ(r.confusion_normalized[0][0], 1.0);
  for (int p = 0; p < 3; ++p) {
    EXPECT_EQ(r.confusion_normalized[1][p], 0.0);
    EXPECT_EQ(r.confusion_normalized[2][p], 0.0);
  }
}

TEST(Report, ConstantPredictorScores) {
  // Truth: 8 background, 8 Survived, 8 Moderated, 8 Destroyed; prediction
  // is Survived everywhere. Survived recall is 1, precision 8/32.
  MetricsAccumulator acc;
  std::vector<uint8_t> truth(32), pred(32, 1), damage(32, 1);
  for (int i = 0; i < 32; ++i) truth[static_cast<size_t>(i)] = static_cast<uint8_t>(i / 8);
  acc.add(pred.data(), damage.data(), truth.data(), 32);

  MetricsReport r = compute_report(acc);
  EXPECT_DOUBLE_EQ(r.scores[0].recall, 1.0);
  EXPECT_DOUBLE_EQ(r.scores[0].precision, 0.25);
  EXPECT_TRUE(r.scores[1].zero_support);
  EXPECT_TRUE(r.scores[2].zero_support);
  EXPECT_TRUE(r.means.harmonic_zero_flag);
  EXPECT_NEAR(r.means.arithmetic, r.scores[0].f / 3.0, 1e-12);
}

TEST(Report, JsonSchemaFields) {
  MetricsAccumulator acc;
  std::vector<uint8_t> truth = {0, 1, 2, 3}, pred = {0, 1, 2, 3}, damage = {1, 1, 2, 3};
  acc.add(pred.data(), damage.data(), truth.data(), 4);
  nlohmann::json j = compute_report(acc).to_json();

  for (const auto& name : damage_class_names()) {
    ASSERT_TRUE(j.at("classes").contains(name));
    for (const char* k : {"precision", "recall", "fscore", "zero_support"})
      EXPECT_TRUE(j.at("classes").at(name).contains(k));
  }
  EXPECT_TRUE(j.contains("mean_arithmetic"));
  EXPECT_TRUE(j.contains("mean_harmonic"));
  EXPECT_TRUE(j.contains("mean_harmonic_zero_flag"));
  EXPECT_EQ(j.at("confusion_order").size(), 3u);
  EXPECT_EQ(j.at("confusion").size(), 3u);
  EXPECT_EQ(j.at("confusion_normalized").size(), 3u);
  EXPECT_EQ(j.at("confusion_rows_zero_support").size(), 3u);
}

TEST(Report, PerfectPredictorIsDiagonal) {
  Rng rng(11);
  MetricsAccumulator acc;
  const int n = 1024;
  std::vector<uint8_t> truth(n), damage(n);
  for (int i = 0; i < n; ++i) {
    truth[i] = static_cast<uint8_t>(rng.uniform_int(0, 3));
    damage[i] = truth[i] >= 1 ? truth[i] : uint8_t{1};
  }
  acc.add(truth.data(), damage.data(), truth.data(), n);

  MetricsReport r = compute_report(acc);
  for (int c = 0; c < 3; ++c) {
    EXPECT_DOUBLE_EQ(r.scores[c].f, 1.0);
    EXPECT_DOUBLE_EQ(r.confusion_normalized[c][c], 1.0);
  }
  EXPECT_DOUBLE_EQ(r.means.arithmetic, 1.0);
  EXPECT_DOUBLE_EQ(r.means.harmonic, 1.0);
}

TEST(Report, EmptyAccumulatorRejected) {
  MetricsAccumulator acc;
  EXPECT_THROW(compute_report(acc), Error);
}
