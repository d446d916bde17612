// Evaluation accounting for 4-class damage segmentation. Two views of the
// same predictions coexist: per-class precision/recall/F over all pixels
// with background as the negative class, and a 3x3 damage confusion matrix
// restricted to pixels whose ground truth is a building class, built from
// the argmax over the damage channels only (a background prediction has no
// column there). Matrix indices 0..2 are classes 1..3: Survived,
// Moderated, Destroyed.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmg/common.hpp"

namespace dmg {

using Counts4 = std::array<std::array<int64_t, 4>, 4>;  // [ground truth][prediction]
using Counts3 = std::array<std::array<int64_t, 3>, 3>;

inline const std::array<std::string, 3>& damage_class_names() {
  static const std::array<std::string, 3> names = {"Survived", "Moderated", "Destroyed"};
  return names;
}

struct ClassScore {
  double precision = 0.0, recall = 0.0, f = 0.0;
  bool zero_support = false;
};

// Precision, recall, and their harmonic mean for one class of the full
// 4-class count matrix. Zero denominators produce 0 with the flag set
// rather than NaN.
inline ClassScore fscore(const Counts4& counts, int cls) {
  require(cls >= 0 && cls < 4, "fscore: class index out of range");
  int64_t tp = counts[static_cast<size_t>(cls)][static_cast<size_t>(cls)];
  int64_t fp = 0, fn = 0;
  for (int g = 0; g < 4; ++g) {
    if (g != cls) fp += counts[static_cast<size_t>(g)][static_cast<size_t>(cls)];
  }
  for (int p = 0; p < 4; ++p) {
    if (p != cls) fn += counts[static_cast<size_t>(cls)][static_cast<size_t>(p)];
  }
  ClassScore s;
  if (tp == 0) {
    s.zero_support = true;
    return s;
  }
  s.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  s.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  s.f = 2.0 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

struct MeanScores {
  double arithmetic = 0.0;
  double harmonic = 0.0;
  bool harmonic_zero_flag = false;
};

// Both aggregations of the three per-class F values: the arithmetic mean
// used in tabular reports and the harmonic mean used for validation
// monitoring. Any zero value collapses the harmonic mean to 0 with a flag.
inline MeanScores aggregate_means(const std::array<double, 3>& f) {
  for (double v : f) require(v >= 0.0 && v <= 1.0, "aggregate_means: F values must be in [0,1]");
  MeanScores m;
  m.arithmetic = (f[0] + f[1] + f[2]) / 3.0;
  if (f[0] <= 0.0 || f[1] <= 0.0 || f[2] <= 0.0) {
    m.harmonic_zero_flag = true;
  } else {
    m.harmonic = 3.0 / (1.0 / f[0] + 1.0 / f[1] + 1.0 / f[2]);
  }
  return m;
}

// Streaming count accumulation over prediction/label pairs. pred_full is
// the 4-class argmax, pred_damage the argmax over the three damage
// channels (values 1..3); the latter feeds the restricted matrix.
struct MetricsAccumulator {
  Counts4 counts4{};
  Counts3 counts3{};

  void add(const uint8_t* pred_full, const uint8_t* pred_damage, const uint8_t* truth,
           int64_t n) {
    for (int64_t i = 0; i < n; ++i) {
      uint8_t g = truth[i], p = pred_full[i];
      require(g < 4 && p < 4, "metrics: class value out of range");
      counts4[g][p]++;
      if (g >= 1) {
        uint8_t d = pred_damage[i];
        require(d >= 1 && d < 4, "metrics: damage argmax out of range");
        counts3[g - 1][d - 1]++;
      }
    }
  }

  int64_t building_pixels() const {
    int64_t n = 0;
    for (const auto& row : counts3)
      for (int64_t v : row) n += v;
    return n;
  }
};

struct MetricsReport {
  std::array<ClassScore, 3> scores;  // Survived, Moderated, Destroyed
  MeanScores means;
  Counts3 confusion{};
  std::array<std::array<double, 3>, 3> confusion_normalized{};
  std::array<bool, 3> row_zero_support{};
  Counts4 counts4{};

  nlohmann::json to_json() const {
    nlohmann::json j;
    auto& cls = j["classes"] = nlohmann::json::object();
    for (int i = 0; i < 3; ++i) {
      const ClassScore& s = scores[static_cast<size_t>(i)];
      cls[damage_class_names()[static_cast<size_t>(i)]] = {{"precision", s.precision},
                                                           {"recall", s.recall},
                                                           {"fscore", s.f},
                                                           {"zero_support", s.zero_support}};
    }
    j["mean_arithmetic"] = means.arithmetic;
    j["mean_harmonic"] = means.harmonic;
    j["mean_harmonic_zero_flag"] = means.harmonic_zero_flag;
    j["confusion_order"] = damage_class_names();
    j["confusion"] = confusion;
    j["confusion_normalized"] = confusion_normalized;
    j["confusion_rows_zero_support"] = row_zero_support;
    return j;
  }
};

inline MetricsReport compute_report(const MetricsAccumulator& acc) {
  require(acc.building_pixels() > 0, "metrics: no building-labeled pixels to evaluate");
  MetricsReport r;
  r.counts4 = acc.counts4;
  r.confusion = acc.counts3;
  std::array<double, 3> f{};
  for (int c = 0; c < 3; ++c) {
    r.scores[static_cast<size_t>(c)] = fscore(acc.counts4, c + 1);
    f[static_cast<size_t>(c)] = r.scores[static_cast<size_t>(c)].f;
  }
  r.means = aggregate_means(f);
  for (int g = 0; g < 3; ++g) {
    int64_t total = 0;
    for (int p = 0; p < 3; ++p) total += acc.counts3[static_cast<size_t>(g)][static_cast<size_t>(p)];
    if (total == 0) {
      r.row_zero_support[static_cast<size_t>(g)] = true;
      continue;
    }
    for (int p = 0; p < 3; ++p) {
      r.confusion_normalized[static_cast<size_t>(g)][static_cast<size_t>(p)] =
          static_cast<double>(acc.counts3[static_cast<size_t>(g)][static_cast<size_t>(p)]) /
          static_cast<double>(total);
    }
  }
  return r;
}

}  // namespace dmg
