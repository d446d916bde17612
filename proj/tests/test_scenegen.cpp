// Synthetic scene checks: placement determinism and spacing against a
// segment-distance oracle, class priors over a Monte-Carlo batch of
// worlds, interpretation-point containment and label-noise rates, optical
// damage signatures, SAR speckle statistics, and scene IO round-trips.
#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dmg/scenegen.hpp"

using namespace dmg;

namespace {

// Small dense world that renders quickly: roughly the default building
// density on a 240 m square.
SceneParams small_params() {
  SceneParams p;
  p.extent_m = 240.0;
  p.building_count = 25;
  return p;
}

// Balanced priors so every damage class shows up even in small worlds.
SceneParams balanced_params(double extent, int count) {
  SceneParams p;
  p.extent_m = extent;
  p.building_count = count;
  p.prior_destroyed = 0.3;
  p.prior_moderated = 0.3;
  p.prior_survived = 0.4;
  return p;
}

double point_segment_distance(const Vec2& p, const Vec2& a, const Vec2& b) {
  double vx = b.x - a.x, vy = b.y - a.y;
  double t = ((p.x - a.x) * vx + (p.y - a.y) * vy) / (vx * vx + vy * vy);
  t = std::clamp(t, 0.0, 1.0);
  double dx = p.x - (a.x + t * vx), dy = p.y - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

double cross(const Vec2& o, const Vec2& a, const Vec2& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

bool segments_intersect(const Vec2& a1, const Vec2& a2, const Vec2& b1, const Vec2& b2) {
  double d1 = cross(a1, a2, b1), d2 = cross(a1, a2, b2);
  double d3 = cross(b1, b2, a1), d4 = cross(b1, b2, a2);
  return ((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0));
}

double segment_segment_distance(const Vec2& a1, const Vec2& a2, const Vec2& b1,
                                const Vec2& b2) {
  if (segments_intersect(a1, a2, b1, b2)) return 0.0;
  return std::min({point_segment_distance(a1, b1, b2), point_segment_distance(a2, b1, b2),
                   point_segment_distance(b1, a1, a2), point_segment_distance(b2, a1, a2)});
}

// True clearance between two convex rings: zero when they overlap, else
// the smallest edge-to-edge distance.
double polygon_clearance(const Polygon& a, const Polygon& b) {
  for (const Vec2& v : a)
    if (point_in_polygon(b, v.x, v.y)) return 0.0;
  for (const Vec2& v : b)
    if (point_in_polygon(a, v.x, v.y)) return 0.0;
  double best = 1e300;
  size_t na = a.size(), nb = b.size();
  for (size_t i = 0; i < na; ++i)
    for (size_t j = 0; j < nb; ++j)
      best = std::min(best, segment_segment_distance(a[i], a[(i + 1) % na], b[j],
                                                     b[(j + 1) % nb]));
  return best;
}

bool rasters_equal(const Raster& a, const Raster& b) {
  return a.h == b.h && a.w == b.w && a.gsd == b.gsd && a.v == b.v;
}

// Pre/post optical statistics over building-interior pixels of one damage
// class, sampling the same world point in both epochs. The texture
// variance is computed per footprint and averaged so between-building
// albedo differences do not inflate it.
struct ChangeStats {
  double mad = 0.0;
  double post_var = 0.0;  // mean within-footprint variance
  int64_t count = 0;
};

ChangeStats optical_change(const Scene& scene, Damage cls) {
  const Raster& pre = scene.rasters.at("optical_pre_r");
  const Raster& post = scene.rasters.at("optical_post_r");
  double sum = 0.0, var_sum = 0.0;
  int64_t n = 0, footprints = 0;
  for (const Building& b : scene.buildings) {
    if (b.damage != cls) continue;
    double psum = 0.0, psq = 0.0;
    int64_t bn = 0;
    for (int64_t r = 0; r < pre.h; ++r) {
      for (int64_t c = 0; c < pre.w; ++c) {
        double x = (static_cast<double>(c) + 0.5) * pre.gsd;
        double y = (static_cast<double>(r) + 0.5) * pre.gsd;
        if (rect_signed_distance(b.footprint, x, y) > -0.5) continue;
        int64_t pr = r + scene.shift_opt_y, pc = c + scene.shift_opt_x;
        if (pr < 0 || pr >= post.h || pc < 0 || pc >= post.w) continue;
        double pv = post.at(pr, pc);
        sum += std::abs(static_cast<double>(pre.at(r, c)) - pv);
        psum += pv;
        psq += pv * pv;
        ++bn;
      }
    }
    if (bn >= 30) {
      double m = psum / static_cast<double>(bn);
      var_sum += psq / static_cast<double>(bn) - m * m;
      ++footprints;
    }
    n += bn;
  }
  ChangeStats s;
  s.count = n;
  if (n > 0) s.mad = sum / static_cast<double>(n);
  if (footprints > 0) s.post_var = var_sum / static_cast<double>(footprints);
  return s;
}

// Summed post/pre SAR intensity ratio over interior pixels of one class,
// matching world points across the post shift.
double sar_ratio(const Scene& scene, Damage cls, int64_t* pixels = nullptr) {
  const Raster& pre = scene.rasters.at("sar_pre");
  const Raster& post = scene.rasters.at("sar_post");
  double pre_sum = 0.0, post_sum = 0.0;
  int64_t n = 0;
  for (const Building& b : scene.buildings) {
    if (b.damage != cls) continue;
    for (int64_t r = 0; r < pre.h; ++r) {
      for (int64_t c = 0; c < pre.w; ++c) {
        double x = (static_cast<double>(c) + 0.5) * pre.gsd;
        double y = (static_cast<double>(r) + 0.5) * pre.gsd;
        if (rect_signed_distance(b.footprint, x, y) > 0.0) continue;
        int64_t pr = r + scene.shift_sar_y, pc = c + scene.shift_sar_x;
        if (pr < 0 || pr >= post.h || pc < 0 || pc >= post.w) continue;
        pre_sum += pre.at(r, c);
        post_sum += post.at(pr, pc);
        ++n;
      }
    }
  }
  if (pixels) *pixels = n;
  return pre_sum > 0.0 ? post_sum / pre_sum : 0.0;
}

}  // namespace

TEST(Placement, DeterministicForSameSeedAndDivergentAcrossSeeds) {
  SceneParams p = small_params();
  Scene a = generate_world(11, p);
  Scene b = generate_world(11, p);
  ASSERT_EQ(a.buildings.size(), b.buildings.size());
  for (size_t i = 0; i < a.buildings.size(); ++i) {
    const Building& ba = a.buildings[i];
    const Building& bb = b.buildings[i];
    EXPECT_EQ(ba.id, bb.id);
    EXPECT_EQ(ba.damage, bb.damage);
    EXPECT_EQ(ba.roof_albedo, bb.roof_albedo);
    EXPECT_EQ(ba.backscatter_base, bb.backscatter_base);
    ASSERT_EQ(ba.footprint.size(), bb.footprint.size());
    for (size_t v = 0; v < ba.footprint.size(); ++v) {
      EXPECT_EQ(ba.footprint[v].x, bb.footprint[v].x);
      EXPECT_EQ(ba.footprint[v].y, bb.footprint[v].y);
    }
  }
  EXPECT_EQ(a.shift_opt_y, b.shift_opt_y);
  EXPECT_EQ(a.shift_opt_x, b.shift_opt_x);
  EXPECT_EQ(a.shift_sar_y, b.shift_sar_y);
  EXPECT_EQ(a.shift_sar_x, b.shift_sar_x);

  Scene c = generate_world(12, p);
  bool differs = false;
  for (size_t i = 0; i < std::min(a.buildings.size(), c.buildings.size()) && !differs; ++i) {
    differs = a.buildings[i].footprint[0].x != c.buildings[i].footprint[0].x;
  }
  EXPECT_TRUE(differs);
}

TEST(Placement, FootprintsAreCcwRectanglesWithinAreaRange) {
  Scene scene = generate_world(3, small_params());
  ASSERT_EQ(scene.buildings.size(), 25u);
  for (const Building& b : scene.buildings) {
    ASSERT_EQ(b.footprint.size(), 4u);
    double area = polygon_area(b.footprint);
    EXPECT_GT(area, 0.0);
    EXPECT_GE(area, scene.params.min_area_m2 - 1e-6);
    EXPECT_LE(area, scene.params.max_area_m2 + 1e-6);
    for (const Vec2& v : b.footprint) {
      EXPECT_GE(v.x, 0.0);
      EXPECT_GE(v.y, 0.0);
      EXPECT_LE(v.x, scene.params.extent_m);
      EXPECT_LE(v.y, scene.params.extent_m);
    }
  }
}

TEST(Placement, PairwiseClearanceMeetsMinimumGap) {
  SceneParams p;
  Scene scene = generate_world(5, p);
  ASSERT_EQ(scene.buildings.size(), 300u);
  double worst = 1e300;
  for (size_t i = 0; i < scene.buildings.size(); ++i) {
    for (size_t j = i + 1; j < scene.buildings.size(); ++j) {
      worst = std::min(worst, polygon_clearance(scene.buildings[i].footprint,
                                                scene.buildings[j].footprint));
    }
  }
  EXPECT_GE(worst, p.min_gap_m - 1e-9);
}

TEST(Placement, ClassPriorsReproduceOverManyWorlds) {
  SceneParams p;
  int64_t total = 0;
  std::array<int64_t, 3> counts{0, 0, 0};
  for (uint64_t seed = 1; seed <= 35; ++seed) {
    Scene scene = generate_world(seed, p);
    auto c = scene.class_counts();
    for (int k = 0; k < 3; ++k) counts[static_cast<size_t>(k)] += c[static_cast<size_t>(k)];
    total += static_cast<int64_t>(scene.buildings.size());
  }
  ASSERT_GE(total, 10000);
  double survived = static_cast<double>(counts[0]) / static_cast<double>(total);
  double moderated = static_cast<double>(counts[1]) / static_cast<double>(total);
  double destroyed = static_cast<double>(counts[2]) / static_cast<double>(total);
  EXPECT_NEAR(survived, p.prior_survived, 0.02);
  EXPECT_NEAR(moderated, p.prior_moderated, 0.02);
  EXPECT_NEAR(destroyed, p.prior_destroyed, 0.02);
}

TEST(Placement, ImpossibleLayoutsAndBadParamsAreRejected) {
  SceneParams cramped;
  cramped.extent_m = 60.0;
  cramped.building_count = 500;
  EXPECT_THROW(generate_world(1, cramped), Error);

  SceneParams bad_priors;
  bad_priors.prior_survived = 0.9;  // sum now exceeds 1
  EXPECT_THROW(generate_world(1, bad_priors), Error);

  SceneParams bad_area;
  bad_area.min_area_m2 = 300.0;  // below max_area_m2
  EXPECT_THROW(generate_world(1, bad_area), Error);
}

TEST(Points, LieStrictlyInsideTheirBuildingWithCountsInRange) {
  Scene scene = generate_world(21, balanced_params(300.0, 40));
  scene.points = emit_interpretation_points(scene);
  ASSERT_FALSE(scene.points.empty());
  std::map<int, int> per_building;
  for (const InterpretationPoint& pt : scene.points) {
    ASSERT_GE(pt.building_id, 0);
    ASSERT_LT(pt.building_id, static_cast<int>(scene.buildings.size()));
    const Building& b = scene.buildings[static_cast<size_t>(pt.building_id)];
    EXPECT_TRUE(point_in_polygon(b.footprint, pt.location.x, pt.location.y));
    EXPECT_LE(rect_signed_distance(b.footprint, pt.location.x, pt.location.y), -0.29);
    per_building[pt.building_id]++;
  }
  EXPECT_EQ(per_building.size(), scene.buildings.size());
  for (const auto& [id, n] : per_building) {
    EXPECT_GE(n, scene.params.min_points_per_building) << "building " << id;
    EXPECT_LE(n, scene.params.max_points_per_building) << "building " << id;
  }
}

TEST(Points, LabelNoiseFlipsTheConfiguredFraction) {
  SceneParams clean;
  clean.extent_m = 300.0;
  clean.building_count = 40;
  clean.label_noise = 0.0;
  Scene quiet = generate_world(9, clean);
  for (const InterpretationPoint& pt : emit_interpretation_points(quiet)) {
    EXPECT_EQ(pt.label, quiet.buildings[static_cast<size_t>(pt.building_id)].damage);
  }

  SceneParams noisy;  // default 5% label noise
  int64_t total = 0, flipped = 0;
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    Scene scene = generate_world(seed, noisy);
    for (const InterpretationPoint& pt : emit_interpretation_points(scene)) {
      ++total;
      if (pt.label != scene.buildings[static_cast<size_t>(pt.building_id)].damage) ++flipped;
    }
  }
  ASSERT_GE(total, 4000);
  double rate = static_cast<double>(flipped) / static_cast<double>(total);
  EXPECT_NEAR(rate, noisy.label_noise, 0.015);
}

TEST(Scene, ClassCountsMatchManualRecount) {
  Scene scene = generate_world(17, balanced_params(300.0, 40));
  std::array<int, 3> manual{0, 0, 0};
  for (const Building& b : scene.buildings) {
    if (b.damage == Damage::survived) manual[0]++;
    if (b.damage == Damage::moderated) manual[1]++;
    if (b.damage == Damage::destroyed) manual[2]++;
  }
  EXPECT_EQ(scene.class_counts(), manual);
  EXPECT_EQ(manual[0] + manual[1] + manual[2], 40);
}

TEST(Scene, PostShiftsStayWithinConfiguredBounds) {
  SceneParams p;
  p.extent_m = 100.0;
  p.building_count = 0;
  bool any_nonzero = false;
  for (uint64_t seed = 1; seed <= 50; ++seed) {
    Scene scene = generate_world(seed, p);
    EXPECT_LE(std::abs(scene.shift_opt_y), p.max_post_shift_px);
    EXPECT_LE(std::abs(scene.shift_opt_x), p.max_post_shift_px);
    EXPECT_LE(std::abs(scene.shift_sar_y), p.max_post_shift_sar_px);
    EXPECT_LE(std::abs(scene.shift_sar_x), p.max_post_shift_sar_px);
    any_nonzero = any_nonzero || scene.shift_opt_y != 0 || scene.shift_opt_x != 0;
  }
  EXPECT_TRUE(any_nonzero);
}

TEST(Rendering, BandTableDimensionsFollowExtentAndGsd) {
  Scene scene = generate_world(7, small_params());
  render_all(scene);
  int64_t n_opt = static_cast<int64_t>(std::llround(240.0 / scene.params.optical_gsd));
  int64_t n_sar = static_cast<int64_t>(std::llround(240.0 / scene.params.sar_gsd));
  for (const std::string& name : band_names()) {
    ASSERT_TRUE(scene.rasters.count(name)) << name;
    const Raster& r = scene.rasters.at(name);
    bool sar = name.rfind("sar", 0) == 0;
    EXPECT_EQ(r.h, sar ? n_sar : n_opt) << name;
    EXPECT_EQ(r.w, sar ? n_sar : n_opt) << name;
    EXPECT_DOUBLE_EQ(r.gsd, sar ? scene.params.sar_gsd : scene.params.optical_gsd) << name;
  }
  EXPECT_EQ(scene.rasters.size(), band_names().size());
}

TEST(Rendering, RasterBytesAreSeedDeterministic) {
  Scene a = generate_world(13, small_params());
  Scene b = generate_world(13, small_params());
  render_all(a);
  render_all(b);
  for (const std::string& name : band_names()) {
    EXPECT_TRUE(rasters_equal(a.rasters.at(name), b.rasters.at(name))) << name;
  }
  ASSERT_EQ(a.points.size(), b.points.size());
  for (size_t i = 0; i < a.points.size(); ++i) {
    EXPECT_EQ(a.points[i].location.x, b.points[i].location.x);
    EXPECT_EQ(a.points[i].label, b.points[i].label);
  }

  Scene c = generate_world(14, small_params());
  render_all(c);
  EXPECT_FALSE(rasters_equal(a.rasters.at("sar_pre"), c.rasters.at("sar_pre")));
}

TEST(Rendering, OpticalValuesStayInUnitInterval) {
  Scene scene = generate_world(19, balanced_params(240.0, 25));
  render_all(scene);
  for (const std::string& name : band_names()) {
    if (name.rfind("optical", 0) != 0) continue;
    const Raster& r = scene.rasters.at(name);
    float lo = *std::min_element(r.v.begin(), r.v.end());
    float hi = *std::max_element(r.v.begin(), r.v.end());
    EXPECT_GE(lo, 0.0f) << name;
    EXPECT_LE(hi, 1.0f) << name;
  }
}

TEST(Rendering, PostEqualsShiftedPreWhenNothingIsDamagedAndNoiseIsOff) {
  SceneParams p;
  p.extent_m = 240.0;
  p.building_count = 25;
  p.prior_destroyed = 0.0;
  p.prior_moderated = 0.0;
  p.prior_survived = 1.0;
  p.optical_noise = 0.0;
  Scene scene = generate_world(23, p);
  render_all(scene);
  ASSERT_TRUE(scene.shift_opt_y != 0 || scene.shift_opt_x != 0);
  const Raster& pre = scene.rasters.at("optical_pre_g");
  const Raster& post = scene.rasters.at("optical_post_g");
  int64_t checked = 0;
  for (int64_t r = 0; r < pre.h; ++r) {
    int64_t pr = r + scene.shift_opt_y;
    if (pr < 0 || pr >= post.h) continue;
    for (int64_t c = 0; c < pre.w; ++c) {
      int64_t pc = c + scene.shift_opt_x;
      if (pc < 0 || pc >= post.w) continue;
      ASSERT_EQ(pre.at(r, c), post.at(pr, pc)) << "pixel " << r << "," << c;
      ++checked;
    }
  }
  EXPECT_GT(checked, 100000);
}

TEST(Rendering, DestroyedRoofsChangeWhileSurvivedOnesBarelyDo) {
  Scene scene = generate_world(29, balanced_params(300.0, 40));
  render_all(scene);
  ChangeStats survived = optical_change(scene, Damage::survived);
  ChangeStats destroyed = optical_change(scene, Damage::destroyed);
  ASSERT_GT(survived.count, 2000);
  ASSERT_GT(destroyed.count, 2000);
  EXPECT_LT(survived.mad, 0.06);
  EXPECT_GT(destroyed.mad, 3.0 * survived.mad);
}

TEST(Rendering, RubbleTextureVarianceDwarfsIntactRoofVariance) {
  Scene scene = generate_world(29, balanced_params(300.0, 40));
  render_all(scene);
  ChangeStats survived = optical_change(scene, Damage::survived);
  ChangeStats destroyed = optical_change(scene, Damage::destroyed);
  ASSERT_GT(survived.count, 2000);
  ASSERT_GT(destroyed.count, 2000);
  EXPECT_GE(destroyed.post_var, 5.0 * std::max(survived.post_var, 1e-6));
}

TEST(Sar, GroundSpeckleMatchesConfiguredLooks) {
  SceneParams p;
  p.extent_m = 500.0;
  p.building_count = 0;
  Scene scene = generate_world(31, p);
  Raster ground = render_sar(scene, Epoch::pre);
  ASSERT_GE(ground.numel(), 10000);
  double mean = ground.mean();
  double sq = 0.0;
  for (float v : ground.v) sq += static_cast<double>(v) * v;
  double var = sq / static_cast<double>(ground.numel()) - mean * mean;
  double cov = std::sqrt(var) / mean;
  EXPECT_NEAR(mean, p.ground_backscatter, 0.02 * p.ground_backscatter);
  EXPECT_NEAR(cov, 1.0 / std::sqrt(static_cast<double>(p.looks)), 0.03);
}

TEST(Sar, DamageDimsThePostReturnByTheConfiguredFactors) {
  SceneParams p = balanced_params(400.0, 60);
  p.sar_gsd = 2.0;  // finer grid gives enough interior pixels per class
  Scene scene = generate_world(37, p);
  render_all(scene);
  int64_t ns = 0, nm = 0, nd = 0;
  double survived = sar_ratio(scene, Damage::survived, &ns);
  double moderated = sar_ratio(scene, Damage::moderated, &nm);
  double destroyed = sar_ratio(scene, Damage::destroyed, &nd);
  ASSERT_GT(ns, 400);
  ASSERT_GT(nm, 400);
  ASSERT_GT(nd, 400);
  EXPECT_NEAR(survived, 1.0, 0.07);
  EXPECT_NEAR(moderated, p.moderated_sar_factor, 0.08);
  EXPECT_NEAR(destroyed, p.destroyed_sar_factor, 0.06);
  EXPECT_LT(destroyed, moderated);
  EXPECT_LT(moderated, survived);
}

TEST(SceneIo, RoundTripPreservesWorldAndRasterBytes) {
  Scene scene = generate_world(41, small_params());
  render_all(scene);
  std::filesystem::path dir =
      std::filesystem::temp_directory_path() / "scenegen_roundtrip_scene";
  std::filesystem::remove_all(dir);
  write_scene(scene, dir);
  Scene loaded = load_scene(dir);

  EXPECT_EQ(loaded.seed, scene.seed);
  EXPECT_EQ(scene_params_json(loaded.params), scene_params_json(scene.params));
  EXPECT_EQ(loaded.shift_opt_y, scene.shift_opt_y);
  EXPECT_EQ(loaded.shift_opt_x, scene.shift_opt_x);
  EXPECT_EQ(loaded.shift_sar_y, scene.shift_sar_y);
  EXPECT_EQ(loaded.shift_sar_x, scene.shift_sar_x);

  ASSERT_EQ(loaded.buildings.size(), scene.buildings.size());
  for (size_t i = 0; i < scene.buildings.size(); ++i) {
    const Building& a = scene.buildings[i];
    const Building& b = loaded.buildings[i];
    EXPECT_EQ(a.id, b.id);
    EXPECT_EQ(a.damage, b.damage);
    EXPECT_EQ(a.roof_albedo, b.roof_albedo);
    EXPECT_EQ(a.backscatter_base, b.backscatter_base);
    ASSERT_EQ(b.footprint.size(), 4u);
    for (size_t v = 0; v < 4; ++v) {
      EXPECT_EQ(a.footprint[v].x, b.footprint[v].x);
      EXPECT_EQ(a.footprint[v].y, b.footprint[v].y);
    }
  }
  EXPECT_EQ(loaded.class_counts(), scene.class_counts());

  ASSERT_EQ(loaded.points.size(), scene.points.size());
  for (size_t i = 0; i < scene.points.size(); ++i) {
    EXPECT_EQ(loaded.points[i].location.x, scene.points[i].location.x);
    EXPECT_EQ(loaded.points[i].location.y, scene.points[i].location.y);
    EXPECT_EQ(loaded.points[i].label, scene.points[i].label);
    EXPECT_EQ(loaded.points[i].building_id, scene.points[i].building_id);
  }

  for (const std::string& name : band_names()) {
    EXPECT_TRUE(rasters_equal(loaded.rasters.at(name), scene.rasters.at(name))) << name;
  }
  std::filesystem::remove_all(dir);
}

TEST(SceneIo, MissingDirectoryIsReportedAsMissingArtifact) {
  try {
    load_scene(std::filesystem::temp_directory_path() / "scenegen_no_such_scene");
    FAIL() << "expected load_scene to throw";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::missing_artifact);
  }
}
