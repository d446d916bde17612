// Synthetic pre/post-disaster scene generator. A scene is a square world in
// local meters holding rectangular buildings with damage labels, rendered
// twice: a 3-band optical epoch pair at fine resolution and a speckled
// 1-band SAR intensity epoch pair at coarse resolution. Post-epoch rasters
// are drawn with a global integer pixel shift so the coregistration stage
// downstream has real work to do. Everything is a pure function of
// (seed, params): ground texture, rubble, and speckle come from named
// counter-based streams, so re-rendering any epoch reproduces it bit for bit.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmg/common.hpp"
#include "dmg/raster.hpp"
#include "dmg/rng.hpp"

namespace dmg {

// Damage values double as label-mask class indices; 0 stays background.
// Severity grows with the value, which is what vote tie-breaking keys on.
enum class Damage : uint8_t { survived = 1, moderated = 2, destroyed = 3 };

inline const char* damage_name(Damage d) {
  switch (d) {
    case Damage::survived: return "Survived";
    case Damage::moderated: return "Moderated";
    default: return "Destroyed";
  }
}

inline Damage damage_from_name(const std::string& s) {
  if (s == "Survived") return Damage::survived;
  if (s == "Moderated") return Damage::moderated;
  if (s == "Destroyed") return Damage::destroyed;
  fail_validation("unknown damage class '" + s + "'");
}

struct Building {
  int id = 0;
  Polygon footprint;  // CCW rectangle, meters
  Damage damage = Damage::survived;
  std::array<double, 3> roof_albedo{0.6, 0.6, 0.6};
  double backscatter_base = 0.75;
};

struct InterpretationPoint {
  Vec2 location;
  Damage label = Damage::survived;
  int building_id = -1;
};

struct SceneParams {
  double extent_m = 750.0;
  int building_count = 300;
  double prior_destroyed = 0.134;
  double prior_moderated = 0.228;
  double prior_survived = 0.638;
  double min_area_m2 = 100.0;
  double max_area_m2 = 200.0;
  double min_gap_m = 2.0;
  double optical_gsd = 0.5;
  double sar_gsd = 5.0;
  int looks = 3;
  double optical_noise = 0.02;
  double ground_albedo = 0.22;
  double ground_backscatter = 0.12;
  double destroyed_sar_factor = 0.4;
  double moderated_sar_factor = 0.8;
  double debris_halo_m = 3.0;
  int max_post_shift_px = 8;      // optical post-epoch shift bound, pixels
  int max_post_shift_sar_px = 2;  // SAR post-epoch shift bound, pixels
  int min_points_per_building = 1;
  int max_points_per_building = 3;
  double label_noise = 0.05;

  void validate() const {
    require(extent_m > 0.0, "scene params: extent must be positive");
    require(building_count >= 0, "scene params: building_count must be non-negative");
    double s = prior_destroyed + prior_moderated + prior_survived;
    require(std::abs(s - 1.0) < 1e-9, "scene params: class priors must sum to 1");
    require(prior_destroyed >= 0.0 && prior_moderated >= 0.0 && prior_survived >= 0.0,
            "scene params: class priors must be non-negative");
    require(min_area_m2 > 0.0 && max_area_m2 >= min_area_m2, "scene params: bad area range");
    require(min_gap_m >= 0.0, "scene params: min_gap must be non-negative");
    require(optical_gsd > 0.0 && sar_gsd > 0.0, "scene params: GSDs must be positive");
    require(looks >= 1, "scene params: looks must be >= 1");
    require(label_noise >= 0.0 && label_noise <= 1.0, "scene params: label_noise in [0,1]");
    require(min_points_per_building >= 1 &&
                max_points_per_building >= min_points_per_building,
            "scene params: bad points-per-building range");
    require(max_post_shift_px >= 0 && max_post_shift_sar_px >= 0,
            "scene params: shift bounds must be non-negative");
  }
};

enum class Epoch { pre, post };

struct Scene {
  uint64_t seed = 0;
  SceneParams params;
  std::vector<Building> buildings;
  std::vector<InterpretationPoint> points;
  int shift_opt_y = 0, shift_opt_x = 0;  // optical post raster offset, pixels
  int shift_sar_y = 0, shift_sar_x = 0;  // SAR post raster offset, pixels
  std::map<std::string, Raster> rasters;

  // Counts indexed by damage value minus 1: [Survived, Moderated, Destroyed].
  std::array<int, 3> class_counts() const {
    std::array<int, 3> n{0, 0, 0};
    for (const auto& b : buildings) n[static_cast<int>(b.damage) - 1]++;
    return n;
  }
};

namespace detail {

// Counter-based world-anchored noise: one uniform per (stream, row, col)
// triple, independent of render order and stable under raster shifts.
inline double grid_noise(uint64_t stream, int64_t r, int64_t c) {
  uint64_t h = mix_seed(mix_seed(stream, static_cast<uint64_t>(r)), static_cast<uint64_t>(c));
  return static_cast<double>(splitmix_step(h) >> 11) * 0x1.0p-53;
}

struct PlacedBox {
  double minx, miny, maxx, maxy;
};

inline double box_gap(const PlacedBox& a, const PlacedBox& b) {
  double dx = std::max({0.0, a.minx - b.maxx, b.minx - a.maxx});
  double dy = std::max({0.0, a.miny - b.maxy, b.miny - a.maxy});
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace detail

// Rejection placement of rotated rectangles with a minimum mutual gap,
// backed by a coarse occupancy grid. The axis-aligned boxes used for the
// gap test are supersets of the rectangles, so the accepted spacing is a
// lower bound on the true polygon spacing.
inline Scene generate_world(uint64_t seed, const SceneParams& params) {
  params.validate();
  Scene scene;
  scene.seed = seed;
  scene.params = params;

  Rng root(seed);
  Rng place = root.fork("place");
  Rng cls = root.fork("class");
  Rng material = root.fork("material");
  Rng shift = root.fork("shift");

  scene.shift_opt_y = static_cast<int>(shift.uniform_int(-params.max_post_shift_px,
                                                         params.max_post_shift_px));
  scene.shift_opt_x = static_cast<int>(shift.uniform_int(-params.max_post_shift_px,
                                                         params.max_post_shift_px));
  scene.shift_sar_y = static_cast<int>(shift.uniform_int(-params.max_post_shift_sar_px,
                                                         params.max_post_shift_sar_px));
  scene.shift_sar_x = static_cast<int>(shift.uniform_int(-params.max_post_shift_sar_px,
                                                         params.max_post_shift_sar_px));

  double cell = 32.0;
  int ncell = std::max(1, static_cast<int>(std::ceil(params.extent_m / cell)));
  std::vector<std::vector<int>> grid(static_cast<size_t>(ncell * ncell));
  std::vector<detail::PlacedBox> boxes;

  auto cells_of = [&](const detail::PlacedBox& b, auto&& fn) {
    int c0 = std::clamp(static_cast<int>(b.minx / cell), 0, ncell - 1);
    int c1 = std::clamp(static_cast<int>(b.maxx / cell), 0, ncell - 1);
    int r0 = std::clamp(static_cast<int>(b.miny / cell), 0, ncell - 1);
    int r1 = std::clamp(static_cast<int>(b.maxy / cell), 0, ncell - 1);
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) fn(grid[static_cast<size_t>(r * ncell + c)]);
  };

  int64_t budget = 200 * static_cast<int64_t>(std::max(1, params.building_count));
  int placed = 0;
  while (placed < params.building_count && budget > 0) {
    --budget;
    double area = place.uniform(params.min_area_m2, params.max_area_m2);
    double ratio = place.uniform(0.6, 1.6667);
    double bw = std::sqrt(area * ratio);
    double bh = area / bw;
    double theta = place.uniform(-0.26, 0.26);
    double half_diag = 0.5 * std::sqrt(bw * bw + bh * bh);
    double margin = half_diag + params.min_gap_m;
    if (2.0 * margin >= params.extent_m) break;
    double cx = place.uniform(margin, params.extent_m - margin);
    double cy = place.uniform(margin, params.extent_m - margin);

    double ct = std::cos(theta), st = std::sin(theta);
    auto corner = [&](double sx, double sy) {
      return Vec2{cx + sx * 0.5 * bw * ct - sy * 0.5 * bh * st,
                  cy + sx * 0.5 * bw * st + sy * 0.5 * bh * ct};
    };
    Polygon rect = {corner(-1, -1), corner(1, -1), corner(1, 1), corner(-1, 1)};

    detail::PlacedBox box{rect[0].x, rect[0].y, rect[0].x, rect[0].y};
    for (const Vec2& p : rect) {
      box.minx = std::min(box.minx, p.x);
      box.miny = std::min(box.miny, p.y);
      box.maxx = std::max(box.maxx, p.x);
      box.maxy = std::max(box.maxy, p.y);
    }
    detail::PlacedBox query{box.minx - params.min_gap_m, box.miny - params.min_gap_m,
                            box.maxx + params.min_gap_m, box.maxy + params.min_gap_m};
    bool clash = false;
    cells_of(query, [&](const std::vector<int>& ids) {
      for (int id : ids) {
        if (!clash && detail::box_gap(box, boxes[static_cast<size_t>(id)]) < params.min_gap_m) {
          clash = true;
        }
      }
    });
    if (clash) continue;

    Building b;
    b.id = placed;
    b.footprint = std::move(rect);
    int pick = cls.pick_weighted({params.prior_destroyed, params.prior_moderated,
                                  params.prior_survived});
    b.damage = pick == 0 ? Damage::destroyed : pick == 1 ? Damage::moderated : Damage::survived;
    for (int ch = 0; ch < 3; ++ch) b.roof_albedo[static_cast<size_t>(ch)] = material.uniform(0.45, 0.85);
    b.backscatter_base = material.uniform(0.6, 0.9);

    int idx = static_cast<int>(boxes.size());
    boxes.push_back(box);
    cells_of(box, [&](std::vector<int>& ids) { ids.push_back(idx); });
    scene.buildings.push_back(std::move(b));
    ++placed;
  }
  require(placed == params.building_count,
          "generate_world: extent too small to place " +
              std::to_string(params.building_count) + " buildings (placed " +
              std::to_string(placed) + ")");
  return scene;
}

namespace detail {

// Index of the building containing (x, y), or -1. Footprints are disjoint
// with a positive gap, so containment is unique; the coarse grid cuts the
// candidate set during rendering.
class BuildingIndex {
public:
  BuildingIndex(const std::vector<Building>& buildings, double extent, double pad)
      : buildings_(buildings), cell_(32.0),
        ncell_(std::max(1, static_cast<int>(std::ceil(extent / 32.0)))),
        grid_(static_cast<size_t>(ncell_ * ncell_)) {
    for (size_t i = 0; i < buildings.size(); ++i) {
      double minx = 1e300, miny = 1e300, maxx = -1e300, maxy = -1e300;
      for (const Vec2& p : buildings[i].footprint) {
        minx = std::min(minx, p.x);
        miny = std::min(miny, p.y);
        maxx = std::max(maxx, p.x);
        maxy = std::max(maxy, p.y);
      }
      int c0 = clamp_cell((minx - pad) / cell_), c1 = clamp_cell((maxx + pad) / cell_);
      int r0 = clamp_cell((miny - pad) / cell_), r1 = clamp_cell((maxy + pad) / cell_);
      for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c)
          grid_[static_cast<size_t>(r * ncell_ + c)].push_back(static_cast<int>(i));
    }
  }

  // Nearest building whose signed distance is <= limit; -1 when none.
  int find(double x, double y, double limit, double* sdist = nullptr) const {
    int rc = clamp_cell(y / cell_), cc = clamp_cell(x / cell_);
    int best = -1;
    double bestd = limit;
    for (int id : grid_[static_cast<size_t>(rc * ncell_ + cc)]) {
      double d = rect_signed_distance(buildings_[static_cast<size_t>(id)].footprint, x, y);
      if (d <= bestd) {
        bestd = d;
        best = id;
      }
    }
    if (sdist) *sdist = bestd;
    return best;
  }

private:
  int clamp_cell(double v) const {
    return std::clamp(static_cast<int>(v), 0, ncell_ - 1);
  }
  const std::vector<Building>& buildings_;
  double cell_;
  int ncell_;
  std::vector<std::vector<int>> grid_;
};

}  // namespace detail

// 3-band optical rendering in [0,1]. Pre paints uniform roofs on textured
// ground; post additionally replaces Destroyed roofs with high-variance
// rubble and rings Moderated footprints with a debris halo. The post raster
// content is offset by the scene's optical shift.
inline std::array<Raster, 3> render_optical(const Scene& scene, Epoch epoch) {
  const SceneParams& p = scene.params;
  int64_t n = static_cast<int64_t>(std::llround(p.extent_m / p.optical_gsd));
  std::array<Raster, 3> bands{Raster(n, n, p.optical_gsd), Raster(n, n, p.optical_gsd),
                              Raster(n, n, p.optical_gsd)};

  uint64_t ground_stream = mix_seed(scene.seed, detail::fnv1a("optical_ground"));
  uint64_t rubble_stream = mix_seed(scene.seed, detail::fnv1a("rubble"));
  uint64_t debris_stream = mix_seed(scene.seed, detail::fnv1a("debris"));
  Rng noise = Rng(scene.seed).fork(epoch == Epoch::pre ? "optical_noise_pre"
                                                       : "optical_noise_post");

  double halo = p.debris_halo_m;
  detail::BuildingIndex index(scene.buildings, p.extent_m, halo + 1.0);
  int sy = epoch == Epoch::post ? scene.shift_opt_y : 0;
  int sx = epoch == Epoch::post ? scene.shift_opt_x : 0;

  for (int64_t r = 0; r < n; ++r) {
    for (int64_t c = 0; c < n; ++c) {
      int64_t wr = r - sy, wc = c - sx;
      double x = (static_cast<double>(wc) + 0.5) * p.optical_gsd;
      double y = (static_cast<double>(wr) + 0.5) * p.optical_gsd;
      double tex = detail::grid_noise(ground_stream, wr, wc);
      double rgb[3];
      for (int ch = 0; ch < 3; ++ch) rgb[ch] = p.ground_albedo + 0.06 * (tex - 0.5);

      double sd = 0.0;
      int hit = index.find(x, y, halo, &sd);
      if (hit >= 0) {
        const Building& b = scene.buildings[static_cast<size_t>(hit)];
        if (sd <= 0.0) {
          if (epoch == Epoch::post && b.damage == Damage::destroyed) {
            double u = detail::grid_noise(rubble_stream, wr, wc);
            for (int ch = 0; ch < 3; ++ch) rgb[ch] = 0.2 + 0.6 * u;
          } else {
            for (int ch = 0; ch < 3; ++ch) rgb[ch] = b.roof_albedo[static_cast<size_t>(ch)];
          }
        } else if (epoch == Epoch::post && b.damage == Damage::moderated && sd <= halo) {
          double u = detail::grid_noise(debris_stream, wr, wc);
          for (int ch = 0; ch < 3; ++ch) rgb[ch] = 0.3 + 0.35 * u;
        }
      }
      for (int ch = 0; ch < 3; ++ch) {
        double val = rgb[ch] + p.optical_noise * noise.normal();
        bands[static_cast<size_t>(ch)].at(r, c) =
            static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  }
  return bands;
}

// 1-band SAR intensity: class/epoch mean backscatter multiplied by
// unit-mean gamma speckle with the configured number of looks. Post-epoch
// damage drops the return by the configured factors; ground is unchanged.
inline Raster render_sar(const Scene& scene, Epoch epoch) {
  const SceneParams& p = scene.params;
  int64_t n = static_cast<int64_t>(std::llround(p.extent_m / p.sar_gsd));
  Raster out(n, n, p.sar_gsd);

  Rng speckle = Rng(scene.seed).fork(epoch == Epoch::pre ? "speckle_pre" : "speckle_post");
  detail::BuildingIndex index(scene.buildings, p.extent_m, 1.0);
  int sy = epoch == Epoch::post ? scene.shift_sar_y : 0;
  int sx = epoch == Epoch::post ? scene.shift_sar_x : 0;

  for (int64_t r = 0; r < n; ++r) {
    for (int64_t c = 0; c < n; ++c) {
      double x = (static_cast<double>(c - sx) + 0.5) * p.sar_gsd;
      double y = (static_cast<double>(r - sy) + 0.5) * p.sar_gsd;
      double base = p.ground_backscatter;
      double sd = 0.0;
      int hit = index.find(x, y, 0.0, &sd);
      if (hit >= 0 && sd <= 0.0) {
        const Building& b = scene.buildings[static_cast<size_t>(hit)];
        base = b.backscatter_base;
        if (epoch == Epoch::post) {
          if (b.damage == Damage::destroyed) base *= p.destroyed_sar_factor;
          if (b.damage == Damage::moderated) base *= p.moderated_sar_factor;
        }
      }
      double mult = speckle.gamma_int(p.looks) / static_cast<double>(p.looks);
      out.at(r, c) = static_cast<float>(base * mult);
    }
  }
  return out;
}

// Samples 1..3 points uniformly inside each footprint and assigns the
// building's class, flipped to a uniformly random other class with
// probability label_noise.
inline std::vector<InterpretationPoint> emit_interpretation_points(const Scene& scene) {
  const SceneParams& p = scene.params;
  Rng rng = Rng(scene.seed).fork("points");
  std::vector<InterpretationPoint> out;
  for (const Building& b : scene.buildings) {
    double minx = 1e300, miny = 1e300, maxx = -1e300, maxy = -1e300;
    for (const Vec2& v : b.footprint) {
      minx = std::min(minx, v.x);
      miny = std::min(miny, v.y);
      maxx = std::max(maxx, v.x);
      maxy = std::max(maxy, v.y);
    }
    int64_t k = rng.uniform_int(p.min_points_per_building, p.max_points_per_building);
    for (int64_t i = 0; i < k; ++i) {
      InterpretationPoint pt;
      pt.building_id = b.id;
      // Rejection sampling with an inset keeps points strictly interior.
      for (int attempt = 0; attempt < 256; ++attempt) {
        double x = rng.uniform(minx, maxx);
        double y = rng.uniform(miny, maxy);
        if (rect_signed_distance(b.footprint, x, y) <= -0.3) {
          pt.location = Vec2{x, y};
          break;
        }
        require(attempt != 255, "emit_interpretation_points: degenerate footprint");
      }
      pt.label = b.damage;
      if (p.label_noise > 0.0 && rng.uniform() < p.label_noise) {
        int true_idx = static_cast<int>(b.damage);
        int other = static_cast<int>(rng.uniform_int(1, 2));
        int flipped = 1 + (true_idx - 1 + other) % 3;
        pt.label = static_cast<Damage>(flipped);
      }
      out.push_back(pt);
    }
  }
  return out;
}

inline const std::array<std::string, 8>& band_names() {
  static const std::array<std::string, 8> names = {
      "optical_pre_r", "optical_pre_g", "optical_pre_b", "optical_post_r",
      "optical_post_g", "optical_post_b", "sar_pre", "sar_post"};
  return names;
}

// Fills scene.rasters with all eight bands and scene.points.
inline void render_all(Scene& scene) {
  auto pre = render_optical(scene, Epoch::pre);
  auto post = render_optical(scene, Epoch::post);
  scene.rasters["optical_pre_r"] = std::move(pre[0]);
  scene.rasters["optical_pre_g"] = std::move(pre[1]);
  scene.rasters["optical_pre_b"] = std::move(pre[2]);
  scene.rasters["optical_post_r"] = std::move(post[0]);
  scene.rasters["optical_post_g"] = std::move(post[1]);
  scene.rasters["optical_post_b"] = std::move(post[2]);
  scene.rasters["sar_pre"] = render_sar(scene, Epoch::pre);
  scene.rasters["sar_post"] = render_sar(scene, Epoch::post);
  scene.points = emit_interpretation_points(scene);
}

inline nlohmann::json scene_params_json(const SceneParams& p) {
  return {{"extent_m", p.extent_m},
          {"building_count", p.building_count},
          {"prior_destroyed", p.prior_destroyed},
          {"prior_moderated", p.prior_moderated},
          {"prior_survived", p.prior_survived},
          {"min_area_m2", p.min_area_m2},
          {"max_area_m2", p.max_area_m2},
          {"min_gap_m", p.min_gap_m},
          {"optical_gsd", p.optical_gsd},
          {"sar_gsd", p.sar_gsd},
          {"looks", p.looks},
          {"optical_noise", p.optical_noise},
          {"ground_albedo", p.ground_albedo},
          {"ground_backscatter", p.ground_backscatter},
          {"destroyed_sar_factor", p.destroyed_sar_factor},
          {"moderated_sar_factor", p.moderated_sar_factor},
          {"debris_halo_m", p.debris_halo_m},
          {"max_post_shift_px", p.max_post_shift_px},
          {"max_post_shift_sar_px", p.max_post_shift_sar_px},
          {"min_points_per_building", p.min_points_per_building},
          {"max_points_per_building", p.max_points_per_building},
          {"label_noise", p.label_noise}};
}

inline SceneParams scene_params_from_json(const nlohmann::json& j) {
  SceneParams p;
  p.extent_m = j.value("extent_m", p.extent_m);
  p.building_count = j.value("building_count", p.building_count);
  p.prior_destroyed = j.value("prior_destroyed", p.prior_destroyed);
  p.prior_moderated = j.value("prior_moderated", p.prior_moderated);
  p.prior_survived = j.value("prior_survived", p.prior_survived);
  p.min_area_m2 = j.value("min_area_m2", p.min_area_m2);
  p.max_area_m2 = j.value("max_area_m2", p.max_area_m2);
  p.min_gap_m = j.value("min_gap_m", p.min_gap_m);
  p.optical_gsd = j.value("optical_gsd", p.optical_gsd);
  p.sar_gsd = j.value("sar_gsd", p.sar_gsd);
  p.looks = j.value("looks", p.looks);
  p.optical_noise = j.value("optical_noise", p.optical_noise);
  p.ground_albedo = j.value("ground_albedo", p.ground_albedo);
  p.ground_backscatter = j.value("ground_backscatter", p.ground_backscatter);
  p.destroyed_sar_factor = j.value("destroyed_sar_factor", p.destroyed_sar_factor);
  p.moderated_sar_factor = j.value("moderated_sar_factor", p.moderated_sar_factor);
  p.debris_halo_m = j.value("debris_halo_m", p.debris_halo_m);
  p.max_post_shift_px = j.value("max_post_shift_px", p.max_post_shift_px);
  p.max_post_shift_sar_px = j.value("max_post_shift_sar_px", p.max_post_shift_sar_px);
  p.min_points_per_building = j.value("min_points_per_building", p.min_points_per_building);
  p.max_points_per_building = j.value("max_points_per_building", p.max_points_per_building);
  p.label_noise = j.value("label_noise", p.label_noise);
  return p;
}

// Scene directory layout: meta.json, one raw float32 file per band,
// buildings.geojson, points.geojson.
inline void write_scene(const Scene& scene, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta;
  meta["format_version"] = 1;
  meta["seed"] = scene.seed;
  meta["params"] = scene_params_json(scene.params);
  meta["post_shift_optical_px"] = {scene.shift_opt_y, scene.shift_opt_x};
  meta["post_shift_sar_px"] = {scene.shift_sar_y, scene.shift_sar_x};
  auto counts = scene.class_counts();
  meta["class_counts"] = {{"Survived", counts[0]},
                          {"Moderated", counts[1]},
                          {"Destroyed", counts[2]}};
  nlohmann::json bands = nlohmann::json::object();
  for (const auto& name : band_names()) {
    auto it = scene.rasters.find(name);
    require(it != scene.rasters.end(), "write_scene: missing band " + name);
    const Raster& r = it->second;
    bands[name] = {{"file", name + ".bin"}, {"h", r.h}, {"w", r.w}, {"gsd", r.gsd}};
    write_band(dir / (name + ".bin"), r);
  }
  meta["bands"] = bands;

  {
    std::ofstream out(dir / "meta.json");
    require(out.good(), "write_scene: cannot write meta.json");
    out << meta.dump(2) << "\n";
  }
  {
    nlohmann::json fc;
    fc["type"] = "FeatureCollection";
    auto& feats = fc["features"] = nlohmann::json::array();
    for (const Building& b : scene.buildings) {
      nlohmann::json ring = nlohmann::json::array();
      for (const Vec2& v : b.footprint) ring.push_back({v.x, v.y});
      ring.push_back({b.footprint[0].x, b.footprint[0].y});
      feats.push_back({{"type", "Feature"},
                       {"geometry", {{"type", "Polygon"}, {"coordinates", {ring}}}},
                       {"properties",
                        {{"id", b.id},
                         {"damage", damage_name(b.damage)},
                         {"roof_albedo", b.roof_albedo},
                         {"backscatter_base", b.backscatter_base}}}});
    }
    std::ofstream out(dir / "buildings.geojson");
    require(out.good(), "write_scene: cannot write buildings.geojson");
    out << fc.dump(2) << "\n";
  }
  {
    nlohmann::json fc;
    fc["type"] = "FeatureCollection";
    auto& feats = fc["features"] = nlohmann::json::array();
    for (const InterpretationPoint& pt : scene.points) {
      feats.push_back({{"type", "Feature"},
                       {"geometry",
                        {{"type", "Point"}, {"coordinates", {pt.location.x, pt.location.y}}}},
                       {"properties",
                        {{"label", damage_name(pt.label)}, {"building_id", pt.building_id}}}});
    }
    std::ofstream out(dir / "points.geojson");
    require(out.good(), "write_scene: cannot write points.geojson");
    out << fc.dump(2) << "\n";
  }
}

inline Scene load_scene(const std::filesystem::path& dir) {
  std::ifstream meta_in(dir / "meta.json");
  if (!meta_in.good()) fail_missing("scene directory " + dir.string() + " has no meta.json");
  nlohmann::json meta = nlohmann::json::parse(meta_in);

  Scene scene;
  scene.seed = meta.at("seed").get<uint64_t>();
  scene.params = scene_params_from_json(meta.at("params"));
  scene.shift_opt_y = meta.at("post_shift_optical_px").at(0).get<int>();
  scene.shift_opt_x = meta.at("post_shift_optical_px").at(1).get<int>();
  scene.shift_sar_y = meta.at("post_shift_sar_px").at(0).get<int>();
  scene.shift_sar_x = meta.at("post_shift_sar_px").at(1).get<int>();

  for (const auto& name : band_names()) {
    const auto& b = meta.at("bands").at(name);
    scene.rasters[name] = read_band(dir / b.at("file").get<std::string>(),
                                    b.at("h").get<int64_t>(), b.at("w").get<int64_t>(),
                                    b.at("gsd").get<double>());
  }

  std::ifstream bld_in(dir / "buildings.geojson");
  if (!bld_in.good()) fail_missing("scene directory " + dir.string() + " has no buildings.geojson");
  nlohmann::json fc = nlohmann::json::parse(bld_in);
  for (const auto& f : fc.at("features")) {
    Building b;
    const auto& props = f.at("properties");
    b.id = props.at("id").get<int>();
    b.damage = damage_from_name(props.at("damage").get<std::string>());
    if (props.contains("roof_albedo")) {
      for (int ch = 0; ch < 3; ++ch)
        b.roof_albedo[static_cast<size_t>(ch)] = props.at("roof_albedo").at(ch).get<double>();
    }
    b.backscatter_base = props.value("backscatter_base", 0.75);
    const auto& ring = f.at("geometry").at("coordinates").at(0);
    // Drop the GeoJSON closing vertex.
    for (size_t i = 0; i + 1 < ring.size(); ++i) {
      b.footprint.push_back(Vec2{ring.at(i).at(0).get<double>(), ring.at(i).at(1).get<double>()});
    }
    require(b.footprint.size() >= 3, "load_scene: building footprint has fewer than 3 vertices");
    scene.buildings.push_back(std::move(b));
  }

  std::ifstream pts_in(dir / "points.geojson");
  if (!pts_in.good()) fail_missing("scene directory " + dir.string() + " has no points.geojson");
  nlohmann::json pc = nlohmann::json::parse(pts_in);
  for (const auto& f : pc.at("features")) {
    InterpretationPoint pt;
    const auto& coords = f.at("geometry").at("coordinates");
    pt.location = Vec2{coords.at(0).get<double>(), coords.at(1).get<double>()};
    pt.label = damage_from_name(f.at("properties").at("label").get<std::string>());
    pt.building_id = f.at("properties").value("building_id", -1);
    scene.points.push_back(pt);
  }
  return scene;
}

}  // namespace dmg
