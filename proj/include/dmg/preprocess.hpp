// Sensor-style preprocessing between raw scenes and training tiles:
// integer coregistration of the post epoch onto the pre epoch, SAR
// multilooking and adaptive speckle filtering, percentile standardization
// to 8 bits, interpretation-point voting and label rasterization, tiling
// with a built-up-fraction filter, and the test/train/val split manifest.
// Every stage is deterministic, so rerunning a preparation on unchanged
// scenes reproduces the tile store byte for byte.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmg/common.hpp"
#include "dmg/raster.hpp"
#include "dmg/rng.hpp"
#include "dmg/scenegen.hpp"

namespace dmg {

// ---------------------------------------------------------------- coregistration

struct CoregResult {
  int dy = 0, dx = 0;   // apply_shift(secondary, dy, dx) aligns it to the primary
  double ncc = 0.0;     // peak normalized cross-correlation
  bool low_correlation = false;
};

// out[r][c] = in[r+dy][c+dx]; samples falling outside the source are filled
// with the source mean so downstream statistics stay unbiased at the edges.
inline Raster apply_shift(const Raster& in, int dy, int dx) {
  Raster out(in.h, in.w, in.gsd);
  float fill = static_cast<float>(in.mean());
  for (int64_t r = 0; r < in.h; ++r) {
    int64_t sr = r + dy;
    for (int64_t c = 0; c < in.w; ++c) {
      int64_t sc = c + dx;
      out.at(r, c) = (sr >= 0 && sr < in.h && sc >= 0 && sc < in.w) ? in.at(sr, sc) : fill;
    }
  }
  return out;
}

// Exhaustive integer-shift search maximizing zero-mean normalized cross-
// correlation of a central primary template against the shifted secondary.
// Ties keep the first maximum in (dy, dx) scan order, so results are
// reproducible. A constant template has no correlation structure and is
// rejected.
inline CoregResult coregister_shift(const Raster& primary, const Raster& secondary,
                                    int max_shift = 16, double low_corr_threshold = 0.25) {
  require(max_shift >= 0, "coregister: max_shift must be non-negative");
  require(primary.h == secondary.h && primary.w == secondary.w,
          "coregister: raster dimensions differ");
  int64_t m = max_shift;
  require(primary.h > 2 * m + 4 && primary.w > 2 * m + 4,
          "coregister: raster too small for a +-" + std::to_string(max_shift) +
              " pixel search");

  int64_t th = std::min<int64_t>(primary.h - 2 * m, 256);
  int64_t tw = std::min<int64_t>(primary.w - 2 * m, 256);
  int64_t r0 = (primary.h - th) / 2;
  int64_t c0 = (primary.w - tw) / 2;
  int64_t tn = th * tw;

  double pmean = 0.0;
  for (int64_t r = 0; r < th; ++r)
    for (int64_t c = 0; c < tw; ++c) pmean += primary.at(r0 + r, c0 + c);
  pmean /= static_cast<double>(tn);
  double pvar = 0.0;
  for (int64_t r = 0; r < th; ++r)
    for (int64_t c = 0; c < tw; ++c) {
      double d = primary.at(r0 + r, c0 + c) - pmean;
      pvar += d * d;
    }
  if (pvar <= 0.0) fail_validation("coregister: primary raster is flat in the template window");

  CoregResult best;
  double best_score = -2.0;
  for (int dy = -max_shift; dy <= max_shift; ++dy) {
    for (int dx = -max_shift; dx <= max_shift; ++dx) {
      double smean = 0.0;
      for (int64_t r = 0; r < th; ++r)
        for (int64_t c = 0; c < tw; ++c) smean += secondary.at(r0 + r + dy, c0 + c + dx);
      smean /= static_cast<double>(tn);
      double cross = 0.0, svar = 0.0;
      for (int64_t r = 0; r < th; ++r) {
        for (int64_t c = 0; c < tw; ++c) {
          double a = primary.at(r0 + r, c0 + c) - pmean;
          double b = secondary.at(r0 + r + dy, c0 + c + dx) - smean;
          cross += a * b;
          svar += b * b;
        }
      }
      if (svar <= 0.0) continue;
      double score = cross / std::sqrt(pvar * svar);
      if (score > best_score) {
        best_score = score;
        best.dy = dy;
        best.dx = dx;
      }
    }
  }
  require(best_score > -2.0, "coregister: secondary raster is flat everywhere in the search");
  best.ncc = best_score;
  best.low_correlation = best_score < low_corr_threshold;
  return best;
}

// ---------------------------------------------------------------- speckle filtering

// Adaptive speckle filter over a 3x3 window with symmetric boundary
// padding. Windows at or below the speckle coefficient of variation are
// replaced by their mean, point targets above the heterogeneity ceiling
// pass through untouched, and windows in between blend mean toward the
// observation with an exponential damping weight, so smoothing fades as
// structure appears.
inline Raster lee_filter_enhanced(const Raster& x, int looks, double k = 1.0) {
  require(looks >= 1, "lee filter: looks must be >= 1");
  for (float v : x.v) {
    if (v < 0.0f) fail_validation("lee filter: negative intensity input");
  }
  double cu = 1.0 / std::sqrt(static_cast<double>(looks));
  double cmax = std::sqrt(1.0 + 2.0 / static_cast<double>(looks));

  Raster out(x.h, x.w, x.gsd);
  auto mirror = [](int64_t i, int64_t n) { return i < 0 ? -i - 1 : (i >= n ? 2 * n - i - 1 : i); };
  for (int64_t r = 0; r < x.h; ++r) {
    for (int64_t c = 0; c < x.w; ++c) {
      double win[9];
      int idx = 0;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc)
          win[idx++] = x.at(mirror(r + dr, x.h), mirror(c + dc, x.w));
      double mu = 0.0;
      for (double v : win) mu += v;
      mu /= 9.0;
      if (mu <= 0.0) {
        out.at(r, c) = 0.0f;
        continue;
      }
      double var = 0.0;
      for (double v : win) var += (v - mu) * (v - mu);
      var /= 9.0;
      double ci = std::sqrt(var) / mu;
      double center = x.at(r, c);
      double result;
      if (ci <= cu) {
        result = mu;
      } else if (ci >= cmax) {
        result = center;
      } else {
        double w = std::exp(-k * (ci - cu) / (cmax - ci));
        result = w * mu + (1.0 - w) * center;
      }
      out.at(r, c) = static_cast<float>(result);
    }
  }
  return out;
}

// Non-overlapping box average; rows and columns beyond the last full box
// are truncated, which the output dimensions make visible.
inline Raster multilook(const Raster& x, int factor) {
  require(factor >= 1, "multilook: factor must be >= 1");
  if (factor == 1) return x;
  int64_t oh = x.h / factor, ow = x.w / factor;
  require(oh >= 1 && ow >= 1, "multilook: factor exceeds raster size");
  Raster out(oh, ow, x.gsd * factor);
  double inv = 1.0 / static_cast<double>(factor * factor);
  for (int64_t r = 0; r < oh; ++r) {
    for (int64_t c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (int64_t dr = 0; dr < factor; ++dr)
        for (int64_t dc = 0; dc < factor; ++dc) acc += x.at(r * factor + dr, c * factor + dc);
      out.at(r, c) = static_cast<float>(acc * inv);
    }
  }
  return out;
}

// ---------------------------------------------------------------- standardization

struct ByteBand {
  int64_t h = 0, w = 0;
  std::vector<uint8_t> v;
  double lo = 0.0, hi = 0.0;  // the percentile bounds that defined the mapping
  bool degenerate = false;
};

namespace detail {
inline double percentile(std::vector<float>& sorted_scratch, double q) {
  std::sort(sorted_scratch.begin(), sorted_scratch.end());
  double pos = q / 100.0 * static_cast<double>(sorted_scratch.size() - 1);
  int64_t i = static_cast<int64_t>(pos);
  double frac = pos - static_cast<double>(i);
  double a = sorted_scratch[static_cast<size_t>(i)];
  double b = sorted_scratch[static_cast<size_t>(std::min<int64_t>(
      i + 1, static_cast<int64_t>(sorted_scratch.size()) - 1))];
  return a + (b - a) * frac;
}
}  // namespace detail

// Linear map of [lo, hi] onto [0, 255] with clipping and half-up rounding.
inline ByteBand standardize_with_bounds(const Raster& x, double lo, double hi) {
  ByteBand out;
  out.h = x.h;
  out.w = x.w;
  out.lo = lo;
  out.hi = hi;
  out.v.resize(static_cast<size_t>(x.numel()));
  if (hi <= lo) {
    out.degenerate = true;
    std::fill(out.v.begin(), out.v.end(), uint8_t(0));
    return out;
  }
  double scale = 255.0 / (hi - lo);
  for (int64_t i = 0; i < x.numel(); ++i) {
    double y = (static_cast<double>(x.v[static_cast<size_t>(i)]) - lo) * scale;
    y = std::clamp(y, 0.0, 255.0);
    out.v[static_cast<size_t>(i)] = static_cast<uint8_t>(std::floor(y + 0.5));
  }
  return out;
}

// Bounds from the 2nd and 98th percentiles of the band itself. The bounds
// are recorded so the identical mapping can be replayed later.
inline ByteBand standardize_8bit(const Raster& x) {
  require(x.numel() > 0, "standardize: empty raster");
  std::vector<float> scratch = x.v;
  double lo = detail::percentile(scratch, 2.0);
  double hi = detail::percentile(scratch, 98.0);
  return standardize_with_bounds(x, lo, hi);
}

// ---------------------------------------------------------------- labels

// Majority vote of interpretation-point labels per building; ties resolve
// toward the more severe class, and buildings without any point keep their
// polygon damage attribute. Points are matched to footprints geometrically
// (containment first, then nearest within 2 m); unmatched points are
// counted and skipped.
inline std::vector<Damage> vote_building_labels(const std::vector<Building>& buildings,
                                                const std::vector<InterpretationPoint>& points,
                                                int* unmatched = nullptr) {
  double extent = 0.0;
  for (const Building& b : buildings)
    for (const Vec2& v : b.footprint) extent = std::max({extent, v.x, v.y});
  detail::BuildingIndex index(buildings, std::max(extent, 1.0), 2.0);

  std::vector<std::array<int, 3>> votes(buildings.size(), {0, 0, 0});
  int missed = 0;
  for (const InterpretationPoint& pt : points) {
    int hit = index.find(pt.location.x, pt.location.y, 2.0);
    if (hit < 0) {
      ++missed;
      continue;
    }
    votes[static_cast<size_t>(hit)][static_cast<int>(pt.label) - 1]++;
  }
  if (unmatched) *unmatched = missed;

  std::vector<Damage> labels(buildings.size());
  for (size_t i = 0; i < buildings.size(); ++i) {
    const auto& v = votes[i];
    int total = v[0] + v[1] + v[2];
    if (total == 0) {
      labels[i] = buildings[i].damage;
      continue;
    }
    int best = 0;
    for (int cls = 1; cls < 3; ++cls) {
      if (v[cls] >= v[best]) best = cls;  // >= walks toward higher severity on ties
    }
    labels[i] = static_cast<Damage>(best + 1);
  }
  return labels;
}

// Paints each footprint's voted class onto a (h, w) grid at the given
// resolution, testing pixel centers for containment. Background stays 0.
inline std::vector<uint8_t> rasterize_labels(const std::vector<Building>& buildings,
                                             const std::vector<InterpretationPoint>& points,
                                             int64_t h, int64_t w, double gsd,
                                             int* unmatched = nullptr) {
  std::vector<Damage> cls = vote_building_labels(buildings, points, unmatched);
  std::vector<uint8_t> out(static_cast<size_t>(h * w), 0);
  for (size_t i = 0; i < buildings.size(); ++i) {
    const Polygon& poly = buildings[i].footprint;
    double minx = 1e300, miny = 1e300, maxx = -1e300, maxy = -1e300;
    for (const Vec2& v : poly) {
      minx = std::min(minx, v.x);
      miny = std::min(miny, v.y);
      maxx = std::max(maxx, v.x);
      maxy = std::max(maxy, v.y);
    }
    int64_t rlo = std::max<int64_t>(0, static_cast<int64_t>(std::floor(miny / gsd)));
    int64_t rhi = std::min<int64_t>(h - 1, static_cast<int64_t>(std::ceil(maxy / gsd)));
    int64_t clo = std::max<int64_t>(0, static_cast<int64_t>(std::floor(minx / gsd)));
    int64_t chi = std::min<int64_t>(w - 1, static_cast<int64_t>(std::ceil(maxx / gsd)));
    uint8_t value = static_cast<uint8_t>(cls[i]);
    for (int64_t r = rlo; r <= rhi; ++r) {
      double y = (static_cast<double>(r) + 0.5) * gsd;
      for (int64_t c = clo; c <= chi; ++c) {
        double x = (static_cast<double>(c) + 0.5) * gsd;
        if (point_in_polygon(poly, x, y)) out[static_cast<size_t>(r * w + c)] = value;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- scene pipeline

struct PrepareOptions {
  int max_shift = 16;
  int multilook_factor = 1;
  double lee_k = 1.0;
  double low_corr_threshold = 0.25;
};

// A scene after coregistration, filtering, and standardization: all eight
// bands as floats in [0,1] (the 8-bit values over 255), plus the label
// mask on the optical grid and a JSON log of what the stages did.
struct PreparedScene {
  std::map<std::string, Raster> bands;
  std::vector<uint8_t> labels;
  int64_t label_h = 0, label_w = 0;
  double label_gsd = 0.0;
  double extent_m = 0.0;
  nlohmann::json log;
};

inline Raster byteband_to_unit(const ByteBand& b, double gsd) {
  Raster r(b.h, b.w, gsd);
  for (size_t i = 0; i < b.v.size(); ++i) r.v[i] = static_cast<float>(b.v[i]) * (1.0f / 255.0f);
  return r;
}

inline PreparedScene prepare_scene(const Scene& scene, const PrepareOptions& opt) {
  PreparedScene out;
  out.extent_m = scene.params.extent_m;

  // Optical coregistration is estimated on the band mean so a flat channel
  // cannot derail it; the one shift applies to all three post bands.
  const Raster& pr = scene.rasters.at("optical_pre_r");
  Raster pre_lum(pr.h, pr.w, pr.gsd);
  Raster post_lum(pr.h, pr.w, pr.gsd);
  for (int64_t i = 0; i < pre_lum.numel(); ++i) {
    size_t s = static_cast<size_t>(i);
    pre_lum.v[s] = (scene.rasters.at("optical_pre_r").v[s] +
                    scene.rasters.at("optical_pre_g").v[s] +
                    scene.rasters.at("optical_pre_b").v[s]) / 3.0f;
    post_lum.v[s] = (scene.rasters.at("optical_post_r").v[s] +
                     scene.rasters.at("optical_post_g").v[s] +
                     scene.rasters.at("optical_post_b").v[s]) / 3.0f;
  }
  CoregResult creg_opt = coregister_shift(pre_lum, post_lum, opt.max_shift,
                                          opt.low_corr_threshold);
  CoregResult creg_sar = coregister_shift(scene.rasters.at("sar_pre"),
                                          scene.rasters.at("sar_post"), opt.max_shift,
                                          opt.low_corr_threshold);
  out.log["coregistration"] = {
      {"optical", {{"dy", creg_opt.dy}, {"dx", creg_opt.dx}, {"ncc", creg_opt.ncc},
                   {"low_correlation", creg_opt.low_correlation}}},
      {"sar", {{"dy", creg_sar.dy}, {"dx", creg_sar.dx}, {"ncc", creg_sar.ncc},
               {"low_correlation", creg_sar.low_correlation}}}};

  std::map<std::string, Raster> aligned;
  aligned["optical_pre_r"] = scene.rasters.at("optical_pre_r");
  aligned["optical_pre_g"] = scene.rasters.at("optical_pre_g");
  aligned["optical_pre_b"] = scene.rasters.at("optical_pre_b");
  for (const char* band : {"optical_post_r", "optical_post_g", "optical_post_b"}) {
    aligned[band] = apply_shift(scene.rasters.at(band), creg_opt.dy, creg_opt.dx);
  }
  aligned["sar_pre"] = scene.rasters.at("sar_pre");
  aligned["sar_post"] = apply_shift(scene.rasters.at("sar_post"), creg_sar.dy, creg_sar.dx);

  for (const char* band : {"sar_pre", "sar_post"}) {
    Raster looked = multilook(aligned[band], opt.multilook_factor);
    aligned[band] = lee_filter_enhanced(looked, scene.params.looks, opt.lee_k);
  }
  out.log["multilook_factor"] = opt.multilook_factor;

  nlohmann::json bounds = nlohmann::json::object();
  for (const auto& name : band_names()) {
    ByteBand bb = standardize_8bit(aligned.at(name));
    bounds[name] = {{"lo", bb.lo}, {"hi", bb.hi}, {"degenerate", bb.degenerate}};
    out.bands[name] = byteband_to_unit(bb, aligned.at(name).gsd);
  }
  out.log["standardization"] = bounds;

  out.label_h = pr.h;
  out.label_w = pr.w;
  out.label_gsd = pr.gsd;
  int unmatched = 0;
  out.labels = rasterize_labels(scene.buildings, scene.points, out.label_h, out.label_w,
                                out.label_gsd, &unmatched);
  out.log["unmatched_points"] = unmatched;
  return out;
}

// ---------------------------------------------------------------- tiling

inline constexpr double kTileMeters = 250.0;
inline constexpr int64_t kTilePx = 256;
inline constexpr double kBuiltUpThreshold = 0.05;

// Stored channel order of the full stack; modes select subsets.
inline const std::array<std::string, 4>& channel_names() {
  static const std::array<std::string, 4> names = {"R", "G", "B", "SAR"};
  return names;
}

inline std::vector<std::string> mode_pre_channels(int mode) {
  switch (mode) {
    case 1: return {"R", "G", "B", "SAR"};
    case 2: return {"R", "G", "B"};
    case 3: return {"SAR"};
    case 4: return {"R", "G", "B"};
    case 5: return {"R", "G", "B", "SAR"};
    default: fail_validation("unknown modality mode " + std::to_string(mode));
  }
}

inline std::vector<std::string> mode_post_channels(int mode) {
  switch (mode) {
    case 1: return {"R", "G", "B", "SAR"};
    case 2: return {"R", "G", "B"};
    case 3: return {"SAR"};
    case 4: return {"SAR"};
    case 5: return {"SAR"};
    default: fail_validation("unknown modality mode " + std::to_string(mode));
  }
}

struct Tile {
  std::string id;
  std::string scene_id;
  int grid_row = 0, grid_col = 0;
  double origin_x_m = 0.0, origin_y_m = 0.0;
  std::vector<std::string> pre_channels, post_channels;
  std::vector<float> pre, post;  // channel-major, kTilePx x kTilePx planes
  std::vector<uint8_t> label;
  double built_up_fraction = 0.0;
};

namespace detail {

inline Raster crop(const Raster& src, int64_t r0, int64_t c0, int64_t span) {
  Raster out(span, span, src.gsd);
  for (int64_t r = 0; r < span; ++r)
    for (int64_t c = 0; c < span; ++c) out.at(r, c) = src.at(r0 + r, c0 + c);
  return out;
}

inline void append_band_tile(const Raster& band, int64_t row, int64_t col,
                             std::vector<float>& dst) {
  int64_t span = static_cast<int64_t>(std::llround(kTileMeters / band.gsd));
  require(span >= 1, "tile: band resolution coarser than the tile size");
  require((row + 1) * span <= band.h && (col + 1) * span <= band.w,
          "tile: band does not cover the requested tile window");
  Raster windows = crop(band, row * span, col * span, span);
  Raster res = resample_bilinear(windows, kTilePx, kTilePx);
  dst.insert(dst.end(), res.v.begin(), res.v.end());
}

}  // namespace detail

// Cuts the prepared scene into non-overlapping 250 m tiles resampled to
// 256x256 (bands bilinear, labels nearest) and keeps tiles whose built-up
// fraction reaches the 5% floor. The epoch channel lists follow the
// requested modality mode; a mode asking for a band the preparation did
// not produce is a missing-artifact error naming the band.
inline std::vector<Tile> tile_scene(const PreparedScene& prepared, const std::string& scene_id,
                                    int mode) {
  std::vector<std::string> pre_ch = mode_pre_channels(mode);
  std::vector<std::string> post_ch = mode_post_channels(mode);
  auto band_of = [&](const std::string& channel, bool pre_epoch) -> const Raster& {
    std::string name = channel == "SAR"
                           ? (pre_epoch ? "sar_pre" : "sar_post")
                           : std::string(pre_epoch ? "optical_pre_" : "optical_post_") +
                                 static_cast<char>(std::tolower(channel[0]));
    auto it = prepared.bands.find(name);
    if (it == prepared.bands.end())
      fail_missing("tile_scene: mode " + std::to_string(mode) + " needs band " + name +
                   " which the preparation did not produce");
    return it->second;
  };

  int64_t grid = static_cast<int64_t>(prepared.extent_m / kTileMeters);
  require(grid >= 1, "tile_scene: scene extent smaller than one tile");
  require(prepared.label_h > 0 && !prepared.labels.empty(), "tile_scene: labels missing");

  std::vector<Tile> out;
  for (int64_t i = 0; i < grid; ++i) {
    for (int64_t j = 0; j < grid; ++j) {
      Tile t;
      t.scene_id = scene_id;
      t.grid_row = static_cast<int>(i);
      t.grid_col = static_cast<int>(j);
      t.id = scene_id + "_r" + std::to_string(i) + "_c" + std::to_string(j);
      t.origin_x_m = static_cast<double>(j) * kTileMeters;
      t.origin_y_m = static_cast<double>(i) * kTileMeters;
      t.pre_channels = pre_ch;
      t.post_channels = post_ch;

      int64_t lspan = static_cast<int64_t>(std::llround(kTileMeters / prepared.label_gsd));
      require((i + 1) * lspan <= prepared.label_h && (j + 1) * lspan <= prepared.label_w,
              "tile_scene: label mask does not cover the tile grid");
      std::vector<uint8_t> lcrop(static_cast<size_t>(lspan * lspan));
      for (int64_t r = 0; r < lspan; ++r) {
        const uint8_t* src = prepared.labels.data() + (i * lspan + r) * prepared.label_w +
                             j * lspan;
        std::copy(src, src + lspan, lcrop.begin() + static_cast<size_t>(r * lspan));
      }
      t.label = resample_nearest(lcrop, lspan, lspan, kTilePx, kTilePx);

      int64_t built = 0;
      for (uint8_t v : t.label) built += v != 0;
      t.built_up_fraction = static_cast<double>(built) /
                            static_cast<double>(kTilePx * kTilePx);
      if (t.built_up_fraction < kBuiltUpThreshold) continue;

      for (const auto& ch : pre_ch) detail::append_band_tile(band_of(ch, true), i, j, t.pre);
      for (const auto& ch : post_ch) detail::append_band_tile(band_of(ch, false), i, j, t.post);
      out.push_back(std::move(t));
    }
  }
  return out;
}

// ---------------------------------------------------------------- splits

struct SeedSplit {
  uint64_t seed = 0;
  std::vector<std::string> train, val;
};

struct SplitManifest {
  uint64_t master_seed = 0;
  std::vector<std::string> test;
  std::vector<SeedSplit> splits;
};

// Holds out round(10%) of the tiles under the master seed (the same test
// set for every experiment), then partitions the remainder 80:20 under
// each split seed. The three resulting partitions must differ.
inline SplitManifest split_dataset(std::vector<std::string> ids, uint64_t master_seed,
                                   const std::vector<uint64_t>& seeds) {
  require(ids.size() >= 10, "split: need at least 10 tiles, got " + std::to_string(ids.size()));
  require(!seeds.empty(), "split: need at least one split seed");
  std::sort(ids.begin(), ids.end());

  SplitManifest m;
  m.master_seed = master_seed;
  std::vector<std::string> shuffled = ids;
  Rng test_rng = Rng(master_seed).fork("test_split");
  test_rng.shuffle(shuffled);
  size_t ntest = static_cast<size_t>(std::llround(0.1 * static_cast<double>(ids.size())));
  m.test.assign(shuffled.begin(), shuffled.begin() + static_cast<int64_t>(ntest));
  std::sort(m.test.begin(), m.test.end());

  std::vector<std::string> pool(shuffled.begin() + static_cast<int64_t>(ntest), shuffled.end());
  std::sort(pool.begin(), pool.end());

  for (uint64_t seed : seeds) {
    std::vector<std::string> order = pool;
    Rng rng = Rng(seed).fork("train_val");
    rng.shuffle(order);
    size_t ntrain = static_cast<size_t>(std::llround(0.8 * static_cast<double>(order.size())));
    SeedSplit s;
    s.seed = seed;
    s.train.assign(order.begin(), order.begin() + static_cast<int64_t>(ntrain));
    s.val.assign(order.begin() + static_cast<int64_t>(ntrain), order.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    require(!s.train.empty() && !s.val.empty(), "split: empty train or val partition");
    m.splits.push_back(std::move(s));
  }
  for (size_t a = 0; a < m.splits.size(); ++a) {
    for (size_t b = a + 1; b < m.splits.size(); ++b) {
      require(m.splits[a].val != m.splits[b].val,
              "split: seeds " + std::to_string(m.splits[a].seed) + " and " +
                  std::to_string(m.splits[b].seed) + " produced identical partitions");
    }
  }
  return m;
}

inline nlohmann::json split_manifest_json(const SplitManifest& m) {
  nlohmann::json j;
  j["master_seed"] = m.master_seed;
  j["test"] = m.test;
  auto& arr = j["splits"] = nlohmann::json::array();
  for (const SeedSplit& s : m.splits) {
    arr.push_back({{"seed", s.seed}, {"train", s.train}, {"val", s.val}});
  }
  return j;
}

inline SplitManifest split_manifest_from_json(const nlohmann::json& j) {
  SplitManifest m;
  m.master_seed = j.at("master_seed").get<uint64_t>();
  m.test = j.at("test").get<std::vector<std::string>>();
  for (const auto& s : j.at("splits")) {
    SeedSplit ss;
    ss.seed = s.at("seed").get<uint64_t>();
    ss.train = s.at("train").get<std::vector<std::string>>();
    ss.val = s.at("val").get<std::vector<std::string>>();
    m.splits.push_back(std::move(ss));
  }
  return m;
}

// ---------------------------------------------------------------- tile store

// Directory layout: manifest.json at the root, then one directory per
// split role (test/ for held-out tiles, pool/ for the train+val pool) with
// one subdirectory per tile carrying meta.json, pre.bin, post.bin
// (little-endian float32, channel-major) and label.bin (uint8).
class TileStore {
public:
  static void write(const std::filesystem::path& dir, const std::vector<Tile>& tiles,
                    const SplitManifest& manifest, const nlohmann::json& extra_meta = {}) {
    std::filesystem::create_directories(dir);
    std::set<std::string> test_ids(manifest.test.begin(), manifest.test.end());

    nlohmann::json mj;
    mj["format_version"] = 1;
    mj["tile_px"] = kTilePx;
    mj["tile_m"] = kTileMeters;
    mj["built_up_threshold"] = kBuiltUpThreshold;
    mj["label_classes"] = {{"0", "background"},
                           {"1", "Survived"},
                           {"2", "Moderated"},
                           {"3", "Destroyed"}};
    mj["split"] = split_manifest_json(manifest);
    if (!extra_meta.is_null()) {
      for (auto& [k, v] : extra_meta.items()) mj[k] = v;
    }

    require(!tiles.empty(), "tile store: no tiles to write");
    mj["pre_channels"] = tiles.front().pre_channels;
    mj["post_channels"] = tiles.front().post_channels;

    auto& tj = mj["tiles"] = nlohmann::json::object();
    for (const Tile& t : tiles) {
      std::string role = test_ids.count(t.id) ? "test" : "pool";
      std::filesystem::path tdir = dir / role / t.id;
      std::filesystem::create_directories(tdir);

      nlohmann::json meta = {{"id", t.id},
                             {"scene_id", t.scene_id},
                             {"grid", {t.grid_row, t.grid_col}},
                             {"origin_m", {t.origin_x_m, t.origin_y_m}},
                             {"pre_channels", t.pre_channels},
                             {"post_channels", t.post_channels},
                             {"built_up_fraction", t.built_up_fraction}};
      std::ofstream meta_out(tdir / "meta.json");
      require(meta_out.good(), "tile store: cannot write " + (tdir / "meta.json").string());
      meta_out << meta.dump(2) << "\n";

      write_raw(tdir / "pre.bin", t.pre);
      write_raw(tdir / "post.bin", t.post);
      std::ofstream lbl(tdir / "label.bin", std::ios::binary | std::ios::trunc);
      lbl.write(reinterpret_cast<const char*>(t.label.data()),
                static_cast<std::streamsize>(t.label.size()));
      require(lbl.good(), "tile store: cannot write label.bin for " + t.id);

      tj[t.id] = {{"role", role}, {"built_up_fraction", t.built_up_fraction},
                  {"scene_id", t.scene_id}};
    }
    std::ofstream mout(dir / "manifest.json");
    require(mout.good(), "tile store: cannot write manifest.json");
    mout << mj.dump(2) << "\n";
  }

  static TileStore open(const std::filesystem::path& dir) {
    TileStore s;
    s.dir_ = dir;
    std::ifstream in(dir / "manifest.json");
    if (!in.good()) fail_missing("tile store " + dir.string() + " has no manifest.json");
    s.manifest_ = nlohmann::json::parse(in);
    s.split_ = split_manifest_from_json(s.manifest_.at("split"));
    return s;
  }

  const nlohmann::json& manifest() const { return manifest_; }
  const SplitManifest& split() const { return split_; }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (auto& [id, info] : manifest_.at("tiles").items()) out.push_back(id);
    std::sort(out.begin(), out.end());
    return out;
  }

  Tile load(const std::string& id) const {
    const auto& info = manifest_.at("tiles").at(id);
    std::filesystem::path tdir = dir_ / info.at("role").get<std::string>() / id;
    std::ifstream meta_in(tdir / "meta.json");
    if (!meta_in.good()) fail_missing("tile " + id + " missing from store " + dir_.string());
    nlohmann::json meta = nlohmann::json::parse(meta_in);

    Tile t;
    t.id = id;
    t.scene_id = meta.at("scene_id").get<std::string>();
    t.grid_row = meta.at("grid").at(0).get<int>();
    t.grid_col = meta.at("grid").at(1).get<int>();
    t.origin_x_m = meta.at("origin_m").at(0).get<double>();
    t.origin_y_m = meta.at("origin_m").at(1).get<double>();
    t.pre_channels = meta.at("pre_channels").get<std::vector<std::string>>();
    t.post_channels = meta.at("post_channels").get<std::vector<std::string>>();
    t.built_up_fraction = meta.at("built_up_fraction").get<double>();

    t.pre = read_raw(tdir / "pre.bin",
                     static_cast<int64_t>(t.pre_channels.size()) * kTilePx * kTilePx);
    t.post = read_raw(tdir / "post.bin",
                      static_cast<int64_t>(t.post_channels.size()) * kTilePx * kTilePx);
    t.label.resize(static_cast<size_t>(kTilePx * kTilePx));
    std::ifstream lbl(tdir / "label.bin", std::ios::binary);
    lbl.read(reinterpret_cast<char*>(t.label.data()),
             static_cast<std::streamsize>(t.label.size()));
    require(lbl.good() && lbl.gcount() == static_cast<std::streamsize>(t.label.size()),
            "tile store: label.bin truncated for " + id);
    return t;
  }

private:
  static void write_raw(const std::filesystem::path& path, const std::vector<float>& v) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(float)));
    require(out.good(), "tile store: cannot write " + path.string());
  }
  static std::vector<float> read_raw(const std::filesystem::path& path, int64_t count) {
    std::vector<float> v(static_cast<size_t>(count));
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) fail_missing("tile store: cannot open " + path.string());
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(float)));
    require(in.good() && in.gcount() == static_cast<std::streamsize>(v.size() * sizeof(float)),
            "tile store: " + path.string() + " is truncated");
    return v;
  }

  std::filesystem::path dir_;
  nlohmann::json manifest_;
  SplitManifest split_;
};

// Extracts the channel planes a mode needs from a full-stack tile. The
// store may hold a subset (a mode-specific preparation); a requested
// channel it lacks is a missing-artifact error naming the channel.
inline Tile select_mode_channels(const Tile& full, int mode) {
  Tile t;
  t.id = full.id;
  t.scene_id = full.scene_id;
  t.grid_row = full.grid_row;
  t.grid_col = full.grid_col;
  t.origin_x_m = full.origin_x_m;
  t.origin_y_m = full.origin_y_m;
  t.label = full.label;
  t.built_up_fraction = full.built_up_fraction;
  t.pre_channels = mode_pre_channels(mode);
  t.post_channels = mode_post_channels(mode);

  int64_t plane = kTilePx * kTilePx;
  auto pick = [&](const std::vector<std::string>& have, const std::vector<float>& src,
                  const std::vector<std::string>& want, std::vector<float>& dst,
                  const char* epoch) {
    for (const std::string& ch : want) {
      auto it = std::find(have.begin(), have.end(), ch);
      if (it == have.end())
        fail_missing("tile " + full.id + " has no " + epoch + " channel " + ch + " for mode " +
                     std::to_string(mode));
      int64_t k = it - have.begin();
      dst.insert(dst.end(), src.begin() + k * plane, src.begin() + (k + 1) * plane);
    }
  };
  pick(full.pre_channels, full.pre, t.pre_channels, t.pre, "pre");
  pick(full.post_channels, full.post, t.post_channels, t.post, "post");
  return t;
}

}  // namespace dmg
