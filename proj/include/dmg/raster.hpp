// Single-band float rasters on a local metric grid, plus the small amount
// of planar geometry the generator and the preprocessing stages share.
// World coordinates are meters: x grows with columns, y grows with rows,
// and pixel (r, c) of a raster with ground sampling distance g covers the
// square [c*g, (c+1)*g) x [r*g, (r+1)*g), so its center sits at
// ((c+0.5)*g, (r+0.5)*g).
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "dmg/common.hpp"

namespace dmg {

struct Vec2 {
  double x = 0.0, y = 0.0;
};

using Polygon = std::vector<Vec2>;  // simple, counter-clockwise, implicitly closed

// Signed area via the shoelace formula; positive for counter-clockwise rings.
inline double polygon_area(const Polygon& poly) {
  double acc = 0.0;
  size_t n = poly.size();
  for (size_t i = 0; i < n; ++i) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[(i + 1) % n];
    acc += a.x * b.y - b.x * a.y;
  }
  return 0.5 * acc;
}

// Even-odd ray casting. Points exactly on an edge land on one fixed side of
// the half-open crossing rule, so repeated calls always agree.
inline bool point_in_polygon(const Polygon& poly, double x, double y) {
  bool inside = false;
  size_t n = poly.size();
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[j];
    if ((a.y > y) != (b.y > y)) {
      double cross = (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x;
      if (x < cross) inside = !inside;
    }
  }
  return inside;
}

// Signed distance from a point to a rectangle given as a CCW 4-vertex ring.
// Negative inside. Works for rotated rectangles; the frame is rebuilt from
// the first two edges.
inline double rect_signed_distance(const Polygon& rect, double x, double y) {
  const Vec2& v0 = rect[0];
  double ex = rect[1].x - v0.x, ey = rect[1].y - v0.y;
  double fx = rect[3].x - v0.x, fy = rect[3].y - v0.y;
  double el = std::sqrt(ex * ex + ey * ey);
  double fl = std::sqrt(fx * fx + fy * fy);
  double a = ((x - v0.x) * ex + (y - v0.y) * ey) / el - 0.5 * el;
  double b = ((x - v0.x) * fx + (y - v0.y) * fy) / fl - 0.5 * fl;
  double dx = std::abs(a) - 0.5 * el;
  double dy = std::abs(b) - 0.5 * fl;
  double ox = std::max(dx, 0.0), oy = std::max(dy, 0.0);
  return std::sqrt(ox * ox + oy * oy) + std::min(std::max(dx, dy), 0.0);
}

struct Raster {
  int64_t h = 0, w = 0;
  double gsd = 1.0;  // meters per pixel
  std::vector<float> v;

  Raster() = default;
  Raster(int64_t h_, int64_t w_, double gsd_, float fill = 0.0f)
      : h(h_), w(w_), gsd(gsd_), v(static_cast<size_t>(h_ * w_), fill) {}

  int64_t numel() const { return h * w; }
  float& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * w + c)]; }
  float at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * w + c)]; }

  double mean() const {
    require(numel() > 0, "raster mean: empty raster");
    return mean64(v.data(), numel());
  }
};

// Raw little-endian float32, row-major, no header; dimensions travel in the
// scene or tile metadata.
inline void write_band(const std::filesystem::path& path, const Raster& r) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(r.v.data()),
            static_cast<std::streamsize>(r.v.size() * sizeof(float)));
  require(out.good(), "write failed for " + path.string());
}

inline Raster read_band(const std::filesystem::path& path, int64_t h, int64_t w, double gsd) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) fail_missing("cannot open band file " + path.string());
  Raster r(h, w, gsd);
  in.read(reinterpret_cast<char*>(r.v.data()),
          static_cast<std::streamsize>(r.v.size() * sizeof(float)));
  require(in.good() && in.gcount() == static_cast<std::streamsize>(r.v.size() * sizeof(float)),
          "band file " + path.string() + " is truncated");
  return r;
}

// Bilinear resample to (oh, ow) with half-pixel alignment (the standard
// align-corners=false convention). Border samples clamp.
inline Raster resample_bilinear(const Raster& src, int64_t oh, int64_t ow) {
  require(src.h > 0 && src.w > 0, "resample: empty source");
  Raster out(oh, ow, src.gsd * static_cast<double>(src.h) / static_cast<double>(oh));
  double sy = static_cast<double>(src.h) / static_cast<double>(oh);
  double sx = static_cast<double>(src.w) / static_cast<double>(ow);
  for (int64_t r = 0; r < oh; ++r) {
    double fy = (static_cast<double>(r) + 0.5) * sy - 0.5;
    int64_t y0 = static_cast<int64_t>(std::floor(fy));
    double wy = fy - static_cast<double>(y0);
    int64_t ya = std::clamp<int64_t>(y0, 0, src.h - 1);
    int64_t yb = std::clamp<int64_t>(y0 + 1, 0, src.h - 1);
    for (int64_t c = 0; c < ow; ++c) {
      double fx = (static_cast<double>(c) + 0.5) * sx - 0.5;
      int64_t x0 = static_cast<int64_t>(std::floor(fx));
      double wx = fx - static_cast<double>(x0);
      int64_t xa = std::clamp<int64_t>(x0, 0, src.w - 1);
      int64_t xb = std::clamp<int64_t>(x0 + 1, 0, src.w - 1);
      double top = (1.0 - wx) * src.at(ya, xa) + wx * src.at(ya, xb);
      double bot = (1.0 - wx) * src.at(yb, xa) + wx * src.at(yb, xb);
      out.at(r, c) = static_cast<float>((1.0 - wy) * top + wy * bot);
    }
  }
  return out;
}

// Nearest-neighbor resample for label masks.
inline std::vector<uint8_t> resample_nearest(const std::vector<uint8_t>& src, int64_t sh,
                                             int64_t sw, int64_t oh, int64_t ow) {
  require(static_cast<int64_t>(src.size()) == sh * sw, "resample_nearest: size mismatch");
  std::vector<uint8_t> out(static_cast<size_t>(oh * ow));
  double sy = static_cast<double>(sh) / static_cast<double>(oh);
  double sx = static_cast<double>(sw) / static_cast<double>(ow);
  for (int64_t r = 0; r < oh; ++r) {
    int64_t yr = std::clamp<int64_t>(static_cast<int64_t>((static_cast<double>(r) + 0.5) * sy), 0,
                                     sh - 1);
    for (int64_t c = 0; c < ow; ++c) {
      int64_t xc = std::clamp<int64_t>(static_cast<int64_t>((static_cast<double>(c) + 0.5) * sx),
                                       0, sw - 1);
      out[static_cast<size_t>(r * ow + c)] = src[static_cast<size_t>(yr * sw + xc)];
    }
  }
  return out;
}

}  // namespace dmg
