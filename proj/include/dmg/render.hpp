// Class-map rendering: a minimal RGB PNG writer over zlib plus the fixed
// four-color damage palette. The palette is the 8-bit quantization of the
// class colors used throughout the reports; the exact float triplets are
// recorded in the legend sidecar for anyone reconstructing them.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "dmg/common.hpp"

namespace dmg {

struct ClassColor {
  const char* name;
  std::array<uint8_t, 3> rgb;
  std::array<double, 3> source;  // float triplet the 8-bit value quantizes
};

inline const std::array<ClassColor, 4>& class_palette() {
  static const std::array<ClassColor, 4> palette = {
      ClassColor{"background", {0, 0, 0}, {0.0, 0.0, 0.0}},
      ClassColor{"Survived", {171, 221, 164}, {0.671, 0.867, 0.643}},
      ClassColor{"Moderated", {248, 171, 95}, {0.974, 0.671, 0.373}},
      ClassColor{"Destroyed", {255, 25, 28}, {1.000, 0.098, 0.110}}};
  return palette;
}

namespace detail {

inline void png_chunk(std::ofstream& out, const char* type, const std::vector<uint8_t>& data) {
  auto be32 = [](uint32_t v) {
    return std::array<uint8_t, 4>{static_cast<uint8_t>(v >> 24), static_cast<uint8_t>(v >> 16),
                                  static_cast<uint8_t>(v >> 8), static_cast<uint8_t>(v)};
  };
  auto len = be32(static_cast<uint32_t>(data.size()));
  out.write(reinterpret_cast<const char*>(len.data()), 4);
  out.write(type, 4);
  if (!data.empty()) out.write(reinterpret_cast<const char*>(data.data()),
                               static_cast<std::streamsize>(data.size()));
  uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(type), 4);
  if (!data.empty()) crc = crc32(crc, data.data(), static_cast<uInt>(data.size()));
  auto crc_bytes = be32(static_cast<uint32_t>(crc));
  out.write(reinterpret_cast<const char*>(crc_bytes.data()), 4);
}

}  // namespace detail

// 8-bit RGB PNG, one filter-0 scanline per row, single IDAT chunk.
inline void write_png_rgb(const std::filesystem::path& path, int64_t h, int64_t w,
                          const std::vector<uint8_t>& rgb) {
  require(h > 0 && w > 0, "png: empty image");
  require(static_cast<int64_t>(rgb.size()) == h * w * 3, "png: rgb buffer size mismatch");

  std::vector<uint8_t> raw(static_cast<size_t>(h * (1 + w * 3)));
  for (int64_t r = 0; r < h; ++r) {
    uint8_t* row = raw.data() + r * (1 + w * 3);
    row[0] = 0;
    std::copy(rgb.begin() + r * w * 3, rgb.begin() + (r + 1) * w * 3, row + 1);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> compressed(bound);
  int rc = compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 9);
  require(rc == Z_OK, "png: zlib compression failed");
  compressed.resize(bound);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "png: cannot open " + path.string());
  static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  out.write(reinterpret_cast<const char*>(sig), 8);

  std::vector<uint8_t> ihdr(13);
  auto put32 = [&](size_t at, uint32_t v) {
    ihdr[at] = static_cast<uint8_t>(v >> 24);
    ihdr[at + 1] = static_cast<uint8_t>(v >> 16);
    ihdr[at + 2] = static_cast<uint8_t>(v >> 8);
    ihdr[at + 3] = static_cast<uint8_t>(v);
  };
  put32(0, static_cast<uint32_t>(w));
  put32(4, static_cast<uint32_t>(h));
  ihdr[8] = 8;   // bit depth
  ihdr[9] = 2;   // truecolor
  ihdr[10] = 0;  // deflate
  ihdr[11] = 0;  // filter method
  ihdr[12] = 0;  // no interlace
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", compressed);
  detail::png_chunk(out, "IEND", {});
  require(out.good(), "png: write failed for " + path.string());
}

inline std::vector<uint8_t> class_map_rgb(const std::vector<uint8_t>& classes) {
  std::vector<uint8_t> rgb(classes.size() * 3);
  for (size_t i = 0; i < classes.size(); ++i) {
    require(classes[i] < 4, "class map: value out of range");
    const auto& color = class_palette()[classes[i]].rgb;
    rgb[3 * i] = color[0];
    rgb[3 * i + 1] = color[1];
    rgb[3 * i + 2] = color[2];
  }
  return rgb;
}

// PNG plus a legend sidecar naming the palette.
inline void write_class_map(const std::filesystem::path& png_path, int64_t h, int64_t w,
                            const std::vector<uint8_t>& classes) {
  require(static_cast<int64_t>(classes.size()) == h * w, "class map: size mismatch");
  write_png_rgb(png_path, h, w, class_map_rgb(classes));

  nlohmann::json legend;
  for (int c = 0; c < 4; ++c) {
    const ClassColor& cc = class_palette()[static_cast<size_t>(c)];
    legend["classes"][std::to_string(c)] = {{"name", cc.name},
                                            {"rgb", cc.rgb},
                                            {"source_triplet", cc.source}};
  }
  std::filesystem::path legend_path = png_path;
  legend_path.replace_extension(".legend.json");
  std::ofstream out(legend_path);
  require(out.good(), "class map: cannot write legend " + legend_path.string());
  out << legend.dump(2) << "\n";
}

}  // namespace dmg
