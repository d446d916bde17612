// Rendering checks: the pinned four-color palette and its float sources,
// class-to-RGB mapping, and PNG output verified by an in-test decoder that
// parses chunks, recomputes CRCs, inflates the image data, and compares
// pixels byte for byte.
#include <gtest/gtest.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <zlib.h>

#include "dmg/render.hpp"
#include "dmg/rng.hpp"

using namespace dmg;
namespace fs = std::filesystem;

namespace {

struct PngChunk {
  std::string type;
  std::vector<uint8_t> data;
};

uint32_t be32(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

// Minimal chunk-level PNG reader with CRC verification; enough to decode
// the writer's single-IDAT truecolor output.
std::vector<PngChunk> parse_png(const std::vector<uint8_t>& bytes) {
  static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  EXPECT_GE(bytes.size(), 8u);
  EXPECT_TRUE(std::equal(sig, sig + 8, bytes.begin()));

  std::vector<PngChunk> chunks;
  size_t at = 8;
  while (at + 12 <= bytes.size()) {
    uint32_t len = be32(bytes.data() + at);
    PngChunk c;
    c.type.assign(bytes.begin() + static_cast<int64_t>(at) + 4,
                  bytes.begin() + static_cast<int64_t>(at) + 8);
    c.data.assign(bytes.begin() + static_cast<int64_t>(at) + 8,
                  bytes.begin() + static_cast<int64_t>(at) + 8 + len);
    uLong crc = crc32(0L, bytes.data() + at + 4, 4 + len);
    EXPECT_EQ(static_cast<uint32_t>(crc), be32(bytes.data() + at + 8 + len))
        << "bad CRC on chunk " << c.type;
    at += 12 + len;
    chunks.push_back(std::move(c));
  }
  EXPECT_EQ(at, bytes.size());
  return chunks;
}

std::vector<uint8_t> decode_rgb(const fs::path& path, int64_t* h_out, int64_t* w_out) {
  std::ifstream in(path, std::ios::binary);
  std::vector<uint8_t> bytes(std::istreambuf_iterator<char>(in), {});
  std::vector<PngChunk> chunks = parse_png(bytes);

  EXPECT_GE(chunks.size(), 3u);
  EXPECT_EQ(chunks.front().type, "IHDR");
  EXPECT_EQ(chunks.back().type, "IEND");
  const PngChunk& ihdr = chunks.front();
  EXPECT_EQ(ihdr.data.size(), 13u);
  int64_t w = be32(ihdr.data.data());
  int64_t h = be32(ihdr.data.data() + 4);
  EXPECT_EQ(ihdr.data[8], 8);   // bit depth
  EXPECT_EQ(ihdr.data[9], 2);   // truecolor
  EXPECT_EQ(ihdr.data[12], 0);  // no interlace

  std::vector<uint8_t> idat;
  int idat_count = 0;
  for (const PngChunk& c : chunks) {
    if (c.type == "IDAT") {
      idat.insert(idat.end(), c.data.begin(), c.data.end());
      ++idat_count;
    }
  }
  EXPECT_EQ(idat_count, 1);

  std::vector<uint8_t> raw(static_cast<size_t>(h * (1 + w * 3)));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  int rc = uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size()));
  EXPECT_EQ(rc, Z_OK);
  EXPECT_EQ(raw_len, raw.size());

  std::vector<uint8_t> rgb(static_cast<size_t>(h * w * 3));
  for (int64_t r = 0; r < h; ++r) {
    const uint8_t* row = raw.data() + r * (1 + w * 3);
    EXPECT_EQ(row[0], 0) << "row " << r << " uses a filter the writer never emits";
    std::copy(row + 1, row + 1 + w * 3, rgb.begin() + r * w * 3);
  }
  *h_out = h;
  *w_out = w;
  return rgb;
}

}  // namespace

TEST(Palette, PinnedColorsQuantizeTheirSourceTriplets) {
  const auto& palette = class_palette();
  EXPECT_STREQ(palette[0].name, "background");
  EXPECT_STREQ(palette[1].name, "Survived");
  EXPECT_STREQ(palette[2].name, "Moderated");
  EXPECT_STREQ(palette[3].name, "Destroyed");

  EXPECT_EQ(palette[0].rgb, (std::array<uint8_t, 3>{0, 0, 0}));
  EXPECT_EQ(palette[1].rgb, (std::array<uint8_t, 3>{171, 221, 164}));
  EXPECT_EQ(palette[2].rgb, (std::array<uint8_t, 3>{248, 171, 95}));
  EXPECT_EQ(palette[3].rgb, (std::array<uint8_t, 3>{255, 25, 28}));

  EXPECT_EQ(palette[1].source, (std::array<double, 3>{0.671, 0.867, 0.643}));
  EXPECT_EQ(palette[2].source, (std::array<double, 3>{0.974, 0.671, 0.373}));
  EXPECT_EQ(palette[3].source, (std::array<double, 3>{1.000, 0.098, 0.110}));

  for (const ClassColor& c : palette) {
    for (int ch = 0; ch < 3; ++ch) {
      EXPECT_EQ(c.rgb[static_cast<size_t>(ch)],
                static_cast<uint8_t>(std::lround(c.source[static_cast<size_t>(ch)] * 255.0)))
          << c.name << " channel " << ch;
    }
  }
}

TEST(ClassMap, MapsClassValuesToPaletteBytes) {
  std::vector<uint8_t> classes = {0, 1, 2, 3};
  std::vector<uint8_t> rgb = class_map_rgb(classes);
  std::vector<uint8_t> want = {0, 0, 0, 171, 221, 164, 248, 171, 95, 255, 25, 28};
  EXPECT_EQ(rgb, want);

  std::vector<uint8_t> bad = {4};
  EXPECT_THROW(class_map_rgb(bad), Error);
}

TEST(Png, RoundTripsThroughAnIndependentDecoder) {
  constexpr int64_t kH = 7, kW = 5;
  std::vector<uint8_t> rgb(static_cast<size_t>(kH * kW * 3));
  Rng rng(33);
  for (uint8_t& v : rgb) v = static_cast<uint8_t>(rng.uniform_int(0, 255));

  fs::path path = fs::temp_directory_path() / "render_roundtrip.png";
  write_png_rgb(path, kH, kW, rgb);

  int64_t h = 0, w = 0;
  std::vector<uint8_t> back = decode_rgb(path, &h, &w);
  EXPECT_EQ(h, kH);
  EXPECT_EQ(w, kW);
  EXPECT_EQ(back, rgb);
  fs::remove(path);

  EXPECT_THROW(write_png_rgb(path, 0, 0, {}), Error);
  EXPECT_THROW(write_png_rgb(path, 2, 2, rgb), Error);
}

TEST(ClassMap, WritesThePngAndALegendSidecar) {
  std::vector<uint8_t> classes(16);
  for (size_t i = 0; i < classes.size(); ++i) classes[i] = static_cast<uint8_t>(i % 4);
  fs::path png = fs::temp_directory_path() / "render_classmap.png";
  write_class_map(png, 4, 4, classes);

  int64_t h = 0, w = 0;
  std::vector<uint8_t> rgb = decode_rgb(png, &h, &w);
  EXPECT_EQ(rgb, class_map_rgb(classes));

  fs::path legend_path = png;
  legend_path.replace_extension(".legend.json");
  std::ifstream in(legend_path);
  ASSERT_TRUE(in.good());
  nlohmann::json legend = nlohmann::json::parse(in);
  EXPECT_EQ(legend.at("classes").at("3").at("name").get<std::string>(), "Destroyed");
  EXPECT_EQ(legend.at("classes").at("3").at("rgb").get<std::vector<int>>(),
            (std::vector<int>{255, 25, 28}));
  EXPECT_EQ(legend.at("classes").at("1").at("source_triplet").get<std::vector<double>>(),
            (std::vector<double>{0.671, 0.867, 0.643}));

  EXPECT_THROW(write_class_map(png, 3, 3, classes), Error);
  fs::remove(png);
  fs::remove(legend_path);
}

TEST(ClassMap, UniformPredictionRendersASingleColor) {
  std::vector<uint8_t> classes(64, 1);  // everything Survived
  fs::path png = fs::temp_directory_path() / "render_uniform.png";
  write_class_map(png, 8, 8, classes);

  int64_t h = 0, w = 0;
  std::vector<uint8_t> rgb = decode_rgb(png, &h, &w);
  for (size_t i = 0; i < rgb.size(); i += 3) {
    ASSERT_EQ(rgb[i], 171);
    ASSERT_EQ(rgb[i + 1], 221);
    ASSERT_EQ(rgb[i + 2], 164);
  }
  fs::remove(png);
  fs::path legend = png;
  legend.replace_extension(".legend.json");
  fs::remove(legend);
}
