#include <gtest/gtest.h>

#include <array>
#include <fstream>
#include <map>
#include <sstream>

#include "gcf/data.hpp"
#include "test_support.hpp"

namespace gcf {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

void touch_pgm(const fs::path& p, std::uint8_t value = 128, std::size_t size = 4) {
  fs::create_directories(p.parent_path());
  write_pgm(p, size, size, std::vector<std::uint8_t>(size * size, value));
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

TEST(Manifest, TwoClassCsv) {
  TempDir dir("manifest");
  touch_pgm(dir.path() / "a.pgm");
  touch_pgm(dir.path() / "b.pgm");
  write_file(dir.path() / "m.csv", "path,label\na.pgm,happy\nb.pgm,sad\n");
  const auto m = load_manifest(dir.path() / "m.csv");
  EXPECT_EQ(m.samples.size(), 2u);
  EXPECT_EQ(m.num_classes(), 2u);
  EXPECT_EQ(m.class_names, (std::vector<std::string>{"happy", "sad"}));
  EXPECT_EQ(m.samples[1].label, 1u);
}

TEST(Manifest, DeclaredClassOrderAndCrlf) {
  TempDir dir("manifest");
  touch_pgm(dir.path() / "x" / "a.pgm");
  touch_pgm(dir.path() / "x" / "b.pgm");
  write_file(dir.path() / "m.csv", "path,label\r\n#classes:sad,happy,neutral\r\nx/a.pgm,happy\r\nx/b.pgm,sad\r\n");
  const auto m = load_manifest(dir.path() / "m.csv");
  EXPECT_EQ(m.class_names, (std::vector<std::string>{"sad", "happy", "neutral"}));
  EXPECT_EQ(m.samples[0].label, 1u);
  EXPECT_EQ(m.samples[1].label, 0u);
  EXPECT_EQ(m.class_histogram(), (std::vector<std::size_t>{1, 1, 0}));
}

std::string error_of(const std::string& text) {
  try {
    parse_manifest(text, ".", "m.csv", false);
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

TEST(Manifest, ErrorsCiteLineNumbers) {
  EXPECT_NE(error_of("path,label\n#classes:a,b\nx.pgm,a\ny.pgm,c\n").find("m.csv:4: unknown label 'c'"), std::string::npos);
  EXPECT_NE(error_of("path,label\nx.pgm,a\nx.pgm,a\n").find("m.csv:3: duplicate path"), std::string::npos);
  EXPECT_NE(error_of("file,label\nx.pgm,a\n").find("m.csv:1:"), std::string::npos);
  EXPECT_NE(error_of("path,label\nx.pgm\n").find("m.csv:2:"), std::string::npos);
  EXPECT_FALSE(error_of("").empty());
}

TEST(Manifest, MissingFileAndMissingImage) {
  TempDir dir("manifest");
  EXPECT_THROW(load_manifest(dir.path() / "absent.csv"), DataError);
  write_file(dir.path() / "m.csv", "path,label\nnope.pgm,a\n");
  try {
    load_manifest(dir.path() / "m.csv");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos);
  }
}

TEST(Manifest, JaffeShapedHistogramMatchesLineCount) {
  // 213 rows over seven expressions with uneven per-class counts.
  const std::array<std::size_t, 7> counts = {30, 29, 32, 31, 31, 30, 30};
  std::ostringstream csv;
  const auto& names = default_class_names();
  csv << "path,label\n#classes:";
  for (std::size_t c = 0; c < 7; ++c) csv << (c ? "," : "") << names[c];
  csv << "\n";
  std::size_t id = 0;
  for (std::size_t round = 0; round < 32; ++round)
    for (std::size_t c = 0; c < 7; ++c)
      if (round < counts[c]) csv << "KA." << names[c] << "." << id++ << ".tiff," << names[c] << "\n";
  const auto m = parse_manifest(csv.str(), ".", "jaffe.csv", false);
  EXPECT_EQ(m.samples.size(), 213u);
  // Independent oracle: count lines ending in ",<name>".
  std::map<std::string, std::size_t> counted;
  std::istringstream lines(csv.str());
  std::string line;
  while (std::getline(lines, line))
    if (!line.starts_with("#"))
      for (const auto& n : names)
      if (line.size() > n.size() && line.ends_with("," + n)) ++counted[n];
  const auto hist = m.class_histogram();
  for (std::size_t c = 0; c < 7; ++c) {
    EXPECT_EQ(hist[c], counted[names[c]]);
    EXPECT_EQ(hist[c], counts[c]);
  }
}

TEST(LoadImage, ConstantPgmScalesToOne) {
  TempDir dir("img");
  touch_pgm(dir.path() / "w.pgm", 255, 48);
  const auto t = load_image<double>(dir.path() / "w.pgm", 48, 1);
  EXPECT_EQ(t.shape(), (Shape{1, 48, 48}));
  for (double v : t.data()) EXPECT_EQ(v, 1.0);
}

TEST(LoadImage, ResizePreservesConstants) {
  TempDir dir("img");
  touch_pgm(dir.path() / "c.pgm", 51, 96);
  const auto t = load_image<double>(dir.path() / "c.pgm", 48, 1);
  for (double v : t.data()) EXPECT_NEAR(v, 0.2, 1e-12);
}

TEST(LoadImage, BilinearCheckerboardUpsample) {
  TempDir dir("img");
  write_pgm(dir.path() / "cb.pgm", 2, 2, {0, 255, 255, 0});
  const auto t = load_image<double>(dir.path() / "cb.pgm", 4, 1);
  // Corner-aligned sampling at u, v in {0, 1/3, 2/3, 1}; bilinear interpolation
  // of [[0,1],[1,0]] is u + v - 2uv.
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      const double u = x / 3.0, v = y / 3.0;
      EXPECT_NEAR(t[y * 4 + x], u + v - 2 * u * v, 1e-6) << x << "," << y;
    }
}

TEST(LoadImage, PngGrayAndRgb) {
  TempDir dir("img");
  RawImage gray{3, 3, 1, std::vector<std::uint8_t>(9, 255)};
  write_png(dir.path() / "g.png", gray);
  const auto g1 = load_image<double>(dir.path() / "g.png", 3, 1);
  for (double v : g1.data()) EXPECT_EQ(v, 1.0);

  RawImage rgb{3, 3, 3, {}};
  for (int i = 0; i < 9; ++i) rgb.pixels.insert(rgb.pixels.end(), {200, 100, 50});
  write_png(dir.path() / "c.png", rgb);
  const auto g = load_image<double>(dir.path() / "c.png", 3, 1);
  for (double v : g.data()) EXPECT_NEAR(v, (0.299 * 200 + 0.587 * 100 + 0.114 * 50) / 255.0, 1e-12);
  const auto c = load_image<double>(dir.path() / "c.png", 3, 3);
  EXPECT_EQ(c.shape(), (Shape{3, 3, 3}));
  EXPECT_NEAR(c[0], 200 / 255.0, 1e-12);
  EXPECT_NEAR(c[9], 100 / 255.0, 1e-12);
  EXPECT_NEAR(c[18], 50 / 255.0, 1e-12);
}

TEST(LoadImage, DecodeErrorsNameThePath) {
  TempDir dir("img");
  write_file(dir.path() / "bad.pgm", "P5\n4 4\n255\nxx");
  write_file(dir.path() / "bad.png", std::string("\x89PNG\r\n\x1a\n garbage", 17));
  write_file(dir.path() / "x.bmp", "BM....");
  for (const char* name : {"bad.pgm", "bad.png", "x.bmp", "missing.pgm"}) {
    try {
      load_image<double>(dir.path() / name, 4, 1);
      ADD_FAILURE() << name;
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find(name), std::string::npos) << e.what();
    }
  }
}

RunManifest balanced_manifest(std::size_t per_class, std::size_t classes) {
  RunManifest m;
  for (std::size_t c = 0; c < classes; ++c) m.class_names.push_back("c" + std::to_string(c));
  for (std::size_t i = 0; i < per_class; ++i)
    for (std::size_t c = 0; c < classes; ++c) m.samples.push_back({"img" + std::to_string(m.samples.size()), c});
  return m;
}

TEST(Split, ArithmeticAndDeterminism) {
  const auto m = balanced_manifest(10, 7);
  const auto s = split_stratified(m, 42);
  EXPECT_EQ(s.test.size(), 14u);
  EXPECT_EQ(s.train.size(), 56u);
  std::vector<std::size_t> per_class(7, 0);
  for (auto i : s.test) ++per_class[m.samples[i].label];
  for (auto n : per_class) EXPECT_EQ(n, 2u);
  EXPECT_EQ(split_stratified(m, 42).serialize(), s.serialize());
  EXPECT_NE(split_stratified(m, 43).serialize(), s.serialize());
}

TEST(Split, DisjointCoveringAndWithinOneSamplePerClass) {
  RunManifest m = balanced_manifest(0, 7);
  // 700 samples with uneven class sizes.
  const std::array<std::size_t, 7> sizes = {100, 87, 113, 96, 104, 91, 109};
  for (std::size_t c = 0; c < 7; ++c)
    for (std::size_t i = 0; i < sizes[c]; ++i) m.samples.push_back({"s" + std::to_string(m.samples.size()), c});
  ASSERT_EQ(m.samples.size(), 700u);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto s = split_stratified(m, seed);
    std::vector<int> seen(700, 0);
    for (auto i : s.train) ++seen[i];
    for (auto i : s.test) ++seen[i];
    for (int v : seen) EXPECT_EQ(v, 1);
    std::vector<double> test_count(7, 0);
    for (auto i : s.test) ++test_count[m.samples[i].label];
    for (std::size_t c = 0; c < 7; ++c) EXPECT_LE(std::abs(test_count[c] - 0.2 * sizes[c]), 1.0);
    EXPECT_LE(std::abs(static_cast<double>(s.test.size()) - 140.0), 7.0);
  }
}

TEST(Split, TooFewSamplesNamesTheClass) {
  RunManifest m = balanced_manifest(3, 2);
  m.class_names.push_back("lonely");
  m.samples.push_back({"only", 2});
  try {
    split_stratified(m, 1);
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("lonely"), std::string::npos);
  }
}

TEST(Synthetic, CountsAndManifest) {
  TempDir dir("synth");
  SyntheticOptions opt;
  opt.n_per_class = 10;
  opt.seed = 5;
  const auto m = generate_synthetic(dir.path(), opt);
  EXPECT_EQ(m.samples.size(), 70u);
  EXPECT_EQ(m.num_classes(), 7u);
  for (auto n : m.class_histogram()) EXPECT_EQ(n, 10u);
  const auto reloaded = load_manifest(dir.path() / "manifest.csv");
  EXPECT_EQ(reloaded.class_names, m.class_names);
  EXPECT_EQ(reloaded.samples.size(), 70u);
  const auto set = load_dataset<double>(reloaded, BackboneConfig{});
  for (const auto& img : set.images)
    for (double v : img.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
}

std::array<double, 9> region_means(const Tensor<double>& img) {
  std::array<double, 9> m{};
  const std::size_t s = img.dim(1), cell = s / 3;
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) m[(y / cell) * 3 + x / cell] += img[y * s + x];
  for (auto& v : m) v /= static_cast<double>(cell * cell);
  return m;
}

TEST(Synthetic, NoiselessBlobRegionIsBrightest) {
  TempDir dir("synth");
  SyntheticOptions opt;
  opt.n_per_class = 5;
  opt.noise = 0.0;
  opt.num_classes = 9;
  const auto m = generate_synthetic(dir.path(), opt);
  const auto set = load_dataset<double>(m, BackboneConfig{});
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto means = region_means(set.images[i]);
    for (std::size_t r = 0; r < 9; ++r)
      if (r != set.labels[i]) EXPECT_GT(means[set.labels[i]], means[r]);
  }
}

TEST(Synthetic, NearestCentroidOracleSeparatesClasses) {
  TempDir dir("synth");
  SyntheticOptions opt;
  opt.n_per_class = 40;
  opt.seed = 42;
  const auto m = generate_synthetic(dir.path(), opt);
  const auto set = load_dataset<double>(m, BackboneConfig{});
  const auto split = split_stratified(m, 42);
  std::vector<std::array<double, 9>> centroid(7, std::array<double, 9>{});
  std::vector<double> count(7, 0);
  for (auto i : split.train) {
    const auto f = region_means(set.images[i]);
    for (std::size_t r = 0; r < 9; ++r) centroid[set.labels[i]][r] += f[r];
    ++count[set.labels[i]];
  }
  for (std::size_t c = 0; c < 7; ++c)
    for (auto& v : centroid[c]) v /= count[c];
  std::size_t correct = 0;
  for (auto i : split.test) {
    const auto f = region_means(set.images[i]);
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t c = 0; c < 7; ++c) {
      double d = 0;
      for (std::size_t r = 0; r < 9; ++r) d += (f[r] - centroid[c][r]) * (f[r] - centroid[c][r]);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    correct += best == set.labels[i];
  }
  EXPECT_GE(static_cast<double>(correct) / split.test.size(), 0.9);
}

TEST(Synthetic, SeedsProduceDistinctPixelsAndLimitsEnforced) {
  TempDir a("synth"), b("synth");
  SyntheticOptions opt;
  opt.n_per_class = 1;
  opt.num_classes = 2;
  opt.seed = 1;
  generate_synthetic(a.path(), opt);
  opt.seed = 2;
  generate_synthetic(b.path(), opt);
  EXPECT_NE(decode_image(a.path() / "images/anger_0000.pgm").pixels, decode_image(b.path() / "images/anger_0000.pgm").pixels);
  opt.num_classes = 10;
  EXPECT_THROW(generate_synthetic(a.path(), opt), ContractError);
}

}  // namespace
}  // namespace gcf
