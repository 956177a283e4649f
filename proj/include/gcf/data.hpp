#pragma once

// Manifest ingestion, stratified splitting, dataset loading and the synthetic
// region-blob dataset generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "gcf/errors.hpp"
#include "gcf/graph.hpp"
#include "gcf/image_io.hpp"
#include "gcf/model.hpp"
#include "gcf/train.hpp"
#include "gcf/util.hpp"

namespace gcf {

inline const std::vector<std::string>& default_class_names() {
  static const std::vector<std::string> names = {"anger",   "disgust",  "fear",   "happiness",
                                                 "sadness", "surprise", "neutral"};
  return names;
}

struct ManifestSample {
  std::string path;  // relative to the manifest root
  std::size_t label = 0;
};

struct RunManifest {
  std::filesystem::path root;
  std::vector<std::string> class_names;
  std::vector<ManifestSample> samples;

  std::size_t num_classes() const { return class_names.size(); }

  std::vector<std::size_t> class_histogram() const {
    std::vector<std::size_t> h(class_names.size(), 0);
    for (const auto& s : samples) ++h[s.label];
    return h;
  }

  std::filesystem::path resolve(const ManifestSample& s) const { return root / s.path; }
};

namespace detail {
inline std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

inline std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  return out;
}
}  // namespace detail

// CSV with header `path,label`. An optional first data line `#classes:a,b,...`
// fixes the label order; otherwise labels are indexed by first appearance.
// Paths are relative to the manifest's directory and must exist.
inline RunManifest parse_manifest(const std::string& text, const std::filesystem::path& root,
                                  const std::string& source = "manifest", bool check_files = true) {
  RunManifest m;
  m.root = root;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false, declared = false, data_seen = false;
  std::unordered_map<std::string, std::size_t> index;
  std::set<std::string> paths;
  auto fail = [&](const std::string& what) {
    throw DataError(source + ":" + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && line.starts_with("\xEF\xBB\xBF")) line.erase(0, 3);
    if (detail::trim(line).empty()) continue;
    if (!header_seen) {
      const auto cols = detail::split_commas(line);
      if (cols.size() != 2 || cols[0] != "path" || cols[1] != "label") fail("expected header 'path,label'");
      header_seen = true;
      continue;
    }
    if (line.starts_with("#classes:")) {
      if (data_seen || declared) fail("#classes declaration must be the first data line");
      for (auto& name : detail::split_commas(line.substr(9))) {
        if (name.empty()) fail("empty class name in #classes declaration");
        if (index.count(name)) fail("duplicate class name '" + name + "'");
        index.emplace(name, m.class_names.size());
        m.class_names.push_back(name);
      }
      declared = true;
      continue;
    }
    data_seen = true;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) fail("expected 'path,label'");
    const std::string path = detail::trim(line.substr(0, comma));
    const std::string label = detail::trim(line.substr(comma + 1));
    if (path.empty() || label.empty()) fail("empty path or label");
    auto it = index.find(label);
    if (it == index.end()) {
      if (declared) fail("unknown label '" + label + "'");
      it = index.emplace(label, m.class_names.size()).first;
      m.class_names.push_back(label);
    }
    if (!paths.insert(path).second) fail("duplicate path '" + path + "'");
    if (check_files && !std::filesystem::exists(root / path)) fail("image not found: " + (root / path).string());
    m.samples.push_back({path, it->second});
  }
  if (!header_seen) throw DataError(source + ": empty manifest (missing 'path,label' header)");
  return m;
}

inline RunManifest load_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw DataError("manifest not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read manifest: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_manifest(buf.str(), path.parent_path(), path.string());
}

struct SplitAssignment {
  std::uint64_t seed = 0;
  double test_fraction = 0.2;
  std::vector<std::size_t> train;  // ascending
  std::vector<std::size_t> test;   // ascending

  nlohmann::json to_json() const {
    return {{"seed", seed}, {"test_fraction", test_fraction}, {"train", train}, {"test", test}};
  }
  std::string serialize() const { return to_json().dump() + "\n"; }
};

// Per class: seeded shuffle, then the first round(fraction * n) samples
// (clamped to [1, n-1]) go to the test split.
inline SplitAssignment split_stratified(const RunManifest& manifest, std::uint64_t seed, double test_fraction = 0.2) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ContractError("split: test fraction must be in (0,1)");
  std::vector<std::vector<std::size_t>> by_class(manifest.num_classes());
  for (std::size_t i = 0; i < manifest.samples.size(); ++i) by_class[manifest.samples[i].label].push_back(i);
  SplitAssignment split;
  split.seed = seed;
  split.test_fraction = test_fraction;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    if (members.size() < 2) {
      throw ContractError("split: class '" + manifest.class_names[c] + "' has " + std::to_string(members.size()) +
                          " samples, need at least 2");
    }
    auto rng = stream_rng(seed, "split:" + std::to_string(c));
    std::shuffle(members.begin(), members.end(), rng);
    const auto n = members.size();
    const auto want = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
    const std::size_t n_test = std::clamp<std::size_t>(want, 1, n - 1);
    split.test.insert(split.test.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_test));
    split.train.insert(split.train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_test), members.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

template <class T>
LabeledSet<T> load_dataset(const RunManifest& manifest, const BackboneConfig& cfg) {
  LabeledSet<T> set;
  set.num_classes = manifest.num_classes();
  for (const auto& s : manifest.samples) {
    set.images.push_back(load_image<T>(manifest.resolve(s), cfg.input_size, cfg.input_channels));
    set.labels.push_back(s.label);
  }
  return set;
}

struct SyntheticOptions {
  std::size_t n_per_class = 100;
  std::size_t num_classes = 7;
  std::uint64_t seed = 42;
  double noise = 0.15;       // Gaussian sigma as a fraction of the [0,1] range
  std::size_t size = 48;
  double blob_amplitude = 0.45;
  double blob_sigma = 4.0;   // pixels
  double brightness_jitter = 0.1;
};

inline std::vector<std::string> synthetic_class_names(std::size_t k) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < k; ++i)
    names.push_back(i < default_class_names().size() ? default_class_names()[i] : "region" + std::to_string(i));
  return names;
}

// Pixel values in [0,1] for one synthetic image of class `label`: background
// plus per-image brightness jitter, a Gaussian blob centred on grid region
// `label`, and additive Gaussian noise.
inline std::vector<double> synthetic_image(std::size_t label, const SyntheticOptions& opt, std::mt19937_64& rng) {
  const std::size_t s = opt.size;
  const double cell = static_cast<double>(s) / kGridSide;
  const double cy = (static_cast<double>(label / kGridSide) + 0.5) * cell - 0.5;
  const double cx = (static_cast<double>(label % kGridSide) + 0.5) * cell - 0.5;
  std::uniform_real_distribution<double> jitter(-opt.brightness_jitter, opt.brightness_jitter);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double base = 0.3 + jitter(rng);
  std::vector<double> px(s * s);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      double v = base + opt.blob_amplitude * std::exp(-(dx * dx + dy * dy) / (2 * opt.blob_sigma * opt.blob_sigma));
      if (opt.noise > 0) v += opt.noise * noise(rng);
      px[y * s + x] = std::clamp(v, 0.0, 1.0);
    }
  return px;
}

// Writes `images/<class>_<nnnn>.pgm` and `manifest.csv` under `out_dir`.
inline RunManifest generate_synthetic(const std::filesystem::path& out_dir, const SyntheticOptions& opt) {
  if (opt.num_classes > kGridNodes) {
    throw ContractError("synthetic: at most 9 classes (one distinguishing region each), got " +
                        std::to_string(opt.num_classes));
  }
  if (opt.num_classes < 2 || opt.n_per_class == 0) throw ContractError("synthetic: need >= 2 classes and >= 1 image per class");
  if (opt.size % kGridSide != 0) throw ContractError("synthetic: image size must be divisible by 3");
  std::filesystem::create_directories(out_dir / "images");
  RunManifest m;
  m.root = out_dir;
  m.class_names = synthetic_class_names(opt.num_classes);
  auto rng = stream_rng(opt.seed, "synthetic");
  std::ostringstream csv;
  csv << "path,label\n#classes:";
  for (std::size_t c = 0; c < m.class_names.size(); ++c) csv << (c ? "," : "") << m.class_names[c];
  csv << '\n';
  for (std::size_t i = 0; i < opt.n_per_class; ++i)
    for (std::size_t c = 0; c < opt.num_classes; ++c) {
      const auto px = synthetic_image(c, opt, rng);
      std::vector<std::uint8_t> bytes(px.size());
      for (std::size_t j = 0; j < px.size(); ++j) bytes[j] = static_cast<std::uint8_t>(std::lround(px[j] * 255.0));
      char name[64];
      std::snprintf(name, sizeof name, "images/%s_%04zu.pgm", m.class_names[c].c_str(), i);
      write_pgm(out_dir / name, opt.size, opt.size, bytes);
      m.samples.push_back({name, c});
      csv << name << ',' << m.class_names[c] << '\n';
    }
  std::ofstream out(out_dir / "manifest.csv", std::ios::binary);
  out << csv.str();
  if (!out) throw DataError("cannot write " + (out_dir / "manifest.csv").string());
  return m;
}

}  // namespace gcf
