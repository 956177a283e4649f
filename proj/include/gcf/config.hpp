#pragma once

// Run configuration: flat `key = value` text grouped in [sections].
//
//   [model]   input_channels input_size stages kernel pool global_dim
//             graph_branch variant gcn_layers gcn_dim aggregation
//   [train]   epochs batch_size learning_rate momentum seed precision test_fraction
//   [data]    manifest
//   [output]  dir
//
// `#` and `;` start comments. Every key has a default; unknown sections or
// keys are errors.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gcf/errors.hpp"
#include "gcf/graph.hpp"
#include "gcf/model.hpp"
#include "gcf/train.hpp"
#include "gcf/util.hpp"

namespace gcf {

enum class Precision { F32, F64 };

inline std::string_view precision_name(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

inline Precision parse_precision(std::string_view s) {
  if (s == "f32") return Precision::F32;
  if (s == "f64") return Precision::F64;
  throw ConfigError("unknown precision '" + std::string(s) + "' (expected f32 or f64)");
}

struct RunConfig {
  ModelConfig model;  // num_classes is taken from the manifest at run time
  TrainConfig train;
  Precision precision = Precision::F32;
  double test_fraction = 0.2;
  std::filesystem::path manifest;
  std::filesystem::path output_dir = "runs/default";
};

namespace detail {

inline std::string strip(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  double out = 0;
  in >> out;
  if (!in || !in.eof()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::istringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(parse_uint(key, strip(item)));
  if (out.empty()) throw ConfigError(key + ": expected a comma-separated list");
  return out;
}

}  // namespace detail

// Applies one `section.key = value` assignment.
inline void set_config_value(RunConfig& cfg, const std::string& section, const std::string& key,
                             const std::string& value, const std::filesystem::path& base_dir = {}) {
  const std::string full = section + "." + key;
  auto& m = cfg.model;
  auto& b = m.backbone;
  using namespace detail;
  if (section == "model") {
    if (key == "input_channels") b.input_channels = parse_uint(full, value);
    else if (key == "input_size") b.input_size = parse_uint(full, value);
    else if (key == "stages") b.stages = parse_list(full, value);
    else if (key == "kernel") b.kernel = parse_uint(full, value);
    else if (key == "pool") b.pool = parse_uint(full, value);
    else if (key == "global_dim") b.global_dim = parse_uint(full, value);
    else if (key == "graph_branch") m.graph_branch = parse_bool(full, value);
    else if (key == "variant") m.variant = parse_variant(value);
    else if (key == "gcn_layers") m.gcn_layers = parse_uint(full, value);
    else if (key == "gcn_dim") m.gcn_dim = parse_uint(full, value);
    else if (key == "aggregation") {
      if (value == "concat") m.aggregation = Aggregation::Concat;
      else if (value == "mean") m.aggregation = Aggregation::Mean;
      else throw ConfigError(full + ": expected concat or mean, got '" + value + "'");
    } else throw ConfigError("unknown key '" + full + "'");
  } else if (section == "train") {
    auto& t = cfg.train;
    if (key == "epochs") t.epochs = parse_uint(full, value);
    else if (key == "batch_size") t.batch_size = parse_uint(full, value);
    else if (key == "learning_rate") t.learning_rate = parse_double(full, value);
    else if (key == "momentum") t.momentum = parse_double(full, value);
    else if (key == "seed") t.seed = parse_uint(full, value);
    else if (key == "precision") cfg.precision = parse_precision(value);
    else if (key == "test_fraction") cfg.test_fraction = parse_double(full, value);
    else throw ConfigError("unknown key '" + full + "'");
  } else if (section == "data") {
    if (key == "manifest") cfg.manifest = value.empty() ? std::filesystem::path{} : base_dir / value;
    else throw ConfigError("unknown key '" + full + "'");
  } else if (section == "output") {
    if (key == "dir") cfg.output_dir = base_dir / value;
    else throw ConfigError("unknown key '" + full + "'");
  } else {
    throw ConfigError("unknown section '[" + section + "]'");
  }
}

// Relative paths inside the file resolve against `base_dir`.
inline RunConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {},
                              const std::string& source = "config") {
  RunConfig cfg;
  std::istringstream in(text);
  std::string raw, section;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto where = source + ":" + std::to_string(line_no) + ": ";
    std::string line = raw.substr(0, raw.find_first_of("#;"));
    line = detail::strip(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header");
      section = detail::strip(std::string_view(line).substr(1, line.size() - 2));
      if (section != "model" && section != "train" && section != "data" && section != "output")
        throw ConfigError(where + "unknown section '[" + section + "]'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    if (section.empty()) throw ConfigError(where + "key outside of a section");
    try {
      set_config_value(cfg, section, detail::strip(std::string_view(line).substr(0, eq)),
                       detail::strip(std::string_view(line).substr(eq + 1)), base_dir);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.parent_path(), path.string());
}

// Canonical text of everything that determines parameter names and shapes.
inline std::string architecture_string(const ModelConfig& m) {
  std::ostringstream os;
  const auto& b = m.backbone;
  os << "in=" << b.input_channels << "x" << b.input_size << ";stages=";
  for (std::size_t i = 0; i < b.stages.size(); ++i) os << (i ? "," : "") << b.stages[i];
  os << ";kernel=" << b.kernel << ";pool=" << b.pool << ";global=" << b.global_dim
     << ";graph=" << (m.graph_branch ? 1 : 0);
  if (m.graph_branch) {
    os << ";variant=" << variant_name(m.variant) << ";gcn_layers=" << m.gcn_layers << ";gcn_dim=" << m.gcn_dim
       << ";aggregation=" << (m.aggregation == Aggregation::Concat ? "concat" : "mean");
  }
  os << ";classes=" << m.num_classes;
  return os.str();
}

inline std::uint64_t config_digest(const ModelConfig& m) { return fnv1a(architecture_string(m)); }

}  // namespace gcf
