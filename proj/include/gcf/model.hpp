#pragma once

// Convolutional backbone, region slicing and the full GCF model.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gcf/errors.hpp"
#include "gcf/graph.hpp"
#include "gcf/ops.hpp"
#include "gcf/tensor.hpp"
#include "gcf/util.hpp"

namespace gcf {

struct BackboneConfig {
  std::size_t input_channels = 1;
  std::size_t input_size = 48;
  std::vector<std::size_t> stages = {16, 32, 64};  // output channels per conv+pool stage
  std::size_t kernel = 3;
  std::size_t pool = 2;
  std::size_t global_dim = 128;

  std::size_t feature_channels() const { return stages.back(); }

  std::size_t feature_size() const {
    std::size_t s = input_size;
    for (std::size_t i = 0; i < stages.size(); ++i) s = (s - pool) / pool + 1;
    return s;
  }

  void validate() const {
    if (input_channels != 1 && input_channels != 3)
      throw ConfigError("backbone: input_channels must be 1 or 3, got " + std::to_string(input_channels));
    if (stages.empty()) throw ConfigError("backbone: at least one stage is required");
    if (kernel == 0 || kernel % 2 == 0) throw ConfigError("backbone: kernel must be odd");
    if (pool == 0) throw ConfigError("backbone: pool must be positive");
    if (global_dim == 0) throw ConfigError("backbone: global_dim must be positive");
    for (auto c : stages)
      if (c == 0) throw ConfigError("backbone: stage channels must be positive");
    std::size_t s = input_size;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (s < pool) throw ConfigError("backbone: input_size " + std::to_string(input_size) + " too small for " +
                                      std::to_string(stages.size()) + " pooling stages");
      s = (s - pool) / pool + 1;
    }
    if (s < kGridSide || s % kGridSide != 0) {
      throw ConfigError("backbone: final feature map is " + std::to_string(s) + "x" + std::to_string(s) +
                        ", must be at least 3 and divisible by 3");
    }
  }
};

struct ModelConfig {
  BackboneConfig backbone;
  bool graph_branch = true;  // false: classifier sees only the global vector
  GraphVariant variant = GraphVariant::V1;
  std::size_t gcn_layers = 1;
  std::size_t gcn_dim = 64;
  Aggregation aggregation = Aggregation::Concat;
  std::size_t num_classes = 7;

  std::size_t head_inputs() const {
    if (!graph_branch) return backbone.global_dim;
    return backbone.global_dim + (aggregation == Aggregation::Concat ? kGridNodes * gcn_dim : gcn_dim);
  }

  void validate() const {
    backbone.validate();
    if (num_classes < 2) throw ConfigError("model: num_classes must be at least 2");
    if (graph_branch && (gcn_layers == 0 || gcn_dim == 0))
      throw ConfigError("model: gcn_layers and gcn_dim must be positive");
  }
};

// Tiny configuration used for gradient verification: 12x12 input, two 4-channel
// stages (12 -> 6 -> 3), node_dim 4, global_dim 8, three classes.
inline ModelConfig tiny_model_config(GraphVariant variant = GraphVariant::V1) {
  ModelConfig cfg;
  cfg.backbone.input_size = 12;
  cfg.backbone.stages = {4, 4};
  cfg.backbone.global_dim = 8;
  cfg.gcn_dim = 4;
  cfg.num_classes = 3;
  cfg.variant = variant;
  return cfg;
}

// Named trainable tensors in a fixed registration order.
template <class T>
class ModelParams {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
  };

  void add(std::string name, Tensor<T> tensor) {
    if (find(name)) throw ContractError("duplicate parameter name " + name);
    entries_.push_back({std::move(name), std::move(tensor)});
  }

  const Tensor<T>* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e.tensor;
    return nullptr;
  }
  Tensor<T>* find(const std::string& name) {
    for (auto& e : entries_)
      if (e.name == name) return &e.tensor;
    return nullptr;
  }
  const Tensor<T>& get(const std::string& name) const {
    if (const auto* t = find(name)) return *t;
    throw ContractError("unknown parameter " + name);
  }
  Tensor<T>& get(const std::string& name) {
    if (auto* t = find(name)) return *t;
    throw ContractError("unknown parameter " + name);
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  // Independent copy of every value (gradients dropped).
  ModelParams clone() const {
    ModelParams out;
    for (const auto& e : entries_) out.add(e.name, e.tensor.clone(true));
    return out;
  }

  // Digest over names, shapes and raw values of parameters whose name starts
  // with `prefix`.
  std::uint64_t digest(std::string_view prefix = "") const {
    Fnv1a h;
    for (const auto& e : entries_) {
      if (!e.name.starts_with(prefix)) continue;
      h.text(e.name);
      for (auto d : e.tensor.shape()) h.bytes(&d, sizeof d);
      h.values(e.tensor.data());
    }
    return h.digest();
  }

 private:
  std::vector<Entry> entries_;
};

// Uniform He-style initialization U(-sqrt(6/fan_in), sqrt(6/fan_in)); each
// tensor draws from its own stream keyed by (seed, name).
template <class T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed, const std::string& name) {
  auto rng = stream_rng(seed, "init:" + name);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(values), true);
}

template <class T>
void init_backbone_params(ModelParams<T>& params, const BackboneConfig& cfg, std::uint64_t seed) {
  std::size_t in = cfg.input_channels;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const std::string prefix = "backbone.conv" + std::to_string(i);
    const std::size_t out = cfg.stages[i];
    params.add(prefix + ".weight",
               he_uniform<T>({out, in, cfg.kernel, cfg.kernel}, in * cfg.kernel * cfg.kernel, seed, prefix + ".weight"));
    params.add(prefix + ".bias", Tensor<T>::zeros({out}, true));
    in = out;
  }
  const std::size_t fs = cfg.feature_size();
  const std::size_t flat = cfg.feature_channels() * fs * fs;
  params.add("backbone.global.weight", he_uniform<T>({cfg.global_dim, flat}, flat, seed, "backbone.global.weight"));
  params.add("backbone.global.bias", Tensor<T>::zeros({cfg.global_dim}, true));
}

template <class T>
struct Features {
  Tensor<T> feature_map;  // [C_f x H_f x W_f]
  Tensor<T> global_vec;   // [global_dim]
};

// Conv(same padding) + bias -> ReLU -> maxpool per stage, then
// global = ReLU(W_g flatten(map) + b_g).
template <class T>
Features<T> forward_features(Tape<T>& tape, const Tensor<T>& image, const ModelParams<T>& params,
                             const BackboneConfig& cfg) {
  const Shape expected{cfg.input_channels, cfg.input_size, cfg.input_size};
  if (image.shape() != expected) {
    throw ConfigError("backbone: expected image " + shape_str(expected) + ", got " + shape_str(image.shape()));
  }
  Tensor<T> x = image;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const std::string prefix = "backbone.conv" + std::to_string(i);
    x = ops::conv2d(tape, x, params.get(prefix + ".weight"), params.get(prefix + ".bias"), 1, cfg.kernel / 2);
    x = ops::relu(tape, x);
    x = ops::maxpool2d(tape, x, cfg.pool, cfg.pool);
  }
  auto global = ops::relu(
      tape, ops::linear(tape, params.get("backbone.global.weight"), ops::flatten(tape, x), params.get("backbone.global.bias")));
  return {x, global};
}

// Partitions [C x H x W] into a 3x3 grid of (H/3)x(W/3) cells and averages each
// cell per channel. Row i of the [9 x C] result is region i in row-major order.
template <class T>
Tensor<T> slice_feature_map(Tape<T>& tape, const Tensor<T>& feature_map) {
  if (feature_map.rank() != 3 || feature_map.dim(1) % kGridSide != 0 || feature_map.dim(2) % kGridSide != 0) {
    throw ShapeError("slice_feature_map: spatial dims must be divisible by 3, got " +
                     shape_str(feature_map.shape()));
  }
  const std::size_t c = feature_map.dim(0);
  const std::size_t ch = feature_map.dim(1) / kGridSide, cw = feature_map.dim(2) / kGridSide;
  auto pooled = ops::avgpool2d(tape, feature_map, ch, cw, ch, cw);  // [C x 3 x 3]
  return ops::transpose(tape, ops::reshape(tape, pooled, {c, kGridNodes}));
}

template <class T>
struct ModelOutputs {
  Tensor<T> feature_map;
  Tensor<T> global_vec;
  Tensor<T> nodes;     // [9 x C_f]; undefined for the CNN-only model
  Tensor<T> node_out;  // [9 x gcn_dim] after the last GCN layer
  Tensor<T> graph_vec; // aggregated node output
  Tensor<T> probs;     // [K]
};

template <class T>
class GcfModel {
 public:
  GcfModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    init_backbone_params(params_, config_.backbone, seed);
    std::size_t head_in = config_.head_inputs();
    if (config_.graph_branch) {
      topology_ = build_adjacency(config_.variant);
      adjacency_ = topology_->normalized.template to_tensor<T>();
      std::size_t din = config_.backbone.feature_channels();
      for (std::size_t l = 0; l < config_.gcn_layers; ++l) {
        const std::string name = "gcn.layer" + std::to_string(l) + ".weight";
        params_.add(name, he_uniform<T>({din, config_.gcn_dim}, din, seed, name));
        din = config_.gcn_dim;
      }
    }
    params_.add("head.fc.weight", he_uniform<T>({config_.num_classes, head_in}, head_in, seed, "head.fc.weight"));
    params_.add("head.fc.bias", Tensor<T>::zeros({config_.num_classes}, true));
  }

  const ModelConfig& config() const { return config_; }
  ModelParams<T>& params() { return params_; }
  const ModelParams<T>& params() const { return params_; }
  const std::optional<GraphTopology>& topology() const { return topology_; }
  const Tensor<T>& normalized_adjacency() const { return adjacency_; }

  ModelOutputs<T> forward(Tape<T>& tape, const Tensor<T>& image) const {
    ModelOutputs<T> out;
    auto features = forward_features(tape, image, params_, config_.backbone);
    out.feature_map = features.feature_map;
    out.global_vec = features.global_vec;
    if (!config_.graph_branch) {
      out.probs = classify_global(tape, out.global_vec, params_.get("head.fc.weight"), params_.get("head.fc.bias"));
      return out;
    }
    out.nodes = slice_feature_map(tape, out.feature_map);
    Tensor<T> h = out.nodes;
    for (std::size_t l = 0; l < config_.gcn_layers; ++l)
      h = gcn_layer_forward(tape, h, adjacency_, params_.get("gcn.layer" + std::to_string(l) + ".weight"));
    out.node_out = h;
    out.graph_vec = aggregate_nodes(tape, h, config_.aggregation);
    out.probs = fuse_and_classify(tape, out.global_vec, out.graph_vec, params_.get("head.fc.weight"),
                                  params_.get("head.fc.bias"));
    return out;
  }

  Tensor<T> predict_proba(const Tensor<T>& image) const {
    Tape<T> tape(false);
    return forward(tape, image).probs;
  }

 private:
  ModelConfig config_;
  ModelParams<T> params_;
  std::optional<GraphTopology> topology_;
  Tensor<T> adjacency_;
};

}  // namespace gcf
