#pragma once

// Region graph over the 3x3 grid of face cells and the graph-convolution
// fusion head: adjacency variants, degree normalization, the GCN layer, node
// aggregation and concat fusion into a softmax classifier.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gcf/errors.hpp"
#include "gcf/ops.hpp"
#include "gcf/tensor.hpp"

namespace gcf {

inline constexpr std::size_t kGridSide = 3;
inline constexpr std::size_t kGridNodes = kGridSide * kGridSide;

// V1: bidirectional 4-neighbourhood. V2: cross-linked edges pointing left to
// right. V3: cross-linked edges pointing right to left (transpose of V2).
enum class GraphVariant { V1, V2, V3 };

inline std::string_view variant_name(GraphVariant v) {
  switch (v) {
    case GraphVariant::V1: return "V1";
    case GraphVariant::V2: return "V2";
    case GraphVariant::V3: return "V3";
  }
  return "?";
}

inline GraphVariant parse_variant(std::string_view text) {
  if (text == "v1" || text == "V1") return GraphVariant::V1;
  if (text == "v2" || text == "V2") return GraphVariant::V2;
  if (text == "v3" || text == "V3") return GraphVariant::V3;
  throw ConfigError("unknown graph variant '" + std::string(text) + "' (expected v1, v2 or v3)");
}

// Small dense row-major matrix for adjacency algebra (always 64-bit).
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

  double& operator()(std::size_t i, std::size_t j) { return values[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return values[i * cols + j]; }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  Matrix transposed() const {
    Matrix t(cols, rows);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  std::size_t nonzeros() const {
    std::size_t n = 0;
    for (double v : values) n += (v != 0.0);
    return n;
  }

  bool operator==(const Matrix&) const = default;

  template <class T>
  Tensor<T> to_tensor() const {
    return Tensor<T>({rows, cols}, std::vector<T>(values.begin(), values.end()));
  }
};

// Â = D_r^{-1/2} (A + I) D_c^{-1/2}, D_r / D_c the row / column sums of A + I.
// For symmetric A both degree matrices coincide.
inline Matrix normalize_adjacency(const Matrix& adjacency) {
  if (adjacency.rows != adjacency.cols) {
    throw ShapeError("normalize_adjacency: matrix must be square, got " + std::to_string(adjacency.rows) + "x" +
                     std::to_string(adjacency.cols));
  }
  const std::size_t n = adjacency.rows;
  Matrix looped = adjacency;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double v = adjacency(i, j);
      if (v < 0.0 || !std::isfinite(v)) {
        throw ContractError("normalize_adjacency: entry (" + std::to_string(i) + "," + std::to_string(j) +
                            ") is negative or non-finite");
      }
    }
    if (adjacency(i, i) != 0.0) {
      throw ContractError("normalize_adjacency: diagonal entry " + std::to_string(i) + " must be zero");
    }
    looped(i, i) = 1.0;
  }
  std::vector<double> row_deg(n, 0.0), col_deg(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      row_deg[i] += looped(i, j);
      col_deg[j] += looped(i, j);
    }
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out(i, j) = looped(i, j) / (std::sqrt(row_deg[i]) * std::sqrt(col_deg[j]));
  return out;
}

struct GraphTopology {
  GraphVariant variant = GraphVariant::V1;
  std::size_t nodes = kGridNodes;
  Matrix adjacency;   // binary, zero diagonal
  Matrix normalized;  // normalize_adjacency(adjacency)
};

// Nodes are the grid cells in row-major order (node 0 = top-left).
inline GraphTopology build_adjacency(GraphVariant variant) {
  const auto cell = [](std::size_t r, std::size_t c) { return r * kGridSide + c; };
  Matrix a(kGridNodes, kGridNodes);
  if (variant == GraphVariant::V1) {
    for (std::size_t r = 0; r < kGridSide; ++r)
      for (std::size_t c = 0; c < kGridSide; ++c) {
        if (c + 1 < kGridSide) a(cell(r, c), cell(r, c + 1)) = a(cell(r, c + 1), cell(r, c)) = 1.0;
        if (r + 1 < kGridSide) a(cell(r, c), cell(r + 1, c)) = a(cell(r + 1, c), cell(r, c)) = 1.0;
      }
  } else {
    // Each cell points at its right, up-right and down-right neighbours.
    for (std::size_t r = 0; r < kGridSide; ++r)
      for (std::size_t c = 0; c + 1 < kGridSide; ++c) {
        a(cell(r, c), cell(r, c + 1)) = 1.0;
        if (r > 0) a(cell(r, c), cell(r - 1, c + 1)) = 1.0;
        if (r + 1 < kGridSide) a(cell(r, c), cell(r + 1, c + 1)) = 1.0;
      }
    if (variant == GraphVariant::V3) a = a.transposed();
  }
  GraphTopology topo;
  topo.variant = variant;
  topo.adjacency = a;
  topo.normalized = normalize_adjacency(a);
  return topo;
}

enum class Activation { Relu, Identity };

// sigma(Â H W) for H[n x d_in], Â[n x n], W[d_in x d_out].
template <class T>
Tensor<T> gcn_layer_forward(Tape<T>& tape, const Tensor<T>& features, const Tensor<T>& normalized_adjacency,
                            const Tensor<T>& weight, Activation activation = Activation::Relu) {
  if (features.rank() != 2 || normalized_adjacency.rank() != 2 || weight.rank() != 2 ||
      normalized_adjacency.dim(0) != normalized_adjacency.dim(1) ||
      normalized_adjacency.dim(1) != features.dim(0) || features.dim(1) != weight.dim(0)) {
    throw ShapeError("gcn_layer_forward: inconsistent shapes H" + shape_str(features.shape()) + " A" +
                     shape_str(normalized_adjacency.shape()) + " W" + shape_str(weight.shape()));
  }
  auto mixed = ops::matmul(tape, normalized_adjacency, ops::matmul(tape, features, weight));
  return activation == Activation::Relu ? ops::relu(tape, mixed) : mixed;
}

enum class Aggregation { Concat, Mean };

// Nine node rows -> one vector: row-major concatenation (length 9*d) or the
// mean row (length d).
template <class T>
Tensor<T> aggregate_nodes(Tape<T>& tape, const Tensor<T>& node_outputs, Aggregation mode = Aggregation::Concat) {
  if (node_outputs.rank() != 2 || node_outputs.dim(0) != kGridNodes) {
    throw ShapeError("aggregate_nodes: expected 9 node rows, got " + shape_str(node_outputs.shape()));
  }
  if (mode == Aggregation::Concat) return ops::flatten(tape, node_outputs);
  const std::size_t d = node_outputs.dim(1);
  auto averager = Tensor<T>::filled({1, kGridNodes}, T(1) / static_cast<T>(kGridNodes));
  return ops::reshape(tape, ops::matmul(tape, averager, node_outputs), {d});
}

// softmax(W_fc [global ; gcn] + b_fc).
template <class T>
Tensor<T> fuse_and_classify(Tape<T>& tape, const Tensor<T>& global_vec, const Tensor<T>& gcn_vec,
                            const Tensor<T>& fc_weight, const Tensor<T>& fc_bias) {
  if (global_vec.rank() != 1 || gcn_vec.rank() != 1 || fc_weight.rank() != 2 || fc_bias.rank() != 1 ||
      fc_weight.dim(1) != global_vec.size() + gcn_vec.size() || fc_bias.dim(0) != fc_weight.dim(0)) {
    throw ShapeError("fuse_and_classify: global" + shape_str(global_vec.shape()) + " gcn" +
                     shape_str(gcn_vec.shape()) + " W_fc" + shape_str(fc_weight.shape()) + " b_fc" +
                     shape_str(fc_bias.shape()));
  }
  auto fused = ops::concat(tape, {global_vec, gcn_vec}, 0);
  return ops::softmax(tape, ops::linear(tape, fc_weight, fused, fc_bias));
}

// Classifier over the global vector alone (graph branch ablated).
template <class T>
Tensor<T> classify_global(Tape<T>& tape, const Tensor<T>& global_vec, const Tensor<T>& fc_weight,
                          const Tensor<T>& fc_bias) {
  if (global_vec.rank() != 1 || fc_weight.rank() != 2 || fc_weight.dim(1) != global_vec.size() ||
      fc_bias.rank() != 1 || fc_bias.dim(0) != fc_weight.dim(0)) {
    throw ShapeError("classify_global: global" + shape_str(global_vec.shape()) + " W_fc" +
                     shape_str(fc_weight.shape()));
  }
  return ops::softmax(tape, ops::linear(tape, fc_weight, global_vec, fc_bias));
}

}  // namespace gcf
