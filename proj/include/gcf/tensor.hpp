#pragma once

// Dense row-major tensors with a define-by-run differentiation tape.
//
// A Tensor is a shared handle: copies alias the same buffer, which is what
// lets the tape hold on to operands and write their gradients later. Deep
// copies go through clone().

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gcf/errors.hpp"

namespace gcf {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {
inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is materialized
  bool requires_grad = false;
  std::uint64_t id = 0;
};

template <class T>
class Tape;

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    node_->id = detail::next_node_id();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }
  std::uint64_t id() const { return node_->id; }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> data() const { return node_->data; }
  // Mutation is reserved for initialization and the optimizer.
  std::span<T> mutable_data() { return node_->data; }

  T operator[](std::size_t i) const { return node_->data[i]; }
  T item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    ensure_grad();
    return node_->grad;
  }
  void ensure_grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
  }
  void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }

  Tensor clone(bool requires_grad) const { return Tensor(shape(), node_->data, requires_grad); }
  Tensor clone() const { return clone(requires_grad()); }

  // Fresh tensor with converted element type; gradients are not carried over.
  template <class U>
  Tensor<U> cast(bool requires_grad = false) const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(shape(), std::move(out), requires_grad);
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  friend class Tape<T>;
  std::shared_ptr<TensorNode<T>> node_;
};

// One recorded operation. The backward rule receives the gradient of the
// output and one gradient span per input; spans for inputs that do not need
// gradients are empty. Rules accumulate (+=) into the input spans.
template <class T>
struct TapeRecord {
  using BackwardRule =
      std::function<void(std::span<const T> grad_out, std::span<std::span<T>> grad_in)>;

  std::string op;
  std::vector<Tensor<T>> inputs;
  Tensor<T> output;
  BackwardRule rule;
};

template <class T>
class Tape {
 public:
  using Rule = typename TapeRecord<T>::BackwardRule;

  Tape() = default;
  explicit Tape(bool enabled) : enabled_(enabled) {}

  bool enabled() const { return enabled_; }
  std::size_t size() const { return records_.size(); }
  const std::vector<TapeRecord<T>>& records() const { return records_; }

  // Registers `output` as produced from `inputs`. The output requires a
  // gradient iff any input does; nothing is stored when recording is off or
  // no input is differentiable.
  Tensor<T> record(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T> output, Rule rule) {
    const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor<T>& t) { return t.requires_grad(); });
    output.node_->requires_grad = needs && enabled_;
    if (!output.node_->requires_grad) return output;
    produced_.insert(output.id());
    records_.push_back({std::string(op), std::move(inputs), output, std::move(rule)});
    return output;
  }

  bool produced(const Tensor<T>& t) const { return produced_.count(t.id()) != 0; }

  // Smallest distance from a non-differentiable point seen in forward ops
  // (relu pre-activations at 0, maxpool ties). Used to keep finite-difference
  // probes away from kinks.
  T kink_margin() const { return kink_margin_; }
  void observe_kink(T distance) { kink_margin_ = std::min(kink_margin_, distance); }

  // Test hook: multiplies the input gradients produced by every `op` record by
  // `scale`. Used as the negative control for gradient checking.
  void inject_fault(std::string op, T scale) { faults_[std::move(op)] = scale; }

  void clear() {
    records_.clear();
    produced_.clear();
    kink_margin_ = std::numeric_limits<T>::infinity();
  }

  // Reverse-mode pass from a scalar loss. Intermediate gradients are reset on
  // every call; parameter (leaf) gradients accumulate across calls until the
  // caller zeroes them. Every differentiable leaf reachable from the tape ends
  // with a materialized (possibly all-zero) gradient.
  void backward(Tensor<T> loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw ContractError("backward: loss must be a scalar, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!produced(loss)) throw ContractError("backward: loss tensor was not recorded on this tape");

    for (auto& rec : records_) rec.output.zero_grad();
    for (auto& rec : records_) {
      for (auto& in : rec.inputs) {
        if (in.requires_grad()) in.ensure_grad();
      }
    }
    loss.node_->grad[0] += T(1);

    std::vector<std::span<T>> spans;
    std::vector<std::vector<T>> scratch;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      auto& rec = *it;
      const auto fault = faults_.find(rec.op);
      spans.assign(rec.inputs.size(), std::span<T>{});
      scratch.assign(rec.inputs.size(), {});
      for (std::size_t i = 0; i < rec.inputs.size(); ++i) {
        auto& in = rec.inputs[i];
        if (!in.requires_grad()) continue;
        if (fault != faults_.end()) {
          scratch[i].assign(in.size(), T(0));
          spans[i] = scratch[i];
        } else {
          spans[i] = in.node_->grad;
        }
      }
      rec.rule(rec.output.node_->grad, spans);
      if (fault != faults_.end()) {
        for (std::size_t i = 0; i < rec.inputs.size(); ++i) {
          if (scratch[i].empty()) continue;
          auto& g = rec.inputs[i].node_->grad;
          for (std::size_t j = 0; j < g.size(); ++j) g[j] += fault->second * scratch[i][j];
        }
      }
    }
  }

 private:
  bool enabled_ = true;
  std::vector<TapeRecord<T>> records_;
  std::unordered_set<std::uint64_t> produced_;
  std::unordered_map<std::string, T> faults_;
  T kink_margin_ = std::numeric_limits<T>::infinity();
};

template <class T>
void backward(Tensor<T> loss, Tape<T>& tape) {
  tape.backward(std::move(loss));
}

}  // namespace gcf
