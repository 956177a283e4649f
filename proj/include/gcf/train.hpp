#pragma once

// Loss, optimizer, training loop, evaluation and gradient verification.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "gcf/errors.hpp"
#include "gcf/model.hpp"
#include "gcf/ops.hpp"
#include "gcf/tensor.hpp"
#include "gcf/util.hpp"

namespace gcf {

inline constexpr double kCrossEntropyEpsilon = 1e-12;

// -ln(probs[label] + eps).
template <class T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& probs, std::size_t label) {
  if (probs.rank() != 1) throw ShapeError("cross_entropy: expected a probability vector, got " + shape_str(probs.shape()));
  if (label >= probs.size()) {
    throw ContractError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                        std::to_string(probs.size()) + " classes");
  }
  const T eps = static_cast<T>(kCrossEntropyEpsilon);
  const T p = probs[label] + eps;
  return tape.record("cross_entropy", {probs}, Tensor<T>::scalar(-std::log(p)),
                     [label, p](std::span<const T> g, std::span<std::span<T>> gi) { gi[0][label] -= g[0] / p; });
}

template <class T>
struct LabeledSet {
  std::vector<Tensor<T>> images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }

  LabeledSet subset(const std::vector<std::size_t>& indices) const {
    LabeledSet out;
    out.num_classes = num_classes;
    for (auto i : indices) {
      out.images.push_back(images.at(i));
      out.labels.push_back(labels.at(i));
    }
    return out;
  }
};

// SGD with momentum: v <- momentum * v + g; p <- p - lr * v. Gradients are
// zeroed after the update.
template <class T>
class SgdMomentum {
 public:
  SgdMomentum(double learning_rate, double momentum) : lr_(learning_rate), momentum_(momentum) {
    if (!(learning_rate > 0.0)) throw ContractError("sgd: learning rate must be positive");
    if (momentum < 0.0) throw ContractError("sgd: momentum must be non-negative");
  }

  void step(ModelParams<T>& params) {
    for (auto& e : params.entries()) {
      auto& t = e.tensor;
      if (!t.has_grad()) t.zero_grad();
      auto& vel = velocity_[e.name];
      if (vel.empty()) vel.assign(t.size(), T(0));
      if (vel.size() != t.size()) throw ContractError("sgd: velocity shape changed for " + e.name);
      auto g = t.grad();
      auto p = t.mutable_data();
      const T lr = static_cast<T>(lr_), mom = static_cast<T>(momentum_);
      for (std::size_t i = 0; i < p.size(); ++i) {
        vel[i] = mom * vel[i] + g[i];
        p[i] -= lr * vel[i];
      }
      t.zero_grad();
    }
  }

  double learning_rate() const { return lr_; }

 private:
  double lr_;
  double momentum_;
  std::unordered_map<std::string, std::vector<T>> velocity_;
};

// Explicit-gradient form used by the optimizer tests: applies `gradients`
// (same order and sizes as params) and then clears parameter gradients.
template <class T>
void sgd_step(ModelParams<T>& params, const std::vector<std::vector<T>>& gradients, SgdMomentum<T>& optimizer) {
  if (gradients.size() != params.size()) throw ContractError("sgd_step: gradient count does not match parameters");
  for (std::size_t i = 0; i < gradients.size(); ++i) {
    auto& t = params.entries()[i].tensor;
    if (gradients[i].size() != t.size()) {
      throw ContractError("sgd_step: gradient for " + params.entries()[i].name + " has " +
                          std::to_string(gradients[i].size()) + " values, expected " + std::to_string(t.size()));
    }
    auto g = t.mutable_grad();
    std::copy(gradients[i].begin(), gradients[i].end(), g.begin());
  }
  optimizer.step(params);
}

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 42;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
    if (batch_size == 0) throw ConfigError("train: batch_size must be at least 1");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must be in [0, 1)");
  }
};

struct EvalReport {
  std::size_t samples = 0;
  double accuracy = 0.0;
  double loss = 0.0;  // mean cross-entropy
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<double> precision;
  std::vector<double> recall;

  std::size_t correct() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < confusion.size(); ++i) n += confusion[i][i];
    return n;
  }
};

inline EvalReport report_from_confusion(std::vector<std::vector<std::size_t>> confusion, double loss_sum) {
  EvalReport r;
  const std::size_t k = confusion.size();
  r.confusion = std::move(confusion);
  for (const auto& row : r.confusion) r.samples += std::accumulate(row.begin(), row.end(), std::size_t{0});
  r.accuracy = r.samples ? static_cast<double>(r.correct()) / static_cast<double>(r.samples) : 0.0;
  r.loss = r.samples ? loss_sum / static_cast<double>(r.samples) : 0.0;
  r.precision.assign(k, 0.0);
  r.recall.assign(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t predicted = 0, actual = 0;
    for (std::size_t o = 0; o < k; ++o) {
      predicted += r.confusion[o][c];
      actual += r.confusion[c][o];
    }
    if (predicted) r.precision[c] = static_cast<double>(r.confusion[c][c]) / static_cast<double>(predicted);
    if (actual) r.recall[c] = static_cast<double>(r.confusion[c][c]) / static_cast<double>(actual);
  }
  return r;
}

template <class T>
std::size_t argmax(const Tensor<T>& v) {
  auto d = v.data();
  return static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
}

template <class T>
EvalReport evaluate(const GcfModel<T>& model, const LabeledSet<T>& split) {
  if (split.empty()) throw ContractError("evaluate: empty split");
  const std::size_t k = model.config().num_classes;
  std::vector<std::vector<std::size_t>> confusion(k, std::vector<std::size_t>(k, 0));
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto probs = model.predict_proba(split.images[i]);
    const std::size_t label = split.labels[i];
    if (label >= k) throw ContractError("evaluate: label " + std::to_string(label) + " out of range");
    confusion[label][argmax(probs)] += 1;
    loss_sum += -std::log(static_cast<double>(probs[label]) + kCrossEntropyEpsilon);
  }
  return report_from_confusion(std::move(confusion), loss_sum);
}

struct EpochMetrics {
  std::size_t epoch = 0;  // 0 = before any update
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double test_loss = 0.0;
  double test_accuracy = 0.0;
};

template <class T>
struct TrainResult {
  ModelParams<T> best_params;
  std::size_t best_epoch = 0;
  double best_test_accuracy = 0.0;
  std::vector<EpochMetrics> history;
};

// One optimizer step over `batch`; returns the mean loss. Throws NumericError
// on a non-finite loss.
template <class T>
double train_batch(GcfModel<T>& model, const LabeledSet<T>& data, std::span<const std::size_t> batch,
                   SgdMomentum<T>& optimizer, std::size_t* correct = nullptr) {
  Tape<T> tape;
  std::vector<Tensor<T>> losses;
  losses.reserve(batch.size());
  for (auto idx : batch) {
    auto out = model.forward(tape, data.images[idx]);
    if (correct && argmax(out.probs) == data.labels[idx]) ++*correct;
    losses.push_back(cross_entropy(tape, out.probs, data.labels[idx]));
  }
  auto total = ops::concat(tape, losses, 0);
  auto loss = ops::mean(tape, total);
  const double value = static_cast<double>(loss.item());
  if (!std::isfinite(value)) throw NumericError("non-finite loss");
  model.params().zero_grad();
  tape.backward(loss);
  optimizer.step(model.params());
  return value;
}

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Mini-batch SGD over `train_set`, evaluating `test_set` after every epoch.
// Epoch 0 records the untrained model. The returned parameters are those of
// the epoch with the highest test accuracy (earliest on ties).
template <class T>
TrainResult<T> train(GcfModel<T>& model, const LabeledSet<T>& train_set, const LabeledSet<T>& test_set,
                     const TrainConfig& config, const EpochCallback& on_epoch = {}) {
  config.validate();
  if (train_set.empty()) throw ContractError("train: empty training split");
  if (test_set.empty()) throw ContractError("train: empty test split");

  SgdMomentum<T> optimizer(config.learning_rate, config.momentum);
  auto shuffle_rng = stream_rng(config.seed, "shuffle");
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult<T> result;
  {
    const auto before_train = evaluate(model, train_set);
    const auto before_test = evaluate(model, test_set);
    EpochMetrics m{0, before_train.loss, before_train.accuracy, before_test.loss, before_test.accuracy};
    result.history.push_back(m);
    result.best_params = model.params().clone();
    result.best_test_accuracy = m.test_accuracy;
    if (on_epoch) on_epoch(m);
  }

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0, batch_no = 0; start < order.size(); start += config.batch_size, ++batch_no) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::span<const std::size_t> batch(order.data() + start, end - start);
      double loss;
      try {
        loss = train_batch(model, train_set, batch, optimizer, &correct);
      } catch (const NumericError&) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no));
      }
      loss_sum += loss * static_cast<double>(batch.size());
    }
    const auto test = evaluate(model, test_set);
    EpochMetrics m{epoch, loss_sum / static_cast<double>(order.size()),
                   static_cast<double>(correct) / static_cast<double>(order.size()), test.loss, test.accuracy};
    result.history.push_back(m);
    if (m.test_accuracy > result.best_test_accuracy) {
      result.best_test_accuracy = m.test_accuracy;
      result.best_epoch = epoch;
      result.best_params = model.params().clone();
    }
    if (on_epoch) on_epoch(m);
  }
  return result;
}

// Copies values of `source` into the model's parameters (names and shapes must
// match).
template <class T>
void assign_params(ModelParams<T>& target, const ModelParams<T>& source) {
  for (auto& e : target.entries()) {
    const auto& src = source.get(e.name);
    if (src.shape() != e.tensor.shape())
      throw ContractError("assign_params: shape mismatch for " + e.name);
    std::copy(src.data().begin(), src.data().end(), e.tensor.mutable_data().begin());
  }
}

struct TensorGradCheck {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<TensorGradCheck> tensors;
  double max_rel_error = 0.0;
  double kink_margin = 0.0;  // closest approach to a relu/maxpool kink at the probe point
  std::size_t attempts = 1;
  double tolerance = 1e-4;
  bool pass() const { return max_rel_error < tolerance; }
};

struct GradCheckOptions {
  std::size_t samples_per_tensor = 20;
  double step = 1e-5;
  double tolerance = 1e-4;
  // Re-initialize until every relu pre-activation and maxpool gap at the probe
  // point is at least this far from its kink (0 disables).
  double min_kink_margin = 0.0;
  std::size_t max_attempts = 500;
  std::uint64_t seed = 7;
  // Test hook: scales the backward rule of the named op.
  std::string fault_op;
  double fault_scale = 1.0;
};

// |a - n| / max(|a|, |n|, floor): relative where gradients are sizeable,
// absolute for gradients near zero.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {
inline double sample_loss(const GcfModel<double>& model, const Tensor<double>& image, std::size_t label) {
  Tape<double> tape(false);
  auto probs = model.forward(tape, image).probs;
  return -std::log(probs[label] + kCrossEntropyEpsilon);
}
}  // namespace detail

// Compares analytic gradients of the cross-entropy of one sample against
// central differences on up to `samples_per_tensor` random entries of every
// parameter tensor.
inline GradCheckReport grad_check(GcfModel<double>& model, const Tensor<double>& image, std::size_t label,
                                  const GradCheckOptions& options = {}) {
  GradCheckReport report;
  report.tolerance = options.tolerance;
  auto rng = stream_rng(options.seed, "gradcheck");

  auto analytic_pass = [&](Tape<double>& tape) {
    if (!options.fault_op.empty()) tape.inject_fault(options.fault_op, options.fault_scale);
    auto probs = model.forward(tape, image).probs;
    auto loss = cross_entropy(tape, probs, label);
    model.params().zero_grad();
    tape.backward(loss);
  };

  Tape<double> tape;
  analytic_pass(tape);
  if (options.min_kink_margin > 0.0) {
    std::uniform_real_distribution<double> jitter(-1.0, 1.0);
    while (tape.kink_margin() < options.min_kink_margin) {
      if (report.attempts >= options.max_attempts) {
        throw ContractError("grad_check: could not place parameters away from kinks after " +
                            std::to_string(report.attempts) + " attempts");
      }
      ++report.attempts;
      // Fresh draw from the same He-uniform family; biases get small offsets so
      // exact-zero pre-activations cannot occur.
      GcfModel<double> fresh(model.config(), rng());
      for (auto& e : fresh.params().entries()) {
        if (e.name.ends_with(".bias"))
          for (auto& v : e.tensor.mutable_data()) v = 0.1 * jitter(rng);
      }
      assign_params(model.params(), fresh.params());
      tape.clear();
      analytic_pass(tape);
    }
  }
  report.kink_margin = tape.kink_margin();

  for (auto& e : model.params().entries()) {
    TensorGradCheck tc{e.name, 0, 0.0};
    std::vector<std::size_t> idx(e.tensor.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > options.samples_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(options.samples_per_tensor);
    }
    auto values = e.tensor.mutable_data();
    for (auto i : idx) {
      const double original = values[i];
      values[i] = original + options.step;
      const double up = detail::sample_loss(model, image, label);
      values[i] = original - options.step;
      const double down = detail::sample_loss(model, image, label);
      values[i] = original;
      const double numeric = (up - down) / (2.0 * options.step);
      tc.max_rel_error = std::max(tc.max_rel_error, relative_error(e.tensor.grad()[i], numeric));
      ++tc.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, tc.max_rel_error);
    report.tensors.push_back(tc);
  }
  return report;
}

}  // namespace gcf
