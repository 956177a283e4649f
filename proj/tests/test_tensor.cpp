#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "gcf/ops.hpp"
#include "gcf/tensor.hpp"
#include "test_support.hpp"

namespace gcf {
namespace {

using testing::fd_max_rel_error;
using testing::max_abs_diff;
using testing::random_tensor;
using D = double;
using TD = Tensor<double>;

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(TD({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(TD({0, 3}, {}), ShapeError);
  TD t({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(t.size(), 6u);
  EXPECT_FALSE(t.has_grad());
  t.zero_grad();
  EXPECT_EQ(t.grad().size(), 6u);
}

TEST(Matmul, IdentityAndHandExamples) {
  Tape<D> tape;
  TD eye({2, 2}, {1, 0, 0, 1});
  TD m({2, 2}, {1, 2, 3, 4});
  auto r = ops::matmul(tape, eye, m);
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{1, 2, 3, 4}));
  auto dot = ops::matmul(tape, TD({1, 2}, {1, 2}), TD({2, 1}, {3, 4}));
  EXPECT_EQ(dot.shape(), (Shape{1, 1}));
  EXPECT_EQ(dot.item(), 11.0);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  std::mt19937_64 rng(1);
  Tape<D> tape;
  auto a = random_tensor({4, 5}, rng);
  auto b = random_tensor({5, 3}, rng);
  auto c = ops::matmul(tape, a, b);
  const auto expect = testing::naive_matmul({a.data().begin(), a.data().end()}, {b.data().begin(), b.data().end()}, 4, 5, 3);
  EXPECT_LT(max_abs_diff(c.data(), expect), 1e-12);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  Tape<D> tape;
  try {
    ops::matmul(tape, TD::zeros({2, 3}), TD::zeros({4, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x2]"), std::string::npos);
  }
}

TEST(Conv2d, HandExamples) {
  Tape<D> tape;
  auto out = ops::conv2d(tape, TD::filled({1, 3, 3}, 1.0), TD({1, 1, 1, 1}, {2.0}), 1, 0);
  EXPECT_EQ(out.shape(), (Shape{1, 3, 3}));
  for (double v : out.data()) EXPECT_EQ(v, 2.0);

  auto sum = ops::conv2d(tape, TD({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}), TD::filled({1, 1, 3, 3}, 1.0), 1, 0);
  EXPECT_EQ(sum.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(sum.item(), 45.0);
}

TEST(Conv2d, MatchesSixLoopOracle) {
  std::mt19937_64 rng(2);
  for (auto [stride, pad] : {std::pair{1u, 0u}, {1u, 1u}, {2u, 1u}, {2u, 0u}}) {
    Tape<D> tape;
    auto x = random_tensor({3, 8, 8}, rng);
    auto k = random_tensor({4, 3, 3, 3}, rng);
    auto y = ops::conv2d(tape, x, k, stride, pad);
    std::size_t oh, ow;
    const auto expect = testing::naive_conv2d({x.data().begin(), x.data().end()}, 3, 8, 8,
                                              {k.data().begin(), k.data().end()}, 4, 3, stride, pad, oh, ow);
    EXPECT_EQ(y.shape(), (Shape{4, oh, ow}));
    EXPECT_LT(max_abs_diff(y.data(), expect), 1e-10);
  }
}

TEST(Conv2d, KernelLargerThanPaddedInput) {
  Tape<D> tape;
  EXPECT_THROW(ops::conv2d(tape, TD::zeros({1, 2, 2}), TD::zeros({1, 1, 5, 5}), 1, 1), ShapeError);
  EXPECT_THROW(ops::conv2d(tape, TD::zeros({2, 4, 4}), TD::zeros({1, 3, 3, 3}), 1, 0), ShapeError);
}

TEST(Relu, ValuesAndGradient) {
  Tape<D> tape;
  auto y = ops::relu(tape, TD({3}, {-1, 0, 2}));
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{0, 0, 2}));
  auto neg = ops::relu(tape, TD::filled({2, 2}, -3.0));
  for (double v : neg.data()) EXPECT_EQ(v, 0.0);

  TD x({2}, {-1, 2}, true);
  Tape<D> t2;
  t2.backward(ops::sum(t2, ops::relu(t2, x)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);

  TD at_zero({1}, {0.0}, true);
  Tape<D> t3;
  t3.backward(ops::sum(t3, ops::relu(t3, at_zero)));
  EXPECT_EQ(at_zero.grad()[0], 0.0);
}

TEST(Softmax, Examples) {
  Tape<D> tape;
  auto u = ops::softmax(tape, TD::zeros({7}));
  for (double v : u.data()) EXPECT_NEAR(v, 1.0 / 7.0, 1e-15);
  auto big = ops::softmax(tape, TD({2}, {1000, 0}));
  EXPECT_TRUE(std::isfinite(big[0]) && std::isfinite(big[1]));
  EXPECT_NEAR(big[0], 1.0, 1e-12);
  EXPECT_NEAR(big[1], 0.0, 1e-12);
  auto lg = ops::softmax(tape, TD({3}, {std::log(1.0), std::log(2.0), std::log(3.0)}));
  EXPECT_NEAR(lg[0], 1.0 / 6, 1e-12);
  EXPECT_NEAR(lg[1], 2.0 / 6, 1e-12);
  EXPECT_NEAR(lg[2], 3.0 / 6, 1e-12);
}

TEST(Softmax, SumsToOneAndIsShiftInvariant) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> shift(-50, 50);
  for (int trial = 0; trial < 200; ++trial) {
    Tape<D> tape;
    auto x = random_tensor({1 + static_cast<std::size_t>(trial % 9)}, rng, -20, 20);
    auto y = ops::softmax(tape, x);
    double total = 0;
    for (double v : y.data()) {
      EXPECT_GT(v, 0.0);
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
    auto shifted = ops::softmax(tape, ops::add_scalar(tape, x, shift(rng)));
    EXPECT_LT(max_abs_diff(y.data(), shifted.data()), 1e-9);
  }
}

TEST(Backward, SumAndSquare) {
  TD x({2, 3}, std::vector<double>(6, 0.5), true);
  Tape<D> tape;
  tape.backward(ops::sum(tape, x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  TD y({3}, {1, 2, 3}, true);
  Tape<D> t2;
  t2.backward(ops::sum(t2, ops::mul(t2, y, y)));
  EXPECT_EQ(std::vector<double>(y.grad().begin(), y.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, AccumulatesAcrossCalls) {
  TD y({3}, {1, 2, 3}, true);
  Tape<D> tape;
  auto loss = ops::sum(tape, ops::mul(tape, y, y));
  tape.backward(loss);
  tape.backward(loss);
  EXPECT_EQ(std::vector<double>(y.grad().begin(), y.grad().end()), (std::vector<double>{4, 8, 12}));
}

TEST(Backward, UnusedLeafGetsZeroGradient) {
  TD used({2}, {1, 2}, true);
  TD unused({2}, {3, 4}, true);
  Tape<D> tape;
  // `unused` participates with a zero multiplier path that does not reach the loss.
  auto dead = ops::scale(tape, unused, 2.0);
  (void)dead;
  tape.backward(ops::sum(tape, used));
  ASSERT_TRUE(unused.has_grad());
  for (double g : unused.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, ContractErrors) {
  TD x({2}, {1, 2}, true);
  Tape<D> tape;
  auto v = ops::scale(tape, x, 2.0);
  EXPECT_THROW(tape.backward(v), ContractError);  // not scalar
  Tape<D> other;
  auto s = ops::sum(other, x);
  EXPECT_THROW(tape.backward(s), ContractError);  // recorded on a different tape
  EXPECT_THROW(tape.backward(TD::scalar(1.0)), ContractError);
}

TEST(Backward, TapeIsTopologicallyOrdered) {
  std::mt19937_64 rng(4);
  auto a = random_tensor({3, 3}, rng, true);
  Tape<D> tape;
  auto b = ops::relu(tape, ops::matmul(tape, a, a));
  ops::sum(tape, ops::transpose(tape, b));
  std::unordered_set<std::uint64_t> seen;
  for (const auto& rec : tape.records()) {
    for (const auto& in : rec.inputs)
      if (tape.produced(in)) EXPECT_TRUE(seen.count(in.id())) << rec.op;
    seen.insert(rec.output.id());
  }
}

TEST(Ops, PoolingMatchesOracles) {
  std::mt19937_64 rng(5);
  Tape<D> tape;
  auto x = random_tensor({2, 6, 6}, rng);
  auto mp = ops::maxpool2d(tape, x, 2, 2);
  auto ap = ops::avgpool2d(tape, x, 3, 3);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t xx = 0; xx < 3; ++xx) {
        double m = -INFINITY;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) m = std::max(m, x[(c * 6 + 2 * y + dy) * 6 + 2 * xx + dx]);
        EXPECT_EQ(mp[(c * 3 + y) * 3 + xx], m);
      }
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t xx = 0; xx < 2; ++xx) {
        double s = 0;
        for (std::size_t dy = 0; dy < 3; ++dy)
          for (std::size_t dx = 0; dx < 3; ++dx) s += x[(c * 6 + 3 * y + dy) * 6 + 3 * xx + dx];
        EXPECT_NEAR(ap[(c * 2 + y) * 2 + xx], s / 9, 1e-12);
      }
}

TEST(Ops, MaxpoolTieGoesToFirstElement) {
  TD x({1, 2, 2}, {5, 5, 5, 5}, true);
  Tape<D> tape;
  tape.backward(ops::sum(tape, ops::maxpool2d(tape, x, 2, 2)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 0, 0, 0}));
}

TEST(Ops, ConcatRoundTripsBySlicing) {
  std::mt19937_64 rng(6);
  for (std::size_t axis = 0; axis < 2; ++axis) {
    Tape<D> tape;
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor(axis == 0 ? Shape{2, 4} : Shape{3, 2}, rng);
    auto c = ops::concat(tape, {a, b}, axis);
    EXPECT_EQ(c.dim(axis), a.dim(axis) + b.dim(axis));
    auto a2 = ops::slice(tape, c, axis, 0, a.dim(axis));
    auto b2 = ops::slice(tape, c, axis, a.dim(axis), c.dim(axis));
    EXPECT_EQ(max_abs_diff(a.data(), a2.data()), 0.0);
    EXPECT_EQ(max_abs_diff(b.data(), b2.data()), 0.0);
  }
  Tape<D> tape;
  EXPECT_THROW(ops::concat(tape, {TD::zeros({2, 3}), TD::zeros({2, 4})}, 0), ShapeError);
}

TEST(Ops, TransposeReshapeAndElementwise) {
  std::mt19937_64 rng(7);
  Tape<D> tape;
  auto a = random_tensor({3, 5}, rng);
  auto b = random_tensor({3, 5}, rng);
  auto t = ops::transpose(tape, a);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(t[j * 3 + i], a[i * 5 + j]);
  auto r = ops::reshape(tape, a, {5, 3});
  EXPECT_EQ(max_abs_diff(r.data(), a.data()), 0.0);
  EXPECT_THROW(ops::reshape(tape, a, {4, 4}), ShapeError);
  auto s = ops::add(tape, a, b);
  auto p = ops::mul(tape, a, b);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(s[i], a[i] + b[i], 1e-15);
    EXPECT_NEAR(p[i], a[i] * b[i], 1e-15);
  }
  EXPECT_THROW(ops::add(tape, a, t), ShapeError);
}

// Finite-difference check of every differentiable op on small random tensors.
TEST(Ops, FiniteDifferenceGradients) {
  std::mt19937_64 rng(8);
  using In = std::vector<TD>;
  auto weights = [&](Shape s) { return random_tensor(std::move(s), rng); };
  struct Case {
    const char* name;
    In inputs;
    std::function<TD(Tape<D>&, In&)> f;
  };
  auto w34 = weights({3, 4});
  auto w6 = weights({6});
  auto w_conv = weights({2, 3, 3});
  auto w_pool = weights({2, 2, 2});
  auto w_cat = weights({5, 3});
  std::vector<Case> cases;
  cases.push_back({"matmul", {random_tensor({3, 5}, rng, true), random_tensor({5, 4}, rng, true)},
                   [&](Tape<D>& t, In& in) { return ops::sum(t, ops::mul(t, ops::matmul(t, in[0], in[1]), w34)); }});
  cases.push_back({"conv2d", {random_tensor({2, 5, 5}, rng, true), random_tensor({2, 2, 3, 3}, rng, true),
                              random_tensor({2}, rng, true)},
                   [&](Tape<D>& t, In& in) {
                     return ops::sum(t, ops::mul(t, ops::conv2d(t, in[0], in[1], in[2], 2, 1), w_conv));
                   }});
  cases.push_back({"relu", {random_tensor({6}, rng, true)},
                   [&](Tape<D>& t, In& in) { return ops::sum(t, ops::mul(t, ops::relu(t, in[0]), w6)); }});
  cases.push_back({"softmax", {random_tensor({6}, rng, true)},
                   [&](Tape<D>& t, In& in) { return ops::sum(t, ops::mul(t, ops::softmax(t, in[0]), w6)); }});
  cases.push_back({"maxpool", {random_tensor({2, 4, 4}, rng, true)},
                   [&](Tape<D>& t, In& in) { return ops::sum(t, ops::mul(t, ops::maxpool2d(t, in[0], 2, 2), w_pool)); }});
  cases.push_back({"avgpool", {random_tensor({2, 4, 4}, rng, true)},
                   [&](Tape<D>& t, In& in) { return ops::sum(t, ops::mul(t, ops::avgpool2d(t, in[0], 2, 2), w_pool)); }});
  cases.push_back({"concat+transpose+reshape", {random_tensor({2, 5}, rng, true), random_tensor({1, 5}, rng, true)},
                   [&](Tape<D>& t, In& in) {
                     auto c = ops::transpose(t, ops::concat(t, {in[0], in[1]}, 0));
                     return ops::sum(t, ops::mul(t, ops::reshape(t, c, {5, 3}), w_cat));
                   }});
  cases.push_back({"slice+scale+add_scalar", {random_tensor({4, 3}, rng, true)},
                   [&](Tape<D>& t, In& in) {
                     auto s = ops::slice(t, in[0], 1, 1, 3);
                     return ops::mean(t, ops::mul(t, ops::add_scalar(t, ops::scale(t, s, 3.0), 0.5), s));
                   }});
  cases.push_back({"linear", {random_tensor({3, 4}, rng, true), random_tensor({4}, rng, true), random_tensor({3}, rng, true)},
                   [&](Tape<D>& t, In& in) {
                     auto y = ops::linear(t, in[0], in[1], in[2]);
                     return ops::sum(t, ops::mul(t, y, y));
                   }});
  for (auto& c : cases) EXPECT_LT(fd_max_rel_error(c.inputs, c.f), 1e-4) << c.name;
}

TEST(Ops, DeterministicBitIdentical) {
  std::mt19937_64 rng(9);
  auto x = random_tensor({3, 8, 8}, rng);
  auto k = random_tensor({4, 3, 3, 3}, rng);
  Tape<D> t1, t2;
  auto a = ops::maxpool2d(t1, ops::relu(t1, ops::conv2d(t1, x, k, 1, 1)), 2, 2);
  auto b = ops::maxpool2d(t2, ops::relu(t2, ops::conv2d(t2, x, k, 1, 1)), 2, 2);
  EXPECT_EQ(0, std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)));
}

TEST(Tape, DisabledTapeRecordsNothing) {
  TD x({2}, {1, 2}, true);
  Tape<D> tape(false);
  auto y = ops::sum(tape, ops::mul(tape, x, x));
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_EQ(y.item(), 5.0);
}

}  // namespace
}  // namespace gcf
