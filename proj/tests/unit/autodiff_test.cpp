#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "memlab/autodiff.hpp"
#include "memlab/errors.hpp"
#include "memlab/rng.hpp"
#include "oracles.hpp"

using memlab::Tape;
using memlab::Tensor;
using memlab::Var;
namespace ad = memlab::ad;

namespace {

using OpFn = std::function<Var(Tape&, const std::vector<Var>&)>;

Tensor random_tensor(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  memlab::Rng rng(seed);
  Tensor t({r, c});
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

// Scalar probe loss: sum(op(inputs) * W) for a fixed random W.
double probe_loss(const std::vector<Tensor>& inputs, const OpFn& op, Tensor* weights,
                  std::vector<Tensor>* grads) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
  Var out = op(tape, vars);
  if (weights->empty()) *weights = random_tensor(out.value().rows(), out.value().cols(), 99);
  Var loss = ad::sum(ad::mul(out, tape.constant(*weights)));
  const double value = loss.value()[0];
  if (grads) {
    tape.backward(loss);
    grads->clear();
    for (Var v : vars) grads->push_back(tape.grad(v));
  }
  return value;
}

void expect_fd_agrees(std::vector<Tensor> inputs, const OpFn& op, double h = 1e-6) {
  Tensor weights;
  std::vector<Tensor> analytic;
  probe_loss(inputs, op, &weights, &analytic);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double numeric = oracle::central_difference(
          [&] { return probe_loss(inputs, op, &weights, nullptr); }, inputs[k].storage()[i], h);
      const double a = analytic[k][i];
      EXPECT_TRUE(oracle::gradients_agree(a, numeric, 1e-4, 1e-8))
          << "input " << k << " entry " << i << ": analytic " << a << " numeric " << numeric;
      worst = std::max(worst, std::fabs(a - numeric));
    }
  }
  ::testing::Test::RecordProperty("max_abs_diff", std::to_string(worst));
}

}  // namespace

TEST(AutodiffFd, Matmul) {
  expect_fd_agrees({random_tensor(3, 4, 1), random_tensor(4, 2, 2)},
                   [](Tape&, const std::vector<Var>& v) { return ad::matmul(v[0], v[1]); });
}

TEST(AutodiffFd, MatmulNt) {
  expect_fd_agrees({random_tensor(3, 4, 3), random_tensor(5, 4, 4)},
                   [](Tape&, const std::vector<Var>& v) { return ad::matmul_nt(v[0], v[1]); });
}

TEST(AutodiffFd, AddAndMul) {
  expect_fd_agrees({random_tensor(2, 3, 5), random_tensor(2, 3, 6)},
                   [](Tape&, const std::vector<Var>& v) { return ad::add(v[0], v[1]); });
  expect_fd_agrees({random_tensor(2, 3, 7), random_tensor(2, 3, 8)},
                   [](Tape&, const std::vector<Var>& v) { return ad::mul(v[0], v[1]); });
}

TEST(AutodiffFd, AddRowBroadcast) {
  expect_fd_agrees({random_tensor(4, 3, 9), random_tensor(1, 3, 10)},
                   [](Tape&, const std::vector<Var>& v) { return ad::add_row(v[0], v[1]); });
}

TEST(AutodiffFd, Scale) {
  expect_fd_agrees({random_tensor(2, 2, 11)},
                   [](Tape&, const std::vector<Var>& v) { return ad::scale(v[0], -2.5); });
}

TEST(AutodiffFd, Gelu) {
  expect_fd_agrees({random_tensor(3, 5, 12, 2.0)},
                   [](Tape&, const std::vector<Var>& v) { return ad::gelu(v[0]); });
}

TEST(AutodiffFd, LayerNorm) {
  expect_fd_agrees({random_tensor(3, 6, 13), random_tensor(1, 6, 14), random_tensor(1, 6, 15)},
                   [](Tape&, const std::vector<Var>& v) { return ad::layer_norm(v[0], v[1], v[2]); });
}

TEST(AutodiffFd, SoftmaxRows) {
  expect_fd_agrees({random_tensor(4, 4, 16)},
                   [](Tape&, const std::vector<Var>& v) { return ad::softmax_rows(v[0]); });
  expect_fd_agrees({random_tensor(4, 4, 17)},
                   [](Tape&, const std::vector<Var>& v) { return ad::softmax_rows(v[0], true); });
}

TEST(AutodiffFd, SliceAndConcat) {
  expect_fd_agrees({random_tensor(3, 6, 18)},
                   [](Tape&, const std::vector<Var>& v) { return ad::slice_cols(v[0], 1, 4); });
  expect_fd_agrees({random_tensor(3, 2, 19), random_tensor(3, 3, 20)},
                   [](Tape&, const std::vector<Var>& v) { return ad::concat_cols(v); });
  expect_fd_agrees({random_tensor(2, 3, 21), random_tensor(1, 3, 22)},
                   [](Tape&, const std::vector<Var>& v) { return ad::concat_rows(v); });
}

TEST(AutodiffFd, GatherRowsAccumulatesRepeats) {
  const std::vector<int> ids{2, 0, 2, 1};
  expect_fd_agrees({random_tensor(4, 3, 23)},
                   [&](Tape&, const std::vector<Var>& v) { return ad::gather_rows(v[0], ids); });
}

TEST(AutodiffFd, TakeRows) {
  const std::vector<std::size_t> idx{3, 1};
  expect_fd_agrees({random_tensor(4, 3, 24)},
                   [&](Tape&, const std::vector<Var>& v) { return ad::take_rows(v[0], idx); });
}

TEST(AutodiffFd, CrossEntropyMasked) {
  const std::vector<int> targets{1, 0, 3};
  const std::vector<bool> mask{true, false, true};
  expect_fd_agrees({random_tensor(3, 4, 25)}, [&](Tape&, const std::vector<Var>& v) {
    return ad::cross_entropy(v[0], targets, mask);
  });
}

TEST(AutodiffFd, ComposedAttentionBlock) {
  expect_fd_agrees({random_tensor(4, 6, 26), random_tensor(6, 6, 27, 0.4), random_tensor(6, 6, 28, 0.4)},
                   [](Tape&, const std::vector<Var>& v) {
                     Var q = ad::matmul(v[0], v[1]);
                     Var k = ad::matmul(v[0], v[2]);
                     Var att = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), 0.4), true);
                     return ad::gelu(ad::matmul(att, v[0]));
                   });
}

TEST(Autodiff, CrossEntropyValueMatchesDirectFormula) {
  Tape tape;
  Tensor logits = Tensor::from_rows({{1.0, 2.0, 0.5}, {0.0, 0.0, 0.0}});
  const std::vector<int> targets{1, 2};
  Var ce = ad::cross_entropy(tape.leaf(logits), targets, {true, true});
  const double z0 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(0.5));
  const double want = ((z0 - 2.0) + std::log(3.0)) / 2.0;
  EXPECT_NEAR(ce.value()[0], want, 1e-14);
}

TEST(Autodiff, CausalSoftmaxMasksExactlyZero) {
  Tape tape;
  Var s = ad::softmax_rows(tape.leaf(random_tensor(3, 3, 29)), true);
  EXPECT_EQ(s.value()(0, 1), 0.0);
  EXPECT_EQ(s.value()(0, 2), 0.0);
  EXPECT_EQ(s.value()(1, 2), 0.0);
  EXPECT_DOUBLE_EQ(s.value()(0, 0), 1.0);
}

TEST(Autodiff, SoftmaxIsStableForLargeLogits) {
  const Tensor big = Tensor::from_rows({{1000.0, 1000.0}});
  const Tensor s = memlab::softmax_rows(big);
  EXPECT_DOUBLE_EQ(s(0, 0), 0.5);
}

TEST(Autodiff, SecondBackwardIsStateError) {
  Tape tape;
  Var x = tape.leaf(Tensor::from_rows({{1.0, 2.0}}));
  Var loss = ad::sum(x);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), memlab::StateError);
}

TEST(Autodiff, UnusedLeafHasZeroGrad) {
  Tape tape;
  Var x = tape.leaf(Tensor::from_rows({{1.0, 2.0}}));
  Var y = tape.leaf(Tensor::from_rows({{3.0}}));
  tape.backward(ad::sum(x));
  const Tensor g = tape.grad(y);
  ASSERT_EQ(g.size(), 1u);
  EXPECT_EQ(g[0], 0.0);
}

TEST(Autodiff, ShapeMismatchThrows) {
  Tape tape;
  Var a = tape.leaf(Tensor({2, 3}));
  Var b = tape.leaf(Tensor({2, 3}));
  EXPECT_THROW(ad::matmul(a, b), memlab::DimensionError);
  const std::vector<int> targets{0, 0};
  EXPECT_THROW(ad::cross_entropy(a, targets, {false, false}), memlab::ContractError);
}
