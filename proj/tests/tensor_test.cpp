#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "envisions/rng.hpp"
#include "envisions/tensor.hpp"

namespace envisions {
namespace {

Tensor random_tensor(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t(rows, cols);
  for (double& v : t.values()) v = rng.uniform(-2.0, 2.0);
  return t;
}

// Central differences of a scalar function of one tensor.
Tensor numeric_grad(const std::function<double(const Tensor&)>& f, Tensor at, double h = 1e-5) {
  Tensor g(at.rows(), at.cols());
  for (std::size_t i = 0; i < at.size(); ++i) {
    const double keep = at[i];
    at[i] = keep + h;
    const double up = f(at);
    at[i] = keep - h;
    const double down = f(at);
    at[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

double max_rel_error(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-6});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

TEST(Matmul, IdentityAndDotProduct) {
  Tape tape;
  Var a = tape.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  Var eye = tape.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  EXPECT_EQ(matmul(a, eye).value(), Tensor::matrix({{1, 2}, {3, 4}}));
  Var row = tape.constant(Tensor::matrix({{1, 2}}));
  Var col = tape.constant(Tensor::matrix({{3}, {4}}));
  EXPECT_DOUBLE_EQ(matmul(row, col).value().item(), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape tape;
  Var a = tape.constant(Tensor(2, 3));
  Var b = tape.constant(Tensor(2, 3));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] x [2x3]"), std::string::npos);
  }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  const Tensor b = Tensor::matrix({{3}, {4}});
  Tape tape;
  Tensor a0 = Tensor::matrix({{1, 2}});
  Var a = tape.leaf(Tensor(a0).set_requires_grad(true));
  tape.backward(sum(matmul(a, tape.constant(b))));
  EXPECT_EQ(tape.grad(a), Tensor::matrix({{3, 4}}));
  const Tensor fd = numeric_grad(
      [&](const Tensor& at) {
        Tape t;
        return sum(matmul(t.constant(at), t.constant(b))).value().item();
      },
      a0);
  EXPECT_LT(max_rel_error(tape.grad(a), fd), 1e-8);
}

TEST(Elementwise, KnownValues) {
  Tape tape;
  Var zero = tape.constant(Tensor::scalar(0.0));
  EXPECT_DOUBLE_EQ(tanh(zero).value().item(), 0.0);
  EXPECT_DOUBLE_EQ(sigmoid(zero).value().item(), 0.5);
  EXPECT_DOUBLE_EQ(elementwise(Elementwise::sigmoid, {zero}).value().item(), 0.5);
}

TEST(Elementwise, TanhDerivative) {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(0.3).set_requires_grad(true));
  tape.backward(tanh(x));
  const double expected = 1.0 - std::tanh(0.3) * std::tanh(0.3);
  EXPECT_NEAR(tape.grad(x).item(), expected, 1e-12);
  const Tensor fd = numeric_grad([](const Tensor& at) { return std::tanh(at.item()); }, Tensor::scalar(0.3));
  EXPECT_NEAR(fd.item(), expected, 1e-9);
}

TEST(Elementwise, ShapeMismatchAndScalarBroadcast) {
  Tape tape;
  Var a = tape.constant(Tensor(2, 2, 1.0));
  EXPECT_THROW(add(a, tape.constant(Tensor(1, 2))), DimensionError);
  EXPECT_EQ(mul(a, tape.constant(Tensor::scalar(3.0))).value(), Tensor(2, 2, 3.0));
  EXPECT_EQ(elementwise(Elementwise::add, {a, a, a}).value(), Tensor(2, 2, 3.0));
}

TEST(Embedding, GathersRowsInIdOrder) {
  Tape tape;
  Var table = tape.constant(Tensor::matrix({{0, 0}, {1, 1}, {2, 2}}));
  const std::vector<int> ids{2, 0};
  EXPECT_EQ(embedding_lookup(table, ids).value(), Tensor::matrix({{2, 2}, {0, 0}}));
  const Var empty = embedding_lookup(table, std::vector<int>{});
  EXPECT_EQ(empty.value().rows(), 0u);
  EXPECT_EQ(empty.value().cols(), 2u);
}

TEST(Embedding, OutOfRangeIdNamed) {
  Tape tape;
  Var table = tape.constant(Tensor(3, 2));
  try {
    embedding_lookup(table, std::vector<int>{1, 7});
    FAIL();
  } catch (const IndexError& e) {
    EXPECT_NE(std::string(e.what()).find("7"), std::string::npos);
  }
}

TEST(Embedding, RepeatedIdsSumGradients) {
  Rng rng(5);
  const Tensor table0 = random_tensor(3, 4, rng);
  const Tensor weights = random_tensor(2, 4, rng);
  auto f = [&](const Tensor& t) {
    Tape tape;
    return sum(mul(embedding_lookup(tape.constant(t), std::vector<int>{1, 1}), tape.constant(weights))).value().item();
  };
  Tape tape;
  Var table = tape.leaf(Tensor(table0).set_requires_grad(true));
  tape.backward(sum(mul(embedding_lookup(table, std::vector<int>{1, 1}), tape.constant(weights))));
  const Tensor g = tape.grad(table);
  EXPECT_LT(max_rel_error(g, numeric_grad(f, table0)), 1e-4);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_NEAR(g(1, c), weights(0, c) + weights(1, c), 1e-12);
    EXPECT_EQ(g(0, c), 0.0);
  }
}

TEST(LogSoftmaxNll, UniformAndStability) {
  Tape tape;
  auto uniform = log_softmax_nll(tape.constant(Tensor::matrix({{0, 0}})), std::vector<int>{0});
  EXPECT_NEAR(uniform.per_token_logp[0], std::log(0.5), 1e-15);
  auto peaked = log_softmax_nll(tape.constant(Tensor::matrix({{1000, 0}})), std::vector<int>{0});
  EXPECT_TRUE(std::isfinite(peaked.loss.value().item()));
  EXPECT_NEAR(peaked.per_token_logp[0], 0.0, 1e-12);
}

TEST(LogSoftmaxNll, EmptyTargetsRejected) {
  Tape tape;
  EXPECT_THROW(log_softmax_nll(tape.constant(Tensor(0, 3)), std::vector<int>{}), ContractError);
}

// Reference recomputed in long double.
TEST(LogSoftmaxNll, MatchesHighPrecisionReference) {
  Rng rng(2024);
  const Tensor logits = random_tensor(3, 5, rng);
  long double expected = 0.0L;
  const int targets[] = {4, 0, 2};
  for (std::size_t r = 0; r < 3; ++r) {
    long double z = 0.0L;
    for (std::size_t c = 0; c < 5; ++c) z += std::exp(static_cast<long double>(logits(r, c)));
    expected -= static_cast<long double>(logits(r, static_cast<std::size_t>(targets[r]))) - std::log(z);
  }
  Tape tape;
  auto result = log_softmax_nll(tape.constant(logits), std::vector<int>{4, 0, 2});
  EXPECT_NEAR(result.loss.value().item(), static_cast<double>(expected), 1e-13);
}

TEST(LogSoftmaxNll, RowsExponentiateToOne) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor row = random_tensor(1, 7, rng);
    const auto lp = log_softmax(row.values());
    double total = 0.0;
    for (double v : lp) total += std::exp(v);
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(Backward, SquareAndIndependentParameter) {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(3.0).set_requires_grad(true));
  Var p = tape.leaf(Tensor::scalar(1.5).set_requires_grad(true));
  tape.backward(mul(x, x));
  EXPECT_DOUBLE_EQ(tape.grad(x).item(), 6.0);
  EXPECT_DOUBLE_EQ(tape.grad(p).item(), 0.0);
}

TEST(Backward, RejectsNonScalarAndSecondPass) {
  Tape tape;
  Var x = tape.leaf(Tensor(2, 2, 1.0).set_requires_grad(true));
  EXPECT_THROW(tape.backward(x), ContractError);
  Tape again;
  Var y = again.leaf(Tensor::scalar(2.0).set_requires_grad(true));
  Var loss = mul(y, y);
  again.backward(loss);
  EXPECT_THROW(again.backward(loss), ContractError);
}

// Random composite of every differentiable op, checked against central
// differences over 20 seeds.
TEST(Backward, CompositeGraphMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Tensor w0 = random_tensor(4, 3, rng);
    const Tensor table0 = random_tensor(5, 4, rng);
    const Tensor bias = random_tensor(1, 1, rng);
    const std::vector<int> ids{3, 1, 3};
    const std::vector<int> targets{2, 0, 1};
    auto forward = [&](Tape& tape, Var w, Var table) {
      Var x = embedding_lookup(table, ids);
      Var h = tanh(matmul(x, w));
      Var g = sigmoid(add(h, tape.constant(bias)));
      Var mixed = add(mul(h, g), scale(log_sigmoid(h), 0.5));
      return log_softmax_nll(shift(mixed, 0.25), targets).loss;
    };
    Tape tape;
    Var w = tape.leaf(Tensor(w0).set_requires_grad(true));
    Var table = tape.leaf(Tensor(table0).set_requires_grad(true));
    tape.backward(forward(tape, w, table));
    auto fw = [&](const Tensor& at) {
      Tape t;
      return forward(t, t.constant(at), t.constant(table0)).value().item();
    };
    auto ft = [&](const Tensor& at) {
      Tape t;
      return forward(t, t.constant(w0), t.constant(at)).value().item();
    };
    EXPECT_LT(max_rel_error(tape.grad(w), numeric_grad(fw, w0)), 1e-4) << "seed " << seed;
    EXPECT_LT(max_rel_error(tape.grad(table), numeric_grad(ft, table0)), 1e-4) << "seed " << seed;
  }
}

TEST(Sgd, PlainStepAndClipping) {
  std::vector<Parameter> params{{"p", Tensor::scalar(1.0)}};
  std::vector<Tensor> grads{Tensor::scalar(0.5)};
  sgd_step(params, grads, 0.1);
  EXPECT_DOUBLE_EQ(params[0].value.item(), 0.95);

  std::vector<Parameter> two{{"v", Tensor(1, 2, 0.0)}};
  std::vector<Tensor> big{Tensor::matrix({{6, 8}})};  // norm 10
  const double norm = sgd_step(two, big, 1.0, 1.0);
  EXPECT_DOUBLE_EQ(norm, 10.0);
  EXPECT_NEAR(two[0].value(0, 0), -0.6, 1e-15);
  EXPECT_NEAR(two[0].value(0, 1), -0.8, 1e-15);
}

TEST(Sgd, NonFiniteGradientNamesParameter) {
  std::vector<Parameter> params{{"W_out", Tensor::scalar(1.0)}};
  std::vector<Tensor> grads{Tensor::scalar(std::nan(""))};
  try {
    sgd_step(params, grads, 0.1);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("W_out"), std::string::npos);
  }
  EXPECT_THROW(sgd_step(params, grads, 0.0), ContractError);
}

TEST(Sgd, QuadraticConvergesToAnalyticMinimum) {
  // f(p) = (p - 3)^2 has its minimum at p = 3.
  std::vector<Parameter> params{{"p", Tensor::scalar(-4.0)}};
  for (int step = 0; step < 100; ++step) {
    Tape tape;
    Var p = tape.leaf(Tensor(params[0].value).set_requires_grad(true));
    Var d = shift(p, -3.0);
    tape.backward(mul(d, d));
    std::vector<Tensor> grads{tape.grad(p)};
    sgd_step(params, grads, 0.1, 10.0);
  }
  EXPECT_NEAR(params[0].value.item(), 3.0, 1e-6);
}

}  // namespace
}  // namespace envisions
