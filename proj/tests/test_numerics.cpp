#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "affect/error.hpp"
#include "affect/gradcheck.hpp"
#include "affect/ops.hpp"
#include "affect/random.hpp"
#include "affect/suite.hpp"
#include "affect/tensor.hpp"

using namespace affect;
using namespace affect::num;

namespace {

Tensor randn(Shape shape, std::uint64_t seed, bool grad = true) {
  Rng rng(seed);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = normal(rng);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Fixed-weight contraction to a scalar.
Tensor contract(const Tensor& y, std::uint64_t seed) { return sum(mul(y, randn(y.shape(), seed, false))); }

}  // namespace

TEST(Tensor, ConstructionAndShape) {
  const Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t[4], 5.0);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor::zeros({1, 1, 1, 1}), ShapeError);
  EXPECT_THROW(Tensor::zeros({2, 0}), ShapeError);
  EXPECT_THROW(Tensor::from({1}, {NAN}), NumericError);
}

TEST(Tensor, BackwardRequiresScalar) {
  const Tensor x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(scale(x, 2.0).backward(), ShapeError);
}

TEST(Tensor, FanOutAccumulatesAndLeafGradPersists) {
  Tensor x = Tensor::scalar(3.0, true);
  // y = x*x + x, dy/dx = 2x + 1 = 7
  Tensor y = add(mul(x, x), x);
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 14.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Tensor, TopologicalOrderVisitsEachNodeOnce) {
  Tensor x = Tensor::scalar(2.0, true);
  Tensor a = mul(x, x);
  Tensor y = add(a, a);
  const auto order = y.topological_order();
  EXPECT_EQ(order.size(), 3u);
  EXPECT_EQ(order.back()->op, "add");
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
}

TEST(Tensor, NoGraphWithoutGradients) {
  const Tensor a = Tensor::from({2}, {1, 2});
  const Tensor y = mul(a, a);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.topological_order().size() == 1u);
}

TEST(Tensor, MutableDataOnlyForLeaves) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  EXPECT_NO_THROW(x.mutable_data());
  Tensor y = scale(x, 2.0);
  EXPECT_THROW(y.mutable_data(), std::logic_error);
}

TEST(Ops, MatmulExamples) {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(values(matmul(eye, m)), values(m));
  EXPECT_EQ(values(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}))), std::vector<double>{11});
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Ops, MatmulBatchedAgreesWithPerBatchProducts) {
  const Tensor a = randn({3, 2, 4}, 1, false);
  const Tensor b = randn({3, 4, 5}, 2, false);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i) {
    const Tensor ci = matmul(reshape(narrow(a, 0, i, 1), {2, 4}), reshape(narrow(b, 0, i, 1), {4, 5}));
    for (std::size_t k = 0; k < 10; ++k) EXPECT_DOUBLE_EQ(c[i * 10 + k], ci[k]);
  }
}

TEST(Ops, MatmulGradcheck) {
  std::vector<NamedTensor> p{{"a", randn({3, 4}, 3)}, {"b", randn({4, 2}, 4)}};
  const auto r = gradcheck([&] { return contract(matmul(p[0].tensor, p[1].tensor), 5); }, p);
  EXPECT_LT(r.max_rel_error(), 1e-6);
}

TEST(Ops, ElementwiseExamples) {
  EXPECT_EQ(tanh(Tensor::scalar(0.0)).item(), 0.0);
  EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  Tensor x = Tensor::scalar(-3.0, true);
  Tensor y = relu(x);
  EXPECT_EQ(y.item(), 0.0);
  y.backward();
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
  EXPECT_EQ(values(add(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2}, {10, 20}))),
            (std::vector<double>{11, 22, 13, 24}));
}

TEST(Ops, SigmoidIsStableForLargeInputs) {
  EXPECT_EQ(sigmoid(Tensor::scalar(-1000.0)).item(), 0.0);
  EXPECT_EQ(sigmoid(Tensor::scalar(1000.0)).item(), 1.0);
}

TEST(Ops, SoftmaxExamples) {
  EXPECT_EQ(values(softmax(Tensor::zeros({4}), 0)), (std::vector<double>{0.25, 0.25, 0.25, 0.25}));
  EXPECT_EQ(values(softmax(Tensor::from({2}, {1000, 1000}), 0)), (std::vector<double>{0.5, 0.5}));
  std::vector<NamedTensor> p{{"x", randn({8}, 6)}};
  EXPECT_LT(gradcheck([&] { return contract(softmax(p[0].tensor, 0), 7); }, p).max_rel_error(), 1e-6);
}

TEST(Ops, SoftmaxRowsAreProbabilityVectors) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Tensor x = scale(randn({3, 4, 6}, seed, false), 20.0);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      const Tensor y = softmax(x, axis);
      const auto& s = y.shape();
      const std::size_t stride = axis == 2 ? 1 : (axis == 1 ? s[2] : s[1] * s[2]);
      for (std::size_t base = 0; base < y.numel(); ++base) {
        if ((base / stride) % s[axis] != 0) continue;
        double total = 0.0;
        for (std::size_t k = 0; k < s[axis]; ++k) {
          EXPECT_GE(y[base + k * stride], 0.0);
          total += y[base + k * stride];
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
      }
    }
  }
}

TEST(Ops, LayerNormExamples) {
  const Tensor ones = Tensor::full({4}, 1.0);
  const Tensor zeros = Tensor::zeros({4});
  EXPECT_EQ(values(layernorm(Tensor::from({1, 4}, {5, 5, 5, 5}), ones, zeros)), (std::vector<double>(4, 0.0)));
  const Tensor bias = Tensor::from({4}, {1, -2, 3, 0.5});
  EXPECT_EQ(values(layernorm(randn({2, 4}, 8, false), zeros, bias)), (std::vector<double>{1, -2, 3, 0.5, 1, -2, 3, 0.5}));
  std::vector<NamedTensor> p{{"x", randn({2, 8}, 9)}, {"g", randn({8}, 10)}, {"b", randn({8}, 11)}};
  const auto r = gradcheck([&] { return contract(layernorm(p[0].tensor, p[1].tensor, p[2].tensor), 12); }, p);
  EXPECT_LT(r.max_rel_error(), 1e-5);
}

TEST(Ops, LayerNormRowsStandardized) {
  const Tensor y = layernorm(randn({3, 16}, 13, false), Tensor::full({16}, 1.0), Tensor::zeros({16}), 1e-12);
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < 16; ++i) m += y[r * 16 + i] / 16.0;
    for (std::size_t i = 0; i < 16; ++i) v += (y[r * 16 + i] - m) * (y[r * 16 + i] - m) / 16.0;
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(v, 1.0, 1e-9);
  }
}

TEST(Ops, ConcatExamples) {
  const Tensor a = Tensor::from({1, 2}, {1, 2});
  const Tensor b = Tensor::from({1, 1}, {3});
  const Tensor ab[] = {a, b};
  EXPECT_EQ(values(concat(ab, 1)), (std::vector<double>{1, 2, 3}));
  const Tensor only[] = {a};
  EXPECT_EQ(values(concat(only, 1)), values(a));
  const Tensor bad[] = {a, Tensor::zeros({2, 1})};
  EXPECT_THROW(concat(bad, 1), ShapeError);

  std::vector<NamedTensor> p{{"a", randn({2, 3}, 14)}, {"b", randn({2, 1}, 15)}, {"c", randn({2, 4}, 16)}};
  const auto r = gradcheck(
      [&] {
        const Tensor parts[] = {p[0].tensor, p[1].tensor, p[2].tensor};
        return contract(concat(parts, 1), 17);
      },
      p);
  EXPECT_LT(r.max_rel_error(), 1e-6);
}

TEST(Ops, ConcatSplitRoundTripOnValuesAndGradients) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor x = randn({2, 3, 7}, seed);
    const std::size_t sizes[] = {2, 4, 1};
    const auto parts = split(x, 2, sizes);
    const Tensor joined = concat(parts, 2);
    EXPECT_EQ(values(joined), values(x));
    const Tensor w = randn({2, 3, 7}, seed + 100, false);
    sum(mul(joined, w)).backward();
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), values(w));
  }
}

TEST(Ops, DropoutIsInvertedAndSeeded) {
  const Tensor x = Tensor::full({1000}, 1.0);
  Rng r1(4), r2(4);
  const Tensor a = dropout(x, 0.25, r1);
  const Tensor b = dropout(x, 0.25, r2);
  EXPECT_EQ(values(a), values(b));
  std::size_t kept = 0;
  for (double v : a.data()) {
    EXPECT_TRUE(v == 0.0 || v == 1.0 / 0.75);
    kept += v != 0.0;
  }
  EXPECT_NEAR(static_cast<double>(kept) / 1000.0, 0.75, 0.05);
  Rng r3(4);
  EXPECT_EQ(values(dropout(x, 0.0, r3)), values(x));
}

TEST(Ops, DeterministicOutputs) {
  const Tensor a = randn({4, 8}, 20, false);
  const Tensor w = randn({8, 8}, 21, false);
  auto run = [&] { return values(softmax(layernorm(matmul(a, w), Tensor::full({8}, 1.0), Tensor::zeros({8})), 1)); };
  EXPECT_EQ(run(), run());
}

TEST(Gradcheck, SquareFunctionPasses) {
  std::vector<NamedTensor> p{{"x", Tensor::scalar(3.0, true)}};
  const auto r = gradcheck([&] { return mul(p[0].tensor, p[0].tensor); }, p);
  EXPECT_TRUE(r.passed());
  EXPECT_NEAR(r.params[0].analytic_at_worst, 6.0, 1e-12);
  EXPECT_NEAR(r.params[0].numeric_at_worst, 6.0, 1e-8);
}

TEST(Gradcheck, CorruptedBackwardIsReported) {
  // A square op whose backward claims d(x^2)/dx = x.
  auto bad_square = [](const Tensor& x) {
    std::vector<double> v(x.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] * x[i];
    return Tensor::record("bad_square", x.shape(), std::move(v), {x}, [x](const BackwardContext& c) {
      for (std::size_t i = 0; i < c.grad.size(); ++i) c.input_grads[0][i] += c.grad[i] * x[i];
    });
  };
  std::vector<NamedTensor> p{{"x", randn({5}, 22)}};
  const auto r = gradcheck([&] { return sum(bad_square(p[0].tensor)); }, p);
  EXPECT_FALSE(r.passed());
  EXPECT_NEAR(r.max_rel_error(), 0.5, 1e-6);
}

TEST(Gradcheck, RejectsNonFiniteAndBadStep) {
  std::vector<NamedTensor> p{{"x", Tensor::scalar(1.0, true)}};
  GradcheckOptions o;
  o.step = 1e-2;
  EXPECT_THROW(gradcheck([&] { return mul(p[0].tensor, p[0].tensor); }, p, o), std::invalid_argument);
  EXPECT_THROW(gradcheck([]() -> Tensor { throw NumericError("nan"); }, p), NumericError);
}

TEST(GradientSuite, EveryCaseListedAndRestrictable) {
  const auto& ops = verify::suite_ops();
  for (const char* op : {"matmul", "softmax", "layernorm", "concat", "model_va", "model_expr", "model_au"}) {
    EXPECT_NE(std::find(ops.begin(), ops.end(), op), ops.end()) << op;
  }
  verify::SuiteOptions o;
  o.ops = {"softmax"};
  o.seeds = 5;
  const auto r = verify::run_gradcheck_suite(o);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_TRUE(r[0].passed);
  o.ops = {"nope"};
  EXPECT_THROW(verify::run_gradcheck_suite(o), ConfigError);
}

TEST(GradientSuite, ImpossibleToleranceFails) {
  verify::SuiteOptions o;
  o.ops = {"tanh", "layernorm"};
  o.seeds = 5;
  o.tol = 1e-12;
  for (const auto& r : verify::run_gradcheck_suite(o)) EXPECT_FALSE(r.passed) << r.op;
}

// Property: every primitive matches finite differences on randomized shapes.
TEST(GradientSuite, PrimitivesOverManySeeds) {
  verify::SuiteOptions o;
  o.ops = {"matmul", "transpose", "add", "sub", "mul", "scale", "tanh", "sigmoid", "relu", "softmax",
           "layernorm", "concat", "narrow", "split", "reshape", "dropout", "sum", "mean"};
  o.seeds = 100;
  for (const auto& r : verify::run_gradcheck_suite(o)) {
    EXPECT_TRUE(r.passed) << r.op << " worst " << r.max_rel_error << " seed " << r.worst_seed;
  }
}
