#include <gtest/gtest.h>

#include <cmath>

#include "op_cases.hpp"
#include "wrangan/adam.hpp"
#include "wrangan/ops.hpp"

namespace wrangan {
namespace {

using testing::random_tensor;

template <class T>
class GradCheck : public ::testing::Test {};

using Precisions = ::testing::Types<float, double>;
TYPED_TEST_SUITE(GradCheck, Precisions);

TYPED_TEST(GradCheck, EveryOpOverTwentySeeds) {
  using T = TypeParam;
  for (const auto& c : testing::op_cases<T>()) {
    EXPECT_LT(testing::worst_gradient_error(c, 20), testing::GradTolerance<T>::tol) << c.name;
  }
}

TEST(Ops, LeakyReluDefinition) {
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>({2}, {-1.0f, 2.0f}));
  auto y = ops::leaky_relu(x, 0.2f).value();
  EXPECT_FLOAT_EQ(y[0], -0.2f);
  EXPECT_FLOAT_EQ(y[1], 2.0f);
}

TEST(Ops, IdentityMatmul) {
  Rng rng(3, "identity");
  Tape<double> tape;
  Tensor<double> eye({3, 3}, 0.0);
  for (int i = 0; i < 3; ++i) eye[i * 4] = 1.0;
  auto a = testing::random_tensor<double>(rng, {3, 3});
  auto y = ops::matmul(tape.constant(eye), tape.constant(a)).value();
  EXPECT_EQ(y, a);
}

TEST(Ops, ConvOnesCenterAndCorner) {
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>({1, 1, 4, 4}, 1.0f));
  auto w = tape.constant(Tensor<float>({1, 1, 3, 3}, 1.0f));
  auto y = ops::conv2d(x, w, 1, 1).value();
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  EXPECT_FLOAT_EQ(y[1 * 4 + 1], 9.0f);
  EXPECT_FLOAT_EQ(y[2 * 4 + 2], 9.0f);
  EXPECT_FLOAT_EQ(y[0], 4.0f);
  EXPECT_FLOAT_EQ(y[15], 4.0f);
  EXPECT_FLOAT_EQ(y[1], 6.0f);
}

TEST(Ops, BlurKernelNormalized) {
  auto k = ops::gaussian_kernel<double>(1.5, 5);
  ASSERT_EQ(k.size(), 11u);
  double s = 0;
  for (double v : k) s += v;
  EXPECT_NEAR(s, 1.0, 1e-12);
  EXPECT_NEAR(k[0], k[10], 1e-15);
}

TEST(Ops, ShapeErrorsNameOpAndShapes) {
  Tape<float> tape;
  auto a = tape.constant(Tensor<float>({2, 3}, 1.0f));
  auto b = tape.constant(Tensor<float>({3, 2}, 1.0f));
  try {
    ops::add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[3,2]"), std::string::npos);
  }
  EXPECT_THROW(ops::matmul(a, a), ShapeError);
  auto img = tape.constant(Tensor<float>({1, 2, 4, 4}, 1.0f));
  auto w = tape.constant(Tensor<float>({1, 3, 3, 3}, 1.0f));
  EXPECT_THROW(ops::conv2d(img, w, 1, 1), ShapeError);
  EXPECT_THROW(ops::concat<float>({a, b}, 0), ShapeError);
}

TEST(Ops, InputsNotMutated) {
  Rng rng(1, "mutate");
  Tape<float> tape;
  auto xv = testing::random_tensor<float>(rng, {1, 2, 4, 4});
  auto wv = testing::random_tensor<float>(rng, {3, 2, 3, 3});
  auto x = tape.leaf(xv);
  auto w = tape.leaf(wv);
  auto loss = ops::sum(ops::softplus(ops::conv2d(ops::gaussian_blur(x, 1.0f, 2), w, 1, 1)));
  tape.backward(loss);
  EXPECT_EQ(x.value(), xv);
  EXPECT_EQ(w.value(), wv);
}

TEST(Ops, ReplayIsBitIdentical) {
  auto run = [] {
    Rng rng(5, "replay");
    Tape<float> tape;
    auto x = tape.leaf(testing::random_tensor<float>(rng, {2, 3, 8, 8}));
    auto w = tape.leaf(testing::random_tensor<float>(rng, {4, 3, 3, 3}));
    auto loss = ops::mean(ops::leaky_relu(ops::conv2d(x, w, 2, 1), 0.2f));
    auto g = tape.backward(loss);
    return std::make_pair(loss.value(), g[w]);
  };
  auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Backward, SumOfSquares) {
  Tape<float> tape;
  auto p = tape.leaf(Tensor<float>({2}, {1.0f, 2.0f}));
  auto g = tape.backward(ops::sum(ops::square(p)));
  EXPECT_FLOAT_EQ(g[p][0], 2.0f);
  EXPECT_FLOAT_EQ(g[p][1], 4.0f);
}

TEST(Backward, ConstantLossGivesEmptyMap) {
  Tape<float> tape;
  auto c = tape.constant(Tensor<float>::scalar(3.0f));
  EXPECT_TRUE(tape.backward(c).empty());
}

TEST(Backward, UntouchedLeafGetsZeros) {
  Tape<float> tape;
  auto p = tape.leaf(Tensor<float>({3}, 1.0f));
  auto q = tape.leaf(Tensor<float>({2, 2}, 5.0f));
  auto g = tape.backward(ops::sum(p));
  ASSERT_TRUE(g.contains(q));
  EXPECT_EQ(g[q], Tensor<float>({2, 2}, 0.0f));
}

TEST(Backward, FanOutAccumulates) {
  Tape<double> tape;
  auto p = tape.leaf(Tensor<double>::scalar(3.0));
  auto y = ops::add(ops::mul(p, p), ops::mul_scalar(p, 4.0));
  EXPECT_DOUBLE_EQ(tape.backward(y)[p][0], 10.0);
}

TEST(Backward, NonScalarLossRejected) {
  Tape<float> tape;
  auto p = tape.leaf(Tensor<float>({2}, 1.0f));
  EXPECT_THROW(tape.backward(ops::square(p)), ShapeError);
}

TEST(Adam, ZeroGradientKeepsParameters) {
  Adam<float> adam;
  ParamMap<float> p{{"a", Tensor<float>({3}, {1.0f, -2.0f, 0.5f})}};
  const auto before = p;
  for (int i = 0; i < 3; ++i) adam.step(p, {{"a", Tensor<float>({3}, 0.0f)}});
  EXPECT_EQ(p, before);
  EXPECT_EQ(adam.step_count(), 3);
}

TEST(Adam, OneStepHandComputation) {
  AdamOptions opt;
  opt.learning_rate = 0.1;
  Adam<double> adam(opt);
  ParamMap<double> p{{"p", Tensor<double>::scalar(0.0)}};
  adam.step(p, {{"p", Tensor<double>::scalar(1.0)}});
  // m_hat = 1, v_hat = 1
  EXPECT_NEAR(p["p"][0], -0.1 / (1.0 + opt.eps_hat), 1e-15);
}

TEST(Adam, MonotoneAgainstGradient) {
  AdamOptions opt;
  opt.learning_rate = 0.05;
  Adam<float> adam(opt);
  ParamMap<float> p{{"p", Tensor<float>::scalar(1.0f)}};
  const ParamMap<float> g{{"p", Tensor<float>::scalar(0.7f)}};
  adam.step(p, g);
  const float after1 = p["p"][0];
  adam.step(p, g);
  EXPECT_LT(after1, 1.0f);
  EXPECT_LT(p["p"][0], after1);
}

TEST(Adam, StepBoundedByLearningRate) {
  AdamOptions opt;
  opt.learning_rate = 1e-2;
  Adam<double> adam(opt);
  Rng rng(11, "adam-bound");
  ParamMap<double> p{{"x", rng.normal_tensor<double>({50})}};
  for (int step = 0; step < 30; ++step) {
    const auto before = p["x"];
    adam.step(p, {{"x", rng.normal_tensor<double>({50}, 10.0)}});
    for (std::int64_t i = 0; i < 50; ++i) {
      // bias-corrected Adam steps are bounded by lr * (1 - b1) / sqrt(1 - b2) in the worst case
      EXPECT_LE(std::abs(p["x"][i] - before[i]), opt.learning_rate * (1 - opt.beta1) / std::sqrt(1 - opt.beta2) + 1e-12);
    }
  }
  EXPECT_EQ(adam.first_moment().at("x").shape(), p["x"].shape());
  EXPECT_EQ(adam.second_moment().at("x").shape(), p["x"].shape());
}

TEST(Adam, ConstantGradientMovesByLearningRate) {
  AdamOptions opt;
  opt.learning_rate = 1e-3;
  Adam<double> adam(opt);
  Rng rng(12, "adam-const");
  auto g = rng.normal_tensor<double>({20}, 5.0);
  ParamMap<double> p{{"x", Tensor<double>({20}, 0.0)}};
  for (int step = 0; step < 10; ++step) {
    const auto before = p["x"];
    adam.step(p, {{"x", g}});
    for (std::int64_t i = 0; i < 20; ++i) EXPECT_LE(std::abs(p["x"][i] - before[i]), opt.learning_rate * (1 + 1e-6));
  }
}

TEST(Adam, MissingGradientTreatedAsZero) {
  Adam<float> adam;
  ParamMap<float> p{{"a", Tensor<float>({2}, 1.0f)}, {"b", Tensor<float>({2}, 1.0f)}};
  adam.step(p, {{"a", Tensor<float>({2}, 1.0f)}});
  EXPECT_EQ(p["b"], Tensor<float>({2}, 1.0f));
  EXPECT_LT(p["a"][0], 1.0f);
}

TEST(Adam, ShapeMismatchRejected) {
  Adam<float> adam;
  ParamMap<float> p{{"a", Tensor<float>({2}, 1.0f)}};
  EXPECT_THROW(adam.step(p, {{"a", Tensor<float>({3}, 1.0f)}}), ShapeError);
}

}  // namespace
}  // namespace wrangan
