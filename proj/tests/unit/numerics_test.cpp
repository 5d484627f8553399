#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "emotune/numerics/graph.hpp"
#include "emotune/numerics/ops.hpp"
#include "support/grad_cases.hpp"

namespace emotune {
namespace {

using testing_support::primitive_cases;
using testing_support::project_to_scalar;
using testing_support::random_tensor;

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor({0, 3}), ShapeError);
}

TEST(Evaluate, IdentityAffine) {
  Graph g;
  const NodeId x = g.input("x", Tensor::row({1, 2, 3}));
  Tensor eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  const NodeId w = g.input("w", eye);
  const NodeId b = g.input("b", Tensor({3}));
  g.set_name(ops::affine(g, x, w, b), "y");
  const auto out = evaluate(g, {}, {"y"});
  EXPECT_EQ(out.at("y"), Tensor::row({1, 2, 3}));
}

TEST(Evaluate, UniformSoftmax) {
  Graph g;
  const NodeId y = ops::softmax(g, g.input("x", Tensor::row({0, 0, 0, 0})));
  for (double v : g.value(y).data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Evaluate, SingleTokenAttentionReturnsValue) {
  Graph g;
  Rng rng(3);
  const NodeId q = g.input("q", random_tensor({1, 4}, rng));
  const NodeId k = g.input("k", random_tensor({1, 4}, rng));
  const NodeId v = g.input("v", random_tensor({1, 4}, rng));
  const NodeId y = ops::causal_attention(g, q, k, v, 2, {{0, 1}});
  EXPECT_EQ(g.value(y), g.value(v));
}

TEST(Evaluate, ShapeMismatchNamesNodeAndShapes) {
  Graph g;
  const NodeId x = g.input("x", Tensor({2, 3}));
  const NodeId w = g.input("w", Tensor({4, 5}));
  try {
    ops::matmul(g, x, w);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul#2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4, 5]"), std::string::npos) << msg;
  }
}

TEST(Evaluate, RebindAndReplay) {
  Graph g;
  const NodeId x = g.input("x", Tensor::row({1, 2}));
  g.set_name(ops::scale(g, x, 3.0), "y");
  auto out = evaluate(g, {{"x", Tensor::row({5, 7})}}, {"y"});
  EXPECT_EQ(out.at("y"), Tensor::row({15, 21}));
  EXPECT_THROW(g.rebind("x", Tensor::row({1, 2, 3})), ShapeError);
}

TEST(Gradients, SumGivesOnes) {
  Graph g;
  Rng rng(1);
  const NodeId x = g.input("x", random_tensor({3, 4}, rng), true);
  const NodeId loss = ops::sum(g, x);
  const auto grads = gradients(g, {}, loss);
  EXPECT_EQ(grads.at("x"), Tensor({3, 4}, 1.0));
}

TEST(Gradients, SoftmaxCrossEntropyAtZeroLogits) {
  constexpr std::size_t vocab = 5;
  constexpr int target = 2;
  Graph g;
  const NodeId z = g.input("z", Tensor({1, vocab}), true);
  const NodeId loss = ops::softmax_cross_entropy(g, z, {target});
  EXPECT_NEAR(g.value(loss).item(), std::log(5.0), 1e-15);
  const auto grads = gradients(g, {}, loss);
  for (std::size_t j = 0; j < vocab; ++j) {
    EXPECT_NEAR(grads.at("z")[j], 1.0 / vocab - (j == target ? 1.0 : 0.0), 1e-15);
  }
}

TEST(Gradients, SigmoidBceAtZeroLogit) {
  Graph g;
  const NodeId z = g.input("z", Tensor({1, 1}), true);
  const NodeId loss = ops::sigmoid_bce(g, z, Tensor({1, 1}, 1.0));
  EXPECT_DOUBLE_EQ(gradients(g, {}, loss).at("z")[0], -0.5);
}

TEST(Gradients, SigmoidBceIsStableForLargeLogits) {
  Graph g;
  const NodeId z = g.input("z", Tensor::row({800.0, -800.0}), true);
  const NodeId loss = ops::sigmoid_bce(g, z, Tensor::row({1.0, 0.0}));
  EXPECT_DOUBLE_EQ(g.value(loss).item(), 0.0);
}

TEST(Gradients, NonScalarLossRejected) {
  Graph g;
  const NodeId x = g.input("x", Tensor({2, 2}), true);
  EXPECT_THROW(gradients(g, {}, x), ShapeError);
}

TEST(GradCheck, ConstantGraphHasZeroGradients) {
  Graph g;
  const NodeId x = g.input("x", Tensor::row({1, 2}), true);
  (void)x;
  const NodeId loss = ops::sum(g, g.constant(Tensor::row({3, 4})));
  const auto grads = gradients(g, {}, loss);
  EXPECT_EQ(grads.at("x"), Tensor::row({0, 0}));
  EXPECT_EQ(grad_check(g, {}, loss, 1e-5).max_relative_error, 0.0);
}

TEST(GradCheck, SingleAffineLayer) {
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(seed);
    Graph g;
    const NodeId x = g.input("x", random_tensor({4, 5}, rng), true);
    const NodeId w = g.input("w", random_tensor({5, 3}, rng), true);
    const NodeId b = g.input("b", random_tensor({3}, rng), true);
    const NodeId loss = project_to_scalar(g, ops::affine(g, x, w, b), rng);
    EXPECT_LT(grad_check(g, {}, loss, 1e-5).max_relative_error, 1e-6) << "seed " << seed;
  }
}

TEST(GradCheck, RejectsBadEpsilon) {
  Graph g;
  const NodeId loss = ops::sum(g, g.input("x", Tensor::row({1}), true));
  EXPECT_THROW(grad_check(g, {}, loss, 0.0), std::invalid_argument);
  EXPECT_THROW(grad_check(g, {}, loss, 0.1), std::invalid_argument);
}

TEST(GradCheck, EveryPrimitiveMatchesFiniteDifferences) {
  for (const auto& c : primitive_cases()) {
    for (std::uint64_t seed : {11, 12, 13}) {
      Rng rng(seed);
      Graph g(GraphOptions{true, seed});
      const NodeId out = c.build(g, rng);
      const NodeId loss = g.value(out).is_scalar() ? out : project_to_scalar(g, out, rng);
      const auto r = grad_check(g, {}, loss, 1e-5);
      EXPECT_LT(r.max_relative_error, 1e-4) << c.name << " seed " << seed << " worst " << r.worst_input << "["
                                            << r.worst_index << "] analytic " << r.analytic << " numeric " << r.numeric;
    }
  }
}

TEST(Properties, SoftmaxRowsAreDistributions) {
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(seed);
    Graph g;
    const NodeId y = ops::softmax(g, g.input("x", random_tensor({6, 9}, rng, 30.0)));
    const Tensor& p = g.value(y);
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0.0;
      for (double v : p.row_span(r)) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Properties, CausalMaskIgnoresFuturePositions) {
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(seed);
    const Tensor q = random_tensor({6, 4}, rng), k = random_tensor({6, 4}, rng), v = random_tensor({6, 4}, rng);
    Graph g;
    const NodeId y = ops::causal_attention(g, g.input("q", q), g.input("k", k), g.input("v", v), 2, {{0, 6}});
    const Tensor before = g.value(y);
    for (std::size_t t = 0; t < 6; ++t) {
      NamedTensors perturbed{{"q", q}, {"k", k}, {"v", v}};
      for (auto& [name, x] : perturbed) {
        for (std::size_t r = t + 1; r < 6; ++r)
          for (std::size_t c = 0; c < 4; ++c) x.at(r, c) += rng.normal();
      }
      g.set_name(y, "y" + std::to_string(t));
      const Tensor after = evaluate(g, perturbed, {"y" + std::to_string(t)}).at("y" + std::to_string(t));
      for (std::size_t r = 0; r <= t; ++r)
        for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(after.at(r, c), before.at(r, c));
    }
  }
}

TEST(Properties, DropoutRateZeroIsIdentityAndMaskIsSeeded) {
  Rng rng(5);
  const Tensor x = random_tensor({4, 8}, rng);
  {
    Graph g(GraphOptions{true, 1});
    const NodeId in = g.input("x", x);
    EXPECT_EQ(ops::dropout(g, in, 0.0), in);
  }
  {
    Graph eval;
    const NodeId in = eval.input("x", x);
    EXPECT_EQ(ops::dropout(eval, in, 0.5), in);
  }
  Graph a(GraphOptions{true, 42}), b(GraphOptions{true, 42}), c(GraphOptions{true, 43});
  const Tensor ya = a.value(ops::dropout(a, a.input("x", x), 0.5));
  const Tensor yb = b.value(ops::dropout(b, b.input("x", x), 0.5));
  const Tensor yc = c.value(ops::dropout(c, c.input("x", x), 0.5));
  EXPECT_TRUE(bitwise_equal(ya, yb));
  EXPECT_FALSE(bitwise_equal(ya, yc));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_TRUE(ya[i] == 0.0 || ya[i] == 2.0 * x[i]);
}

TEST(Properties, ReplayIsBitwiseReproducible) {
  Rng rng(9);
  Graph g(GraphOptions{true, 7});
  const NodeId x = g.input("x", random_tensor({3, 4}, rng));
  const NodeId y = ops::gelu(g, ops::dropout(g, ops::affine(g, x, g.input("w", random_tensor({4, 4}, rng)),
                                                            g.input("b", random_tensor({4}, rng))),
                                             0.3));
  const Tensor first = g.value(y);
  g.replay();
  EXPECT_TRUE(bitwise_equal(first, g.value(y)));
}

}  // namespace
}  // namespace emotune
