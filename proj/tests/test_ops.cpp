#include <gtest/gtest.h>

#include <cmath>

#include "nmd/gradcheck.hpp"
#include "nmd/ops.hpp"
#include "nmd/rng.hpp"

using namespace nmd;

namespace {

Tensor<double> ones(Shape s) { return Tensor<double>(s, 1.0); }

}  // namespace

TEST(Conv2d, CountsOverlappingOnes) {
  Tape<double> tape;
  auto y = conv2d(tape.constant(ones({1, 1, 3, 3})), tape.constant(ones({1, 1, 3, 3})));
  const auto& v = y.value();
  ASSERT_EQ(v.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_EQ(v.at(0, 0, 1, 1), 9.0);
  EXPECT_EQ(v.at(0, 0, 0, 0), 4.0);
  EXPECT_EQ(v.at(0, 0, 0, 1), 6.0);
}

TEST(Conv2d, ZeroKernelAnnihilates) {
  Tape<double> tape;
  auto y = conv2d(tape.constant(random_tensor({2, 3, 5, 5}, 1)), tape.constant(Tensor<double>({4, 3, 3, 3})), 2);
  EXPECT_EQ(y.shape(), (Shape{2, 4, 3, 3}));
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, SameOutputIsCeilOfStride) {
  Tape<float> tape;
  for (int h : {4, 5, 8, 9}) {
    auto y = conv2d(tape.constant(Tensor<float>({1, 1, h, h})), tape.constant(Tensor<float>({1, 1, 3, 3})), 2);
    EXPECT_EQ(y.shape().h(), (h + 1) / 2);
  }
}

TEST(Conv2d, ShapeErrorsAreDescriptive) {
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>({1, 2, 4, 4}));
  try {
    conv2d(x, tape.constant(Tensor<float>({1, 3, 3, 3})));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("input channels"), std::string::npos);
  }
  EXPECT_THROW(conv2d(x, tape.constant(Tensor<float>({1, 2, 2, 2}))), ShapeError);
  EXPECT_THROW(conv2d(x, tape.constant(Tensor<float>({1, 2, 3, 3})), 3), ShapeError);
}

TEST(Activations, ReluAndLeakyRelu) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({3}, {-1.0, 0.0, 2.0}));
  auto r = relu(x).value();
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 0.0);
  EXPECT_EQ(r[2], 2.0);
  auto l = leaky_relu(tape.constant(Tensor<double>({1}, -2.0)), 0.2).value();
  EXPECT_DOUBLE_EQ(l[0], -0.4);
  EXPECT_THROW(leaky_relu(x, 1.0), std::invalid_argument);
}

TEST(Activations, SubgradientAtZeroIsNegativeSideSlope) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({1}, 0.0));
  tape.backward(sum(leaky_relu(x, 0.2)));
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 0.2);
}

TEST(Resample, PoolAndReplicate) {
  Tape<double> tape;
  auto c = down2(tape.constant(Tensor<double>({1, 1, 4, 4}, 0.7))).value();
  EXPECT_EQ(c.shape(), (Shape{1, 1, 2, 2}));
  for (double v : c.data()) EXPECT_DOUBLE_EQ(v, 0.7);

  auto u = up2(tape.constant(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}))).value();
  const double expect[4][4] = {{1, 1, 2, 2}, {1, 1, 2, 2}, {3, 3, 4, 4}, {3, 3, 4, 4}};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_EQ(u.at(0, 0, i, j), expect[i][j]);

  EXPECT_THROW(down2(tape.constant(Tensor<double>({1, 1, 3, 4}))), ShapeError);
}

TEST(Resample, UpOfDownIsIdentityOnConstants) {
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>({2, 3, 8, 8}, 0.3f));
  EXPECT_TRUE(bitwise_equal(up2(down2(x)).value(), x.value()));
}

TEST(Resample, ChainedDownUpRestoresExtents) {
  RngStream rng(5, 0);
  for (int trial = 0; trial < 25; ++trial) {
    const int k = 1 + rng.below(4);
    const int h = (1 + rng.below(3)) << k;
    const int w = (1 + rng.below(3)) << k;
    Tape<float> tape;
    auto x = tape.constant(Tensor<float>({1, 2, h, w}));
    auto y = x;
    for (int i = 0; i < k; ++i) y = down2(y);
    for (int i = 0; i < k; ++i) y = up2(y);
    EXPECT_EQ(y.shape(), x.shape());
  }
}

TEST(Concat, ShapesAndSlices) {
  Tape<double> tape;
  auto a = random_tensor({1, 1, 2, 2}, 1);
  auto b = random_tensor({1, 2, 2, 2}, 2);
  auto y = concat_channels({tape.constant(a), tape.constant(b)}).value();
  EXPECT_EQ(y.shape(), (Shape{1, 3, 2, 2}));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(y[static_cast<std::size_t>(i)], a[static_cast<std::size_t>(i)]);
  for (int i = 0; i < 8; ++i) EXPECT_EQ(y[static_cast<std::size_t>(4 + i)], b[static_cast<std::size_t>(i)]);

  auto single = concat_channels({tape.constant(a)}).value();
  EXPECT_TRUE(bitwise_equal(single, a));
  EXPECT_THROW(concat_channels({tape.constant(a), tape.constant(Tensor<double>({1, 1, 3, 2}))}), ShapeError);
}

TEST(Backward, LinearAndQuadraticClosedForms) {
  Tape<double> tape;
  auto w = tape.leaf(random_tensor({2, 3}, 4));
  tape.backward(sum(w));
  const auto gw = tape.grad(w);
  for (double g : gw.data()) EXPECT_EQ(g, 1.0);

  Tape<double> t2;
  auto w2 = t2.leaf(Tensor<double>({1}, 3.0));
  t2.backward(scale(sum(square(w2)), 0.5));
  EXPECT_DOUBLE_EQ(t2.grad(w2)[0], 3.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tape<double> tape;
  auto w = tape.leaf(Tensor<double>({2}, 1.0));
  EXPECT_THROW(tape.backward(w), ShapeError);
}

TEST(Backward, RepeatedInvocationIsIdentical) {
  Tape<double> tape;
  auto x = tape.leaf(random_tensor({1, 2, 6, 6}, 8));
  auto k = tape.leaf(random_tensor({2, 2, 3, 3}, 9));
  auto loss = mean(square(relu(conv2d(x, k))));
  tape.backward(loss);
  const auto g1 = tape.grad(k);
  tape.backward(loss);
  EXPECT_TRUE(bitwise_equal(g1, tape.grad(k)));
}

TEST(Backward, UnreachableParametersGetExactZero) {
  ParamSet<double> ps;
  auto& used = ps.add("used", {3});
  auto& unused = ps.add("unused", {3});
  used.value = random_tensor({3}, 1);
  unused.value = random_tensor({3}, 2);
  unused.grad.fill(5.0);
  ps.zero_grad();
  Tape<double> tape;
  tape.param(unused);  // on the tape but off the loss path
  tape.backward(sum(square(tape.param(used))));
  tape.flush_param_grads();
  for (double g : unused.grad.data()) EXPECT_EQ(g, 0.0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(used.grad[i], 2 * used.value[i]);
}

TEST(Backward, SharedParameterAccumulatesBothUses) {
  ParamSet<double> ps;
  auto& p = ps.add("w", {2});
  p.value = Tensor<double>({2}, {1.0, -2.0});
  ps.zero_grad();
  Tape<double> tape;
  auto a = tape.param(p);
  auto b = tape.param(p);
  EXPECT_EQ(a.id(), b.id());
  tape.backward(add(sum(a), sum(scale(b, 3.0))));
  tape.flush_param_grads();
  EXPECT_DOUBLE_EQ(p.grad[0], 4.0);
}

TEST(Determinism, ForwardAndBackwardAreBitIdentical) {
  auto run = [] {
    Tape<float> tape;
    auto x = tape.leaf(random_tensor({2, 3, 8, 8}, 11).cast<float>());
    auto k = tape.leaf(random_tensor({4, 3, 3, 3}, 12).cast<float>());
    auto y = mean(softplus(up2(down2(conv2d(x, k, 2)))));
    tape.backward(y);
    return std::pair{y.value(), tape.grad(k)};
  };
  auto [v1, g1] = run();
  auto [v2, g2] = run();
  EXPECT_TRUE(bitwise_equal(v1, v2));
  EXPECT_TRUE(bitwise_equal(g1, g2));
}

TEST(Gradcheck, EveryPrimitivePassesInDoublePrecision) {
  for (const auto& r : check_primitives(1e-5)) {
    EXPECT_TRUE(r.passed()) << r.summary();
    EXPECT_GT(r.checked, 0u);
  }
}

TEST(Gradcheck, DownsampleMatchesAtTighterTolerance) {
  GradcheckOptions opts;
  opts.tolerance = 1e-6;
  auto r = gradcheck("down2", [](Tape<double>&, const std::vector<Var<double>>& v) { return down2(v[0]); },
                     {random_tensor({1, 1, 4, 4}, 3)}, opts);
  EXPECT_TRUE(r.passed()) << r.summary();
}

TEST(Gradcheck, CatchesCorruptedBackward) {
  // conv2d whose kernel gradient is inflated by 10% on one coordinate.
  constexpr std::size_t kBad = 7;
  // Identity in the forward direction, skewed in the backward direction.
  auto inject = [](Tape<double>& tape, const std::vector<Var<double>>& v) {
    const int kid = v[1].id();
    Var<double> kernel_view = tape.record("grad_skew", v[1].value(), {v[1]}, [kid](Tape<double>& tp, int self) {
      const auto& g = tp.node(self).grad;
      auto& gk = tp.grad_acc(kid);
      for (std::size_t i = 0; i < g.size(); ++i) gk[i] += (i == kBad ? 1.1 : 1.0) * g[i];
    });
    return conv2d(v[0], kernel_view);
  };
  GradcheckOptions opts;
  auto r = gradcheck("conv2d/corrupted", inject, {random_tensor({1, 2, 8, 8}, 1), random_tensor({3, 2, 3, 3}, 2)}, opts);
  ASSERT_FALSE(r.passed());
  ASSERT_EQ(r.failures.size(), 1u);
  EXPECT_EQ(r.failures[0].input, "1");
  EXPECT_EQ(r.failures[0].index, kBad);
  EXPECT_EQ(r.worst.index, kBad);
  EXPECT_THROW(require_pass(r), GradcheckFailure);
}

TEST(Decov, ClosedFormsFromConstructedBatches) {
  // Batch of 4 rows with covariance [[1, .5], [.5, 1]] (population normalization).
  // Rows: +-(a, b) pairs chosen so E[x^2]=1, E[xy]=0.5, zero mean.
  const double s = std::sqrt(1.5), t = std::sqrt(0.5);
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({4, 2}, {s, s, -s, -s, t, -t, -t, t}));
  EXPECT_NEAR(decov(x).value()[0], 0.25, 1e-15);

  auto x2 = tape.constant(Tensor<double>({4, 2}, {s * std::sqrt(2.0), s * std::sqrt(2.0), -s * std::sqrt(2.0),
                                                   -s * std::sqrt(2.0), 1, -1, -1, 1}));
  EXPECT_NEAR(decov(x2).value()[0], 1.0, 1e-12);

  auto diag = tape.constant(Tensor<double>({4, 2}, {1, 0, -1, 0, 0, 2, 0, -2}));
  EXPECT_EQ(decov(diag).value()[0], 0.0);
  EXPECT_THROW(decov(tape.constant(Tensor<double>({1, 3}))), ShapeError);
}
