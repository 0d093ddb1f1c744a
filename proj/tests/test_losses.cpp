#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "nmd/gradcheck.hpp"
#include "nmd/losses.hpp"

using namespace nmd;

namespace {

using V = const std::vector<Var<double>>&;

Tensor<double> filled(Shape s, double v) { return Tensor<double>(s, v); }

// Columns with covariance [[1, 0.5], [0.5, 1]] under 1/N normalization.
Tensor<double> correlated_batch(double scale_by = 1.0) {
  const double x1[] = {1, 1, 1, 1, -1, -1, -1, -1};
  const double x2[] = {1, 1, 1, -1, 1, -1, -1, -1};
  Tensor<double> t({8, 2});
  for (int i = 0; i < 8; ++i) {
    t[static_cast<std::size_t>(2 * i)] = scale_by * x1[i];
    t[static_cast<std::size_t>(2 * i + 1)] = scale_by * x2[i];
  }
  return t;
}

double scalar(Var<double> v) { return v.value()[0]; }

Tensor<double> permute_batch(const Tensor<double>& t, std::span<const int> order) {
  Tape<double> tape;
  return select_batch(tape.constant(t), order).value();
}

void expect_gradcheck(const std::string& name, const TapeFn& f, std::vector<Tensor<double>> inputs) {
  auto rep = gradcheck(name, f, std::move(inputs), {});
  EXPECT_TRUE(rep.passed()) << rep.summary();
}

}  // namespace

TEST(Weights, DefaultsAndTies) {
  LossWeights w;
  EXPECT_EQ(w.content, 100.0);
  EXPECT_EQ(w.content_grad, 10.0);
  EXPECT_EQ(w.feature, 10.0);
  EXPECT_EQ(w.rec, 20.0);
  EXPECT_EQ(w.latent, 0.16);
  EXPECT_EQ(w.decov, 0.9);
  w.tie_content_grad(false);
  EXPECT_EQ(w.content_grad, 10.0);
  w.tie_content_grad(true);
  EXPECT_EQ(w.content_grad, 50.0);
  w.latent = -1;
  EXPECT_THROW(w.validate(), std::invalid_argument);
}

TEST(ContentLoss, ZeroAtIdentity) {
  Tape<double> t;
  auto y = t.constant(random_tensor({2, 3, 6, 6}, 1));
  EXPECT_EQ(scalar(content_loss(y, y, 100.0, 10.0)), 0.0);
}

TEST(ContentLoss, ConstantOffset) {
  Tape<double> t;
  auto l = content_loss(t.constant(filled({2, 3, 8, 8}, 0.6)), t.constant(filled({2, 3, 8, 8}, 0.5)), 100.0, 10.0);
  EXPECT_NEAR(scalar(l), 10.0, 1e-12);
}

TEST(ContentLoss, GradientTermSeesEdges) {
  Tape<double> t;
  Tensor<double> a({1, 1, 2, 2}, 0.0);
  a.at(0, 0, 0, 1) = 1.0;  // one step along x in the top row
  const Tensor<double> b({1, 1, 2, 2}, 0.0);
  // pixel: 0.25, dx: |1| at one of 4 entries -> 0.25, dy: |-1| at one entry -> 0.25
  EXPECT_NEAR(scalar(content_loss(t.constant(a), t.constant(b), 1.0, 1.0)), 0.75, 1e-15);
  EXPECT_NEAR(scalar(content_loss(t.constant(a), t.constant(b), 0.0, 2.0)), 1.0, 1e-15);
}

TEST(ContentLoss, Gradcheck) {
  expect_gradcheck("content_loss", [](Tape<double>&, V v) { return content_loss(v[0], v[1], 100.0, 10.0); },
                   {random_tensor({2, 3, 4, 4}, 2), random_tensor({2, 3, 4, 4}, 3)});
}

TEST(RecLoss, ClosedForms) {
  Tape<double> t;
  auto v = t.constant(random_tensor({2, 3, 4, 4}, 4));
  EXPECT_EQ(scalar(rec_loss(v, v)), 0.0);
  EXPECT_EQ(scalar(rec_loss(t.constant(filled({2, 3, 4, 4}, 0.75)), t.constant(filled({2, 3, 4, 4}, 0.25)))),
            0.25);
}

TEST(RecLoss, GradientIsScaledDifference) {
  Tape<double> t;
  const auto a = random_tensor({2, 3, 4, 4}, 5);
  const auto b = random_tensor({2, 3, 4, 4}, 6);
  auto va = t.leaf(a);
  t.backward(rec_loss(va, t.constant(b)));
  const auto g = t.grad(va);
  const double n = static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(g[i], 2.0 * (a[i] - b[i]) / n, 1e-15);
  expect_gradcheck("rec_loss", [](Tape<double>&, V v) { return rec_loss(v[0], v[1]); }, {a, b});
}

TEST(LatentLoss, ClosedFormsAndSymmetry) {
  Tape<double> t;
  const auto a = random_tensor({2, 4, 2, 2}, 7);
  Tensor<double> b = a;
  for (auto& x : b.data()) x += 1.0;
  EXPECT_EQ(scalar(latent_loss(t.constant(a), t.constant(a))), 0.0);
  EXPECT_NEAR(scalar(latent_loss(t.constant(a), t.constant(b))), 1.0, 1e-14);

  const auto c = random_tensor({2, 4, 2, 2}, 8);
  auto va = t.leaf(a);
  auto vc = t.leaf(c);
  auto l1 = latent_loss(va, vc);
  auto l2 = latent_loss(vc, va);
  EXPECT_EQ(scalar(l1), scalar(l2));
  t.backward(l1);
  const auto ga = t.grad(va);
  const auto gc = t.grad(vc);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(ga[i], -gc[i]);
  expect_gradcheck("latent_loss", [](Tape<double>&, V v) { return latent_loss(v[0], v[1]); }, {a, c});
}

TEST(FeatureMatching, ClosedFormsAndDetachment) {
  Tape<double> t;
  const auto a = random_tensor({2, 4, 2, 2}, 9);
  Tensor<double> b = a;
  for (auto& x : b.data()) x += 2.0;
  EXPECT_EQ(scalar(feature_matching_loss(t.constant(a), t.constant(a))), 0.0);
  EXPECT_NEAR(scalar(feature_matching_loss(t.constant(a), t.constant(b))), 2.0, 1e-14);

  // Gradient must reach the fake branch but never the real one.
  auto fake = t.leaf(a);
  auto real_src = t.leaf(b);
  auto real = scale(real_src, 1.5);
  t.backward(feature_matching_loss(fake, real));
  const auto g_real = t.grad(real_src);
  const auto g_fake = t.grad(fake);
  for (double g : g_real.data()) EXPECT_EQ(g, 0.0);
  double mass = 0.0;
  for (double g : g_fake.data()) mass += std::abs(g);
  EXPECT_NEAR(mass, 1.0, 1e-12);
}

TEST(FeatureMatching, Gradcheck) {
  const auto real = random_tensor({2, 4, 2, 2}, 11);
  expect_gradcheck(
      "feature_matching",
      [&](Tape<double>& t, V v) { return feature_matching_loss(v[0], t.constant(real)); },
      {random_tensor({2, 4, 2, 2}, 10)});
}

TEST(Decov, ClosedForms) {
  Tape<double> t;
  EXPECT_EQ(scalar(decov_loss(t.constant(correlated_batch()))), 0.25);
  EXPECT_NEAR(scalar(decov_loss(t.constant(correlated_batch(std::sqrt(2.0))))), 1.0, 1e-12);
  Tensor<double> diag = correlated_batch();
  const double alt[] = {1, -1, 1, -1, 1, -1, 1, -1};
  for (int i = 0; i < 8; ++i) diag[static_cast<std::size_t>(2 * i + 1)] = alt[i];
  EXPECT_EQ(scalar(decov_loss(t.constant(diag))), 0.0);
  EXPECT_THROW(decov_loss(t.constant(random_tensor({1, 5}, 1))), ShapeError);
}

TEST(Decov, FlattensTrailingDimsAndGradchecks) {
  Tape<double> t;
  const auto x4 = random_tensor({3, 2, 2, 2}, 12);
  EXPECT_EQ(scalar(decov_loss(t.constant(x4))), scalar(decov_loss(t.constant(x4.reshaped({3, 8})))));
  expect_gradcheck("decov_loss", [](Tape<double>&, V v) { return decov_loss(v[0]); }, {x4});
}

TEST(Adversarial, ZeroLogits) {
  Tape<double> t;
  auto z = t.constant(filled({2, 1, 4, 4}, 0.0));
  auto a = adversarial_losses(z, z);
  EXPECT_NEAR(scalar(a.d_loss), 2.0 * std::numbers::ln2, 1e-9);
  EXPECT_NEAR(scalar(a.g_loss), std::numbers::ln2, 1e-9);
}

TEST(Adversarial, PerfectDiscriminatorAndMonotonicity) {
  Tape<double> t;
  auto a = adversarial_losses(t.constant(filled({1, 1, 2, 2}, 60.0)), t.constant(filled({1, 1, 2, 2}, -60.0)));
  EXPECT_LT(scalar(a.d_loss), 1e-20);
  EXPECT_GE(scalar(a.d_loss), 0.0);
  double prev = std::numeric_limits<double>::infinity();
  for (double l = -30.0; l <= 30.0; l += 0.5) {
    const double g = scalar(generator_adv_loss(t.constant(filled({1, 1, 2, 2}, l))));
    EXPECT_LT(g, prev);
    EXPECT_GE(g, 0.0);
    prev = g;
  }
}

TEST(Adversarial, Gradcheck) {
  expect_gradcheck("d_loss", [](Tape<double>&, V v) { return discriminator_loss(v[0], v[1]); },
                   {random_tensor({2, 1, 2, 2}, 13), random_tensor({2, 1, 2, 2}, 14)});
  expect_gradcheck("g_loss", [](Tape<double>&, V v) { return generator_adv_loss(v[0]); },
                   {random_tensor({2, 1, 2, 2}, 15)});
}

TEST(TotalLoss, UnitTermsWithDefaults) {
  Tape<double> t;
  auto one = [&] { return t.constant(filled({1}, 1.0)); };
  LossTerms<double> terms{one(), one(), one(), one(), one(), {one()}};
  LossReport r;
  auto total = total_loss(terms, LossWeights{}, r);
  EXPECT_NEAR(scalar(total), 33.06, 1e-9);
  EXPECT_NEAR(r.total, 33.06, 1e-9);
}

TEST(TotalLoss, ZeroTermsGiveZero) {
  Tape<double> t;
  auto zero = [&] { return t.constant(filled({1}, 0.0)); };
  LossTerms<double> terms{zero(), zero(), zero(), zero(), zero(), {zero(), zero()}};
  LossReport r;
  EXPECT_EQ(scalar(total_loss(terms, LossWeights{}, r)), 0.0);
  EXPECT_EQ(r.total, 0.0);
}

TEST(TotalLoss, LinearInEachTerm) {
  Tape<double> t;
  auto c = [&](double v) { return t.constant(filled({1}, v)); };
  LossTerms<double> terms{c(0.3), c(1.7), c(0.2), c(0.05), c(0.4), {c(0.1), c(0.2)}};
  LossWeights w;
  LossReport full;
  const double base = scalar(total_loss(terms, w, full));
  EXPECT_NEAR(full.total, base, 1e-12);
  EXPECT_NEAR(full.decov, 0.3, 1e-15);

  LossTerms<double> no_rec = terms;
  no_rec.rec = {};
  no_rec.latent = {};
  LossReport r;
  EXPECT_NEAR(scalar(total_loss(no_rec, w, r)), base - 20.0 * 0.05 - 0.16 * 0.4, 1e-12);
  EXPECT_EQ(r.rec, 0.0);
  EXPECT_EQ(r.latent, 0.0);

  LossWeights w2 = w;
  w2.rec *= 2.0;
  EXPECT_NEAR(scalar(total_loss(terms, w2, r)) - base, 20.0 * 0.05, 1e-12);
}

TEST(TotalLoss, NonFiniteTermIsNamed) {
  Tape<double> t;
  auto c = [&](double v) { return t.constant(filled({1}, v)); };
  LossTerms<double> terms{c(0.0), c(1.0), c(std::nan("")), c(0.0), c(0.0), {}};
  LossReport r;
  try {
    total_loss(terms, LossWeights{}, r);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("feature"), std::string::npos) << e.what();
  }
}

TEST(TotalLoss, ReportCsv) {
  LossReport r;
  r.step = 7;
  r.total = 1.5;
  EXPECT_EQ(LossReport::csv_header(), "step,d_loss,adv,content,feature,rec,latent,decov,total");
  EXPECT_EQ(r.csv_row(), "7,0,0,0,0,0,0,0,1.5");
}

TEST(Losses, PermutationInvariantOverBatch) {
  const int order[] = {2, 0, 3, 1};
  const auto a = random_tensor({4, 3, 4, 4}, 20);
  const auto b = random_tensor({4, 3, 4, 4}, 21);
  const auto pa = permute_batch(a, order);
  const auto pb = permute_batch(b, order);
  Tape<double> t;
  auto k = [&](const Tensor<double>& x) { return t.constant(x); };
  EXPECT_NEAR(scalar(content_loss(k(a), k(b), 100.0, 10.0)), scalar(content_loss(k(pa), k(pb), 100.0, 10.0)),
              1e-12);
  EXPECT_NEAR(scalar(rec_loss(k(a), k(b))), scalar(rec_loss(k(pa), k(pb))), 1e-14);
  EXPECT_NEAR(scalar(latent_loss(k(a), k(b))), scalar(latent_loss(k(pa), k(pb))), 1e-14);
  EXPECT_NEAR(scalar(feature_matching_loss(k(a), k(b))), scalar(feature_matching_loss(k(pa), k(pb))), 1e-14);
  EXPECT_NEAR(scalar(decov_loss(k(a))), scalar(decov_loss(k(pa))), 1e-12);
  EXPECT_NEAR(scalar(discriminator_loss(k(a), k(b))), scalar(discriminator_loss(k(pa), k(pb))), 1e-14);
}
