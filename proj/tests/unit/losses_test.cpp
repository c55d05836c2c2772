#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "tcip/losses.hpp"
#include "tcip/param_store.hpp"
#include "tcip/synth.hpp"

using namespace tcip;

namespace {

Tensor image(std::mt19937_64& rng, Index d, Index h, Index w) {
  return gradcheck::random_tensor(Shape{1, 1, d, h, w}, rng, 0, 1, false);
}

}  // namespace

TEST(NccLoss, SelfLossIsMinusVoxelCount) {
  std::mt19937_64 rng(1);
  Tensor a = image(rng, 10, 10, 10);
  EXPECT_NEAR(ncc_loss(a, a, LossConfig{}).item(), -1000.0, 1e-4);
}

TEST(NccLoss, InvariantToPositiveAffineIntensityMaps) {
  std::mt19937_64 rng(2);
  Tensor a = image(rng, 10, 10, 10), b = image(rng, 10, 10, 10);
  const double base = ncc_loss(a, b, LossConfig{}).item();
  const double mapped = ncc_loss(a, add_scalar(mul_scalar(b, 3.0), 0.7), LossConfig{}).item();
  EXPECT_NEAR(mapped, base, 1e-4 * std::abs(base));
}

TEST(NccLoss, MatchesNaiveWindowedCorrelation) {
  std::mt19937_64 rng(3);
  Tensor a = image(rng, 8, 8, 8), b = image(rng, 8, 8, 8);
  LossConfig cfg;
  cfg.patch = 3;
  const auto cc = oracle::local_ncc(a.values(), b.values(), 8, 8, 8, 3, cfg.epsilon);
  double want = 0.0;
  for (double v : cc) want -= v;
  EXPECT_NEAR(ncc_loss(a, b, cfg).item(), want, 1e-5);
}

TEST(NccLoss, SelfIsNoWorseThanAnyOtherImage) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 20; ++i) {
    Tensor a = image(rng, 9, 9, 9), b = image(rng, 9, 9, 9);
    EXPECT_LE(ncc_loss(a, a, LossConfig{}).item(), ncc_loss(a, b, LossConfig{}).item());
  }
}

TEST(NccLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  LossConfig cfg;
  cfg.patch = 3;
  for (int trial = 0; trial < 5; ++trial) {
    Tensor a = gradcheck::random_tensor(Shape{1, 1, 4, 3, 5}, rng, 0, 1);
    Tensor b = gradcheck::random_tensor(Shape{1, 1, 4, 3, 5}, rng, 0, 1);
    const auto r = gradcheck::check([&](const std::vector<Tensor>& in) { return ncc_loss(in[0], in[1], cfg); }, {a, b});
    EXPECT_LT(r.rel_error, 1e-4);
  }
}

TEST(NccLoss, RejectsBadPatch) {
  Tensor a(Shape{1, 1, 4, 4, 4});
  LossConfig cfg;
  EXPECT_THROW(ncc_loss(a, a, cfg), ShapeError);
  cfg.patch = 4;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(SmoothLoss, ConstantFieldIsZero) {
  Tensor f(Shape{1, 3, 5, 5, 5}, 1.7);
  EXPECT_EQ(smooth_loss(f).item(), 0.0);
}

TEST(SmoothLoss, LinearRampCountsForwardDifferenceSites) {
  // u_x = x: one unit difference at every site with an x-neighbour.
  Tensor f(Shape{1, 3, 4, 5, 6});
  for (Index z = 0; z < 4; ++z)
    for (Index y = 0; y < 5; ++y)
      for (Index x = 0; x < 6; ++x) f.at(0, 2, z, y, x) = static_cast<double>(x);
  EXPECT_DOUBLE_EQ(smooth_loss(f).item(), 4.0 * 5.0 * 5.0);
}

TEST(SmoothLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor f = gradcheck::random_tensor(Shape{1, 3, 3, 4, 3}, rng);
    const auto r = gradcheck::check([](const std::vector<Tensor>& in) { return smooth_loss(in[0]); }, {f});
    EXPECT_LT(r.rel_error, 1e-5);
  }
}

TEST(TotalLoss, ZeroLambdaIsPureNcc) {
  std::mt19937_64 rng(7);
  Tensor a = image(rng, 9, 9, 9), b = image(rng, 9, 9, 9);
  Tensor f = gradcheck::random_tensor(Shape{1, 3, 9, 9, 9}, rng, -1, 1, false);
  LossConfig cfg;
  cfg.lambda = 0.0;
  const LossTerms t = total_loss(a, b, f, cfg);
  EXPECT_EQ(t.total.item(), ncc_loss(a, b, cfg).item());
  cfg.lambda = 2.5;
  const LossTerms u = total_loss(a, b, f, cfg);
  EXPECT_NEAR(u.total.item(), u.ncc.item() + 2.5 * u.smooth.item(), 1e-9);
}

TEST(TotalLoss, LargerLambdaGivesSmootherOptimum) {
  // Fit a free displacement field directly; stronger regularisation must not
  // end rougher.
  SynthSpec spec;
  spec.grid_size = 16;
  spec.num_blobs = 6;
  spec.seed = 3;
  const SynthPair pair = make_pair(spec);
  const Tensor fixed = to_tensor(pair.fixed), moving = to_tensor(pair.moving);
  LossConfig cfg;
  cfg.patch = 5;
  std::vector<double> roughness;
  for (double lambda : {0.0, 1.0, 10.0}) {
    cfg.lambda = lambda;
    ParamStore store;
    Tensor& u = store.add("u", Shape{1, 3, 16, 16, 16});
    for (int step = 0; step < 40; ++step) {
      store.zero_grad();
      backward(total_loss(fixed, warp(moving, u), u, cfg).total);
      adam_step(store, AdamOptions{0.05});
    }
    roughness.push_back(smooth_loss(u).item());
  }
  EXPECT_GT(roughness[0], 0.0);
  EXPECT_GE(roughness[0], roughness[1]);
  EXPECT_GE(roughness[1], roughness[2]);
}
