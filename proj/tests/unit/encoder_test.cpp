#include <gtest/gtest.h>

#include <random>

#include "support/gradcheck.hpp"
#include "tcip/encoder.hpp"
#include "tcip/ops.hpp"

using namespace tcip;

namespace {

ParamStore encoder_store(std::uint64_t seed = 1, EncoderConfig cfg = {}) {
  ParamStore store;
  std::mt19937_64 rng(seed);
  init_encoder_params(store, cfg, rng);
  return store;
}

}  // namespace

TEST(Encoder, LevelShapesFor32Cube) {
  const ParamStore store = encoder_store();
  std::mt19937_64 rng(2);
  const FeaturePyramid p = encode(gradcheck::random_tensor(Shape{1, 1, 32, 32, 32}, rng, 0, 1, false), store);
  EXPECT_EQ(p.level(1).shape(), (Shape{1, 8, 16, 16, 16}));
  EXPECT_EQ(p.level(2).shape(), (Shape{1, 16, 8, 8, 8}));
  EXPECT_EQ(p.level(3).shape(), (Shape{1, 16, 4, 4, 4}));
  EXPECT_EQ(p.level(4).shape(), (Shape{1, 16, 2, 2, 2}));
}

TEST(Encoder, SpatialHalvesPerLevel) {
  const ParamStore store = encoder_store();
  const FeaturePyramid p = encode(Tensor(Shape{1, 1, 16, 32, 48}, 0.5), store);
  for (int l = 2; l <= 4; ++l) {
    EXPECT_EQ(p.level(l).shape().d() * 2, p.level(l - 1).shape().d());
    EXPECT_EQ(p.level(l).shape().h() * 2, p.level(l - 1).shape().h());
    EXPECT_EQ(p.level(l).shape().w() * 2, p.level(l - 1).shape().w());
  }
}

TEST(Encoder, Deterministic) {
  const ParamStore store = encoder_store();
  std::mt19937_64 rng(3);
  Tensor img = gradcheck::random_tensor(Shape{1, 1, 16, 16, 16}, rng, 0, 1, false);
  const FeaturePyramid a = encode(img, store), b = encode(img, store);
  for (int l = 1; l <= 4; ++l) EXPECT_EQ(a.level(l).values(), b.level(l).values());
}

TEST(Encoder, SingleSharedParameterSet) {
  const ParamStore store = encoder_store();
  EXPECT_EQ(store.size(), 8u);  // weight + bias per block, one copy
  Tensor img(Shape{1, 1, 16, 16, 16}, 0.3);
  const FeaturePyramid f = encode(img, store), m = encode(img, store);
  for (int l = 1; l <= 4; ++l) EXPECT_EQ(f.level(l).values(), m.level(l).values());
}

TEST(Encoder, RejectsUnpaddedInput) {
  const ParamStore store = encoder_store();
  EXPECT_THROW(encode(Tensor(Shape{1, 1, 20, 16, 16}), store), ShapeError);
}

TEST(Encoder, GradientsReachEveryBlockFromAnyLevel) {
  ParamStore store = encoder_store(4);
  std::mt19937_64 rng(5);
  Tensor img = gradcheck::random_tensor(Shape{1, 1, 16, 16, 16}, rng, 0, 1, false);
  for (int level = 1; level <= 4; ++level) {
    store.zero_grad();
    backward(sum(square(encode(img, store).level(level))));
    for (int b = 1; b <= level; ++b) {
      const Tensor& w = store.get(encoder_param(b, "weight"));
      ASSERT_TRUE(w.has_grad());
      double norm = 0.0;
      for (double g : w.grad()) norm += g * g;
      EXPECT_GT(norm, 0.0) << "block " << b << " from level " << level;
    }
  }
}

TEST(Encoder, ConfigValidation) {
  EncoderConfig bad;
  bad.channels[2] = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}
