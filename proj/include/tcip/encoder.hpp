#pragma once

// Weight-shared four-block encoder. Block l applies conv3d(3^3) + LeakyReLU and
// then halves the grid with average pooling, so level l lives at
// full resolution / 2^l.

#include <array>
#include <random>
#include <string>

#include "tcip/ops.hpp"
#include "tcip/param_store.hpp"

namespace tcip {

inline constexpr int kPyramidLevels = 4;
inline constexpr Index kGridMultiple = Index{1} << kPyramidLevels;
inline constexpr double kLeakySlope = 0.2;

struct EncoderConfig {
  std::array<Index, kPyramidLevels> channels{8, 16, 16, 16};
  Index in_channels = 1;

  void validate() const {
    if (in_channels < 1) throw ConfigError("encoder: input channels must be >= 1");
    for (Index c : channels)
      if (c < 1) throw ConfigError("encoder: channel counts must be >= 1");
  }
};

/// Feature maps indexed by level 1..4.
struct FeaturePyramid {
  std::array<Tensor, kPyramidLevels> maps;

  const Tensor& level(int l) const { return maps.at(static_cast<std::size_t>(l - 1)); }
  Tensor& level(int l) { return maps.at(static_cast<std::size_t>(l - 1)); }
};

inline std::string encoder_param(int level, const char* what) {
  return "encoder.block" + std::to_string(level) + "." + what;
}

inline void init_encoder_params(ParamStore& store, const EncoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  Index in = cfg.in_channels;
  for (int l = 1; l <= kPyramidLevels; ++l) {
    const Index out = cfg.channels[static_cast<std::size_t>(l - 1)];
    store.add_uniform(encoder_param(l, "weight"), Shape{out, in, 3, 3, 3}, in * 27, rng);
    store.add(encoder_param(l, "bias"), Shape{1, out, 1, 1, 1});
    in = out;
  }
}

/// Encodes an image tensor (1,Cin,D,H,W); every spatial dim must be a multiple of 16.
inline FeaturePyramid encode(const Tensor& image, const ParamStore& params) {
  const Shape& s = image.shape();
  if (s.d() % kGridMultiple || s.h() % kGridMultiple || s.w() % kGridMultiple)
    throw ShapeError("encode: spatial dims of " + s.str() + " must be divisible by 16; pad the image first");
  FeaturePyramid pyramid;
  Tensor x = image;
  for (int l = 1; l <= kPyramidLevels; ++l) {
    x = leaky_relu(conv3d(x, params.get(encoder_param(l, "weight")), params.get(encoder_param(l, "bias"))),
                   kLeakySlope);
    x = avg_pool3d(x, 2);
    pyramid.level(l) = x;
  }
  return pyramid;
}

}  // namespace tcip
