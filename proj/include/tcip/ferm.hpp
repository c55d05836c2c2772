#pragma once

// Feature-enhanced residual module: residual fusion of fixed and warped
// moving features (FFB), squeeze-excitation channel re-weighting (SEB), and a
// two-convolution displacement head (DeF).

#include <algorithm>
#include <random>
#include <string>

#include "tcip/encoder.hpp"
#include "tcip/ops.hpp"
#include "tcip/param_store.hpp"
#include "tcip/warpfield.hpp"

namespace tcip {

struct FermOptions {
  Index reduction = 16;
  /// Off: R = LeakyReLU(C1(cat)), no second conv and no residual.
  bool use_ffb = true;
  /// Off: O = R (all channel weights 1).
  bool use_seb = true;

  void validate() const {
    if (reduction < 1) throw ConfigError("ferm: reduction ratio must be >= 1");
  }
};

inline Index seb_hidden_width(Index channels, Index reduction) { return std::max<Index>(channels / reduction, 1); }
inline Index def_hidden_width(Index channels) { return (channels + 1) / 2; }

inline std::string ferm_param(int level, const std::string& what) {
  return "ferm.l" + std::to_string(level) + "." + what;
}

/// Creates the parameters of one decoding layer with C feature channels.
/// C4 starts at zero so an untrained network outputs the identity deformation.
inline void init_ferm_params(ParamStore& store, int level, Index channels, const FermOptions& opt,
                             std::mt19937_64& rng) {
  opt.validate();
  const Index c = channels;
  const Index half = def_hidden_width(c);
  auto conv = [&](const char* name, Index in, Index out) {
    store.add_uniform(ferm_param(level, std::string(name) + ".weight"), Shape{out, in, 3, 3, 3}, in * 27, rng);
    store.add(ferm_param(level, std::string(name) + ".bias"), Shape{1, out, 1, 1, 1});
  };
  conv("c1", 2 * c, c);
  if (opt.use_ffb) conv("c2", c, c);
  if (opt.use_seb) {
    const Index hidden = seb_hidden_width(c, opt.reduction);
    store.add_uniform(ferm_param(level, "seb.w1"), Shape{hidden, c, 1, 1, 1}, c, rng);
    store.add(ferm_param(level, "seb.b1"), Shape{1, hidden, 1, 1, 1});
    store.add_uniform(ferm_param(level, "seb.w2"), Shape{c, hidden, 1, 1, 1}, hidden, rng);
    store.add(ferm_param(level, "seb.b2"), Shape{1, c, 1, 1, 1});
  }
  conv("c3", c, half);
  store.add(ferm_param(level, "c4.weight"), Shape{3, half, 3, 3, 3});
  store.add(ferm_param(level, "c4.bias"), Shape{1, 3, 1, 1, 1});
}

/// Read-only view of one decoding layer's parameters.
struct FermLayer {
  const ParamStore* params = nullptr;
  int level = 1;
  FermOptions options;

  const Tensor& p(const std::string& what) const { return params->get(ferm_param(level, what)); }
  Tensor conv(const char* name, const Tensor& x) const {
    return conv3d(x, p(std::string(name) + ".weight"), p(std::string(name) + ".bias"));
  }
};

/// R = γ(C2(γ(C1(|M,F|))) + γ(C1(|M,F|))).
inline Tensor ffb(const Tensor& moving_feat, const Tensor& fixed_feat, const FermLayer& layer) {
  if (moving_feat.shape() != fixed_feat.shape())
    throw ShapeError("ffb: moving " + moving_feat.shape().str() + " and fixed " + fixed_feat.shape().str() +
                     " features differ");
  Tensor first = leaky_relu(layer.conv("c1", concat_channels(moving_feat, fixed_feat)), kLeakySlope);
  if (!layer.options.use_ffb) return first;
  return leaky_relu(add(layer.conv("c2", first), first), kLeakySlope);
}

struct SebOutput {
  Tensor features;  // O
  Tensor weights;   // S, shape (1,C,1,1,1)
};

inline SebOutput seb(const Tensor& fused, const FermLayer& layer) {
  if (!layer.options.use_seb) {
    const Shape& s = fused.shape();
    return {fused, Tensor(Shape{s.n(), s.c(), 1, 1, 1}, 1.0)};
  }
  Tensor descriptor = global_avg_pool(fused);
  Tensor hidden = leaky_relu(linear(descriptor, layer.p("seb.w1"), layer.p("seb.b1")), kLeakySlope);
  Tensor weights = sigmoid(linear(hidden, layer.p("seb.w2"), layer.p("seb.b2")));
  return {scale_channels(fused, weights), weights};
}

/// φ = C4(C3(O)); no activation on the output.
inline DeformationField def_estimate(const Tensor& enhanced, const FermLayer& layer) {
  return DeformationField(layer.conv("c4", layer.conv("c3", enhanced)), layer.level);
}

struct FermOutput {
  DeformationField field;
  Tensor channel_weights;
};

inline FermOutput ferm_forward(const Tensor& moving_feat, const Tensor& fixed_feat, const FermLayer& layer) {
  SebOutput s = seb(ffb(moving_feat, fixed_feat, layer), layer);
  return {def_estimate(s.features, layer), s.weights};
}

}  // namespace tcip
