#pragma once

// Coarse-to-fine decoding: four FERM layers, each iterated under a TCI
// controller, turning a pair of feature pyramids into a full-resolution field.

#include <array>
#include <chrono>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "tcip/encoder.hpp"
#include "tcip/ferm.hpp"
#include "tcip/losses.hpp"
#include "tcip/tci.hpp"
#include "tcip/volume.hpp"
#include "tcip/warpfield.hpp"

namespace tcip {

struct TcipModel {
  EncoderConfig encoder;
  FermOptions ferm;
  ParamStore params;

  FermLayer layer(int level) const { return FermLayer{&params, level, ferm}; }
};

inline TcipModel make_model(const EncoderConfig& enc, const FermOptions& ferm, std::uint64_t seed) {
  TcipModel m{enc, ferm, {}};
  std::mt19937_64 rng(seed);
  init_encoder_params(m.params, enc, rng);
  for (int l = 1; l <= kPyramidLevels; ++l)
    init_ferm_params(m.params, l, enc.channels[static_cast<std::size_t>(l - 1)], ferm, rng);
  return m;
}

struct TraceRow {
  int layer = 0;
  int iteration = 0;
  double score = 0.0;
  std::optional<double> window_std;
  std::optional<double> delta;
  DecisionKind decision = DecisionKind::Continue;
  std::optional<StopStage> stage;
};

struct LayerOptions {
  TciConfig tci;
  Index similarity_patch = 9;
  double similarity_epsilon = 1e-5;
  /// Cut the graph between iterations of a layer.
  bool detach_iterations = false;
  /// Return the best-scoring field among the last window + 1 iterations.
  bool return_best = false;
};

struct LayerInputs {
  int level = 4;
  Tensor fixed_feat;
  Tensor moving_feat;
  std::optional<DeformationField> incoming;  // already at this level's grid
  Tensor fixed_image;                        // full resolution
  Tensor moving_image;
};

struct LayerResult {
  DeformationField field;   // this layer's field upsampled by 2
  DeformationField at_level;
  int iterations = 0;
  std::vector<TraceRow> trace;
};

/// Registration process of one decoding layer. `estimate(moving, fixed)` returns
/// an increment field at this level's grid.
template <class Estimator>
LayerResult run_layer(const LayerInputs& in, Estimator&& estimate, const LayerOptions& opt) {
  const int level = in.level;
  TciController controller(opt.tci, opt.tci.layer_enabled.at(static_cast<std::size_t>(level - 1)));
  const Index to_full = Index{1} << level;

  std::optional<DeformationField> prev = in.incoming;
  struct Candidate {
    double score;
    DeformationField field;
  };
  std::deque<Candidate> recent;
  LayerResult result;
  DeformationField current;

  while (true) {
    Tensor moving = prev ? warp(in.moving_feat, prev->displacements) : in.moving_feat;
    DeformationField increment = estimate(moving, in.fixed_feat);
    current = prev ? compose(*prev, increment) : increment;

    double score;
    {
      NoGradGuard guard;
      DeformationField full = upsample_field(DeformationField(current.displacements.detach(), level), to_full);
      score = similarity(in.fixed_image, warp(in.moving_image, full.displacements), opt.tci.metric,
                         opt.similarity_patch, opt.similarity_epsilon);
    }
    const Decision d = controller.observe(score);
    result.trace.push_back(TraceRow{level, d.iteration, score, d.window_std, d.delta, d.kind, d.stage});

    if (opt.return_best) {
      recent.push_back({score, current});
      if (static_cast<int>(recent.size()) > opt.tci.window + 1) recent.pop_front();
    }
    if (d.terminal()) break;
    prev = opt.detach_iterations ? DeformationField(current.displacements.detach(), level) : current;
  }

  if (opt.return_best && !recent.empty()) {
    const Candidate* best = &recent.back();
    for (const auto& c : recent)
      if (c.score > best->score) best = &c;
    current = best->field;
  }
  result.iterations = controller.iteration();
  result.at_level = current;
  result.field = upsample_field(current, 2);
  return result;
}

struct RegistrationResult {
  DeformationField field;  // full resolution
  Tensor warped;
  std::array<int, kPyramidLevels> iterations{};
  std::vector<TraceRow> trace;
};

/// Full coarse-to-fine pass on (1,1,D,H,W) image tensors.
inline RegistrationResult register_tensors(const TcipModel& model, const Tensor& fixed, const Tensor& moving,
                                           const LayerOptions& opt) {
  require_same_shape(fixed, moving, "register");
  FeaturePyramid fp = encode(fixed, model.params);
  FeaturePyramid mp = encode(moving, model.params);

  RegistrationResult out;
  std::optional<DeformationField> incoming;
  for (int level = kPyramidLevels; level >= 1; --level) {
    const FermLayer layer = model.layer(level);
    auto estimator = [&layer](const Tensor& m, const Tensor& f) { return ferm_forward(m, f, layer).field; };
    LayerInputs in{level, fp.level(level), mp.level(level), incoming, fixed, moving};
    LayerResult lr = run_layer(in, estimator, opt);
    out.iterations[static_cast<std::size_t>(level - 1)] = lr.iterations;
    out.trace.insert(out.trace.end(), lr.trace.begin(), lr.trace.end());
    incoming = lr.field;
  }
  out.field = *incoming;
  out.warped = warp(moving, out.field.displacements);
  return out;
}

// ---------------------------------------------------------------------------
// Padding to the encoder's grid multiple

inline Index round_up(Index v, Index multiple) { return (v + multiple - 1) / multiple * multiple; }

/// Zero-pads a volume (at the high end of each axis) to multiples of `multiple`.
inline Volume pad_volume(const Volume& v, Index multiple = kGridMultiple) {
  Dims3 pd{round_up(v.dims.d, multiple), round_up(v.dims.h, multiple), round_up(v.dims.w, multiple)};
  if (pd == v.dims) return v;
  Volume out(pd, 0.0f, v.spacing);
  for (Index z = 0; z < v.dims.d; ++z)
    for (Index y = 0; y < v.dims.h; ++y)
      for (Index x = 0; x < v.dims.w; ++x) out.at(z, y, x) = v.at(z, y, x);
  return out;
}

/// Crops the spatial extent of a tensor to `dims`, keeping the low corner.
inline Tensor crop_tensor(const Tensor& t, Dims3 dims) {
  const Shape& s = t.shape();
  if (spatial_dims(s) == dims) return t.detach();
  Tensor out(Shape{s.n(), s.c(), dims.d, dims.h, dims.w});
  for (Index nc = 0; nc < s.n() * s.c(); ++nc)
    for (Index z = 0; z < dims.d; ++z)
      for (Index y = 0; y < dims.h; ++y)
        for (Index x = 0; x < dims.w; ++x)
          out.mutable_data()[((nc * dims.d + z) * dims.h + y) * dims.w + x] =
              t.data()[((nc * s.d() + z) * s.h() + y) * s.w() + x];
  return out;
}

struct VolumeRegistration {
  Tensor field;  // (1,3,D,H,W) on the original grid
  Volume warped;
  std::array<int, kPyramidLevels> iterations{};
  std::vector<TraceRow> trace;
  double seconds = 0.0;
};

/// Inference on volumes of any size: pads to the grid multiple, registers
/// without recording a graph, and crops the outputs back.
inline VolumeRegistration register_volumes(const TcipModel& model, const Volume& fixed, const Volume& moving,
                                           const LayerOptions& opt) {
  if (!(fixed.dims == moving.dims))
    throw ShapeError("register: fixed " + fixed.dims.str() + " and moving " + moving.dims.str() + " differ");
  NoGradGuard guard;
  const auto start = std::chrono::steady_clock::now();
  Tensor f = to_tensor(pad_volume(fixed));
  Tensor m = to_tensor(pad_volume(moving));
  RegistrationResult r = register_tensors(model, f, m, opt);
  VolumeRegistration out;
  out.field = crop_tensor(r.field.displacements, fixed.dims);
  out.warped = to_volume(crop_tensor(r.warped, fixed.dims), moving.spacing);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.iterations = r.iterations;
  out.trace = std::move(r.trace);
  return out;
}

}  // namespace tcip
