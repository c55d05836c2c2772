#pragma once

// Synthetic registration pairs: a labelled image of smooth blobs, a random
// smooth displacement field, and the moving image obtained by warping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "tcip/error.hpp"
#include "tcip/volume.hpp"
#include "tcip/warpfield.hpp"

namespace tcip {

struct SynthSpec {
  Index grid_size = 32;
  int num_blobs = 16;
  double blob_radius_min = 2.5;
  double blob_radius_max = 4.5;
  double deform_amplitude = 2.0;   // max displacement magnitude, voxels
  double deform_smoothness = 8.0;  // Gaussian sigma, voxels
  std::uint64_t seed = 0;

  void validate() const {
    if (grid_size < 16 || grid_size % 16) throw ConfigError("synth: grid size must be a positive multiple of 16");
    if (num_blobs < 1 || num_blobs > 65535) throw ConfigError("synth: num_blobs must lie in [1, 65535]");
    if (deform_amplitude < 0.0) throw ConfigError("synth: amplitude must be >= 0");
    if (deform_smoothness <= 0.0) throw ConfigError("synth: smoothness must be > 0");
    if (blob_radius_min <= 0.0 || blob_radius_max < blob_radius_min)
      throw ConfigError("synth: invalid blob radius range");
  }
};

struct SynthPair {
  Volume fixed;
  Volume moving;
  LabelVolume fixed_labels;
  LabelVolume moving_labels;
  Tensor gt_field;  // (1,3,G,G,G): moving = fixed warped by gt_field
};

namespace detail {

// Separable Gaussian blur with periodic borders, applied per channel in place.
// Periodic wrap keeps blurred noise stationary up to the edges.
inline void gaussian_blur(std::vector<double>& data, Dims3 d, Index channels, double sigma) {
  const Index radius = static_cast<Index>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double norm = 0.0;
  for (Index i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    norm += kernel[i + radius];
  }
  for (double& k : kernel) k /= norm;

  const Index extent[3] = {d.d, d.h, d.w};
  const Index stride[3] = {d.h * d.w, d.w, 1};
  std::vector<double> line;
  for (Index c = 0; c < channels; ++c) {
    double* vol = data.data() + c * d.count();
    for (int axis = 0; axis < 3; ++axis) {
      const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
      line.resize(static_cast<std::size_t>(extent[axis]));
      for (Index i = 0; i < extent[a1]; ++i)
        for (Index j = 0; j < extent[a2]; ++j) {
          const Index base = i * stride[a1] + j * stride[a2];
          for (Index k = 0; k < extent[axis]; ++k) line[k] = vol[base + k * stride[axis]];
          for (Index k = 0; k < extent[axis]; ++k) {
            double acc = 0.0;
            for (Index t = -radius; t <= radius; ++t)
              acc += kernel[t + radius] * line[((k + t) % extent[axis] + extent[axis]) % extent[axis]];
            vol[base + k * stride[axis]] = acc;
          }
        }
    }
  }
}

}  // namespace detail

/// Random smooth field with max displacement magnitude equal to `amplitude`.
inline Tensor random_smooth_field(Dims3 dims, double amplitude, double smoothness, std::mt19937_64& rng) {
  Tensor field(Shape{1, 3, dims.d, dims.h, dims.w});
  if (amplitude == 0.0) return field;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> raw(static_cast<std::size_t>(3 * dims.count()));
  for (double& v : raw) v = normal(rng);
  detail::gaussian_blur(raw, dims, 3, smoothness);
  const Index sp = dims.count();
  double peak = 0.0;
  for (Index v = 0; v < sp; ++v)
    peak = std::max(peak, std::sqrt(raw[v] * raw[v] + raw[sp + v] * raw[sp + v] + raw[2 * sp + v] * raw[2 * sp + v]));
  const double scale = peak > 0.0 ? amplitude / peak : 0.0;
  auto out = field.mutable_data();
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = raw[i] * scale;
  return field;
}

inline SynthPair make_pair(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const Index g = spec.grid_size;
  const Dims3 dims{g, g, g};

  struct Blob {
    double z, y, x, radius, intensity;
  };
  std::vector<Blob> blobs;
  std::uniform_real_distribution<double> radius_dist(spec.blob_radius_min, spec.blob_radius_max);
  std::uniform_real_distribution<double> intensity_dist(0.35, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int b = 0; b < spec.num_blobs; ++b) {
    const double r = radius_dist(rng);
    const double margin = std::min(r + 1.0, 0.5 * static_cast<double>(g) - 1.0);
    auto centre = [&] { return margin + unit(rng) * (static_cast<double>(g - 1) - 2.0 * margin); };
    const double z = centre(), y = centre(), x = centre();
    blobs.push_back({z, y, x, r, intensity_dist(rng)});
  }

  SynthPair pair;
  pair.fixed = Volume(dims);
  pair.fixed_labels = LabelVolume(dims);
  for (Index z = 0; z < g; ++z)
    for (Index y = 0; y < g; ++y)
      for (Index x = 0; x < g; ++x) {
        double best = 0.0;
        std::uint16_t label = 0;
        for (std::size_t b = 0; b < blobs.size(); ++b) {
          const auto& bl = blobs[b];
          const double dz = z - bl.z, dy = y - bl.y, dx = x - bl.x;
          const double rho2 = (dz * dz + dy * dy + dx * dx) / (bl.radius * bl.radius);
          if (rho2 >= 1.0) continue;
          // Bright rim falling towards the centre gives every blob interior texture.
          const double value = bl.intensity * (0.55 + 0.45 * rho2);
          if (value > best) {
            best = value;
            label = static_cast<std::uint16_t>(b + 1);
          }
        }
        pair.fixed.at(z, y, x) = static_cast<float>(std::clamp(best, 0.0, 1.0));
        pair.fixed_labels.at(z, y, x) = label;
      }

  pair.gt_field = random_smooth_field(dims, spec.deform_amplitude, spec.deform_smoothness, rng);
  pair.moving = warp_volume(pair.fixed, pair.gt_field);
  pair.moving_labels = warp_labels(pair.fixed_labels, pair.gt_field);
  return pair;
}

}  // namespace tcip
