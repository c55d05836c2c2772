#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "tcip/error.hpp"
#include "tcip/tensor.hpp"

namespace tcip {

/// Grid extent in (depth, height, width) order, z slowest.
struct Dims3 {
  Index d = 0, h = 0, w = 0;

  Index count() const { return d * h * w; }
  Index offset(Index z, Index y, Index x) const { return (z * h + y) * w + x; }
  friend bool operator==(const Dims3&, const Dims3&) = default;
  std::string str() const { return std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w); }
};

using Spacing = std::array<double, 3>;

/// Scalar intensity image with values in [0, 1].
struct Volume {
  Dims3 dims;
  Spacing spacing{1.0, 1.0, 1.0};
  std::vector<float> data;

  Volume() = default;
  explicit Volume(Dims3 dims_, float fill = 0.0f, Spacing spacing_ = {1.0, 1.0, 1.0})
      : dims(dims_), spacing(spacing_), data(static_cast<std::size_t>(dims_.count()), fill) {}

  float& at(Index z, Index y, Index x) { return data[static_cast<std::size_t>(dims.offset(z, y, x))]; }
  float at(Index z, Index y, Index x) const { return data[static_cast<std::size_t>(dims.offset(z, y, x))]; }
};

/// Integer segmentation; label 0 is background.
struct LabelVolume {
  Dims3 dims;
  Spacing spacing{1.0, 1.0, 1.0};
  std::vector<std::uint16_t> labels;

  LabelVolume() = default;
  explicit LabelVolume(Dims3 dims_, std::uint16_t fill = 0, Spacing spacing_ = {1.0, 1.0, 1.0})
      : dims(dims_), spacing(spacing_), labels(static_cast<std::size_t>(dims_.count()), fill) {}

  std::uint16_t& at(Index z, Index y, Index x) { return labels[static_cast<std::size_t>(dims.offset(z, y, x))]; }
  std::uint16_t at(Index z, Index y, Index x) const { return labels[static_cast<std::size_t>(dims.offset(z, y, x))]; }

  /// Distinct values present, background included when present.
  std::set<int> label_set() const { return std::set<int>(labels.begin(), labels.end()); }
};

inline Tensor to_tensor(const Volume& v) {
  Tensor t(Shape{1, 1, v.dims.d, v.dims.h, v.dims.w});
  std::copy(v.data.begin(), v.data.end(), t.mutable_data().begin());
  return t;
}

/// Converts batch 0, channel 0 of a tensor into a volume, clamping to [0,1].
inline Volume to_volume(const Tensor& t, Spacing spacing = {1.0, 1.0, 1.0}) {
  const Shape& s = t.shape();
  if (s.n() != 1 || s.c() != 1) throw ShapeError("to_volume: expected (1,1,D,H,W), got " + s.str());
  Volume v(Dims3{s.d(), s.h(), s.w()}, 0.0f, spacing);
  for (std::size_t i = 0; i < v.data.size(); ++i)
    v.data[i] = static_cast<float>(std::clamp(t.data()[i], 0.0, 1.0));
  return v;
}

inline Dims3 spatial_dims(const Shape& s) { return Dims3{s.d(), s.h(), s.w()}; }

}  // namespace tcip
