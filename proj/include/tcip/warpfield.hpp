#pragma once

// Displacement-field algebra: spatial-transformer warping, warp-then-add
// composition, resolution changes, and Jacobian folding statistics.
//
// Fields are (N,3,D,H,W) tensors holding (dz, dy, dx) in voxel units of their
// own grid. Warping samples input(x + u(x)) trilinearly; sample positions
// outside the grid are clamped to the border.

#include <array>
#include <bit>
#include <cmath>
#include <string>

#include "tcip/ops.hpp"
#include "tcip/tensor.hpp"
#include "tcip/volume.hpp"

namespace tcip {

struct DeformationField {
  Tensor displacements;
  /// Resolution level: the grid is full resolution / 2^scale_level.
  int scale_level = 0;

  DeformationField() = default;
  DeformationField(Tensor disp, int level) : displacements(std::move(disp)), scale_level(level) {
    if (displacements.shape().c() != 3)
      throw ShapeError("deformation field needs 3 channels, got " + displacements.shape().str());
  }

  const Shape& shape() const { return displacements.shape(); }

  static DeformationField zeros(Dims3 dims, int level = 0) {
    return DeformationField(Tensor(Shape{1, 3, dims.d, dims.h, dims.w}), level);
  }
};

namespace detail {

struct AxisSample {
  Index lo, hi;
  double t;
  bool clamped;
};

inline AxisSample axis_sample(double c, Index extent) {
  if (extent == 1) return {0, 0, 0.0, true};
  bool clamped = false;
  if (c < 0.0) {
    c = 0.0;
    clamped = true;
  } else if (c > static_cast<double>(extent - 1)) {
    c = static_cast<double>(extent - 1);
    clamped = true;
  }
  const Index lo = std::min<Index>(static_cast<Index>(std::floor(c)), extent - 2);
  return {lo, lo + 1, c - static_cast<double>(lo), clamped};
}

}  // namespace detail

/// output(x) = input(x + u(x)) per channel, trilinear with border clamping.
/// Differentiable with respect to both the input and the displacements.
inline Tensor warp(const Tensor& input, const Tensor& field) {
  const Shape& si = input.shape();
  const Shape& sf = field.shape();
  if (sf.c() != 3 || sf.n() != si.n() || sf.d() != si.d() || sf.h() != si.h() || sf.w() != si.w())
    throw ShapeError("warp: field " + sf.str() + " does not match input " + si.str());
  Tensor out = detail::make_result(si, "warp", {&input, &field});

  const Index D = si.d(), H = si.h(), W = si.w(), C = si.c(), sp = si.spatial();
  auto visit = [=](const std::vector<double>& img, const std::vector<double>& disp, auto&& fn) {
    for (Index n = 0; n < si.n(); ++n)
      for (Index z = 0; z < D; ++z)
        for (Index y = 0; y < H; ++y)
          for (Index x = 0; x < W; ++x) {
            const Index v = (z * H + y) * W + x;
            const double* u = disp.data() + n * 3 * sp + v;
            const auto az = detail::axis_sample(static_cast<double>(z) + u[0], D);
            const auto ay = detail::axis_sample(static_cast<double>(y) + u[sp], H);
            const auto ax = detail::axis_sample(static_cast<double>(x) + u[2 * sp], W);
            for (Index c = 0; c < C; ++c) fn(n, c, v, az, ay, ax, img.data() + (n * C + c) * sp);
          }
  };

  auto ys = out.mutable_data();
  visit(input.values(), field.values(),
        [&](Index n, Index c, Index v, const auto& az, const auto& ay, const auto& ax, const double* src) {
          const double wz[2] = {1.0 - az.t, az.t}, wy[2] = {1.0 - ay.t, ay.t}, wx[2] = {1.0 - ax.t, ax.t};
          const Index zs[2] = {az.lo, az.hi}, yv[2] = {ay.lo, ay.hi}, xv[2] = {ax.lo, ax.hi};
          double acc = 0.0;
          for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j)
              for (int k = 0; k < 2; ++k) acc += wz[i] * wy[j] * wx[k] * src[(zs[i] * H + yv[j]) * W + xv[k]];
          ys[(n * C + c) * sp + v] = acc;
        });

  if (out.requires_grad()) {
    out.node()->backward_fn = [visit, H, W, C, sp](detail::Node& self) {
      detail::Node& pimg = *self.parents[0];
      detail::Node& pfld = *self.parents[1];
      double* gimg = pimg.requires_grad ? pimg.ensure_grad().data() : nullptr;
      double* gfld = pfld.requires_grad ? pfld.ensure_grad().data() : nullptr;
      const double* imgv = pimg.value.data();
      visit(pimg.value, pfld.value,
            [&](Index n, Index c, Index v, const auto& az, const auto& ay, const auto& ax, const double* src) {
              const double g = self.grad[(n * C + c) * sp + v];
              if (g == 0.0) return;
              const double wz[2] = {1.0 - az.t, az.t}, wy[2] = {1.0 - ay.t, ay.t}, wx[2] = {1.0 - ax.t, ax.t};
              const Index zs[2] = {az.lo, az.hi}, yv[2] = {ay.lo, ay.hi}, xv[2] = {ax.lo, ax.hi};
              const double sz[2] = {-1.0, 1.0};
              double dz = 0.0, dy = 0.0, dx = 0.0;
              for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 2; ++j)
                  for (int k = 0; k < 2; ++k) {
                    const Index idx = (zs[i] * H + yv[j]) * W + xv[k];
                    if (gimg) gimg[(src - imgv) + idx] += g * wz[i] * wy[j] * wx[k];
                    const double val = src[idx];
                    dz += sz[i] * wy[j] * wx[k] * val;
                    dy += wz[i] * sz[j] * wx[k] * val;
                    dx += wz[i] * wy[j] * sz[k] * val;
                  }
              if (gfld) {
                double* gu = gfld + n * 3 * sp + v;
                if (!az.clamped) gu[0] += g * dz;
                if (!ay.clamped) gu[sp] += g * dy;
                if (!ax.clamped) gu[2 * sp] += g * dx;
              }
            });
    };
  }
  return out;
}

inline Tensor warp(const Tensor& input, const DeformationField& field) { return warp(input, field.displacements); }

/// Warp-then-add: out(x) = prev(x + next(x)) + next(x).
inline DeformationField compose(const DeformationField& prev, const DeformationField& next) {
  if (prev.shape() != next.shape() || prev.scale_level != next.scale_level)
    throw ShapeError("compose: fields differ: " + prev.shape().str() + "@" + std::to_string(prev.scale_level) + " vs " +
                     next.shape().str() + "@" + std::to_string(next.scale_level));
  return DeformationField(add(warp(prev.displacements, next.displacements), next.displacements), next.scale_level);
}

/// Trilinear upsampling; displacements are rescaled to the finer voxel grid.
inline DeformationField upsample_field(const DeformationField& field, Index factor) {
  if (factor < 1 || !std::has_single_bit(static_cast<std::uint64_t>(factor)))
    throw ConfigError("upsample_field: factor must be a power of two, got " + std::to_string(factor));
  if (factor == 1) return field;
  const int levels = std::countr_zero(static_cast<std::uint64_t>(factor));
  return DeformationField(mul_scalar(upsample_trilinear(field.displacements, factor), static_cast<double>(factor)),
                          field.scale_level - levels);
}

/// Fraction of voxels with det(I + grad u) <= 0. Uses forward differences, so
/// only voxels with a forward neighbour on every axis are counted.
inline double jacobian_folding_fraction(const Tensor& field) {
  const Shape& s = field.shape();
  if (s.c() != 3) throw ShapeError("jacobian_folding_fraction: need 3 channels, got " + s.str());
  if (s.d() < 2 || s.h() < 2 || s.w() < 2) throw ShapeError("jacobian_folding_fraction: spatial dims must be >= 2");
  const Index H = s.h(), W = s.w(), sp = s.spatial();
  const Index step[3] = {H * W, W, 1};
  Index folded = 0, total = 0;
  for (Index n = 0; n < s.n(); ++n) {
    const double* u = field.data().data() + n * 3 * sp;
    for (Index z = 0; z + 1 < s.d(); ++z)
      for (Index y = 0; y + 1 < H; ++y)
        for (Index x = 0; x + 1 < W; ++x) {
          const Index v = (z * H + y) * W + x;
          double j[3][3];
          for (int comp = 0; comp < 3; ++comp)
            for (int axis = 0; axis < 3; ++axis)
              j[comp][axis] = u[comp * sp + v + step[axis]] - u[comp * sp + v] + (comp == axis ? 1.0 : 0.0);
          const double det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) -
                             j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0]) +
                             j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
          ++total;
          if (det <= 0.0) ++folded;
        }
  }
  return static_cast<double>(folded) / static_cast<double>(total);
}

inline double jacobian_folding_fraction(const DeformationField& f) { return jacobian_folding_fraction(f.displacements); }

/// Nearest-neighbour warp of a label volume by a full-resolution field.
inline LabelVolume warp_labels(const LabelVolume& labels, const Tensor& field) {
  const Shape& s = field.shape();
  const Dims3 dims = labels.dims;
  if (s.n() != 1 || s.c() != 3 || spatial_dims(s) != dims)
    throw ShapeError("warp_labels: field " + s.str() + " does not match labels " + dims.str());
  LabelVolume out(dims, 0, labels.spacing);
  const Index sp = s.spatial();
  auto nearest = [](double c, Index extent) {
    c = std::clamp(c, 0.0, static_cast<double>(extent - 1));
    return static_cast<Index>(std::floor(c + 0.5));
  };
  const double* u = field.data().data();
  for (Index z = 0; z < dims.d; ++z)
    for (Index y = 0; y < dims.h; ++y)
      for (Index x = 0; x < dims.w; ++x) {
        const Index v = dims.offset(z, y, x);
        out.labels[v] = labels.at(nearest(z + u[v], dims.d), nearest(y + u[sp + v], dims.h),
                                  nearest(x + u[2 * sp + v], dims.w));
      }
  return out;
}

/// Trilinear warp of an intensity volume (no graph recorded).
inline Volume warp_volume(const Volume& image, const Tensor& field) {
  NoGradGuard guard;
  return to_volume(warp(to_tensor(image), field.detach()), image.spacing);
}

}  // namespace tcip
