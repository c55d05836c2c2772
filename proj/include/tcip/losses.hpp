#pragma once

// Unsupervised training objective: local normalized cross-correlation plus a
// squared-gradient smoothness penalty on the displacement field.

#include "tcip/ops.hpp"
#include "tcip/warpfield.hpp"

namespace tcip {

struct LossConfig {
  Index patch = 9;        // NCC window edge n (odd)
  double lambda = 1.0;    // smoothness weight
  double epsilon = 1e-5;  // added under the square root of the NCC denominator

  void validate() const {
    if (patch < 3 || patch % 2 == 0) throw ConfigError("loss: patch size must be odd and >= 3");
    if (lambda < 0.0) throw ConfigError("loss: lambda must be >= 0");
    if (!(epsilon > 0.0)) throw ConfigError("loss: epsilon must be > 0");
  }
};

/// Per-voxel correlation of the n^3 neighbourhoods of fixed and warped. Window
/// sums use zero padding; local means divide by the in-volume voxel count.
inline Tensor local_ncc_map(const Tensor& fixed, const Tensor& warped, Index patch, double epsilon) {
  require_same_shape(fixed, warped, "ncc");
  const Shape& s = fixed.shape();
  if (patch > s.d() || patch > s.h() || patch > s.w())
    throw ShapeError("ncc: patch " + std::to_string(patch) + " larger than volume " + s.str());
  if (patch < 1 || patch % 2 == 0) throw ConfigError("ncc: patch size must be odd");

  Tensor count;
  {
    NoGradGuard guard;
    count = box_sum(Tensor(s, 1.0), patch);
  }
  Tensor sum_f = box_sum(fixed, patch);
  Tensor sum_w = box_sum(warped, patch);
  Tensor sum_ff = box_sum(square(fixed), patch);
  Tensor sum_ww = box_sum(square(warped), patch);
  Tensor sum_fw = box_sum(mul(fixed, warped), patch);

  Tensor cross = sub(sum_fw, div(mul(sum_f, sum_w), count));
  Tensor var_f = sub(sum_ff, div(square(sum_f), count));
  Tensor var_w = sub(sum_ww, div(square(sum_w), count));
  return div(cross, sqrt(add_scalar(mul(var_f, var_w), epsilon)));
}

/// -Σ_p NCC_p over the whole volume.
inline Tensor ncc_loss(const Tensor& fixed, const Tensor& warped, const LossConfig& cfg) {
  return mul_scalar(sum(local_ncc_map(fixed, warped, cfg.patch, cfg.epsilon)), -1.0);
}

/// Σ_p ||∇u(p)||^2 with forward differences; sites without a forward
/// neighbour on an axis contribute nothing for that axis.
inline Tensor smooth_loss(const Tensor& field) {
  Tensor total;
  for (int axis = 2; axis <= 4; ++axis) {
    Tensor term = sum(square(forward_diff(field, axis)));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

inline Tensor smooth_loss(const DeformationField& f) { return smooth_loss(f.displacements); }

struct LossTerms {
  Tensor total;
  Tensor ncc;
  Tensor smooth;
};

inline LossTerms total_loss(const Tensor& fixed, const Tensor& warped, const Tensor& field, const LossConfig& cfg) {
  LossTerms t;
  t.ncc = ncc_loss(fixed, warped, cfg);
  t.smooth = smooth_loss(field);
  t.total = cfg.lambda == 0.0 ? t.ncc : add(t.ncc, mul_scalar(t.smooth, cfg.lambda));
  return t;
}

}  // namespace tcip
