#pragma once

// Overlap, surface-distance and intensity metrics for evaluating a registration.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "tcip/error.hpp"
#include "tcip/volume.hpp"

namespace tcip {

inline void require_same_grid(const Dims3& a, const Dims3& b, const char* what) {
  if (!(a == b)) throw ShapeError(std::string(what) + ": grid mismatch " + a.str() + " vs " + b.str());
}

/// 2|A∩B| / (|A|+|B|); a label absent from both volumes scores 1.
inline double dice(const LabelVolume& a, const LabelVolume& b, int label) {
  require_same_grid(a.dims, b.dims, "dice");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    const bool in_a = a.labels[i] == label, in_b = b.labels[i] == label;
    na += in_a;
    nb += in_b;
    both += in_a && in_b;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

/// Mean Dice over the foreground labels present in `reference`.
inline double mean_dice(const LabelVolume& reference, const LabelVolume& other) {
  double acc = 0.0;
  int count = 0;
  for (int label : reference.label_set()) {
    if (label == 0) continue;
    acc += dice(reference, other, label);
    ++count;
  }
  return count ? acc / count : 1.0;
}

/// Mean squared intensity difference.
inline double mse(const Volume& a, const Volume& b) {
  require_same_grid(a.dims, b.dims, "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

/// Linear interpolation between order statistics; q in [0,1].
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ConfigError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double rank = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (rank - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

/// Voxels of `label` with a 6-neighbour outside the label (or outside the grid).
inline std::vector<Index> surface_voxels(const LabelVolume& v, int label) {
  std::vector<Index> out;
  const Dims3 d = v.dims;
  auto is = [&](Index z, Index y, Index x) {
    return z >= 0 && y >= 0 && x >= 0 && z < d.d && y < d.h && x < d.w && v.at(z, y, x) == label;
  };
  for (Index z = 0; z < d.d; ++z)
    for (Index y = 0; y < d.h; ++y)
      for (Index x = 0; x < d.w; ++x) {
        if (v.at(z, y, x) != label) continue;
        if (!is(z - 1, y, x) || !is(z + 1, y, x) || !is(z, y - 1, x) || !is(z, y + 1, x) || !is(z, y, x - 1) ||
            !is(z, y, x + 1))
          out.push_back(d.offset(z, y, x));
      }
  return out;
}

namespace detail {

// Lower envelope of parabolas: out[q] = min_p weight*(q-p)^2 + f[p].
inline void distance_transform_1d(const std::vector<double>& f, double weight, std::vector<double>& out) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const Index n = static_cast<Index>(f.size());
  std::vector<Index> site;
  std::vector<double> start;
  site.reserve(f.size());
  start.reserve(f.size() + 1);
  auto cross = [&](Index q, Index p) {
    const double fq = f[q] + weight * static_cast<double>(q * q);
    const double fp = f[p] + weight * static_cast<double>(p * p);
    return (fq - fp) / (2.0 * weight * static_cast<double>(q - p));
  };
  for (Index q = 0; q < n; ++q) {
    if (!std::isfinite(f[q])) continue;
    while (!site.empty()) {
      const double s = cross(q, site.back());
      if (s <= start.back()) {
        site.pop_back();
        start.pop_back();
      } else {
        site.push_back(q);
        start.push_back(s);
        break;
      }
    }
    if (site.empty()) {
      site.push_back(q);
      start.push_back(-inf);
    }
  }
  out.assign(f.size(), inf);
  if (site.empty()) return;
  std::size_t k = 0;
  for (Index q = 0; q < n; ++q) {
    while (k + 1 < site.size() && start[k + 1] < static_cast<double>(q)) ++k;
    const double dq = static_cast<double>(q - site[k]);
    out[q] = weight * dq * dq + f[site[k]];
  }
}

}  // namespace detail

/// Squared Euclidean distance (physical units) from every voxel to the
/// nearest voxel in `sites`.
inline std::vector<double> squared_distance_map(const Dims3& d, const Spacing& spacing, const std::vector<Index>& sites) {
  std::vector<double> g(static_cast<std::size_t>(d.count()), std::numeric_limits<double>::infinity());
  for (Index s : sites) g[s] = 0.0;
  std::vector<double> line, out;
  const Index extent[3] = {d.d, d.h, d.w};
  const Index stride[3] = {d.h * d.w, d.w, 1};
  for (int axis = 2; axis >= 0; --axis) {
    const double weight = spacing[axis] * spacing[axis];
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    line.resize(static_cast<std::size_t>(extent[axis]));
    for (Index i = 0; i < extent[a1]; ++i)
      for (Index j = 0; j < extent[a2]; ++j) {
        const Index base = i * stride[a1] + j * stride[a2];
        for (Index k = 0; k < extent[axis]; ++k) line[k] = g[base + k * stride[axis]];
        detail::distance_transform_1d(line, weight, out);
        for (Index k = 0; k < extent[axis]; ++k) g[base + k * stride[axis]] = out[k];
      }
  }
  return g;
}

struct SurfaceDistances {
  double hd95 = 0.0;
  double assd = 0.0;
};

/// 95th-percentile and mean of the symmetric surface-to-surface distances.
inline SurfaceDistances surface_distances(const LabelVolume& a, const LabelVolume& b, int label) {
  require_same_grid(a.dims, b.dims, "surface_distances");
  const auto sa = surface_voxels(a, label);
  const auto sb = surface_voxels(b, label);
  if (sa.empty() || sb.empty())
    throw ConfigError("surface_distances: label " + std::to_string(label) + " absent from " +
                      (sa.empty() ? "first" : "second") + " volume");
  const auto to_b = squared_distance_map(a.dims, a.spacing, sb);
  const auto to_a = squared_distance_map(a.dims, a.spacing, sa);
  std::vector<double> all;
  all.reserve(sa.size() + sb.size());
  double acc = 0.0;
  for (Index v : sa) all.push_back(std::sqrt(to_b[v]));
  for (Index v : sb) all.push_back(std::sqrt(to_a[v]));
  for (double v : all) acc += v;
  return {percentile(all, 0.95), acc / static_cast<double>(all.size())};
}

/// Averages hd95/assd over foreground labels present in both volumes.
inline SurfaceDistances mean_surface_distances(const LabelVolume& reference, const LabelVolume& other) {
  SurfaceDistances mean;
  int count = 0;
  const auto present = other.label_set();
  for (int label : reference.label_set()) {
    if (label == 0 || !present.count(label)) continue;
    const auto s = surface_distances(reference, other, label);
    mean.hd95 += s.hd95;
    mean.assd += s.assd;
    ++count;
  }
  if (count) {
    mean.hd95 /= count;
    mean.assd /= count;
  }
  return mean;
}

}  // namespace tcip
