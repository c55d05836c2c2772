#pragma once

// Naive reference implementations used as test oracles. Each is written from
// the definition with plain loops and shares no code with the library.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

namespace oracle {

using Index = std::int64_t;

struct Grid {
  Index n = 1, c = 1, d = 1, h = 1, w = 1;
  Index size() const { return n * c * d * h * w; }
  Index at(Index in, Index ic, Index z, Index y, Index x) const { return (((in * c + ic) * d + z) * h + y) * w + x; }
};

inline std::vector<double> random_values(Index count, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(count));
  for (double& x : v) x = dist(rng);
  return v;
}

/// Cross-correlation with zero padding; kernel (co, ci, kd, kh, kw).
inline std::vector<double> conv3d(const std::vector<double>& in, const Grid& gi, const std::vector<double>& k,
                                  const Grid& gk, const std::vector<double>& bias, Index stride, Index pad, Grid& go) {
  go = {gi.n, gk.n, (gi.d + 2 * pad - gk.d) / stride + 1, (gi.h + 2 * pad - gk.h) / stride + 1,
        (gi.w + 2 * pad - gk.w) / stride + 1};
  std::vector<double> out(static_cast<std::size_t>(go.size()), 0.0);
  for (Index n = 0; n < go.n; ++n)
    for (Index co = 0; co < go.c; ++co)
      for (Index z = 0; z < go.d; ++z)
        for (Index y = 0; y < go.h; ++y)
          for (Index x = 0; x < go.w; ++x) {
            double acc = bias.empty() ? 0.0 : bias[co];
            for (Index ci = 0; ci < gi.c; ++ci)
              for (Index a = 0; a < gk.d; ++a)
                for (Index b = 0; b < gk.h; ++b)
                  for (Index e = 0; e < gk.w; ++e) {
                    const Index iz = z * stride + a - pad, iy = y * stride + b - pad, ix = x * stride + e - pad;
                    if (iz < 0 || iy < 0 || ix < 0 || iz >= gi.d || iy >= gi.h || ix >= gi.w) continue;
                    acc += in[gi.at(n, ci, iz, iy, ix)] * k[gk.at(co, ci, a, b, e)];
                  }
            out[go.at(n, co, z, y, x)] = acc;
          }
  return out;
}

inline std::vector<double> avg_pool(const std::vector<double>& in, const Grid& gi, Index win, Grid& go) {
  go = {gi.n, gi.c, gi.d / win, gi.h / win, gi.w / win};
  std::vector<double> out(static_cast<std::size_t>(go.size()), 0.0);
  for (Index n = 0; n < go.n; ++n)
    for (Index c = 0; c < go.c; ++c)
      for (Index z = 0; z < go.d; ++z)
        for (Index y = 0; y < go.h; ++y)
          for (Index x = 0; x < go.w; ++x) {
            double acc = 0.0;
            for (Index a = 0; a < win; ++a)
              for (Index b = 0; b < win; ++b)
                for (Index e = 0; e < win; ++e) acc += in[gi.at(n, c, z * win + a, y * win + b, x * win + e)];
            out[go.at(n, c, z, y, x)] = acc / static_cast<double>(win * win * win);
          }
  return out;
}

inline std::vector<double> global_avg_pool(const std::vector<double>& in, const Grid& g) {
  std::vector<double> out(static_cast<std::size_t>(g.n * g.c), 0.0);
  for (Index n = 0; n < g.n; ++n)
    for (Index c = 0; c < g.c; ++c) {
      double acc = 0.0;
      for (Index z = 0; z < g.d; ++z)
        for (Index y = 0; y < g.h; ++y)
          for (Index x = 0; x < g.w; ++x) acc += in[g.at(n, c, z, y, x)];
      out[n * g.c + c] = acc / static_cast<double>(g.d * g.h * g.w);
    }
  return out;
}

/// out[b][o] = sum_i w[o][i] in[b][i] + bias[o]
inline std::vector<double> linear(const std::vector<double>& in, Index batch, Index n_in, const std::vector<double>& w,
                                  Index n_out, const std::vector<double>& bias) {
  std::vector<double> out(static_cast<std::size_t>(batch * n_out), 0.0);
  for (Index b = 0; b < batch; ++b)
    for (Index o = 0; o < n_out; ++o) {
      double acc = bias.empty() ? 0.0 : bias[o];
      for (Index i = 0; i < n_in; ++i) acc += w[o * n_in + i] * in[b * n_in + i];
      out[b * n_out + o] = acc;
    }
  return out;
}

/// Linear interpolation along one axis at continuous coordinate c, clamped.
inline void lerp_coord(double c, Index extent, Index& lo, Index& hi, double& t) {
  c = std::min(std::max(c, 0.0), static_cast<double>(extent - 1));
  lo = static_cast<Index>(std::floor(c));
  hi = std::min(lo + 1, extent - 1);
  t = c - static_cast<double>(lo);
}

inline double trilinear_sample(const std::vector<double>& img, const Grid& g, Index n, Index c, double z, double y,
                               double x) {
  Index z0, z1, y0, y1, x0, x1;
  double tz, ty, tx;
  lerp_coord(z, g.d, z0, z1, tz);
  lerp_coord(y, g.h, y0, y1, ty);
  lerp_coord(x, g.w, x0, x1, tx);
  auto v = [&](Index a, Index b, Index e) { return img[g.at(n, c, a, b, e)]; };
  const double c00 = v(z0, y0, x0) * (1 - tx) + v(z0, y0, x1) * tx;
  const double c01 = v(z0, y1, x0) * (1 - tx) + v(z0, y1, x1) * tx;
  const double c10 = v(z1, y0, x0) * (1 - tx) + v(z1, y0, x1) * tx;
  const double c11 = v(z1, y1, x0) * (1 - tx) + v(z1, y1, x1) * tx;
  const double c0 = c00 * (1 - ty) + c01 * ty;
  const double c1 = c10 * (1 - ty) + c11 * ty;
  return c0 * (1 - tz) + c1 * tz;
}

/// Align-corners=false upsampling: output i samples input (i + 0.5)/f - 0.5.
inline std::vector<double> upsample(const std::vector<double>& in, const Grid& gi, Index f, Grid& go) {
  go = {gi.n, gi.c, gi.d * f, gi.h * f, gi.w * f};
  std::vector<double> out(static_cast<std::size_t>(go.size()));
  auto src = [f](Index i) { return (static_cast<double>(i) + 0.5) / static_cast<double>(f) - 0.5; };
  for (Index n = 0; n < go.n; ++n)
    for (Index c = 0; c < go.c; ++c)
      for (Index z = 0; z < go.d; ++z)
        for (Index y = 0; y < go.h; ++y)
          for (Index x = 0; x < go.w; ++x) out[go.at(n, c, z, y, x)] = trilinear_sample(in, gi, n, c, src(z), src(y), src(x));
  return out;
}

/// out(p) = in(p + u(p)); field channels are (z, y, x) displacements.
inline std::vector<double> warp(const std::vector<double>& in, const Grid& g, const std::vector<double>& field) {
  std::vector<double> out(in.size());
  const Index sp = g.d * g.h * g.w;
  for (Index n = 0; n < g.n; ++n)
    for (Index z = 0; z < g.d; ++z)
      for (Index y = 0; y < g.h; ++y)
        for (Index x = 0; x < g.w; ++x) {
          const Index v = (z * g.h + y) * g.w + x;
          const double* u = field.data() + n * 3 * sp;
          for (Index c = 0; c < g.c; ++c)
            out[g.at(n, c, z, y, x)] = trilinear_sample(in, g, n, c, z + u[v], y + u[sp + v], x + u[2 * sp + v]);
        }
  return out;
}

/// Per-voxel windowed correlation; the window is clipped to the volume.
inline std::vector<double> local_ncc(const std::vector<double>& f, const std::vector<double>& m, Index d, Index h,
                                     Index w, Index patch, double eps) {
  const Index r = patch / 2;
  std::vector<double> out(f.size());
  for (Index z = 0; z < d; ++z)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        std::vector<std::pair<double, double>> vals;
        for (Index a = z - r; a <= z + r; ++a)
          for (Index b = y - r; b <= y + r; ++b)
            for (Index e = x - r; e <= x + r; ++e) {
              if (a < 0 || b < 0 || e < 0 || a >= d || b >= h || e >= w) continue;
              const Index i = (a * h + b) * w + e;
              vals.emplace_back(f[i], m[i]);
            }
        double mf = 0.0, mm = 0.0;
        for (auto [p, q] : vals) {
          mf += p;
          mm += q;
        }
        mf /= static_cast<double>(vals.size());
        mm /= static_cast<double>(vals.size());
        double cross = 0.0, vf = 0.0, vm = 0.0;
        for (auto [p, q] : vals) {
          cross += (p - mf) * (q - mm);
          vf += (p - mf) * (p - mf);
          vm += (q - mm) * (q - mm);
        }
        out[(z * h + y) * w + x] = cross / std::sqrt(vf * vm + eps);
      }
  return out;
}

// ---------------------------------------------------------------------------
// Label metrics

struct Labels {
  Index d, h, w;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<std::uint16_t> v;
  int at(Index z, Index y, Index x) const { return v[static_cast<std::size_t>((z * h + y) * w + x)]; }
};

inline double dice(const Labels& a, const Labels& b, int label) {
  double na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    if (a.v[i] == label) ++na;
    if (b.v[i] == label) ++nb;
    if (a.v[i] == label && b.v[i] == label) ++both;
  }
  return na + nb == 0 ? 1.0 : 2 * both / (na + nb);
}

inline std::vector<std::array<Index, 3>> surface(const Labels& a, int label) {
  std::vector<std::array<Index, 3>> out;
  const int dz[6] = {-1, 1, 0, 0, 0, 0}, dy[6] = {0, 0, -1, 1, 0, 0}, dx[6] = {0, 0, 0, 0, -1, 1};
  for (Index z = 0; z < a.d; ++z)
    for (Index y = 0; y < a.h; ++y)
      for (Index x = 0; x < a.w; ++x) {
        if (a.at(z, y, x) != label) continue;
        bool edge = false;
        for (int k = 0; k < 6; ++k) {
          const Index nz = z + dz[k], ny = y + dy[k], nx = x + dx[k];
          if (nz < 0 || ny < 0 || nx < 0 || nz >= a.d || ny >= a.h || nx >= a.w || a.at(nz, ny, nx) != label) edge = true;
        }
        if (edge) out.push_back({z, y, x});
      }
  return out;
}

/// All-pairs symmetric surface distances: returns (hd95, assd).
inline std::pair<double, double> surface_distances(const Labels& a, const Labels& b, int label) {
  const auto sa = surface(a, label), sb = surface(b, label);
  auto nearest = [&](const std::array<Index, 3>& p, const std::vector<std::array<Index, 3>>& set) {
    double best = INFINITY;
    for (const auto& q : set) {
      double s = 0.0;
      for (int i = 0; i < 3; ++i) {
        const double diff = static_cast<double>(p[i] - q[i]) * a.spacing[i];
        s += diff * diff;
      }
      best = std::min(best, s);
    }
    return std::sqrt(best);
  };
  std::vector<double> all;
  for (const auto& p : sa) all.push_back(nearest(p, sb));
  for (const auto& p : sb) all.push_back(nearest(p, sa));
  std::sort(all.begin(), all.end());
  double mean = 0.0;
  for (double x : all) mean += x;
  mean /= static_cast<double>(all.size());
  const double pos = 0.95 * static_cast<double>(all.size() - 1);
  const std::size_t i = static_cast<std::size_t>(pos);
  const double frac = pos - static_cast<double>(i);
  const double hd95 = i + 1 < all.size() ? all[i] * (1 - frac) + all[i + 1] * frac : all[i];
  return {hd95, mean};
}

// ---------------------------------------------------------------------------
// Iteration controller, replayed straight from the algorithm listing

enum class Mode { ConvOnly, StabOnly, ConvThenStab, StabThenConv };
enum class Outcome { StopStability, StopConvergence, Cap, Single };

struct Replay {
  int stop_index;  // 1-based iteration at which the layer ends
  Outcome outcome;
};

/// For k = 1, 2, ...: score s_k is computed; once t earlier scores exist,
/// eps = population std of s_{k-t}..s_{k-1} and ds = s_k - s_{k-1} are tested.
inline Replay replay_tci(const std::vector<double>& s, Mode mode, double ds_thr, double dc_thr, int t, int kmax,
                         bool enabled) {
  if (!enabled) return {1, Outcome::Single};
  for (int k = 1; k <= kmax; ++k) {
    if (k - 1 >= t) {
      double mean = 0.0;
      for (int i = k - t; i <= k - 1; ++i) mean += s[i - 1];
      mean /= t;
      double var = 0.0;
      for (int i = k - t; i <= k - 1; ++i) var += (s[i - 1] - mean) * (s[i - 1] - mean);
      const double eps = std::sqrt(var / t);
      const double delta = s[k - 1] - s[k - 2];
      const bool stable = eps <= ds_thr, converged = delta <= dc_thr;
      if (mode == Mode::ConvOnly && converged) return {k, Outcome::StopConvergence};
      if (mode == Mode::StabOnly && stable) return {k, Outcome::StopStability};
      if (mode == Mode::ConvThenStab && converged && stable) return {k, Outcome::StopStability};
      if (mode == Mode::StabThenConv && stable && converged) return {k, Outcome::StopConvergence};
    }
    if (k == kmax) return {k, Outcome::Cap};
  }
  return {kmax, Outcome::Cap};
}

}  // namespace oracle
