#pragma once

// Differentiable primitives over Tensor. Each op computes its forward value
// and, when the graph is being recorded, attaches the vector-Jacobian product
// that accumulates into its inputs.

#include <Eigen/Core>

#include <cassert>
#include <cmath>
#include <string>
#include <vector>

#include "tcip/tensor.hpp"

namespace tcip {

namespace detail {

template <class F, class DF>
Tensor unary_op(const Tensor& x, const char* name, F f, DF dfdx) {
  Tensor out = make_result(x.shape(), name, {&x});
  auto xs = x.data();
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = f(xs[i]);
  if (out.requires_grad()) {
    out.node()->backward_fn = [dfdx](Node& self) {
      Node& in = *self.parents[0];
      auto& g = in.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dfdx(in.value[i], self.value[i]);
    };
  }
  return out;
}

inline void accumulate(Node& parent, const std::vector<double>& g, double scale = 1.0) {
  auto& pg = parent.ensure_grad();
  for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += scale * g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = detail::make_result(a.shape(), "add", {&a, &b});
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = a.data()[i] + b.data()[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [](detail::Node& self) {
      if (detail::wants_grad(self, 0)) detail::accumulate(*self.parents[0], self.grad);
      if (detail::wants_grad(self, 1)) detail::accumulate(*self.parents[1], self.grad);
    };
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = detail::make_result(a.shape(), "sub", {&a, &b});
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = a.data()[i] - b.data()[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [](detail::Node& self) {
      if (detail::wants_grad(self, 0)) detail::accumulate(*self.parents[0], self.grad);
      if (detail::wants_grad(self, 1)) detail::accumulate(*self.parents[1], self.grad, -1.0);
    };
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = detail::make_result(a.shape(), "mul", {&a, &b});
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = a.data()[i] * b.data()[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [](detail::Node& self) {
      detail::Node& pa = *self.parents[0];
      detail::Node& pb = *self.parents[1];
      if (pa.requires_grad) {
        auto& g = pa.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
      }
      if (pb.requires_grad) {
        auto& g = pb.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
      }
    };
  }
  return out;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  Tensor out = detail::make_result(a.shape(), "div", {&a, &b});
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = a.data()[i] / b.data()[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [](detail::Node& self) {
      detail::Node& pa = *self.parents[0];
      detail::Node& pb = *self.parents[1];
      if (pa.requires_grad) {
        auto& g = pa.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pb.value[i];
      }
      if (pb.requires_grad) {
        auto& g = pb.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.value[i] / pb.value[i];
      }
    };
  }
  return out;
}

inline Tensor mul_scalar(const Tensor& x, double s) {
  return detail::unary_op(x, "mul_scalar", [s](double v) { return v * s; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary_op(x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary_op(x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor sqrt(const Tensor& x) {
  return detail::unary_op(
      x, "sqrt", [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

// ---------------------------------------------------------------------------
// Activations

inline Tensor leaky_relu(const Tensor& x, double slope = 0.2) {
  if (!(slope > 0.0 && slope < 1.0)) throw ConfigError("leaky_relu slope must lie in (0,1)");
  return detail::unary_op(
      x, "leaky_relu", [slope](double v) { return v >= 0.0 ? v : slope * v; },
      [slope](double v, double) { return v >= 0.0 ? 1.0 : slope; });
}

inline double sigmoid_value(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x, "sigmoid", [](double v) { return sigmoid_value(v); }, [](double, double y) { return y * (1.0 - y); });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  Tensor out = detail::make_result(Shape{}, "sum", {&x});
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  out.mutable_data()[0] = acc;
  if (out.requires_grad()) {
    out.node()->backward_fn = [](detail::Node& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (double& v : g) v += self.grad[0];
    };
  }
  return out;
}

inline Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Per-(batch, channel) spatial mean: (N,C,D,H,W) -> (N,C,1,1,1).
inline Tensor global_avg_pool(const Tensor& x) {
  const Shape& s = x.shape();
  Tensor out = detail::make_result(Shape{s.n(), s.c(), 1, 1, 1}, "global_avg_pool", {&x});
  const Index sp = s.spatial();
  auto xs = x.data();
  auto ys = out.mutable_data();
  for (Index nc = 0; nc < s.n() * s.c(); ++nc) {
    double acc = 0.0;
    for (Index i = 0; i < sp; ++i) acc += xs[nc * sp + i];
    ys[nc] = acc / static_cast<double>(sp);
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [sp](detail::Node& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t nc = 0; nc < self.grad.size(); ++nc) {
        const double gv = self.grad[nc] / static_cast<double>(sp);
        for (Index i = 0; i < sp; ++i) g[nc * sp + i] += gv;
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Channel plumbing

/// Concatenates along the channel axis.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.n() != sb.n() || sa.spatial() != sb.spatial() || sa.d() != sb.d() || sa.h() != sb.h())
    throw ShapeError("concat_channels: incompatible shapes " + sa.str() + " and " + sb.str());
  Shape so{sa.n(), sa.c() + sb.c(), sa.d(), sa.h(), sa.w()};
  Tensor out = detail::make_result(so, "concat_channels", {&a, &b});
  const Index chunk_a = sa.c() * sa.spatial();
  const Index chunk_b = sb.c() * sb.spatial();
  auto ys = out.mutable_data();
  for (Index n = 0; n < sa.n(); ++n) {
    std::copy_n(a.data().begin() + n * chunk_a, chunk_a, ys.begin() + n * (chunk_a + chunk_b));
    std::copy_n(b.data().begin() + n * chunk_b, chunk_b, ys.begin() + n * (chunk_a + chunk_b) + chunk_a);
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [chunk_a, chunk_b, batches = sa.n()](detail::Node& self) {
      for (std::size_t p = 0; p < 2; ++p) {
        if (!detail::wants_grad(self, p)) continue;
        auto& g = self.parents[p]->ensure_grad();
        const Index chunk = p == 0 ? chunk_a : chunk_b;
        const Index shift = p == 0 ? 0 : chunk_a;
        for (Index n = 0; n < batches; ++n)
          for (Index i = 0; i < chunk; ++i) g[n * chunk + i] += self.grad[n * (chunk_a + chunk_b) + shift + i];
      }
    };
  }
  return out;
}

/// Multiplies every channel of x by the matching entry of s (shape (N,C,1,1,1)).
inline Tensor scale_channels(const Tensor& x, const Tensor& s) {
  const Shape& sx = x.shape();
  if (s.shape() != Shape{sx.n(), sx.c(), 1, 1, 1})
    throw ShapeError("scale_channels: weights " + s.shape().str() + " do not match " + sx.str());
  Tensor out = detail::make_result(sx, "scale_channels", {&x, &s});
  const Index sp = sx.spatial();
  auto ys = out.mutable_data();
  for (Index nc = 0; nc < sx.n() * sx.c(); ++nc)
    for (Index i = 0; i < sp; ++i) ys[nc * sp + i] = x.data()[nc * sp + i] * s.data()[nc];
  if (out.requires_grad()) {
    out.node()->backward_fn = [sp](detail::Node& self) {
      detail::Node& px = *self.parents[0];
      detail::Node& ps = *self.parents[1];
      const std::size_t channels = ps.value.size();
      if (px.requires_grad) {
        auto& g = px.ensure_grad();
        for (std::size_t nc = 0; nc < channels; ++nc)
          for (Index i = 0; i < sp; ++i) g[nc * sp + i] += self.grad[nc * sp + i] * ps.value[nc];
      }
      if (ps.requires_grad) {
        auto& g = ps.ensure_grad();
        for (std::size_t nc = 0; nc < channels; ++nc) {
          double acc = 0.0;
          for (Index i = 0; i < sp; ++i) acc += self.grad[nc * sp + i] * px.value[nc * sp + i];
          g[nc] += acc;
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fully connected layer on channel vectors

/// input (B,In,1,1,1), weight (Out,In,1,1,1), bias with Out entries (or undefined).
inline Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias = {}) {
  const Shape& si = input.shape();
  const Shape& sw = weight.shape();
  if (si.spatial() != 1 || sw.spatial() != 1 || sw.c() != si.c())
    throw ShapeError("linear: weight " + sw.str() + " incompatible with input " + si.str());
  if (bias.defined() && bias.numel() != sw.n())
    throw ShapeError("linear: bias " + bias.shape().str() + " does not have " + std::to_string(sw.n()) + " entries");
  const Index batch = si.n(), in_dim = si.c(), out_dim = sw.n();
  Tensor out = detail::make_result(Shape{batch, out_dim, 1, 1, 1}, "linear", {&input, &weight, &bias});
  auto ys = out.mutable_data();
  for (Index b = 0; b < batch; ++b)
    for (Index o = 0; o < out_dim; ++o) {
      double acc = bias.defined() ? bias.data()[o] : 0.0;
      for (Index i = 0; i < in_dim; ++i) acc += weight.data()[o * in_dim + i] * input.data()[b * in_dim + i];
      ys[b * out_dim + o] = acc;
    }
  if (out.requires_grad()) {
    out.node()->backward_fn = [batch, in_dim, out_dim](detail::Node& self) {
      detail::Node& px = *self.parents[0];
      detail::Node& pw = *self.parents[1];
      if (px.requires_grad) {
        auto& g = px.ensure_grad();
        for (Index b = 0; b < batch; ++b)
          for (Index o = 0; o < out_dim; ++o)
            for (Index i = 0; i < in_dim; ++i) g[b * in_dim + i] += self.grad[b * out_dim + o] * pw.value[o * in_dim + i];
      }
      if (pw.requires_grad) {
        auto& g = pw.ensure_grad();
        for (Index b = 0; b < batch; ++b)
          for (Index o = 0; o < out_dim; ++o)
            for (Index i = 0; i < in_dim; ++i) g[o * in_dim + i] += self.grad[b * out_dim + o] * px.value[b * in_dim + i];
      }
      if (detail::wants_grad(self, 2)) {
        auto& g = self.parents[2]->ensure_grad();
        for (Index b = 0; b < batch; ++b)
          for (Index o = 0; o < out_dim; ++o) g[o] += self.grad[b * out_dim + o];
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// 3D convolution (cross-correlation, as in every deep-learning framework)

namespace detail {

struct ConvGeometry {
  Index in_c, in_d, in_h, in_w;
  Index k_d, k_h, k_w;
  Index out_d, out_h, out_w;
  Index stride, pad;

  Index rows() const { return in_c * k_d * k_h * k_w; }
  Index cols() const { return out_d * out_h * out_w; }
};

inline void im2col(const double* in, const ConvGeometry& g, double* col) {
  const Index plane = g.cols();
  Index r = 0;
  for (Index c = 0; c < g.in_c; ++c)
    for (Index kz = 0; kz < g.k_d; ++kz)
      for (Index ky = 0; ky < g.k_h; ++ky)
        for (Index kx = 0; kx < g.k_w; ++kx, ++r) {
          double* dst = col + r * plane;
          for (Index oz = 0; oz < g.out_d; ++oz) {
            const Index iz = oz * g.stride + kz - g.pad;
            for (Index oy = 0; oy < g.out_h; ++oy) {
              const Index iy = oy * g.stride + ky - g.pad;
              double* row = dst + (oz * g.out_h + oy) * g.out_w;
              if (iz < 0 || iz >= g.in_d || iy < 0 || iy >= g.in_h) {
                std::fill_n(row, g.out_w, 0.0);
                continue;
              }
              const double* src = in + ((c * g.in_d + iz) * g.in_h + iy) * g.in_w;
              for (Index ox = 0; ox < g.out_w; ++ox) {
                const Index ix = ox * g.stride + kx - g.pad;
                row[ox] = (ix >= 0 && ix < g.in_w) ? src[ix] : 0.0;
              }
            }
          }
        }
}

inline void col2im_add(const double* col, const ConvGeometry& g, double* in_grad) {
  const Index plane = g.cols();
  Index r = 0;
  for (Index c = 0; c < g.in_c; ++c)
    for (Index kz = 0; kz < g.k_d; ++kz)
      for (Index ky = 0; ky < g.k_h; ++ky)
        for (Index kx = 0; kx < g.k_w; ++kx, ++r) {
          const double* srcp = col + r * plane;
          for (Index oz = 0; oz < g.out_d; ++oz) {
            const Index iz = oz * g.stride + kz - g.pad;
            if (iz < 0 || iz >= g.in_d) continue;
            for (Index oy = 0; oy < g.out_h; ++oy) {
              const Index iy = oy * g.stride + ky - g.pad;
              if (iy < 0 || iy >= g.in_h) continue;
              const double* row = srcp + (oz * g.out_h + oy) * g.out_w;
              double* dst = in_grad + ((c * g.in_d + iz) * g.in_h + iy) * g.in_w;
              for (Index ox = 0; ox < g.out_w; ++ox) {
                const Index ix = ox * g.stride + kx - g.pad;
                if (ix >= 0 && ix < g.in_w) dst[ix] += row[ox];
              }
            }
          }
        }
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace detail

/// input (N,Cin,D,H,W), kernel (Cout,Cin,kd,kh,kw), bias with Cout entries (or undefined).
inline Tensor conv3d(const Tensor& input, const Tensor& kernel, const Tensor& bias = {}, Index stride = 1,
                     Index padding = 1) {
  const Shape& si = input.shape();
  const Shape& sk = kernel.shape();
  if (sk.c() != si.c())
    throw ShapeError("conv3d: kernel " + sk.str() + " expects " + std::to_string(sk.c()) + " input channels, input is " +
                     si.str());
  if (stride < 1 || padding < 0) throw ConfigError("conv3d: stride must be >= 1 and padding >= 0");
  if (bias.defined() && bias.numel() != sk.n())
    throw ShapeError("conv3d: bias " + bias.shape().str() + " does not have " + std::to_string(sk.n()) + " entries");
  auto out_extent = [&](Index in, Index k) { return (in + 2 * padding - k) / stride + 1; };
  detail::ConvGeometry g{si.c(), si.d(), si.h(), si.w(), sk.d(), sk.h(), sk.w(),
                         out_extent(si.d(), sk.d()), out_extent(si.h(), sk.h()), out_extent(si.w(), sk.w()),
                         stride, padding};
  if (si.d() + 2 * padding < sk.d() || si.h() + 2 * padding < sk.h() || si.w() + 2 * padding < sk.w())
    throw ShapeError("conv3d: kernel " + sk.str() + " larger than padded input " + si.str());

  const Index cout = sk.n();
  Shape so{si.n(), cout, g.out_d, g.out_h, g.out_w};
  Tensor out = detail::make_result(so, "conv3d", {&input, &kernel, &bias});

  const Index rows = g.rows(), cols = g.cols();
  const Index in_chunk = si.c() * si.spatial();
  std::vector<double> col(static_cast<std::size_t>(rows * cols));
  Eigen::Map<const detail::RowMatrix> wmat(kernel.data().data(), cout, rows);
  for (Index n = 0; n < si.n(); ++n) {
    detail::im2col(input.data().data() + n * in_chunk, g, col.data());
    Eigen::Map<const detail::RowMatrix> cmat(col.data(), rows, cols);
    Eigen::Map<detail::RowMatrix> omat(out.mutable_data().data() + n * cout * cols, cout, cols);
    omat.noalias() = wmat * cmat;
    if (bias.defined())
      for (Index o = 0; o < cout; ++o) omat.row(o).array() += bias.data()[o];
  }

  if (out.requires_grad()) {
    out.node()->backward_fn = [g, cout, in_chunk, batches = si.n()](detail::Node& self) {
      detail::Node& px = *self.parents[0];
      detail::Node& pk = *self.parents[1];
      const Index rows = g.rows(), cols = g.cols();
      std::vector<double> col(static_cast<std::size_t>(rows * cols));
      Eigen::Map<const detail::RowMatrix> wmat(pk.value.data(), cout, rows);
      for (Index n = 0; n < batches; ++n) {
        Eigen::Map<const detail::RowMatrix> gmat(self.grad.data() + n * cout * cols, cout, cols);
        if (pk.requires_grad) {
          detail::im2col(px.value.data() + n * in_chunk, g, col.data());
          Eigen::Map<const detail::RowMatrix> cmat(col.data(), rows, cols);
          Eigen::Map<detail::RowMatrix> gw(pk.ensure_grad().data(), cout, rows);
          gw.noalias() += gmat * cmat.transpose();
        }
        if (px.requires_grad) {
          Eigen::Map<detail::RowMatrix> cmat(col.data(), rows, cols);
          cmat.noalias() = wmat.transpose() * gmat;
          detail::col2im_add(col.data(), g, px.ensure_grad().data() + n * in_chunk);
        }
        if (detail::wants_grad(self, 2)) {
          auto& gb = self.parents[2]->ensure_grad();
          // Plain loop: Eigen's vectorised sum depends on buffer alignment, which
          // would make results vary between runs.
          for (Index o = 0; o < cout; ++o) {
            const double* row = self.grad.data() + (n * cout + o) * cols;
            double acc = 0.0;
            for (Index i = 0; i < cols; ++i) acc += row[i];
            gb[o] += acc;
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling and resampling

inline Tensor avg_pool3d(const Tensor& x, Index window = 2) {
  const Shape& s = x.shape();
  if (window < 1) throw ConfigError("avg_pool3d: window must be >= 1");
  if (s.d() % window || s.h() % window || s.w() % window)
    throw ShapeError("avg_pool3d: spatial dims of " + s.str() + " not divisible by window " + std::to_string(window));
  Shape so{s.n(), s.c(), s.d() / window, s.h() / window, s.w() / window};
  Tensor out = detail::make_result(so, "avg_pool3d", {&x});
  const double inv = 1.0 / static_cast<double>(window * window * window);
  auto ys = out.mutable_data();
  auto xs = x.data();
  for (Index nc = 0; nc < s.n() * s.c(); ++nc)
    for (Index z = 0; z < so.d(); ++z)
      for (Index y = 0; y < so.h(); ++y)
        for (Index xo = 0; xo < so.w(); ++xo) {
          double acc = 0.0;
          for (Index a = 0; a < window; ++a)
            for (Index b = 0; b < window; ++b)
              for (Index c = 0; c < window; ++c)
                acc += xs[((nc * s.d() + z * window + a) * s.h() + y * window + b) * s.w() + xo * window + c];
          ys[((nc * so.d() + z) * so.h() + y) * so.w() + xo] = acc * inv;
        }
  if (out.requires_grad()) {
    out.node()->backward_fn = [s, so, window, inv](detail::Node& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (Index nc = 0; nc < s.n() * s.c(); ++nc)
        for (Index z = 0; z < so.d(); ++z)
          for (Index y = 0; y < so.h(); ++y)
            for (Index xo = 0; xo < so.w(); ++xo) {
              const double gv = self.grad[((nc * so.d() + z) * so.h() + y) * so.w() + xo] * inv;
              for (Index a = 0; a < window; ++a)
                for (Index b = 0; b < window; ++b)
                  for (Index c = 0; c < window; ++c)
                    g[((nc * s.d() + z * window + a) * s.h() + y * window + b) * s.w() + xo * window + c] += gv;
            }
    };
  }
  return out;
}

namespace detail {

struct LerpTap {
  Index lo, hi;
  double t;
};

// align-corners=false: output centre o maps to (o + 0.5) / factor - 0.5, clamped.
inline std::vector<LerpTap> upsample_taps(Index in, Index factor) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(in * factor));
  for (Index o = 0; o < in * factor; ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const Index lo = static_cast<Index>(std::floor(src));
    const Index hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

inline Tensor upsample_trilinear(const Tensor& x, Index factor) {
  if (factor < 1) throw ConfigError("upsample_trilinear: factor must be >= 1");
  const Shape& s = x.shape();
  Shape so{s.n(), s.c(), s.d() * factor, s.h() * factor, s.w() * factor};
  Tensor out = detail::make_result(so, "upsample_trilinear", {&x});
  auto tz = detail::upsample_taps(s.d(), factor);
  auto ty = detail::upsample_taps(s.h(), factor);
  auto tx = detail::upsample_taps(s.w(), factor);

  auto visit = [tz, ty, tx, s, so](auto&& fn) {
    for (Index nc = 0; nc < s.n() * s.c(); ++nc)
      for (Index z = 0; z < so.d(); ++z)
        for (Index y = 0; y < so.h(); ++y)
          for (Index xo = 0; xo < so.w(); ++xo) {
            const auto& a = tz[z];
            const auto& b = ty[y];
            const auto& c = tx[xo];
            const Index base = nc * s.spatial();
            const Index o = ((nc * so.d() + z) * so.h() + y) * so.w() + xo;
            const Index zs[2] = {a.lo, a.hi}, ys[2] = {b.lo, b.hi}, xs[2] = {c.lo, c.hi};
            const double wz[2] = {1.0 - a.t, a.t}, wy[2] = {1.0 - b.t, b.t}, wx[2] = {1.0 - c.t, c.t};
            for (int i = 0; i < 2; ++i)
              for (int j = 0; j < 2; ++j)
                for (int k = 0; k < 2; ++k)
                  fn(o, base + (zs[i] * s.h() + ys[j]) * s.w() + xs[k], wz[i] * wy[j] * wx[k]);
          }
  };

  auto ys = out.mutable_data();
  auto xs = x.data();
  visit([&](Index o, Index i, double w) { ys[o] += w * xs[i]; });
  if (out.requires_grad()) {
    out.node()->backward_fn = [visit](detail::Node& self) {
      auto& g = self.parents[0]->ensure_grad();
      visit([&](Index o, Index i, double w) { g[i] += w * self.grad[o]; });
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Windowed sums and finite differences

namespace detail {

// Sum over the odd n^3 window centred at every voxel; samples outside the
// volume contribute zero. Self-adjoint, so backward reuses it.
inline void box_sum_raw(const double* in, const Shape& s, Index radius, double* out) {
  const Index D = s.d(), H = s.h(), W = s.w();
  std::vector<double> a(static_cast<std::size_t>(s.spatial())), b(a.size());
  std::vector<double> prefix;
  auto pass = [&](const double* src, double* dst, Index len, Index stride, Index lines_outer, Index outer_stride,
                  Index lines_inner, Index inner_stride) {
    prefix.resize(static_cast<std::size_t>(len + 1));
    for (Index p = 0; p < lines_outer; ++p)
      for (Index q = 0; q < lines_inner; ++q) {
        const Index base = p * outer_stride + q * inner_stride;
        prefix[0] = 0.0;
        for (Index i = 0; i < len; ++i) prefix[i + 1] = prefix[i] + src[base + i * stride];
        for (Index i = 0; i < len; ++i) {
          const Index lo = std::max<Index>(0, i - radius);
          const Index hi = std::min<Index>(len, i + radius + 1);
          dst[base + i * stride] = prefix[hi] - prefix[lo];
        }
      }
  };
  for (Index nc = 0; nc < s.n() * s.c(); ++nc) {
    const double* src = in + nc * s.spatial();
    double* dst = out + nc * s.spatial();
    pass(src, a.data(), W, 1, D, H * W, H, W);
    pass(a.data(), b.data(), H, W, D, H * W, W, 1);
    pass(b.data(), dst, D, H * W, H, W, W, 1);
  }
}

}  // namespace detail

/// Sum over the n^3 neighbourhood of each voxel (n odd), zero outside the volume.
inline Tensor box_sum(const Tensor& x, Index n) {
  if (n < 1 || n % 2 == 0) throw ConfigError("box_sum: window edge must be odd and >= 1");
  Tensor out = detail::make_result(x.shape(), "box_sum", {&x});
  const Index radius = n / 2;
  detail::box_sum_raw(x.data().data(), x.shape(), radius, out.mutable_data().data());
  if (out.requires_grad()) {
    out.node()->backward_fn = [radius](detail::Node& self) {
      std::vector<double> tmp(self.grad.size());
      detail::box_sum_raw(self.grad.data(), self.shape, radius, tmp.data());
      detail::accumulate(*self.parents[0], tmp);
    };
  }
  return out;
}

/// Forward difference x[i+1] - x[i] along a spatial axis (2 = depth, 3 = height, 4 = width).
inline Tensor forward_diff(const Tensor& x, int axis) {
  if (axis < 2 || axis > 4) throw ConfigError("forward_diff: axis must be 2, 3 or 4");
  const Shape& s = x.shape();
  if (s.dims[axis] < 2) throw ShapeError("forward_diff: axis extent < 2 in " + s.str());
  Shape so = s;
  so.dims[axis] -= 1;
  const Index step = axis == 2 ? s.h() * s.w() : axis == 3 ? s.w() : 1;
  Tensor out = detail::make_result(so, "forward_diff", {&x});
  auto visit = [s, so](auto&& fn) {
    for (Index nc = 0; nc < so.n() * so.c(); ++nc)
      for (Index z = 0; z < so.d(); ++z)
        for (Index y = 0; y < so.h(); ++y)
          for (Index xo = 0; xo < so.w(); ++xo)
            fn(((nc * so.d() + z) * so.h() + y) * so.w() + xo, ((nc * s.d() + z) * s.h() + y) * s.w() + xo);
  };
  auto ys = out.mutable_data();
  auto xs = x.data();
  visit([&](Index o, Index i) { ys[o] = xs[i + step] - xs[i]; });
  if (out.requires_grad()) {
    out.node()->backward_fn = [visit, step](detail::Node& self) {
      auto& g = self.parents[0]->ensure_grad();
      visit([&](Index o, Index i) {
        g[i + step] += self.grad[o];
        g[i] -= self.grad[o];
      });
    };
  }
  return out;
}

}  // namespace tcip
