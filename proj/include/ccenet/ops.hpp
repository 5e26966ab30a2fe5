#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Core>

#include "ccenet/tensor.hpp"

// Differentiable operations. Every function here computes its forward value
// eagerly and, when a tape is active and some input requires grad, records
// a backward closure on that tape.

namespace ccenet {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline ConstMapMat cmat(const double* p, std::size_t rows, std::size_t cols) {
  return ConstMapMat(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MapMat mmat(double* p, std::size_t rows, std::size_t cols) {
  return MapMat(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline bool is_channel_vector(const Shape& b, const Shape& a) {
  return b.n == 1 && b.c == a.c && b.h == 1 && b.w == 1;
}

inline void check_binary(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape() || is_channel_vector(b.shape(), a.shape())) return;
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape().str() + " and " +
                   b.shape().str());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_binary("add", a, b);
  Tensor out(a.shape());
  auto o = out.mutable_data();
  const auto x = a.data();
  const auto y = b.data();
  const bool bcast = a.shape() != b.shape();
  const std::size_t plane = a.shape().plane();
  const std::size_t channels = a.shape().c;
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = x[i] + (bcast ? y[(i / plane) % channels] : y[i]);
  }
  if (Tape* tape = detail::recording_tape({&a, &b})) {
    tape->record("add", out, {&a, &b}, [a, b, out, bcast, plane, channels]() mutable {
      const auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[bcast ? (i / plane) % channels : i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_binary("mul", a, b);
  Tensor out(a.shape());
  auto o = out.mutable_data();
  const auto x = a.data();
  const auto y = b.data();
  const bool bcast = a.shape() != b.shape();
  const std::size_t plane = a.shape().plane();
  const std::size_t channels = a.shape().c;
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = x[i] * (bcast ? y[(i / plane) % channels] : y[i]);
  }
  if (Tape* tape = detail::recording_tape({&a, &b})) {
    tape->record("mul", out, {&a, &b}, [a, b, out, bcast, plane, channels]() mutable {
      const auto g = out.grad();
      const auto x = a.data();
      const auto y = b.data();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i] * (bcast ? y[(i / plane) % channels] : y[i]);
        }
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          gb[bcast ? (i / plane) % channels : i] += g[i] * x[i];
        }
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor out(a.shape());
  auto o = out.mutable_data();
  const auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = s * x[i];
  if (Tape* tape = detail::recording_tape({&a})) {
    tape->record("scale", out, {&a}, [a, out, s]() mutable {
      const auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    });
  }
  return out;
}

/// Logistic function. Outputs are kept strictly inside (0,1).
inline Tensor sigmoid(const Tensor& a) {
  constexpr double kMaxExp = 709.0;
  static const double kHi = std::nextafter(1.0, 0.0);
  static const double kLo = std::numeric_limits<double>::min();
  Tensor out(a.shape());
  auto o = out.mutable_data();
  const auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double v = std::clamp(x[i], -kMaxExp, kMaxExp);
    double y;
    if (v >= 0.0) {
      y = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      y = e / (1.0 + e);
    }
    o[i] = std::clamp(y, kLo, kHi);
  }
  if (Tape* tape = detail::recording_tape({&a})) {
    tape->record("sigmoid", out, {&a}, [a, out]() mutable {
      const auto g = out.grad();
      const auto y = out.data();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
    });
  }
  return out;
}

inline Tensor relu(const Tensor& a) {
  Tensor out(a.shape());
  auto o = out.mutable_data();
  const auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (Tape* tape = detail::recording_tape({&a})) {
    tape->record("relu", out, {&a}, [a, out]() mutable {
      const auto g = out.grad();
      const auto x = a.data();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] > 0.0) ga[i] += g[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (Tape* tape = detail::recording_tape({&a})) {
    tape->record("sum", out, {&a}, [a, out]() mutable {
      const double g = out.grad()[0];
      for (double& v : a.mutable_grad()) v += g;
    });
  }
  return out;
}

inline Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

/// Per-channel spatial mean, (n,c,h,w) -> (n,c,1,1).
inline Tensor global_avg_pool(const Tensor& a) {
  const Shape s = a.shape();
  if (s.h == 0 || s.w == 0) throw ShapeError("global_avg_pool on empty plane " + s.str());
  const std::size_t plane = s.plane();
  const double inv = 1.0 / static_cast<double>(plane);
  Tensor out(Shape{s.n, s.c, 1, 1});
  auto o = out.mutable_data();
  const auto x = a.data();
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += x[nc * plane + i];
    o[nc] = acc * inv;
  }
  if (Tape* tape = detail::recording_tape({&a})) {
    tape->record("global_avg_pool", out, {&a}, [a, out, plane, inv]() mutable {
      const auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t nc = 0; nc < g.size(); ++nc) {
        for (std::size_t i = 0; i < plane; ++i) ga[nc * plane + i] += g[nc] * inv;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Channel plumbing

inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no parts");
  const Shape first = parts.front().shape();
  std::size_t channels = 0;
  for (const Tensor& p : parts) {
    const Shape s = p.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ShapeError("concat_channels: " + s.str() + " does not match " + first.str());
    }
    channels += s.c;
  }
  const Shape os{first.n, channels, first.h, first.w};
  Tensor out(os);
  auto o = out.mutable_data();
  const std::size_t plane = first.plane();
  std::size_t c0 = 0;
  for (const Tensor& p : parts) {
    const auto x = p.data();
    const std::size_t pc = p.shape().c;
    for (std::size_t n = 0; n < os.n; ++n) {
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(n * pc * plane), pc * plane,
                  o.begin() + static_cast<std::ptrdiff_t>((n * channels + c0) * plane));
    }
    c0 += pc;
  }
  std::vector<const Tensor*> inputs;
  for (const Tensor& p : parts) inputs.push_back(&p);
  if (Tape* tape = detail::recording_tape_of(inputs)) {
    tape->record("concat_channels", out, inputs, [parts, out, plane, channels]() mutable {
      const auto g = out.grad();
      const std::size_t batch = out.shape().n;
      std::size_t c0 = 0;
      for (const Tensor& p : parts) {
        const std::size_t pc = p.shape().c;
        if (p.requires_grad()) {
          auto gp = p.mutable_grad();
          for (std::size_t n = 0; n < batch; ++n) {
            for (std::size_t i = 0; i < pc * plane; ++i) {
              gp[n * pc * plane + i] += g[(n * channels + c0) * plane + i];
            }
          }
        }
        c0 += pc;
      }
    });
  }
  return out;
}

/// Channels [begin, end) of a.
inline Tensor slice_channels(const Tensor& a, std::size_t begin, std::size_t end) {
  const Shape s = a.shape();
  if (begin > end || end > s.c) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") outside " + s.str());
  }
  const std::size_t pc = end - begin;
  const std::size_t plane = s.plane();
  Tensor out(Shape{s.n, pc, s.h, s.w});
  auto o = out.mutable_data();
  const auto x = a.data();
  for (std::size_t n = 0; n < s.n; ++n) {
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((n * s.c + begin) * plane), pc * plane,
                o.begin() + static_cast<std::ptrdiff_t>(n * pc * plane));
  }
  if (Tape* tape = detail::recording_tape({&a})) {
    tape->record("slice_channels", out, {&a}, [a, out, begin, pc, plane]() mutable {
      const auto g = out.grad();
      auto ga = a.mutable_grad();
      const Shape s = a.shape();
      for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t i = 0; i < pc * plane; ++i) {
          ga[(n * s.c + begin) * plane + i] += g[n * pc * plane + i];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t padding = 0;
};

inline std::size_t conv_output_extent(std::size_t in, std::size_t k, const ConvGeometry& g) {
  const long long span = static_cast<long long>(g.dilation) * (static_cast<long long>(k) - 1) + 1;
  const long long num = static_cast<long long>(in) + 2 * static_cast<long long>(g.padding) - span;
  if (num < 0 || g.stride == 0) return 0;
  return static_cast<std::size_t>(num) / g.stride + 1;
}

namespace detail {

inline void im2col(const double* x, std::size_t ci, std::size_t h, std::size_t w, std::size_t k,
                   const ConvGeometry& g, std::size_t oh, std::size_t ow, double* col) {
  const long long pad = static_cast<long long>(g.padding);
  for (std::size_t c = 0; c < ci; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        double* row = col + ((c * k + ki) * k + kj) * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          const long long iy = static_cast<long long>(y * g.stride + ki * g.dilation) - pad;
          for (std::size_t xo = 0; xo < ow; ++xo) {
            const long long ix = static_cast<long long>(xo * g.stride + kj * g.dilation) - pad;
            const bool inside = iy >= 0 && iy < static_cast<long long>(h) && ix >= 0 &&
                                ix < static_cast<long long>(w);
            row[y * ow + xo] = inside ? x[(c * h + static_cast<std::size_t>(iy)) * w +
                                         static_cast<std::size_t>(ix)]
                                      : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im(const double* col, std::size_t ci, std::size_t h, std::size_t w, std::size_t k,
                   const ConvGeometry& g, std::size_t oh, std::size_t ow, double* dx) {
  const long long pad = static_cast<long long>(g.padding);
  for (std::size_t c = 0; c < ci; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const double* row = col + ((c * k + ki) * k + kj) * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          const long long iy = static_cast<long long>(y * g.stride + ki * g.dilation) - pad;
          if (iy < 0 || iy >= static_cast<long long>(h)) continue;
          for (std::size_t xo = 0; xo < ow; ++xo) {
            const long long ix = static_cast<long long>(xo * g.stride + kj * g.dilation) - pad;
            if (ix < 0 || ix >= static_cast<long long>(w)) continue;
            dx[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] +=
                row[y * ow + xo];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding.
///
/// weight is (c_out, c_in, k, k); bias is (1, c_out, 1, 1) or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                     const ConvGeometry& geom) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.c != xs.c || ws.h != ws.w) {
    throw ShapeError("conv2d: weight " + ws.str() + " incompatible with input " + xs.str());
  }
  if (bias.defined() && bias.shape() != Shape{1, ws.n, 1, 1}) {
    throw ShapeError("conv2d: bias " + bias.shape().str() + " for " + std::to_string(ws.n) +
                     " output channels");
  }
  const std::size_t k = ws.h;
  const std::size_t oh = conv_output_extent(xs.h, k, geom);
  const std::size_t ow = conv_output_extent(xs.w, k, geom);
  if (oh == 0 || ow == 0) {
    throw ConfigError("conv2d: non-positive output size for input " + xs.str() + ", kernel " +
                      std::to_string(k) + ", stride " + std::to_string(geom.stride) +
                      ", dilation " + std::to_string(geom.dilation) + ", padding " +
                      std::to_string(geom.padding));
  }
  const std::size_t co = ws.n;
  const std::size_t rows = xs.c * k * k;
  const std::size_t cols = oh * ow;
  Tensor out(Shape{xs.n, co, oh, ow});
  std::vector<double> col(rows * cols);
  const auto wmat = detail::cmat(weight.data().data(), co, rows);
  for (std::size_t n = 0; n < xs.n; ++n) {
    detail::im2col(x.data().data() + n * xs.c * xs.plane(), xs.c, xs.h, xs.w, k, geom, oh, ow,
                   col.data());
    auto o = detail::mmat(out.mutable_data().data() + n * co * cols, co, cols);
    o.noalias() = wmat * detail::cmat(col.data(), rows, cols);
    if (bias.defined()) {
      for (std::size_t c = 0; c < co; ++c) o.row(static_cast<Eigen::Index>(c)).array() += bias[c];
    }
  }
  if (Tape* tape = detail::recording_tape({&x, &weight, &bias})) {
    tape->record("conv2d", out, {&x, &weight, &bias},
                 [x, weight, bias, out, geom, k, oh, ow, rows, cols, co]() mutable {
                   const Shape xs = x.shape();
                   const auto g = out.grad();
                   std::vector<double> col(rows * cols);
                   std::vector<double> dcol(rows * cols);
                   const auto wmat = detail::cmat(weight.data().data(), co, rows);
                   for (std::size_t n = 0; n < xs.n; ++n) {
                     const auto gout = detail::cmat(g.data() + n * co * cols, co, cols);
                     if (weight.requires_grad()) {
                       detail::im2col(x.data().data() + n * xs.c * xs.plane(), xs.c, xs.h, xs.w,
                                      k, geom, oh, ow, col.data());
                       auto gw = detail::mmat(weight.mutable_grad().data(), co, rows);
                       gw.noalias() += gout * detail::cmat(col.data(), rows, cols).transpose();
                     }
                     if (bias.defined() && bias.requires_grad()) {
                       auto gb = bias.mutable_grad();
                       for (std::size_t c = 0; c < co; ++c) {
                         gb[c] += gout.row(static_cast<Eigen::Index>(c)).sum();
                       }
                     }
                     if (x.requires_grad()) {
                       detail::mmat(dcol.data(), rows, cols).noalias() = wmat.transpose() * gout;
                       detail::col2im(dcol.data(), xs.c, xs.h, xs.w, k, geom, oh, ow,
                                      x.mutable_grad().data() + n * xs.c * xs.plane());
                     }
                   }
                 });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Resampling

namespace detail {

struct AxisTaps {
  std::vector<std::size_t> lo;
  std::vector<std::size_t> hi;
  std::vector<double> frac;
};

/// Half-pixel-centre source taps along one axis, clamped to the valid range.
inline AxisTaps bilinear_taps(std::size_t in, std::size_t out) {
  AxisTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in - 1);
    t.frac[i] = src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace detail

inline Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  const Shape s = x.shape();
  if (out_h == 0 || out_w == 0) throw ConfigError("bilinear_resize: zero output size");
  if (s.h == 0 || s.w == 0) throw ShapeError("bilinear_resize: empty input " + s.str());
  Tensor out(Shape{s.n, s.c, out_h, out_w});
  if (out_h == s.h && out_w == s.w) {
    std::copy(x.data().begin(), x.data().end(), out.mutable_data().begin());
  } else {
    const auto ty = detail::bilinear_taps(s.h, out_h);
    const auto tx = detail::bilinear_taps(s.w, out_w);
    const auto src = x.data();
    auto dst = out.mutable_data();
    for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
      const double* p = src.data() + nc * s.plane();
      double* q = dst.data() + nc * out_h * out_w;
      for (std::size_t i = 0; i < out_h; ++i) {
        const double fy = ty.frac[i];
        const double* r0 = p + ty.lo[i] * s.w;
        const double* r1 = p + ty.hi[i] * s.w;
        for (std::size_t j = 0; j < out_w; ++j) {
          const double fx = tx.frac[j];
          const double top = (1.0 - fx) * r0[tx.lo[j]] + fx * r0[tx.hi[j]];
          const double bot = (1.0 - fx) * r1[tx.lo[j]] + fx * r1[tx.hi[j]];
          q[i * out_w + j] = (1.0 - fy) * top + fy * bot;
        }
      }
    }
  }
  if (Tape* tape = detail::recording_tape({&x})) {
    tape->record("bilinear_resize", out, {&x}, [x, out, out_h, out_w]() mutable {
      const Shape s = x.shape();
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      if (out_h == s.h && out_w == s.w) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        return;
      }
      const auto ty = detail::bilinear_taps(s.h, out_h);
      const auto tx = detail::bilinear_taps(s.w, out_w);
      for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
        double* p = gx.data() + nc * s.plane();
        const double* q = g.data() + nc * out_h * out_w;
        for (std::size_t i = 0; i < out_h; ++i) {
          const double fy = ty.frac[i];
          for (std::size_t j = 0; j < out_w; ++j) {
            const double fx = tx.frac[j];
            const double v = q[i * out_w + j];
            p[ty.lo[i] * s.w + tx.lo[j]] += (1.0 - fy) * (1.0 - fx) * v;
            p[ty.lo[i] * s.w + tx.hi[j]] += (1.0 - fy) * fx * v;
            p[ty.hi[i] * s.w + tx.lo[j]] += fy * (1.0 - fx) * v;
            p[ty.hi[i] * s.w + tx.hi[j]] += fy * fx * v;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double epsilon = 1e-5;
};

/// Per-channel batch normalization with affine gamma/beta of shape (1,c,1,1).
///
/// Training mode normalizes with batch statistics and updates the running
/// buffers in place; evaluation mode uses the running buffers.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         Tensor& running_mean, Tensor& running_var,
                         const BatchNormOptions& opt) {
  const Shape s = x.shape();
  const Shape cs{1, s.c, 1, 1};
  if (gamma.shape() != cs || beta.shape() != cs || running_mean.shape() != cs ||
      running_var.shape() != cs) {
    throw ShapeError("batch_norm: parameter shapes must be " + cs.str() + " for input " + s.str());
  }
  const std::size_t plane = s.plane();
  const std::size_t count = s.n * plane;
  if (opt.training && count < 2) {
    throw ConfigError("batch_norm: training mode needs more than one value per channel, got " +
                      s.str());
  }
  std::vector<double> inv_std(s.c);
  std::vector<double> xhat(s.numel());
  const auto xv = x.data();
  for (std::size_t c = 0; c < s.c; ++c) {
    double mu;
    double var;
    if (opt.training) {
      double acc = 0.0;
      for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t i = 0; i < plane; ++i) acc += xv[(n * s.c + c) * plane + i];
      }
      mu = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = xv[(n * s.c + c) * plane + i] - mu;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(count);
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      rm[c] = (1.0 - opt.momentum) * rm[c] + opt.momentum * mu;
      rv[c] = (1.0 - opt.momentum) * rv[c] +
              opt.momentum * sq / static_cast<double>(count - 1);
    } else {
      mu = running_mean[c];
      var = running_var[c];
    }
    inv_std[c] = 1.0 / std::sqrt(var + opt.epsilon);
    for (std::size_t n = 0; n < s.n; ++n) {
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t idx = (n * s.c + c) * plane + i;
        xhat[idx] = (xv[idx] - mu) * inv_std[c];
      }
    }
  }
  Tensor out(s);
  auto o = out.mutable_data();
  for (std::size_t idx = 0; idx < o.size(); ++idx) {
    const std::size_t c = (idx / plane) % s.c;
    o[idx] = gamma[c] * xhat[idx] + beta[c];
  }
  if (Tape* tape = detail::recording_tape({&x, &gamma, &beta})) {
    const bool training = opt.training;
    tape->record("batch_norm", out, {&x, &gamma, &beta},
                 [x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std),
                  training, plane, count]() mutable {
                   const Shape s = x.shape();
                   const auto g = out.grad();
                   for (std::size_t c = 0; c < s.c; ++c) {
                     double sum_g = 0.0;
                     double sum_gx = 0.0;
                     for (std::size_t n = 0; n < s.n; ++n) {
                       for (std::size_t i = 0; i < plane; ++i) {
                         const std::size_t idx = (n * s.c + c) * plane + i;
                         sum_g += g[idx];
                         sum_gx += g[idx] * xhat[idx];
                       }
                     }
                     if (gamma.requires_grad()) gamma.mutable_grad()[c] += sum_gx;
                     if (beta.requires_grad()) beta.mutable_grad()[c] += sum_g;
                     if (!x.requires_grad()) continue;
                     auto gx = x.mutable_grad();
                     const double scale = gamma[c] * inv_std[c];
                     const double m = static_cast<double>(count);
                     for (std::size_t n = 0; n < s.n; ++n) {
                       for (std::size_t i = 0; i < plane; ++i) {
                         const std::size_t idx = (n * s.c + c) * plane + i;
                         if (training) {
                           gx[idx] += scale * (g[idx] - sum_g / m - xhat[idx] * sum_gx / m);
                         } else {
                           gx[idx] += scale * g[idx];
                         }
                       }
                     }
                   }
                 });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Position affinity primitives. A (n,c,h,w) map is viewed per batch item as
// a c x N matrix with N = h*w positions.

/// Inner products between positions: out(n,0,p,q) = <a(n,:,p), b(n,:,q)>.
inline Tensor position_scores(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("position_scores: " + a.shape().str() + " vs " + b.shape().str());
  }
  const Shape s = a.shape();
  const std::size_t np = s.plane();
  Tensor out(Shape{s.n, 1, np, np});
  for (std::size_t n = 0; n < s.n; ++n) {
    const auto am = detail::cmat(a.data().data() + n * s.c * np, s.c, np);
    const auto bm = detail::cmat(b.data().data() + n * s.c * np, s.c, np);
    detail::mmat(out.mutable_data().data() + n * np * np, np, np).noalias() =
        am.transpose() * bm;
  }
  if (Tape* tape = detail::recording_tape({&a, &b})) {
    tape->record("position_scores", out, {&a, &b}, [a, b, out, np]() mutable {
      const Shape s = a.shape();
      for (std::size_t n = 0; n < s.n; ++n) {
        const auto g = detail::cmat(out.grad().data() + n * np * np, np, np);
        const auto am = detail::cmat(a.data().data() + n * s.c * np, s.c, np);
        const auto bm = detail::cmat(b.data().data() + n * s.c * np, s.c, np);
        if (a.requires_grad()) {
          detail::mmat(a.mutable_grad().data() + n * s.c * np, s.c, np).noalias() +=
              bm * g.transpose();
        }
        if (b.requires_grad()) {
          detail::mmat(b.mutable_grad().data() + n * s.c * np, s.c, np).noalias() += am * g;
        }
      }
    });
  }
  return out;
}

/// Softmax along the last axis for every (n,c,h) row.
inline Tensor softmax_rows(const Tensor& m) {
  const Shape s = m.shape();
  const std::size_t len = s.w;
  const std::size_t rows = s.n * s.c * s.h;
  Tensor out(s);
  const auto x = m.data();
  auto y = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * len;
    double* yr = y.data() + r * len;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    for (std::size_t j = 0; j < len; ++j) yr[j] /= z;
  }
  if (Tape* tape = detail::recording_tape({&m})) {
    tape->record("softmax_rows", out, {&m}, [m, out, rows, len]() mutable {
      const auto g = out.grad();
      const auto y = out.data();
      auto gm = m.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += g[r * len + j] * y[r * len + j];
        for (std::size_t j = 0; j < len; ++j) {
          gm[r * len + j] += y[r * len + j] * (g[r * len + j] - dot);
        }
      }
    });
  }
  return out;
}

/// Affinity-weighted mixing: out(n,:,p) = sum_q weights(n,0,p,q) * x(n,:,q).
inline Tensor position_mix(const Tensor& x, const Tensor& weights) {
  const Shape s = x.shape();
  const std::size_t np = s.plane();
  if (weights.shape() != Shape{s.n, 1, np, np}) {
    throw ShapeError("position_mix: weights " + weights.shape().str() + " for features " +
                     s.str());
  }
  Tensor out(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    const auto xm = detail::cmat(x.data().data() + n * s.c * np, s.c, np);
    const auto wm = detail::cmat(weights.data().data() + n * np * np, np, np);
    detail::mmat(out.mutable_data().data() + n * s.c * np, s.c, np).noalias() =
        xm * wm.transpose();
  }
  if (Tape* tape = detail::recording_tape({&x, &weights})) {
    tape->record("position_mix", out, {&x, &weights}, [x, weights, out, np]() mutable {
      const Shape s = x.shape();
      for (std::size_t n = 0; n < s.n; ++n) {
        const auto g = detail::cmat(out.grad().data() + n * s.c * np, s.c, np);
        const auto xm = detail::cmat(x.data().data() + n * s.c * np, s.c, np);
        const auto wm = detail::cmat(weights.data().data() + n * np * np, np, np);
        if (x.requires_grad()) {
          detail::mmat(x.mutable_grad().data() + n * s.c * np, s.c, np).noalias() += g * wm;
        }
        if (weights.requires_grad()) {
          detail::mmat(weights.mutable_grad().data() + n * np * np, np, np).noalias() +=
              g.transpose() * xm;
        }
      }
    });
  }
  return out;
}

}  // namespace ccenet
