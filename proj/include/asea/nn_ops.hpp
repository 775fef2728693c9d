#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <utility>

#include <Eigen/Core>

#include "asea/ops.hpp"

namespace asea {

namespace detail {

using Mat = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMat = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using Strides = Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>;
using StridedMat = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0, Strides>;
using ConstStridedMat =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0, Strides>;

// Tap k of a [Cout,Cin,K] kernel as a Cout x Cin matrix.
inline ConstStridedMat tap(const double* w, std::size_t cout, std::size_t cin, std::size_t K, std::size_t k) {
  return ConstStridedMat(w + k, cout, cin, Strides(cin * K, K));
}

// Fixed four-way split of the reduction; the order depends only on n.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t e = 0;
  for (; e + 4 <= n; e += 4) {
    s0 += a[e] * b[e];
    s1 += a[e + 1] * b[e + 1];
    s2 += a[e + 2] * b[e + 2];
    s3 += a[e + 3] * b[e + 3];
  }
  for (; e < n; ++e) s0 += a[e] * b[e];
  return (s0 + s1) + (s2 + s3);
}

inline double total(const double* a, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t e = 0;
  for (; e + 4 <= n; e += 4) {
    s0 += a[e];
    s1 += a[e + 1];
    s2 += a[e + 2];
    s3 += a[e + 3];
  }
  for (; e < n; ++e) s0 += a[e];
  return (s0 + s1) + (s2 + s3);
}

inline void axpy(double w, const double* x, double* y, std::size_t n) {
  for (std::size_t e = 0; e < n; ++e) y[e] += w * x[e];
}

// Output frames [first, last) whose tap k reads an in-range input frame (stride 1).
inline std::pair<std::size_t, std::size_t> tap_range(std::size_t k, std::size_t dilation, std::size_t pad,
                                                     std::size_t t_in, std::size_t t_out) {
  const long shift = static_cast<long>(k * dilation) - static_cast<long>(pad);
  const long first = std::max<long>(0, -shift);
  const long last = std::min<long>(static_cast<long>(t_out), static_cast<long>(t_in) - shift);
  if (last <= first) return {0, 0};
  return {static_cast<std::size_t>(first), static_cast<std::size_t>(last)};
}

}  // namespace detail

/// 1x1 map over axis 1: y[b,o,...] = sum_i W[o,i] x[b,i,...] + bias[o].
/// Accepts x of rank >= 2; trailing axes are carried through untouched.
inline Var channel_linear(const Var& x, const Var& weight, const std::optional<Var>& bias = std::nullopt) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() < 2 || ws.size() != 2 || ws[1] != xs[1]) {
    throw DimensionError("channel_linear: input " + shape_str(xs) + " vs weight " + shape_str(ws));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != ws[0])) {
    throw DimensionError("channel_linear: bias " + shape_str(bias->shape()) + " vs weight " + shape_str(ws));
  }
  const std::size_t B = xs[0], Cin = xs[1], Cout = ws[0];
  const std::size_t inner = x.value().size() / (B * Cin);
  Shape os = xs;
  os[1] = Cout;
  Tensor out(os);
  const double* X = x.value().ptr();
  const double* W = weight.value().ptr();
  double* Y = out.ptr();
  const detail::ConstMat Wm(W, Cout, Cin);
  for (std::size_t b = 0; b < B; ++b) {
    detail::Mat Yb(Y + b * Cout * inner, Cout, inner);
    Yb.noalias() = Wm * detail::ConstMat(X + b * Cin * inner, Cin, inner);
    if (bias)
      for (std::size_t o = 0; o < Cout; ++o) Yb.row(o).array() += bias->value()[o];
  }
  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();
  return make_result(Op::ChannelLinear, std::move(out), inputs, [B, Cin, Cout, inner, has_bias](Node& self) {
    const double* G = self.grad.ptr();
    const double* X = self.inputs[0]->value.ptr();
    const double* W = self.inputs[1]->value.ptr();
    Tensor* gx = input_grad(self, 0);
    Tensor* gw = input_grad(self, 1);
    Tensor* gb = has_bias ? input_grad(self, 2) : nullptr;
    const detail::ConstMat Wm(W, Cout, Cin);
    for (std::size_t b = 0; b < B; ++b) {
      const detail::ConstMat Gb(G + b * Cout * inner, Cout, inner);
      const detail::ConstMat Xb(X + b * Cin * inner, Cin, inner);
      if (gb)
        for (std::size_t o = 0; o < Cout; ++o) (*gb)[o] += detail::total(G + (b * Cout + o) * inner, inner);
      if (gw) detail::Mat(gw->ptr(), Cout, Cin).noalias() += Gb * Xb.transpose();
      if (gx) detail::Mat(gx->ptr() + b * Cin * inner, Cin, inner).noalias() += Wm.transpose() * Gb;
    }
  });
}

enum class Padding { Same, Valid };

struct TemporalGeometry {
  std::size_t kernel = 1, dilation = 1, stride = 1, pad = 0, t_in = 1, t_out = 1;
};

inline TemporalGeometry temporal_geometry(std::size_t t_in, std::size_t kernel, std::size_t dilation,
                                          std::size_t stride, Padding padding) {
  if (kernel % 2 == 0) throw ConfigError("temporal_conv: kernel length must be odd, got " + std::to_string(kernel));
  if (dilation == 0 || stride == 0) throw ConfigError("temporal_conv: dilation and stride must be positive");
  TemporalGeometry g{kernel, dilation, stride, 0, t_in, 0};
  const std::size_t span = dilation * (kernel - 1) + 1;
  g.pad = padding == Padding::Same ? dilation * (kernel - 1) / 2 : 0;
  if (t_in + 2 * g.pad < span) {
    throw LengthError("temporal_conv: T=" + std::to_string(t_in) + " is shorter than the dilated receptive field " +
                      std::to_string(span));
  }
  g.t_out = (t_in + 2 * g.pad - span) / stride + 1;
  return g;
}

/// Dilated 1-D convolution over axis 2 of x[B,Cin,T,N] with kernel
/// W[Cout,Cin,K]; every joint (axis 3) is filtered independently.
inline Var temporal_conv(const Var& x, const Var& kernel, std::size_t dilation, std::size_t stride,
                         const std::optional<Var>& bias = std::nullopt, Padding padding = Padding::Same) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (xs.size() != 4 || ks.size() != 3 || ks[1] != xs[1]) {
    throw DimensionError("temporal_conv: input " + shape_str(xs) + " vs kernel " + shape_str(ks));
  }
  const std::size_t B = xs[0], Cin = xs[1], N = xs[3], Cout = ks[0], K = ks[2];
  const TemporalGeometry geo = temporal_geometry(xs[2], K, dilation, stride, padding);
  const std::size_t T = geo.t_in, To = geo.t_out;
  Tensor out(Shape{B, Cout, To, N});
  const double* X = x.value().ptr();
  const double* W = kernel.value().ptr();
  double* Y = out.ptr();
  if (stride == 1) {
    for (std::size_t b = 0; b < B; ++b) {
      double* Yb = Y + b * Cout * To * N;
      if (bias)
        for (std::size_t o = 0; o < Cout; ++o) std::fill(Yb + o * To * N, Yb + (o + 1) * To * N, bias->value()[o]);
      for (std::size_t k = 0; k < K; ++k) {
        const auto [t0, t1] = detail::tap_range(k, dilation, geo.pad, T, To);
        if (t1 <= t0) continue;
        const std::size_t src = (t0 + k * dilation - geo.pad) * N, len = (t1 - t0) * N;
        detail::StridedMat(Yb + t0 * N, Cout, len, detail::Strides(To * N, 1)).noalias() +=
            detail::tap(W, Cout, Cin, K, k) *
            detail::ConstStridedMat(X + b * Cin * T * N + src, Cin, len, detail::Strides(T * N, 1));
      }
    }
  } else {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < Cout; ++o) {
        double* yo = Y + (b * Cout + o) * To * N;
        if (bias) std::fill(yo, yo + To * N, bias->value()[o]);
        for (std::size_t i = 0; i < Cin; ++i) {
          const double* xi = X + (b * Cin + i) * T * N;
          for (std::size_t k = 0; k < K; ++k) {
            const double w = W[(o * Cin + i) * K + k];
            for (std::size_t t = 0; t < To; ++t) {
              const long src = static_cast<long>(t * stride + k * dilation) - static_cast<long>(geo.pad);
              if (src < 0 || src >= static_cast<long>(T)) continue;
              detail::axpy(w, xi + static_cast<std::size_t>(src) * N, yo + t * N, N);
            }
          }
        }
      }
  }
  std::vector<Var> inputs{x, kernel};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();
  return make_result(Op::TemporalConv, std::move(out), inputs, [=](Node& self) {
    const double* G = self.grad.ptr();
    const double* X = self.inputs[0]->value.ptr();
    const double* W = self.inputs[1]->value.ptr();
    Tensor* gx = input_grad(self, 0);
    Tensor* gw = input_grad(self, 1);
    Tensor* gb = has_bias ? input_grad(self, 2) : nullptr;
    for (std::size_t b = 0; b < B; ++b) {
      const double* Gb = G + b * Cout * To * N;
      if (gb)
        for (std::size_t o = 0; o < Cout; ++o) (*gb)[o] += detail::total(Gb + o * To * N, To * N);
      if (stride == 1) {
        for (std::size_t k = 0; k < K; ++k) {
          const auto [t0, t1] = detail::tap_range(k, dilation, geo.pad, T, To);
          if (t1 <= t0) continue;
          const std::size_t src = (t0 + k * dilation - geo.pad) * N, len = (t1 - t0) * N;
          const detail::ConstStridedMat g(Gb + t0 * N, Cout, len, detail::Strides(To * N, 1));
          if (gw) {
            detail::StridedMat(gw->ptr() + k, Cout, Cin, detail::Strides(Cin * K, K)).noalias() +=
                g * detail::ConstStridedMat(X + b * Cin * T * N + src, Cin, len, detail::Strides(T * N, 1)).transpose();
          }
          if (gx) {
            detail::StridedMat(gx->ptr() + b * Cin * T * N + src, Cin, len, detail::Strides(T * N, 1)).noalias() +=
                detail::tap(W, Cout, Cin, K, k).transpose() * g;
          }
        }
        continue;
      }
      for (std::size_t o = 0; o < Cout; ++o) {
        const double* go = Gb + o * To * N;
        for (std::size_t i = 0; i < Cin; ++i) {
          const double* xi = X + (b * Cin + i) * T * N;
          double* gxi = gx ? gx->ptr() + (b * Cin + i) * T * N : nullptr;
          for (std::size_t k = 0; k < K; ++k) {
            const double w = W[(o * Cin + i) * K + k];
            double acc = 0.0;
            for (std::size_t t = 0; t < To; ++t) {
              const long src = static_cast<long>(t * stride + k * dilation) - static_cast<long>(geo.pad);
              if (src < 0 || src >= static_cast<long>(T)) continue;
              const double* gr = go + t * N;
              const std::size_t off = static_cast<std::size_t>(src) * N;
              if (gw) acc += detail::dot(gr, xi + off, N);
              if (gxi) detail::axpy(w, gr, gxi + off, N);
            }
            if (gw) (*gw)[(o * Cin + i) * K + k] += acc;
          }
        }
      }
    }
  });
}

/// Per-channel batch statistics of x[B,C,...] (population variance).
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> var;
  std::size_t count = 0;
};

/// Normalizes every channel of x[B,C,...] then applies gamma/beta.
/// Training mode uses batch statistics and reports them through `batch_stats`;
/// otherwise the supplied running statistics are used as constants.
inline Var channel_norm(const Var& x, const Var& gamma, const Var& beta, bool training,
                        const std::vector<double>& running_mean, const std::vector<double>& running_var,
                        double eps = 1e-5, ChannelStats* batch_stats = nullptr) {
  const Shape& xs = x.shape();
  if (xs.size() < 2 || gamma.shape() != Shape{xs[1]} || beta.shape() != Shape{xs[1]}) {
    throw DimensionError("channel_norm: input " + shape_str(xs) + " vs affine " + shape_str(gamma.shape()));
  }
  const std::size_t B = xs[0], C = xs[1];
  const std::size_t inner = x.value().size() / (B * C);
  const std::size_t count = B * inner;
  const double* X = x.value().ptr();
  std::vector<double> mu(C), inv_std(C);
  if (training) {
    std::vector<double> var(C);
    // Per-sample partial sums are added in sorted order, so the statistics do
    // not depend on the order of samples within the batch.
    std::vector<double> part(B);
    auto ordered_total = [&part] {
      std::sort(part.begin(), part.end());
      double t = 0.0;
      for (double v : part) t += v;
      return t;
    };
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t b = 0; b < B; ++b) {
        const double* xr = X + (b * C + c) * inner;
        double s = 0.0;
        for (std::size_t e = 0; e < inner; ++e) s += xr[e];
        part[b] = s;
      }
      mu[c] = ordered_total() / static_cast<double>(count);
      for (std::size_t b = 0; b < B; ++b) {
        const double* xr = X + (b * C + c) * inner;
        double v = 0.0;
        for (std::size_t e = 0; e < inner; ++e) v += (xr[e] - mu[c]) * (xr[e] - mu[c]);
        part[b] = v;
      }
      var[c] = ordered_total() / static_cast<double>(count);
      inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
    }
    if (batch_stats) *batch_stats = ChannelStats{mu, var, count};
  } else {
    if (running_mean.size() != C || running_var.size() != C) {
      throw DimensionError("channel_norm: running statistics do not match " + std::to_string(C) + " channels");
    }
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
    }
  }
  Tensor xhat(xs);
  Tensor out(xs);
  const double* gm = gamma.value().ptr();
  const double* bt = beta.value().ptr();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (b * C + c) * inner;
      for (std::size_t e = 0; e < inner; ++e) {
        const double h = (X[off + e] - mu[c]) * inv_std[c];
        xhat[off + e] = h;
        out[off + e] = gm[c] * h + bt[c];
      }
    }
  return make_result(Op::ChannelNorm, std::move(out), {x, gamma, beta},
                     [xhat, inv_std, B, C, inner, count, training](Node& self) {
                       const double* G = self.grad.ptr();
                       const double* gm = self.inputs[1]->value.ptr();
                       Tensor* gx = input_grad(self, 0);
                       Tensor* gg = input_grad(self, 1);
                       Tensor* gbt = input_grad(self, 2);
                       for (std::size_t c = 0; c < C; ++c) {
                         double sg = 0.0, sgh = 0.0;
                         for (std::size_t b = 0; b < B; ++b) {
                           const std::size_t off = (b * C + c) * inner;
                           for (std::size_t e = 0; e < inner; ++e) {
                             sg += G[off + e];
                             sgh += G[off + e] * xhat[off + e];
                           }
                         }
                         if (gg) (*gg)[c] += sgh;
                         if (gbt) (*gbt)[c] += sg;
                         if (!gx) continue;
                         const double k = gm[c] * inv_std[c];
                         const double n = static_cast<double>(count);
                         for (std::size_t b = 0; b < B; ++b) {
                           const std::size_t off = (b * C + c) * inner;
                           for (std::size_t e = 0; e < inner; ++e) {
                             if (training) {
                               (*gx)[off + e] += k * (G[off + e] - sg / n - xhat[off + e] * sgh / n);
                             } else {
                               (*gx)[off + e] += k * G[off + e];
                             }
                           }
                         }
                       }
                     });
}

/// Max over a centred window of `window` frames (stride 1, T preserved).
/// Out-of-range frames are excluded rather than zero-padded; ties go to the earliest frame.
inline Var max_pool_time(const Var& x, std::size_t window) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw DimensionError("max_pool_time: expected [B,C,T,N], got " + shape_str(xs));
  if (window % 2 == 0) throw ConfigError("max_pool_time: window must be odd");
  const std::size_t BC = xs[0] * xs[1], T = xs[2], N = xs[3];
  const long half = static_cast<long>(window / 2);
  Tensor out(xs);
  std::vector<std::size_t> argmax(out.size());
  const double* X = x.value().ptr();
  for (std::size_t p = 0; p < BC; ++p)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t n = 0; n < N; ++n) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        for (long d = -half; d <= half; ++d) {
          const long s = static_cast<long>(t) + d;
          if (s < 0 || s >= static_cast<long>(T)) continue;
          const std::size_t idx = (p * T + static_cast<std::size_t>(s)) * N + n;
          if (X[idx] > best) {
            best = X[idx];
            arg = idx;
          }
        }
        const std::size_t o = (p * T + t) * N + n;
        out[o] = best;
        argmax[o] = arg;
      }
  if (tracing_branches())
    for (std::size_t a : argmax) note_branch(a);
  return make_result(Op::MaxPoolTime, std::move(out), {x}, [argmax](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < argmax.size(); ++o) (*gx)[argmax[o]] += self.grad[o];
  });
}

/// out[b,c,t,i] = sum_j R[b,c,i,j] * e[b,c,t,j]: each channel mixes joints
/// through its own N x N topology.
inline Var graph_aggregate(const Var& topology, const Var& features) {
  const Shape& rs = topology.shape();
  const Shape& es = features.shape();
  if (rs.size() != 4 || es.size() != 4 || rs[0] != es[0] || rs[1] != es[1] || rs[2] != es[3] || rs[3] != es[3]) {
    throw DimensionError("graph_aggregate: topology " + shape_str(rs) + " vs features " + shape_str(es));
  }
  const std::size_t B = es[0], C = es[1], T = es[2], N = es[3];
  Tensor out(es);
  const double* R = topology.value().ptr();
  const double* E = features.value().ptr();
  double* Y = out.ptr();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    detail::Mat(Y + bc * T * N, T, N).noalias() =
        detail::ConstMat(E + bc * T * N, T, N) * detail::ConstMat(R + bc * N * N, N, N).transpose();
  }
  return make_result(Op::GraphAggregate, std::move(out), {topology, features}, [B, C, T, N](Node& self) {
    const double* G = self.grad.ptr();
    const double* R = self.inputs[0]->value.ptr();
    const double* E = self.inputs[1]->value.ptr();
    Tensor* gr = input_grad(self, 0);
    Tensor* ge = input_grad(self, 1);
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      const detail::ConstMat g(G + bc * T * N, T, N);
      if (gr) detail::Mat(gr->ptr() + bc * N * N, N, N).noalias() += g.transpose() * detail::ConstMat(E + bc * T * N, T, N);
      if (ge) detail::Mat(ge->ptr() + bc * T * N, T, N).noalias() += g * detail::ConstMat(R + bc * N * N, N, N);
    }
  });
}

}  // namespace asea
