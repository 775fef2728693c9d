#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "asea/autodiff.hpp"

namespace asea {

namespace detail {

// Shape after numpy-style broadcasting plus per-operand strides (0 on broadcast axes).
struct BroadcastPlan {
  Shape out;
  Shape a_stride;
  Shape b_stride;
};

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* what) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape ap(r, 1), bp(r, 1);
  std::copy(a.begin(), a.end(), ap.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), bp.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  BroadcastPlan p;
  p.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (ap[i] != bp[i] && ap[i] != 1 && bp[i] != 1) {
      throw DimensionError(std::string(what) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcastable");
    }
    p.out[i] = std::max(ap[i], bp[i]);
  }
  const Shape as = row_major_strides(ap), bs = row_major_strides(bp);
  p.a_stride.resize(r);
  p.b_stride.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    p.a_stride[i] = ap[i] == 1 ? 0 : as[i];
    p.b_stride[i] = bp[i] == 1 ? 0 : bs[i];
  }
  return p;
}

// Visits every output element with its flat operand offsets.
template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::size_t r = p.out.size();
  const std::size_t n = shape_numel(p.out);
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t ai = 0, bi = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ai, bi);
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < p.out[d]) {
        ai += p.a_stride[d];
        bi += p.b_stride[d];
        break;
      }
      ai -= p.a_stride[d] * (p.out[d] - 1);
      bi -= p.b_stride[d] * (p.out[d] - 1);
      idx[d] = 0;
    }
  }
}

enum class BinaryKind { Add, Sub, Mul, Div };

inline Var binary(BinaryKind kind, const Var& a, const Var& b) {
  static constexpr Op tags[] = {Op::Add, Op::Sub, Op::Mul, Op::Div};
  static constexpr const char* names[] = {"add", "sub", "mul", "div"};
  const auto k = static_cast<std::size_t>(kind);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();

  auto apply = [kind](double x, double y) {
    switch (kind) {
      case BinaryKind::Add: return x + y;
      case BinaryKind::Sub: return x - y;
      case BinaryKind::Mul: return x * y;
      case BinaryKind::Div: return x / y;
    }
    return 0.0;
  };

  if (av.shape() == bv.shape()) {
    Tensor out(av.shape());
    const std::size_t n = out.size();
    const double* pa = av.ptr();
    const double* pb = bv.ptr();
    double* po = out.ptr();
    switch (kind) {
      case BinaryKind::Add: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
      case BinaryKind::Sub: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
      case BinaryKind::Mul: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
      case BinaryKind::Div: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i]; break;
    }
    return make_result(tags[k], std::move(out), {a, b}, [kind](Node& self) {
      const Tensor& g = self.grad;
      const Tensor& x = self.inputs[0]->value;
      const Tensor& y = self.inputs[1]->value;
      const std::size_t n = g.size();
      if (Tensor* ga = input_grad(self, 0)) {
        for (std::size_t i = 0; i < n; ++i) {
          switch (kind) {
            case BinaryKind::Add:
            case BinaryKind::Sub: (*ga)[i] += g[i]; break;
            case BinaryKind::Mul: (*ga)[i] += g[i] * y[i]; break;
            case BinaryKind::Div: (*ga)[i] += g[i] / y[i]; break;
          }
        }
      }
      if (Tensor* gb = input_grad(self, 1)) {
        for (std::size_t i = 0; i < n; ++i) {
          switch (kind) {
            case BinaryKind::Add: (*gb)[i] += g[i]; break;
            case BinaryKind::Sub: (*gb)[i] -= g[i]; break;
            case BinaryKind::Mul: (*gb)[i] += g[i] * x[i]; break;
            case BinaryKind::Div: (*gb)[i] -= g[i] * x[i] / (y[i] * y[i]); break;
          }
        }
      }
    });
  }

  BroadcastPlan plan = plan_broadcast(av.shape(), bv.shape(), names[k]);
  Tensor out(plan.out);
  for_each_broadcast(plan, [&](std::size_t o, std::size_t ai, std::size_t bi) { out[o] = apply(av[ai], bv[bi]); });
  return make_result(tags[k], std::move(out), {a, b}, [kind, plan](Node& self) {
    const Tensor& g = self.grad;
    const Tensor& x = self.inputs[0]->value;
    const Tensor& y = self.inputs[1]->value;
    Tensor* ga = input_grad(self, 0);
    Tensor* gb = input_grad(self, 1);
    for_each_broadcast(plan, [&](std::size_t o, std::size_t ai, std::size_t bi) {
      const double go = g[o];
      switch (kind) {
        case BinaryKind::Add:
          if (ga) (*ga)[ai] += go;
          if (gb) (*gb)[bi] += go;
          break;
        case BinaryKind::Sub:
          if (ga) (*ga)[ai] += go;
          if (gb) (*gb)[bi] -= go;
          break;
        case BinaryKind::Mul:
          if (ga) (*ga)[ai] += go * y[bi];
          if (gb) (*gb)[bi] += go * x[ai];
          break;
        case BinaryKind::Div:
          if (ga) (*ga)[ai] += go / y[bi];
          if (gb) (*gb)[bi] -= go * x[ai] / (y[bi] * y[bi]);
          break;
      }
    });
  });
}

template <class Fwd, class Deriv>
Var unary(Op tag, const Var& x, Fwd fwd, Deriv deriv) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return make_result(tag, std::move(out), {x}, [deriv](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    const Tensor& xin = self.inputs[0]->value;
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i] * deriv(xin[i], self.value[i]);
  });
}

inline std::size_t normalize_axis(long axis, std::size_t rank, const Shape& s) {
  const long r = static_cast<long>(rank);
  if (axis < -r || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

// (outer, extent, inner) decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit sp;
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  sp.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) { return detail::binary(detail::BinaryKind::Add, a, b); }
inline Var sub(const Var& a, const Var& b) { return detail::binary(detail::BinaryKind::Sub, a, b); }
inline Var mul(const Var& a, const Var& b) { return detail::binary(detail::BinaryKind::Mul, a, b); }
inline Var div(const Var& a, const Var& b) { return detail::binary(detail::BinaryKind::Div, a, b); }

inline Var scale(const Var& x, double c) {
  return detail::unary(Op::Scale, x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}
inline Var neg(const Var& x) {
  return detail::unary(Op::Neg, x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}
inline Var relu(const Var& x) {
  if (tracing_branches())
    for (double v : x.value().data()) note_branch(v > 0.0);
  return detail::unary(
      Op::Relu, x, [](double v) { return v > 0.0 || std::isnan(v) ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}
inline Var tanh(const Var& x) {
  return detail::unary(
      Op::Tanh, x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}
inline double sigmoid_scalar(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
inline Var sigmoid(const Var& x) {
  return detail::unary(Op::Sigmoid, x, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}
inline Var exp(const Var& x) {
  return detail::unary(
      Op::Exp, x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}
inline Var log(const Var& x) {
  return detail::unary(
      Op::Log, x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}
inline Var square(const Var& x) {
  return detail::unary(
      Op::Square, x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result(Op::Reshape, std::move(out), {x}, [](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
  });
}

inline Var permute(const Var& x, std::vector<std::size_t> perm) {
  Tensor out = permute(x.value(), perm);
  return make_result(Op::Permute, std::move(out), {x}, [perm](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    Tensor back = permute(self.grad, inverse_permutation(perm));
    for (std::size_t i = 0; i < back.size(); ++i) (*gx)[i] += back[i];
  });
}

/// Sum over `axes`; reduced axes are kept with extent 1 when `keepdim`.
inline Var sum(const Var& x, std::vector<std::size_t> axes, bool keepdim = false) {
  const Shape& in = x.shape();
  Shape kept = in;
  std::vector<bool> reduced(in.size(), false);
  for (std::size_t a : axes) {
    if (a >= in.size()) throw DimensionError("sum axis " + std::to_string(a) + " out of range for " + shape_str(in));
    reduced[a] = true;
    kept[a] = 1;
  }
  detail::BroadcastPlan plan = detail::plan_broadcast(in, kept, "sum");
  Tensor out(kept);
  const Tensor& xv = x.value();
  detail::for_each_broadcast(plan, [&](std::size_t, std::size_t xi, std::size_t oi) { out[oi] += xv[xi]; });
  if (!keepdim) {
    Shape squeezed;
    for (std::size_t i = 0; i < in.size(); ++i)
      if (!reduced[i]) squeezed.push_back(in[i]);
    out = out.reshaped(squeezed);
  }
  return make_result(Op::Sum, std::move(out), {x}, [plan](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    const Tensor& g = self.grad;
    detail::for_each_broadcast(plan, [&](std::size_t, std::size_t xi, std::size_t oi) { (*gx)[xi] += g[oi]; });
  });
}

inline Var sum_all(const Var& x) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  return sum(x, axes, false);
}

inline Var mean(const Var& x, std::vector<std::size_t> axes, bool keepdim = false) {
  std::size_t count = 1;
  for (std::size_t a : axes) count *= x.dim(a);
  return scale(sum(x, std::move(axes), keepdim), 1.0 / static_cast<double>(count));
}

inline Var broadcast_to(const Var& x, Shape shape) {
  detail::BroadcastPlan plan = detail::plan_broadcast(shape, x.shape(), "broadcast_to");
  if (plan.out != shape) {
    throw DimensionError("broadcast_to: cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor out(shape);
  const Tensor& xv = x.value();
  detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t, std::size_t xi) { out[o] = xv[xi]; });
  return make_result(Op::BroadcastTo, std::move(out), {x}, [plan](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    const Tensor& g = self.grad;
    detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t, std::size_t xi) { (*gx)[xi] += g[o]; });
  });
}

/// Contiguous range [start, start+len) along `axis`.
inline Var slice(const Var& x, std::size_t axis, std::size_t start, std::size_t len) {
  const Shape& in = x.shape();
  if (axis >= in.size() || len == 0 || start + len > in[axis]) {
    throw DimensionError("slice [" + std::to_string(start) + "," + std::to_string(start + len) + ") on axis " +
                         std::to_string(axis) + " of " + shape_str(in));
  }
  const auto sp = detail::split_at(in, axis);
  Shape os = in;
  os[axis] = len;
  Tensor out(os);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    const double* src = xv.ptr() + (o * sp.extent + start) * sp.inner;
    std::copy(src, src + len * sp.inner, out.ptr() + o * len * sp.inner);
  }
  return make_result(Op::Slice, std::move(out), {x}, [sp, start, len](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const double* g = self.grad.ptr() + o * len * sp.inner;
      double* dst = gx->ptr() + (o * sp.extent + start) * sp.inner;
      for (std::size_t i = 0; i < len * sp.inner; ++i) dst[i] += g[i];
    }
  });
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  Shape os = parts[0].shape();
  if (axis >= os.size()) throw DimensionError("concat axis out of range for " + shape_str(os));
  std::size_t total = 0;
  for (const Var& p : parts) {
    Shape s = p.shape();
    if (s.size() != os.size()) throw DimensionError("concat rank mismatch: " + shape_str(s) + " vs " + shape_str(os));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != os[i]) {
        throw DimensionError("concat shape mismatch: " + shape_str(s) + " vs " + shape_str(parts[0].shape()));
      }
    }
    total += s[axis];
  }
  os[axis] = total;
  const auto sp = detail::split_at(os, axis);
  Tensor out(os);
  std::vector<std::size_t> extents;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const std::size_t e = p.shape()[axis];
    extents.push_back(e);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const double* src = p.value().ptr() + o * e * sp.inner;
      std::copy(src, src + e * sp.inner, out.ptr() + (o * total + off) * sp.inner);
    }
    off += e;
  }
  return make_result(Op::Concat, std::move(out), parts, [sp, extents, total](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < extents.size(); ++k) {
      const std::size_t e = extents[k];
      if (Tensor* gk = input_grad(self, k)) {
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const double* g = self.grad.ptr() + (o * total + off) * sp.inner;
          double* dst = gk->ptr() + o * e * sp.inner;
          for (std::size_t i = 0; i < e * sp.inner; ++i) dst[i] += g[i];
        }
      }
      off += e;
    }
  });
}

/// out = keep ? x : fill. `keep` is a constant 0/1 tensor of x's shape.
inline Var mask_fill(const Var& x, const Tensor& keep, double fill) {
  if (keep.shape() != x.shape()) {
    throw DimensionError("mask_fill: mask " + shape_str(keep.shape()) + " vs " + shape_str(x.shape()));
  }
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep[i] != 0.0 ? x.value()[i] : fill;
  return make_result(Op::MaskFill, std::move(out), {x}, [keep](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (keep[i] != 0.0) (*gx)[i] += self.grad[i];
  });
}

/// Batched matrix product over the last two axes; leading axes broadcast.
inline Var matmul(const Var& a, const Var& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2 || as[as.size() - 1] != bs[bs.size() - 2]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  }
  const std::size_t m = as[as.size() - 2], k = as[as.size() - 1], n = bs[bs.size() - 1];
  Shape a_lead(as.begin(), as.end() - 2), b_lead(bs.begin(), bs.end() - 2);
  detail::BroadcastPlan plan;
  try {
    plan = detail::plan_broadcast(a_lead, b_lead, "matmul");
  } catch (const DimensionError&) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  }
  Shape os = plan.out;
  os.push_back(m);
  os.push_back(n);
  Tensor out(os);
  const double* pa = a.value().ptr();
  const double* pb = b.value().ptr();
  double* po = out.ptr();
  detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t ai, std::size_t bi) {
    const double* A = pa + ai * m * k;
    const double* B = pb + bi * k * n;
    double* C = po + o * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double av = A[i * k + p];
        const double* Brow = B + p * n;
        double* Crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) Crow[j] += av * Brow[j];
      }
    }
  });
  return make_result(Op::Matmul, std::move(out), {a, b}, [plan, m, k, n](Node& self) {
    const double* g = self.grad.ptr();
    const double* pa = self.inputs[0]->value.ptr();
    const double* pb = self.inputs[1]->value.ptr();
    Tensor* ga = input_grad(self, 0);
    Tensor* gb = input_grad(self, 1);
    detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t ai, std::size_t bi) {
      const double* G = g + o * m * n;
      const double* A = pa + ai * m * k;
      const double* B = pb + bi * k * n;
      if (ga) {
        double* GA = ga->ptr() + ai * m * k;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
            GA[i * k + p] += acc;
          }
      }
      if (gb) {
        double* GB = gb->ptr() + bi * k * n;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            for (std::size_t j = 0; j < n; ++j) GB[p * n + j] += av * G[i * n + j];
          }
      }
    });
  });
}

/// Max-subtracted softmax along `axis`.
inline Var softmax(const Var& x, long axis) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), x.shape());
  const auto sp = detail::split_at(x.shape(), ax);
  const Tensor& xv = x.value();
  Tensor out(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < sp.extent; ++e) mx = std::max(mx, xv[base + e * sp.inner]);
      double z = 0.0;
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const double v = std::exp(xv[base + e * sp.inner] - mx);
        out[base + e * sp.inner] = v;
        z += v;
      }
      for (std::size_t e = 0; e < sp.extent; ++e) out[base + e * sp.inner] /= z;
    }
  return make_result(Op::Softmax, std::move(out), {x}, [sp](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    const Tensor& y = self.value;
    const Tensor& g = self.grad;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.extent * sp.inner + i;
        double dot = 0.0;
        for (std::size_t e = 0; e < sp.extent; ++e) dot += g[base + e * sp.inner] * y[base + e * sp.inner];
        for (std::size_t e = 0; e < sp.extent; ++e) {
          const std::size_t idx = base + e * sp.inner;
          (*gx)[idx] += y[idx] * (g[idx] - dot);
        }
      }
  });
}

inline Var log_softmax(const Var& x, long axis) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), x.shape());
  const auto sp = detail::split_at(x.shape(), ax);
  const Tensor& xv = x.value();
  Tensor out(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < sp.extent; ++e) mx = std::max(mx, xv[base + e * sp.inner]);
      double z = 0.0;
      for (std::size_t e = 0; e < sp.extent; ++e) z += std::exp(xv[base + e * sp.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t e = 0; e < sp.extent; ++e) out[base + e * sp.inner] = xv[base + e * sp.inner] - lz;
    }
  return make_result(Op::LogSoftmax, std::move(out), {x}, [sp](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    const Tensor& y = self.value;
    const Tensor& g = self.grad;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.extent * sp.inner + i;
        double gs = 0.0;
        for (std::size_t e = 0; e < sp.extent; ++e) gs += g[base + e * sp.inner];
        for (std::size_t e = 0; e < sp.extent; ++e) {
          const std::size_t idx = base + e * sp.inner;
          (*gx)[idx] += g[idx] - std::exp(y[idx]) * gs;
        }
      }
  });
}

/// Softmax over the last axis where each entry is weighted by w >= 0:
/// y_j = w_j exp(x_j) / sum_k w_k exp(x_k). Entries with w == 0 come out
/// exactly 0 and their scores are never read. With 0/1 weights this is the
/// softmax over the unmasked subset.
inline Var weighted_softmax(const Var& x, const Var& w) {
  if (x.shape() != w.shape()) {
    throw DimensionError("weighted_softmax: scores " + shape_str(x.shape()) + " vs weights " + shape_str(w.shape()));
  }
  const std::size_t extent = x.shape().back();
  const std::size_t rows = x.value().size() / extent;
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  Tensor out(x.shape());
  Tensor ex(x.shape());  // exp(x - row max) on live entries
  std::vector<double> zs(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * extent;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t e = 0; e < extent; ++e)
      if (wv[base + e] > 0.0) mx = std::max(mx, xv[base + e]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw ContractError("weighted_softmax: a row has no positive weight (all keys masked)");
    }
    double z = 0.0;
    for (std::size_t e = 0; e < extent; ++e) {
      if (wv[base + e] > 0.0) {
        ex[base + e] = std::exp(xv[base + e] - mx);
        z += wv[base + e] * ex[base + e];
      }
    }
    zs[r] = z;
    for (std::size_t e = 0; e < extent; ++e)
      if (wv[base + e] > 0.0) out[base + e] = wv[base + e] * ex[base + e] / z;
  }
  return make_result(Op::WeightedSoftmax, std::move(out), {x, w}, [ex, zs, extent, rows](Node& self) {
    const Tensor& y = self.value;
    const Tensor& g = self.grad;
    const Tensor& wv = self.inputs[1]->value;
    Tensor* gx = input_grad(self, 0);
    Tensor* gw = input_grad(self, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * extent;
      double dot = 0.0;
      for (std::size_t e = 0; e < extent; ++e) dot += g[base + e] * y[base + e];
      for (std::size_t e = 0; e < extent; ++e) {
        const std::size_t idx = base + e;
        if (wv[idx] <= 0.0) continue;
        const double du = (g[idx] - dot) / zs[r];  // dL/d(w_j e_j)
        if (gx) (*gx)[idx] += du * wv[idx] * ex[idx];
        if (gw) (*gw)[idx] += du * ex[idx];
      }
    }
  });
}

/// softmax(scale * x) along `axis` restricted to finite entries; -inf entries
/// are excluded and map to exactly 0.
inline Var finite_softmax(const Var& x, long axis, double scale_factor) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), x.shape());
  const auto sp = detail::split_at(x.shape(), ax);
  const Tensor& xv = x.value();
  Tensor out(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const double v = xv[base + e * sp.inner];
        if (std::isfinite(v)) {
          mx = any ? std::max(mx, scale_factor * v) : scale_factor * v;
          any = true;
        }
      }
      if (!any) throw ContractError("finite_softmax: slice has no finite entry");
      double z = 0.0;
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const double v = xv[base + e * sp.inner];
        if (!std::isfinite(v)) continue;
        const double ev = std::exp(scale_factor * v - mx);
        out[base + e * sp.inner] = ev;
        z += ev;
      }
      for (std::size_t e = 0; e < sp.extent; ++e) out[base + e * sp.inner] /= z;
    }
  return make_result(Op::FiniteSoftmax, std::move(out), {x}, [sp, scale_factor](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    const Tensor& y = self.value;
    const Tensor& g = self.grad;
    const Tensor& xv = self.inputs[0]->value;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.extent * sp.inner + i;
        double dot = 0.0;
        for (std::size_t e = 0; e < sp.extent; ++e) dot += g[base + e * sp.inner] * y[base + e * sp.inner];
        for (std::size_t e = 0; e < sp.extent; ++e) {
          const std::size_t idx = base + e * sp.inner;
          if (std::isfinite(xv[idx])) (*gx)[idx] += scale_factor * y[idx] * (g[idx] - dot);
        }
      }
  });
}

/// Euclidean norm along `axis` (removed from the shape). The gradient at a
/// zero vector is taken to be 0.
inline Var l2_norm(const Var& x, long axis) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), x.shape());
  const auto sp = detail::split_at(x.shape(), ax);
  Shape os;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != ax) os.push_back(x.shape()[i]);
  const Tensor& xv = x.value();
  Tensor out(os);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double s = 0.0;
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const double v = xv[(o * sp.extent + e) * sp.inner + i];
        s += v * v;
      }
      out[o * sp.inner + i] = std::sqrt(s);
    }
  return make_result(Op::L2Norm, std::move(out), {x}, [sp](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    const Tensor& xv = self.inputs[0]->value;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const double nrm = self.value[o * sp.inner + i];
        if (nrm == 0.0) continue;
        const double gn = self.grad[o * sp.inner + i] / nrm;
        for (std::size_t e = 0; e < sp.extent; ++e) {
          const std::size_t idx = (o * sp.extent + e) * sp.inner + i;
          (*gx)[idx] += gn * xv[idx];
        }
      }
  });
}

}  // namespace asea
