#pragma once

#include <Eigen/Core>
#include <cmath>
#include <vector>

#include "factorizer/autodiff.hpp"
#include "factorizer/tensor.hpp"

namespace factorizer {

// ---------------------------------------------------------------------------
// Raw tensor kernels (no graph recording).
// ---------------------------------------------------------------------------

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const int r = static_cast<int>(std::max(a.size(), b.size()));
  Shape out(r);
  for (int i = 0; i < r; ++i) {
    int64_t ea = i < r - static_cast<int>(a.size()) ? 1 : a[i - (r - a.size())];
    int64_t eb = i < r - static_cast<int>(b.size()) ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw ShapeError("shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(ea, eb);
  }
  return out;
}

namespace detail {

// Strides of `shape` right-aligned into a frame of rank `frame_rank`,
// zeroed on broadcast (extent-1 or missing) axes.
inline Shape broadcast_strides(const Shape& shape, const Shape& frame) {
  const int fr = static_cast<int>(frame.size());
  const int r = static_cast<int>(shape.size());
  Shape native = row_major_strides(shape);
  Shape out(fr, 0);
  for (int i = 0; i < r; ++i) {
    int fi = fr - r + i;
    out[fi] = (shape[i] == 1 && frame[fi] != 1) ? 0 : native[i];
  }
  return out;
}

}  // namespace detail

template <typename T, typename F>
Tensor<T> broadcast_binary(const Tensor<T>& a, const Tensor<T>& b, F f) {
  if (a.shape() == b.shape()) {
    Tensor<T> out(a.shape());
    auto pa = a.data();
    auto pb = b.data();
    auto po = out.mutable_data();
    for (size_t i = 0; i < po.size(); ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  if (b.numel() == 1) {
    Tensor<T> out(a.shape());
    auto pa = a.data();
    const T s = b.data()[0];
    auto po = out.mutable_data();
    for (size_t i = 0; i < po.size(); ++i) po[i] = f(pa[i], s);
    return out;
  }
  if (a.numel() == 1) {
    Tensor<T> out(b.shape());
    const T s = a.data()[0];
    auto pb = b.data();
    auto po = out.mutable_data();
    for (size_t i = 0; i < po.size(); ++i) po[i] = f(s, pb[i]);
    return out;
  }
  Shape os = broadcast_shapes(a.shape(), b.shape());
  Tensor<T> out(os);
  const int r = static_cast<int>(os.size());
  Shape sa = detail::broadcast_strides(a.shape(), os);
  Shape sb = detail::broadcast_strides(b.shape(), os);
  std::vector<int64_t> counters(r, 0);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.mutable_data().data();
  // Walk outer dims with an odometer; the innermost axis runs as a straight
  // loop (each operand there is either contiguous or pinned).
  const int64_t inner = os[r - 1];
  const int64_t ia_step = sa[r - 1], ib_step = sb[r - 1];
  const int64_t outer = out.numel() / inner;
  int64_t offa = 0, offb = 0;
  for (int64_t o = 0; o < outer; ++o) {
    T* dst = po + o * inner;
    if (ia_step == 1 && ib_step == 1) {
      const T* qa = pa + offa;
      const T* qb = pb + offb;
      for (int64_t i = 0; i < inner; ++i) dst[i] = f(qa[i], qb[i]);
    } else if (ia_step == 1 && ib_step == 0) {
      const T* qa = pa + offa;
      const T vb = pb[offb];
      for (int64_t i = 0; i < inner; ++i) dst[i] = f(qa[i], vb);
    } else if (ia_step == 0 && ib_step == 1) {
      const T va = pa[offa];
      const T* qb = pb + offb;
      for (int64_t i = 0; i < inner; ++i) dst[i] = f(va, qb[i]);
    } else {
      for (int64_t i = 0; i < inner; ++i) dst[i] = f(pa[offa + i * ia_step], pb[offb + i * ib_step]);
    }
    for (int d = r - 2; d >= 0; --d) {
      offa += sa[d];
      offb += sb[d];
      if (++counters[d] < os[d]) break;
      offa -= sa[d] * os[d];
      offb -= sb[d] * os[d];
      counters[d] = 0;
    }
  }
  return out;
}

template <typename T, typename F>
Tensor<T> map_unary(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  auto pa = a.data();
  auto po = out.mutable_data();
  for (size_t i = 0; i < po.size(); ++i) po[i] = f(pa[i]);
  return out;
}

/// Sum `g` down to `target` shape (inverse of broadcasting).
template <typename T>
Tensor<T> reduce_to_shape(const Tensor<T>& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor<T> out(target);
  const Shape& gs = g.shape();
  const int r = static_cast<int>(gs.size());
  Shape st = detail::broadcast_strides(target, gs);
  std::vector<int64_t> counters(r, 0);
  const T* pg = g.data().data();
  T* po = out.mutable_data().data();
  const int64_t inner = gs[r - 1];
  const int64_t it_step = st[r - 1];
  const int64_t outer = g.numel() / inner;
  int64_t off = 0;
  for (int64_t o = 0; o < outer; ++o) {
    const T* src = pg + o * inner;
    if (it_step == 1) {
      T* dst = po + off;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    } else if (it_step == 0) {
      T acc = 0;
      for (int64_t i = 0; i < inner; ++i) acc += src[i];
      po[off] += acc;
    } else {
      for (int64_t i = 0; i < inner; ++i) po[off + i * it_step] += src[i];
    }
    for (int d = r - 2; d >= 0; --d) {
      off += st[d];
      if (++counters[d] < gs[d]) break;
      off -= st[d] * gs[d];
      counters[d] = 0;
    }
  }
  return out;
}

/// Replicate `t` up to `target` shape (numpy broadcast semantics).
template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& t, const Shape& target) {
  if (t.shape() == target) return t;
  Tensor<T> out(target);
  const int r = static_cast<int>(target.size());
  Shape st = detail::broadcast_strides(t.shape(), target);
  std::vector<int64_t> counters(r, 0);
  const T* pt = t.data().data();
  T* po = out.mutable_data().data();
  int64_t off = 0;
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) {
    po[i] = pt[off];
    for (int d = r - 1; d >= 0; --d) {
      off += st[d];
      if (++counters[d] < target[d]) break;
      off -= st[d] * target[d];
      counters[d] = 0;
    }
  }
  return out;
}

template <typename T>
Tensor<T> sum_axes_raw(const Tensor<T>& t, std::vector<int> axes, bool keepdim) {
  const int r = t.rank();
  std::vector<char> reduced(r, 0);
  for (int a : axes) reduced[normalize_axis(a, r)] = 1;
  Shape keep_shape = t.shape();
  for (int d = 0; d < r; ++d)
    if (reduced[d]) keep_shape[d] = 1;
  Tensor<T> out(keep_shape);
  Shape st = detail::broadcast_strides(keep_shape, t.shape());
  std::vector<int64_t> counters(r, 0);
  const T* pt = t.data().data();
  T* po = out.mutable_data().data();
  int64_t off = 0;
  const int64_t n = t.numel();
  const Shape& ts = t.shape();
  for (int64_t i = 0; i < n; ++i) {
    po[off] += pt[i];
    for (int d = r - 1; d >= 0; --d) {
      off += st[d];
      if (++counters[d] < ts[d]) break;
      off -= st[d] * ts[d];
      counters[d] = 0;
    }
  }
  if (keepdim) return out;
  Shape squeezed;
  for (int d = 0; d < r; ++d)
    if (!reduced[d]) squeezed.push_back(keep_shape[d]);
  if (squeezed.empty()) squeezed = {1};
  return out.reshape(squeezed);
}

// ---------------------------------------------------------------------------
// Batched matrix product on the last two axes, leading axes broadcast.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> batched_gemm(const Tensor<T>& a, const Tensor<T>& b, bool trans_a, bool trans_b) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul requires rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const int64_t ar = a.extent(-2), ac = a.extent(-1);
  const int64_t br = b.extent(-2), bc = b.extent(-1);
  const int64_t m = trans_a ? ac : ar, ka = trans_a ? ar : ac;
  const int64_t kb = trans_b ? bc : br, n = trans_b ? br : bc;
  if (ka != kb)
    throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) +
                     (trans_a ? "^T" : "") + " x " + shape_str(b.shape()) +
                     (trans_b ? "^T" : ""));
  Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch = broadcast_shapes(batch_a, batch_b);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);

  const int64_t nbatch = numel_of(batch);
  Shape sa = detail::broadcast_strides(batch_a, batch);
  Shape sb = detail::broadcast_strides(batch_b, batch);
  const int64_t step_a = ar * ac, step_b = br * bc, step_o = m * n;
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.mutable_data().data();
  const int r = static_cast<int>(batch.size());
  std::vector<int64_t> counters(r, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t i = 0; i < nbatch; ++i) {
    CMap ma(pa + ia * step_a, ar, ac);
    CMap mb(pb + ib * step_b, br, bc);
    MMap mo(po + i * step_o, m, n);
    if (!trans_a && !trans_b)
      mo.noalias() = ma * mb;
    else if (trans_a && !trans_b)
      mo.noalias() = ma.transpose() * mb;
    else if (!trans_a && trans_b)
      mo.noalias() = ma * mb.transpose();
    else
      mo.noalias() = ma.transpose() * mb.transpose();
    for (int d = r - 1; d >= 0; --d) {
      ia += sa[d];
      ib += sb[d];
      if (++counters[d] < batch[d]) break;
      ia -= sa[d] * batch[d];
      ib -= sb[d] * batch[d];
      counters[d] = 0;
    }
  }
  return out;
}

namespace detail {
template <typename T>
Tensor<T> reduce_batch(const Tensor<T>& full, const Shape& target) {
  if (full.shape() == target) return full;
  return reduce_to_shape(full, target);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable operations.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> constant(Tensor<T> t) {
  return Var<T>(std::move(t), false);
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tensor<T> value = broadcast_binary(a.value(), b.value(), [](T x, T y) { return x + y; });
  return Var<T>::make_op(std::move(value), {a, b}, [a, b](typename Var<T>::Node& self) {
    if (a.requires_grad()) a.accumulate_grad(detail::reduce_batch(self.grad, a.shape()));
    if (b.requires_grad()) b.accumulate_grad(detail::reduce_batch(self.grad, b.shape()));
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  Tensor<T> value = broadcast_binary(a.value(), b.value(), [](T x, T y) { return x - y; });
  return Var<T>::make_op(std::move(value), {a, b}, [a, b](typename Var<T>::Node& self) {
    if (a.requires_grad()) a.accumulate_grad(detail::reduce_batch(self.grad, a.shape()));
    if (b.requires_grad()) {
      Tensor<T> neg = map_unary(self.grad, [](T x) { return -x; });
      b.accumulate_grad(detail::reduce_batch(neg, b.shape()));
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tensor<T> value = broadcast_binary(a.value(), b.value(), [](T x, T y) { return x * y; });
  Tensor<T> av = a.value(), bv = b.value();
  return Var<T>::make_op(std::move(value), {a, b}, [a, b, av, bv](typename Var<T>::Node& self) {
    if (a.requires_grad()) {
      Tensor<T> da = broadcast_binary(self.grad, bv, [](T g, T y) { return g * y; });
      a.accumulate_grad(detail::reduce_batch(da, a.shape()));
    }
    if (b.requires_grad()) {
      Tensor<T> db = broadcast_binary(self.grad, av, [](T g, T x) { return g * x; });
      b.accumulate_grad(detail::reduce_batch(db, b.shape()));
    }
  });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  Tensor<T> value = broadcast_binary(a.value(), b.value(), [](T x, T y) { return x / y; });
  Tensor<T> av = a.value(), bv = b.value();
  return Var<T>::make_op(std::move(value), {a, b}, [a, b, av, bv](typename Var<T>::Node& self) {
    if (a.requires_grad()) {
      Tensor<T> da = broadcast_binary(self.grad, bv, [](T g, T y) { return g / y; });
      a.accumulate_grad(detail::reduce_batch(da, a.shape()));
    }
    if (b.requires_grad()) {
      Tensor<T> gx = broadcast_binary(self.grad, av, [](T g, T x) { return g * x; });
      Tensor<T> db = broadcast_binary(gx, bv, [](T t, T y) { return -t / (y * y); });
      b.accumulate_grad(detail::reduce_batch(db, b.shape()));
    }
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> value = map_unary(a.value(), [s](T x) { return x + s; });
  return Var<T>::make_op(std::move(value), {a}, [a](typename Var<T>::Node& self) {
    a.accumulate_grad(self.grad);
  });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& a, T s) {
  Tensor<T> value = map_unary(a.value(), [s](T x) { return x * s; });
  return Var<T>::make_op(std::move(value), {a}, [a, s](typename Var<T>::Node& self) {
    a.accumulate_grad(map_unary(self.grad, [s](T g) { return g * s; }));
  });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
  return mul_scalar(a, T(-1));
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> value = map_unary(a.value(), [](T x) { return x > T(0) ? x : T(0); });
  Tensor<T> av = a.value();
  return Var<T>::make_op(std::move(value), {a}, [a, av](typename Var<T>::Node& self) {
    a.accumulate_grad(
        broadcast_binary(self.grad, av, [](T g, T x) { return x > T(0) ? g : T(0); }));
  });
}

/// Exact Gaussian-CDF form: x * Phi(x).
template <typename T>
Var<T> gelu(const Var<T>& a) {
  auto phi_cdf = [](T x) {
    return T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475244)));
  };
  Tensor<T> value = map_unary(a.value(), [&](T x) { return x * phi_cdf(x); });
  Tensor<T> av = a.value();
  return Var<T>::make_op(std::move(value), {a}, [a, av](typename Var<T>::Node& self) {
    a.accumulate_grad(broadcast_binary(self.grad, av, [](T g, T x) {
      T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475244)));
      T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014326779);
      return g * (cdf + x * pdf);
    }));
  });
}

template <typename T>
Var<T> max_with_scalar(const Var<T>& a, T m) {
  Tensor<T> value = map_unary(a.value(), [m](T x) { return x > m ? x : m; });
  Tensor<T> av = a.value();
  return Var<T>::make_op(std::move(value), {a}, [a, av, m](typename Var<T>::Node& self) {
    a.accumulate_grad(broadcast_binary(self.grad, av, [m](T g, T x) { return x > m ? g : T(0); }));
  });
}

template <typename T>
Var<T> clamp_min(const Var<T>& a, T m) {
  return max_with_scalar(a, m);
}

template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  Tensor<T> value = map_unary(a.value(), [lo, hi](T x) { return std::min(std::max(x, lo), hi); });
  Tensor<T> av = a.value();
  return Var<T>::make_op(std::move(value), {a}, [a, av, lo, hi](typename Var<T>::Node& self) {
    a.accumulate_grad(broadcast_binary(
        self.grad, av, [lo, hi](T g, T x) { return (x > lo && x < hi) ? g : T(0); }));
  });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  Tensor<T> value = map_unary(a.value(), [](T x) { return std::exp(x); });
  Tensor<T> saved = value;
  return Var<T>::make_op(std::move(value), {a}, [a, saved](typename Var<T>::Node& self) {
    a.accumulate_grad(broadcast_binary(self.grad, saved, [](T g, T y) { return g * y; }));
  });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  Tensor<T> value = map_unary(a.value(), [](T x) { return std::log(x); });
  Tensor<T> av = a.value();
  return Var<T>::make_op(std::move(value), {a}, [a, av](typename Var<T>::Node& self) {
    a.accumulate_grad(broadcast_binary(self.grad, av, [](T g, T x) { return g / x; }));
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> value = map_unary(a.value(), [](T x) { return T(1) / (T(1) + std::exp(-x)); });
  Tensor<T> saved = value;
  return Var<T>::make_op(std::move(value), {a}, [a, saved](typename Var<T>::Node& self) {
    a.accumulate_grad(
        broadcast_binary(self.grad, saved, [](T g, T y) { return g * y * (T(1) - y); }));
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (T x : a.value().data()) acc += x;
  return Var<T>::make_op(Tensor<T>::scalar(acc), {a}, [a](typename Var<T>::Node& self) {
    a.accumulate_grad(Tensor<T>::full(a.shape(), self.grad.data()[0]));
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return mul_scalar(sum(a), T(1) / static_cast<T>(a.value().numel()));
}

template <typename T>
Var<T> sum_axes(const Var<T>& a, std::vector<int> axes, bool keepdim = true) {
  Tensor<T> value = sum_axes_raw(a.value(), axes, keepdim);
  Shape keep_shape = a.shape();
  for (int ax : axes) keep_shape[normalize_axis(ax, a.value().rank())] = 1;
  Shape in_shape = a.shape();
  return Var<T>::make_op(std::move(value), {a},
                         [a, keep_shape, in_shape](typename Var<T>::Node& self) {
                           Tensor<T> g = self.grad.reshape(keep_shape);
                           a.accumulate_grad(broadcast_to(g, in_shape));
                         });
}

// Structural ops: value motion only, gradients are the inverse motion.

template <typename T>
Var<T> reshape(const Var<T>& a, Shape new_shape) {
  Tensor<T> value = a.value().reshape(new_shape);
  Shape old_shape = a.shape();
  return Var<T>::make_op(std::move(value), {a}, [a, old_shape](typename Var<T>::Node& self) {
    a.accumulate_grad(self.grad.reshape(old_shape));
  });
}

template <typename T>
Var<T> permute(const Var<T>& a, std::vector<int> axes) {
  Tensor<T> value = a.value().permute(axes);
  std::vector<int> inverse(axes.size());
  for (size_t i = 0; i < axes.size(); ++i)
    inverse[normalize_axis(axes[i], static_cast<int>(axes.size()))] = static_cast<int>(i);
  return Var<T>::make_op(std::move(value), {a}, [a, inverse](typename Var<T>::Node& self) {
    a.accumulate_grad(self.grad.permute(inverse));
  });
}

template <typename T>
Var<T> transpose_last2(const Var<T>& a) {
  std::vector<int> axes(a.value().rank());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(a, axes);
}

template <typename T>
Var<T> roll(const Var<T>& a, std::vector<int> axes, std::vector<int64_t> shifts) {
  Tensor<T> value = a.value().roll(axes, shifts);
  std::vector<int64_t> back(shifts.size());
  for (size_t i = 0; i < shifts.size(); ++i) back[i] = -shifts[i];
  return Var<T>::make_op(std::move(value), {a}, [a, axes, back](typename Var<T>::Node& self) {
    a.accumulate_grad(self.grad.roll(axes, back));
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  std::vector<Tensor<T>> values;
  values.reserve(parts.size());
  for (const Var<T>& p : parts) values.push_back(p.value());
  Tensor<T> value = Tensor<T>::concat(values, axis);
  const int ax = normalize_axis(axis, value.rank());
  return Var<T>::make_op(std::move(value), parts, [parts, ax](typename Var<T>::Node& self) {
    int64_t offset = 0;
    for (const Var<T>& p : parts) {
      const int64_t e = p.shape()[ax];
      if (p.requires_grad()) p.accumulate_grad(self.grad.slice(ax, offset, e));
      offset += e;
    }
  });
}

template <typename T>
Var<T> slice(const Var<T>& a, int axis, int64_t start, int64_t length) {
  Tensor<T> value = a.value().slice(axis, start, length);
  const int ax = normalize_axis(axis, a.value().rank());
  Shape in_shape = a.shape();
  return Var<T>::make_op(
      std::move(value), {a}, [a, ax, start, length, in_shape](typename Var<T>::Node& self) {
        Tensor<T> g(in_shape);
        const int64_t inner = row_major_strides(in_shape)[ax];
        const int64_t e = in_shape[ax];
        const int64_t outer = g.numel() / (inner * e);
        const T* src = self.grad.data().data();
        T* dst = g.mutable_data().data();
        for (int64_t o = 0; o < outer; ++o)
          std::memcpy(dst + (o * e + start) * inner, src + o * length * inner,
                      sizeof(T) * static_cast<size_t>(length * inner));
        a.accumulate_grad(g);
      });
}

// Matrix product with numpy-style leading-batch broadcast.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tensor<T> value = batched_gemm(a.value(), b.value(), false, false);
  Tensor<T> av = a.value(), bv = b.value();
  return Var<T>::make_op(std::move(value), {a, b}, [a, b, av, bv](typename Var<T>::Node& self) {
    if (a.requires_grad()) {
      Tensor<T> da = batched_gemm(self.grad, bv, false, true);
      a.accumulate_grad(detail::reduce_batch(da, a.shape()));
    }
    if (b.requires_grad()) {
      Tensor<T> db = batched_gemm(av, self.grad, true, false);
      b.accumulate_grad(detail::reduce_batch(db, b.shape()));
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& a, int axis) {
  const int ax = normalize_axis(axis, a.value().rank());
  const Shape& s = a.shape();
  const int64_t ch = s[ax];
  const int64_t inner = row_major_strides(s)[ax];
  const int64_t outer = a.value().numel() / (ch * inner);
  Tensor<T> value(s);
  {
    const T* px = a.value().data().data();
    T* py = value.mutable_data().data();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < inner; ++i) {
        const int64_t base = o * ch * inner + i;
        T mx = px[base];
        for (int64_t c = 1; c < ch; ++c) mx = std::max(mx, px[base + c * inner]);
        T z = 0;
        for (int64_t c = 0; c < ch; ++c) {
          T e = std::exp(px[base + c * inner] - mx);
          py[base + c * inner] = e;
          z += e;
        }
        for (int64_t c = 0; c < ch; ++c) py[base + c * inner] /= z;
      }
  }
  Tensor<T> saved = value;
  return Var<T>::make_op(
      std::move(value), {a}, [a, saved, ax, ch, inner, outer](typename Var<T>::Node& self) {
        Tensor<T> dx(saved.shape());
        const T* py = saved.data().data();
        const T* pg = self.grad.data().data();
        T* pd = dx.mutable_data().data();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < inner; ++i) {
            const int64_t base = o * ch * inner + i;
            T dot = 0;
            for (int64_t c = 0; c < ch; ++c) dot += pg[base + c * inner] * py[base + c * inner];
            for (int64_t c = 0; c < ch; ++c) {
              const int64_t k = base + c * inner;
              pd[k] = py[k] * (pg[k] - dot);
            }
          }
        a.accumulate_grad(dx);
      });
}

/// Normalizes over `axis` to zero mean / unit variance per position, then
/// applies the per-channel affine (gain, offset).
template <typename T>
Var<T> layer_norm(const Var<T>& x, int axis, const Var<T>& gain, const Var<T>& offset, T eps) {
  const int ax = normalize_axis(axis, x.value().rank());
  const Shape& s = x.shape();
  const int64_t ch = s[ax];
  if (gain.value().numel() != ch || offset.value().numel() != ch)
    throw ShapeError("layer_norm affine parameters must have length " + std::to_string(ch));
  const int64_t inner = row_major_strides(s)[ax];
  const int64_t outer = x.value().numel() / (ch * inner);

  Tensor<T> value(s), x_hat(s), inv_std({outer, inner});
  {
    const T* px = x.value().data().data();
    const T* pg = gain.value().data().data();
    const T* po = offset.value().data().data();
    T* py = value.mutable_data().data();
    T* ph = x_hat.mutable_data().data();
    T* pi = inv_std.mutable_data().data();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < inner; ++i) {
        const int64_t base = o * ch * inner + i;
        T m = 0;
        for (int64_t c = 0; c < ch; ++c) m += px[base + c * inner];
        m /= static_cast<T>(ch);
        T v = 0;
        for (int64_t c = 0; c < ch; ++c) {
          T d = px[base + c * inner] - m;
          v += d * d;
        }
        v /= static_cast<T>(ch);
        const T inv = T(1) / std::sqrt(v + eps);
        pi[o * inner + i] = inv;
        for (int64_t c = 0; c < ch; ++c) {
          const int64_t k = base + c * inner;
          ph[k] = (px[k] - m) * inv;
          py[k] = ph[k] * pg[c] + po[c];
        }
      }
  }

  Tensor<T> gain_v = gain.value();
  return Var<T>::make_op(
      std::move(value), {x, gain, offset},
      [x, gain, offset, x_hat, inv_std, gain_v, ax, ch, inner, outer](typename Var<T>::Node& self) {
        const T* pg = self.grad.data().data();
        const T* ph = x_hat.data().data();
        const T* pi = inv_std.data().data();
        const T* pgain = gain_v.data().data();
        if (x.requires_grad()) {
          Tensor<T> dx(x_hat.shape());
          T* pd = dx.mutable_data().data();
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < inner; ++i) {
              const int64_t base = o * ch * inner + i;
              T mean_gy = 0, mean_gyh = 0;
              for (int64_t c = 0; c < ch; ++c) {
                const int64_t k = base + c * inner;
                const T gy = pg[k] * pgain[c];
                mean_gy += gy;
                mean_gyh += gy * ph[k];
              }
              mean_gy /= static_cast<T>(ch);
              mean_gyh /= static_cast<T>(ch);
              const T inv = pi[o * inner + i];
              for (int64_t c = 0; c < ch; ++c) {
                const int64_t k = base + c * inner;
                const T gy = pg[k] * pgain[c];
                pd[k] = (gy - mean_gy - ph[k] * mean_gyh) * inv;
              }
            }
          x.accumulate_grad(dx);
        }
        if (gain.requires_grad()) {
          Tensor<T> dg({ch});
          T* pd = dg.mutable_data().data();
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < inner; ++i) {
              const int64_t base = o * ch * inner + i;
              for (int64_t c = 0; c < ch; ++c) pd[c] += pg[base + c * inner] * ph[base + c * inner];
            }
          gain.accumulate_grad(dg.reshape(gain.shape()));
        }
        if (offset.requires_grad()) {
          Tensor<T> doff({ch});
          T* pd = doff.mutable_data().data();
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < inner; ++i) {
              const int64_t base = o * ch * inner + i;
              for (int64_t c = 0; c < ch; ++c) pd[c] += pg[base + c * inner];
            }
          offset.accumulate_grad(doff.reshape(offset.shape()));
        }
      });
}

// Operator sugar.
template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return add(a, b);
}
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  return sub(a, b);
}
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
  return mul(a, b);
}
template <typename T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) {
  return div(a, b);
}
template <typename T>
Var<T> operator+(const Var<T>& a, T s) {
  return add_scalar(a, s);
}
template <typename T>
Var<T> operator*(const Var<T>& a, T s) {
  return mul_scalar(a, s);
}
template <typename T>
Var<T> operator*(T s, const Var<T>& a) {
  return mul_scalar(a, s);
}

}  // namespace factorizer
