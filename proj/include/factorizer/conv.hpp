#pragma once

#include <array>

#include "factorizer/ops.hpp"

namespace factorizer {

using Extent3 = std::array<int64_t, 3>;

namespace detail {

struct ConvGeom {
  int64_t ci = 0, co = 0;
  Extent3 in{}, out{}, k{}, s{}, p{};

  int64_t rows() const { return ci * k[0] * k[1] * k[2]; }
  int64_t cols() const { return out[0] * out[1] * out[2]; }
  int64_t in_count() const { return in[0] * in[1] * in[2]; }
};

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t s, int64_t p) {
  if (in + 2 * p < k)
    throw ShapeError("convolution kernel " + std::to_string(k) + " exceeds padded extent " +
                     std::to_string(in + 2 * p));
  return (in + 2 * p - k) / s + 1;
}

// Gather patches of one (Ci, H, W, D) image into a (Ci*k^3, N_out) matrix.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const int64_t hw = g.in[1] * g.in[2];
  int64_t row = 0;
  for (int64_t c = 0; c < g.ci; ++c)
    for (int64_t i = 0; i < g.k[0]; ++i)
      for (int64_t j = 0; j < g.k[1]; ++j)
        for (int64_t l = 0; l < g.k[2]; ++l, ++row) {
          T* out_row = col + row * g.cols();
          int64_t n = 0;
          for (int64_t oh = 0; oh < g.out[0]; ++oh) {
            const int64_t ih = oh * g.s[0] - g.p[0] + i;
            for (int64_t ow = 0; ow < g.out[1]; ++ow) {
              const int64_t iw = ow * g.s[1] - g.p[1] + j;
              const bool hw_ok =
                  ih >= 0 && ih < g.in[0] && iw >= 0 && iw < g.in[1];
              const T* base = x + c * g.in_count() + ih * hw + iw * g.in[2];
              for (int64_t od = 0; od < g.out[2]; ++od, ++n) {
                const int64_t id = od * g.s[2] - g.p[2] + l;
                out_row[n] = (hw_ok && id >= 0 && id < g.in[2]) ? base[id] : T(0);
              }
            }
          }
        }
}

// Adjoint of im2col: scatter-add a (Ci*k^3, N_out) matrix into image space.
template <typename T>
void col2im(const T* col, const ConvGeom& g, T* x) {
  const int64_t hw = g.in[1] * g.in[2];
  int64_t row = 0;
  for (int64_t c = 0; c < g.ci; ++c)
    for (int64_t i = 0; i < g.k[0]; ++i)
      for (int64_t j = 0; j < g.k[1]; ++j)
        for (int64_t l = 0; l < g.k[2]; ++l, ++row) {
          const T* in_row = col + row * g.cols();
          int64_t n = 0;
          for (int64_t oh = 0; oh < g.out[0]; ++oh) {
            const int64_t ih = oh * g.s[0] - g.p[0] + i;
            for (int64_t ow = 0; ow < g.out[1]; ++ow) {
              const int64_t iw = ow * g.s[1] - g.p[1] + j;
              const bool hw_ok =
                  ih >= 0 && ih < g.in[0] && iw >= 0 && iw < g.in[1];
              T* base = x + c * g.in_count() + ih * hw + iw * g.in[2];
              for (int64_t od = 0; od < g.out[2]; ++od, ++n) {
                const int64_t id = od * g.s[2] - g.p[2] + l;
                if (hw_ok && id >= 0 && id < g.in[2]) base[id] += in_row[n];
              }
            }
          }
        }
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline ConvGeom make_conv_geom(const Shape& x_shape, const Shape& w_shape, Extent3 stride,
                               Extent3 pad, const char* op) {
  if (x_shape.size() != 5 || w_shape.size() != 5)
    throw ShapeError(std::string(op) + " expects 5-D input and weight, got " +
                     shape_str(x_shape) + " and " + shape_str(w_shape));
  ConvGeom g;
  g.co = w_shape[0];
  g.ci = w_shape[1];
  g.k = {w_shape[2], w_shape[3], w_shape[4]};
  g.s = stride;
  g.p = pad;
  return g;
}

}  // namespace detail

/// Direct (cross-correlation) 3-D convolution.
/// x: (B, Cin, H, W, D), weight: (Cout, Cin, kh, kw, kd), bias: (Cout) or
/// undefined. Output extent per axis: floor((in + 2*pad - kernel)/stride) + 1.
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, Extent3 stride,
              Extent3 pad) {
  detail::ConvGeom g = detail::make_conv_geom(x.shape(), weight.shape(), stride, pad, "conv3d");
  if (x.shape()[1] != g.ci)
    throw ShapeError("conv3d channel mismatch: input has " + std::to_string(x.shape()[1]) +
                     " channels, weight expects " + std::to_string(g.ci));
  if (bias.defined() && bias.value().numel() != g.co)
    throw ShapeError("conv3d bias length != output channels");
  g.in = {x.shape()[2], x.shape()[3], x.shape()[4]};
  for (int d = 0; d < 3; ++d) g.out[d] = detail::conv_out_extent(g.in[d], g.k[d], g.s[d], g.p[d]);

  const int64_t batch = x.shape()[0];
  const bool pointwise = g.rows() == g.ci && g.s == Extent3{1, 1, 1} && g.p == Extent3{0, 0, 0} &&
                         g.in == g.out;
  Tensor<T> out({batch, g.co, g.out[0], g.out[1], g.out[2]});
  {
    using Mat = detail::RowMat<T>;
    Eigen::Map<const Mat> w2(weight.value().data().data(), g.co, g.rows());
    Tensor<T> col_buf = pointwise ? Tensor<T>() : Tensor<T>({g.rows(), g.cols()});
    for (int64_t b = 0; b < batch; ++b) {
      const T* px = x.value().data().data() + b * g.ci * g.in_count();
      const T* pcol;
      if (pointwise) {
        pcol = px;
      } else {
        detail::im2col(px, g, col_buf.mutable_data().data());
        pcol = col_buf.data().data();
      }
      Eigen::Map<const Mat> cm(pcol, g.rows(), g.cols());
      Eigen::Map<Mat> om(out.mutable_data().data() + b * g.co * g.cols(), g.co, g.cols());
      om.noalias() = w2 * cm;
      if (bias.defined()) om.colwise() += Eigen::Map<const Eigen::Vector<T, Eigen::Dynamic>>(
          bias.value().data().data(), g.co);
    }
  }

  Tensor<T> xv = x.value(), wv = weight.value();
  std::vector<Var<T>> parents = {x, weight};
  if (bias.defined()) parents.push_back(bias);
  return Var<T>::make_op(
      std::move(out), std::move(parents),
      [x, weight, bias, xv, wv, g, batch, pointwise](typename Var<T>::Node& self) {
        using Mat = detail::RowMat<T>;
        const T* pg = self.grad.data().data();
        Tensor<T> col_buf = pointwise ? Tensor<T>() : Tensor<T>({g.rows(), g.cols()});
        Tensor<T> dx = x.requires_grad() ? Tensor<T>(xv.shape()) : Tensor<T>();
        Tensor<T> dw = weight.requires_grad() ? Tensor<T>(wv.shape()) : Tensor<T>();
        Eigen::Map<const Mat> w2(wv.data().data(), g.co, g.rows());
        for (int64_t b = 0; b < batch; ++b) {
          Eigen::Map<const Mat> gm(pg + b * g.co * g.cols(), g.co, g.cols());
          if (weight.requires_grad()) {
            const T* px = xv.data().data() + b * g.ci * g.in_count();
            const T* pcol;
            if (pointwise) {
              pcol = px;
            } else {
              detail::im2col(px, g, col_buf.mutable_data().data());
              pcol = col_buf.data().data();
            }
            Eigen::Map<const Mat> cm(pcol, g.rows(), g.cols());
            Eigen::Map<Mat> dwm(dw.mutable_data().data(), g.co, g.rows());
            dwm.noalias() += gm * cm.transpose();
          }
          if (x.requires_grad()) {
            T* pdx = dx.mutable_data().data() + b * g.ci * g.in_count();
            if (pointwise) {
              Eigen::Map<Mat> dxm(pdx, g.rows(), g.cols());
              dxm.noalias() = w2.transpose() * gm;
            } else {
              Tensor<T> dcol({g.rows(), g.cols()});
              Eigen::Map<Mat> dcm(dcol.mutable_data().data(), g.rows(), g.cols());
              dcm.noalias() = w2.transpose() * gm;
              detail::col2im(dcol.data().data(), g, pdx);
            }
          }
        }
        if (x.requires_grad()) x.accumulate_grad(dx);
        if (weight.requires_grad()) weight.accumulate_grad(dw);
        if (bias.defined() && bias.requires_grad()) {
          Tensor<T> db({g.co});
          T* pb = db.mutable_data().data();
          for (int64_t b = 0; b < batch; ++b)
            for (int64_t c = 0; c < g.co; ++c) {
              const T* row = pg + (b * g.co + c) * g.cols();
              T acc = 0;
              for (int64_t n = 0; n < g.cols(); ++n) acc += row[n];
              pb[c] += acc;
            }
          bias.accumulate_grad(db.reshape(bias.shape()));
        }
      });
}

/// Exact adjoint of conv3d with the same weight tensor, plus a bias on the
/// output (Cin-side) channels. x: (B, Cout, h, w, d); output spatial extent
/// per axis: (in - 1)*stride - 2*pad + kernel.
template <typename T>
Var<T> conv3d_transposed(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                         Extent3 stride, Extent3 pad) {
  detail::ConvGeom g =
      detail::make_conv_geom(x.shape(), weight.shape(), stride, pad, "conv3d_transposed");
  if (x.shape()[1] != g.co)
    throw ShapeError("conv3d_transposed channel mismatch: input has " +
                     std::to_string(x.shape()[1]) + " channels, weight expects " +
                     std::to_string(g.co));
  if (bias.defined() && bias.value().numel() != g.ci)
    throw ShapeError("conv3d_transposed bias length != output channels");
  g.out = {x.shape()[2], x.shape()[3], x.shape()[4]};
  for (int d = 0; d < 3; ++d) {
    g.in[d] = (g.out[d] - 1) * g.s[d] - 2 * g.p[d] + g.k[d];
    if (g.in[d] < 1)
      throw ShapeError("conv3d_transposed output extent < 1 on axis " + std::to_string(d));
  }

  const int64_t batch = x.shape()[0];
  Tensor<T> out({batch, g.ci, g.in[0], g.in[1], g.in[2]});
  {
    using Mat = detail::RowMat<T>;
    Eigen::Map<const Mat> w2(weight.value().data().data(), g.co, g.rows());
    Tensor<T> col_buf({g.rows(), g.cols()});
    for (int64_t b = 0; b < batch; ++b) {
      Eigen::Map<const Mat> xm(x.value().data().data() + b * g.co * g.cols(), g.co, g.cols());
      Eigen::Map<Mat> cm(col_buf.mutable_data().data(), g.rows(), g.cols());
      cm.noalias() = w2.transpose() * xm;
      T* py = out.mutable_data().data() + b * g.ci * g.in_count();
      detail::col2im(col_buf.data().data(), g, py);
      if (bias.defined()) {
        const T* pb = bias.value().data().data();
        for (int64_t c = 0; c < g.ci; ++c) {
          T* chan = py + c * g.in_count();
          for (int64_t n = 0; n < g.in_count(); ++n) chan[n] += pb[c];
        }
      }
    }
  }

  Tensor<T> xv = x.value(), wv = weight.value();
  std::vector<Var<T>> parents = {x, weight};
  if (bias.defined()) parents.push_back(bias);
  return Var<T>::make_op(
      std::move(out), std::move(parents),
      [x, weight, bias, xv, wv, g, batch](typename Var<T>::Node& self) {
        using Mat = detail::RowMat<T>;
        const T* pg = self.grad.data().data();
        Tensor<T> col_buf({g.rows(), g.cols()});
        Tensor<T> dx = x.requires_grad() ? Tensor<T>(xv.shape()) : Tensor<T>();
        Tensor<T> dw = weight.requires_grad() ? Tensor<T>(wv.shape()) : Tensor<T>();
        Eigen::Map<const Mat> w2(wv.data().data(), g.co, g.rows());
        for (int64_t b = 0; b < batch; ++b) {
          detail::im2col(pg + b * g.ci * g.in_count(), g, col_buf.mutable_data().data());
          Eigen::Map<const Mat> cm(col_buf.data().data(), g.rows(), g.cols());
          if (x.requires_grad()) {
            Eigen::Map<Mat> dxm(dx.mutable_data().data() + b * g.co * g.cols(), g.co, g.cols());
            dxm.noalias() = w2 * cm;
          }
          if (weight.requires_grad()) {
            Eigen::Map<const Mat> xm(xv.data().data() + b * g.co * g.cols(), g.co, g.cols());
            Eigen::Map<Mat> dwm(dw.mutable_data().data(), g.co, g.rows());
            dwm.noalias() += xm * cm.transpose();
          }
        }
        if (x.requires_grad()) x.accumulate_grad(dx);
        if (weight.requires_grad()) weight.accumulate_grad(dw);
        if (bias.defined() && bias.requires_grad()) {
          Tensor<T> db({g.ci});
          T* pb = db.mutable_data().data();
          for (int64_t b = 0; b < batch; ++b)
            for (int64_t c = 0; c < g.ci; ++c) {
              const T* chan = self.grad.data().data() + (b * g.ci + c) * g.in_count();
              T acc = 0;
              for (int64_t n = 0; n < g.in_count(); ++n) acc += chan[n];
              pb[c] += acc;
            }
          bias.accumulate_grad(db.reshape(bias.shape()));
        }
      });
}

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int64_t stride = 1,
              int64_t pad = 0) {
  return conv3d(x, weight, bias, Extent3{stride, stride, stride}, Extent3{pad, pad, pad});
}

template <typename T>
Var<T> conv3d_transposed(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                         int64_t stride = 2, int64_t pad = 0) {
  return conv3d_transposed(x, weight, bias, Extent3{stride, stride, stride},
                           Extent3{pad, pad, pad});
}

}  // namespace factorizer
