// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <cstring>

#include "wnet/tensor.hpp"

namespace wnet {

/// Geometry of a strided "same"-padded convolution between a large (input)
/// side and a small (output) side. Transposed convolution reuses it with
/// the roles of input and output swapped.
struct ConvGeometry {
  Index kernel = 5;
  Index stride = 2;
  Index in_h = 0, in_w = 0;
  Index out_h = 0, out_w = 0;
  Index pad_top = 0, pad_left = 0;

  friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;
};

/// out = ceil(in / stride); total zero padding max((out-1)*stride + k - in, 0),
/// split with the smaller half on the top/left.
inline ConvGeometry same_geometry(Index in_h, Index in_w, Index kernel, Index stride) {
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("kernel size must be odd and positive");
  if (stride < 1 || stride > 2) throw ConfigError("stride must be 1 or 2, got " + std::to_string(stride));
  ConvGeometry g;
  g.kernel = kernel;
  g.stride = stride;
  g.in_h = in_h;
  g.in_w = in_w;
  g.out_h = (in_h + stride - 1) / stride;
  g.out_w = (in_w + stride - 1) / stride;
  const Index pad_h = std::max<Index>((g.out_h - 1) * stride + kernel - in_h, 0);
  const Index pad_w = std::max<Index>((g.out_w - 1) * stride + kernel - in_w, 0);
  g.pad_top = pad_h / 2;
  g.pad_left = pad_w / 2;
  return g;
}

namespace kernels {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

/// Rows are output pixels (b, oh, ow); columns are (kh, kw, c) taps.
template <class T>
void im2col(const T* x, Index batch, const ConvGeometry& g, Index channels, T* col) {
  const Index k = g.kernel;
  const Index row_len = k * k * channels;
  for (Index b = 0; b < batch; ++b) {
    for (Index oh = 0; oh < g.out_h; ++oh) {
      for (Index ow = 0; ow < g.out_w; ++ow) {
        T* row = col + ((b * g.out_h + oh) * g.out_w + ow) * row_len;
        for (Index kh = 0; kh < k; ++kh) {
          const Index ih = oh * g.stride - g.pad_top + kh;
          T* dst_h = row + kh * k * channels;
          if (ih < 0 || ih >= g.in_h) {
            std::fill(dst_h, dst_h + k * channels, T(0));
            continue;
          }
          for (Index kw = 0; kw < k; ++kw) {
            const Index iw = ow * g.stride - g.pad_left + kw;
            T* dst = dst_h + kw * channels;
            if (iw < 0 || iw >= g.in_w) {
              std::fill(dst, dst + channels, T(0));
            } else {
              const T* src = x + ((b * g.in_h + ih) * g.in_w + iw) * channels;
              std::memcpy(dst, src, sizeof(T) * static_cast<std::size_t>(channels));
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-add taps back onto the large side.
template <class T>
void col2im(const T* col, Index batch, const ConvGeometry& g, Index channels, T* x) {
  const Index k = g.kernel;
  const Index row_len = k * k * channels;
  std::fill(x, x + batch * g.in_h * g.in_w * channels, T(0));
  for (Index b = 0; b < batch; ++b) {
    for (Index oh = 0; oh < g.out_h; ++oh) {
      for (Index ow = 0; ow < g.out_w; ++ow) {
        const T* row = col + ((b * g.out_h + oh) * g.out_w + ow) * row_len;
        for (Index kh = 0; kh < k; ++kh) {
          const Index ih = oh * g.stride - g.pad_top + kh;
          if (ih < 0 || ih >= g.in_h) continue;
          for (Index kw = 0; kw < k; ++kw) {
            const Index iw = ow * g.stride - g.pad_left + kw;
            if (iw < 0 || iw >= g.in_w) continue;
            const T* src = row + (kh * k + kw) * channels;
            T* dst = x + ((b * g.in_h + ih) * g.in_w + iw) * channels;
            for (Index c = 0; c < channels; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

inline bool is_pointwise(const ConvGeometry& g) { return g.kernel == 1 && g.stride == 1; }

/// small = conv(large, w); w is (k, k, c_large, c_small).
template <class T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& w, const ConvGeometry& g) {
  const Index batch = x.dim(0), cl = x.dim(3), cs = w.dim(3);
  const Index rows = batch * g.out_h * g.out_w, taps = g.kernel * g.kernel * cl;
  Tensor<T> y({batch, g.out_h, g.out_w, cs});
  ConstMapMat<T> wm(w.data(), taps, cs);
  MapMat<T> ym(y.data(), rows, cs);
  if (is_pointwise(g)) {
    ym.noalias() = ConstMapMat<T>(x.data(), rows, taps) * wm;
  } else {
    std::vector<T> col(static_cast<std::size_t>(rows * taps));
    im2col(x.data(), batch, g, cl, col.data());
    ym.noalias() = ConstMapMat<T>(col.data(), rows, taps) * wm;
  }
  return y;
}

/// large = conv^T(small, w).
template <class T>
Tensor<T> conv_transpose_forward(const Tensor<T>& s, const Tensor<T>& w, const ConvGeometry& g) {
  const Index batch = s.dim(0), cl = w.dim(2), cs = s.dim(3);
  const Index rows = batch * g.out_h * g.out_w, taps = g.kernel * g.kernel * cl;
  Tensor<T> x({batch, g.in_h, g.in_w, cl});
  ConstMapMat<T> wm(w.data(), taps, cs);
  ConstMapMat<T> sm(s.data(), rows, cs);
  if (is_pointwise(g)) {
    MapMat<T>(x.data(), rows, taps).noalias() = sm * wm.transpose();
  } else {
    std::vector<T> col(static_cast<std::size_t>(rows * taps));
    MapMat<T>(col.data(), rows, taps).noalias() = sm * wm.transpose();
    col2im(col.data(), batch, g, cl, x.data());
  }
  return x;
}

/// dW = im2col(large)^T * small.
template <class T>
Tensor<T> conv_weight_forward(const Tensor<T>& x, const Tensor<T>& s, const ConvGeometry& g) {
  const Index batch = x.dim(0), cl = x.dim(3), cs = s.dim(3);
  const Index rows = batch * g.out_h * g.out_w, taps = g.kernel * g.kernel * cl;
  Tensor<T> w({g.kernel, g.kernel, cl, cs});
  ConstMapMat<T> sm(s.data(), rows, cs);
  MapMat<T> wm(w.data(), taps, cs);
  if (is_pointwise(g)) {
    wm.noalias() = ConstMapMat<T>(x.data(), rows, taps).transpose() * sm;
  } else {
    std::vector<T> col(static_cast<std::size_t>(rows * taps));
    im2col(x.data(), batch, g, cl, col.data());
    wm.noalias() = ConstMapMat<T>(col.data(), rows, taps).transpose() * sm;
  }
  return w;
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta, bool tb) {
  const Index m = ta ? a.dim(1) : a.dim(0);
  const Index ka = ta ? a.dim(0) : a.dim(1);
  const Index kb = tb ? b.dim(1) : b.dim(0);
  const Index n = tb ? b.dim(0) : b.dim(1);
  if (ka != kb) {
    throw ShapeError("matmul inner extent mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Tensor<T> c({m, n});
  ConstMapMat<T> am(a.data(), a.dim(0), a.dim(1));
  ConstMapMat<T> bm(b.data(), b.dim(0), b.dim(1));
  MapMat<T> cm(c.data(), m, n);
  if (!ta && !tb) cm.noalias() = am * bm;
  else if (!ta && tb) cm.noalias() = am * bm.transpose();
  else if (ta && !tb) cm.noalias() = am.transpose() * bm;
  else cm.noalias() = am.transpose() * bm.transpose();
  return c;
}

}  // namespace kernels
}  // namespace wnet
