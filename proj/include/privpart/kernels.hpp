#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <limits>
#include <vector>

#include "privpart/tensor.hpp"

// Raw forward/backward kernels. The tape ops and the tape-free eval path both
// call these, so a value computed either way is bitwise identical.

namespace privpart {
namespace kernels {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

// C[m x n] = A[m x k] * B[k x n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  const size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> c({m, n});
  EMap<T>(c.data(), m, n).noalias() =
      ECMap<T>(a.data(), m, k) * ECMap<T>(b.data(), k, n);
  return c;
}

// dA = G * B^T
template <typename T>
Tensor<T> matmul_grad_a(const Tensor<T>& g, const Tensor<T>& b) {
  const size_t m = g.dim(0), n = g.dim(1), k = b.dim(0);
  Tensor<T> da({m, k});
  EMap<T>(da.data(), m, k).noalias() =
      ECMap<T>(g.data(), m, n) * ECMap<T>(b.data(), k, n).transpose();
  return da;
}

// dB = A^T * G
template <typename T>
Tensor<T> matmul_grad_b(const Tensor<T>& a, const Tensor<T>& g) {
  const size_t m = a.dim(0), k = a.dim(1), n = g.dim(1);
  Tensor<T> db({k, n});
  EMap<T>(db.data(), k, n).noalias() =
      ECMap<T>(a.data(), m, k).transpose() * ECMap<T>(g.data(), m, n);
  return db;
}

struct Conv2dGeom {
  size_t batch, in_ch, in_h, in_w;
  size_t out_ch, kernel, stride, pad;
  size_t out_h, out_w;
};

inline size_t conv_out_dim(size_t in, size_t kernel, size_t stride,
                           size_t pad) {
  const size_t padded = in + 2 * pad;
  if (padded < kernel)
    throw ShapeError("conv: input " + std::to_string(in) + " smaller than kernel " +
                     std::to_string(kernel) + " with padding " + std::to_string(pad));
  return (padded - kernel) / stride + 1;
}

template <typename T>
Conv2dGeom conv2d_geom(const Tensor<T>& x, const Tensor<T>& w, size_t stride,
                       size_t pad) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d: expected NCHW input and OIKK weight, got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (x.dim(1) != w.dim(1))
    throw ShapeError("conv2d: input channels " + std::to_string(x.dim(1)) +
                     " != weight channels " + std::to_string(w.dim(1)));
  if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d: kernel must be square");
  Conv2dGeom g;
  g.batch = x.dim(0);
  g.in_ch = x.dim(1);
  g.in_h = x.dim(2);
  g.in_w = x.dim(3);
  g.out_ch = w.dim(0);
  g.kernel = w.dim(2);
  g.stride = stride;
  g.pad = pad;
  g.out_h = conv_out_dim(g.in_h, g.kernel, stride, pad);
  g.out_w = conv_out_dim(g.in_w, g.kernel, stride, pad);
  return g;
}

// Zero-padded cross-correlation, x:[N,Ci,H,W] w:[Co,Ci,K,K] -> [N,Co,Ho,Wo].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, size_t stride,
                 size_t pad) {
  const Conv2dGeom g = conv2d_geom(x, w, stride, pad);
  Tensor<T> y({g.batch, g.out_ch, g.out_h, g.out_w});
  const T* xd = x.data();
  const T* wd = w.data();
  T* yd = y.data();
  for (size_t n = 0; n < g.batch; ++n)
    for (size_t co = 0; co < g.out_ch; ++co)
      for (size_t oh = 0; oh < g.out_h; ++oh)
        for (size_t ow = 0; ow < g.out_w; ++ow) {
          T acc{};
          for (size_t ci = 0; ci < g.in_ch; ++ci)
            for (size_t u = 0; u < g.kernel; ++u) {
              const ptrdiff_t ih =
                  static_cast<ptrdiff_t>(oh * g.stride + u) - static_cast<ptrdiff_t>(g.pad);
              if (ih < 0 || ih >= static_cast<ptrdiff_t>(g.in_h)) continue;
              for (size_t v = 0; v < g.kernel; ++v) {
                const ptrdiff_t iw =
                    static_cast<ptrdiff_t>(ow * g.stride + v) - static_cast<ptrdiff_t>(g.pad);
                if (iw < 0 || iw >= static_cast<ptrdiff_t>(g.in_w)) continue;
                acc += xd[((n * g.in_ch + ci) * g.in_h + ih) * g.in_w + iw] *
                       wd[((co * g.in_ch + ci) * g.kernel + u) * g.kernel + v];
              }
            }
          yd[((n * g.out_ch + co) * g.out_h + oh) * g.out_w + ow] = acc;
        }
  return y;
}

// Gradient of conv2d w.r.t. its input; also the forward map of deconv2d.
// grad:[N,Co,Ho,Wo], w:[Co,Ci,K,K] -> [N,Ci,H,W]
template <typename T>
Tensor<T> conv2d_grad_input(const Tensor<T>& grad, const Tensor<T>& w,
                            size_t stride, size_t pad, size_t in_h,
                            size_t in_w) {
  const size_t batch = grad.dim(0), out_ch = grad.dim(1);
  const size_t out_h = grad.dim(2), out_w = grad.dim(3);
  const size_t in_ch = w.dim(1), kernel = w.dim(2);
  if (w.dim(0) != out_ch)
    throw ShapeError("conv2d_grad_input: channel mismatch");
  Tensor<T> dx({batch, in_ch, in_h, in_w});
  const T* gd = grad.data();
  const T* wd = w.data();
  T* xd = dx.data();
  for (size_t n = 0; n < batch; ++n)
    for (size_t co = 0; co < out_ch; ++co)
      for (size_t oh = 0; oh < out_h; ++oh)
        for (size_t ow = 0; ow < out_w; ++ow) {
          const T gval = gd[((n * out_ch + co) * out_h + oh) * out_w + ow];
          for (size_t ci = 0; ci < in_ch; ++ci)
            for (size_t u = 0; u < kernel; ++u) {
              const ptrdiff_t ih =
                  static_cast<ptrdiff_t>(oh * stride + u) - static_cast<ptrdiff_t>(pad);
              if (ih < 0 || ih >= static_cast<ptrdiff_t>(in_h)) continue;
              for (size_t v = 0; v < kernel; ++v) {
                const ptrdiff_t iw =
                    static_cast<ptrdiff_t>(ow * stride + v) - static_cast<ptrdiff_t>(pad);
                if (iw < 0 || iw >= static_cast<ptrdiff_t>(in_w)) continue;
                xd[((n * in_ch + ci) * in_h + ih) * in_w + iw] +=
                    gval * wd[((co * in_ch + ci) * kernel + u) * kernel + v];
              }
            }
        }
  return dx;
}

// Gradient of conv2d w.r.t. its weight.
// x:[N,Ci,H,W], grad:[N,Co,Ho,Wo] -> [Co,Ci,K,K]
template <typename T>
Tensor<T> conv2d_grad_weight(const Tensor<T>& x, const Tensor<T>& grad,
                             size_t stride, size_t pad, size_t kernel) {
  const size_t batch = x.dim(0), in_ch = x.dim(1), in_h = x.dim(2),
               in_w = x.dim(3);
  const size_t out_ch = grad.dim(1), out_h = grad.dim(2), out_w = grad.dim(3);
  Tensor<T> dw({out_ch, in_ch, kernel, kernel});
  const T* xd = x.data();
  const T* gd = grad.data();
  T* wd = dw.data();
  for (size_t n = 0; n < batch; ++n)
    for (size_t co = 0; co < out_ch; ++co)
      for (size_t oh = 0; oh < out_h; ++oh)
        for (size_t ow = 0; ow < out_w; ++ow) {
          const T gval = gd[((n * out_ch + co) * out_h + oh) * out_w + ow];
          for (size_t ci = 0; ci < in_ch; ++ci)
            for (size_t u = 0; u < kernel; ++u) {
              const ptrdiff_t ih =
                  static_cast<ptrdiff_t>(oh * stride + u) - static_cast<ptrdiff_t>(pad);
              if (ih < 0 || ih >= static_cast<ptrdiff_t>(in_h)) continue;
              for (size_t v = 0; v < kernel; ++v) {
                const ptrdiff_t iw =
                    static_cast<ptrdiff_t>(ow * stride + v) - static_cast<ptrdiff_t>(pad);
                if (iw < 0 || iw >= static_cast<ptrdiff_t>(in_w)) continue;
                wd[((co * in_ch + ci) * kernel + u) * kernel + v] +=
                    gval * xd[((n * in_ch + ci) * in_h + ih) * in_w + iw];
              }
            }
        }
  return dw;
}

// Single-channel 1-D correlation over [N,L] with kernel [K].
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, size_t stride,
                 size_t pad) {
  if (x.rank() != 2 || w.rank() != 1)
    throw ShapeError("conv1d: expected [N,L] input and [K] weight");
  const size_t batch = x.dim(0), len = x.dim(1), kernel = w.dim(0);
  const size_t out_len = conv_out_dim(len, kernel, stride, pad);
  Tensor<T> y({batch, out_len});
  for (size_t n = 0; n < batch; ++n)
    for (size_t o = 0; o < out_len; ++o) {
      T acc{};
      for (size_t u = 0; u < kernel; ++u) {
        const ptrdiff_t i =
            static_cast<ptrdiff_t>(o * stride + u) - static_cast<ptrdiff_t>(pad);
        if (i < 0 || i >= static_cast<ptrdiff_t>(len)) continue;
        acc += x[n * len + i] * w[u];
      }
      y[n * out_len + o] = acc;
    }
  return y;
}

template <typename T>
Tensor<T> conv1d_grad_input(const Tensor<T>& grad, const Tensor<T>& w,
                            size_t stride, size_t pad, size_t len) {
  const size_t batch = grad.dim(0), out_len = grad.dim(1), kernel = w.dim(0);
  Tensor<T> dx({batch, len});
  for (size_t n = 0; n < batch; ++n)
    for (size_t o = 0; o < out_len; ++o) {
      const T gval = grad[n * out_len + o];
      for (size_t u = 0; u < kernel; ++u) {
        const ptrdiff_t i =
            static_cast<ptrdiff_t>(o * stride + u) - static_cast<ptrdiff_t>(pad);
        if (i < 0 || i >= static_cast<ptrdiff_t>(len)) continue;
        dx[n * len + i] += gval * w[u];
      }
    }
  return dx;
}

template <typename T>
Tensor<T> conv1d_grad_weight(const Tensor<T>& x, const Tensor<T>& grad,
                             size_t stride, size_t pad, size_t kernel) {
  const size_t batch = x.dim(0), len = x.dim(1), out_len = grad.dim(1);
  Tensor<T> dw({kernel});
  for (size_t n = 0; n < batch; ++n)
    for (size_t o = 0; o < out_len; ++o) {
      const T gval = grad[n * out_len + o];
      for (size_t u = 0; u < kernel; ++u) {
        const ptrdiff_t i =
            static_cast<ptrdiff_t>(o * stride + u) - static_cast<ptrdiff_t>(pad);
        if (i < 0 || i >= static_cast<ptrdiff_t>(len)) continue;
        dw[u] += gval * x[n * len + i];
      }
    }
  return dw;
}

// Max pooling; argmax is the first maximum in row-major window order, and
// indices are recorded so the backward pass routes gradient there exactly.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, size_t kernel, size_t stride,
                    std::vector<uint32_t>* argmax) {
  if (x.rank() != 4) throw ShapeError("maxpool2d: expected NCHW input");
  const size_t batch = x.dim(0), ch = x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
  if (in_h < kernel || in_w < kernel)
    throw ShapeError("maxpool2d: input " + shape_str(x.shape()) +
                     " smaller than kernel " + std::to_string(kernel));
  const size_t out_h = (in_h - kernel) / stride + 1;
  const size_t out_w = (in_w - kernel) / stride + 1;
  Tensor<T> y({batch, ch, out_h, out_w});
  if (argmax) argmax->assign(y.size(), 0);
  const T* xd = x.data();
  T* yd = y.data();
  size_t oi = 0;
  for (size_t n = 0; n < batch; ++n)
    for (size_t c = 0; c < ch; ++c)
      for (size_t oh = 0; oh < out_h; ++oh)
        for (size_t ow = 0; ow < out_w; ++ow, ++oi) {
          T best = -std::numeric_limits<T>::infinity();
          size_t best_idx = 0;
          for (size_t u = 0; u < kernel; ++u)
            for (size_t v = 0; v < kernel; ++v) {
              const size_t ih = oh * stride + u, iw = ow * stride + v;
              const size_t idx = ((n * ch + c) * in_h + ih) * in_w + iw;
              if (xd[idx] > best) {
                best = xd[idx];
                best_idx = idx;
              }
            }
          yd[oi] = best;
          if (argmax) (*argmax)[oi] = static_cast<uint32_t>(best_idx);
        }
  return y;
}

}  // namespace kernels
}  // namespace privpart
