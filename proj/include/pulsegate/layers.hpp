// Copyright 2026 The PulseGate Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Batched forward/backward kernels for the fixed layer set. All activations
// are row-major with a leading batch axis; 1-D feature maps are [N, C, L].

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "pulsegate/tensor.hpp"

namespace pulsegate::kernels {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using CMapVec = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

struct Conv1dGeom {
  std::size_t batch, in_ch, length, out_ch, kernel, pad, out_len;
};

// cols[(c*K + k), t] = x[c, t + k - pad]
template <typename T>
void im2col(const T* x, const Conv1dGeom& g, T* cols) {
  const auto L = static_cast<std::ptrdiff_t>(g.length);
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    const T* xc = x + c * g.length;
    for (std::size_t k = 0; k < g.kernel; ++k) {
      T* row = cols + (c * g.kernel + k) * g.out_len;
      const auto shift = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(g.pad);
      for (std::size_t t = 0; t < g.out_len; ++t) {
        const auto src = static_cast<std::ptrdiff_t>(t) + shift;
        row[t] = (src >= 0 && src < L) ? xc[src] : T(0);
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const Conv1dGeom& g, T* dx) {
  const auto L = static_cast<std::ptrdiff_t>(g.length);
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    T* dxc = dx + c * g.length;
    for (std::size_t k = 0; k < g.kernel; ++k) {
      const T* row = cols + (c * g.kernel + k) * g.out_len;
      const auto shift = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(g.pad);
      for (std::size_t t = 0; t < g.out_len; ++t) {
        const auto src = static_cast<std::ptrdiff_t>(t) + shift;
        if (src >= 0 && src < L) dxc[src] += row[t];
      }
    }
  }
}

template <typename T>
void conv1d_forward(const T* x, const T* w, const T* b, const Conv1dGeom& g, T* y) {
  const std::size_t ck = g.in_ch * g.kernel;
  AlignedVector<T> cols(ck * g.out_len);
  CMapMat<T> W(w, g.out_ch, ck);
  CMapVec<T> bias(b, g.out_ch);
  for (std::size_t n = 0; n < g.batch; ++n) {
    im2col(x + n * g.in_ch * g.length, g, cols.data());
    CMapMat<T> C(cols.data(), ck, g.out_len);
    MapMat<T> Y(y + n * g.out_ch * g.out_len, g.out_ch, g.out_len);
    Y.noalias() = W * C;
    Y.colwise() += bias;
  }
}

template <typename T>
void conv1d_backward(const T* x, const T* w, const T* dy, const Conv1dGeom& g, T* dx, T* dw,
                     T* db) {
  const std::size_t ck = g.in_ch * g.kernel;
  AlignedVector<T> cols(ck * g.out_len);
  AlignedVector<T> dcols(ck * g.out_len);
  CMapMat<T> W(w, g.out_ch, ck);
  MapMat<T> dW(dw, g.out_ch, ck);
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> dB(db, g.out_ch);
  for (std::size_t n = 0; n < g.batch; ++n) {
    im2col(x + n * g.in_ch * g.length, g, cols.data());
    CMapMat<T> C(cols.data(), ck, g.out_len);
    CMapMat<T> dY(dy + n * g.out_ch * g.out_len, g.out_ch, g.out_len);
    dW.noalias() += dY * C.transpose();
    dB += dY.rowwise().sum();
    MapMat<T> dC(dcols.data(), ck, g.out_len);
    dC.noalias() = W.transpose() * dY;
    col2im_add(dcols.data(), g, dx + n * g.in_ch * g.length);
  }
}

// y[N, out] = x[N, in] * W^T + b with W stored [out, in].
template <typename T>
void dense_forward(const T* x, const T* w, const T* b, std::size_t batch, std::size_t in,
                   std::size_t out, T* y) {
  CMapMat<T> X(x, batch, in);
  CMapMat<T> W(w, out, in);
  MapMat<T> Y(y, batch, out);
  Y.noalias() = X * W.transpose();
  Y.rowwise() += CMapVec<T>(b, out).transpose();
}

template <typename T>
void dense_backward(const T* x, const T* w, const T* dy, std::size_t batch, std::size_t in,
                    std::size_t out, T* dx, T* dw, T* db) {
  CMapMat<T> X(x, batch, in);
  CMapMat<T> W(w, out, in);
  CMapMat<T> dY(dy, batch, out);
  MapMat<T>(dw, out, in).noalias() += dY.transpose() * X;
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(db, out) += dY.colwise().sum().transpose();
  MapMat<T>(dx, batch, in).noalias() += dY * W;
}

// Non-overlapping max pool, stride == window. `arg` receives the flat source
// index of every output element.
template <typename T>
void maxpool_forward(const T* x, std::size_t rows, std::size_t length, std::size_t window,
                     std::size_t out_stride, std::size_t out_offset, T* y, std::uint32_t* arg) {
  const std::size_t out_len = length / window;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * length;
    for (std::size_t j = 0; j < out_len; ++j) {
      std::size_t best = j * window;
      for (std::size_t i = best + 1; i < (j + 1) * window; ++i)
        if (xr[i] > xr[best]) best = i;
      const std::size_t o = r * out_stride + out_offset + j;
      y[o] = xr[best];
      arg[o] = static_cast<std::uint32_t>(r * length + best);
    }
  }
}

template <typename T>
void batchnorm_train_forward(const T* x, std::size_t batch, std::size_t ch, std::size_t inner,
                             const T* gamma, const T* beta, T eps, T* y, T* xhat, T* mean,
                             T* var, T* inv_std) {
  const T m = static_cast<T>(batch * inner);
  for (std::size_t c = 0; c < ch; ++c) {
    // two-pass in double keeps the batch statistics accurate at 32-bit
    double s = 0.0;
    for (std::size_t n = 0; n < batch; ++n) {
      const T* p = x + (n * ch + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) s += p[i];
    }
    const double mu = s / static_cast<double>(m);
    double ss = 0.0;
    for (std::size_t n = 0; n < batch; ++n) {
      const T* p = x + (n * ch + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) ss += (p[i] - mu) * (p[i] - mu);
    }
    const double v = ss / static_cast<double>(m);
    mean[c] = static_cast<T>(mu);
    var[c] = static_cast<T>(v);
    inv_std[c] = static_cast<T>(1.0 / std::sqrt(v + static_cast<double>(eps)));
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * ch + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const T h = static_cast<T>((x[off + i] - mu) * static_cast<double>(inv_std[c]));
        xhat[off + i] = h;
        y[off + i] = gamma[c] * h + beta[c];
      }
    }
  }
}

template <typename T>
void batchnorm_train_backward(const T* dy, const T* xhat, std::size_t batch, std::size_t ch,
                              std::size_t inner, const T* gamma, const T* inv_std, T* dx,
                              T* dgamma, T* dbeta) {
  const double m = static_cast<double>(batch * inner);
  for (std::size_t c = 0; c < ch; ++c) {
    double sdy = 0.0, sdyx = 0.0;
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * ch + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        sdy += dy[off + i];
        sdyx += static_cast<double>(dy[off + i]) * xhat[off + i];
      }
    }
    dgamma[c] += static_cast<T>(sdyx);
    dbeta[c] += static_cast<T>(sdy);
    const double k = static_cast<double>(gamma[c]) * inv_std[c] / m;
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * ch + c) * inner;
      for (std::size_t i = 0; i < inner; ++i)
        dx[off + i] += static_cast<T>(k * (m * dy[off + i] - sdy - xhat[off + i] * sdyx));
    }
  }
}

template <typename T>
T stable_sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
void softmax_rows(const T* x, std::size_t rows, std::size_t cols, T* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    T mx = xr[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    T s = 0;
    for (std::size_t j = 0; j < cols; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) yr[j] /= s;
  }
}

}  // namespace pulsegate::kernels
