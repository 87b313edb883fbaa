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

#pragma once

#include <cmath>

#include "pulsegate/tensor.hpp"

namespace pulsegate {

enum class LossKind { categorical_crossentropy, binary_crossentropy, mse };

template <typename T>
struct LossResult {
  T value = T(0);
  Tensor<T> grad;  // d(value)/d(pred)
};

inline constexpr double kProbClip = 1e-7;

namespace detail {
template <typename T>
void check_loss_args(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape())
    throw Error("loss: prediction " + shape_str(pred.shape()) + " vs target " +
                shape_str(target.shape()));
  if (pred.empty()) throw Error("loss: empty prediction");
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (std::isnan(pred[i]) || std::isnan(target[i])) throw Error("loss: NaN in inputs");
}
}  // namespace detail

/// pred holds row-wise class probabilities [N, K]; summed over classes, mean
/// over the batch.
template <typename T>
LossResult<T> categorical_crossentropy(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::check_loss_args(pred, target);
  const std::size_t n = pred.dim(0);
  const T lo = T(kProbClip), hi = T(1) - T(kProbClip);
  LossResult<T> r{T(0), Tensor<T>(pred.shape(), T(0))};
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T p = pred[i];
    const T pc = std::clamp(p, lo, hi);
    acc -= static_cast<double>(target[i]) * std::log(static_cast<double>(pc));
    if (p > lo && p < hi) r.grad[i] = -target[i] / (pc * T(n));
  }
  r.value = static_cast<T>(acc / static_cast<double>(n));
  return r;
}

/// Element-wise binary cross-entropy averaged over every element.
template <typename T>
LossResult<T> binary_crossentropy(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::check_loss_args(pred, target);
  const T m = T(pred.size());
  const T lo = T(kProbClip), hi = T(1) - T(kProbClip);
  LossResult<T> r{T(0), Tensor<T>(pred.shape(), T(0))};
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T p = pred[i];
    const T pc = std::clamp(p, lo, hi);
    const T t = target[i];
    acc -= static_cast<double>(t) * std::log(static_cast<double>(pc)) +
           (1.0 - static_cast<double>(t)) * std::log(1.0 - static_cast<double>(pc));
    if (p > lo && p < hi) r.grad[i] = (pc - t) / (pc * (T(1) - pc) * m);
  }
  r.value = static_cast<T>(acc / static_cast<double>(pred.size()));
  return r;
}

template <typename T>
LossResult<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::check_loss_args(pred, target);
  const T m = T(pred.size());
  LossResult<T> r{T(0), Tensor<T>(pred.shape(), T(0))};
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T d = pred[i] - target[i];
    acc += static_cast<double>(d) * d;
    r.grad[i] = T(2) * d / m;
  }
  r.value = static_cast<T>(acc / static_cast<double>(pred.size()));
  return r;
}

template <typename T>
LossResult<T> compute_loss(LossKind kind, const Tensor<T>& pred, const Tensor<T>& target) {
  switch (kind) {
    case LossKind::categorical_crossentropy: return categorical_crossentropy(pred, target);
    case LossKind::binary_crossentropy: return binary_crossentropy(pred, target);
    case LossKind::mse: return mse(pred, target);
  }
  throw Error("unknown loss kind");
}

}  // namespace pulsegate
