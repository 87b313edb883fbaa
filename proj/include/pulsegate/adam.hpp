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
#include <cstdint>
#include <vector>

#include "pulsegate/graph.hpp"

namespace pulsegate {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a graph's parameter store.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const noexcept { return cfg_; }
  std::uint64_t step() const noexcept { return step_; }
  const std::vector<Tensor<T>>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor<T>>& second_moments() const noexcept { return v_; }

  void update(std::vector<Parameter<T>>& params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.value.shape(), T(0));
        v_.emplace_back(p.value.shape(), T(0));
      }
    }
    if (m_.size() != params.size()) throw Error("adam: parameter count changed between steps");
    ++step_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
    const T lr = T(cfg_.lr), eps = T(cfg_.eps);
    const T ic1 = T(1.0 / c1), ic2 = T(1.0 / c2);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = params[k];
      if (p.grad.shape() != p.value.shape() || m_[k].shape() != p.value.shape())
        throw Error("adam: shape mismatch for '" + p.name + "'");
      T* w = p.value.data();
      const T* g = p.grad.data();
      T* m = m_[k].data();
      T* v = v_[k].data();
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        const T mh = m[i] * ic1;
        const T vh = v[i] * ic2;
        w[i] -= lr * mh / (std::sqrt(vh) + eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
};

}  // namespace pulsegate
