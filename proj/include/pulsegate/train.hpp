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

// Pieces shared by the three training loops: the MultiRes block, minibatch
// assembly and per-epoch logging.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pulsegate/adam.hpp"
#include "pulsegate/graph.hpp"
#include "pulsegate/loss.hpp"

namespace pulsegate {

template <typename T>
NodeId conv_bn_relu(ModelGraph<T>& g, NodeId in, std::size_t filters, std::size_t kernel) {
  return g.relu(g.batchnorm(g.conv1d(in, filters, kernel)));
}

/// Serial convolutions whose outputs are concatenated, added to a 1x1
/// projection of the block input, then normalized and rectified.
template <typename T>
NodeId multires_block(ModelGraph<T>& g, NodeId in, const std::vector<std::size_t>& widths,
                      std::size_t kernel) {
  std::vector<NodeId> parts;
  NodeId x = in;
  std::size_t total = 0;
  for (auto w : widths) {
    x = conv_bn_relu(g, x, w, kernel);
    parts.push_back(x);
    total += w;
  }
  const NodeId cat = parts.size() == 1 ? parts[0] : g.concat(parts);
  const NodeId res = g.batchnorm(g.conv1d(in, total, 1));
  return g.relu(g.batchnorm(g.add(cat, res)));
}

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_metric = 0.0;  // accuracy where meaningful, else 0
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Gathers rows `idx` of a sample table into a batch tensor.
template <typename T, typename Row>
Tensor<T> gather(std::span<const Row> rows, std::span<const std::size_t> idx, const Shape& sample,
                 auto&& get) {
  const std::size_t n = shape_numel(sample);
  Shape s{idx.size()};
  s.insert(s.end(), sample.begin(), sample.end());
  Tensor<T> out(s);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& src = get(rows[idx[b]]);
    if (src.size() != n) throw Error("sample length does not match " + shape_str(sample));
    std::copy(src.begin(), src.end(), out.data() + b * n);
  }
  return out;
}

inline std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

inline void check_finite_loss(double loss, std::size_t epoch) {
  if (!std::isfinite(loss))
    throw Error("training diverged (non-finite loss) at epoch " + std::to_string(epoch));
}

/// One optimizer step on a multi-output graph. Outputs with zero weight
/// contribute neither loss nor gradient. Returns the weighted loss.
template <typename T>
double train_step(ModelGraph<T>& g, Adam<T>& opt, std::span<const Tensor<T>> inputs,
                  std::span<const Tensor<T>> targets, std::span<const double> weights,
                  LossKind kind) {
  auto outs = g.forward(inputs, Mode::train);
  std::vector<NodeId> seeds;
  std::vector<Tensor<T>> grads;
  double total = 0.0;
  for (std::size_t i = 0; i < outs.size(); ++i) {
    NodeId at = g.outputs()[i];
    if (weights[i] == 0.0) {
      seeds.push_back(at);
      grads.emplace_back(outs[i].shape(), T(0));
      continue;
    }
    auto l = compute_loss(kind, outs[i], targets[i]);
    total += weights[i] * static_cast<double>(l.value);
    const auto& spec = g.node(at);
    if (kind == LossKind::categorical_crossentropy && spec.kind == LayerKind::softmax) {
      // Softmax and crossentropy differentiated together: (p - t) / N at the
      // logits. Keeps a gradient where the clipped loss has none.
      const T n = static_cast<T>(outs[i].dim(0));
      for (std::size_t k = 0; k < l.grad.size(); ++k) l.grad[k] = (outs[i][k] - targets[i][k]) / n;
      at = spec.inputs[0];
    }
    if (weights[i] != 1.0)
      for (auto& v : l.grad.vec()) v *= static_cast<T>(weights[i]);
    seeds.push_back(at);
    grads.push_back(std::move(l.grad));
  }
  if (!std::isfinite(total)) return total;
  g.backward_at(seeds, grads);
  opt.update(g.params());
  return total;
}

}  // namespace pulsegate
