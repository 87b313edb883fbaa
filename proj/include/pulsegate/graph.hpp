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

#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pulsegate/layers.hpp"
#include "pulsegate/tensor.hpp"

namespace pulsegate {

/// Stable ids; they are written to model files.
enum class LayerKind : std::uint8_t {
  input = 0,
  conv1d = 1,
  batchnorm = 2,
  relu = 3,
  sigmoid = 4,
  maxpool1d = 5,
  spp = 6,
  dense = 7,
  dropout = 8,
  softmax = 9,
  concat = 10,
  add = 11,
  upsample1d = 12,
};

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::input: return "input";
    case LayerKind::conv1d: return "conv1d";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::maxpool1d: return "maxpool1d";
    case LayerKind::spp: return "spp";
    case LayerKind::dense: return "dense";
    case LayerKind::dropout: return "dropout";
    case LayerKind::softmax: return "softmax";
    case LayerKind::concat: return "concat";
    case LayerKind::add: return "add";
    case LayerKind::upsample1d: return "upsample1d";
  }
  return "?";
}

enum class Padding : std::uint8_t { same = 0, valid = 1 };
enum class Mode { train, infer };

using NodeId = std::size_t;
inline constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

struct LayerSpec {
  LayerKind kind = LayerKind::input;
  std::string name;
  std::vector<NodeId> inputs;
  std::size_t units = 0;   // conv1d filters, dense units
  std::size_t kernel = 0;  // conv1d kernel length
  Padding padding = Padding::same;
  std::size_t window = 0;  // maxpool1d window (== stride), upsample1d factor
  double rate = 0.0;       // dropout
  std::vector<std::size_t> windows;  // spp
  Shape out_shape;                   // per sample, inferred at build time
  std::vector<std::size_t> params;   // indices into the parameter store
  std::size_t stats = kNone;         // batchnorm running-stat slot
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

template <typename T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;
};

/// Per-forward cache. Separate from the graph so an inference-mode graph can be
/// evaluated concurrently with caller-owned tapes.
template <typename T>
struct Tape {
  Mode mode = Mode::infer;
  bool valid = false;
  std::size_t batch = 0;
  std::vector<Tensor<T>> acts;
  std::vector<std::vector<T>> aux;               // bn xhat, dropout mask
  std::vector<std::vector<T>> bn_stats;          // mean | var | inv_std, per bn node
  std::vector<std::vector<std::uint32_t>> arg;   // pool argmax
  std::vector<Tensor<T>> grads;                  // node gradients after backward
};

/// Fixed-topology differentiable network. Nodes are appended in topological
/// order: a node may only consume nodes created before it, so the graph is
/// acyclic by construction.
template <typename T>
class ModelGraph {
 public:
  static constexpr T kBnEps = T(1e-5);
  static constexpr T kBnMomentum = T(0.9);

  // ---- construction ---------------------------------------------------------

  NodeId input(std::string name, Shape sample_shape) {
    for (auto d : sample_shape)
      if (d == 0) throw Error("input '" + name + "' has a zero extent");
    LayerSpec s;
    s.kind = LayerKind::input;
    s.name = std::move(name);
    s.out_shape = std::move(sample_shape);
    inputs_.push_back(nodes_.size());
    return push(std::move(s));
  }

  NodeId conv1d(NodeId in, std::size_t filters, std::size_t kernel, Padding pad = Padding::same,
                std::string name = {}) {
    const Shape& is = feature_map(in, "conv1d");
    if (filters == 0 || kernel == 0) throw Error("conv1d needs positive filters and kernel");
    if (pad == Padding::same && kernel % 2 == 0)
      throw Error("conv1d with same padding needs an odd kernel, got " + std::to_string(kernel));
    if (pad == Padding::valid && kernel > is[1]) throw Error("conv1d kernel longer than input");
    LayerSpec s = make(LayerKind::conv1d, {in}, std::move(name));
    s.units = filters;
    s.kernel = kernel;
    s.padding = pad;
    s.out_shape = {filters, pad == Padding::same ? is[1] : is[1] - kernel + 1};
    s.params = {add_param(s.name + ".w", {filters, is[0], kernel}),
                add_param(s.name + ".b", {filters})};
    return push(std::move(s));
  }

  NodeId batchnorm(NodeId in, std::string name = {}) {
    const Shape& is = node(in).out_shape;
    LayerSpec s = make(LayerKind::batchnorm, {in}, std::move(name));
    s.out_shape = is;
    const std::size_t ch = is[0];
    s.params = {add_param(s.name + ".gamma", {ch}, T(1)), add_param(s.name + ".beta", {ch})};
    s.stats = stats_.size();
    stats_.push_back({Tensor<T>({ch}, T(0)), Tensor<T>({ch}, T(1))});
    return push(std::move(s));
  }

  NodeId relu(NodeId in, std::string name = {}) { return unary(LayerKind::relu, in, std::move(name)); }
  NodeId sigmoid(NodeId in, std::string name = {}) {
    return unary(LayerKind::sigmoid, in, std::move(name));
  }

  NodeId maxpool1d(NodeId in, std::size_t window, std::string name = {}) {
    const Shape& is = feature_map(in, "maxpool1d");
    if (window == 0 || is[1] % window != 0)
      throw Error("maxpool1d window " + std::to_string(window) + " does not divide length " +
                  std::to_string(is[1]));
    LayerSpec s = make(LayerKind::maxpool1d, {in}, std::move(name));
    s.window = window;
    s.out_shape = {is[0], is[1] / window};
    return push(std::move(s));
  }

  NodeId spp(NodeId in, std::vector<std::size_t> windows, std::string name = {}) {
    const Shape& is = feature_map(in, "spp");
    if (windows.empty()) throw Error("spp needs at least one window");
    std::size_t total = 0;
    for (std::size_t i = 0; i < windows.size(); ++i) {
      if (i > 0 && windows[i] <= windows[i - 1])
        throw Error("spp windows must be strictly increasing");
      if (windows[i] == 0 || is[1] % windows[i] != 0)
        throw Error("spp window " + std::to_string(windows[i]) + " does not divide length " +
                    std::to_string(is[1]));
      total += is[1] / windows[i];
    }
    LayerSpec s = make(LayerKind::spp, {in}, std::move(name));
    s.windows = std::move(windows);
    s.out_shape = {is[0], total};
    return push(std::move(s));
  }

  /// Flattens its input.
  NodeId dense(NodeId in, std::size_t units, std::string name = {}) {
    const std::size_t fan_in = shape_numel(node(in).out_shape);
    if (units == 0) throw Error("dense needs positive units");
    LayerSpec s = make(LayerKind::dense, {in}, std::move(name));
    s.units = units;
    s.out_shape = {units};
    s.params = {add_param(s.name + ".w", {units, fan_in}), add_param(s.name + ".b", {units})};
    return push(std::move(s));
  }

  NodeId dropout(NodeId in, double rate, std::string name = {}) {
    if (!(rate >= 0.0 && rate < 1.0)) throw Error("dropout rate must lie in [0,1)");
    LayerSpec s = make(LayerKind::dropout, {in}, std::move(name));
    s.rate = rate;
    s.out_shape = node(in).out_shape;
    return push(std::move(s));
  }

  NodeId softmax(NodeId in, std::string name = {}) {
    if (node(in).out_shape.size() != 1) throw Error("softmax expects a feature vector");
    return unary(LayerKind::softmax, in, std::move(name));
  }

  /// Concatenates along the leading per-sample axis (channels / features).
  NodeId concat(std::vector<NodeId> ins, std::string name = {}) {
    if (ins.size() < 2) throw Error("concat needs at least two inputs");
    const Shape& first = node(ins[0]).out_shape;
    Shape out = first;
    out[0] = 0;
    for (NodeId i : ins) {
      const Shape& s = node(i).out_shape;
      if (s.size() != first.size() || !std::equal(s.begin() + 1, s.end(), first.begin() + 1))
        throw Error("concat inputs disagree: " + shape_str(first) + " vs " + shape_str(s));
      out[0] += s[0];
    }
    LayerSpec s = make(LayerKind::concat, std::move(ins), std::move(name));
    s.out_shape = std::move(out);
    return push(std::move(s));
  }

  NodeId add(NodeId a, NodeId b, std::string name = {}) {
    if (node(a).out_shape != node(b).out_shape)
      throw Error("add inputs disagree: " + shape_str(node(a).out_shape) + " vs " +
                  shape_str(node(b).out_shape));
    LayerSpec s = make(LayerKind::add, {a, b}, std::move(name));
    s.out_shape = node(a).out_shape;
    return push(std::move(s));
  }

  NodeId upsample1d(NodeId in, std::size_t factor, std::string name = {}) {
    const Shape& is = feature_map(in, "upsample1d");
    if (factor == 0) throw Error("upsample factor must be positive");
    LayerSpec s = make(LayerKind::upsample1d, {in}, std::move(name));
    s.window = factor;
    s.out_shape = {is[0], is[1] * factor};
    return push(std::move(s));
  }

  void set_outputs(std::vector<NodeId> outs) {
    for (NodeId o : outs) node(o);
    outputs_ = std::move(outs);
  }

  /// He-uniform weights, zero biases, unit gamma / zero beta, fresh running
  /// stats. Also seeds the dropout stream.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (const auto& s : nodes_) {
      if (s.kind != LayerKind::conv1d && s.kind != LayerKind::dense) continue;
      auto& w = params_[s.params[0]].value;
      const std::size_t fan_in = w.size() / w.dim(0);
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> u(-limit, limit);
      for (auto& v : w.vec()) v = static_cast<T>(u(rng));
      params_[s.params[1]].value.fill(T(0));
    }
    for (const auto& s : nodes_) {
      if (s.kind != LayerKind::batchnorm) continue;
      params_[s.params[0]].value.fill(T(1));
      params_[s.params[1]].value.fill(T(0));
      stats_[s.stats].mean.fill(T(0));
      stats_[s.stats].var.fill(T(1));
    }
    dropout_rng_.seed(seed ^ 0x9e3779b97f4a7c15ULL);
    tape_.valid = false;
  }

  void reseed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }

  // ---- introspection ----------------------------------------------------------

  const std::vector<LayerSpec>& nodes() const noexcept { return nodes_; }
  const LayerSpec& node(NodeId id) const {
    if (id >= nodes_.size()) throw Error("unknown node id " + std::to_string(id));
    return nodes_[id];
  }
  const std::vector<NodeId>& inputs() const noexcept { return inputs_; }
  const std::vector<NodeId>& outputs() const noexcept { return outputs_; }
  std::vector<Parameter<T>>& params() noexcept { return params_; }
  const std::vector<Parameter<T>>& params() const noexcept { return params_; }
  std::vector<RunningStats<T>>& stats() noexcept { return stats_; }
  const std::vector<RunningStats<T>>& stats() const noexcept { return stats_; }

  NodeId find(const std::string& name) const {
    for (NodeId i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].name == name) return i;
    throw Error("no node named '" + name + "'");
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  /// Rebuilds a node list verbatim (used by deserialization). Parameters and
  /// stats are allocated with default values.
  void append_spec(LayerSpec s) {
    switch (s.kind) {
      case LayerKind::input: input(s.name, s.out_shape); break;
      case LayerKind::conv1d: conv1d(s.inputs.at(0), s.units, s.kernel, s.padding, s.name); break;
      case LayerKind::batchnorm: batchnorm(s.inputs.at(0), s.name); break;
      case LayerKind::relu: relu(s.inputs.at(0), s.name); break;
      case LayerKind::sigmoid: sigmoid(s.inputs.at(0), s.name); break;
      case LayerKind::maxpool1d: maxpool1d(s.inputs.at(0), s.window, s.name); break;
      case LayerKind::spp: spp(s.inputs.at(0), s.windows, s.name); break;
      case LayerKind::dense: dense(s.inputs.at(0), s.units, s.name); break;
      case LayerKind::dropout: dropout(s.inputs.at(0), s.rate, s.name); break;
      case LayerKind::softmax: softmax(s.inputs.at(0), s.name); break;
      case LayerKind::concat: concat(s.inputs, s.name); break;
      case LayerKind::add: add(s.inputs.at(0), s.inputs.at(1), s.name); break;
      case LayerKind::upsample1d: upsample1d(s.inputs.at(0), s.window, s.name); break;
      default: throw Error("unknown layer kind id " + std::to_string(int(s.kind)));
    }
  }

  // ---- execution --------------------------------------------------------------

  /// Runs the graph. Train mode uses batch statistics, samples dropout masks,
  /// and updates running statistics. The activations are cached for backward().
  std::vector<Tensor<T>> forward(std::span<const Tensor<T>> in, Mode mode) {
    execute(in, mode, tape_, mode == Mode::train ? &dropout_rng_ : nullptr, kNone);
    if (mode == Mode::train) update_running_stats(tape_);
    return collect(tape_);
  }

  Tensor<T> forward(const Tensor<T>& in, Mode mode) {
    auto out = forward(std::span<const Tensor<T>>(&in, 1), mode);
    if (out.size() != 1) throw Error("graph has " + std::to_string(out.size()) + " outputs");
    return std::move(out[0]);
  }

  /// Inference without touching graph state; safe to call concurrently.
  std::vector<Tensor<T>> predict(std::span<const Tensor<T>> in, Tape<T>& tape) const {
    execute(in, Mode::infer, tape, nullptr, kNone);
    return collect(tape);
  }

  std::vector<Tensor<T>> predict(std::span<const Tensor<T>> in) const {
    Tape<T> tape;
    return predict(in, tape);
  }

  Tensor<T> predict(const Tensor<T>& in) const {
    auto out = predict(std::span<const Tensor<T>>(&in, 1));
    return std::move(out.at(0));
  }

  /// Inference that stops after `tap`, returning that node's activation.
  Tensor<T> predict_until(std::span<const Tensor<T>> in, NodeId tap) const {
    Tape<T> tape;
    execute(in, Mode::infer, tape, nullptr, tap);
    return std::move(tape.acts[tap]);
  }

  /// Activation of any node from the last forward().
  const Tensor<T>& activation(NodeId id) const {
    if (!tape_.valid) throw Error("no cached forward pass");
    return tape_.acts.at(id);
  }

  /// Backpropagates output gradients through the last forward(). Parameter
  /// gradient slots are overwritten; input gradients are available afterwards.
  void backward(std::span<const Tensor<T>> out_grads) { backward(tape_, out_grads); }
  void backward(const Tensor<T>& g) { backward(std::span<const Tensor<T>>(&g, 1)); }

  void backward(Tape<T>& tape, std::span<const Tensor<T>> out_grads) {
    if (out_grads.size() != outputs_.size())
      throw Error("backward expects " + std::to_string(outputs_.size()) + " output gradients");
    backward_at(tape, outputs_, out_grads);
  }

  /// Backpropagation seeded at arbitrary nodes, e.g. at the input of a softmax
  /// whose gradient the caller fused with the loss.
  void backward_at(std::span<const NodeId> at, std::span<const Tensor<T>> grads) {
    backward_at(tape_, at, grads);
  }

  void backward_at(Tape<T>& tape, std::span<const NodeId> at, std::span<const Tensor<T>> grads) {
    if (!tape.valid) throw Error("backward called without a cached forward pass");
    if (at.size() != grads.size()) throw Error("backward: one gradient per seed node");
    for (auto& p : params_) p.grad.fill(T(0));
    tape.grads.assign(nodes_.size(), Tensor<T>());
    for (std::size_t i = 0; i < at.size(); ++i) {
      const NodeId o = at[i];
      if (o >= nodes_.size() || tape.acts[o].empty())
        throw Error("backward: seed node " + std::to_string(o) + " was not evaluated");
      if (grads[i].shape() != tape.acts[o].shape())
        throw Error("output gradient " + shape_str(grads[i].shape()) +
                    " does not match output " + shape_str(tape.acts[o].shape()));
      accumulate(tape, o, grads[i]);
    }
    for (NodeId id = nodes_.size(); id-- > 0;) {
      if (tape.grads[id].empty()) continue;
      backward_node(tape, id);
    }
  }

  /// Gradient with respect to the i-th graph input after backward().
  const Tensor<T>& input_grad(std::size_t i = 0) const {
    if (tape_.grads.empty()) throw Error("input gradient requested before backward");
    const auto& g = tape_.grads.at(inputs_.at(i));
    if (g.empty()) throw Error("input does not influence any output");
    return g;
  }

  Tape<T>& tape() noexcept { return tape_; }

 private:
  LayerSpec make(LayerKind k, std::vector<NodeId> ins, std::string name) {
    for (NodeId i : ins) node(i);
    LayerSpec s;
    s.kind = k;
    s.inputs = std::move(ins);
    s.name = name.empty() ? std::string(kind_name(k)) + "_" + std::to_string(nodes_.size())
                          : std::move(name);
    for (const auto& n : nodes_)
      if (n.name == s.name) throw Error("duplicate node name '" + s.name + "'");
    return s;
  }

  NodeId push(LayerSpec s) {
    if (s.name.empty()) s.name = std::string(kind_name(s.kind)) + "_" + std::to_string(nodes_.size());
    nodes_.push_back(std::move(s));
    tape_.valid = false;
    return nodes_.size() - 1;
  }

  NodeId unary(LayerKind k, NodeId in, std::string name) {
    LayerSpec s = make(k, {in}, std::move(name));
    s.out_shape = node(in).out_shape;
    return push(std::move(s));
  }

  const Shape& feature_map(NodeId in, const char* what) const {
    const Shape& s = node(in).out_shape;
    if (s.size() != 2) throw Error(std::string(what) + " expects a [channels, length] input");
    return s;
  }

  std::size_t add_param(std::string name, Shape shape, T fill = T(0)) {
    params_.push_back({std::move(name), Tensor<T>(shape, fill), Tensor<T>(shape, T(0))});
    return params_.size() - 1;
  }

  Shape batched(const Shape& sample, std::size_t n) const {
    Shape s{n};
    s.insert(s.end(), sample.begin(), sample.end());
    return s;
  }

  std::vector<Tensor<T>> collect(const Tape<T>& tape) const {
    if (outputs_.empty()) throw Error("graph has no outputs");
    std::vector<Tensor<T>> out;
    out.reserve(outputs_.size());
    for (NodeId o : outputs_) out.push_back(tape.acts[o]);
    return out;
  }

  void execute(std::span<const Tensor<T>> in, Mode mode, Tape<T>& tape, std::mt19937_64* rng,
               NodeId stop) const {
    if (in.size() != inputs_.size())
      throw Error("graph expects " + std::to_string(inputs_.size()) + " inputs, got " +
                  std::to_string(in.size()));
    for (const auto& p : params_)
      if (!p.value.all_finite()) throw Error("parameter '" + p.name + "' is not finite");
    const std::size_t batch = in.empty() ? 0 : in[0].shape().at(0);
    tape.valid = false;
    tape.mode = mode;
    tape.batch = batch;
    tape.acts.assign(nodes_.size(), Tensor<T>());
    tape.aux.assign(nodes_.size(), {});
    tape.bn_stats.assign(nodes_.size(), {});
    tape.arg.assign(nodes_.size(), {});
    tape.grads.clear();
    for (std::size_t i = 0; i < inputs_.size(); ++i) {
      const Shape want = batched(nodes_[inputs_[i]].out_shape, batch);
      if (in[i].shape() != want)
        throw Error("input '" + nodes_[inputs_[i]].name + "' expects shape " + shape_str(want) +
                    ", got " + shape_str(in[i].shape()));
      tape.acts[inputs_[i]] = in[i];
    }
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      if (nodes_[id].kind != LayerKind::input) forward_node(tape, id, rng);
      if (id == stop) break;
    }
    tape.valid = true;
  }

  void forward_node(Tape<T>& tape, NodeId id, std::mt19937_64* rng) const {
    const LayerSpec& s = nodes_[id];
    const std::size_t N = tape.batch;
    const Tensor<T>& x = tape.acts[s.inputs[0]];
    Tensor<T> y(batched(s.out_shape, N));
    switch (s.kind) {
      case LayerKind::conv1d: {
        kernels::conv1d_forward(x.data(), params_[s.params[0]].value.data(),
                                params_[s.params[1]].value.data(), conv_geom(s, N), y.data());
        break;
      }
      case LayerKind::batchnorm: {
        const std::size_t ch = s.out_shape[0];
        const std::size_t inner = shape_numel(s.out_shape) / ch;
        const T* gamma = params_[s.params[0]].value.data();
        const T* beta = params_[s.params[1]].value.data();
        if (tape.mode == Mode::train) {
          auto& xhat = tape.aux[id];
          xhat.resize(x.size());
          auto& st = tape.bn_stats[id];
          st.assign(3 * ch, T(0));
          kernels::batchnorm_train_forward(x.data(), N, ch, inner, gamma, beta, kBnEps, y.data(),
                                           xhat.data(), st.data(), st.data() + ch,
                                           st.data() + 2 * ch);
        } else {
          const auto& rs = stats_[s.stats];
          auto& st = tape.bn_stats[id];
          st.assign(3 * ch, T(0));
          for (std::size_t c = 0; c < ch; ++c) {
            st[2 * ch + c] = T(1) / std::sqrt(rs.var[c] + kBnEps);
          }
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < ch; ++c) {
              const std::size_t off = (n * ch + c) * inner;
              const T k = gamma[c] * st[2 * ch + c];
              for (std::size_t i = 0; i < inner; ++i)
                y[off + i] = k * (x[off + i] - rs.mean[c]) + beta[c];
            }
        }
        break;
      }
      case LayerKind::relu:
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
        break;
      case LayerKind::sigmoid:
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = kernels::stable_sigmoid(x[i]);
        break;
      case LayerKind::maxpool1d: {
        auto& arg = tape.arg[id];
        arg.resize(y.size());
        const std::size_t rows = N * s.out_shape[0];
        const std::size_t len = x.size() / rows;
        kernels::maxpool_forward(x.data(), rows, len, s.window, s.out_shape[1], 0, y.data(),
                                 arg.data());
        break;
      }
      case LayerKind::spp: {
        auto& arg = tape.arg[id];
        arg.resize(y.size());
        const std::size_t rows = N * s.out_shape[0];
        const std::size_t len = x.size() / rows;
        std::size_t offset = 0;
        for (std::size_t w : s.windows) {
          kernels::maxpool_forward(x.data(), rows, len, w, s.out_shape[1], offset, y.data(),
                                   arg.data());
          offset += len / w;
        }
        break;
      }
      case LayerKind::dense: {
        kernels::dense_forward(x.data(), params_[s.params[0]].value.data(),
                               params_[s.params[1]].value.data(), N, x.size() / N, s.units,
                               y.data());
        break;
      }
      case LayerKind::dropout: {
        if (tape.mode == Mode::train && s.rate > 0.0) {
          if (rng == nullptr) throw Error("train-mode dropout needs a random stream");
          auto& mask = tape.aux[id];
          mask.resize(x.size());
          std::bernoulli_distribution keep(1.0 - s.rate);
          const T scale = static_cast<T>(1.0 / (1.0 - s.rate));
          for (std::size_t i = 0; i < x.size(); ++i) {
            mask[i] = keep(*rng) ? scale : T(0);
            y[i] = x[i] * mask[i];
          }
        } else {
          y = x;
        }
        break;
      }
      case LayerKind::softmax:
        kernels::softmax_rows(x.data(), N, s.out_shape[0], y.data());
        break;
      case LayerKind::concat: {
        const std::size_t out_row = shape_numel(s.out_shape);
        std::size_t offset = 0;
        for (NodeId in : s.inputs) {
          const Tensor<T>& xi = tape.acts[in];
          const std::size_t row = xi.size() / N;
          for (std::size_t n = 0; n < N; ++n)
            std::copy_n(xi.data() + n * row, row, y.data() + n * out_row + offset);
          offset += row;
        }
        break;
      }
      case LayerKind::add: {
        const Tensor<T>& b = tape.acts[s.inputs[1]];
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + b[i];
        break;
      }
      case LayerKind::upsample1d: {
        const std::size_t f = s.window;
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i / f];
        break;
      }
      case LayerKind::input: break;
    }
    tape.acts[id] = std::move(y);
  }

  Tensor<T>& grad_slot(Tape<T>& tape, NodeId id) {
    if (tape.grads[id].empty()) tape.grads[id] = Tensor<T>(tape.acts[id].shape(), T(0));
    return tape.grads[id];
  }

  void accumulate(Tape<T>& tape, NodeId id, const Tensor<T>& g) {
    auto& slot = grad_slot(tape, id);
    for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
  }

  void backward_node(Tape<T>& tape, NodeId id) {
    const LayerSpec& s = nodes_[id];
    if (s.kind == LayerKind::input) return;
    const std::size_t N = tape.batch;
    const Tensor<T>& dy = tape.grads[id];
    const Tensor<T>& x = tape.acts[s.inputs[0]];
    switch (s.kind) {
      case LayerKind::conv1d: {
        Tensor<T>& dx = grad_slot(tape, s.inputs[0]);
        kernels::conv1d_backward(x.data(), params_[s.params[0]].value.data(), dy.data(),
                                 conv_geom(s, N), dx.data(), params_[s.params[0]].grad.data(),
                                 params_[s.params[1]].grad.data());
        break;
      }
      case LayerKind::batchnorm: {
        const std::size_t ch = s.out_shape[0];
        const std::size_t inner = shape_numel(s.out_shape) / ch;
        const T* gamma = params_[s.params[0]].value.data();
        T* dgamma = params_[s.params[0]].grad.data();
        T* dbeta = params_[s.params[1]].grad.data();
        const auto& st = tape.bn_stats[id];
        Tensor<T>& dx = grad_slot(tape, s.inputs[0]);
        if (tape.mode == Mode::train) {
          kernels::batchnorm_train_backward(dy.data(), tape.aux[id].data(), N, ch, inner, gamma,
                                            st.data() + 2 * ch, dx.data(), dgamma, dbeta);
        } else {
          const auto& rs = stats_[s.stats];
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < ch; ++c) {
              const std::size_t off = (n * ch + c) * inner;
              const T istd = st[2 * ch + c];
              for (std::size_t i = 0; i < inner; ++i) {
                dgamma[c] += dy[off + i] * (x[off + i] - rs.mean[c]) * istd;
                dbeta[c] += dy[off + i];
                dx[off + i] += dy[off + i] * gamma[c] * istd;
              }
            }
        }
        break;
      }
      case LayerKind::relu: {
        Tensor<T>& dx = grad_slot(tape, s.inputs[0]);
        for (std::size_t i = 0; i < x.size(); ++i)
          if (x[i] > T(0)) dx[i] += dy[i];
        break;
      }
      case LayerKind::sigmoid: {
        Tensor<T>& dx = grad_slot(tape, s.inputs[0]);
        const Tensor<T>& y = tape.acts[id];
        for (std::size_t i = 0; i < y.size(); ++i) dx[i] += dy[i] * y[i] * (T(1) - y[i]);
        break;
      }
      case LayerKind::maxpool1d:
      case LayerKind::spp: {
        Tensor<T>& dx = grad_slot(tape, s.inputs[0]);
        const auto& arg = tape.arg[id];
        for (std::size_t i = 0; i < dy.size(); ++i) dx[arg[i]] += dy[i];
        break;
      }
      case LayerKind::dense: {
        Tensor<T>& dx = grad_slot(tape, s.inputs[0]);
        kernels::dense_backward(x.data(), params_[s.params[0]].value.data(), dy.data(), N,
                                x.size() / N, s.units, dx.data(),
                                params_[s.params[0]].grad.data(), params_[s.params[1]].grad.data());
        break;
      }
      case LayerKind::dropout: {
        Tensor<T>& dx = grad_slot(tape, s.inputs[0]);
        const auto& mask = tape.aux[id];
        if (mask.empty()) {
          for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
        } else {
          for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * mask[i];
        }
        break;
      }
      case LayerKind::softmax: {
        Tensor<T>& dx = grad_slot(tape, s.inputs[0]);
        const Tensor<T>& y = tape.acts[id];
        const std::size_t K = s.out_shape[0];
        for (std::size_t n = 0; n < N; ++n) {
          T dot = 0;
          for (std::size_t k = 0; k < K; ++k) dot += dy[n * K + k] * y[n * K + k];
          for (std::size_t k = 0; k < K; ++k)
            dx[n * K + k] += y[n * K + k] * (dy[n * K + k] - dot);
        }
        break;
      }
      case LayerKind::concat: {
        const std::size_t out_row = shape_numel(s.out_shape);
        std::size_t offset = 0;
        for (NodeId in : s.inputs) {
          Tensor<T>& dx = grad_slot(tape, in);
          const std::size_t row = dx.size() / N;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < row; ++i) dx[n * row + i] += dy[n * out_row + offset + i];
          offset += row;
        }
        break;
      }
      case LayerKind::add: {
        accumulate(tape, s.inputs[0], dy);
        accumulate(tape, s.inputs[1], dy);
        break;
      }
      case LayerKind::upsample1d: {
        Tensor<T>& dx = grad_slot(tape, s.inputs[0]);
        const std::size_t f = s.window;
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i / f] += dy[i];
        break;
      }
      case LayerKind::input: break;
    }
  }

  kernels::Conv1dGeom conv_geom(const LayerSpec& s, std::size_t N) const {
    const Shape& is = nodes_[s.inputs[0]].out_shape;
    return {N, is[0], is[1], s.units, s.kernel, s.padding == Padding::same ? s.kernel / 2 : 0,
            s.out_shape[1]};
  }

  void update_running_stats(const Tape<T>& tape) {
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      const LayerSpec& s = nodes_[id];
      if (s.kind != LayerKind::batchnorm) continue;
      const auto& st = tape.bn_stats[id];
      auto& rs = stats_[s.stats];
      const std::size_t ch = s.out_shape[0];
      for (std::size_t c = 0; c < ch; ++c) {
        rs.mean[c] = kBnMomentum * rs.mean[c] + (T(1) - kBnMomentum) * st[c];
        rs.var[c] = kBnMomentum * rs.var[c] + (T(1) - kBnMomentum) * st[ch + c];
      }
    }
  }

  std::vector<LayerSpec> nodes_;
  std::vector<NodeId> inputs_;
  std::vector<NodeId> outputs_;
  std::vector<Parameter<T>> params_;
  std::vector<RunningStats<T>> stats_;
  std::mt19937_64 dropout_rng_{0};
  Tape<T> tape_;
};

}  // namespace pulsegate
