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

// Central finite-difference oracle for graph and loss gradients. Test-only:
// it touches nothing but forward() and the loss values.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <span>
#include <vector>

#include "pulsegate/graph.hpp"
#include "pulsegate/loss.hpp"

namespace pgtest {

using pulsegate::Mode;
using pulsegate::ModelGraph;
using pulsegate::Tensor;

inline double rel_error(std::span<const double> a, std::span<const double> b) {
  double num = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double den = std::max({std::sqrt(na), std::sqrt(nb), 1e-8});
  return std::sqrt(num) / den;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;
};

/// Checks every parameter and input gradient of `g` for the scalar objective
/// sum_i <proj_i, out_i> with random projections.
inline GradCheck check_graph(ModelGraph<double>& g, std::vector<Tensor<double>> inputs, Mode mode,
                             std::mt19937_64& rng, double h = 1e-5) {
  constexpr std::uint64_t kDropSeed = 1234;
  std::normal_distribution<double> nd(0.0, 1.0);

  g.reseed_dropout(kDropSeed);
  auto outs = g.forward(inputs, mode);
  std::vector<Tensor<double>> proj;
  for (const auto& o : outs) {
    Tensor<double> p(o.shape());
    for (auto& v : p.vec()) v = nd(rng);
    proj.push_back(std::move(p));
  }
  auto objective = [&]() {
    g.reseed_dropout(kDropSeed);
    auto o = g.forward(inputs, mode);
    double s = 0;
    for (std::size_t i = 0; i < o.size(); ++i)
      for (std::size_t j = 0; j < o[i].size(); ++j) s += o[i][j] * proj[i][j];
    return s;
  };

  g.reseed_dropout(kDropSeed);
  g.forward(inputs, mode);
  g.backward(proj);
  std::vector<std::vector<double>> analytic_params;
  for (const auto& p : g.params()) analytic_params.emplace_back(p.grad.vec().begin(), p.grad.vec().end());
  std::vector<std::vector<double>> analytic_inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) analytic_inputs.emplace_back(g.input_grad(i).vec().begin(), g.input_grad(i).vec().end());

  GradCheck rep;
  auto fd = [&](auto& target) {
    std::vector<double> out(target.size());
    for (std::size_t k = 0; k < target.size(); ++k) {
      const double keep = target[k];
      target[k] = keep + h;
      const double lp = objective();
      target[k] = keep - h;
      const double lm = objective();
      target[k] = keep;
      out[k] = (lp - lm) / (2 * h);
    }
    return out;
  };
  for (std::size_t k = 0; k < g.params().size(); ++k) {
    const auto num = fd(g.params()[k].value.vec());
    const double e = rel_error(analytic_params[k], num);
    if (e > rep.max_rel_error) {
      rep.max_rel_error = e;
      rep.worst = g.params()[k].name;
    }
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto num = fd(inputs[i].vec());
    const double e = rel_error(analytic_inputs[i], num);
    if (e > rep.max_rel_error) {
      rep.max_rel_error = e;
      rep.worst = "input " + std::to_string(i);
    }
  }
  return rep;
}

/// Finite-difference check of a loss gradient with respect to the prediction.
inline double check_loss(pulsegate::LossKind kind, Tensor<double> pred, const Tensor<double>& target,
                         double h = 1e-5) {
  const auto r = pulsegate::compute_loss(kind, pred, target);
  std::vector<double> num(pred.size());
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double keep = pred[k];
    pred[k] = keep + h;
    const double lp = pulsegate::compute_loss(kind, pred, target).value;
    pred[k] = keep - h;
    const double lm = pulsegate::compute_loss(kind, pred, target).value;
    pred[k] = keep;
    num[k] = (lp - lm) / (2 * h);
  }
  return rel_error(r.grad.span(), num);
}

/// Random values whose pairwise gaps and distance from zero exceed `gap`, so
/// max-pool and ReLU kinks stay outside the finite-difference stencil.
inline std::vector<double> kink_free(std::size_t n, std::mt19937_64& rng, double gap = 1e-2) {
  std::vector<double> v(n);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::uniform_real_distribution<double> jitter(0.3, 0.7);
  for (std::size_t i = 0; i < n; ++i) {
    double x = (static_cast<double>(perm[i]) + jitter(rng)) * (4.0 / static_cast<double>(n)) - 2.0;
    if (std::abs(x) < gap) x += 2 * gap;
    v[i] = x;
  }
  return v;
}

/// One small graph per layer kind, with its inputs; used by the unit suite and
/// the acceptance gate.
struct KindCase {
  std::string name;
  Mode mode;
  std::function<ModelGraph<double>(std::mt19937_64&, std::vector<Tensor<double>>&)> make;
};

inline Tensor<double> rand_tensor(pulsegate::Shape s, std::mt19937_64& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& v : t.vec()) v = nd(rng);
  return t;
}

inline std::vector<KindCase> layer_cases() {
  using pulsegate::Padding;
  std::vector<KindCase> cases;
  auto single = [](pulsegate::Shape sample, std::size_t batch, std::mt19937_64& rng, bool kinks) {
    pulsegate::Shape s{batch};
    s.insert(s.end(), sample.begin(), sample.end());
    if (!kinks) return rand_tensor(s, rng);
    const auto n = pulsegate::shape_numel(s);
    return Tensor<double>(s, kink_free(n, rng));
  };
  cases.push_back({"conv1d(same)", Mode::train, [=](auto& rng, auto& in) {
                     ModelGraph<double> g;
                     auto x = g.input("x", {2, 9});
                     g.set_outputs({g.conv1d(x, 3, 3, Padding::same)});
                     g.initialize(rng());
                     in = {single({2, 9}, 2, rng, false)};
                     return g;
                   }});
  cases.push_back({"conv1d(valid)", Mode::train, [=](auto& rng, auto& in) {
                     ModelGraph<double> g;
                     auto x = g.input("x", {3, 8});
                     g.set_outputs({g.conv1d(x, 2, 5, Padding::valid)});
                     g.initialize(rng());
                     in = {single({3, 8}, 2, rng, false)};
                     return g;
                   }});
  cases.push_back({"batchnorm(train)", Mode::train, [=](auto& rng, auto& in) {
                     ModelGraph<double> g;
                     auto x = g.input("x", {3, 5});
                     g.set_outputs({g.batchnorm(x)});
                     g.initialize(rng());
                     for (auto& p : g.params())
                       for (auto& v : p.value.vec()) v = 0.5 + std::uniform_real_distribution<>(0, 1)(rng);
                     in = {single({3, 5}, 4, rng, false)};
                     return g;
                   }});
  cases.push_back({"batchnorm(infer)", Mode::infer, [=](auto& rng, auto& in) {
                     ModelGraph<double> g;
                     auto x = g.input("x", {4});
                     g.set_outputs({g.batchnorm(x)});
                     g.initialize(rng());
                     std::uniform_real_distribution<> u(0.5, 1.5);
                     for (auto& p : g.params())
                       for (auto& v : p.value.vec()) v = u(rng);
                     for (auto& st : g.stats()) {
                       for (auto& v : st.mean.vec()) v = u(rng) - 1.0;
                       for (auto& v : st.var.vec()) v = u(rng);
                     }
                     in = {single({4}, 3, rng, false)};
                     return g;
                   }});
  cases.push_back({"relu", Mode::train, [=](auto& rng, auto& in) {
                     ModelGraph<double> g;
                     auto x = g.input("x", {2, 6});
                     g.set_outputs({g.relu(x)});
                     in = {single({2, 6}, 2, rng, true)};
                     return g;
                   }});
  cases.push_back({"sigmoid", Mode::train, [=](auto& rng, auto& in) {
                     ModelGraph<double> g;
                     auto x = g.input("x", {2, 6});
                     g.set_outputs({g.sigmoid(x)});
                     in = {single({2, 6}, 2, rng, false)};
                     return g;
                   }});
  cases.push_back({"maxpool1d", Mode::train, [=](auto& rng, auto& in) {
                     ModelGraph<double> g;
                     auto x = g.input("x", {2, 8});
                     g.set_outputs({g.maxpool1d(x, 2)});
                     in = {single({2, 8}, 2, rng, true)};
                     return g;
                   }});
  cases.push_back({"spp", Mode::train, [=](auto& rng, auto& in) {
                     ModelGraph<double> g;
                     auto x = g.input("x", {2, 16});
                     g.set_outputs({g.spp(x, {2, 4, 8})});
                     in = {single({2, 16}, 2, rng, true)};
                     return g;
                   }});
  cases.push_back({"dense", Mode::train, [=](auto& rng, auto& in) {
                     ModelGraph<double> g;
                     auto x = g.input("x", {2, 3});
                     g.set_outputs({g.dense(x, 4)});
                     g.initialize(rng());
                     for (auto& v : g.params()[1].value.vec()) v = std::normal_distribution<>()(rng);
                     in = {single({2, 3}, 3, rng, false)};
                     return g;
                   }});
  cases.push_back({"dropout(train)", Mode::train, [=](auto& rng, auto& in) {
                     ModelGraph<double> g;
                     auto x = g.input("x", {12});
                     g.set_outputs({g.dropout(x, 0.25)});
                     in = {single({12}, 3, rng, false)};
                     return g;
                   }});
  cases.push_back({"dropout(infer)", Mode::infer, [=](auto& rng, auto& in) {
                     ModelGraph<double> g;
                     auto x = g.input("x", {12});
                     g.set_outputs({g.dropout(x, 0.25)});
                     in = {single({12}, 3, rng, false)};
                     return g;
                   }});
  cases.push_back({"softmax", Mode::train, [=](auto& rng, auto& in) {
                     ModelGraph<double> g;
                     auto x = g.input("x", {5});
                     g.set_outputs({g.softmax(x)});
                     in = {single({5}, 3, rng, false)};
                     return g;
                   }});
  cases.push_back({"concat", Mode::train, [=](auto& rng, auto& in) {
                     ModelGraph<double> g;
                     auto a = g.input("a", {2, 4});
                     auto b = g.input("b", {3, 4});
                     g.set_outputs({g.concat({a, b})});
                     in = {single({2, 4}, 2, rng, false), single({3, 4}, 2, rng, false)};
                     return g;
                   }});
  cases.push_back({"add", Mode::train, [=](auto& rng, auto& in) {
                     ModelGraph<double> g;
                     auto a = g.input("a", {2, 4});
                     auto b = g.input("b", {2, 4});
                     g.set_outputs({g.add(a, b)});
                     in = {single({2, 4}, 2, rng, false), single({2, 4}, 2, rng, false)};
                     return g;
                   }});
  cases.push_back({"upsample1d", Mode::train, [=](auto& rng, auto& in) {
                     ModelGraph<double> g;
                     auto x = g.input("x", {2, 5});
                     g.set_outputs({g.upsample1d(x, 2)});
                     in = {single({2, 5}, 2, rng, false)};
                     return g;
                   }});
  return cases;
}

/// Random (prediction, target) pairs for each loss kind.
inline std::pair<Tensor<double>, Tensor<double>> loss_case(pulsegate::LossKind kind,
                                                           std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 0.95);
  Tensor<double> pred({4, 5});
  Tensor<double> target({4, 5}, 0.0);
  for (auto& v : pred.vec()) v = u(rng);
  switch (kind) {
    case pulsegate::LossKind::categorical_crossentropy:
      for (std::size_t n = 0; n < 4; ++n) {
        double s = 0;
        for (std::size_t k = 0; k < 5; ++k) s += pred[n * 5 + k];
        for (std::size_t k = 0; k < 5; ++k) pred[n * 5 + k] /= s;
        target[n * 5 + rng() % 5] = 1.0;
      }
      break;
    case pulsegate::LossKind::binary_crossentropy:
      for (auto& v : target.vec()) v = (rng() & 1) ? 1.0 : 0.0;
      break;
    case pulsegate::LossKind::mse:
      for (auto& v : target.vec()) v = std::normal_distribution<double>()(rng);
      break;
  }
  return {pred, target};
}

}  // namespace pgtest
