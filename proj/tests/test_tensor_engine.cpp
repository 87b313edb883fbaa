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

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pulsegate/adam.hpp"
#include "pulsegate/graph.hpp"
#include "pulsegate/loss.hpp"
#include "pulsegate/serialize.hpp"
#include "pulsegate/train.hpp"
#include "support/gradcheck.hpp"

using namespace pulsegate;

namespace {

// Direct (non-im2col) zero-padded convolution, single channel.
std::vector<double> direct_conv_same(std::span<const double> x, std::span<const double> k) {
  const int pad = static_cast<int>(k.size()) / 2;
  std::vector<double> y(x.size(), 0.0);
  for (int t = 0; t < static_cast<int>(x.size()); ++t)
    for (int j = 0; j < static_cast<int>(k.size()); ++j) {
      const int s = t + j - pad;
      if (s >= 0 && s < static_cast<int>(x.size())) y[t] += k[j] * x[s];
    }
  return y;
}

}  // namespace

TEST(Forward, ReluDefinition) {
  ModelGraph<double> g;
  g.set_outputs({g.relu(g.input("x", {3}))});
  auto y = g.forward(Tensor<double>({1, 3}, {-1, 0, 2}), Mode::infer);
  EXPECT_EQ(y, Tensor<double>(y.shape(), {0, 0, 2}));
}

TEST(Forward, SoftmaxOfZerosIsUniform) {
  ModelGraph<double> g;
  g.set_outputs({g.softmax(g.input("x", {3}))});
  auto y = g.forward(Tensor<double>({1, 3}, 0.0), Mode::infer);
  for (double v : y.vec()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Forward, ConvUnitKernelShiftsRight) {
  ModelGraph<double> g;
  auto c = g.conv1d(g.input("x", {1, 8}), 1, 3);
  g.set_outputs({c});
  g.params()[0].value.vec() = {1, 0, 0};
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = pgtest::rand_tensor({1, 1, 8}, rng);
    auto y = g.forward(x, Mode::infer);
    auto oracle = direct_conv_same(x.span(), std::vector<double>{1, 0, 0});
    EXPECT_EQ(y[0], 0.0);
    for (std::size_t t = 1; t < 8; ++t) EXPECT_EQ(y[t], x[t - 1]);
    for (std::size_t t = 0; t < 8; ++t) EXPECT_NEAR(y[t], oracle[t], 1e-15);
  }
}

TEST(Forward, ConvMatchesDirectOracleForRandomKernels) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    ModelGraph<double> g;
    g.set_outputs({g.conv1d(g.input("x", {1, 8}), 1, 5)});
    auto k = pgtest::rand_tensor({1, 1, 5}, rng);
    g.params()[0].value = k;
    auto x = pgtest::rand_tensor({1, 1, 8}, rng);
    auto y = g.forward(x, Mode::infer);
    auto oracle = direct_conv_same(x.span(), k.span());
    for (std::size_t t = 0; t < 8; ++t) EXPECT_NEAR(y[t], oracle[t], 1e-12);
  }
}

TEST(Forward, SamePaddingPreservesLength) {
  for (std::size_t k : {1u, 3u, 7u, 15u}) {
    ModelGraph<float> g;
    auto c = g.conv1d(g.input("x", {2, 37}), 4, k);
    EXPECT_EQ(g.node(c).out_shape, (Shape{4, 37}));
  }
  ModelGraph<float> g;
  EXPECT_THROW(g.conv1d(g.input("x", {1, 8}), 1, 4), Error);
}

TEST(Forward, ShapeMismatchNamesBothShapes) {
  ModelGraph<float> g;
  g.set_outputs({g.relu(g.input("beat", {1, 256}))});
  try {
    g.forward(Tensor<float>({2, 1, 128}), Mode::infer);
    FAIL();
  } catch (const Error& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("[2x1x256]"), std::string::npos) << m;
    EXPECT_NE(m.find("[2x1x128]"), std::string::npos) << m;
  }
}

TEST(Forward, NonFiniteParameterRejected) {
  ModelGraph<float> g;
  g.set_outputs({g.dense(g.input("x", {3}), 2)});
  g.initialize(1);
  g.params()[0].value[2] = std::nanf("");
  EXPECT_THROW(g.forward(Tensor<float>({1, 3}, 1.f), Mode::infer), Error);
}

TEST(Forward, InferIsBitDeterministic) {
  ModelGraph<float> g;
  auto x = g.input("x", {1, 64});
  auto c = g.relu(g.batchnorm(g.conv1d(x, 8, 5)));
  auto d = g.dropout(g.dense(g.spp(c, {8, 16, 32}), 16), 0.25);
  g.set_outputs({g.softmax(g.dense(d, 4))});
  g.initialize(42);
  std::mt19937_64 rng(5);
  auto in = pgtest::rand_tensor({3, 1, 64}, rng).cast<float>();
  auto a = g.forward(in, Mode::infer);
  auto b = g.forward(in, Mode::infer);
  auto c2 = g.predict(in);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c2);
}

TEST(Backward, DenseSumLossGivesAllOnesWeightGradient) {
  ModelGraph<double> g;
  g.set_outputs({g.dense(g.input("x", {4}), 3)});
  g.initialize(9);
  g.forward(Tensor<double>({1, 4}, 1.0), Mode::train);
  g.backward(Tensor<double>({1, 3}, 1.0));
  for (double v : g.params()[0].grad.vec()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, WithoutForwardRejected) {
  ModelGraph<double> g;
  g.set_outputs({g.relu(g.input("x", {3}))});
  EXPECT_THROW(g.backward(Tensor<double>({1, 3}, 1.0)), Error);
}

TEST(Backward, InferDropoutPassesGradientThrough) {
  ModelGraph<double> g;
  g.set_outputs({g.dropout(g.input("x", {6}), 0.5)});
  std::mt19937_64 rng(2);
  auto x = pgtest::rand_tensor({2, 6}, rng);
  auto dy = pgtest::rand_tensor({2, 6}, rng);
  g.forward(x, Mode::infer);
  g.backward(dy);
  EXPECT_EQ(g.input_grad().vec(), dy.vec());
}

TEST(Backward, EveryLayerKindMatchesFiniteDifferences) {
  for (const auto& c : pgtest::layer_cases()) {
    std::mt19937_64 rng(1000);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<Tensor<double>> inputs;
      auto g = c.make(rng, inputs);
      auto rep = pgtest::check_graph(g, inputs, c.mode, rng);
      worst = std::max(worst, rep.max_rel_error);
    }
    EXPECT_LE(worst, 1e-4) << c.name;
  }
}

TEST(Backward, LossesMatchFiniteDifferences) {
  for (auto kind : {LossKind::categorical_crossentropy, LossKind::binary_crossentropy,
                    LossKind::mse}) {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 100; ++trial) {
      auto [pred, target] = pgtest::loss_case(kind, rng);
      EXPECT_LE(pgtest::check_loss(kind, pred, target), 1e-4);
    }
  }
}

TEST(Backward, ComposedNetworkMatchesFiniteDifferences) {
  std::mt19937_64 rng(31);
  ModelGraph<double> g;
  auto x = g.input("x", {1, 16});
  auto a = g.relu(g.batchnorm(g.conv1d(x, 3, 3)));
  auto b = g.relu(g.batchnorm(g.conv1d(a, 4, 3)));
  auto r = g.batchnorm(g.conv1d(x, 7, 1));
  auto m = g.relu(g.batchnorm(g.add(g.concat({a, b}), r)));
  auto s = g.spp(m, {4, 8});
  auto d = g.relu(g.dense(s, 6));
  g.set_outputs({g.softmax(g.dense(g.dropout(d, 0.2), 3))});
  g.initialize(4);
  std::vector<Tensor<double>> in{pgtest::rand_tensor({5, 1, 16}, rng)};
  EXPECT_LE(pgtest::check_graph(g, in, Mode::infer, rng).max_rel_error, 1e-4);
}

TEST(Spp, OutputLengthAndValues) {
  ModelGraph<float> g;
  auto s = g.spp(g.input("x", {3, 256}), {8, 16, 32});
  g.set_outputs({s});
  EXPECT_EQ(g.node(s).out_shape, (Shape{3, 56}));
  auto y = g.forward(Tensor<float>({2, 3, 256}, 1.75f), Mode::infer);
  for (float v : y.vec()) EXPECT_EQ(v, 1.75f);

  ModelGraph<double> h;
  h.set_outputs({h.spp(h.input("x", {1, 32}), {32})});
  std::mt19937_64 rng(8);
  for (int t = 0; t < 20; ++t) {
    auto x = pgtest::rand_tensor({1, 1, 32}, rng);
    auto out = h.forward(x, Mode::infer);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0], *std::max_element(x.vec().begin(), x.vec().end()));
  }
}

TEST(Spp, RejectsNonDividingOrUnorderedWindows) {
  ModelGraph<float> g;
  auto x = g.input("x", {1, 100});
  EXPECT_THROW(g.spp(x, {8, 16}), Error);
  ModelGraph<float> g2;
  auto x2 = g2.input("x", {1, 256});
  EXPECT_THROW(g2.spp(x2, {16, 8}), Error);
}

TEST(Softmax, RowsAreDistributions) {
  ModelGraph<float> g;
  g.set_outputs({g.softmax(g.input("x", {7}))});
  std::mt19937_64 rng(12);
  auto x = pgtest::rand_tensor({50, 7}, rng, 10.0).cast<float>();
  auto y = g.forward(x, Mode::infer);
  for (std::size_t n = 0; n < 50; ++n) {
    double s = 0;
    for (std::size_t k = 0; k < 7; ++k) {
      EXPECT_GE(y[n * 7 + k], 0.f);
      s += y[n * 7 + k];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(BatchNorm, TrainModeNormalizesBatch) {
  ModelGraph<double> g;
  g.set_outputs({g.batchnorm(g.input("x", {4, 10}))});
  g.initialize(0);
  std::mt19937_64 rng(6);
  auto x = pgtest::rand_tensor({16, 4, 10}, rng, 3.0);
  for (auto& v : x.vec()) v += 5.0;
  auto y = g.forward(x, Mode::train);
  for (std::size_t c = 0; c < 4; ++c) {
    double s = 0, ss = 0;
    for (std::size_t n = 0; n < 16; ++n)
      for (std::size_t i = 0; i < 10; ++i) s += y[(n * 4 + c) * 10 + i];
    const double mean = s / 160;
    for (std::size_t n = 0; n < 16; ++n)
      for (std::size_t i = 0; i < 10; ++i) ss += std::pow(y[(n * 4 + c) * 10 + i] - mean, 2);
    EXPECT_LE(std::abs(mean), 1e-5);
    EXPECT_NEAR(ss / 160, 1.0, 1e-4);
  }
}

TEST(Loss, ClosedForms) {
  Tensor<double> p({2, 3}, {0.1, 0.2, 0.7, 0.3, 0.3, 0.4});
  EXPECT_EQ(mse(p, p).value, 0.0);
  EXPECT_NEAR(binary_crossentropy(Tensor<double>({1, 1}, 0.5), Tensor<double>({1, 1}, 1.0)).value,
              std::log(2.0), 1e-12);
  EXPECT_NEAR(binary_crossentropy(Tensor<double>({1, 1}, 0.5), Tensor<double>({1, 1}, 1.0)).value,
              0.6931, 1e-4);
  Tensor<double> t({2, 3}, {0, 0, 1, 1, 0, 0});
  EXPECT_NEAR(categorical_crossentropy(p, t).value, -(std::log(0.7) + std::log(0.3)) / 2, 1e-12);
}

TEST(Loss, RejectsNaNAndShapeMismatch) {
  Tensor<double> a({1, 2}, {0.5, std::nan("")});
  Tensor<double> b({1, 2}, {1.0, 0.0});
  EXPECT_THROW(mse(a, b), Error);
  EXPECT_THROW(mse(Tensor<double>({1, 3}), b), Error);
}

TEST(Loss, CrossentropyClipsZeroProbabilities) {
  Tensor<double> p({1, 2}, {0.0, 1.0});
  Tensor<double> t({1, 2}, {1.0, 0.0});
  auto r = categorical_crossentropy(p, t);
  EXPECT_TRUE(std::isfinite(r.value));
  EXPECT_NEAR(r.value, -std::log(1e-7), 1e-9);
}

namespace {
std::vector<Parameter<double>> one_param(double v, double g) {
  return {{"w", Tensor<double>({1}, v), Tensor<double>({1}, g)}};
}
}  // namespace

TEST(Backward, FusedSoftmaxCrossentropyMatchesChainRule) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    ModelGraph<double> g;
    const auto logits = g.dense(g.input("x", {6}), 4);
    g.set_outputs({g.softmax(logits)});
    g.initialize(trial);
    auto x = pgtest::rand_tensor({3, 6}, rng);
    Tensor<double> t({3, 4}, 0.0);
    for (std::size_t r = 0; r < 3; ++r) t[r * 4 + rng() % 4] = 1.0;

    auto p = g.forward(x, Mode::train);
    g.backward(categorical_crossentropy(p, t).grad);
    std::vector<Tensor<double>> chain;
    for (const auto& q : g.params()) chain.push_back(q.grad);

    Tensor<double> dz(p.shape());
    for (std::size_t k = 0; k < dz.size(); ++k) dz[k] = (p[k] - t[k]) / 3.0;
    const NodeId at = logits;
    g.backward_at(std::span<const NodeId>(&at, 1), std::span<const Tensor<double>>(&dz, 1));
    for (std::size_t i = 0; i < chain.size(); ++i)
      EXPECT_LE(pgtest::rel_error(chain[i].span(), g.params()[i].grad.span()), 1e-10);
  }
}

TEST(Backward, FusedGradientSurvivesSaturation) {
  ModelGraph<double> g;
  g.set_outputs({g.softmax(g.dense(g.input("x", {2}), 2))});
  g.initialize(1);
  g.params()[0].value = Tensor<double>({2, 2}, {100.0, 0.0, 0.0, 0.0});
  const Tensor<double> x({1, 2}, {1.0, 0.0});
  const Tensor<double> t({1, 2}, {0.0, 1.0});  // true class has p ~ e^-100
  Adam<double> opt;
  const double one = 1.0;
  const auto before = g.params()[0].value;
  train_step<double>(g, opt, std::span<const Tensor<double>>(&x, 1), std::span<const Tensor<double>>(&t, 1),
                     std::span<const double>(&one, 1), LossKind::categorical_crossentropy);
  EXPECT_NE(g.params()[0].value, before);
  EXPECT_GT(std::abs(g.params()[0].grad[0]), 0.5);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Adam<double> opt;
  auto p = one_param(0.3, 0.0);
  for (int i = 0; i < 10; ++i) opt.update(p);
  EXPECT_EQ(p[0].value[0], 0.3);
  EXPECT_EQ(opt.step(), 10u);
}

TEST(Adam, ConstantGradientDescends) {
  for (double g : {2.5, -0.01}) {
    Adam<double> opt;
    auto p = one_param(1.0, g);
    for (int i = 0; i < 200; ++i) opt.update(p);
    EXPECT_EQ(std::signbit(p[0].value[0] - 1.0), !std::signbit(g));
  }
}

TEST(Adam, FirstStepMagnitudeIsLearningRate) {
  // m = 0.1 g, v = 0.001 g^2, bias-corrected ratio g / (|g| + eps)
  const double g = 0.37, lr = 1e-3;
  Adam<double> opt({lr, 0.9, 0.999, 1e-8});
  auto p = one_param(0.0, g);
  opt.update(p);
  const double expected = -lr * g / (std::abs(g) + 1e-8);
  EXPECT_NEAR(p[0].value[0], expected, 1e-15);
  EXPECT_NEAR(std::abs(p[0].value[0]), lr, 1e-10);
  EXPECT_EQ(opt.step(), 1u);
  EXPECT_EQ(opt.first_moments()[0].shape(), p[0].value.shape());
}

TEST(Serialization, RoundTripIsBitExact) {
  ModelGraph<float> g;
  auto x = g.input("x", {1, 64});
  auto a = g.relu(g.batchnorm(g.conv1d(x, 4, 5, Padding::same, "c1")));
  auto u = g.upsample1d(g.maxpool1d(a, 2), 2);
  auto s = g.spp(g.add(u, a), {8, 16});
  auto d = g.dropout(g.dense(s, 8), 0.25);
  g.set_outputs({g.softmax(g.dense(d, 3)), g.sigmoid(g.conv1d(a, 1, 1, Padding::valid))});
  g.initialize(17);
  std::mt19937_64 rng(1);
  for (auto& st : g.stats())
    for (auto& v : st.var.vec()) v = std::uniform_real_distribution<float>(0.5f, 2.f)(rng);
  const auto bytes = encode_model(g, R"({"config_hash":"abc"})");
  ASSERT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "PGM1");
  std::string meta;
  auto h = decode_model<float>(bytes, &meta);
  EXPECT_EQ(meta, R"({"config_hash":"abc"})");
  EXPECT_EQ(encode_model(h, meta), bytes);
  ASSERT_EQ(h.params().size(), g.params().size());
  for (std::size_t i = 0; i < g.params().size(); ++i)
    EXPECT_EQ(h.params()[i].value, g.params()[i].value);
  auto in = pgtest::rand_tensor({2, 1, 64}, rng).cast<float>();
  auto o1 = g.predict(std::span<const Tensor<float>>(&in, 1));
  auto o2 = h.predict(std::span<const Tensor<float>>(&in, 1));
  EXPECT_EQ(o1, o2);
}

TEST(Serialization, RejectsCorruptFiles) {
  std::vector<char> junk{'N', 'O', 'P', 'E', 0, 0, 0, 0};
  EXPECT_THROW(decode_model<float>(junk), Error);
  ModelGraph<float> g;
  g.set_outputs({g.dense(g.input("x", {3}), 2)});
  g.initialize(1);
  auto bytes = encode_model(g);
  bytes.resize(bytes.size() - 6);
  EXPECT_THROW(decode_model<float>(bytes), Error);
}

TEST(Graph, ParameterGradientSlotsMatchShapes) {
  ModelGraph<float> g;
  auto x = g.input("x", {2, 16});
  g.set_outputs({g.dense(g.relu(g.batchnorm(g.conv1d(x, 3, 3))), 2)});
  for (const auto& p : g.params()) EXPECT_EQ(p.value.shape(), p.grad.shape());
  EXPECT_THROW(g.dropout(x, 1.0), Error);
  EXPECT_THROW(g.find("nope"), Error);
}
