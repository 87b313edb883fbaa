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

// Closed-set identification: beat classifier, split plans, metrics, fusion,
// embeddings and saliency.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pulsegate/beats.hpp"
#include "pulsegate/serialize.hpp"
#include "pulsegate/train.hpp"

namespace pulsegate {

inline constexpr std::size_t kEmbeddingWidth = 128;

template <typename T = float>
struct IdentifyModel {
  ModelGraph<T> graph;
  std::vector<std::string> classes;  // output index -> subject id

  std::size_t n_classes() const noexcept { return classes.size(); }
  std::size_t class_index(const std::string& subject) const {
    auto it = std::find(classes.begin(), classes.end(), subject);
    if (it == classes.end()) throw Error("subject '" + subject + "' is not in the model's class set");
    return static_cast<std::size_t>(it - classes.begin());
  }
};

/// Beat classifier. Nodes of interest: "embedding" (dense-128 pre-activation)
/// and "probs" (softmax output).
template <typename T = float>
ModelGraph<T> build_identify_graph(std::size_t n_persons, std::uint64_t seed, double dropout = 0.25) {
  if (n_persons < 2) throw Error("identification needs at least two persons");
  ModelGraph<T> g;
  const NodeId x = g.input("beat", {1, kBeatLength});
  const NodeId block = multires_block(g, x, {32, 64, 128}, 15);
  const NodeId pooled = g.spp(block, {8, 16, 32});
  const NodeId emb = g.dense(pooled, kEmbeddingWidth, "embedding");
  const NodeId drop = g.dropout(g.relu(emb), dropout);
  const NodeId probs = g.softmax(g.dense(drop, n_persons, "logits"), "probs");
  g.set_outputs({probs});
  g.initialize(seed);
  return g;
}

/// Class ids are the sorted distinct subject ids.
inline std::vector<std::string> subject_classes(std::span<const Heartbeat> beats) {
  std::set<std::string> s;
  for (const auto& b : beats) s.insert(b.subject_id);
  return {s.begin(), s.end()};
}

template <typename T = float>
IdentifyModel<T> build_identify_model(std::vector<std::string> classes, std::uint64_t seed,
                                      double dropout = 0.25) {
  IdentifyModel<T> m{build_identify_graph<T>(classes.size(), seed, dropout), std::move(classes)};
  return m;
}

template <typename T>
void save_identify_model(const std::string& path, const IdentifyModel<T>& m,
                         nlohmann::json extra = nlohmann::json::object()) {
  extra["kind"] = "identify";
  extra["classes"] = m.classes;
  save_model(path, m.graph, extra.dump());
}

template <typename T = float>
IdentifyModel<T> load_identify_model(const std::string& path, nlohmann::json* meta_out = nullptr) {
  std::string meta;
  IdentifyModel<T> m{load_model<T>(path, &meta), {}};
  const auto doc = nlohmann::json::parse(meta.empty() ? "{}" : meta);
  if (doc.value("kind", "") != "identify") throw Error("'" + path + "' is not an identification model");
  m.classes = doc.at("classes").get<std::vector<std::string>>();
  if (m.classes.size() != m.graph.node(m.graph.outputs().at(0)).out_shape.at(0))
    throw Error("'" + path + "': class list does not match output width");
  if (meta_out) *meta_out = doc;
  return m;
}

// ---- split plans ---------------------------------------------------------------

enum class SplitScheme { stratified_10fold, train_val_test, cross_session };

inline SplitScheme parse_split_scheme(const std::string& s) {
  if (s == "10fold" || s == "stratified-10-fold") return SplitScheme::stratified_10fold;
  if (s == "60-20-20") return SplitScheme::train_val_test;
  if (s == "cross-session") return SplitScheme::cross_session;
  throw Error("unknown split scheme '" + s + "' (expected 10fold, 60-20-20 or cross-session)");
}

/// part[i] is a fold index (stratified), a partition 0/1/2 = train/val/test,
/// or a session id (cross-session).
struct SplitPlan {
  SplitScheme scheme = SplitScheme::train_val_test;
  std::vector<int> part;

  std::vector<std::size_t> where(auto&& pred) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < part.size(); ++i)
      if (pred(part[i])) idx.push_back(i);
    return idx;
  }
  std::vector<std::size_t> members(int p) const {
    return where([p](int v) { return v == p; });
  }
  std::vector<std::size_t> complement(int p) const {
    return where([p](int v) { return v != p; });
  }
};

namespace identify_detail {
inline std::map<std::string, std::vector<std::size_t>> by_subject(std::span<const Heartbeat> beats) {
  std::map<std::string, std::vector<std::size_t>> m;
  for (std::size_t i = 0; i < beats.size(); ++i) m[beats[i].subject_id].push_back(i);
  return m;
}
}  // namespace identify_detail

/// Each subject's beats are shuffled and dealt round-robin, so every fold holds
/// floor or ceil of n_subject / k of them.
inline SplitPlan stratified_folds(std::span<const Heartbeat> beats, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw Error("need at least two folds");
  SplitPlan plan{SplitScheme::stratified_10fold, std::vector<int>(beats.size(), 0)};
  std::mt19937_64 rng(seed);
  std::size_t offset = 0;
  for (auto& [subject, idx] : identify_detail::by_subject(beats)) {
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t j = 0; j < idx.size(); ++j) plan.part[idx[j]] = static_cast<int>((j + offset) % k);
    offset += idx.size();  // spread remainders over folds
  }
  return plan;
}

/// Per subject: round(0.6 n) train, round(0.2 n) validation, the rest test.
inline SplitPlan split_train_val_test(std::span<const Heartbeat> beats, std::uint64_t seed,
                                      double train = 0.6, double val = 0.2) {
  SplitPlan plan{SplitScheme::train_val_test, std::vector<int>(beats.size(), 2)};
  std::mt19937_64 rng(seed);
  for (auto& [subject, idx] : identify_detail::by_subject(beats)) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n = static_cast<double>(idx.size());
    const auto n_train = static_cast<std::size_t>(std::llround(train * n));
    const auto n_val = std::min(idx.size() - n_train, static_cast<std::size_t>(std::llround(val * n)));
    for (std::size_t j = 0; j < idx.size(); ++j) plan.part[idx[j]] = j < n_train ? 0 : j < n_train + n_val ? 1 : 2;
  }
  return plan;
}

inline SplitPlan split_by_session(std::span<const Heartbeat> beats) {
  SplitPlan plan{SplitScheme::cross_session, {}};
  for (const auto& b : beats) plan.part.push_back(b.session_id);
  return plan;
}

// ---- training ------------------------------------------------------------------

struct IdentifyTrainConfig {
  std::size_t epochs = 500;
  std::size_t batch_size = 32;
  std::uint64_t seed = 7;
  AdamConfig adam{};
  std::size_t patience = 0;  // 0 disables early stopping
};

template <typename T>
Tensor<T> beat_batch(std::span<const Heartbeat> beats, std::span<const std::size_t> idx) {
  return gather<T>(beats, idx, {1, kBeatLength}, [](const Heartbeat& b) -> const auto& { return b.samples; });
}

template <typename T>
Tensor<T> onehot_batch(const IdentifyModel<T>& m, std::span<const Heartbeat> beats,
                       std::span<const std::size_t> idx) {
  Tensor<T> y({idx.size(), m.n_classes()});
  for (std::size_t b = 0; b < idx.size(); ++b) y[b * m.n_classes() + m.class_index(beats[idx[b]].subject_id)] = T(1);
  return y;
}

/// Row-wise class probabilities [idx.size(), n_classes], inference mode.
template <typename T>
Tensor<T> predict_proba(const IdentifyModel<T>& m, std::span<const Heartbeat> beats,
                        std::span<const std::size_t> idx, std::size_t batch = 64) {
  if (idx.empty()) throw Error("nothing to predict");
  Tensor<T> out({idx.size(), m.n_classes()});
  Tape<T> tape;
  for (std::size_t b = 0; b < idx.size(); b += batch) {
    const auto part = idx.subspan(b, std::min(batch, idx.size() - b));
    const auto x = beat_batch<T>(beats, part);
    const auto p = m.graph.predict(std::span<const Tensor<T>>(&x, 1), tape).at(0);
    std::copy(p.vec().begin(), p.vec().end(), out.data() + b * m.n_classes());
  }
  return out;
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

template <typename T>
std::size_t argmax_row(const Tensor<T>& p, std::size_t row) {
  const std::size_t k = p.dim(1);
  const T* r = p.data() + row * k;
  return static_cast<std::size_t>(std::max_element(r, r + k) - r);
}

/// Trains on `train` only; validation loss/accuracy logged per epoch.
template <typename T>
std::vector<EpochLog> train_identify(IdentifyModel<T>& m, std::span<const Heartbeat> beats,
                                     std::span<const std::size_t> train, std::span<const std::size_t> val,
                                     const IdentifyTrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  if (train.empty()) throw Error("train_identify: empty training partition");
  if (cfg.batch_size == 0) throw Error("train_identify: batch size must be positive");
  std::vector<char> seen(m.n_classes(), 0);
  for (auto i : train) seen[m.class_index(beats[i].subject_id)] = 1;
  for (std::size_t c = 0; c < seen.size(); ++c)
    if (!seen[c]) throw Error("train_identify: class '" + m.classes[c] + "' absent from the training partition");

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.begin(), train.end());
  Adam<T> opt(cfg.adam);
  const double one = 1.0;
  std::vector<EpochLog> log;
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double acc = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const auto part = std::span<const std::size_t>(order).subspan(b, std::min(cfg.batch_size, order.size() - b));
      const auto x = beat_batch<T>(beats, part);
      const auto y = onehot_batch(m, beats, part);
      const double l = train_step<T>(m.graph, opt, std::span<const Tensor<T>>(&x, 1),
                                     std::span<const Tensor<T>>(&y, 1), std::span<const double>(&one, 1),
                                     LossKind::categorical_crossentropy);
      check_finite_loss(l, epoch);
      acc += l * static_cast<double>(part.size());
    }
    EpochLog e{epoch, acc / static_cast<double>(order.size()), 0.0, 0.0};
    if (!val.empty()) {
      const auto p = predict_proba(m, beats, val);
      e.val_loss = categorical_crossentropy(p, onehot_batch(m, beats, val)).value;
      std::size_t correct = 0;
      for (std::size_t r = 0; r < val.size(); ++r)
        correct += argmax_row(p, r) == m.class_index(beats[val[r]].subject_id);
      e.val_metric = static_cast<double>(correct) / static_cast<double>(val.size());
    }
    log.push_back(e);
    if (on_epoch) on_epoch(e);
    if (cfg.patience > 0 && !val.empty()) {
      if (e.val_loss < best) {
        best = e.val_loss;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        break;
      }
    }
  }
  return log;
}

// ---- metrics -------------------------------------------------------------------

/// Accuracy from one class's binary counts.
inline double accuracy_from_counts(double tp, double tn, double fp, double fn) {
  const double total = tp + tn + fp + fn;
  if (total <= 0) throw Error("accuracy of an empty count set");
  return (tp + tn) / total;
}

struct ClassCounts {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
};

/// counts[truth][predicted].
struct ConfusionMatrix {
  std::vector<std::vector<std::size_t>> counts;

  explicit ConfusionMatrix(std::size_t k = 0) : counts(k, std::vector<std::size_t>(k, 0)) {}
  std::size_t classes() const noexcept { return counts.size(); }
  void add(std::size_t truth, std::size_t predicted) { ++counts.at(truth).at(predicted); }
  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& r : counts)
      for (auto v : r) n += v;
    return n;
  }
  std::size_t correct() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) n += counts[i][i];
    return n;
  }
  ClassCounts class_counts(std::size_t c) const {
    ClassCounts r;
    const std::size_t n = total();
    r.tp = counts[c][c];
    for (std::size_t j = 0; j < counts.size(); ++j) {
      if (j == c) continue;
      r.fn += counts[c][j];
      r.fp += counts[j][c];
    }
    r.tn = n - r.tp - r.fn - r.fp;
    return r;
  }
};

struct ClassificationMetrics {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
};

/// Micro accuracy, macro precision / recall / F1. A class with an empty
/// denominator contributes 0 to the macro mean.
inline ClassificationMetrics metrics_from(const ConfusionMatrix& cm) {
  const std::size_t n = cm.total();
  if (n == 0) throw Error("metrics of an empty evaluation set");
  ClassificationMetrics m;
  m.accuracy = static_cast<double>(cm.correct()) / static_cast<double>(n);
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    const auto k = cm.class_counts(c);
    const double p = k.tp + k.fp ? static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fp) : 0.0;
    const double r = k.tp + k.fn ? static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fn) : 0.0;
    m.precision += p;
    m.recall += r;
    m.f1 += p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  }
  const auto kc = static_cast<double>(cm.classes());
  m.precision /= kc;
  m.recall /= kc;
  m.f1 /= kc;
  return m;
}

struct IdentifyEvaluation {
  ConfusionMatrix confusion;
  ClassificationMetrics metrics;
};

template <typename T>
IdentifyEvaluation evaluate_identify(const IdentifyModel<T>& m, std::span<const Heartbeat> beats,
                                     std::span<const std::size_t> idx) {
  if (idx.empty()) throw Error("evaluate_identify: empty evaluation set");
  const auto p = predict_proba(m, beats, idx);
  IdentifyEvaluation ev{ConfusionMatrix(m.n_classes()), {}};
  for (std::size_t r = 0; r < idx.size(); ++r) ev.confusion.add(m.class_index(beats[idx[r]].subject_id), argmax_row(p, r));
  ev.metrics = metrics_from(ev.confusion);
  return ev;
}

// ---- fusion --------------------------------------------------------------------

/// Majority of per-beat argmax votes over the first k rows of `probs`; ties go
/// to the highest summed probability, then to the lowest class index.
template <typename T>
std::size_t fuse_majority(const Tensor<T>& probs, std::size_t k) {
  if (probs.rank() != 2) throw Error("fuse_majority expects [beats, classes] probabilities");
  if (k < 1 || k > probs.dim(0)) throw Error("fuse_majority: k must lie in [1, number of beats]");
  const std::size_t nc = probs.dim(1);
  std::vector<std::size_t> votes(nc, 0);
  std::vector<double> mass(nc, 0.0);
  for (std::size_t r = 0; r < k; ++r) {
    ++votes[argmax_row(probs, r)];
    for (std::size_t c = 0; c < nc; ++c) mass[c] += static_cast<double>(probs[r * nc + c]);
  }
  std::size_t best = 0;
  for (std::size_t c = 1; c < nc; ++c)
    if (votes[c] > votes[best] || (votes[c] == votes[best] && mass[c] > mass[best])) best = c;
  return best;
}

/// Groups `idx` by (subject, session) in record (peak) order.
inline std::vector<std::vector<std::size_t>> consecutive_runs(std::span<const Heartbeat> beats,
                                                              std::span<const std::size_t> idx) {
  std::map<std::pair<std::string, int>, std::vector<std::size_t>> groups;
  for (auto i : idx) groups[{beats[i].subject_id, beats[i].session_id}].push_back(i);
  std::vector<std::vector<std::size_t>> out;
  for (auto& [key, v] : groups) {
    std::stable_sort(v.begin(), v.end(), [&](std::size_t a, std::size_t b) { return beats[a].peak < beats[b].peak; });
    out.push_back(std::move(v));
  }
  return out;
}

/// Accuracy of k-beat fused decisions over non-overlapping chunks of
/// consecutive beats; a run's tail shorter than k is dropped.
template <typename T>
double fused_accuracy(const IdentifyModel<T>& m, std::span<const Heartbeat> beats,
                      std::span<const std::size_t> idx, std::size_t k) {
  if (k == 0) throw Error("fusion k must be positive");
  std::size_t correct = 0, decisions = 0;
  for (const auto& run : consecutive_runs(beats, idx)) {
    if (run.size() < k) continue;
    const auto p = predict_proba(m, beats, run);
    const std::size_t nc = m.n_classes();
    for (std::size_t s = 0; s + k <= run.size(); s += k) {
      Tensor<T> chunk({k, nc}, std::vector<T>(p.data() + s * nc, p.data() + (s + k) * nc));
      correct += fuse_majority(chunk, k) == m.class_index(beats[run[s]].subject_id);
      ++decisions;
    }
  }
  if (decisions == 0) throw Error("fused_accuracy: no run holds " + std::to_string(k) + " beats");
  return static_cast<double>(correct) / static_cast<double>(decisions);
}

// ---- cross-session -------------------------------------------------------------

struct CrossSessionResult {
  double acc_1_to_2 = 0.0;  // trained on session 1, tested on session 2
  double acc_2_to_1 = 0.0;
};

template <typename T = float>
CrossSessionResult cross_session_evaluate(std::span<const Heartbeat> beats, const IdentifyTrainConfig& cfg,
                                          double dropout = 0.25) {
  std::map<std::string, std::set<int>> sessions;
  for (const auto& b : beats) sessions[b.subject_id].insert(b.session_id);
  for (const auto& [s, set] : sessions)
    if (!set.count(1) || !set.count(2)) throw Error("cross-session: subject '" + s + "' lacks session 1 or 2");
  const auto plan = split_by_session(beats);
  const auto classes = subject_classes(beats);
  CrossSessionResult r;
  for (int train_session : {1, 2}) {
    auto m = build_identify_model<T>(classes, cfg.seed, dropout);
    const auto tr = plan.members(train_session);
    const auto te = plan.members(3 - train_session);
    train_identify(m, beats, tr, {}, cfg);
    const double acc = evaluate_identify(m, beats, te).metrics.accuracy;
    (train_session == 1 ? r.acc_1_to_2 : r.acc_2_to_1) = acc;
  }
  return r;
}

// ---- embeddings and saliency ------------------------------------------------------

/// sigmoid(dense-128 pre-activation): dropout and the softmax head play no
/// part.
template <typename T>
std::vector<std::vector<double>> embed(const ModelGraph<T>& g, std::span<const Heartbeat> beats,
                                       std::span<const std::size_t> idx, std::size_t batch = 64) {
  const NodeId tap = g.find("embedding");
  std::vector<std::vector<double>> out;
  out.reserve(idx.size());
  for (std::size_t b = 0; b < idx.size(); b += batch) {
    const auto part = idx.subspan(b, std::min(batch, idx.size() - b));
    const auto x = beat_batch<T>(beats, part);
    const auto z = g.predict_until(std::span<const Tensor<T>>(&x, 1), tap);
    for (std::size_t r = 0; r < part.size(); ++r) {
      std::vector<double> e(kEmbeddingWidth);
      for (std::size_t j = 0; j < kEmbeddingWidth; ++j)
        e[j] = static_cast<double>(kernels::stable_sigmoid(z[r * kEmbeddingWidth + j]));
      out.push_back(std::move(e));
    }
  }
  return out;
}

template <typename T>
std::vector<std::vector<double>> embed(const ModelGraph<T>& g, std::span<const Heartbeat> beats) {
  const auto idx = all_indices(beats.size());
  return embed(g, beats, idx);
}

/// |dL/dx| of the categorical cross-entropy at `label`, inference mode.
/// `loss_scale` multiplies the loss before differentiation.
template <typename T>
std::vector<double> saliency(ModelGraph<T>& g, std::span<const double> beat, std::size_t label,
                             double loss_scale = 1.0) {
  if (beat.size() != kBeatLength) throw Error("saliency expects a 256-sample beat");
  const Tensor<T> x({1, 1, kBeatLength}, std::vector<T>(beat.begin(), beat.end()));
  Tape<T> tape;
  const auto p = g.predict(std::span<const Tensor<T>>(&x, 1), tape).at(0);
  if (label >= p.dim(1)) throw Error("saliency label out of range");
  Tensor<T> y(p.shape(), T(0));
  y[label] = T(1);
  auto l = categorical_crossentropy(p, y);
  for (auto& v : l.grad.vec()) v *= static_cast<T>(loss_scale);
  g.backward(tape, std::span<const Tensor<T>>(&l.grad, 1));
  const auto& gx = tape.grads.at(g.inputs().at(0));
  std::vector<double> s(kBeatLength, 0.0);
  if (!gx.empty())
    for (std::size_t i = 0; i < kBeatLength; ++i) s[i] = std::abs(static_cast<double>(gx[i]));
  return s;
}

}  // namespace pulsegate
