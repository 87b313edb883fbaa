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

// Identity verification over frozen beat embeddings: pair features, the
// Siamese head, SMOTE balancing, templates, scoring backends and FAR/FRR/EER.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "pulsegate/identify.hpp"
#include "pulsegate/serialize.hpp"
#include "pulsegate/train.hpp"

namespace pulsegate {

using Embedding = std::vector<double>;

namespace verify_detail {
inline void check_pair(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size())
    throw Error("embedding lengths differ: " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
}
}  // namespace verify_detail

inline std::vector<double> squared_difference(std::span<const double> u, std::span<const double> v) {
  verify_detail::check_pair(u, v);
  std::vector<double> d(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) d[i] = (v[i] - u[i]) * (v[i] - u[i]);
  return d;
}

inline std::vector<double> product_proximity(std::span<const double> u, std::span<const double> v) {
  verify_detail::check_pair(u, v);
  std::vector<double> d(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) d[i] = v[i] * u[i];
  return d;
}

/// Squared difference followed by product proximity.
inline std::vector<double> combined_metric(std::span<const double> u, std::span<const double> v) {
  auto d = squared_difference(u, v);
  const auto p = product_proximity(u, v);
  d.insert(d.end(), p.begin(), p.end());
  return d;
}

// ---- Siamese head --------------------------------------------------------------

/// Inputs "sqdiff" and "prodprox" (both symmetric in the two embeddings), so
/// swapping the pair cannot change a single bit of the output.
template <typename T = float>
ModelGraph<T> build_siamese_head(std::uint64_t seed, std::size_t width = kEmbeddingWidth,
                                 std::size_t branch = 32) {
  ModelGraph<T> g;
  const NodeId sq = g.input("sqdiff", {width});
  const NodeId pp = g.input("prodprox", {width});
  const NodeId comb = g.concat({sq, pp}, "combined");
  const NodeId b1 = g.relu(g.dense(sq, branch, "sqdiff_dense"));
  const NodeId b2 = g.relu(g.dense(pp, branch, "prodprox_dense"));
  const NodeId b3 = g.relu(g.dense(comb, branch, "combined_dense"));
  const NodeId out = g.sigmoid(g.dense(g.concat({b1, b2, b3}), 1, "match"), "score");
  g.set_outputs({out});
  g.initialize(seed);
  return g;
}

template <typename T>
std::vector<Tensor<T>> siamese_inputs(std::span<const Embedding> us, std::span<const Embedding> vs) {
  if (us.size() != vs.size() || us.empty()) throw Error("siamese: need equally many non-empty u and v rows");
  const std::size_t w = us[0].size();
  Tensor<T> sq({us.size(), w}), pp({us.size(), w});
  for (std::size_t r = 0; r < us.size(); ++r) {
    verify_detail::check_pair(us[r], vs[r]);
    if (us[r].size() != w) throw Error("siamese: ragged embedding batch");
    for (std::size_t i = 0; i < w; ++i) {
      // Rounded to T before combining so the features are symmetric in T too.
      const T a = static_cast<T>(us[r][i]), b = static_cast<T>(vs[r][i]);
      sq[r * w + i] = (b - a) * (b - a);
      pp[r * w + i] = b * a;
    }
  }
  return {std::move(sq), std::move(pp)};
}

/// Head outputs for row-aligned pairs.
template <typename T>
std::vector<double> siamese_scores(const ModelGraph<T>& head, std::span<const Embedding> us,
                                   std::span<const Embedding> vs, std::size_t batch = 512) {
  std::vector<double> out;
  out.reserve(us.size());
  Tape<T> tape;
  for (std::size_t b = 0; b < us.size(); b += batch) {
    const std::size_t n = std::min(batch, us.size() - b);
    const auto in = siamese_inputs<T>(us.subspan(b, n), vs.subspan(b, n));
    const auto p = head.predict(in, tape).at(0);
    for (std::size_t i = 0; i < n; ++i) out.push_back(static_cast<double>(p[i]));
  }
  return out;
}

// ---- pairs and SMOTE -----------------------------------------------------------

struct EmbeddingPair {
  Embedding u, v;
  double label = 0.0;  // 1 match, 0 mismatch
  std::string subject;  // owner of u
};

struct PairOptions {
  std::size_t matched_per_subject = 20;
  std::size_t mismatched_per_subject = 450;  // about (1 + smote ratio) x matched
  std::uint64_t seed = 7;
};

struct PairSet {
  std::vector<EmbeddingPair> matched, mismatched;
};

/// Random matched pairs (two distinct beats of one subject) and mismatched
/// pairs (a beat against another subject's beat) for each subject.
inline PairSet make_pairs(std::span<const Embedding> emb,
                                             std::span<const std::string> subjects,
                                             const PairOptions& opt) {
  if (emb.size() != subjects.size()) throw Error("make_pairs: one subject label per embedding");
  std::map<std::string, std::vector<std::size_t>> by;
  for (std::size_t i = 0; i < subjects.size(); ++i) by[subjects[i]].push_back(i);
  if (by.size() < 2) throw Error("make_pairs: need at least two subjects");
  std::mt19937_64 rng(opt.seed);
  PairSet out;
  for (const auto& [s, idx] : by) {
    if (idx.size() < 2) throw Error("make_pairs: subject '" + s + "' has fewer than two beats");
    std::vector<std::size_t> others;
    for (std::size_t i = 0; i < subjects.size(); ++i)
      if (subjects[i] != s) others.push_back(i);
    std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1), pick_o(0, others.size() - 1);
    for (std::size_t k = 0; k < opt.matched_per_subject; ++k) {
      const std::size_t a = pick(rng);
      std::size_t b = pick(rng);
      while (b == a) b = pick(rng);
      out.matched.push_back({emb[idx[a]], emb[idx[b]], 1.0, s});
    }
    for (std::size_t k = 0; k < opt.mismatched_per_subject; ++k)
      out.mismatched.push_back({emb[idx[pick(rng)]], emb[others[pick_o(rng)]], 0.0, s});
  }
  return out;
}

/// Oversamples matched pairs per subject on their concatenated [u, v]
/// vectors: round(ratio x count) synthetic points x + r (nn - x), nn one of
/// the k nearest matched vectors of that subject. Returns the matched pairs,
/// the synthetic ones, then the mismatched pairs.
inline std::vector<EmbeddingPair> smote_pairs(std::span<const EmbeddingPair> matched,
                                              std::span<const EmbeddingPair> mismatched, double ratio = 21.5,
                                              std::size_t k_neighbors = 5, std::uint64_t seed = 7) {
  if (!(ratio >= 0.0)) throw Error("smote: ratio must be non-negative");
  if (k_neighbors == 0) throw Error("smote: need at least one neighbour");
  std::vector<EmbeddingPair> out(matched.begin(), matched.end());
  std::map<std::string, std::vector<std::size_t>> by;
  for (std::size_t i = 0; i < matched.size(); ++i) {
    if (matched[i].label != 1.0) throw Error("smote: matched pair with label " + std::to_string(matched[i].label));
    by[matched[i].subject].push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (const auto& [s, idx] : by) {
    if (ratio == 0.0) break;
    if (idx.size() < k_neighbors + 1)
      throw Error("smote: subject '" + s + "' has " + std::to_string(idx.size()) +
                  " matched pairs, need at least " + std::to_string(k_neighbors + 1));
    std::vector<std::vector<double>> pts;
    for (auto i : idx) {
      std::vector<double> p(matched[i].u);
      p.insert(p.end(), matched[i].v.begin(), matched[i].v.end());
      if (!pts.empty() && p.size() != pts.front().size()) throw Error("smote: ragged pairs");
      pts.push_back(std::move(p));
    }
    // k nearest neighbours of every point, ties by index
    std::vector<std::vector<std::size_t>> nn(pts.size());
    for (std::size_t a = 0; a < pts.size(); ++a) {
      std::vector<std::pair<double, std::size_t>> d;
      for (std::size_t b = 0; b < pts.size(); ++b) {
        if (b == a) continue;
        double s2 = 0.0;
        for (std::size_t j = 0; j < pts[a].size(); ++j) s2 += (pts[a][j] - pts[b][j]) * (pts[a][j] - pts[b][j]);
        d.emplace_back(s2, b);
      }
      std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k_neighbors), d.end());
      for (std::size_t j = 0; j < k_neighbors; ++j) nn[a].push_back(d[j].second);
    }
    const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(idx.size())));
    const std::size_t w = matched[idx[0]].u.size();
    std::uniform_int_distribution<std::size_t> pick_nn(0, k_neighbors - 1);
    for (std::size_t c = 0; c < count; ++c) {
      const std::size_t a = c % pts.size();
      const auto& x = pts[a];
      const auto& y = pts[nn[a][pick_nn(rng)]];
      const double r = unit(rng);
      EmbeddingPair p;
      p.label = 1.0;
      p.subject = s;
      p.u.resize(w);
      p.v.resize(w);
      for (std::size_t j = 0; j < 2 * w; ++j) (j < w ? p.u[j] : p.v[j - w]) = x[j] + r * (y[j] - x[j]);
      out.push_back(std::move(p));
    }
  }
  out.insert(out.end(), mismatched.begin(), mismatched.end());
  return out;
}

// ---- head training -------------------------------------------------------------

struct SiameseTrainConfig {
  std::size_t epochs = 75;
  std::size_t batch_size = 32;
  double val_fraction = 0.2;
  std::uint64_t seed = 7;
  AdamConfig adam{};
};

struct SiameseTrainResult {
  std::vector<EpochLog> log;
  double val_matched_mean = 0.0;
  double val_mismatched_mean = 0.0;
};

/// Refuses verification subjects the embedder was trained on.
inline void check_disjoint(std::span<const std::string> embedder_classes,
                           std::span<const std::string> verification_subjects) {
  const std::set<std::string> a(embedder_classes.begin(), embedder_classes.end());
  for (const auto& s : verification_subjects)
    if (a.count(s))
      throw Error("verification subject '" + s + "' was used to train the embedder (subject sets must be disjoint)");
}

/// MSE against {0,1} labels on a seeded 80/20 split of the pairs.
template <typename T>
SiameseTrainResult train_siamese(ModelGraph<T>& head, std::span<const EmbeddingPair> pairs,
                                 const SiameseTrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  if (pairs.size() < 2) throw Error("train_siamese: need at least two pairs");
  if (cfg.batch_size == 0) throw Error("train_siamese: batch size must be positive");
  std::mt19937_64 rng(cfg.seed);
  auto order = shuffled(pairs.size(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(pairs.size())));
  const std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  if (train.empty()) throw Error("train_siamese: empty training split");

  auto batch_of = [&](std::span<const std::size_t> idx) {
    std::vector<Embedding> us, vs;
    Tensor<T> y({idx.size(), 1});
    for (std::size_t b = 0; b < idx.size(); ++b) {
      us.push_back(pairs[idx[b]].u);
      vs.push_back(pairs[idx[b]].v);
      y[b] = static_cast<T>(pairs[idx[b]].label);
    }
    return std::make_pair(siamese_inputs<T>(us, vs), y);
  };
  auto evaluate = [&](SiameseTrainResult& res, EpochLog& e) {
    if (val.empty()) return;
    std::vector<Embedding> us, vs;
    for (auto i : val) {
      us.push_back(pairs[i].u);
      vs.push_back(pairs[i].v);
    }
    const auto s = siamese_scores(head, us, vs);
    double se = 0, m1 = 0, m0 = 0;
    std::size_t n1 = 0, n0 = 0, correct = 0;
    for (std::size_t r = 0; r < val.size(); ++r) {
      const double t = pairs[val[r]].label;
      se += (s[r] - t) * (s[r] - t);
      correct += (s[r] >= 0.5) == (t == 1.0);
      (t == 1.0 ? (m1 += s[r], ++n1) : (m0 += s[r], ++n0));
    }
    e.val_loss = se / static_cast<double>(val.size());
    e.val_metric = static_cast<double>(correct) / static_cast<double>(val.size());
    res.val_matched_mean = n1 ? m1 / static_cast<double>(n1) : 0.0;
    res.val_mismatched_mean = n0 ? m0 / static_cast<double>(n0) : 0.0;
  };

  SiameseTrainResult res;
  Adam<T> opt(cfg.adam);
  const double one = 1.0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    double acc = 0.0;
    for (std::size_t b = 0; b < train.size(); b += cfg.batch_size) {
      const auto part = std::span<const std::size_t>(train).subspan(b, std::min(cfg.batch_size, train.size() - b));
      const auto [x, y] = batch_of(part);
      const double l = train_step<T>(head, opt, x, std::span<const Tensor<T>>(&y, 1),
                                     std::span<const double>(&one, 1), LossKind::mse);
      check_finite_loss(l, epoch);
      acc += l * static_cast<double>(part.size());
    }
    EpochLog e{epoch, acc / static_cast<double>(train.size()), 0.0, 0.0};
    evaluate(res, e);
    res.log.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  return res;
}

// ---- templates and scoring -------------------------------------------------------

struct Template {
  std::string subject_id;
  Embedding centroid;
  std::size_t count = 0;
};

inline Template enroll(const std::string& subject, std::span<const Embedding> embeddings) {
  if (embeddings.empty()) throw Error("enroll: subject '" + subject + "' has no enrollment embeddings");
  Template t{subject, Embedding(embeddings[0].size(), 0.0), embeddings.size()};
  for (const auto& e : embeddings) {
    if (e.size() != t.centroid.size()) throw Error("enroll: ragged embeddings");
    for (std::size_t i = 0; i < e.size(); ++i) t.centroid[i] += e[i];
  }
  for (auto& v : t.centroid) v /= static_cast<double>(embeddings.size());
  return t;
}

// Template file: "PGT1", str subject, str config_hash, u32 count, u32 width,
// f32 centroid[width]; little-endian, str = u16 length + bytes.
inline void save_template(const std::string& path, const Template& t, const std::string& config_hash = {}) {
  detail::ByteWriter w;
  w.bytes().insert(w.bytes().end(), {'P', 'G', 'T', '1'});
  w.put_str(t.subject_id);
  w.put_str(config_hash);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.count));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.centroid.size()));
  for (double v : t.centroid) w.put<float>(static_cast<float>(v));
  write_file_bytes(path, w.bytes());
}

inline Template load_template(const std::string& path, std::string* config_hash = nullptr) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() < 4 || std::string(bytes.data(), 4) != "PGT1") throw Error("'" + path + "' is not a template file");
  detail::ByteReader r(bytes.data() + 4, bytes.size() - 4);
  Template t;
  t.subject_id = r.get_str();
  const auto hash = r.get_str();
  if (config_hash) *config_hash = hash;
  t.count = r.get<std::uint32_t>();
  t.centroid.resize(r.get<std::uint32_t>());
  for (auto& v : t.centroid) v = r.get<float>();
  if (r.remaining() != 0) throw Error("'" + path + "': trailing bytes in template file");
  return t;
}

enum class Backend { siamese, cosine, euclidean };

inline Backend parse_backend(const std::string& s) {
  if (s == "siamese") return Backend::siamese;
  if (s == "cosine") return Backend::cosine;
  if (s == "euclidean") return Backend::euclidean;
  throw Error("unknown backend '" + s + "' (expected siamese, cosine or euclidean)");
}

inline const char* backend_name(Backend b) {
  switch (b) {
    case Backend::siamese: return "siamese";
    case Backend::cosine: return "cosine";
    case Backend::euclidean: return "euclidean";
  }
  return "?";
}

/// (1 + cos) / 2.
inline double cosine_score(std::span<const double> a, std::span<const double> b) {
  verify_detail::check_pair(a, b);
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw Error("cosine score of a zero-norm vector");
  const double c = std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
  return 0.5 * (1.0 + c);
}

/// 1 / (1 + L2).
inline double euclidean_score(std::span<const double> a, std::span<const double> b) {
  verify_detail::check_pair(a, b);
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return 1.0 / (1.0 + std::sqrt(s));
}

/// Scores row-aligned (template, embedding) pairs. The head is only consulted
/// for the siamese backend.
template <typename T>
std::vector<double> score_pairs(Backend backend, const ModelGraph<T>* head, std::span<const Embedding> templates,
                                std::span<const Embedding> probes) {
  if (templates.size() != probes.size()) throw Error("score: one template per probe");
  if (backend == Backend::siamese) {
    if (!head) throw Error("siamese backend needs a trained head");
    if (templates.empty()) return {};
    return siamese_scores(*head, templates, probes);
  }
  std::vector<double> out(probes.size());
  for (std::size_t i = 0; i < probes.size(); ++i)
    out[i] = backend == Backend::cosine ? cosine_score(templates[i], probes[i]) : euclidean_score(templates[i], probes[i]);
  return out;
}

template <typename T>
double score(Backend backend, const ModelGraph<T>* head, const Template& t, const Embedding& e) {
  return score_pairs(backend, head, std::span<const Embedding>(&t.centroid, 1), std::span<const Embedding>(&e, 1)).at(0);
}

// ---- FAR / FRR / EER ---------------------------------------------------------------

struct EerCurve {
  std::vector<double> thresholds;  // 0, 1e-3, ..., 1
  std::vector<double> far, frr;
  double eer = 0.0;
  double eer_threshold = 0.0;
  double auc = 0.0;
  std::size_t n_genuine = 0, n_imposter = 0;
};

inline constexpr double kSweepStep = 1e-3;

/// Error rates at one threshold, given sorted score lists.
inline std::pair<double, double> far_frr_at(std::span<const double> gen_sorted, std::span<const double> imp_sorted,
                                            double th) {
  const auto imp_below = std::lower_bound(imp_sorted.begin(), imp_sorted.end(), th) - imp_sorted.begin();
  const auto gen_below = std::lower_bound(gen_sorted.begin(), gen_sorted.end(), th) - gen_sorted.begin();
  const double far = static_cast<double>(imp_sorted.size() - static_cast<std::size_t>(imp_below)) /
                     static_cast<double>(imp_sorted.size());
  const double frr = static_cast<double>(gen_below) / static_cast<double>(gen_sorted.size());
  return {far, frr};
}

/// FAR(th) = #imposter >= th / nI, FRR(th) = #genuine < th / nG, swept over
/// [0, 1] in 1e-3 steps. The crossing is located on that grid merged with
/// every distinct score (where the step functions actually change), then
/// linearly interpolated between the two bracketing points.
inline EerCurve far_frr_eer(std::span<const double> genuine, std::span<const double> imposter) {
  if (genuine.empty() || imposter.empty()) throw Error("far_frr_eer: both score sets must be non-empty");
  for (auto set : {genuine, imposter})
    for (double s : set)
      if (!(s >= 0.0 && s <= 1.0)) throw Error("far_frr_eer: score " + std::to_string(s) + " outside [0,1]");
  std::vector<double> g(genuine.begin(), genuine.end()), im(imposter.begin(), imposter.end());
  std::sort(g.begin(), g.end());
  std::sort(im.begin(), im.end());

  EerCurve c;
  c.n_genuine = g.size();
  c.n_imposter = im.size();
  const std::size_t steps = static_cast<std::size_t>(std::llround(1.0 / kSweepStep));
  for (std::size_t i = 0; i <= steps; ++i) {
    const double th = static_cast<double>(i) / static_cast<double>(steps);
    const auto [far, frr] = far_frr_at(g, im, th);
    c.thresholds.push_back(th);
    c.far.push_back(far);
    c.frr.push_back(frr);
  }

  std::vector<double> ths(c.thresholds);
  ths.insert(ths.end(), g.begin(), g.end());
  ths.insert(ths.end(), im.begin(), im.end());
  ths.push_back(1.0 + kSweepStep);  // beyond every score: FAR 0, FRR 1
  std::sort(ths.begin(), ths.end());
  ths.erase(std::unique(ths.begin(), ths.end()), ths.end());
  std::vector<double> far(ths.size()), frr(ths.size());
  for (std::size_t i = 0; i < ths.size(); ++i) std::tie(far[i], frr[i]) = far_frr_at(g, im, ths[i]);

  for (std::size_t b = 0; b < ths.size(); ++b) {
    const double db = far[b] - frr[b];
    if (db > 0.0) continue;
    if (db == 0.0 || b == 0) {
      c.eer = far[b];
      c.eer_threshold = ths[b];
    } else {
      const double da = far[b - 1] - frr[b - 1];
      const double t = da / (da - db);
      c.eer = far[b - 1] + t * (far[b] - far[b - 1]);
      c.eer_threshold = ths[b - 1] + t * (ths[b] - ths[b - 1]);
    }
    break;
  }

  // ROC: TAR = 1 - FRR against FAR, trapezoids in order of increasing FAR.
  double auc = 0.0;
  for (std::size_t i = ths.size() - 1; i > 0; --i) {
    const double x0 = far[i], x1 = far[i - 1];
    const double y0 = 1.0 - frr[i], y1 = 1.0 - frr[i - 1];
    auc += (x1 - x0) * 0.5 * (y0 + y1);
  }
  c.auc = auc;
  return c;
}

/// th,far,frr rows of the 1e-3 sweep.
inline std::string curve_csv(const EerCurve& c) {
  std::string out = "th,far,frr\n";
  char line[96];
  for (std::size_t i = 0; i < c.thresholds.size(); ++i) {
    std::snprintf(line, sizeof line, "%.3f,%.9g,%.9g\n", c.thresholds[i], c.far[i], c.frr[i]);
    out += line;
  }
  return out;
}

// ---- enrollment protocol -------------------------------------------------------------

struct SubjectSplit {
  std::string subject;
  std::vector<std::size_t> enroll, evaluate;  // beat indices in session / peak order
};

/// Per subject, the first enrollment_fraction of beats (at least one) enroll,
/// the rest are held for evaluation. Subjects come out in id order.
inline std::vector<SubjectSplit> enrollment_split(std::span<const Heartbeat> beats, double enrollment_fraction) {
  if (!(enrollment_fraction > 0.0 && enrollment_fraction <= 1.0))
    throw Error("enrollment fraction must lie in (0, 1]");
  std::map<std::string, std::vector<std::size_t>> by;
  for (std::size_t i = 0; i < beats.size(); ++i) by[beats[i].subject_id].push_back(i);
  std::vector<SubjectSplit> out;
  for (auto& [s, idx] : by) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return std::tie(beats[a].session_id, beats[a].peak) < std::tie(beats[b].session_id, beats[b].peak);
    });
    const auto n = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(enrollment_fraction * static_cast<double>(idx.size()))), 1, idx.size());
    out.push_back({s, {idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n)},
                   {idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end()}});
  }
  return out;
}

inline std::vector<Template> enroll_all(std::span<const SubjectSplit> split, std::span<const Embedding> emb) {
  std::vector<Template> out;
  for (const auto& sp : split) {
    std::vector<Embedding> e;
    for (auto i : sp.enroll) e.push_back(emb[i]);
    out.push_back(enroll(sp.subject, e));
  }
  return out;
}

// ---- verifier training ---------------------------------------------------------------

struct VerifierConfig {
  double enrollment_fraction = 0.4;
  PairOptions pairs{};
  double smote_ratio = 21.5;
  std::size_t smote_k = 5;
  SiameseTrainConfig train{};
};

template <typename T>
struct VerifierFit {
  ModelGraph<T> head;
  SiameseTrainResult result;
  std::size_t n_pairs = 0;
};

/// Trains a Siamese head for a verification population: pairs are drawn from
/// the enrollment beats only (evaluation beats stay unseen), balanced with
/// SMOTE, then fitted. The embedder is only read.
template <typename T>
VerifierFit<T> train_verifier(const IdentifyModel<T>& embedder, std::span<const Heartbeat> beats,
                              const VerifierConfig& cfg, const EpochCallback& on_epoch = {}) {
  std::vector<std::string> subjects;
  for (const auto& b : beats) subjects.push_back(b.subject_id);
  check_disjoint(embedder.classes, subjects);
  const auto split = enrollment_split(beats, cfg.enrollment_fraction);
  std::vector<std::size_t> idx;
  for (const auto& sp : split) idx.insert(idx.end(), sp.enroll.begin(), sp.enroll.end());
  const auto emb = embed(embedder.graph, beats, idx);
  std::vector<std::string> who;
  for (auto i : idx) who.push_back(beats[i].subject_id);
  const auto ps = make_pairs(emb, who, cfg.pairs);
  const auto pairs = smote_pairs(ps.matched, ps.mismatched, cfg.smote_ratio, cfg.smote_k, cfg.pairs.seed);
  VerifierFit<T> fit{build_siamese_head<T>(cfg.train.seed, emb.at(0).size()), {}, pairs.size()};
  fit.result = train_siamese(fit.head, pairs, cfg.train, on_epoch);
  return fit;
}

// ---- experiment ----------------------------------------------------------------------

struct VerificationTrials {
  std::vector<double> genuine, imposter;
  std::size_t skipped_subjects = 0;  // fewer than k evaluation beats
  std::vector<Template> templates;
};

/// Each subject's evaluation beats are cut into non-overlapping runs of k,
/// and every run is scored against every template as the mean of its per-beat
/// scores; genuine when the template belongs to the run's subject.
template <typename T>
VerificationTrials score_trials(std::span<const SubjectSplit> split, std::span<const Embedding> emb,
                                std::vector<Template> templates, std::size_t k, Backend backend,
                                const ModelGraph<T>* head) {
  if (k == 0) throw Error("verification: beats per decision must be positive");
  if (templates.size() < 2) throw Error("verification: need at least two enrolled subjects");
  std::set<std::string> enrolled;
  for (const auto& t : templates) enrolled.insert(t.subject_id);
  VerificationTrials out;
  std::vector<std::pair<std::string, std::vector<std::size_t>>> runs;
  for (const auto& sp : split) {
    if (!enrolled.count(sp.subject)) throw Error("verification: no template for subject '" + sp.subject + "'");
    std::size_t n = 0;
    for (std::size_t j = 0; j + k <= sp.evaluate.size(); j += k, ++n)
      runs.emplace_back(sp.subject, std::vector<std::size_t>(sp.evaluate.begin() + static_cast<std::ptrdiff_t>(j),
                                                             sp.evaluate.begin() + static_cast<std::ptrdiff_t>(j + k)));
    if (n == 0) ++out.skipped_subjects;
  }
  if (runs.empty()) throw Error("verification: no evaluation trials (enrollment fraction leaves too few beats)");

  for (const auto& t : templates) {
    std::vector<Embedding> tpl, probe;
    for (const auto& [subject, run] : runs)
      for (auto i : run) {
        tpl.push_back(t.centroid);
        probe.push_back(emb[i]);
      }
    const auto s = score_pairs(backend, head, tpl, probe);
    std::size_t at = 0;
    for (const auto& [subject, run] : runs) {
      double m = 0.0;
      for (std::size_t j = 0; j < run.size(); ++j) m += s[at++];
      m /= static_cast<double>(run.size());
      (subject == t.subject_id ? out.genuine : out.imposter).push_back(m);
    }
  }
  out.templates = std::move(templates);
  return out;
}

/// Templates from the first enrollment_fraction of each subject's beats, trials
/// from the rest.
template <typename T>
VerificationTrials verification_trials(std::span<const Heartbeat> beats, std::span<const Embedding> emb,
                                       double enrollment_fraction, std::size_t k, Backend backend,
                                       const ModelGraph<T>* head) {
  if (beats.size() != emb.size()) throw Error("verification: one embedding per beat");
  const auto split = enrollment_split(beats, enrollment_fraction);
  return score_trials(split, emb, enroll_all(split, emb), k, backend, head);
}

template <typename T>
EerCurve verification_experiment(std::span<const Heartbeat> beats, std::span<const Embedding> emb,
                                 double enrollment_fraction, std::size_t k, Backend backend,
                                 const ModelGraph<T>* head) {
  const auto tr = verification_trials(beats, emb, enrollment_fraction, k, backend, head);
  return far_frr_eer(tr.genuine, tr.imposter);
}

}  // namespace pulsegate
