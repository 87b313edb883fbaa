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

// Learned R-peak detector: a three-level 1D encoder-decoder that maps a
// 1024-sample window to a per-sample peak probability, trained with auxiliary
// heads on the two coarser decoder levels.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "pulsegate/signal.hpp"
#include "pulsegate/train.hpp"

namespace pulsegate {

inline constexpr std::size_t kDetectorWindow = 1024;
inline constexpr std::size_t kDetectorStep = 256;
inline constexpr std::size_t kDetectorDepth = 3;

struct DetectorWindow {
  std::size_t start = 0;
  std::vector<float> input;                // z-scored slice
  std::vector<float> target;               // pulse train
  std::vector<std::vector<float>> aux;     // aux[d-1] has length W / 2^d
};

/// A coarse bin is 1 when any fine sample inside it is 1.
inline std::vector<float> subsample_pulses(std::span<const float> fine, std::size_t factor) {
  if (factor == 0 || fine.size() % factor != 0) throw Error("subsample factor must divide length");
  std::vector<float> out(fine.size() / factor, 0.0f);
  for (std::size_t i = 0; i < fine.size(); ++i)
    if (fine[i] != 0.0f) out[i / factor] = 1.0f;
  return out;
}

inline std::vector<float> window_input(std::span<const double> slice) {
  const auto z = zscore(slice);
  return {z.values.begin(), z.values.end()};
}

inline std::vector<DetectorWindow> make_windows(const EcgRecord& rec) {
  if (!rec.rpeaks) throw Error("make_windows: record '" + rec.subject_id + "' has no annotations");
  if (rec.samples.size() < kDetectorWindow)
    throw Error("make_windows: record shorter than one " + std::to_string(kDetectorWindow) +
                "-sample window");
  std::vector<DetectorWindow> out;
  const auto& peaks = *rec.rpeaks;
  for (std::size_t s = 0; s + kDetectorWindow <= rec.samples.size(); s += kDetectorStep) {
    DetectorWindow w;
    w.start = s;
    w.input = window_input(std::span<const double>(rec.samples).subspan(s, kDetectorWindow));
    w.target.assign(kDetectorWindow, 0.0f);
    for (auto it = std::lower_bound(peaks.begin(), peaks.end(), s);
         it != peaks.end() && *it < s + kDetectorWindow; ++it)
      w.target[*it - s] = 1.0f;
    for (std::size_t d = 1; d < kDetectorDepth; ++d)
      w.aux.push_back(subsample_pulses(w.target, std::size_t{1} << d));
    out.push_back(std::move(w));
  }
  return out;
}

/// Outputs, in order: "prob" [1, W], "aux_mid" [1, W/2], "aux_coarse" [1, W/4].
template <typename T = float>
ModelGraph<T> build_detector(std::uint64_t seed, std::size_t base_filters = 16,
                             std::size_t kernel = 9) {
  if (base_filters % 4 != 0) throw Error("detector base filters must be a multiple of 4");
  auto widths = [](std::size_t f) { return std::vector<std::size_t>{f / 4, f / 4, f / 2}; };
  ModelGraph<T> g;
  const std::size_t f1 = base_filters, f2 = 2 * base_filters, f3 = 4 * base_filters;
  const NodeId x = g.input("signal", {1, kDetectorWindow});
  const NodeId e1 = multires_block(g, x, widths(f1), kernel);
  const NodeId e2 = multires_block(g, g.maxpool1d(e1, 2), widths(f2), kernel);
  const NodeId e3 = multires_block(g, g.maxpool1d(e2, 2), widths(f3), kernel);
  const NodeId d2 = multires_block(g, g.concat({g.upsample1d(e3, 2), e2}), widths(f2), kernel);
  const NodeId d1 = multires_block(g, g.concat({g.upsample1d(d2, 2), e1}), widths(f1), kernel);
  const NodeId prob = g.sigmoid(g.conv1d(d1, 1, 1), "prob");
  const NodeId mid = g.sigmoid(g.conv1d(d2, 1, 1), "aux_mid");
  const NodeId coarse = g.sigmoid(g.conv1d(e3, 1, 1), "aux_coarse");
  g.set_outputs({prob, mid, coarse});
  g.initialize(seed);
  return g;
}

struct DetectorTrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  double val_fraction = 0.2;
  // Auxiliary weights, coarse then mid; the main output always weighs 1.
  // Empty disables deep supervision.
  std::vector<double> aux_weights{0.25, 0.5};
  std::uint64_t seed = 7;
  AdamConfig adam{};
  std::size_t base_filters = 16;
  std::size_t kernel = 9;
};

template <typename T = float>
struct DetectorTrainResult {
  ModelGraph<T> model;
  std::vector<EpochLog> log;
  double baseline_val_loss = 0.0;  // untrained model
};

namespace rpeak_detail {

template <typename T>
std::vector<Tensor<T>> window_targets(std::span<const DetectorWindow> ws,
                                      std::span<const std::size_t> idx) {
  std::vector<Tensor<T>> t;
  t.push_back(gather<T>(ws, idx, {1, kDetectorWindow},
                        [](const DetectorWindow& w) -> const auto& { return w.target; }));
  t.push_back(gather<T>(ws, idx, {1, kDetectorWindow / 2},
                        [](const DetectorWindow& w) -> const auto& { return w.aux[0]; }));
  t.push_back(gather<T>(ws, idx, {1, kDetectorWindow / 4},
                        [](const DetectorWindow& w) -> const auto& { return w.aux[1]; }));
  return t;
}

template <typename T>
Tensor<T> window_inputs(std::span<const DetectorWindow> ws, std::span<const std::size_t> idx) {
  return gather<T>(ws, idx, {1, kDetectorWindow},
                   [](const DetectorWindow& w) -> const auto& { return w.input; });
}

}  // namespace rpeak_detail

/// Weighted binary cross-entropy over the validation windows, infer mode.
template <typename T>
double detector_loss(const ModelGraph<T>& g, std::span<const DetectorWindow> ws,
                     std::span<const std::size_t> idx, std::span<const double> weights,
                     std::size_t batch = 32) {
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < idx.size(); b += batch) {
    const auto part = idx.subspan(b, std::min(batch, idx.size() - b));
    const auto x = rpeak_detail::window_inputs<T>(ws, part);
    const auto outs = g.predict(std::span<const Tensor<T>>(&x, 1));
    const auto tg = rpeak_detail::window_targets<T>(ws, part);
    double l = 0.0;
    for (std::size_t o = 0; o < outs.size(); ++o)
      if (weights[o] != 0.0) l += weights[o] * binary_crossentropy(outs[o], tg[o]).value;
    acc += l * static_cast<double>(part.size());
    count += part.size();
  }
  return count ? acc / static_cast<double>(count) : 0.0;
}

template <typename T = float>
DetectorTrainResult<T> train_detector(std::span<const DetectorWindow> windows,
                                      const DetectorTrainConfig& cfg,
                                      const EpochCallback& on_epoch = {}) {
  if (windows.size() < 100)
    throw Error("train_detector: need at least 100 windows, got " + std::to_string(windows.size()));
  if (!cfg.aux_weights.empty() && cfg.aux_weights.size() != kDetectorDepth - 1)
    throw Error("train_detector: expected 2 auxiliary weights (coarse, mid) or none");
  if (cfg.batch_size == 0) throw Error("train_detector: batch size must be positive");
  const std::vector<double> weights =
      cfg.aux_weights.empty() ? std::vector<double>{1.0, 0.0, 0.0}
                              : std::vector<double>{1.0, cfg.aux_weights[1], cfg.aux_weights[0]};

  std::mt19937_64 rng(cfg.seed);
  auto order = shuffled(windows.size(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * windows.size()));
  const std::vector<std::size_t> val(order.begin(), order.begin() + n_val);
  std::vector<std::size_t> train(order.begin() + n_val, order.end());

  DetectorTrainResult<T> res{build_detector<T>(cfg.seed, cfg.base_filters, cfg.kernel), {}, 0.0};
  auto& g = res.model;
  res.baseline_val_loss = detector_loss(g, windows, val, weights);
  Adam<T> opt(cfg.adam);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    double acc = 0.0;
    for (std::size_t b = 0; b < train.size(); b += cfg.batch_size) {
      const auto part = std::span<const std::size_t>(train).subspan(
          b, std::min(cfg.batch_size, train.size() - b));
      const auto x = rpeak_detail::window_inputs<T>(windows, part);
      const auto tg = rpeak_detail::window_targets<T>(windows, part);
      const double l =
          train_step<T>(g, opt, std::span<const Tensor<T>>(&x, 1), tg, weights,
                        LossKind::binary_crossentropy);
      check_finite_loss(l, epoch);
      acc += l * static_cast<double>(part.size());
    }
    EpochLog e{epoch, acc / static_cast<double>(train.size()), 0.0, 0.0};
    e.val_loss = val.empty() ? 0.0 : detector_loss(g, windows, val, weights);
    check_finite_loss(e.val_loss, epoch);
    res.log.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  return res;
}

/// Per-sample peak probability over a whole record; overlapping windows are
/// averaged. Records shorter than a window are edge-padded.
template <typename T>
std::vector<double> probability_map(const ModelGraph<T>& g, std::span<const double> signal,
                                    std::size_t batch = 32) {
  if (signal.empty()) return {};
  std::vector<double> padded(signal.begin(), signal.end());
  if (padded.size() < kDetectorWindow) padded.resize(kDetectorWindow, padded.back());
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + kDetectorWindow <= padded.size(); s += kDetectorStep) starts.push_back(s);
  if (starts.back() + kDetectorWindow < padded.size()) starts.push_back(padded.size() - kDetectorWindow);

  std::vector<double> sum(padded.size(), 0.0), cnt(padded.size(), 0.0);
  for (std::size_t b = 0; b < starts.size(); b += batch) {
    const std::size_t nb = std::min(batch, starts.size() - b);
    Tensor<T> x({nb, 1, kDetectorWindow});
    for (std::size_t k = 0; k < nb; ++k) {
      const auto in = window_input(std::span<const double>(padded).subspan(starts[b + k], kDetectorWindow));
      std::copy(in.begin(), in.end(), x.data() + k * kDetectorWindow);
    }
    const auto outs = g.predict(std::span<const Tensor<T>>(&x, 1));
    const auto& p = outs.at(0);
    for (std::size_t k = 0; k < nb; ++k)
      for (std::size_t i = 0; i < kDetectorWindow; ++i) {
        sum[starts[b + k] + i] += static_cast<double>(p[k * kDetectorWindow + i]);
        cnt[starts[b + k] + i] += 1.0;
      }
  }
  std::vector<double> prob(signal.size());
  for (std::size_t i = 0; i < prob.size(); ++i) prob[i] = std::clamp(sum[i] / cnt[i], 0.0, 1.0);
  return prob;
}

/// Indices at or above threshold.
inline std::vector<std::size_t> threshold_candidates(std::span<const double> prob, double threshold) {
  std::vector<std::size_t> c;
  for (std::size_t i = 0; i < prob.size(); ++i)
    if (prob[i] >= threshold) c.push_back(i);
  return c;
}

/// Candidates closer than min_distance join one cluster; each cluster becomes
/// its (lower) median index. Clusters are separated by at least min_distance
/// so the medians are too.
inline std::vector<std::size_t> merge_candidates(std::span<const std::size_t> cand,
                                                 std::size_t min_distance) {
  std::vector<std::size_t> peaks;
  std::size_t first = 0;
  for (std::size_t i = 1; i <= cand.size(); ++i) {
    if (i == cand.size() || cand[i] - cand[i - 1] >= min_distance) {
      if (i > first) peaks.push_back(cand[first + (i - first - 1) / 2]);
      first = i;
    }
  }
  return peaks;
}

inline std::vector<std::size_t> peaks_from_probability(std::span<const double> prob,
                                                       double threshold = 0.5,
                                                       std::size_t min_distance = 100) {
  if (min_distance == 0) throw Error("min_distance must be positive");
  const auto cand = threshold_candidates(prob, threshold);
  return merge_candidates(cand, min_distance);
}

template <typename T>
std::vector<std::size_t> detect_rpeaks(const ModelGraph<T>& g, const EcgRecord& rec,
                                       double threshold = 0.5, std::size_t min_distance = 100) {
  if (rec.fs != kTargetFs)
    throw Error("detect_rpeaks: record must be at 500 Hz (resample first), got " +
                std::to_string(rec.fs));
  const auto prob = probability_map(g, rec.samples);
  return peaks_from_probability(prob, threshold, min_distance);
}

struct PeakMatchReport {
  std::size_t detected = 0;
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
  std::size_t false_negatives = 0;
  std::vector<double> temporal_errors;  // |predicted - truth|, truth order
  double mean_error = 0.0;
  double std_error = 0.0;
  std::size_t tolerance = 37;

  double sensitivity() const {
    const auto truth = true_positives + false_negatives;
    return truth ? static_cast<double>(true_positives) / static_cast<double>(truth) : 1.0;
  }
  double ppv() const {
    return detected ? static_cast<double>(true_positives) / static_cast<double>(detected) : 1.0;
  }
};

/// Greedy nearest matching: candidate pairs within tolerance are accepted in
/// order of distance (ties by truth, then prediction index).
inline PeakMatchReport evaluate_peaks(std::span<const std::size_t> predicted,
                                      std::span<const std::size_t> truth, std::size_t tolerance = 37) {
  struct Pair {
    std::size_t d, t, p;
  };
  std::vector<Pair> pairs;
  std::size_t lo = 0;
  for (std::size_t t = 0; t < truth.size(); ++t) {
    while (lo < predicted.size() && predicted[lo] + tolerance < truth[t]) ++lo;
    for (std::size_t p = lo; p < predicted.size() && predicted[p] <= truth[t] + tolerance; ++p)
      pairs.push_back({predicted[p] > truth[t] ? predicted[p] - truth[t] : truth[t] - predicted[p], t, p});
  }
  std::sort(pairs.begin(), pairs.end(),
            [](const Pair& a, const Pair& b) { return std::tie(a.d, a.t, a.p) < std::tie(b.d, b.t, b.p); });
  std::vector<char> used_t(truth.size(), 0), used_p(predicted.size(), 0);
  std::vector<std::pair<std::size_t, double>> matched;
  for (const auto& pr : pairs) {
    if (used_t[pr.t] || used_p[pr.p]) continue;
    used_t[pr.t] = used_p[pr.p] = 1;
    matched.emplace_back(pr.t, static_cast<double>(pr.d));
  }
  std::sort(matched.begin(), matched.end());
  PeakMatchReport r;
  r.tolerance = tolerance;
  r.detected = predicted.size();
  r.true_positives = matched.size();
  r.false_positives = predicted.size() - matched.size();
  r.false_negatives = truth.size() - matched.size();
  for (const auto& m : matched) r.temporal_errors.push_back(m.second);
  if (!matched.empty()) {
    double s = 0.0;
    for (double e : r.temporal_errors) s += e;
    r.mean_error = s / static_cast<double>(matched.size());
    double ss = 0.0;
    for (double e : r.temporal_errors) ss += (e - r.mean_error) * (e - r.mean_error);
    r.std_error = std::sqrt(ss / static_cast<double>(matched.size()));
  }
  return r;
}

/// Picks the threshold with the best F1 over validation records (ties go to
/// the value closest to 0.5). The detector's output scale depends on training
/// length, so a fixed cut-off is only a default.
template <typename T>
double calibrate_threshold(const ModelGraph<T>& g, std::span<const EcgRecord> records,
                           std::size_t min_distance = 100, std::size_t tolerance = 37) {
  std::vector<std::vector<double>> maps;
  for (const auto& r : records) {
    if (!r.rpeaks) throw Error("calibrate_threshold: validation record without annotations");
    maps.push_back(probability_map(g, r.samples));
  }
  double best_th = 0.5, best_f1 = -1.0;
  for (int k = 1; k <= 19; ++k) {
    const double th = k / 20.0;
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto rep = evaluate_peaks(peaks_from_probability(maps[i], th, min_distance), *records[i].rpeaks, tolerance);
      tp += rep.true_positives;
      fp += rep.false_positives;
      fn += rep.false_negatives;
    }
    const double f1 = tp ? 2.0 * tp / (2.0 * tp + fp + fn) : 0.0;
    if (f1 > best_f1 || (f1 == best_f1 && std::abs(th - 0.5) < std::abs(best_th - 0.5))) {
      best_f1 = f1;
      best_th = th;
    }
  }
  return best_th;
}

template <typename T = float>
struct CalibratedDetector {
  DetectorTrainResult<T> fit;
  double threshold = 0.5;
  std::size_t training_windows = 0;
  std::vector<std::size_t> calibration_records;  // indices into the input
};

/// Holds out round(calibration_fraction x n) whole records (at least one when
/// there are two or more), trains on windows of the rest, then calibrates the
/// threshold on the held-out records.
template <typename T = float>
CalibratedDetector<T> fit_detector(std::span<const EcgRecord> records, const DetectorTrainConfig& cfg,
                                   double calibration_fraction = 0.2, std::size_t min_distance = 100,
                                   std::size_t tolerance = 37, const EpochCallback& on_epoch = {}) {
  for (const auto& r : records)
    if (!r.rpeaks) throw Error("fit_detector: record '" + r.subject_id + "' has no R-peak annotations");
  std::mt19937_64 rng(cfg.seed);
  const auto order = shuffled(records.size(), rng);
  std::size_t n_cal = 0;
  if (calibration_fraction > 0.0 && records.size() >= 2)
    n_cal = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(calibration_fraction * static_cast<double>(records.size()))), 1,
        records.size() - 1);
  CalibratedDetector<T> out{};
  std::vector<EcgRecord> cal;
  std::vector<DetectorWindow> windows;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i < n_cal) {
      out.calibration_records.push_back(order[i]);
      cal.push_back(records[order[i]]);
    } else {
      auto w = make_windows(records[order[i]]);
      windows.insert(windows.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
    }
  }
  out.training_windows = windows.size();
  out.fit = train_detector<T>(windows, cfg, on_epoch);
  if (!cal.empty()) out.threshold = calibrate_threshold(out.fit.model, cal, min_distance, tolerance);
  return out;
}

}  // namespace pulsegate
