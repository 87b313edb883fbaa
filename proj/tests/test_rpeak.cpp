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

#include <random>

#include "pulsegate/rpeak.hpp"
#include "pulsegate/serialize.hpp"
#include "pulsegate/synth.hpp"

using namespace pulsegate;

namespace {

EcgRecord flat_record(std::size_t n, std::vector<std::size_t> peaks) {
  EcgRecord r;
  r.samples.resize(n);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  for (auto& v : r.samples) v = nd(rng);
  r.rpeaks = std::move(peaks);
  return r;
}

std::vector<DetectorWindow> small_corpus_windows() {
  SynthOptions o;
  o.n_subjects = 10;
  o.beats_per_subject = 14;
  o.seed = 5;
  std::vector<DetectorWindow> ws;
  for (const auto& r : synth_corpus(o)) {
    auto w = make_windows(r);
    ws.insert(ws.end(), w.begin(), w.end());
  }
  return ws;
}

}  // namespace

TEST(MakeWindows, CountAndStarts) {
  auto ws = make_windows(flat_record(2048, {}));
  ASSERT_EQ(ws.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(ws[i].start, 256 * i);
}

TEST(MakeWindows, PeakOffsetsAndAuxBins) {
  auto ws = make_windows(flat_record(2048, {300}));
  EXPECT_EQ(ws[0].target[300], 1.0f);
  EXPECT_EQ(ws[1].target[44], 1.0f);
  EXPECT_EQ(ws[1].aux[1][11], 1.0f);  // 44 / 4
  EXPECT_EQ(ws[1].aux[0][22], 1.0f);  // 44 / 2
  for (std::size_t i = 2; i < ws.size(); ++i)
    EXPECT_EQ(std::count(ws[i].target.begin(), ws[i].target.end(), 1.0f), 0);
}

TEST(MakeWindows, TargetInvariants) {
  SynthOptions o;
  o.n_subjects = 2;
  o.beats_per_subject = 20;
  for (const auto& r : synth_corpus(o)) {
    for (const auto& w : make_windows(r)) {
      const auto& p = *r.rpeaks;
      const auto inside = std::count_if(p.begin(), p.end(),
                                        [&](std::size_t q) { return q >= w.start && q < w.start + 1024; });
      float sum = 0;
      for (float v : w.target) {
        EXPECT_TRUE(v == 0.0f || v == 1.0f);
        sum += v;
      }
      EXPECT_EQ(sum, static_cast<float>(inside));
      ASSERT_EQ(w.aux.size(), 2u);
      EXPECT_EQ(w.aux[0].size(), 512u);
      EXPECT_EQ(w.aux[1].size(), 256u);
      EXPECT_EQ(w.input.size(), 1024u);
    }
  }
}

TEST(MakeWindows, Rejections) {
  EXPECT_THROW(make_windows(flat_record(1000, {})), Error);
  auto r = flat_record(2048, {});
  r.rpeaks.reset();
  EXPECT_THROW(make_windows(r), Error);
}

TEST(PeakMerge, PlateauBecomesMedian) {
  std::vector<double> prob(2000, 0.0);
  for (std::size_t i = 500; i <= 504; ++i) prob[i] = 0.9;
  EXPECT_EQ(peaks_from_probability(prob), (std::vector<std::size_t>{502}));
}

TEST(PeakMerge, NearbyClustersMerge) {
  std::vector<double> prob(2000, 0.0);
  for (std::size_t i = 500; i <= 504; ++i) prob[i] = 0.9;
  for (std::size_t i = 544; i <= 548; ++i) prob[i] = 0.8;
  // combined candidates 500..504, 544..548: lower median is the 5th of 10
  EXPECT_EQ(peaks_from_probability(prob), (std::vector<std::size_t>{504}));
  prob.assign(2000, 0.0);
  prob[100] = prob[300] = 0.7;
  EXPECT_EQ(peaks_from_probability(prob), (std::vector<std::size_t>{100, 300}));
  EXPECT_TRUE(peaks_from_probability(std::vector<double>(50, 0.1)).empty());
}

TEST(PeakMerge, OutputSpacingOnRandomMaps) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u;
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> prob(500 + rng() % 3000);
    const double density = u(rng);
    for (auto& v : prob) v = u(rng) < density * 0.2 ? u(rng) : 0.0;
    const std::size_t md = 1 + rng() % 150;
    const double th = u(rng);
    const auto peaks = peaks_from_probability(prob, th, md);
    for (std::size_t i = 1; i < peaks.size(); ++i) ASSERT_GE(peaks[i] - peaks[i - 1], md);
    for (auto p : peaks) ASSERT_GE(prob[p], th);
    const double lower = th * u(rng);
    EXPECT_GE(threshold_candidates(prob, lower).size(), threshold_candidates(prob, th).size());
  }
}

TEST(EvaluatePeaks, Examples) {
  std::vector<std::size_t> truth{100, 600, 1100};
  auto same = evaluate_peaks(truth, truth);
  EXPECT_EQ(same.false_positives, 0u);
  EXPECT_EQ(same.false_negatives, 0u);
  EXPECT_EQ(same.mean_error, 0.0);
  EXPECT_EQ(same.std_error, 0.0);

  std::vector<std::size_t> shifted{103, 603, 1103};
  auto s = evaluate_peaks(shifted, truth);
  EXPECT_EQ(s.mean_error, 3.0);
  EXPECT_EQ(s.std_error, 0.0);

  std::vector<std::size_t> t2{100, 600}, p2{103, 400, 604};
  auto r = evaluate_peaks(p2, t2);
  EXPECT_EQ(r.false_positives, 1u);
  EXPECT_EQ(r.false_negatives, 0u);
  EXPECT_EQ(r.temporal_errors, (std::vector<double>{3, 4}));
  EXPECT_EQ(r.detected, r.true_positives + r.false_positives);
}

TEST(EvaluatePeaks, NearestWinsAndSymmetricShift) {
  std::vector<std::size_t> truth{100}, pred{90, 98};
  auto r = evaluate_peaks(pred, truth);
  EXPECT_EQ(r.true_positives, 1u);
  EXPECT_EQ(r.temporal_errors, (std::vector<double>{2}));
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::size_t> t;
    std::size_t at = 200;
    for (int i = 0; i < 30; ++i) t.push_back(at += 150 + rng() % 300);
    const std::size_t k = rng() % 30;
    std::vector<std::size_t> plus, minus;
    for (auto v : t) {
      plus.push_back(v + k);
      minus.push_back(v - k);
    }
    auto a = evaluate_peaks(plus, t), b = evaluate_peaks(minus, t);
    EXPECT_EQ(a.mean_error, b.mean_error);
    EXPECT_EQ(a.mean_error, static_cast<double>(k));
    EXPECT_EQ(a.true_positives, t.size());
  }
}

TEST(EvaluatePeaks, CountsConsistentOnRandomLists) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    std::set<std::size_t> ts, ps;
    for (int i = 0; i < 40; ++i) ts.insert(rng() % 5000);
    for (int i = 0; i < 40; ++i) ps.insert(rng() % 5000);
    std::vector<std::size_t> t(ts.begin(), ts.end()), p(ps.begin(), ps.end());
    auto r = evaluate_peaks(p, t);
    EXPECT_EQ(r.detected, r.true_positives + r.false_positives);
    EXPECT_EQ(t.size(), r.true_positives + r.false_negatives);
    EXPECT_EQ(r.temporal_errors.size(), r.true_positives);
    for (double e : r.temporal_errors) EXPECT_LE(e, 37.0);
  }
}

TEST(Detector, OutputShapes) {
  auto g = build_detector<float>(1);
  ASSERT_EQ(g.outputs().size(), 3u);
  EXPECT_EQ(g.node(g.outputs()[0]).out_shape, (Shape{1, 1024}));
  EXPECT_EQ(g.node(g.outputs()[1]).out_shape, (Shape{1, 512}));
  EXPECT_EQ(g.node(g.outputs()[2]).out_shape, (Shape{1, 256}));
  auto r = flat_record(3000, {});
  auto prob = probability_map(g, r.samples);
  ASSERT_EQ(prob.size(), 3000u);
  for (double v : prob) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
  EXPECT_EQ(probability_map(g, std::vector<double>(300, 1.0)).size(), 300u);
  r.fs = 250;
  EXPECT_THROW(detect_rpeaks(g, r), Error);
}

TEST(Detector, ValidationLossBeatsUntrainedAfterFiveEpochs) {
  const auto ws = small_corpus_windows();
  ASSERT_GE(ws.size(), 100u);
  DetectorTrainConfig cfg;
  cfg.epochs = 5;
  cfg.seed = 3;
  auto res = train_detector<float>(ws, cfg);
  ASSERT_EQ(res.log.size(), 5u);
  EXPECT_LT(res.log.back().val_loss, res.baseline_val_loss);
}

TEST(Detector, SeededRunsMatchAndEmptyAuxWeightsFreezeHeads) {
  const auto ws = small_corpus_windows();
  DetectorTrainConfig cfg;
  cfg.epochs = 1;
  cfg.aux_weights.clear();
  auto a = train_detector<float>(ws, cfg);
  auto b = train_detector<float>(ws, cfg);
  EXPECT_EQ(a.log.back().train_loss, b.log.back().train_loss);
  EXPECT_EQ(a.log.back().val_loss, b.log.back().val_loss);
  const auto fresh = build_detector<float>(cfg.seed);
  for (std::size_t i = 0; i < fresh.params().size(); ++i) {
    const auto& name = fresh.params()[i].name;
    const bool aux_head = name.rfind(a.model.node(a.model.node(a.model.find("aux_mid")).inputs[0]).name, 0) == 0 ||
                          name.rfind(a.model.node(a.model.node(a.model.find("aux_coarse")).inputs[0]).name, 0) == 0;
    if (aux_head) {
      EXPECT_EQ(a.model.params()[i].value, fresh.params()[i].value) << name;
    }
  }
  cfg.aux_weights = {0.25};
  EXPECT_THROW(train_detector<float>(ws, cfg), Error);
  EXPECT_THROW(train_detector<float>(std::span(ws).first(50), DetectorTrainConfig{}), Error);
}

TEST(Detector, SurvivesSerialization) {
  auto g = build_detector<float>(9);
  auto back = decode_model<float>(encode_model(g));
  auto r = flat_record(2500, {});
  EXPECT_EQ(probability_map(g, r.samples), probability_map(back, r.samples));
}
