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

// Synthetic multi-subject ECG: each beat is a sum of five Gaussian bumps
// (P, Q, R, S, T) placed relative to the R instant, plus white noise and a
// slow baseline wander.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "pulsegate/signal.hpp"

namespace pulsegate {

struct WaveParams {
  double amplitude_mv = 0.0;
  double center_ms = 0.0;  // relative to the R instant
  double width_ms = 1.0;   // Gaussian sigma
};

enum Wave : std::size_t { kP = 0, kQ, kR, kS, kT };

struct SynthSubjectParams {
  std::array<WaveParams, 5> waves{};
  double heart_rate_bpm = 70.0;
  double hr_jitter = 0.04;     // sd of RR as a fraction of the mean
  double noise_sigma_mv = 0.02;
  double morph_jitter = 0.05;  // sd of per-beat amplitude scaling
  double wander_mv = 0.05;
  double wander_hz = 0.2;

  void validate() const {
    for (const auto& w : waves)
      if (!(w.width_ms > 0.0)) throw Error("synth: wave widths must be positive");
    const double r = waves[kR].amplitude_mv;
    if (!(r > std::abs(waves[kQ].amplitude_mv) && r > std::abs(waves[kS].amplitude_mv)))
      throw Error("synth: R amplitude must exceed |Q| and |S|");
    if (!(heart_rate_bpm > 0.0)) throw Error("synth: heart rate must be positive");
  }

  /// Morphology vector used for the distinctness margin, each entry scaled by
  /// the width of its sampling range.
  std::array<double, 16> normalized() const;
};

struct SynthOptions {
  std::size_t n_subjects = 10;
  std::size_t beats_per_subject = 200;
  double fs = kTargetFs;
  std::uint64_t seed = 7;
  int sessions = 1;
  double session_drift = 0.05;  // sd of per-session amplitude scaling
  double noise_scale = 1.0;     // 0 gives noise-free records
};

namespace synth_detail {

struct Range {
  double lo, hi;
};

// P, Q, R, S, T: amplitude, center, width
inline constexpr std::array<std::array<Range, 3>, 5> kWaveRanges{{
    {{{0.08, 0.25}, {-220.0, -150.0}, {18.0, 35.0}}},
    {{{-0.25, -0.04}, {-40.0, -20.0}, {6.0, 14.0}}},
    {{{0.8, 1.6}, {0.0, 0.0}, {6.0, 12.0}}},
    {{{-0.45, -0.08}, {18.0, 42.0}, {6.0, 14.0}}},
    {{{0.15, 0.5}, {190.0, 320.0}, {35.0, 70.0}}},
}};
inline constexpr Range kHeartRate{55.0, 85.0};
inline constexpr double kMargin = 0.15;

inline double draw(std::mt19937_64& rng, Range r) {
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

inline double scaled(double v, Range r) { return r.hi > r.lo ? v / (r.hi - r.lo) : 0.0; }

}  // namespace synth_detail

inline std::array<double, 16> SynthSubjectParams::normalized() const {
  using namespace synth_detail;
  std::array<double, 16> v{};
  std::size_t k = 0;
  for (std::size_t w = 0; w < 5; ++w) {
    v[k++] = scaled(waves[w].amplitude_mv, kWaveRanges[w][0]);
    v[k++] = scaled(waves[w].center_ms, kWaveRanges[w][1]);
    v[k++] = scaled(waves[w].width_ms, kWaveRanges[w][2]);
  }
  v[k] = scaled(heart_rate_bpm, kHeartRate);
  return v;
}

/// Draws one subject. Noise parameters are shared across subjects so identity
/// lives in morphology and rate only.
inline SynthSubjectParams draw_subject(std::mt19937_64& rng) {
  using namespace synth_detail;
  SynthSubjectParams p;
  for (std::size_t w = 0; w < 5; ++w) {
    p.waves[w].amplitude_mv = draw(rng, kWaveRanges[w][0]);
    p.waves[w].center_ms = draw(rng, kWaveRanges[w][1]);
    p.waves[w].width_ms = draw(rng, kWaveRanges[w][2]);
  }
  p.heart_rate_bpm = draw(rng, kHeartRate);
  p.noise_sigma_mv = draw(rng, {0.01, 0.03});
  p.wander_mv = draw(rng, {0.02, 0.08});
  p.wander_hz = draw(rng, {0.1, 0.3});
  return p;
}

/// Largest per-parameter normalized difference between two subjects.
inline double subject_distance(const SynthSubjectParams& a, const SynthSubjectParams& b) {
  const auto x = a.normalized(), y = b.normalized();
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
  return m;
}

/// Draws `n` subjects, rejecting candidates that do not differ from every
/// earlier subject by at least the margin in some parameter.
inline std::vector<SynthSubjectParams> draw_subjects(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<SynthSubjectParams> out;
  while (out.size() < n) {
    auto cand = draw_subject(rng);
    bool ok = true;
    for (const auto& prev : out)
      if (subject_distance(cand, prev) < synth_detail::kMargin) ok = false;
    if (ok) out.push_back(cand);
  }
  return out;
}

/// Applies a per-session drift to amplitudes and rate.
inline SynthSubjectParams session_variant(SynthSubjectParams p, double drift, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, drift);
  for (auto& w : p.waves) w.amplitude_mv *= std::clamp(1.0 + nd(rng), 0.7, 1.3);
  p.heart_rate_bpm *= std::clamp(1.0 + nd(rng), 0.8, 1.2);
  const double r = p.waves[kR].amplitude_mv;
  for (Wave w : {kQ, kS})
    if (std::abs(p.waves[w].amplitude_mv) >= r) p.waves[w].amplitude_mv = -0.9 * r;
  return p;
}

/// Renders `beats` beats. Annotations are the apex of the noise-free signal
/// near each R instant.
inline EcgRecord synth_record(const SynthSubjectParams& p, std::size_t beats, double fs,
                              std::mt19937_64& rng, double noise_scale = 1.0) {
  p.validate();
  if (beats == 0) throw Error("synth: need at least one beat");
  std::normal_distribution<double> nd(0.0, 1.0);
  const double rr_mean = 60.0 / p.heart_rate_bpm;
  const double lead = 0.6;

  std::vector<double> r_times(beats);
  double t = lead;
  for (std::size_t b = 0; b < beats; ++b) {
    r_times[b] = t;
    t += rr_mean * std::clamp(1.0 + p.hr_jitter * nd(rng), 0.75, 1.25);
  }
  const double duration = r_times.back() + lead;
  const auto n = static_cast<std::size_t>(std::ceil(duration * fs));
  std::vector<double> clean(n, 0.0);

  for (double rt : r_times) {
    const double scale = std::clamp(1.0 + p.morph_jitter * nd(rng), 0.85, 1.15);
    for (std::size_t w = 0; w < 5; ++w) {
      const auto& wp = p.waves[w];
      const double amp =
          wp.amplitude_mv * (w == kR ? scale : std::clamp(1.0 + p.morph_jitter * nd(rng), 0.7, 1.3));
      const double center = rt + (wp.center_ms + (w == kR ? 0.0 : 2.0 * nd(rng))) * 1e-3;
      const double sigma = wp.width_ms * 1e-3;
      const auto lo = static_cast<std::ptrdiff_t>(std::floor((center - 5 * sigma) * fs));
      const auto hi = static_cast<std::ptrdiff_t>(std::ceil((center + 5 * sigma) * fs));
      for (auto i = std::max<std::ptrdiff_t>(lo, 0);
           i <= std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(n) - 1); ++i) {
        const double d = (static_cast<double>(i) / fs - center) / sigma;
        clean[static_cast<std::size_t>(i)] += amp * std::exp(-0.5 * d * d);
      }
    }
  }

  EcgRecord rec;
  rec.fs = fs;
  std::vector<std::size_t> peaks;
  const auto search = static_cast<std::ptrdiff_t>(std::ceil(0.02 * fs));
  for (double rt : r_times) {
    const auto c = static_cast<std::ptrdiff_t>(std::llround(rt * fs));
    std::ptrdiff_t best = c;
    for (auto i = std::max<std::ptrdiff_t>(c - search, 0);
         i <= std::min<std::ptrdiff_t>(c + search, static_cast<std::ptrdiff_t>(n) - 1); ++i)
      if (clean[static_cast<std::size_t>(i)] > clean[static_cast<std::size_t>(best)]) best = i;
    if (peaks.empty() || static_cast<std::size_t>(best) > peaks.back())
      peaks.push_back(static_cast<std::size_t>(best));
  }

  const double phase = std::uniform_real_distribution<double>(0.0, 6.283185307179586)(rng);
  rec.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double ti = static_cast<double>(i) / fs;
    const double wander = p.wander_mv * std::sin(6.283185307179586 * p.wander_hz * ti + phase);
    const double noise = p.noise_sigma_mv * nd(rng);
    rec.samples[i] = clean[i] + noise_scale * (wander + noise);
  }
  rec.rpeaks = std::move(peaks);
  return rec;
}

/// Labeled corpus: one record per (subject, session), subjects "S00", "S01", ...
inline std::vector<EcgRecord> synth_corpus(const SynthOptions& opt) {
  if (opt.n_subjects < 2) throw Error("synth: need at least two subjects");
  if (opt.beats_per_subject < 1) throw Error("synth: need at least one beat per subject");
  if (opt.sessions < 1) throw Error("synth: need at least one session");
  const auto subjects = draw_subjects(opt.n_subjects, opt.seed);
  std::vector<EcgRecord> out;
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    for (int session = 1; session <= opt.sessions; ++session) {
      std::mt19937_64 rng(opt.seed * 1000003ULL + s * 7919ULL + static_cast<std::uint64_t>(session));
      const auto params =
          session == 1 ? subjects[s] : session_variant(subjects[s], opt.session_drift, rng);
      auto rec = synth_record(params, opt.beats_per_subject, opt.fs, rng, opt.noise_scale);
      char id[16];
      std::snprintf(id, sizeof id, "S%02zu", s);
      rec.subject_id = id;
      rec.session_id = session;
      out.push_back(std::move(rec));
    }
  }
  return out;
}

}  // namespace pulsegate
