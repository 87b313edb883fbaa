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

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "pulsegate/config.hpp"
#include "pulsegate/signal.hpp"
#include "pulsegate/synth.hpp"

using namespace pulsegate;

namespace {

EcgRecord sampled(double fs, double seconds, auto fn) {
  EcgRecord r;
  r.fs = fs;
  const auto n = static_cast<std::size_t>(seconds * fs);
  for (std::size_t i = 0; i < n; ++i) r.samples.push_back(fn(static_cast<double>(i) / fs));
  return r;
}

std::filesystem::path scratch(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / "pulsegate_test_signal";
  std::filesystem::create_directories(d);
  return d / name;
}

}  // namespace

TEST(Resample, SameRateIsIdentity) {
  auto r = sampled(500, 1.0, [](double t) { return std::sin(9 * t); });
  r.rpeaks = std::vector<std::size_t>{10, 200};
  auto o = resample(r, 500);
  EXPECT_EQ(o.samples, r.samples);
  EXPECT_EQ(o.rpeaks, r.rpeaks);
}

TEST(Resample, ConstantStaysConstant) {
  for (double from : {125.0, 360.0, 1000.0}) {
    auto r = sampled(from, 2.0, [](double) { return 0.7; });
    auto o = resample(r, 500);
    const auto expect_len =
        static_cast<std::size_t>(std::floor((r.samples.size() - 1) * 500.0 / from + 1e-9)) + 1;
    EXPECT_EQ(o.samples.size(), expect_len);
    for (double v : o.samples) EXPECT_NEAR(v, 0.7, 1e-12);
    // duration preserved within one output sample
    const double din = (r.samples.size() - 1) / from, dout = (o.samples.size() - 1) / 500.0;
    EXPECT_LE(std::abs(din - dout), 1.0 / 500.0);
  }
}

TEST(Resample, UpsampledSinusoidTracksClosedForm) {
  const double two_pi = 2 * std::numbers::pi;
  auto r = sampled(125, 4.0, [&](double t) { return std::sin(two_pi * 2 * t); });
  auto o = resample(r, 500);
  double worst = 0;
  for (std::size_t j = 0; j < o.samples.size(); ++j)
    worst = std::max(worst, std::abs(o.samples[j] - std::sin(two_pi * 2 * j / 500.0)));
  EXPECT_LE(worst, 1e-2);
}

TEST(Resample, RoundTripReproducesBandLimitedSignal) {
  const double two_pi = 2 * std::numbers::pi;
  auto f = [&](double t) {
    return std::sin(two_pi * 1.1 * t) + 0.5 * std::sin(two_pi * 3.7 * t + 0.3) +
           0.2 * std::cos(two_pi * 7.0 * t);
  };
  auto r = sampled(500, 6.0, f);
  for (double mid : {360.0, 250.0, 1000.0}) {
    auto back = resample(resample(r, mid), 500);
    double worst = 0, peak = 0;
    const std::size_t n = std::min(back.samples.size(), r.samples.size());
    for (std::size_t i = 0; i < n; ++i) {
      worst = std::max(worst, std::abs(back.samples[i] - r.samples[i]));
      peak = std::max(peak, std::abs(r.samples[i]));
    }
    EXPECT_LE(worst / peak, 0.02) << "via " << mid << " Hz";
    EXPECT_GE(n + 1, r.samples.size());
  }
}

TEST(Resample, RescalesAnnotationsAndRejectsShortInput) {
  auto r = sampled(250, 2.0, [](double t) { return t; });
  r.rpeaks = std::vector<std::size_t>{3, 100, 499};
  auto o = resample(r, 500);
  EXPECT_EQ(*o.rpeaks, (std::vector<std::size_t>{6, 200, 998}));
  EcgRecord tiny;
  tiny.fs = 100;
  tiny.samples = {1, 2, 3};
  EXPECT_THROW(resample(tiny, 500), Error);
  EXPECT_THROW(resample(r, 0.0), Error);
}

TEST(ZScore, ClosedFormAndDegenerate) {
  std::vector<double> x{1, 2, 3};
  auto z = zscore(x);
  EXPECT_FALSE(z.degenerate);
  EXPECT_NEAR(z.values[0], -1.2247448713915890, 1e-12);
  EXPECT_NEAR(z.values[1], 0.0, 1e-15);
  EXPECT_NEAR(z.values[2], 1.2247448713915890, 1e-12);
  std::vector<double> c(10, 4.2);
  auto zc = zscore(c);
  EXPECT_TRUE(zc.degenerate);
  for (double v : zc.values) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(zscore(std::vector<double>{}), Error);
}

TEST(ZScore, AffineInvariantIdempotentNormalized) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ua(0.01, 50.0), ub(-100, 100);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> x(1 + rng() % 300);
    if (x.size() < 2) x.resize(2);
    for (auto& v : x) v = nd(rng);
    const double a = ua(rng), b = ub(rng);
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = a * x[i] + b;
    auto zx = zscore(x), zy = zscore(y);
    auto zz = zscore(zx.values);
    double s = 0, ss = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      EXPECT_NEAR(zx.values[i], zy.values[i], 1e-9);
      EXPECT_NEAR(zz.values[i], zx.values[i], 1e-9);
      s += zx.values[i];
    }
    const double mean = s / x.size();
    for (double v : zx.values) ss += (v - mean) * (v - mean);
    EXPECT_NEAR(mean, 0.0, 1e-9);
    EXPECT_NEAR(std::sqrt(ss / x.size()), 1.0, 1e-9);
  }
}

TEST(Synth, SeededCorpusIsBitIdentical) {
  SynthOptions o;
  o.n_subjects = 3;
  o.beats_per_subject = 20;
  o.seed = 99;
  auto a = synth_corpus(o), b = synth_corpus(o);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].samples, b[i].samples);
    EXPECT_EQ(a[i].rpeaks, b[i].rpeaks);
  }
  o.seed = 100;
  EXPECT_NE(synth_corpus(o)[0].samples, a[0].samples);
}

TEST(Synth, NoiseFreeAnnotationsAreBeatMaxima) {
  SynthOptions o;
  o.n_subjects = 6;
  o.beats_per_subject = 40;
  o.noise_scale = 0.0;
  for (const auto& r : synth_corpus(o)) {
    ASSERT_TRUE(r.rpeaks);
    EXPECT_EQ(r.rpeaks->size(), 40u);
    for (std::size_t p : *r.rpeaks) {
      ASSERT_GE(p, 64u);
      ASSERT_LE(p + 192, r.samples.size());
      auto first = r.samples.begin() + static_cast<std::ptrdiff_t>(p - 64);
      auto arg = std::max_element(first, first + 256) - r.samples.begin();
      EXPECT_EQ(static_cast<std::size_t>(arg), p);
      for (std::size_t d = 1; d <= 3; ++d) {
        EXPECT_GE(r.samples[p], r.samples[p - d]);
        EXPECT_GE(r.samples[p], r.samples[p + d]);
      }
    }
  }
}

TEST(Synth, SubjectsDifferByMarginAndValidate) {
  auto subjects = draw_subjects(30, 4);
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    EXPECT_NO_THROW(subjects[i].validate());
    for (std::size_t j = 0; j < i; ++j) EXPECT_GE(subject_distance(subjects[i], subjects[j]), 0.15);
  }
  SynthSubjectParams bad;
  bad.waves[kR].amplitude_mv = 0.1;
  bad.waves[kQ].amplitude_mv = -0.2;
  EXPECT_THROW(bad.validate(), Error);
  SynthOptions o;
  o.n_subjects = 1;
  EXPECT_THROW(synth_corpus(o), Error);
}

TEST(Synth, TenSubjectsOfTwoHundredBeatsIsFast) {
  SynthOptions o;
  const auto t0 = std::chrono::steady_clock::now();
  auto c = synth_corpus(o);
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(c.size(), 10u);
  EXPECT_LT(s, 10.0);
}

TEST(Synth, SecondSessionDriftsMildly) {
  SynthOptions o;
  o.n_subjects = 2;
  o.beats_per_subject = 10;
  o.sessions = 2;
  auto c = synth_corpus(o);
  ASSERT_EQ(c.size(), 4u);
  EXPECT_EQ(c[0].session_id, 1);
  EXPECT_EQ(c[1].session_id, 2);
  EXPECT_EQ(c[0].subject_id, c[1].subject_id);
}

TEST(Csv, InfersRateFromTimeColumn) {
  std::istringstream in("time_s,ecg_mv\n0,0.1\n0.004,0.2\n0.008,0.3\n0.012,0.25\n");
  auto r = parse_csv(in);
  EXPECT_DOUBLE_EQ(r.fs, 250.0);
  EXPECT_EQ(r.samples.size(), 4u);
  EXPECT_FALSE(r.rpeaks);
}

TEST(Csv, NonMonotonicTimeNamesLine) {
  std::istringstream in("time_s,ecg_mv\n0,0.1\n0.002,0.2\n0.001,0.3\n");
  try {
    parse_csv(in, "rec.csv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("rec.csv:4"), std::string::npos) << e.what();
  }
}

TEST(Csv, MalformedRowNamesLine) {
  std::istringstream in("time_s,ecg_mv,rpeak\n0,0.1,0\n0.002,abc,0\n");
  try {
    parse_csv(in, "r.csv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("r.csv:3"), std::string::npos) << e.what();
  }
  std::istringstream bad_header("t,v\n0,1\n");
  EXPECT_THROW(parse_csv(bad_header), Error);
}

TEST(Csv, WriteParseRoundTripKeepsPeaks) {
  SynthOptions o;
  o.n_subjects = 2;
  o.beats_per_subject = 5;
  auto rec = synth_corpus(o)[0];
  std::stringstream ss;
  write_csv(ss, rec);
  auto back = parse_csv(ss);
  EXPECT_EQ(back.fs, 500.0);
  EXPECT_EQ(back.rpeaks, rec.rpeaks);
  ASSERT_EQ(back.samples.size(), rec.samples.size());
  for (std::size_t i = 0; i < rec.samples.size(); ++i)
    EXPECT_NEAR(back.samples[i], rec.samples[i], 1e-8);
}

TEST(Raw, Int16ScaledByGain) {
  std::vector<std::int16_t> raw{200, -400, 1000};
  std::vector<char> bytes(reinterpret_cast<char*>(raw.data()),
                          reinterpret_cast<char*>(raw.data()) + raw.size() * 2);
  auto r = decode_raw(bytes, 500, SampleFormat::int16, 200.0);
  EXPECT_EQ(r.samples, (std::vector<double>{1.0, -2.0, 5.0}));
  auto path = scratch("x.raw");
  {
    std::ofstream f(path, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  EXPECT_EQ(load_raw(path.string(), 500, "int16", 200.0).samples, r.samples);
  EXPECT_THROW(load_raw(path.string(), 500, "int24", 1.0), Error);
}

TEST(Manifest, RoundTripResolvesRelativePaths) {
  CorpusManifest m;
  m.config_hash = "deadbeef";
  m.records = {{"a.csv", "S00", 1}, {"b.csv", "S00", 2}};
  auto path = scratch("manifest.json");
  save_manifest(path.string(), m);
  auto back = load_manifest(path.string());
  EXPECT_EQ(back.config_hash, "deadbeef");
  ASSERT_EQ(back.records.size(), 2u);
  EXPECT_EQ(back.records[1].session, 2);
  EXPECT_EQ(back.records[0].path, (path.parent_path() / "a.csv").string());
}

TEST(Config, UnknownKeysRejectedAndHashStable) {
  RunConfig c({"epochs", "seed"});
  c.set("epochs", 5);
  c.set("seed", 7);
  EXPECT_THROW(c.set("epoch", 3), Error);
  RunConfig d({"epochs", "seed"});
  d.set("seed", 7);
  d.set("epochs", 5);
  EXPECT_EQ(c.hash(), d.hash());
  EXPECT_EQ(c.get<int>("epochs", 1), 5);
  EXPECT_EQ(c.get<int>("missing", 9), 9);
}

TEST(Config, NestedFileSectionsFlattenToDottedKeys) {
  const auto path = std::filesystem::temp_directory_path() / "pg_nested_config.json";
  std::ofstream(path) << R"({"seed": 3, "detector": {"epochs": 4, "kernel": 9}})";
  RunConfig c({"seed", "detector.epochs", "detector.kernel"});
  c.merge_file(path.string());
  EXPECT_EQ(c.get<int>("detector.epochs", 0), 4);
  EXPECT_EQ(c.get<int>("detector.kernel", 0), 9);

  RunConfig flat({"seed", "detector.epochs", "detector.kernel"});
  flat.set("detector.kernel", 9);
  flat.set("seed", 3);
  flat.set("detector.epochs", 4);
  EXPECT_EQ(c.hash(), flat.hash());

  std::ofstream(path) << R"({"detector": {"epoch": 4}})";
  RunConfig strict({"detector.epochs"});
  EXPECT_THROW(strict.merge_file(path.string()), Error);
  std::filesystem::remove(path);
}

TEST(Config, SeedPrecedence) {
  RunConfig none({"seed"});
  ::unsetenv("PULSEGATE_SEED");
  EXPECT_EQ(resolve_seed(none), kDefaultSeed);
  ::setenv("PULSEGATE_SEED", "42", 1);
  EXPECT_EQ(resolve_seed(none), 42u);
  RunConfig given({"seed"});
  given.set("seed", 5);
  EXPECT_EQ(resolve_seed(given), 5u);
  ::setenv("PULSEGATE_SEED", "4x", 1);
  EXPECT_THROW(resolve_seed(none), Error);
  ::unsetenv("PULSEGATE_SEED");
}
