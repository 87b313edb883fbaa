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

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pulsegate/tensor.hpp"

namespace pulsegate {

inline constexpr double kTargetFs = 500.0;

/// One continuous single-lead ECG signal in millivolts.
struct EcgRecord {
  std::vector<double> samples;
  double fs = kTargetFs;
  std::string subject_id;
  int session_id = 1;
  std::optional<std::vector<std::size_t>> rpeaks;

  void validate() const {
    if (!(fs > 0.0)) throw Error("record '" + subject_id + "': sampling rate must be positive");
    if (samples.empty()) throw Error("record '" + subject_id + "': no samples");
    if (rpeaks) {
      for (std::size_t i = 0; i < rpeaks->size(); ++i) {
        if ((*rpeaks)[i] >= samples.size())
          throw Error("record '" + subject_id + "': annotation beyond signal end");
        if (i > 0 && (*rpeaks)[i] <= (*rpeaks)[i - 1])
          throw Error("record '" + subject_id + "': annotations not strictly increasing");
      }
    }
  }
};

/// Catmull-Rom interpolation onto a new rate with clamped end points.
/// The output spans the input duration: floor((n-1) * ratio) + 1 samples.
inline EcgRecord resample(const EcgRecord& rec, double target_fs = kTargetFs) {
  if (!(target_fs > 0.0)) throw Error("resample: target rate must be positive");
  rec.validate();
  if (rec.fs == target_fs) return rec;
  const auto& x = rec.samples;
  const std::size_t n = x.size();
  if (n < 4) throw Error("resample: need at least 4 samples for cubic interpolation");

  const double ratio = target_fs / rec.fs;
  const auto n_out =
      static_cast<std::size_t>(std::floor(static_cast<double>(n - 1) * ratio + 1e-9)) + 1;
  auto at = [&](std::ptrdiff_t i) {
    i = std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1);
    return x[static_cast<std::size_t>(i)];
  };
  EcgRecord out;
  out.fs = target_fs;
  out.subject_id = rec.subject_id;
  out.session_id = rec.session_id;
  out.samples.resize(n_out);
  for (std::size_t j = 0; j < n_out; ++j) {
    const double pos = static_cast<double>(j) / ratio;
    auto i = static_cast<std::ptrdiff_t>(std::floor(pos));
    i = std::min<std::ptrdiff_t>(i, static_cast<std::ptrdiff_t>(n) - 2);
    const double u = pos - static_cast<double>(i);
    const double p0 = at(i - 1), p1 = at(i), p2 = at(i + 1), p3 = at(i + 2);
    out.samples[j] = 0.5 * (2.0 * p1 + (-p0 + p2) * u + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u * u +
                            (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * u * u * u);
  }
  if (rec.rpeaks) {
    std::vector<std::size_t> peaks;
    for (auto p : *rec.rpeaks) {
      auto q = static_cast<std::size_t>(std::llround(static_cast<double>(p) * ratio));
      q = std::min(q, n_out - 1);
      if (peaks.empty() || q > peaks.back()) peaks.push_back(q);
    }
    out.rpeaks = std::move(peaks);
  }
  return out;
}

struct ZScored {
  std::vector<double> values;
  bool degenerate = false;
};

inline constexpr double kZScoreEps = 1e-8;

/// Population z-score. Flat input (std <= 1e-8) yields zeros and the
/// degenerate flag.
inline ZScored zscore(std::span<const double> x) {
  if (x.empty()) throw Error("zscore: empty signal");
  double s = 0.0;
  for (double v : x) s += v;
  const double mean = s / static_cast<double>(x.size());
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(x.size()));
  ZScored out;
  out.values.assign(x.size(), 0.0);
  if (!(sd > kZScoreEps)) {
    out.degenerate = true;
    return out;
  }
  for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = (x[i] - mean) / sd;
  return out;
}

// ---- CSV -------------------------------------------------------------------
//
// time_s,ecg_mv[,rpeak]
// 0.000,0.0132,0
// ...

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos
                                                                     : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  for (auto& f : out) {
    while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
    while (!f.empty() && (f.back() == ' ' || f.back() == '\t' || f.back() == '\r'))
      f.remove_suffix(1);
  }
  return out;
}

inline bool parse_double(std::string_view s, double& v) {
  if (s.empty()) return false;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  return r.ec == std::errc() && r.ptr == s.data() + s.size() && std::isfinite(v);
}

}  // namespace detail

inline EcgRecord parse_csv(std::istream& in, const std::string& source = "<csv>") {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw Error(source + ": empty file");
  ++line_no;
  const auto header = detail::split_csv(line);
  if (header.size() < 2 || header[0] != "time_s" || header[1] != "ecg_mv" ||
      (header.size() == 3 && header[2] != "rpeak") || header.size() > 3)
    throw Error(source + ":1: expected header 'time_s,ecg_mv[,rpeak]'");
  const bool has_peaks = header.size() == 3;

  std::vector<double> times;
  EcgRecord rec;
  std::vector<std::size_t> peaks;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = detail::split_csv(line);
    double t = 0, v = 0, p = 0;
    if (f.size() != header.size() || !detail::parse_double(f[0], t) ||
        !detail::parse_double(f[1], v) || (has_peaks && !detail::parse_double(f[2], p)) ||
        (has_peaks && p != 0.0 && p != 1.0))
      throw Error(source + ":" + std::to_string(line_no) + ": malformed row '" + line + "'");
    if (!times.empty() && !(t > times.back()))
      throw Error(source + ":" + std::to_string(line_no) + ": time column not increasing");
    if (p == 1.0) peaks.push_back(rec.samples.size());
    times.push_back(t);
    rec.samples.push_back(v);
  }
  if (rec.samples.size() < 2) throw Error(source + ": need at least two samples");
  std::vector<double> dt(times.size() - 1);
  for (std::size_t i = 1; i < times.size(); ++i) dt[i - 1] = times[i] - times[i - 1];
  std::nth_element(dt.begin(), dt.begin() + static_cast<std::ptrdiff_t>(dt.size() / 2), dt.end());
  double med = dt[dt.size() / 2];
  if (dt.size() % 2 == 0) {
    const double lo = *std::max_element(dt.begin(), dt.begin() + static_cast<std::ptrdiff_t>(dt.size() / 2));
    med = 0.5 * (med + lo);
  }
  rec.fs = 1.0 / med;
  // Rates from printed time columns carry rounding noise; snap near-integers.
  if (std::abs(rec.fs - std::round(rec.fs)) < 1e-6 * rec.fs) rec.fs = std::round(rec.fs);
  if (has_peaks) rec.rpeaks = std::move(peaks);
  rec.validate();
  return rec;
}

inline EcgRecord load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  return parse_csv(in, path);
}

inline void write_csv(std::ostream& out, const EcgRecord& rec) {
  rec.validate();
  const bool peaks = rec.rpeaks.has_value();
  out << (peaks ? "time_s,ecg_mv,rpeak\n" : "time_s,ecg_mv\n");
  std::size_t next = 0;
  char buf[96];
  for (std::size_t i = 0; i < rec.samples.size(); ++i) {
    int flag = 0;
    if (peaks && next < rec.rpeaks->size() && (*rec.rpeaks)[next] == i) {
      flag = 1;
      ++next;
    }
    const double t = static_cast<double>(i) / rec.fs;
    int n = peaks ? std::snprintf(buf, sizeof buf, "%.9g,%.9g,%d\n", t, rec.samples[i], flag)
                  : std::snprintf(buf, sizeof buf, "%.9g,%.9g\n", t, rec.samples[i]);
    out.write(buf, n);
  }
}

inline void save_csv(const std::string& path, const EcgRecord& rec) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  write_csv(out, rec);
}

// ---- raw binary ---------------------------------------------------------------

enum class SampleFormat { int16, int32, float32 };

inline SampleFormat parse_sample_format(const std::string& s) {
  if (s == "int16") return SampleFormat::int16;
  if (s == "int32") return SampleFormat::int32;
  if (s == "float32") return SampleFormat::float32;
  throw Error("unknown sample format '" + s + "' (expected int16, int32 or float32)");
}

/// Little-endian headerless samples; mV = raw / gain.
inline EcgRecord decode_raw(std::span<const char> bytes, double fs, SampleFormat fmt, double gain) {
  if (!(gain != 0.0) || !std::isfinite(gain)) throw Error("raw: gain must be finite and non-zero");
  const std::size_t width = fmt == SampleFormat::int16 ? 2 : 4;
  if (bytes.size() % width != 0) throw Error("raw: byte count is not a multiple of the sample width");
  EcgRecord rec;
  rec.fs = fs;
  rec.samples.resize(bytes.size() / width);
  for (std::size_t i = 0; i < rec.samples.size(); ++i) {
    const char* p = bytes.data() + i * width;
    double raw = 0;
    if (fmt == SampleFormat::int16) {
      std::int16_t v;
      std::memcpy(&v, p, 2);
      raw = v;
    } else if (fmt == SampleFormat::int32) {
      std::int32_t v;
      std::memcpy(&v, p, 4);
      raw = v;
    } else {
      float v;
      std::memcpy(&v, p, 4);
      raw = v;
    }
    rec.samples[i] = raw / gain;
  }
  rec.validate();
  return rec;
}

inline EcgRecord load_raw(const std::string& path, double fs, const std::string& sample_format,
                          double gain = 1.0) {
  const auto fmt = parse_sample_format(sample_format);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  std::vector<char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_raw(bytes, fs, fmt, gain);
}

/// Pre-processing hook between ingestion and detection. Identity: benchmark
/// data arrives filtered.
inline EcgRecord preprocess(EcgRecord rec) { return rec; }

}  // namespace pulsegate
