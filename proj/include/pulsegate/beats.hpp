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

#include <cmath>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pulsegate/signal.hpp"

namespace pulsegate {

inline constexpr std::size_t kBeatLength = 256;

/// R-aligned, z-scored heartbeat.
struct Heartbeat {
  std::vector<double> samples;
  std::string subject_id;
  int session_id = 1;
  std::size_t peak = 0;
  bool degenerate = false;
};

struct Segmentation {
  std::vector<Heartbeat> beats;
  std::size_t skipped = 0;  // peaks too close to either record boundary
};

/// Cuts [p - w/4, p + 3w/4) around every peak and z-scores it. Peaks whose
/// window would leave the record are skipped, never padded.
inline Segmentation segment(const EcgRecord& rec, std::span<const std::size_t> peaks,
                            std::size_t w = kBeatLength) {
  if (w == 0 || w % 4 != 0) throw Error("segment: window " + std::to_string(w) + " not divisible by 4");
  if (rec.fs != kTargetFs)
    throw Error("segment: record '" + rec.subject_id + "' must be resampled to 500 Hz first");
  const std::size_t before = w / 4, after = 3 * w / 4;
  Segmentation out;
  for (std::size_t p : peaks) {
    if (p < before || p + after > rec.samples.size()) {
      ++out.skipped;
      continue;
    }
    auto z = zscore(std::span<const double>(rec.samples).subspan(p - before, w));
    out.beats.push_back({std::move(z.values), rec.subject_id, rec.session_id, p, z.degenerate});
  }
  return out;
}

// Beat sets: <name>.bin holds little-endian float32 rows of kBeatLength
// samples; <name>.json lists subject, session and peak index per row.

inline void save_beats(const std::string& bin_path, const std::string& json_path,
                       std::span<const Heartbeat> beats, const nlohmann::json& extra = {}) {
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw Error("cannot write '" + bin_path + "'");
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& b : beats) {
    if (b.samples.size() != kBeatLength) throw Error("save_beats: beat has wrong length");
    for (double v : b.samples) {
      const auto f = static_cast<float>(v);
      bin.write(reinterpret_cast<const char*>(&f), sizeof f);
    }
    rows.push_back({{"subject", b.subject_id},
                    {"session", b.session_id},
                    {"peak", b.peak},
                    {"degenerate", b.degenerate}});
  }
  nlohmann::json doc = extra.is_object() ? extra : nlohmann::json::object();
  doc["beat_length"] = kBeatLength;
  doc["rows"] = std::move(rows);
  std::ofstream js(json_path);
  if (!js) throw Error("cannot write '" + json_path + "'");
  js << doc.dump(1) << '\n';
}

inline std::vector<Heartbeat> load_beats(const std::string& bin_path, const std::string& json_path,
                                         nlohmann::json* doc_out = nullptr) {
  std::ifstream js(json_path);
  if (!js) throw Error("cannot open '" + json_path + "'");
  nlohmann::json doc;
  try {
    js >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw Error("'" + json_path + "': " + e.what());
  }
  if (doc.value("beat_length", std::size_t{0}) != kBeatLength)
    throw Error("'" + json_path + "': unexpected beat length");
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw Error("cannot open '" + bin_path + "'");
  std::vector<char> bytes{std::istreambuf_iterator<char>(bin), std::istreambuf_iterator<char>()};
  const auto& rows = doc.at("rows");
  if (bytes.size() != rows.size() * kBeatLength * sizeof(float))
    throw Error("'" + bin_path + "': size does not match " + std::to_string(rows.size()) + " rows");
  std::vector<Heartbeat> beats;
  beats.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    Heartbeat b;
    b.samples.resize(kBeatLength);
    for (std::size_t i = 0; i < kBeatLength; ++i) {
      float f;
      std::memcpy(&f, bytes.data() + (r * kBeatLength + i) * sizeof f, sizeof f);
      b.samples[i] = f;
    }
    b.subject_id = rows[r].at("subject").get<std::string>();
    b.session_id = rows[r].at("session").get<int>();
    b.peak = rows[r].at("peak").get<std::size_t>();
    b.degenerate = rows[r].value("degenerate", false);
    beats.push_back(std::move(b));
  }
  if (doc_out) *doc_out = std::move(doc);
  return beats;
}

}  // namespace pulsegate
