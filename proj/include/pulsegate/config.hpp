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

// Run configuration, config hashing and the corpus manifest.

#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pulsegate/signal.hpp"

namespace pulsegate {

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Hash of the canonical (sorted-key, compact) JSON form.
inline std::string config_hash(const nlohmann::json& cfg) { return hex64(fnv1a64(cfg.dump())); }

/// Command parameters. Keys not in `allowed` are rejected; flags override
/// file values. Nested objects in a config file flatten to dotted keys
/// ({"detector": {"epochs": 5}} sets "detector.epochs").
class RunConfig {
 public:
  RunConfig() = default;
  explicit RunConfig(std::set<std::string> allowed) : allowed_(std::move(allowed)) {}

  void merge_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config '" + path + "'");
    nlohmann::json doc;
    try {
      in >> doc;
    } catch (const nlohmann::json::exception& e) {
      throw Error("malformed config '" + path + "': " + e.what());
    }
    if (!doc.is_object()) throw Error("malformed config '" + path + "': expected an object");
    merge_object(doc, "");
  }

  void set(const std::string& key, nlohmann::json value) {
    if (!allowed_.empty() && !allowed_.count(key)) throw Error("unknown config key '" + key + "'");
    values_[key] = std::move(value);
  }

  template <typename V>
  V get(const std::string& key, V fallback) const {
    if (!values_.contains(key)) return fallback;
    try {
      return values_.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
      throw Error("config key '" + key + "' has the wrong type");
    }
  }

  bool has(const std::string& key) const { return values_.contains(key); }
  const nlohmann::json& values() const noexcept { return values_; }
  std::string hash() const { return config_hash(values_); }

 private:
  void merge_object(const nlohmann::json& obj, const std::string& prefix) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      if (it.value().is_object())
        merge_object(it.value(), prefix + it.key() + ".");
      else
        set(prefix + it.key(), it.value());
    }
  }

  std::set<std::string> allowed_;
  nlohmann::json values_ = nlohmann::json::object();
};

inline constexpr std::uint64_t kDefaultSeed = 7;

/// Config value, else PULSEGATE_SEED, else the built-in default.
inline std::uint64_t resolve_seed(const RunConfig& cfg) {
  if (cfg.has("seed")) return cfg.get<std::uint64_t>("seed", kDefaultSeed);
  if (const char* env = std::getenv("PULSEGATE_SEED"); env && *env) {
    char* end = nullptr;
    const auto v = std::strtoull(env, &end, 10);
    if (*end != '\0') throw Error(std::string("PULSEGATE_SEED is not an unsigned integer: '") + env + "'");
    return v;
  }
  return kDefaultSeed;
}

// Corpus manifest:
// {"config_hash": "...", "records": [{"path": "S00_1.csv", "subject": "S00",
//   "session": 1}, ...]}   paths relative to the manifest directory.

struct ManifestEntry {
  std::string path;
  std::string subject;
  int session = 1;
};

struct CorpusManifest {
  std::string config_hash;
  std::vector<ManifestEntry> records;
  nlohmann::json extra = nlohmann::json::object();
};

inline void save_manifest(const std::string& path, const CorpusManifest& m) {
  nlohmann::json doc = m.extra;
  doc["config_hash"] = m.config_hash;
  doc["records"] = nlohmann::json::array();
  for (const auto& r : m.records)
    doc["records"].push_back({{"path", r.path}, {"subject", r.subject}, {"session", r.session}});
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  out << doc.dump(1) << '\n';
}

inline CorpusManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest '" + path + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed manifest '" + path + "': " + e.what());
  }
  CorpusManifest m;
  m.config_hash = doc.value("config_hash", std::string{});
  if (!doc.contains("records") || !doc["records"].is_array())
    throw Error("manifest '" + path + "' has no records array");
  const auto dir = std::filesystem::path(path).parent_path();
  for (const auto& r : doc["records"]) {
    ManifestEntry e;
    e.path = (dir / r.at("path").get<std::string>()).string();
    e.subject = r.at("subject").get<std::string>();
    e.session = r.value("session", 1);
    m.records.push_back(std::move(e));
  }
  doc.erase("records");
  doc.erase("config_hash");
  m.extra = std::move(doc);
  return m;
}

/// Loads every record named by a manifest, labels it and resamples to 500 Hz.
inline std::vector<EcgRecord> load_corpus(const CorpusManifest& m) {
  std::vector<EcgRecord> out;
  for (const auto& e : m.records) {
    auto rec = load_csv(e.path);
    rec.subject_id = e.subject;
    rec.session_id = e.session;
    out.push_back(preprocess(resample(rec, kTargetFs)));
  }
  return out;
}

}  // namespace pulsegate
