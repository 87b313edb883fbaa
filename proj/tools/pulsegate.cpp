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

// pulsegate command-line driver. Every command writes into --out DIR, and
// leaves a run_manifest.json there next to its artifacts.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include "pulsegate/beats.hpp"
#include "pulsegate/config.hpp"
#include "pulsegate/identify.hpp"
#include "pulsegate/plot.hpp"
#include "pulsegate/rpeak.hpp"
#include "pulsegate/synth.hpp"
#include "pulsegate/verify.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace pulsegate;

namespace {

constexpr const char* kVersion = "0.1.0";

enum class Kind { integer, real, text };

struct ParamDef {
  const char* key;
  Kind kind;
  const char* help;
};

// Every key a config file may set. Sections group the stages; "seed" is shared.
const std::vector<ParamDef> kParams = {
    {"seed", Kind::integer, "random seed (falls back to PULSEGATE_SEED, then 7)"},
    {"synth.subjects", Kind::integer, "number of synthetic subjects"},
    {"synth.beats", Kind::integer, "beats per subject and session"},
    {"synth.sessions", Kind::integer, "recording sessions per subject"},
    {"synth.noise_scale", Kind::real, "noise multiplier (0 = clean)"},
    {"synth.session_drift", Kind::real, "per-session amplitude drift"},
    {"ingest.fs", Kind::real, "sampling rate of raw input"},
    {"ingest.sample_format", Kind::text, "raw sample format: int16, int32 or float32"},
    {"ingest.gain", Kind::real, "raw units per millivolt"},
    {"detector.epochs", Kind::integer, "detector training epochs"},
    {"detector.batch_size", Kind::integer, "detector batch size"},
    {"detector.learning_rate", Kind::real, "detector Adam learning rate"},
    {"detector.val_fraction", Kind::real, "fraction of records held out for calibration"},
    {"detector.base_filters", Kind::integer, "filters in the first U-Net level"},
    {"detector.kernel", Kind::integer, "detector convolution kernel"},
    {"detector.deep_supervision", Kind::integer, "1 to train the auxiliary outputs, 0 to skip them"},
    {"detect.threshold", Kind::real, "peak probability threshold (default: calibrated value in the model)"},
    {"detect.min_distance", Kind::integer, "minimum samples between peaks"},
    {"detect.tolerance", Kind::integer, "matching tolerance in samples"},
    {"identify.epochs", Kind::integer, "identification training epochs"},
    {"identify.batch_size", Kind::integer, "identification batch size"},
    {"identify.learning_rate", Kind::real, "identification Adam learning rate"},
    {"identify.dropout", Kind::real, "dropout before the classifier"},
    {"identify.patience", Kind::integer, "early stopping patience (0 = off)"},
    {"identify.fusion_k", Kind::integer, "beats fused per decision"},
    {"evaluate.scheme", Kind::text, "10fold, 60-20-20 or cross-session"},
    {"evaluate.max_fusion_k", Kind::integer, "largest k in the accuracy-vs-beats curve"},
    {"siamese.epochs", Kind::integer, "Siamese head epochs"},
    {"siamese.batch_size", Kind::integer, "Siamese head batch size"},
    {"siamese.learning_rate", Kind::real, "Siamese head Adam learning rate"},
    {"siamese.smote_ratio", Kind::real, "synthetic matched pairs per original"},
    {"siamese.smote_k", Kind::integer, "SMOTE neighbours"},
    {"siamese.matched_per_subject", Kind::integer, "sampled matched pairs per subject"},
    {"siamese.mismatched_per_subject", Kind::integer, "sampled mismatched pairs per subject"},
    {"verify.enroll_fraction", Kind::real, "leading fraction of each subject's beats used for enrollment"},
    {"verify.fusion_k", Kind::integer, "beats averaged per verification decision"},
    {"verify.backend", Kind::text, "siamese, cosine or euclidean"},
};

std::set<std::string> config_keys() {
  std::set<std::string> s;
  for (const auto& p : kParams) s.insert(p.key);
  return s;
}

const ParamDef& param(const std::string& key) {
  for (const auto& p : kParams)
    if (key == p.key) return p;
  throw std::logic_error("unregistered parameter " + key);
}

json convert(const ParamDef& p, const std::string& raw) {
  try {
    std::size_t used = 0;
    switch (p.kind) {
      case Kind::integer: {
        const long long v = std::stoll(raw, &used);
        if (used != raw.size()) break;
        return v;
      }
      case Kind::real: {
        const double v = std::stod(raw, &used);
        if (used != raw.size()) break;
        return v;
      }
      case Kind::text: return raw;
    }
  } catch (const std::exception&) {
  }
  throw Error(std::string("invalid value '") + raw + "' for " + p.key);
}

std::string fmt(double v, int prec = 6) {
  char b[48];
  std::snprintf(b, sizeof b, "%.*f", prec, v);
  return b;
}

std::uint64_t file_fnv(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::string s{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return fnv1a64(s);
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write '" + p.string() + "'");
  out << s;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error("cannot open '" + p.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error("'" + p.string() + "': " + e.what());
  }
}

std::string log_csv(const std::vector<EpochLog>& log) {
  std::string s = "epoch,train_loss,val_loss,val_metric\n";
  for (const auto& e : log)
    s += std::to_string(e.epoch) + "," + fmt(e.train_loss, 9) + "," + fmt(e.val_loss, 9) + "," + fmt(e.val_metric, 9) + "\n";
  return s;
}

// ---- one command invocation ----------------------------------------------------------

class Run {
 public:
  Run(std::string command, std::vector<std::string> args) : command_(std::move(command)), args_(std::move(args)) {}

  RunConfig cfg{config_keys()};
  std::uint64_t seed = kDefaultSeed;
  fs::path out;

  void prepare(const std::string& config_file, const std::map<std::string, std::string>& flags,
               const std::string& out_dir) {
    if (!config_file.empty()) {
      cfg.merge_file(config_file);
      input(config_file);
    }
    for (const auto& [key, raw] : flags) cfg.set(key, convert(param(key), raw));
    seed = resolve_seed(cfg);
    if (out_dir.empty()) throw Error("--out is required");
    out = out_dir;
    fs::create_directories(out);
  }

  template <typename V>
  V get(const std::string& key, V fallback) const {
    return cfg.get<V>(key, fallback);
  }

  std::string hash() const { return cfg.hash(); }

  void input(const fs::path& p) {
    if (!fs::exists(p)) throw Error("input '" + p.string() + "' does not exist");
    inputs_.push_back(p);
  }

  fs::path output(const std::string& name) {
    const auto p = out / name;
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    outputs_.push_back(p);
    return p;
  }

  void text(const std::string& name, const std::string& content) { write_text(output(name), content); }

  /// Deterministic metrics: no paths, no clocks.
  void metrics(json m) {
    m["command"] = command_;
    m["config_hash"] = hash();
    m["seed"] = seed;
    text("metrics.json", m.dump(2) + "\n");
  }

  void finish() const {
    json ins = json::array(), outs = json::array();
    for (const auto& p : inputs_) {
      json e{{"path", p.string()}};
      if (fs::is_regular_file(p)) {
        e["bytes"] = fs::file_size(p);
        e["fnv1a64"] = hex64(file_fnv(p));
      }
      ins.push_back(e);
    }
    for (const auto& p : outputs_) outs.push_back({{"path", p.string()}, {"config_hash", hash()}});
    const json m{
        {"command", command_},
        {"args", args_},
        {"inputs", ins},
        {"outputs", outs},
        {"config", cfg.values()},
        {"config_hash", hash()},
        {"seed", seed},
        {"versions",
         {{"pulsegate", kVersion},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"compiler", __VERSION__},
          {"cplusplus", __cplusplus}}},
        {"wall_time_s", std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count()},
    };
    write_text(out / "run_manifest.json", m.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::vector<std::string> args_;
  std::vector<fs::path> inputs_, outputs_;
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// ---- shared loaders --------------------------------------------------------------------

std::set<std::string> subject_filter(const std::string& csv) {
  std::set<std::string> s;
  std::stringstream ss(csv);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) s.insert(item);
  return s;
}

std::vector<Heartbeat> load_beat_dir(Run& run, const fs::path& dir, const std::string& subjects) {
  const auto bin = dir / "beats.bin", js = dir / "beats.json";
  run.input(bin);
  run.input(js);
  auto beats = load_beats(bin.string(), js.string());
  if (const auto keep = subject_filter(subjects); !keep.empty()) {
    std::erase_if(beats, [&](const Heartbeat& b) { return !keep.count(b.subject_id); });
    for (const auto& s : keep)
      if (std::none_of(beats.begin(), beats.end(), [&](const Heartbeat& b) { return b.subject_id == s; }))
        throw Error("subject '" + s + "' not present in '" + dir.string() + "'");
  }
  if (beats.empty()) throw Error("no beats in '" + dir.string() + "'");
  return beats;
}

std::vector<EcgRecord> load_corpus_file(Run& run, const fs::path& manifest) {
  run.input(manifest);
  const auto m = load_manifest(manifest.string());
  for (const auto& r : m.records) run.input(r.path);
  return load_corpus(m);
}

std::string record_stem(const EcgRecord& r) { return r.subject_id + "_s" + std::to_string(r.session_id); }

void write_corpus(Run& run, const std::vector<EcgRecord>& records, const json& extra) {
  CorpusManifest m;
  m.config_hash = run.hash();
  m.extra = extra;
  for (const auto& r : records) {
    const auto name = record_stem(r) + ".csv";
    save_csv(run.output(name).string(), r);
    m.records.push_back({name, r.subject_id, r.session_id});
  }
  save_manifest(run.output("corpus.json").string(), m);
}

struct LoadedDetector {
  ModelGraph<float> graph;
  json meta;
};

LoadedDetector load_detector(Run& run, const fs::path& p) {
  run.input(p);
  std::string meta;
  LoadedDetector d{load_model<float>(p.string(), &meta), {}};
  d.meta = json::parse(meta.empty() ? "{}" : meta);
  if (d.meta.value("kind", "") != "detector") throw Error("'" + p.string() + "' is not a detector model");
  return d;
}

IdentifyModel<float> load_embedder(Run& run, const fs::path& p) {
  run.input(p);
  return load_identify_model<float>(p.string());
}

ModelGraph<float> load_head(Run& run, const fs::path& p) {
  run.input(p);
  std::string meta;
  auto g = load_model<float>(p.string(), &meta);
  if (json::parse(meta.empty() ? "{}" : meta).value("kind", "") != "siamese")
    throw Error("'" + p.string() + "' is not a Siamese head");
  return g;
}

IdentifyTrainConfig identify_config(const Run& run) {
  IdentifyTrainConfig c;
  c.epochs = run.get<std::size_t>("identify.epochs", c.epochs);
  c.batch_size = run.get<std::size_t>("identify.batch_size", c.batch_size);
  c.adam.lr = run.get<double>("identify.learning_rate", c.adam.lr);
  c.patience = run.get<std::size_t>("identify.patience", c.patience);
  c.seed = run.seed;
  return c;
}

json metrics_json(const ClassificationMetrics& m) {
  return {{"accuracy", m.accuracy}, {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}};
}

std::string confusion_csv(const IdentifyModel<float>& m, const ConfusionMatrix& cm) {
  std::string s = "truth\\predicted";
  for (const auto& c : m.classes) s += "," + c;
  s += "\n";
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    s += m.classes[i];
    for (auto v : cm.counts[i]) s += "," + std::to_string(v);
    s += "\n";
  }
  return s;
}

/// Fused accuracy for k = 1..max_k where some run still holds k beats.
std::vector<std::pair<std::size_t, double>> accuracy_vs_beats(const IdentifyModel<float>& m,
                                                              std::span<const Heartbeat> beats,
                                                              std::span<const std::size_t> idx, std::size_t max_k) {
  std::vector<std::pair<std::size_t, double>> out;
  std::size_t longest = 0;
  for (const auto& r : consecutive_runs(beats, idx)) longest = std::max(longest, r.size());
  for (std::size_t k = 1; k <= std::min(max_k, longest); ++k) out.emplace_back(k, fused_accuracy(m, beats, idx, k));
  return out;
}

void write_accuracy_curve(Run& run, const std::vector<std::pair<std::size_t, double>>& curve) {
  std::string csv = "beats,accuracy\n";
  PlotSeries s{"fused accuracy", {}, {}};
  for (const auto& [k, a] : curve) {
    csv += std::to_string(k) + "," + fmt(a, 9) + "\n";
    s.x.push_back(static_cast<double>(k));
    s.y.push_back(a);
  }
  run.text("accuracy_vs_beats.csv", csv);
  if (curve.size() >= 2)
    run.text("accuracy_vs_beats.svg",
             svg_line_plot({"Accuracy vs. fused beats", "beats per decision", "accuracy", 1.0,
                            static_cast<double>(curve.back().first), 0, 1, true},
                           {s}));
}

void check_embedder_disjoint(const IdentifyModel<float>& m, std::span<const Heartbeat> beats) {
  std::vector<std::string> subjects;
  for (const auto& b : beats) subjects.push_back(b.subject_id);
  check_disjoint(m.classes, subjects);
}

// ---- commands --------------------------------------------------------------------------

struct Paths {
  std::string corpus, beats, model, head, templates, manifest, subjects;
  std::vector<std::string> inputs;
  std::string subject, format;
  int session = 1;
  bool force = false;
};

void cmd_synth(Run& run, const Paths&) {
  SynthOptions o;
  o.n_subjects = run.get<std::size_t>("synth.subjects", o.n_subjects);
  o.beats_per_subject = run.get<std::size_t>("synth.beats", o.beats_per_subject);
  o.sessions = run.get<int>("synth.sessions", o.sessions);
  o.noise_scale = run.get<double>("synth.noise_scale", o.noise_scale);
  o.session_drift = run.get<double>("synth.session_drift", o.session_drift);
  o.seed = run.seed;
  const auto corpus = synth_corpus(o);
  write_corpus(run, corpus, {{"seed", run.seed}, {"source", "synth"}});
  std::size_t peaks = 0;
  for (const auto& r : corpus) peaks += r.rpeaks->size();
  run.metrics({{"records", corpus.size()}, {"subjects", o.n_subjects}, {"annotated_peaks", peaks}});
}

void cmd_ingest(Run& run, const Paths& p) {
  std::vector<EcgRecord> recs;
  if (!p.manifest.empty()) {
    recs = load_corpus_file(run, p.manifest);
  } else {
    if (p.inputs.empty()) throw Error("give --manifest or at least one --input");
    if (p.inputs.size() > 1 && !p.subject.empty())
      throw Error("--subject applies to a single --input; use --manifest for several");
    for (const auto& in : p.inputs) {
      run.input(in);
      EcgRecord r;
      if (fs::path(in).extension() == ".csv") {
        r = load_csv(in);
      } else {
        if (!run.cfg.has("ingest.fs")) throw Error("raw input '" + in + "' needs --fs");
        r = load_raw(in, run.get<double>("ingest.fs", 0.0), run.get<std::string>("ingest.sample_format", "int16"),
                     run.get<double>("ingest.gain", 1.0));
      }
      r.subject_id = p.subject.empty() ? fs::path(in).stem().string() : p.subject;
      r.session_id = p.session;
      recs.push_back(preprocess(resample(r, kTargetFs)));
    }
  }
  write_corpus(run, recs, {{"source", "ingest"}});
  std::size_t samples = 0;
  for (const auto& r : recs) samples += r.samples.size();
  run.metrics({{"records", recs.size()}, {"samples", samples}, {"fs", kTargetFs}});
}

void cmd_train_detector(Run& run, const Paths& p) {
  const auto records = load_corpus_file(run, p.corpus);
  DetectorTrainConfig cfg;
  cfg.epochs = run.get<std::size_t>("detector.epochs", cfg.epochs);
  cfg.batch_size = run.get<std::size_t>("detector.batch_size", cfg.batch_size);
  cfg.adam.lr = run.get<double>("detector.learning_rate", cfg.adam.lr);
  cfg.base_filters = run.get<std::size_t>("detector.base_filters", cfg.base_filters);
  cfg.kernel = run.get<std::size_t>("detector.kernel", cfg.kernel);
  if (run.get<int>("detector.deep_supervision", 1) == 0) cfg.aux_weights.clear();
  cfg.seed = run.seed;
  const auto md = run.get<std::size_t>("detect.min_distance", 100);
  const auto tol = run.get<std::size_t>("detect.tolerance", 37);
  // Whole records are held out for threshold calibration.
  const auto det = fit_detector<float>(records, cfg, run.get<double>("detector.val_fraction", 0.2), md, tol,
                                       [](const EpochLog& e) {
                                         std::fprintf(stderr, "epoch %zu  train %.5f  val %.5f\n", e.epoch,
                                                      e.train_loss, e.val_loss);
                                       });
  json calib = nullptr;
  if (!det.calibration_records.empty()) {
    std::size_t tp = 0, fp = 0, fn = 0;
    json names = json::array();
    for (auto i : det.calibration_records) {
      const auto& r = records[i];
      const auto rep = evaluate_peaks(detect_rpeaks(det.fit.model, r, det.threshold, md), *r.rpeaks, tol);
      tp += rep.true_positives;
      fp += rep.false_positives;
      fn += rep.false_negatives;
      names.push_back(record_stem(r));
    }
    calib = {{"records", names}, {"true_positives", tp}, {"false_positives", fp}, {"false_negatives", fn}};
  }
  const json meta{{"kind", "detector"}, {"threshold", det.threshold}, {"min_distance", md},
                  {"config_hash", run.hash()}, {"seed", run.seed}};
  save_model(run.output("detector.pgm").string(), det.fit.model, meta.dump());
  const auto& log = det.fit.log;
  run.text("training_log.csv", log_csv(log));
  run.metrics({{"training_windows", det.training_windows},
               {"baseline_val_loss", det.fit.baseline_val_loss},
               {"final_train_loss", log.empty() ? 0.0 : log.back().train_loss},
               {"final_val_loss", log.empty() ? 0.0 : log.back().val_loss},
               {"threshold", det.threshold},
               {"calibration", calib}});
}

void cmd_detect(Run& run, const Paths& p) {
  const auto det = load_detector(run, p.model);
  const double th = run.get<double>("detect.threshold", det.meta.value("threshold", 0.5));
  const auto md = run.get<std::size_t>("detect.min_distance", det.meta.value("min_distance", std::size_t{100}));
  const auto tol = run.get<std::size_t>("detect.tolerance", 37);
  const auto records = load_corpus_file(run, p.corpus);
  std::vector<EcgRecord> out;
  json per = json::array();
  std::size_t detected = 0, tp = 0, fp = 0, fn = 0, truth = 0;
  std::vector<double> errors;
  for (const auto& r : records) {
    auto peaks = detect_rpeaks(det.graph, r, th, md);
    std::string lines;
    for (auto k : peaks) lines += std::to_string(k) + "\n";
    run.text(record_stem(r) + ".peaks.txt", lines);
    json row{{"record", record_stem(r)}, {"detected", peaks.size()}};
    if (r.rpeaks) {
      const auto rep = evaluate_peaks(peaks, *r.rpeaks, tol);
      tp += rep.true_positives;
      fp += rep.false_positives;
      fn += rep.false_negatives;
      truth += r.rpeaks->size();
      errors.insert(errors.end(), rep.temporal_errors.begin(), rep.temporal_errors.end());
      row["sensitivity"] = rep.sensitivity();
      row["false_positives"] = rep.false_positives;
    }
    per.push_back(row);
    detected += peaks.size();
    EcgRecord annotated = r;
    annotated.rpeaks = std::move(peaks);
    out.push_back(std::move(annotated));
  }
  write_corpus(run, out, {{"source", "detect"}});
  json m{{"threshold", th}, {"min_distance", md}, {"detected", detected}, {"records", per}};
  if (truth > 0) {
    double mean = 0, sd = 0;
    for (double e : errors) mean += e;
    mean = errors.empty() ? 0.0 : mean / static_cast<double>(errors.size());
    for (double e : errors) sd += (e - mean) * (e - mean);
    sd = errors.size() > 1 ? std::sqrt(sd / static_cast<double>(errors.size() - 1)) : 0.0;
    m["evaluation"] = {{"tolerance", tol},
                       {"true_peaks", truth},
                       {"sensitivity", static_cast<double>(tp) / static_cast<double>(tp + fn)},
                       {"false_positive_rate", static_cast<double>(fp) / static_cast<double>(truth)},
                       {"temporal_error_mean", mean},
                       {"temporal_error_std", sd}};
  }
  run.metrics(m);
}

void cmd_segment(Run& run, const Paths& p) {
  const auto records = load_corpus_file(run, p.corpus);
  const auto keep = subject_filter(p.subjects);
  std::vector<Heartbeat> beats;
  std::size_t skipped = 0, peaks = 0;
  for (const auto& r : records) {
    if (!keep.empty() && !keep.count(r.subject_id)) continue;
    if (!r.rpeaks) throw Error("record '" + record_stem(r) + "' has no R-peaks (run detect first)");
    auto s = segment(r, *r.rpeaks);
    skipped += s.skipped;
    peaks += r.rpeaks->size();
    beats.insert(beats.end(), std::make_move_iterator(s.beats.begin()), std::make_move_iterator(s.beats.end()));
  }
  if (beats.empty()) throw Error("no beats produced");
  save_beats(run.output("beats.bin").string(), run.output("beats.json").string(), beats,
             {{"config_hash", run.hash()}, {"skipped", skipped}});
  std::size_t degenerate = 0;
  for (const auto& b : beats) degenerate += b.degenerate;
  run.metrics({{"peaks", peaks}, {"beats", beats.size()}, {"skipped", skipped}, {"degenerate", degenerate},
               {"subjects", subject_classes(beats).size()}});
}

void cmd_train_id(Run& run, const Paths& p) {
  const auto beats = load_beat_dir(run, p.beats, p.subjects);
  const auto cfg = identify_config(run);
  const double dropout = run.get<double>("identify.dropout", 0.25);
  auto m = build_identify_model<float>(subject_classes(beats), run.seed, dropout);
  const auto plan = split_train_val_test(beats, run.seed);
  const auto train = plan.members(0), val = plan.members(1), test = plan.members(2);
  const auto log = train_identify(m, beats, train, val, cfg, [](const EpochLog& e) {
    std::fprintf(stderr, "epoch %zu  train %.5f  val %.5f  val acc %.4f\n", e.epoch, e.train_loss, e.val_loss,
                 e.val_metric);
  });
  save_identify_model(run.output("identify.pgm").string(), m, {{"config_hash", run.hash()}, {"seed", run.seed}});
  run.text("training_log.csv", log_csv(log));
  json metrics{{"classes", m.classes.size()}, {"train", train.size()}, {"val", val.size()}, {"test", test.size()}};
  if (!test.empty()) {
    const auto ev = evaluate_identify(m, beats, test);
    metrics["test"] = metrics_json(ev.metrics);
    run.text("confusion.csv", confusion_csv(m, ev.confusion));
    const auto k = run.get<std::size_t>("identify.fusion_k", 1);
    if (k > 1) metrics["test"]["fused_accuracy"] = {{"k", k}, {"accuracy", fused_accuracy(m, beats, test, k)}};
    const auto curve = accuracy_vs_beats(m, beats, test, run.get<std::size_t>("evaluate.max_fusion_k", 10));
    write_accuracy_curve(run, curve);
  }
  run.metrics(metrics);
}

void cmd_identify(Run& run, const Paths& p) {
  const auto m = load_embedder(run, p.model);
  const auto beats = load_beat_dir(run, p.beats, p.subjects);
  const auto all = all_indices(beats.size());
  const auto probs = predict_proba(m, beats, all);
  std::string csv = "index,subject,session,peak,predicted,confidence\n";
  std::vector<std::size_t> known;
  for (std::size_t i = 0; i < beats.size(); ++i) {
    const auto c = argmax_row(probs, i);
    csv += std::to_string(i) + "," + beats[i].subject_id + "," + std::to_string(beats[i].session_id) + "," +
           std::to_string(beats[i].peak) + "," + m.classes[c] + "," + fmt(probs[i * m.n_classes() + c], 6) + "\n";
    if (std::find(m.classes.begin(), m.classes.end(), beats[i].subject_id) != m.classes.end()) known.push_back(i);
  }
  run.text("predictions.csv", csv);
  json metrics{{"beats", beats.size()}, {"known_subject_beats", known.size()}};
  if (!known.empty()) {
    const auto ev = evaluate_identify(m, beats, known);
    metrics["single_beat"] = metrics_json(ev.metrics);
    run.text("confusion.csv", confusion_csv(m, ev.confusion));
    const auto k = run.get<std::size_t>("identify.fusion_k", 1);
    if (k > 1) metrics["fused"] = {{"k", k}, {"accuracy", fused_accuracy(m, beats, known, k)}};
  }
  run.metrics(metrics);
}

void cmd_cross_session(Run& run, const Paths& p) {
  const auto beats = load_beat_dir(run, p.beats, p.subjects);
  const auto r = cross_session_evaluate<float>(beats, identify_config(run), run.get<double>("identify.dropout", 0.25));
  run.text("cross_session.csv", "train,test,accuracy\n1,2," + fmt(r.acc_1_to_2, 9) + "\n2,1," + fmt(r.acc_2_to_1, 9) + "\n");
  run.metrics({{"session1_to_session2", r.acc_1_to_2}, {"session2_to_session1", r.acc_2_to_1}});
}

void cmd_evaluate(Run& run, const Paths& p) {
  const auto beats = load_beat_dir(run, p.beats, p.subjects);
  const auto scheme = parse_split_scheme(run.get<std::string>("evaluate.scheme", "10fold"));
  const auto cfg = identify_config(run);
  const double dropout = run.get<double>("identify.dropout", 0.25);
  const auto max_k = run.get<std::size_t>("evaluate.max_fusion_k", 10);
  const auto classes = subject_classes(beats);

  struct Row {
    std::string label;
    ClassificationMetrics m;
  };
  std::vector<Row> rows;
  std::map<std::size_t, std::vector<double>> curve;
  auto run_partition = [&](const std::string& label, std::span<const std::size_t> train,
                           std::span<const std::size_t> val, std::span<const std::size_t> test) {
    std::fprintf(stderr, "partition %s: %zu train, %zu test\n", label.c_str(), train.size(), test.size());
    auto m = build_identify_model<float>(classes, cfg.seed, dropout);
    train_identify(m, beats, train, val, cfg);
    rows.push_back({label, evaluate_identify(m, beats, test).metrics});
    for (const auto& [k, a] : accuracy_vs_beats(m, beats, test, max_k)) curve[k].push_back(a);
  };
  if (scheme == SplitScheme::stratified_10fold) {
    const auto plan = stratified_folds(beats, 10, run.seed);
    for (int f = 0; f < 10; ++f) run_partition(std::to_string(f + 1), plan.complement(f), {}, plan.members(f));
  } else if (scheme == SplitScheme::train_val_test) {
    const auto plan = split_train_val_test(beats, run.seed);
    run_partition("test", plan.members(0), plan.members(1), plan.members(2));
  } else {
    const auto plan = split_by_session(beats);
    run_partition("1->2", plan.members(1), {}, plan.members(2));
    run_partition("2->1", plan.members(2), {}, plan.members(1));
  }

  auto mean_sd = [](const std::vector<double>& v) {
    double mu = 0, sd = 0;
    for (double x : v) mu += x;
    mu /= static_cast<double>(v.size());
    for (double x : v) sd += (x - mu) * (x - mu);
    sd = v.size() > 1 ? std::sqrt(sd / static_cast<double>(v.size() - 1)) : 0.0;
    return std::make_pair(mu, sd);
  };
  std::string csv = "partition,accuracy,precision,recall,f1\n";
  std::vector<double> acc, pre, rec, f1;
  json parts = json::array();
  for (const auto& r : rows) {
    csv += r.label + "," + fmt(r.m.accuracy) + "," + fmt(r.m.precision) + "," + fmt(r.m.recall) + "," + fmt(r.m.f1) + "\n";
    acc.push_back(r.m.accuracy);
    pre.push_back(r.m.precision);
    rec.push_back(r.m.recall);
    f1.push_back(r.m.f1);
    json j = metrics_json(r.m);
    j["partition"] = r.label;
    parts.push_back(j);
  }
  json summary = json::object();
  csv += "mean±std";
  for (const auto& [name, v] : {std::pair{"accuracy", &acc}, {"precision", &pre}, {"recall", &rec}, {"f1", &f1}}) {
    const auto [mu, sd] = mean_sd(*v);
    csv += "," + fmt(mu) + "±" + fmt(sd);
    summary[name] = {{"mean", mu}, {"std", sd}};
  }
  csv += "\n";
  run.text("evaluation.csv", csv);
  std::vector<std::pair<std::size_t, double>> pooled;
  for (const auto& [k, v] : curve)
    if (v.size() == rows.size()) pooled.emplace_back(k, mean_sd(v).first);
  write_accuracy_curve(run, pooled);
  json jc = json::array();
  for (const auto& [k, a] : pooled) jc.push_back({{"k", k}, {"accuracy", a}});
  run.metrics({{"scheme", run.get<std::string>("evaluate.scheme", "10fold")},
               {"partitions", parts},
               {"summary", summary},
               {"accuracy_vs_beats", jc}});
}

VerifierConfig verifier_config(const Run& run) {
  VerifierConfig c;
  c.enrollment_fraction = run.get<double>("verify.enroll_fraction", c.enrollment_fraction);
  c.pairs.matched_per_subject = run.get<std::size_t>("siamese.matched_per_subject", c.pairs.matched_per_subject);
  c.pairs.mismatched_per_subject =
      run.get<std::size_t>("siamese.mismatched_per_subject", c.pairs.mismatched_per_subject);
  c.pairs.seed = run.seed;
  c.smote_ratio = run.get<double>("siamese.smote_ratio", c.smote_ratio);
  c.smote_k = run.get<std::size_t>("siamese.smote_k", c.smote_k);
  c.train.epochs = run.get<std::size_t>("siamese.epochs", c.train.epochs);
  c.train.batch_size = run.get<std::size_t>("siamese.batch_size", c.train.batch_size);
  c.train.adam.lr = run.get<double>("siamese.learning_rate", c.train.adam.lr);
  c.train.seed = run.seed;
  return c;
}

void cmd_train_siamese(Run& run, const Paths& p) {
  const auto m = load_embedder(run, p.model);
  const auto beats = load_beat_dir(run, p.beats, p.subjects);
  const auto cfg = verifier_config(run);
  const auto fit = train_verifier(m, beats, cfg, [](const EpochLog& e) {
    std::fprintf(stderr, "epoch %zu  train %.5f  val %.5f  val acc %.4f\n", e.epoch, e.train_loss, e.val_loss,
                 e.val_metric);
  });
  const json meta{{"kind", "siamese"}, {"config_hash", run.hash()}, {"seed", run.seed}};
  save_model(run.output("siamese.pgm").string(), fit.head, meta.dump());
  run.text("training_log.csv", log_csv(fit.result.log));
  run.metrics({{"pairs", fit.n_pairs},
               {"enroll_fraction", cfg.enrollment_fraction},
               {"val_matched_mean", fit.result.val_matched_mean},
               {"val_mismatched_mean", fit.result.val_mismatched_mean},
               {"final_val_loss", fit.result.log.empty() ? 0.0 : fit.result.log.back().val_loss}});
}

void cmd_enroll(Run& run, const Paths& p) {
  const auto m = load_embedder(run, p.model);
  const auto beats = load_beat_dir(run, p.beats, p.subjects);
  check_embedder_disjoint(m, beats);
  const double ef = run.get<double>("verify.enroll_fraction", 0.4);
  const auto split = enrollment_split(beats, ef);
  json index = json::array();
  for (const auto& sp : split) {
    const auto t = enroll(sp.subject, embed(m.graph, beats, sp.enroll));
    save_template(run.output("templates/" + sp.subject + ".pgt").string(), t, run.hash());
    index.push_back({{"subject", t.subject_id}, {"count", t.count}});
  }
  run.text("templates/index.json", json{{"config_hash", run.hash()}, {"templates", index}}.dump(2) + "\n");
  run.metrics({{"enroll_fraction", ef}, {"templates", index}});
}

void cmd_verify(Run& run, const Paths& p) {
  const auto m = load_embedder(run, p.model);
  const auto beats = load_beat_dir(run, p.beats, p.subjects);
  check_embedder_disjoint(m, beats);
  const auto backend = parse_backend(run.get<std::string>("verify.backend", "siamese"));
  std::optional<ModelGraph<float>> head;
  if (backend == Backend::siamese) {
    if (p.head.empty()) throw Error("the siamese backend needs --head");
    head = load_head(run, p.head);
  }
  const fs::path tdir = p.templates;
  if (!fs::is_directory(tdir)) throw Error("template directory '" + tdir.string() + "' not found");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(tdir))
    if (e.path().extension() == ".pgt") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<Template> templates;
  for (const auto& f : files) {
    run.input(f);
    templates.push_back(load_template(f.string()));
  }
  const double ef = run.get<double>("verify.enroll_fraction", 0.4);
  const auto k = run.get<std::size_t>("verify.fusion_k", 1);
  const auto split = enrollment_split(beats, ef);
  std::vector<Embedding> emb(beats.size());
  for (const auto& sp : split) {
    const auto e = embed(m.graph, beats, sp.evaluate);
    for (std::size_t j = 0; j < sp.evaluate.size(); ++j) emb[sp.evaluate[j]] = e[j];
  }
  const auto tr = score_trials(split, emb, std::move(templates), k, backend, head ? &*head : nullptr);
  const auto c = far_frr_eer(tr.genuine, tr.imposter);
  run.text("far_frr.csv", curve_csv(c));
  PlotSeries far{"FAR", c.thresholds, c.far}, frr{"FRR", c.thresholds, c.frr};
  run.text("far_frr.svg", svg_line_plot({"FAR / FRR (" + std::string(backend_name(backend)) + ")", "threshold", "rate"},
                                        {far, frr}));
  std::vector<double> tar(c.frr.size());
  for (std::size_t i = 0; i < tar.size(); ++i) tar[i] = 1.0 - c.frr[i];
  run.text("roc.svg", svg_line_plot({"ROC (" + std::string(backend_name(backend)) + ")", "FAR", "TAR"},
                                    {{"ROC", c.far, tar}}));
  run.metrics({{"backend", backend_name(backend)},
               {"enroll_fraction", ef},
               {"fusion_k", k},
               {"eer", c.eer},
               {"eer_threshold", c.eer_threshold},
               {"auc", c.auc},
               {"genuine_trials", c.n_genuine},
               {"imposter_trials", c.n_imposter},
               {"skipped_subjects", tr.skipped_subjects}});
}

void cmd_report(Run& run, const Paths& p) {
  if (p.inputs.empty()) throw Error("give at least one --input run directory");
  json entries = json::array();
  std::set<std::string> hashes;
  std::string csv = "run,command,metric,value\n";
  std::vector<PlotSeries> acc_curves, far_curves;
  for (const auto& dir : p.inputs) {
    const fs::path mp = fs::path(dir) / "metrics.json";
    run.input(mp);
    const auto m = read_json(mp);
    const auto hash = m.value("config_hash", std::string{});
    hashes.insert(hash);
    entries.push_back({{"run", fs::path(dir).filename().string()}, {"metrics", m}});
    const auto flat = m.flatten();
    for (auto it = flat.begin(); it != flat.end(); ++it)
      if (it.value().is_number())
        csv += fs::path(dir).filename().string() + "," + m.value("command", "") + "," + it.key() + "," +
               it.value().dump() + "\n";
    const std::string name = fs::path(dir).filename().string();
    if (m.contains("accuracy_vs_beats") || fs::exists(fs::path(dir) / "accuracy_vs_beats.csv")) {
      std::ifstream in(fs::path(dir) / "accuracy_vs_beats.csv");
      PlotSeries s{name, {}, {}};
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        double k, a;
        if (std::sscanf(line.c_str(), "%lf,%lf", &k, &a) == 2) {
          s.x.push_back(k);
          s.y.push_back(a);
        }
      }
      if (s.x.size() >= 2) acc_curves.push_back(std::move(s));
    }
    if (fs::exists(fs::path(dir) / "far_frr.csv")) {
      std::ifstream in(fs::path(dir) / "far_frr.csv");
      PlotSeries fa{name + " FAR", {}, {}}, fr{name + " FRR", {}, {}};
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        double th, a, b;
        if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &th, &a, &b) == 3) {
          fa.x.push_back(th);
          fa.y.push_back(a);
          fr.x.push_back(th);
          fr.y.push_back(b);
        }
      }
      far_curves.push_back(std::move(fa));
      far_curves.push_back(std::move(fr));
    }
  }
  if (hashes.size() > 1 && !p.force) {
    std::string list;
    for (const auto& h : hashes) list += (list.empty() ? "" : ", ") + (h.empty() ? std::string("<none>") : h);
    throw Error("inputs were produced with different config hashes (" + list + "); pass --force to combine");
  }
  run.text("report.csv", csv);
  if (!acc_curves.empty()) {
    double xmax = 2;
    for (const auto& s : acc_curves) xmax = std::max(xmax, s.x.back());
    run.text("accuracy_vs_beats.svg",
             svg_line_plot({"Accuracy vs. fused beats", "beats per decision", "accuracy", 1, xmax, 0, 1, true}, acc_curves));
  }
  if (!far_curves.empty()) run.text("far_frr.svg", svg_line_plot({"FAR / FRR", "threshold", "rate"}, far_curves));
  run.metrics({{"runs", entries}, {"mixed_hashes", hashes.size() > 1}});
}

// ---- wiring ------------------------------------------------------------------------

using Handler = void (*)(Run&, const Paths&);

struct Command {
  const char* name;
  const char* help;
  Handler fn;
  // (flag, config key) pairs this command accepts
  std::vector<std::pair<const char*, const char*>> flags;
  std::vector<const char*> paths;  // which Paths members it takes
};

const std::vector<Command>& commands() {
  static const std::vector<Command> c = {
      {"synth", "generate a labeled synthetic corpus", cmd_synth,
       {{"--subjects", "synth.subjects"}, {"--beats", "synth.beats"}, {"--sessions", "synth.sessions"},
        {"--noise-scale", "synth.noise_scale"}, {"--session-drift", "synth.session_drift"}},
       {}},
      {"ingest", "resample CSV or raw recordings into a 500 Hz corpus", cmd_ingest,
       {{"--fs", "ingest.fs"}, {"--sample-format", "ingest.sample_format"}, {"--gain", "ingest.gain"}},
       {"input", "manifest", "subject", "session"}},
      {"train-detector", "train the R-peak detector on an annotated corpus", cmd_train_detector,
       {{"--epochs", "detector.epochs"}, {"--batch-size", "detector.batch_size"},
        {"--learning-rate", "detector.learning_rate"}, {"--val-fraction", "detector.val_fraction"},
        {"--base-filters", "detector.base_filters"}, {"--kernel", "detector.kernel"},
        {"--deep-supervision", "detector.deep_supervision"}, {"--min-distance", "detect.min_distance"},
        {"--tolerance", "detect.tolerance"}},
       {"corpus"}},
      {"detect", "detect R-peaks in every record of a corpus", cmd_detect,
       {{"--threshold", "detect.threshold"}, {"--min-distance", "detect.min_distance"},
        {"--tolerance", "detect.tolerance"}},
       {"corpus", "model"}},
      {"segment", "cut R-aligned beats at the corpus annotations", cmd_segment, {}, {"corpus", "subjects"}},
      {"train-id", "train the identification network (60-20-20 split)", cmd_train_id,
       {{"--epochs", "identify.epochs"}, {"--batch-size", "identify.batch_size"},
        {"--learning-rate", "identify.learning_rate"}, {"--dropout", "identify.dropout"},
        {"--patience", "identify.patience"}, {"--fusion-k", "identify.fusion_k"},
        {"--max-fusion-k", "evaluate.max_fusion_k"}},
       {"beats", "subjects"}},
      {"identify", "classify beats with a trained model", cmd_identify, {{"--fusion-k", "identify.fusion_k"}},
       {"beats", "model", "subjects"}},
      {"cross-session", "train on one session, test on the other", cmd_cross_session,
       {{"--epochs", "identify.epochs"}, {"--batch-size", "identify.batch_size"},
        {"--learning-rate", "identify.learning_rate"}, {"--dropout", "identify.dropout"}},
       {"beats", "subjects"}},
      {"train-siamese", "train the verification head on enrollment beats", cmd_train_siamese,
       {{"--epochs", "siamese.epochs"}, {"--batch-size", "siamese.batch_size"},
        {"--learning-rate", "siamese.learning_rate"}, {"--smote-ratio", "siamese.smote_ratio"},
        {"--smote-k", "siamese.smote_k"}, {"--matched-pairs", "siamese.matched_per_subject"},
        {"--mismatched-pairs", "siamese.mismatched_per_subject"}, {"--enroll-fraction", "verify.enroll_fraction"}},
       {"beats", "model", "subjects"}},
      {"enroll", "build one template per subject", cmd_enroll, {{"--enroll-fraction", "verify.enroll_fraction"}},
       {"beats", "model", "subjects"}},
      {"verify", "score evaluation beats against templates; FAR/FRR/EER", cmd_verify,
       {{"--enroll-fraction", "verify.enroll_fraction"}, {"--fusion-k", "verify.fusion_k"},
        {"--backend", "verify.backend"}},
       {"beats", "model", "head", "templates", "subjects"}},
      {"evaluate", "cross-validated identification metrics", cmd_evaluate,
       {{"--scheme", "evaluate.scheme"}, {"--epochs", "identify.epochs"}, {"--batch-size", "identify.batch_size"},
        {"--learning-rate", "identify.learning_rate"}, {"--dropout", "identify.dropout"},
        {"--max-fusion-k", "evaluate.max_fusion_k"}},
       {"beats", "subjects"}},
      {"report", "collect run metrics into CSV, JSON and SVG", cmd_report, {}, {"input", "force"}},
  };
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pulsegate: ECG biometric identification and verification"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  struct Bound {
    const Command* cmd;
    CLI::App* sub;
    std::string config, out, seed;
    std::map<std::string, std::string> raw;  // flag name -> value
    Paths paths;
  };
  std::vector<Bound> bound(commands().size());
  for (std::size_t i = 0; i < commands().size(); ++i) {
    auto& b = bound[i];
    b.cmd = &commands()[i];
    b.sub = app.add_subcommand(b.cmd->name, b.cmd->help);
    b.sub->add_option("--config", b.config, "JSON config file (flags override it)");
    b.sub->add_option("--out", b.out, "output directory")->required();
    b.sub->add_option("--seed", b.seed, param("seed").help);
    for (const auto& [flag, key] : b.cmd->flags) b.sub->add_option(flag, b.raw[flag], param(key).help);
    for (const std::string what : b.cmd->paths) {
      auto& p = b.paths;
      if (what == "corpus") b.sub->add_option("--corpus", p.corpus, "corpus manifest (corpus.json)")->required();
      if (what == "beats") b.sub->add_option("--beats", p.beats, "beat set directory (beats.bin + beats.json)")->required();
      if (what == "model") b.sub->add_option("--model", p.model, "model file")->required();
      if (what == "head") b.sub->add_option("--head", p.head, "Siamese head model file");
      if (what == "templates") b.sub->add_option("--templates", p.templates, "template directory")->required();
      if (what == "subjects") b.sub->add_option("--subjects", p.subjects, "comma-separated subject ids to keep");
      if (what == "manifest") b.sub->add_option("--manifest", p.manifest, "corpus manifest of input records");
      if (what == "input") b.sub->add_option("--input", p.inputs, "input file or run directory (repeatable)");
      if (what == "subject") b.sub->add_option("--subject", p.subject, "subject id for a single --input");
      if (what == "session") b.sub->add_option("--session", p.session, "session id for --input");
      if (what == "force") b.sub->add_flag("--force", p.force, "combine runs with different config hashes");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  for (auto& b : bound) {
    if (!b.sub->parsed()) continue;
    try {
      Run run(b.cmd->name, std::vector<std::string>(argv + 1, argv + argc));
      std::map<std::string, std::string> flags;
      if (b.sub->count("--seed")) flags["seed"] = b.seed;
      for (const auto& [flag, key] : b.cmd->flags)
        if (b.sub->count(flag)) flags[key] = b.raw[flag];
      run.prepare(b.config, flags, b.out);
      b.cmd->fn(run, b.paths);
      run.finish();
    } catch (const std::exception& e) {
      std::fprintf(stderr, "pulsegate %s: error: %s\n", b.cmd->name, e.what());
      return 1;
    }
  }
  return 0;
}
