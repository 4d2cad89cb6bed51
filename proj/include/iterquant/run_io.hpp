/*
 * Copyright (c) 2026 The iterquant Authors. All Rights Reserved
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "iterquant/error.hpp"
#include "iterquant/pipeline.hpp"

namespace iterquant {

inline constexpr const char* kVersion = "0.1.0";

using Json = nlohmann::ordered_json;

/// Everything `iterate` needs, as read from a JSON document.
struct RunConfig {
  std::string corpus = "data/sonnets.txt";
  SplitFractions split{};
  std::optional<std::string> checkpoint;  // IQWT of a trained model
  std::string output_dir = "runs/default";
  bool save_iteration_artifacts = false;
  std::size_t histogram_bins = 0;  // 0: no histograms
  PipelineConfig pipeline{};
};

namespace detail {

template <class T>
void take(const Json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: bad value for '") + key +
                          "': " + e.what());
  }
}

inline void reject_unknown(const Json& j, std::set<std::string> known,
                           const std::string& where) {
  if (!j.is_object()) {
    throw ValidationError("config: '" + where + "' must be an object");
  }
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) {
      throw ValidationError("config: unknown key '" + where + "." + key + "'");
    }
  }
}

}  // namespace detail

inline Json to_json(const TrainConfig& t) {
  return Json{{"hidden", t.hidden},
              {"layers", t.layers},
              {"embed_dim", t.embed_dim},
              {"bptt_len", t.bptt_len},
              {"batch", t.batch},
              {"epochs", t.epochs},
              {"retrain_epochs", t.retrain_epochs},
              {"lr_init", t.lr_init},
              {"lr_decay", t.lr_decay},
              {"decay_start_epoch", t.decay_start_epoch},
              {"clip_norm", t.clip_norm},
              {"init_scale", t.init_scale},
              {"seed", t.seed},
              {"retrain_lr_divisor", t.retrain_lr_divisor},
              {"prune_retrain_lr_divisor", t.prune_retrain_lr_divisor}};
}

inline TrainConfig train_config_from_json(const Json& j) {
  detail::reject_unknown(j,
                         {"hidden", "layers", "embed_dim", "bptt_len", "batch",
                          "epochs", "retrain_epochs", "lr_init", "lr_decay",
                          "decay_start_epoch", "clip_norm", "init_scale",
                          "seed", "retrain_lr_divisor",
                          "prune_retrain_lr_divisor"},
                         "trainer");
  TrainConfig t;
  detail::take(j, "hidden", t.hidden);
  detail::take(j, "layers", t.layers);
  detail::take(j, "embed_dim", t.embed_dim);
  detail::take(j, "bptt_len", t.bptt_len);
  detail::take(j, "batch", t.batch);
  detail::take(j, "epochs", t.epochs);
  detail::take(j, "retrain_epochs", t.retrain_epochs);
  detail::take(j, "lr_init", t.lr_init);
  detail::take(j, "lr_decay", t.lr_decay);
  detail::take(j, "decay_start_epoch", t.decay_start_epoch);
  detail::take(j, "clip_norm", t.clip_norm);
  detail::take(j, "init_scale", t.init_scale);
  detail::take(j, "seed", t.seed);
  detail::take(j, "retrain_lr_divisor", t.retrain_lr_divisor);
  detail::take(j, "prune_retrain_lr_divisor", t.prune_retrain_lr_divisor);
  return t;
}

/// Fully materialized form: every default is written out.
inline Json to_json(const RunConfig& c) {
  const auto& p = c.pipeline;
  Json j;
  j["corpus"] = c.corpus;
  j["split"] = {{"train", c.split.train}, {"valid", c.split.valid}};
  j["checkpoint"] = c.checkpoint ? Json(*c.checkpoint) : Json(nullptr);
  j["output_dir"] = c.output_dir;
  j["quant"] = {{"bits", p.bits},
                {"tables_per_row", p.tables_per_row},
                {"method", std::string(to_string(p.method))},
                {"tol", p.alternating.tol},
                {"max_iters", p.alternating.max_iters}};
  j["iterations"] = p.iterations;
  j["prune"] = {{"rate", p.prune_rate},
                {"scope", std::string(to_string(p.prune_scope))}};
  j["tensor_filter"] = p.tensor_filter;
  j["early_stop_patience"] = p.early_stop_patience;
  j["continue_schedule"] = p.continue_schedule;
  j["save_iteration_artifacts"] = c.save_iteration_artifacts;
  j["histogram_bins"] = c.histogram_bins;
  j["threads"] = p.threads;
  j["trainer"] = to_json(p.trainer);
  return j;
}

inline RunConfig run_config_from_json(const Json& j) {
  detail::reject_unknown(
      j,
      {"corpus", "split", "checkpoint", "output_dir", "quant", "iterations",
       "prune", "tensor_filter", "early_stop_patience", "continue_schedule",
       "save_iteration_artifacts", "histogram_bins", "threads", "trainer"},
      "config");
  RunConfig c;
  auto& p = c.pipeline;
  detail::take(j, "corpus", c.corpus);
  if (j.contains("split")) {
    const auto& s = j.at("split");
    detail::reject_unknown(s, {"train", "valid"}, "split");
    detail::take(s, "train", c.split.train);
    detail::take(s, "valid", c.split.valid);
  }
  if (j.contains("checkpoint") && !j.at("checkpoint").is_null()) {
    std::string path;
    detail::take(j, "checkpoint", path);
    c.checkpoint = path;
  }
  detail::take(j, "output_dir", c.output_dir);
  if (j.contains("quant")) {
    const auto& q = j.at("quant");
    detail::reject_unknown(
        q, {"bits", "tables_per_row", "method", "tol", "max_iters"}, "quant");
    detail::take(q, "bits", p.bits);
    detail::take(q, "tables_per_row", p.tables_per_row);
    std::string method(to_string(p.method));
    detail::take(q, "method", method);
    p.method = parse_method(method);
    detail::take(q, "tol", p.alternating.tol);
    detail::take(q, "max_iters", p.alternating.max_iters);
  }
  detail::take(j, "iterations", p.iterations);
  if (j.contains("prune")) {
    const auto& pr = j.at("prune");
    detail::reject_unknown(pr, {"rate", "scope"}, "prune");
    detail::take(pr, "rate", p.prune_rate);
    std::string scope(to_string(p.prune_scope));
    detail::take(pr, "scope", scope);
    p.prune_scope = parse_scope(scope);
  }
  detail::take(j, "tensor_filter", p.tensor_filter);
  detail::take(j, "early_stop_patience", p.early_stop_patience);
  detail::take(j, "continue_schedule", p.continue_schedule);
  detail::take(j, "save_iteration_artifacts", c.save_iteration_artifacts);
  detail::take(j, "histogram_bins", c.histogram_bins);
  detail::take(j, "threads", p.threads);
  if (j.contains("trainer")) p.trainer = train_config_from_json(j.at("trainer"));
  if (c.histogram_bins == 1) {
    throw ValidationError("config: histogram_bins must be 0 or >= 2");
  }
  p.validate();
  return c;
}

inline Json read_json_file(const std::filesystem::path& path) {
  const Bytes raw = read_file(path);
  try {
    return Json::parse(raw.begin(), raw.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

inline void write_text(const std::filesystem::path& path,
                       const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string utc_timestamp() {
  const std::time_t now =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// manifest.json: written as "running" when a command starts and rewritten
/// with the outcome when it ends.
class RunManifest {
 public:
  RunManifest(std::filesystem::path dir, std::string command, Json config)
      : path_(std::move(dir) / "manifest.json") {
    doc_["command"] = std::move(command);
    doc_["version"] = kVersion;
    doc_["config"] = std::move(config);
    doc_["corpus_checksum"] = nullptr;
    doc_["started"] = utc_timestamp();
    doc_["finished"] = nullptr;
    doc_["status"] = "running";
    std::filesystem::create_directories(path_.parent_path());
    save();
  }

  void set_corpus_checksum(std::uint64_t c) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(c));
    doc_["corpus_checksum"] = buf;
    save();
  }

  void set(const std::string& key, Json value) {
    doc_[key] = std::move(value);
    save();
  }

  void finish(int exit_code, const std::string& error = {}) {
    doc_["finished"] = utc_timestamp();
    doc_["status"] = exit_code == 0 ? "ok" : "failed";
    doc_["exit_code"] = exit_code;
    if (!error.empty()) doc_["error"] = error;
    save();
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  void save() const { write_text(path_, doc_.dump(2) + "\n"); }

  std::filesystem::path path_;
  Json doc_;
};

/// records.csv with one row per iteration, flushed as each row lands.
class RecordsCsv {
 public:
  explicit RecordsCsv(const std::filesystem::path& path)
      : out_(path, std::ios::trunc) {
    if (!out_) throw IoError("cannot write '" + path.string() + "'");
    out_.precision(10);
  }

  void append(const IterationRecord& r) {
    if (!header_written_) {
      out_ << "n,total_sse,fp_ppl,quant_ppl,drift,seconds";
      for (const auto& [name, e] : r.tensor_sse) out_ << ",sse:" << name;
      out_ << '\n';
      header_written_ = true;
    }
    out_ << r.n << ',' << r.total_sse << ',' << r.fp_ppl << ','
         << r.quant_ppl << ',';
    if (std::isfinite(r.drift)) out_ << r.drift;
    out_ << ',' << r.seconds;
    for (const auto& [name, e] : r.tensor_sse) out_ << ',' << e;
    out_ << '\n';
    out_.flush();
    if (!out_) throw IoError("records.csv: write failed");
  }

 private:
  std::ofstream out_;
  bool header_written_ = false;
};

/// File-system friendly form of a tensor name.
inline std::string artifact_stem(std::string_view name) {
  std::string s(name);
  for (char& ch : s) {
    if (ch == '/' || ch == '\\' || ch == ':') ch = '_';
  }
  return s;
}

inline void save_quantized_set(const QuantizedSet& set,
                               const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, q] : set) {
    save_quantized(round_alphas(q, AlphaDtype::f32),
                   dir / (artifact_stem(name) + ".iqqt"));
  }
}

inline Json to_json(const IterationRecord& r) {
  Json j;
  j["n"] = r.n;
  j["total_sse"] = r.total_sse;
  j["fp_ppl"] = r.fp_ppl;
  j["quant_ppl"] = r.quant_ppl;
  j["drift"] = std::isfinite(r.drift) ? Json(r.drift) : Json(nullptr);
  j["seconds"] = r.seconds;
  Json per = Json::object();
  for (const auto& [name, e] : r.tensor_sse) per[name] = e;
  j["tensor_sse"] = std::move(per);
  return j;
}

}  // namespace iterquant

namespace iterquant {

/// Loads the corpus and optional checkpoint, runs the pipeline, and fills
/// `c.output_dir` with config.json, records.csv, model artifacts and
/// histograms. `log` receives one line per stage and per iteration.
inline PipelineResult execute_run(
    const RunConfig& c, const Corpus& corpus,
    const std::function<void(const std::string&)>& log = {}) {
  namespace fs = std::filesystem;
  const fs::path dir = c.output_dir;
  fs::create_directories(dir);
  write_text(dir / "config.json", to_json(c).dump(2) + "\n");

  PipelineConfig pcfg = c.pipeline;
  LstmParams params;
  if (c.checkpoint) {
    const ModelBundle b = load_model(*c.checkpoint);
    params = from_bundle(b, params_shape_from_metadata(b));
    if (params.vocab != corpus.vocab_size()) {
      throw ValidationError("checkpoint vocabulary (" +
                            std::to_string(params.vocab) +
                            ") does not match the corpus (" +
                            std::to_string(corpus.vocab_size()) + ")");
    }
    pcfg.skip_initial_training = true;
  } else {
    params = init_params(pcfg.trainer, corpus.vocab_size());
  }
  LstmModel model(std::move(params), corpus, pcfg.trainer);

  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  char line[256];
  RecordsCsv csv(dir / "records.csv");
  const bool hist = c.histogram_bins >= 2;
  if (hist) fs::create_directories(dir / "histograms");

  PipelineObserver obs;
  obs.on_stage = [&](const std::string& stage, double ppl) {
    std::snprintf(line, sizeof line, "%-9s fp-ppl %.4f", stage.c_str(), ppl);
    say(line);
  };
  obs.on_before_quantize = [&](int n, const ModelBundle& b) {
    if (!hist || n != 0) return;
    const TensorFilter filter = regex_filter(pcfg.tensor_filter);
    for (const auto& t : b.tensors) {
      if (!filter(t.name)) continue;
      histogram_export(t.matrix, c.histogram_bins,
                       dir / "histograms" /
                           (artifact_stem(t.name) + ".initial.csv"));
    }
  };
  obs.on_iteration = [&](const IterationRecord& r, const QuantizedSet& qs) {
    csv.append(r);
    if (c.save_iteration_artifacts) {
      char sub[32];
      std::snprintf(sub, sizeof sub, "iter_%03d", r.n);
      save_quantized_set(qs, dir / "iterations" / sub);
    }
    std::snprintf(line, sizeof line,
                  "iter %3d  sse %12.4f  fp-ppl %8.4f  q-ppl %8.4f  drift %s",
                  r.n, r.total_sse, r.fp_ppl, r.quant_ppl,
                  std::isfinite(r.drift)
                      ? std::to_string(r.drift).c_str()
                      : "-");
    say(line);
  };

  PipelineResult res = run_pipeline(model, pcfg, obs);

  save_model(res.final_model, dir / "model_final.iqwt");
  save_model(res.quantized_model, dir / "model_quantized.iqwt");
  save_quantized_set(res.final_quantized, dir / "quantized");
  if (res.mask) save_model(mask_to_bundle(*res.mask), dir / "mask.iqwt");
  if (hist) {
    for (const auto& t : res.final_model.tensors) {
      if (!res.final_quantized.count(t.name)) continue;
      const std::string stem = artifact_stem(t.name);
      histogram_export(t.matrix, c.histogram_bins,
                       dir / "histograms" / (stem + ".final.csv"));
      histogram_export(res.final_quantized.at(t.name), c.histogram_bins,
                       dir / "histograms" / (stem + ".quantized.csv"));
    }
  }
  return res;
}

}  // namespace iterquant
