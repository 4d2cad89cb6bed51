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

// iterquant command-line front end.

#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "iterquant/corpus.hpp"
#include "iterquant/error.hpp"
#include "iterquant/model_io.hpp"
#include "iterquant/pipeline.hpp"
#include "iterquant/pruner.hpp"
#include "iterquant/quantized_tensor.hpp"
#include "iterquant/run_io.hpp"
#include "iterquant/selftest.hpp"
#include "iterquant/storage.hpp"

namespace {

using namespace iterquant;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitFormat = 2;
constexpr int kExitValidation = 3;
constexpr int kExitNumerical = 4;

// Manifest of the running command; main() finalizes it on failure.
std::optional<RunManifest> g_manifest;

int exit_code_for(std::exception_ptr e) {
  try {
    std::rethrow_exception(e);
  } catch (const FormatError&) {
    return kExitFormat;
  } catch (const IoError&) {
    return kExitFormat;
  } catch (const fs::filesystem_error&) {
    return kExitFormat;
  } catch (const ValidationError&) {
    return kExitValidation;
  } catch (const nlohmann::json::exception&) {
    return kExitValidation;
  } catch (const NumericalError&) {
    return kExitNumerical;
  } catch (...) {
    return kExitFailure;
  }
}

AlphaDtype parse_alpha_dtype(const std::string& s) {
  if (s == "f32") return AlphaDtype::f32;
  if (s == "f16") return AlphaDtype::f16;
  throw ValidationError("alpha dtype must be f32 or f16, got '" + s + "'");
}

std::string fmt(const char* spec, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, x);
  return buf;
}

void print_json(const Json& j) { std::cout << j.dump(2) << '\n'; }

double sum_squares(const DenseMatrix& m) {
  double s = 0.0;
  for (double x : m.values()) s += x * x;
  return s;
}

// ---------------------------------------------------------------- quantize

struct QuantizeArgs {
  std::string model;
  int bits = 1;
  std::size_t tables = 1;
  std::string method = "alternating";
  std::string mask;
  std::string out;
  std::string tensors;
  std::string alpha_dtype = "f32";
  unsigned threads = 0;
  bool json = false;
};

int cmd_quantize(const QuantizeArgs& a) {
  const Json config{{"model", a.model},          {"bits", a.bits},
                    {"tables_per_row", a.tables}, {"method", a.method},
                    {"mask", a.mask.empty() ? Json(nullptr) : Json(a.mask)},
                    {"tensors", a.tensors},       {"alpha_dtype", a.alpha_dtype},
                    {"threads", a.threads}};
  RunManifest& manifest = g_manifest.emplace(a.out, "quantize", config);

  detail::check_bits(a.bits);
  if (a.tables < 1) throw ValidationError("--tables must be >= 1");
  QuantizeOptions opts;
  opts.bits = a.bits;
  opts.tables_per_row = a.tables;
  opts.method = parse_method(a.method);
  opts.threads = a.threads;
  const AlphaDtype dtype = parse_alpha_dtype(a.alpha_dtype);
  const TensorFilter filter = regex_filter(a.tensors);

  const ModelBundle bundle = load_model(a.model);
  std::optional<PruneMask> mask;
  if (!a.mask.empty()) mask = mask_from_bundle(load_model(a.mask));

  Json rows = Json::array();
  double total = 0.0;
  if (!a.json) {
    std::printf("%-28s %7s %7s %16s %12s\n", "tensor", "rows", "cols", "sse",
                "rel_sse");
  }
  for (const auto& t : bundle.tensors) {
    if (!filter(t.name)) continue;
    const BitVector* bits = nullptr;
    if (mask) {
      if (const TensorMask* tm = mask->find(t.name)) {
        if (tm->rows != t.matrix.rows() || tm->cols != t.matrix.cols()) {
          throw DimensionError("mask for '" + t.name + "' has the wrong shape");
        }
        bits = &tm->bits;
      }
    }
    const QuantizedTensor q =
        round_alphas(quantize_tensor(t.matrix, opts, bits), dtype);
    const DenseMatrix ref = masked_reference(t.matrix, bits);
    const double e = sse(ref, dequantize(q));
    const double energy = sum_squares(ref);
    const double rel = energy > 0.0 ? e / energy : 0.0;
    const fs::path artifact = fs::path(a.out) / (artifact_stem(t.name) + ".iqqt");
    save_quantized(q, artifact, dtype);
    total += e;
    rows.push_back({{"tensor", t.name},
                    {"rows", t.matrix.rows()},
                    {"cols", t.matrix.cols()},
                    {"sse", e},
                    {"relative_sse", rel},
                    {"artifact", artifact.string()}});
    if (!a.json) {
      std::printf("%-28s %7zu %7zu %16.6f %12.6f\n", t.name.c_str(),
                  t.matrix.rows(), t.matrix.cols(), e, rel);
    }
  }
  if (rows.empty()) {
    throw ValidationError("no tensor in '" + a.model + "' matches --tensors '" +
                          a.tensors + "'");
  }
  const Json result{{"tensors", rows}, {"total_sse", total}};
  manifest.set("result", result);
  if (a.json) {
    print_json(result);
  } else {
    std::printf("%-28s %7s %7s %16.6f\n", "total", "", "", total);
  }
  manifest.finish(kExitOk);
  return kExitOk;
}

// ------------------------------------------------------------------- prune

struct PruneArgs {
  std::string model;
  double rate = 0.0;
  std::string scope = "per-tensor";
  std::string out_mask;
  std::string tensors;
  bool json = false;
};

int cmd_prune(const PruneArgs& a) {
  if (!(a.rate >= 0.0 && a.rate < 1.0)) {
    throw ValidationError("--rate must be in [0, 1), got " + fmt("%g", a.rate));
  }
  const PruneScope scope = parse_scope(a.scope);
  if (a.rate == 0.0) {
    std::cerr << "warning: --rate 0 prunes nothing; writing an identity mask\n";
  }
  const ModelBundle bundle = load_model(a.model);
  const PruneMask mask =
      magnitude_prune(bundle, a.rate, scope, regex_filter(a.tensors));
  if (mask.tensors.empty()) {
    throw ValidationError("no tensor in '" + a.model + "' matches --tensors '" +
                          a.tensors + "'");
  }
  const fs::path out(a.out_mask);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_model(mask_to_bundle(mask), out);

  Json rows = Json::array();
  std::size_t total = 0;
  std::size_t kept = 0;
  if (!a.json) {
    std::printf("%-28s %10s %10s %10s\n", "tensor", "weights", "survivors",
                "rate");
  }
  for (const auto& [name, tm] : mask.tensors) {
    const std::size_t n = tm.bits.size();
    const std::size_t s = tm.bits.count();
    total += n;
    kept += s;
    rows.push_back({{"tensor", name},
                    {"weights", n},
                    {"survivors", s},
                    {"achieved_rate", tm.achieved_rate()}});
    if (!a.json) {
      std::printf("%-28s %10zu %10zu %10.6f\n", name.c_str(), n, s,
                  tm.achieved_rate());
    }
  }
  const double achieved =
      static_cast<double>(total - kept) / static_cast<double>(total);
  if (a.json) {
    print_json({{"tensors", rows},
                {"weights", total},
                {"survivors", kept},
                {"achieved_rate", achieved},
                {"scope", std::string(to_string(scope))},
                {"mask", out.string()}});
  } else {
    std::printf("survivors %zu of %zu, achieved rate %.6f\n", kept, total,
                achieved);
  }
  return kExitOk;
}

// ----------------------------------------------------------------- iterate

struct IterateArgs {
  std::string config;
  std::string out;
  int iterations = 0;
  int bits = 0;
  std::size_t tables = 0;
  std::string method;
  double prune_rate = 0.0;
  std::uint64_t seed = 0;
  unsigned threads = 0;
  std::string corpus;
  std::string checkpoint;
  std::size_t histograms = 0;
  bool save_iterations = false;
  bool json = false;
};

struct IterateGiven {
  bool out, iterations, bits, tables, method, prune_rate, seed, threads,
      corpus, checkpoint, histograms;
};

RunConfig resolve_run_config(const IterateArgs& a, const IterateGiven& g) {
  Json j = a.config.empty() ? Json::object() : read_json_file(a.config);
  RunConfig c = run_config_from_json(j);
  auto& p = c.pipeline;
  if (g.out) c.output_dir = a.out;
  if (g.iterations) p.iterations = a.iterations;
  if (g.bits) p.bits = a.bits;
  if (g.tables) p.tables_per_row = a.tables;
  if (g.method) p.method = parse_method(a.method);
  if (g.prune_rate) p.prune_rate = a.prune_rate;
  if (g.seed) p.trainer.seed = a.seed;
  if (g.threads) p.threads = a.threads;
  if (g.corpus) c.corpus = a.corpus;
  if (g.checkpoint) c.checkpoint = a.checkpoint;
  if (g.histograms) c.histogram_bins = a.histograms;
  if (a.save_iterations) c.save_iteration_artifacts = true;
  if (c.histogram_bins == 1) {
    throw ValidationError("--histograms must be 0 or >= 2");
  }
  p.validate();
  return c;
}

int cmd_iterate(const IterateArgs& a, const IterateGiven& g) {
  auto& manifest = g_manifest;
  if (g.out) manifest.emplace(a.out, "iterate", Json(nullptr));
  const RunConfig c = resolve_run_config(a, g);
  if (manifest) {
    manifest->set("config", to_json(c));
  } else {
    manifest.emplace(c.output_dir, "iterate", to_json(c));
  }
  const Corpus corpus = load_corpus(c.corpus, c.split);
  manifest->set_corpus_checksum(corpus.checksum);

  auto log = [&](const std::string& line) {
    (a.json ? std::cerr : std::cout) << line << std::endl;
  };
  const PipelineResult res = execute_run(c, corpus, log);

  Json records = Json::array();
  for (const auto& r : res.records) records.push_back(to_json(r));
  const Json result{{"output_dir", c.output_dir},
                    {"reference_fp_ppl", res.reference_fp_ppl},
                    {"best_iteration", res.best_iteration},
                    {"stopped_early", res.stopped_early},
                    {"records", records}};
  manifest->set("result", result);
  if (a.json) print_json(result);
  manifest->finish(kExitOk);
  return kExitOk;
}

// ------------------------------------------------------------------ report

struct ReportArgs {
  std::string artifact;
  std::string run_dir;
  std::size_t rows = 0;
  std::size_t cols = 0;
  int bits = 1;
  std::size_t tables = 1;
  int alpha_bits = 16;
  double prune_rate = 0.0;
  double mask_bits = 0.0;
  std::string histograms;
  std::size_t bins = 64;
  bool json = false;
};

struct ReportGiven {
  bool alpha_bits, mask_bits;
};

// Layout of a stored tensor. The prune rate comes from its embedded mask.
StorageLayout layout_of(const LoadedQuantized& lq, const ReportArgs& a,
                        const ReportGiven& g) {
  const QuantizedTensor& q = lq.tensor;
  StorageLayout l;
  l.rows = q.rows;
  l.cols = q.cols;
  l.bits = q.k;
  l.tables_per_row = q.tables_per_row;
  if (q.mask) {
    const double n = static_cast<double>(q.mask->size());
    l.prune_rate = n > 0 ? static_cast<double>(q.mask->size() - q.mask->count()) / n
                         : 0.0;
  }
  l.alpha_bits = g.alpha_bits ? a.alpha_bits
                              : (lq.alpha_dtype == AlphaDtype::f32 ? 32 : 16);
  l.mask_bits_per_weight =
      g.mask_bits ? a.mask_bits : (l.prune_rate > 0.0 ? 0.1 : 0.0);
  return l;
}

Json layout_json(const StorageLayout& l) {
  return {{"rows", l.rows},
          {"cols", l.cols},
          {"bits", l.bits},
          {"tables_per_row", l.tables_per_row},
          {"prune_rate", l.prune_rate},
          {"mask_bits_per_weight", l.mask_bits_per_weight},
          {"alpha_bits", l.alpha_bits}};
}

Json report_json(const StorageReport& r) {
  Json j;
  for (const auto& [key, value] : r.fields()) j[key] = value;
  j["alpha_overhead_significant"] = r.alpha_overhead_significant;
  j["table_size_kb"] = format_kb(r.table_size_bytes);
  return j;
}

int cmd_report(const ReportArgs& a, const ReportGiven& g) {
  if (!a.artifact.empty() && !a.run_dir.empty()) {
    throw ValidationError("--artifact and --run-dir are mutually exclusive");
  }
  if (!a.histograms.empty() && a.artifact.empty() && a.run_dir.empty()) {
    throw ValidationError("--histograms needs --artifact or --run-dir");
  }
  if (!a.histograms.empty() && a.bins < 2) {
    throw ValidationError("--bins must be >= 2");
  }

  struct Item {
    std::string name;
    LoadedQuantized lq;
    StorageLayout layout;
  };
  std::vector<Item> items;
  std::vector<StorageLayout> layouts;
  if (!a.artifact.empty()) {
    LoadedQuantized lq = load_quantized(a.artifact);
    const StorageLayout l = layout_of(lq, a, g);
    items.push_back({fs::path(a.artifact).stem().string(), std::move(lq), l});
  } else if (!a.run_dir.empty()) {
    const fs::path dir = fs::path(a.run_dir) / "quantized";
    if (!fs::is_directory(dir)) {
      throw IoError("'" + dir.string() + "' is not a directory");
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().extension() == ".iqqt") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no .iqqt files in '" + dir.string() + "'");
    for (const auto& f : files) {
      LoadedQuantized lq = load_quantized(f);
      const StorageLayout l = layout_of(lq, a, g);
      items.push_back({f.stem().string(), std::move(lq), l});
    }
  } else {
    if (a.rows == 0 || a.cols == 0) {
      throw ValidationError(
          "report needs --artifact, --run-dir, or --rows and --cols");
    }
    StorageLayout l;
    l.rows = a.rows;
    l.cols = a.cols;
    l.bits = a.bits;
    l.tables_per_row = a.tables;
    l.prune_rate = a.prune_rate;
    l.alpha_bits = a.alpha_bits;
    l.mask_bits_per_weight =
        g.mask_bits ? a.mask_bits : (a.prune_rate > 0.0 ? 0.1 : 0.0);
    layouts.push_back(l);
  }
  for (const auto& it : items) layouts.push_back(it.layout);
  const StorageReport total = storage_report(layouts);

  Json hist_files = Json::array();
  if (!a.histograms.empty()) {
    fs::create_directories(a.histograms);
    for (const auto& it : items) {
      const DenseMatrix m = dequantize(it.lq.tensor);
      const fs::path base = fs::path(a.histograms) / it.name;
      histogram_export(m, a.bins, base.string() + ".csv");
      write_row_histograms_csv(m, a.bins, base.string() + ".rows.csv");
      hist_files.push_back(base.string() + ".csv");
      hist_files.push_back(base.string() + ".rows.csv");
    }
  }

  if (a.json) {
    Json tensors = Json::array();
    for (const auto& it : items) {
      tensors.push_back({{"tensor", it.name},
                         {"layout", layout_json(it.layout)},
                         {"report", report_json(storage_report(it.layout))}});
    }
    Json j{{"headline", headline(total)}, {"report", report_json(total)}};
    if (items.empty()) j["layout"] = layout_json(layouts.front());
    j["tensors"] = tensors;
    j["histograms"] = hist_files;
    print_json(j);
    return kExitOk;
  }

  if (items.size() > 1) {
    std::printf("%-28s %7s %7s %3s %4s %8s %12s %10s\n", "tensor", "rows",
                "cols", "k", "T", "rate", "bits/weight", "table_kb");
    for (const auto& it : items) {
      const StorageReport r = storage_report(it.layout);
      std::printf("%-28s %7zu %7zu %3d %4zu %8.4f %12.4f %10s\n",
                  it.name.c_str(), it.layout.rows, it.layout.cols,
                  it.layout.bits, it.layout.tables_per_row,
                  it.layout.prune_rate, r.total_bits_per_weight,
                  format_kb(r.table_size_bytes).c_str());
    }
  }
  std::printf("%s\n", headline(total).c_str());
  if (total.alpha_overhead_significant) {
    std::printf("note: alpha tables exceed 5%% of the storage budget\n");
  }
  std::printf("table_size_kb = %s\n", format_kb(total.table_size_bytes).c_str());
  std::printf("%s", total.to_text().c_str());
  for (const auto& f : hist_files) {
    std::printf("histogram %s\n", f.get<std::string>().c_str());
  }
  return kExitOk;
}

// ---------------------------------------------------------------- selftest

int cmd_selftest(const std::string& inject, bool json) {
  SelftestFaults faults;
  if (inject == "sign0") {
    faults.sign_zero_negative = true;
  } else if (inject == "noclip") {
    faults.skip_clipping = true;
  } else if (inject != "none") {
    throw ValidationError("unknown fault '" + inject + "'");
  }
  const auto results = run_selftest(faults);
  std::size_t failed = 0;
  Json suites = Json::array();
  for (const auto& r : results) {
    if (!r.passed) ++failed;
    suites.push_back(
        {{"suite", r.suite}, {"passed", r.passed}, {"detail", r.detail}});
    if (!json) {
      std::printf("%s  %-20s %s\n", r.passed ? "PASS" : "FAIL", r.suite.c_str(),
                  r.detail.c_str());
    }
  }
  if (json) {
    print_json({{"suites", suites}, {"failed", failed}});
  } else {
    std::printf("selftest: %zu of %zu suites passed\n", results.size() - failed,
                results.size());
  }
  return failed == 0 ? kExitOk : kExitNumerical;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::string corpus;
  std::string out;
  int epochs = 0;
  int hidden = 0;
  std::uint64_t seed = 0;
  double lr = 0.0;
  bool json = false;
};

struct TrainGiven {
  bool corpus, epochs, hidden, seed, lr;
};

int cmd_train(const TrainArgs& a, const TrainGiven& g) {
  RunManifest& manifest = g_manifest.emplace(a.out, "train", Json(nullptr));
  RunConfig c = run_config_from_json(
      a.config.empty() ? Json::object() : read_json_file(a.config));
  TrainConfig& t = c.pipeline.trainer;
  if (g.corpus) c.corpus = a.corpus;
  if (g.epochs) t.epochs = a.epochs;
  if (g.hidden) t.hidden = a.hidden;
  if (g.seed) t.seed = a.seed;
  if (g.lr) t.lr_init = a.lr;
  t.validate();
  manifest.set("config", Json{{"corpus", c.corpus},
                              {"split",
                               {{"train", c.split.train},
                                {"valid", c.split.valid}}},
                              {"trainer", to_json(t)}});
  const Corpus corpus = load_corpus(c.corpus, c.split);
  manifest.set_corpus_checksum(corpus.checksum);

  LstmParams params = init_params(t, corpus.vocab_size());
  Json epochs = Json::array();
  TrainOptions opts;
  opts.on_epoch = [&](const EpochMetrics& m) {
    epochs.push_back({{"epoch", m.epoch},
                      {"lr", m.lr},
                      {"train_loss", m.train_loss},
                      {"valid_ppl", m.valid_ppl}});
    if (!a.json) {
      std::printf("epoch %3d  lr %8.5f  train-loss %8.5f  valid-ppl %8.4f\n",
                  m.epoch, m.lr, m.train_loss, m.valid_ppl);
      std::fflush(stdout);
    }
  };
  train(params, corpus, t, opts);
  const double ppl = evaluate_perplexity(params, corpus.valid);
  const fs::path model = fs::path(a.out) / "model.iqwt";
  save_model(to_bundle(params), model);
  const Json result{{"model", model.string()},
                    {"valid_ppl", ppl},
                    {"epochs", epochs}};
  manifest.set("result", result);
  if (a.json) {
    print_json(result);
  } else {
    std::printf("valid-ppl %.4f, model written to %s\n", ppl,
                model.string().c_str());
  }
  manifest.finish(kExitOk);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Iterative binary-code quantization of LSTM weights"};
  app.set_version_flag("--version", std::string(iterquant::kVersion));
  app.require_subcommand(1);

  QuantizeArgs qa;
  auto* quantize =
      app.add_subcommand("quantize", "Quantize the tensors of an IQWT model");
  quantize->add_option("model", qa.model, "Input IQWT model")->required();
  quantize->add_option("--bits,-k", qa.bits, "Bits per weight")
      ->capture_default_str();
  quantize->add_option("--tables,-T", qa.tables, "Quantization tables per row")
      ->capture_default_str();
  quantize->add_option("--method", qa.method, "greedy, refined or alternating")
      ->capture_default_str();
  quantize->add_option("--mask", qa.mask, "Prune mask (IQWT) to respect");
  quantize->add_option("--out", qa.out, "Output directory")->required();
  quantize->add_option("--tensors", qa.tensors,
                       "Regex of tensor names to quantize (default: all)");
  quantize->add_option("--alpha-dtype", qa.alpha_dtype, "f32 or f16")
      ->capture_default_str();
  quantize->add_option("--threads", qa.threads, "Row-parallel workers (0: all cores)")
      ->capture_default_str();
  quantize->add_flag("--json", qa.json, "Print JSON instead of a table");

  PruneArgs pa;
  auto* prune = app.add_subcommand("prune", "Magnitude-prune an IQWT model");
  prune->add_option("model", pa.model, "Input IQWT model")->required();
  prune->add_option("--rate", pa.rate, "Fraction of weights to prune")
      ->required();
  prune->add_option("--scope", pa.scope, "per-tensor or global")
      ->capture_default_str();
  prune->add_option("--out-mask", pa.out_mask, "Output mask file")->required();
  prune->add_option("--tensors", pa.tensors,
                    "Regex of tensor names to prune (default: all)");
  prune->add_flag("--json", pa.json, "Print JSON instead of a table");

  IterateArgs ia;
  auto* iterate =
      app.add_subcommand("iterate", "Run the quantize/retrain pipeline");
  iterate->add_option("--config", ia.config, "Run config (JSON)");
  auto* i_out = iterate->add_option("--out", ia.out, "Output directory");
  auto* i_iter = iterate->add_option("--iterations", ia.iterations);
  auto* i_bits = iterate->add_option("--bits,-k", ia.bits);
  auto* i_tables = iterate->add_option("--tables,-T", ia.tables);
  auto* i_method = iterate->add_option("--method", ia.method);
  auto* i_prune = iterate->add_option("--prune-rate", ia.prune_rate);
  auto* i_seed = iterate->add_option("--seed", ia.seed);
  auto* i_threads = iterate->add_option("--threads", ia.threads);
  auto* i_corpus = iterate->add_option("--corpus", ia.corpus);
  auto* i_ckpt = iterate->add_option("--checkpoint", ia.checkpoint,
                                     "Trained IQWT model; skips initial training");
  auto* i_hist = iterate->add_option("--histograms", ia.histograms,
                                     "Histogram bins (0: none)");
  iterate->add_flag("--save-iterations", ia.save_iterations,
                    "Keep every iteration's quantized tensors");
  iterate->add_flag("--json", ia.json, "Print the records as JSON");

  ReportArgs ra;
  auto* report =
      app.add_subcommand("report", "Storage accounting and histograms");
  report->add_option("--artifact", ra.artifact, "Quantized tensor (IQQT)");
  report->add_option("--run-dir", ra.run_dir, "Directory written by iterate");
  report->add_option("--rows", ra.rows, "Dry run: rows");
  report->add_option("--cols", ra.cols, "Dry run: columns");
  report->add_option("--bits,-k", ra.bits, "Dry run: bits")
      ->capture_default_str();
  report->add_option("--tables,-T", ra.tables, "Dry run: tables per row")
      ->capture_default_str();
  auto* r_alpha = report->add_option("--alpha-bits", ra.alpha_bits,
                                     "Bits per alpha (0: ignore tables)")
                      ->capture_default_str();
  report->add_option("--prune-rate", ra.prune_rate, "Dry run: prune rate")
      ->capture_default_str();
  auto* r_mask = report->add_option(
      "--mask-bits", ra.mask_bits,
      "Index bits per weight (default 0.1 when pruned, else 0)");
  report->add_option("--histograms", ra.histograms,
                     "Write value histograms to this directory");
  report->add_option("--bins", ra.bins, "Histogram bins")->capture_default_str();
  report->add_flag("--json", ra.json, "Print JSON");

  std::string inject = "none";
  bool st_json = false;
  auto* selftest =
      app.add_subcommand("selftest", "Run the built-in oracle checks");
  selftest->add_option("--inject", inject, "Fault to inject")->group("");
  selftest->add_flag("--json", st_json, "Print JSON");

  TrainArgs ta;
  auto* train_cmd =
      app.add_subcommand("train", "Train a character LSTM from scratch");
  train_cmd->add_option("--config", ta.config, "Run config (JSON)");
  auto* t_corpus = train_cmd->add_option("--corpus", ta.corpus);
  train_cmd->add_option("--out", ta.out, "Output directory")->required();
  auto* t_epochs = train_cmd->add_option("--epochs", ta.epochs);
  auto* t_hidden = train_cmd->add_option("--hidden", ta.hidden);
  auto* t_seed = train_cmd->add_option("--seed", ta.seed);
  auto* t_lr = train_cmd->add_option("--lr", ta.lr);
  train_cmd->add_flag("--json", ta.json, "Print JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (*quantize) return cmd_quantize(qa);
    if (*prune) return cmd_prune(pa);
    if (*iterate) {
      return cmd_iterate(
          ia, {static_cast<bool>(*i_out), static_cast<bool>(*i_iter),
               static_cast<bool>(*i_bits), static_cast<bool>(*i_tables),
               static_cast<bool>(*i_method), static_cast<bool>(*i_prune),
               static_cast<bool>(*i_seed), static_cast<bool>(*i_threads),
               static_cast<bool>(*i_corpus), static_cast<bool>(*i_ckpt),
               static_cast<bool>(*i_hist)});
    }
    if (*report) {
      return cmd_report(ra, {static_cast<bool>(*r_alpha),
                             static_cast<bool>(*r_mask)});
    }
    if (*selftest) return cmd_selftest(inject, st_json);
    if (*train_cmd) {
      return cmd_train(ta, {static_cast<bool>(*t_corpus),
                            static_cast<bool>(*t_epochs),
                            static_cast<bool>(*t_hidden),
                            static_cast<bool>(*t_seed),
                            static_cast<bool>(*t_lr)});
    }
  } catch (const std::exception& e) {
    const int code = exit_code_for(std::current_exception());
    std::cerr << "error: " << e.what() << '\n';
    if (g_manifest) {
      try {
        g_manifest->finish(code, e.what());
      } catch (const std::exception& inner) {
        std::cerr << "error: could not finalize manifest: " << inner.what()
                  << '\n';
      }
    }
    return code;
  }
  return kExitFailure;
}
