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

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "iterquant/pipeline.hpp"
#include "iterquant/run_io.hpp"

using namespace iterquant;
namespace fs = std::filesystem;

namespace {

/// A "model" with fixed weights and a trainer that does nothing.
struct ConstantModel {
  ModelBundle weights;
  int retrain_calls = 0;

  ModelBundle bundle() const { return weights; }
  void set_bundle(const ModelBundle& b) { weights = b; }
  void retrain(TrainMode, const PruneMask*, int) { ++retrain_calls; }
  double evaluate() const { return 1.0; }
};

/// Weights drift toward a fixed target on every retrain; evaluate returns
/// a scripted perplexity sequence.
struct ScriptedModel {
  ModelBundle weights;
  std::vector<double> ppl;
  mutable std::size_t evals = 0;
  std::vector<std::pair<TrainMode, const PruneMask*>> calls;

  ModelBundle bundle() const { return weights; }
  void set_bundle(const ModelBundle& b) { weights = b; }
  void retrain(TrainMode mode, const PruneMask* mask, int) {
    calls.emplace_back(mode, mask);
    for (auto& t : weights.tensors) {
      auto v = t.matrix.values();
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = 0.5 * v[i] + 0.5 * std::sin(static_cast<double>(i));
        if (mask) {
          if (const auto* bits = mask->bits(t.name); bits && !bits->test(i)) {
            v[i] = 0.0;
          }
        }
      }
    }
  }
  double evaluate() const { return ppl[std::min(evals++, ppl.size() - 1)]; }
};

DenseMatrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(r * c);
  for (auto& x : v) x = dist(rng);
  return DenseMatrix(r, c, std::move(v));
}

PipelineConfig stub_config() {
  PipelineConfig cfg;
  cfg.tensor_filter = "";
  cfg.iterations = 3;
  return cfg;
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("iterquant_test_" + name);
  fs::remove_all(d);
  return d;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

Corpus small_corpus() {
  const std::string base =
      "shall i compare thee to a summer's day? thou art more lovely. ";
  std::vector<std::uint8_t> raw;
  while (raw.size() < 6000) raw.insert(raw.end(), base.begin(), base.end());
  return make_corpus(raw);
}

}  // namespace

TEST(Pipeline, ConstantModelHasZeroSseAndDrift) {
  ConstantModel m;
  m.weights.tensors.push_back(
      {"w", DenseMatrix(3, 8, std::vector<double>(24, 0.625))});
  const auto res = run_pipeline(m, stub_config());
  ASSERT_EQ(res.records.size(), 3u);
  for (const auto& r : res.records) {
    EXPECT_EQ(r.total_sse, 0.0);
    if (r.n > 0) {
      EXPECT_EQ(r.drift, 0.0);
    }
  }
  EXPECT_TRUE(std::isnan(res.records[0].drift));
  // initial train + one retrain per iteration
  EXPECT_EQ(m.retrain_calls, 4);
}

TEST(Pipeline, FirstRecordMatchesStandaloneQuantization) {
  std::mt19937_64 rng(1);
  ConstantModel m;
  m.weights.tensors.push_back({"a", random_matrix(6, 20, rng)});
  m.weights.tensors.push_back({"b", random_matrix(4, 9, rng)});
  auto cfg = stub_config();
  cfg.bits = 2;
  cfg.tables_per_row = 2;
  cfg.iterations = 1;
  const ModelBundle original = m.weights;
  QuantizedSet seen;
  PipelineObserver obs;
  obs.on_iteration = [&](const IterationRecord&, const QuantizedSet& q) {
    seen = q;
  };
  const auto res = run_pipeline(m, cfg, obs);
  ASSERT_EQ(res.records.size(), 1u);
  double total = 0.0;
  for (const auto& t : original.tensors) {
    QuantDiagnostics d;
    const auto q = quantize_tensor(t.matrix, cfg.quantize_options(), nullptr, &d);
    EXPECT_EQ(seen.at(t.name), q);
    total += d.total_sse();
  }
  EXPECT_EQ(res.records[0].total_sse, total);
}

TEST(Pipeline, PruneRecoveryThenMaskedRetrains) {
  std::mt19937_64 rng(2);
  ScriptedModel m;
  m.weights.tensors.push_back({"w", random_matrix(5, 12, rng)});
  m.ppl = {10, 10, 10, 9, 9, 8, 8, 7, 7};
  auto cfg = stub_config();
  cfg.prune_rate = 0.8;
  PipelineObserver obs;
  obs.on_before_quantize = [&](int, const ModelBundle& b) {
    const auto& bits = *m.calls.back().second->bits("w");
    for (std::size_t i = 0; i < bits.size(); ++i) {
      if (!bits.test(i)) {
        EXPECT_EQ(b.find("w")->values()[i], 0.0);
      }
    }
  };
  const auto res = run_pipeline(m, cfg, obs);
  ASSERT_TRUE(res.mask.has_value());
  ASSERT_EQ(m.calls.size(), 5u);
  EXPECT_EQ(m.calls[0].first, TrainMode::initial);
  EXPECT_EQ(m.calls[0].second, nullptr);
  EXPECT_EQ(m.calls[1].first, TrainMode::prune_recovery);
  for (std::size_t i = 2; i < 5; ++i) {
    EXPECT_EQ(m.calls[i].first, TrainMode::retrain);
    EXPECT_EQ(m.calls[i].second, &*res.mask);
  }
  const auto& bits = res.mask->find("w")->bits;
  for (const auto* b : {&res.final_model, &res.quantized_model}) {
    for (std::size_t i = 0; i < bits.size(); ++i) {
      if (!bits.test(i)) {
        EXPECT_EQ(b->find("w")->values()[i], 0.0);
      }
    }
  }
}

TEST(Pipeline, DriftMatchesDequantizedSse) {
  std::mt19937_64 rng(3);
  ScriptedModel m;
  m.weights.tensors.push_back({"w", random_matrix(4, 10, rng)});
  m.ppl = {5};
  std::vector<QuantizedSet> sets;
  PipelineObserver obs;
  obs.on_iteration = [&](const IterationRecord&, const QuantizedSet& q) {
    sets.push_back(q);
  };
  auto cfg = stub_config();
  cfg.iterations = 4;
  const auto res = run_pipeline(m, cfg, obs);
  for (std::size_t n = 1; n < res.records.size(); ++n) {
    const double expect =
        sse(dequantize(sets[n - 1].at("w")), dequantize(sets[n].at("w")));
    EXPECT_NEAR(res.records[n].drift, expect, 1e-12);
  }
}

TEST(Pipeline, EarlyStopKeepsBestIteration) {
  std::mt19937_64 rng(4);
  ScriptedModel m;
  m.weights.tensors.push_back({"w", random_matrix(3, 6, rng)});
  // evaluate order: initial, then (fp, quant) per iteration.
  m.ppl = {50, 60, 100, 60, 100, 60, 101, 60, 102, 60, 90};
  auto cfg = stub_config();
  cfg.iterations = 10;
  cfg.early_stop_patience = 2;
  const auto res = run_pipeline(m, cfg);
  EXPECT_EQ(res.records.size(), 3u);
  EXPECT_TRUE(res.stopped_early);
  EXPECT_EQ(res.best_iteration, 0);
}

TEST(Pipeline, RejectsZeroIterations) {
  ConstantModel m;
  auto cfg = stub_config();
  cfg.iterations = 0;
  EXPECT_THROW(run_pipeline(m, cfg), ValidationError);
}

TEST(EarlyStop, RuleTraces) {
  const std::vector<double> improving = {10, 9, 8, 7, 6};
  EXPECT_FALSE(early_stop_check(std::span<const double>(improving), 1));
  const std::vector<double> flat = {100, 100, 101, 102};
  const std::span<const double> f(flat);
  EXPECT_FALSE(early_stop_check(f.first(2), 2));
  EXPECT_TRUE(early_stop_check(f.first(3), 2));
  const std::vector<double> short_run = {5, 6, 7};
  EXPECT_FALSE(early_stop_check(std::span<const double>(short_run), 10));
  EXPECT_THROW(early_stop_check(f, 0), ValidationError);
}

TEST(Drift, IdentitySymmetryAndShapeCheck) {
  std::mt19937_64 rng(5);
  QuantizeOptions o;
  o.bits = 2;
  const auto a = quantize_tensor(random_matrix(3, 7, rng), o);
  const auto b = quantize_tensor(random_matrix(3, 7, rng), o);
  EXPECT_EQ(drift(a, a), 0.0);
  EXPECT_EQ(drift(a, b), drift(b, a));
  EXPECT_NEAR(drift(a, b), sse(dequantize(a), dequantize(b)), 1e-12);
  const auto c = quantize_tensor(random_matrix(7, 3, rng), o);
  EXPECT_THROW(drift(a, c), DimensionError);
}

TEST(Histogram, ConstantMatrixSingleBin) {
  const DenseMatrix m(4, 4, std::vector<double>(16, 0.3));
  const auto h = make_histogram(m.values(), 10);
  std::size_t nonzero = 0;
  for (auto c : h.counts) nonzero += c > 0;
  EXPECT_EQ(nonzero, 1u);
  EXPECT_DOUBLE_EQ(h.left_edges.front(), -0.3);
}

TEST(Histogram, ZeroMatrixUsesUnitRange) {
  const auto h = make_histogram(DenseMatrix(2, 2).values(), 4);
  EXPECT_EQ(h.left_edges, (std::vector<double>{-1, -0.5, 0, 0.5}));
  EXPECT_EQ(h.counts, (std::vector<std::size_t>{0, 0, 4, 0}));
}

TEST(Histogram, CountsConserveAndOneBitRowHasTwoValues) {
  std::mt19937_64 rng(6);
  const auto m = random_matrix(1, 300, rng);
  const auto q = quantize_tensor(m, {});
  const auto path = fresh_dir("hist.csv");
  const auto h = histogram_export(q, 64, path);
  std::size_t total = 0;
  std::size_t nonzero = 0;
  for (auto c : h.counts) {
    total += c;
    nonzero += c > 0;
  }
  EXPECT_EQ(total, 300u);
  EXPECT_LE(nonzero, 2u);
  std::set<double> distinct;
  for (double x : dequantize(q).values()) distinct.insert(x);
  EXPECT_LE(distinct.size(), 2u);
  const auto lines = read_lines(path);
  EXPECT_EQ(lines.front(), "bin_left_edge,count");
  EXPECT_EQ(lines.size(), 65u);
  EXPECT_THROW(make_histogram(m.values(), 1), ValidationError);
  fs::remove(path);
}

TEST(RunConfig, DefaultsMaterializeAndRoundTrip) {
  const RunConfig c;
  const Json j = to_json(c);
  EXPECT_EQ(j["quant"]["method"], "alternating");
  EXPECT_EQ(j["trainer"]["retrain_lr_divisor"], 100.0);
  const RunConfig back = run_config_from_json(j);
  EXPECT_EQ(to_json(back), j);
}

TEST(RunConfig, OverridesAndErrors) {
  const Json j = Json::parse(R"({"iterations": 3,
      "quant": {"bits": 2, "method": "refined"},
      "prune": {"rate": 0.8, "scope": "global"},
      "trainer": {"hidden": 16}})");
  const RunConfig c = run_config_from_json(j);
  EXPECT_EQ(c.pipeline.iterations, 3);
  EXPECT_EQ(c.pipeline.bits, 2);
  EXPECT_EQ(c.pipeline.method, QuantMethod::refined);
  EXPECT_EQ(c.pipeline.prune_scope, PruneScope::global);
  EXPECT_EQ(c.pipeline.trainer.hidden, 16);
  EXPECT_EQ(c.pipeline.trainer.batch, TrainConfig{}.batch);

  EXPECT_THROW(run_config_from_json(Json::parse(R"({"iteratons": 3})")),
               ValidationError);
  EXPECT_THROW(run_config_from_json(Json::parse(R"({"iterations": 0})")),
               ValidationError);
  EXPECT_THROW(run_config_from_json(Json::parse(R"({"iterations": "x"})")),
               ValidationError);
  EXPECT_THROW(
      run_config_from_json(Json::parse(R"({"quant": {"method": "best"}})")),
      ValidationError);
  EXPECT_THROW(run_config_from_json(Json::parse(R"({"prune": {"rate": 1}})")),
               ValidationError);
}

TEST(ExecuteRun, WritesRunDirectory) {
  const Corpus corpus = small_corpus();
  RunConfig c;
  c.output_dir = fresh_dir("run").string();
  c.histogram_bins = 16;
  c.save_iteration_artifacts = true;
  auto& p = c.pipeline;
  p.iterations = 2;
  p.prune_rate = 0.5;
  p.trainer.hidden = 8;
  p.trainer.batch = 4;
  p.trainer.bptt_len = 8;
  p.trainer.epochs = 1;
  std::vector<std::string> log;
  const auto res =
      execute_run(c, corpus, [&](const std::string& s) { log.push_back(s); });
  const fs::path dir = c.output_dir;
  for (const char* f : {"config.json", "records.csv", "model_final.iqwt",
                        "model_quantized.iqwt", "mask.iqwt"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_TRUE(fs::exists(dir / "quantized" / "lstm.l0.w_x.iqqt"));
  EXPECT_TRUE(fs::exists(dir / "iterations" / "iter_001" / "lstm.l0.w_h.iqqt"));
  EXPECT_TRUE(fs::exists(dir / "histograms" / "lstm.l0.w_h.initial.csv"));
  EXPECT_TRUE(fs::exists(dir / "histograms" / "lstm.l0.w_h.quantized.csv"));
  const auto rows = read_lines(dir / "records.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].rfind("n,total_sse,fp_ppl,quant_ppl,drift,seconds", 0), 0u);
  EXPECT_EQ(res.records.size(), 2u);
  EXPECT_EQ(log.size(), 3u + 2u);

  const auto loaded =
      load_quantized(dir / "quantized" / "lstm.l0.w_x.iqqt").tensor;
  EXPECT_EQ(loaded, round_alphas(res.final_quantized.at("lstm.l0.w_x"),
                                 AlphaDtype::f32));
  const auto qm = load_model(dir / "model_quantized.iqwt");
  EXPECT_EQ(qm.tensors.size(), res.quantized_model.tensors.size());
  fs::remove_all(dir);
}

TEST(ExecuteRun, SingleIterationHasOneRecordRow) {
  const Corpus corpus = small_corpus();
  RunConfig c;
  c.output_dir = fresh_dir("run1").string();
  auto& p = c.pipeline;
  p.iterations = 1;
  p.trainer.hidden = 4;
  p.trainer.batch = 4;
  p.trainer.bptt_len = 4;
  p.trainer.epochs = 1;
  execute_run(c, corpus);
  EXPECT_EQ(read_lines(fs::path(c.output_dir) / "records.csv").size(), 2u);

  // Same run again from the trained checkpoint skips initial training.
  RunConfig again = c;
  again.checkpoint = (fs::path(c.output_dir) / "model_final.iqwt").string();
  again.output_dir = fresh_dir("run1b").string();
  const auto res = execute_run(again, corpus);
  EXPECT_EQ(res.records.size(), 1u);
  fs::remove_all(c.output_dir);
  fs::remove_all(again.output_dir);
}

TEST(RunManifest, WrittenAtStartAndFinalized) {
  const auto dir = fresh_dir("manifest");
  {
    RunManifest m(dir, "iterate", Json{{"k", 1}});
    const Json start = read_json_file(m.path());
    EXPECT_EQ(start["status"], "running");
    EXPECT_TRUE(start["finished"].is_null());
    m.set_corpus_checksum(0xabcULL);
    m.finish(4, "boom");
  }
  const Json end = read_json_file(dir / "manifest.json");
  EXPECT_EQ(end["status"], "failed");
  EXPECT_EQ(end["exit_code"], 4);
  EXPECT_EQ(end["error"], "boom");
  EXPECT_EQ(end["corpus_checksum"], "0000000000000abc");
  EXPECT_EQ(end["version"], kVersion);
  fs::remove_all(dir);
}
