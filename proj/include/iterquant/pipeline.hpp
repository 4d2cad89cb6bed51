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
#include <cmath>
#include <concepts>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "iterquant/corpus.hpp"
#include "iterquant/model_io.hpp"
#include "iterquant/pruner.hpp"
#include "iterquant/quantized_tensor.hpp"
#include "iterquant/trainer.hpp"

namespace iterquant {

/// Anything the loop can quantize and retrain: exposes its weights as a
/// bundle, accepts replacement weights, retrains, and reports validation
/// perplexity.
template <class M>
concept RetrainableModel =
    requires(M& m, const M& cm, const ModelBundle& b, TrainMode mode,
             const PruneMask* mask, int epoch_offset) {
      { cm.bundle() } -> std::convertible_to<ModelBundle>;
      m.set_bundle(b);
      m.retrain(mode, mask, epoch_offset);
      { cm.evaluate() } -> std::convertible_to<double>;
    };

inline constexpr const char* kDefaultTensorFilter = R"(lstm\..*\.w_[xh])";

struct PipelineConfig {
  int bits = 1;
  std::size_t tables_per_row = 1;
  QuantMethod method = QuantMethod::alternating;
  AlternatingOptions alternating{};
  int iterations = 5;
  double prune_rate = 0.0;
  PruneScope prune_scope = PruneScope::per_tensor;
  std::string tensor_filter = kDefaultTensorFilter;
  TrainConfig trainer{};
  int early_stop_patience = 0;  // 0: off
  // Retraining continues the decay schedule across iterations instead of
  // restarting it at lr_init / divisor.
  bool continue_schedule = false;
  // Skip step (0); the model already holds trained weights.
  bool skip_initial_training = false;
  unsigned threads = 0;

  void validate() const {
    if (iterations < 1) throw ValidationError("iterations must be >= 1");
    if (bits < 1 || bits > kMaxBits) {
      throw ValidationError("bits must be in [1, " +
                            std::to_string(kMaxBits) + "]");
    }
    if (tables_per_row < 1) throw ValidationError("tables_per_row must be >= 1");
    if (!(prune_rate >= 0.0 && prune_rate < 1.0)) {
      throw ValidationError("prune_rate must be in [0, 1)");
    }
    if (early_stop_patience < 0) {
      throw ValidationError("early_stop patience must be >= 0");
    }
    trainer.validate();
  }

  QuantizeOptions quantize_options() const {
    QuantizeOptions o;
    o.bits = bits;
    o.tables_per_row = tables_per_row;
    o.method = method;
    o.alternating = alternating;
    o.threads = threads;
    return o;
  }
};

struct IterationRecord {
  int n = 0;
  std::vector<std::pair<std::string, double>> tensor_sse;
  double total_sse = 0.0;
  double fp_ppl = 0.0;     // w_n before quantization
  double quant_ppl = 0.0;  // dequantized w_n-hat
  double drift = std::numeric_limits<double>::quiet_NaN();  // NaN at n = 0
  double seconds = 0.0;
};

/// True once the quantized perplexity has gone `patience` consecutive
/// iterations without beating the best value seen before them.
inline bool early_stop_check(std::span<const double> quant_ppl, int patience) {
  if (patience < 1) throw ValidationError("patience must be >= 1");
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  for (double v : quant_ppl) {
    if (v < best) {
      best = v;
      stale = 0;
    } else if (++stale >= patience) {
      return true;
    }
  }
  return false;
}

inline bool early_stop_check(std::span<const IterationRecord> records,
                             int patience) {
  std::vector<double> ppl;
  for (const auto& r : records) ppl.push_back(r.quant_ppl);
  return early_stop_check(std::span<const double>(ppl), patience);
}

/// Squared distance between two dequantized tensors.
inline double drift(const QuantizedTensor& prev, const QuantizedTensor& curr) {
  if (prev.rows != curr.rows || prev.cols != curr.cols || prev.k != curr.k ||
      prev.tables_per_row != curr.tables_per_row) {
    throw DimensionError("drift: tensors differ in shape, bits or tables");
  }
  return sse(dequantize(prev), dequantize(curr));
}

struct Histogram {
  std::vector<double> left_edges;
  std::vector<std::size_t> counts;
};

/// Equal-width bins over [-half_range, +half_range].
inline Histogram make_histogram(std::span<const double> values,
                                std::size_t bins, double half_range) {
  if (bins < 2) throw ValidationError("histogram: bins must be >= 2");
  if (!(half_range > 0.0) || !std::isfinite(half_range)) {
    throw ValidationError("histogram: range must be positive and finite");
  }
  const double m = half_range;
  const double width = 2.0 * m / static_cast<double>(bins);
  Histogram h;
  h.counts.assign(bins, 0);
  for (std::size_t b = 0; b < bins; ++b) {
    h.left_edges.push_back(-m + width * static_cast<double>(b));
  }
  for (double x : values) {
    const double pos = std::floor((x + m) / width);
    const auto b = pos <= 0.0 ? std::size_t{0} : static_cast<std::size_t>(pos);
    ++h.counts[std::min(b, bins - 1)];
  }
  return h;
}

inline double max_abs(std::span<const double> values) {
  double m = 0.0;
  for (double x : values) m = std::max(m, std::abs(x));
  return m;
}

/// Equal-width bins over [-max|x|, +max|x|]; [-1, 1] when every value is 0.
inline Histogram make_histogram(std::span<const double> values,
                                std::size_t bins) {
  const double m = max_abs(values);
  return make_histogram(values, bins, m == 0.0 ? 1.0 : m);
}

inline void write_histogram_csv(const Histogram& h,
                                const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write histogram '" + path.string() + "'");
  out << "bin_left_edge,count\n";
  out.precision(17);
  for (std::size_t b = 0; b < h.counts.size(); ++b) {
    out << h.left_edges[b] << ',' << h.counts[b] << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline Histogram histogram_export(const DenseMatrix& m, std::size_t bins,
                                  const std::filesystem::path& path) {
  auto h = make_histogram(m.values(), bins);
  write_histogram_csv(h, path);
  return h;
}

inline Histogram histogram_export(const QuantizedTensor& q, std::size_t bins,
                                  const std::filesystem::path& path) {
  return histogram_export(dequantize(q), bins, path);
}

/// One histogram per row over the tensor-wide range, as
/// "row,bin_left_edge,count" lines for populated bins only.
inline void write_row_histograms_csv(const DenseMatrix& m, std::size_t bins,
                                     const std::filesystem::path& path) {
  const double a = max_abs(m.values());
  const double range = a == 0.0 ? 1.0 : a;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write histogram '" + path.string() + "'");
  out << "row,bin_left_edge,count\n";
  out.precision(17);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const Histogram h = make_histogram(m.row(r), bins, range);
    for (std::size_t b = 0; b < bins; ++b) {
      if (h.counts[b] == 0) continue;
      out << r << ',' << h.left_edges[b] << ',' << h.counts[b] << '\n';
    }
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

using QuantizedSet = std::map<std::string, QuantizedTensor, std::less<>>;

/// Hooks the run-directory writer and the CLI attach to.
struct PipelineObserver {
  std::function<void(const std::string& stage, double fp_ppl)> on_stage;
  // Full-precision weights about to be quantized at iteration n.
  std::function<void(int n, const ModelBundle&)> on_before_quantize;
  std::function<void(const IterationRecord&, const QuantizedSet&)>
      on_iteration;
};

struct PipelineResult {
  std::vector<IterationRecord> records;
  QuantizedSet final_quantized;  // from the best iteration
  ModelBundle final_model;       // full precision, after the last retrain
  ModelBundle quantized_model;   // dequantized weights of the best iteration
  std::optional<PruneMask> mask;
  int best_iteration = 0;
  bool stopped_early = false;
  double reference_fp_ppl = 0.0;  // after initial training, before pruning
};

/// Quantizes every filtered tensor of `bundle`; writes the dequantized
/// values back into `bundle` and returns the per-tensor results.
inline QuantizedSet quantize_bundle(ModelBundle& bundle,
                                    const QuantizeOptions& opts,
                                    const TensorFilter& filter,
                                    const PruneMask* mask,
                                    std::vector<std::pair<std::string, double>>*
                                        tensor_sse = nullptr) {
  QuantizedSet out;
  for (auto& t : bundle.tensors) {
    if (!filter(t.name)) continue;
    const BitVector* bits = mask ? mask->bits(t.name) : nullptr;
    QuantDiagnostics diag;
    auto q = quantize_tensor(t.matrix, opts, bits, &diag);
    if (tensor_sse) tensor_sse->emplace_back(t.name, diag.total_sse());
    t.matrix = dequantize(q);
    out.emplace(t.name, std::move(q));
  }
  return out;
}

/// Train (unless skipped), optionally prune and recover, then alternate
/// quantize -> record -> dequantize -> retrain for cfg.iterations rounds.
template <RetrainableModel Model>
PipelineResult run_pipeline(Model& model, const PipelineConfig& cfg,
                            const PipelineObserver& obs = {}) {
  cfg.validate();
  const TensorFilter filter = regex_filter(cfg.tensor_filter);
  const QuantizeOptions qopts = cfg.quantize_options();
  auto stage = [&](const std::string& name, double ppl) {
    if (obs.on_stage) obs.on_stage(name, ppl);
  };

  PipelineResult res;
  if (!cfg.skip_initial_training) {
    model.retrain(TrainMode::initial, nullptr, 0);
  }
  res.reference_fp_ppl = model.evaluate();
  stage("initial", res.reference_fp_ppl);

  if (cfg.prune_rate > 0.0) {
    const ModelBundle b = model.bundle();
    res.mask = magnitude_prune(b, cfg.prune_rate, cfg.prune_scope, filter);
    model.set_bundle(apply_mask(b, *res.mask));
    stage("pruned", model.evaluate());
    model.retrain(TrainMode::prune_recovery, &*res.mask, 0);
    stage("recovered", model.evaluate());
  }
  const PruneMask* mask = res.mask ? &*res.mask : nullptr;

  QuantizedSet prev;
  double best_ppl = std::numeric_limits<double>::infinity();
  const int retrain_epochs = cfg.trainer.effective_retrain_epochs();
  for (int n = 0; n < cfg.iterations; ++n) {
    const auto t0 = std::chrono::steady_clock::now();
    IterationRecord rec;
    rec.n = n;
    rec.fp_ppl = model.evaluate();

    ModelBundle q_bundle = model.bundle();
    if (obs.on_before_quantize) obs.on_before_quantize(n, q_bundle);
    QuantizedSet current =
        quantize_bundle(q_bundle, qopts, filter, mask, &rec.tensor_sse);
    for (const auto& [name, e] : rec.tensor_sse) rec.total_sse += e;
    if (n > 0) {
      rec.drift = 0.0;
      for (const auto& [name, q] : current) {
        rec.drift += drift(prev.at(name), q);
      }
    }
    model.set_bundle(q_bundle);
    rec.quant_ppl = model.evaluate();

    if (rec.quant_ppl < best_ppl || n == 0) {
      best_ppl = rec.quant_ppl;
      res.best_iteration = n;
      res.final_quantized = current;
      res.quantized_model = q_bundle;
    }
    const int offset = cfg.continue_schedule ? n * retrain_epochs : 0;
    model.retrain(TrainMode::retrain, mask, offset);

    rec.seconds = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    res.records.push_back(rec);
    if (obs.on_iteration) obs.on_iteration(rec, current);
    prev = std::move(current);

    if (cfg.early_stop_patience > 0 &&
        early_stop_check(std::span<const IterationRecord>(res.records),
                         cfg.early_stop_patience)) {
      res.stopped_early = n + 1 < cfg.iterations;
      break;
    }
  }
  res.final_model = model.bundle();
  return res;
}

/// Char-LSTM adapter over the trainer module.
class LstmModel {
 public:
  LstmModel(LstmParams params, const Corpus& corpus, TrainConfig cfg)
      : params_(std::move(params)), corpus_(&corpus), cfg_(cfg) {}

  ModelBundle bundle() const { return to_bundle(params_); }
  void set_bundle(const ModelBundle& b) { params_ = from_bundle(b, params_); }

  void retrain(TrainMode mode, const PruneMask* mask, int epoch_offset) {
    TrainOptions opts;
    opts.mode = mode;
    opts.mask = mask;
    opts.epoch_offset = epoch_offset;
    opts.eval_each_epoch = eval_each_epoch;
    opts.on_epoch = on_epoch;
    train(params_, *corpus_, cfg_, opts);
  }

  double evaluate() const {
    return evaluate_perplexity(params_, corpus_->valid);
  }

  const LstmParams& params() const { return params_; }

  bool eval_each_epoch = false;
  std::function<void(const EpochMetrics&)> on_epoch;

 private:
  LstmParams params_;
  const Corpus* corpus_;
  TrainConfig cfg_;
};

static_assert(RetrainableModel<LstmModel>);

/// First record index whose quantized perplexity is within `within` (relative)
/// of `reference`; nullopt if none is.
inline std::optional<int> first_within(std::span<const IterationRecord> records,
                                       double reference, double within) {
  for (const auto& r : records) {
    if (r.quant_ppl <= reference * (1.0 + within)) return r.n;
  }
  return std::nullopt;
}

}  // namespace iterquant
