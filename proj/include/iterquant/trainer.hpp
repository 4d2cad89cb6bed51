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

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "iterquant/corpus.hpp"
#include "iterquant/lstm.hpp"
#include "iterquant/pruner.hpp"

namespace iterquant {

struct SgdStepInfo {
  double grad_norm = 0.0;     // before clipping
  double applied_norm = 0.0;  // after clipping
};

/// Clips the global gradient norm to clip_norm, takes params -= lr * grads,
/// then zeroes every pruned coordinate named in `mask`. A non-finite or
/// non-positive clip_norm disables clipping.
inline SgdStepInfo sgd_step(LstmParams& params, const LstmParams& grads,
                            double lr, double clip_norm,
                            const PruneMask* mask = nullptr) {
  SgdStepInfo info;
  info.grad_norm = global_norm(grads);
  double scale = 1.0;
  if (std::isfinite(clip_norm) && clip_norm > 0.0 &&
      info.grad_norm > clip_norm) {
    scale = clip_norm / info.grad_norm;
  }
  info.applied_norm = info.grad_norm * scale;

  std::vector<const double*> g;
  grads.for_each_tensor([&](const std::string&, const double* d, Eigen::Index,
                            Eigen::Index) { g.push_back(d); });
  std::size_t ti = 0;
  params.for_each_tensor([&](const std::string& name, double* d,
                             Eigen::Index r, Eigen::Index c) {
    const double* gd = g[ti++];
    const auto n = r * c;
    for (Eigen::Index i = 0; i < n; ++i) d[i] -= lr * scale * gd[i];
    if (const BitVector* bits = mask ? mask->bits(name) : nullptr) {
      for (Eigen::Index i = 0; i < n; ++i) {
        if (!bits->test(static_cast<std::size_t>(i))) d[i] = 0.0;
      }
    }
  });
  return info;
}

/// Zeroes pruned coordinates without touching anything else.
inline void apply_mask(LstmParams& params, const PruneMask& mask) {
  params.for_each_tensor([&](const std::string& name, double* d,
                             Eigen::Index r, Eigen::Index c) {
    if (const BitVector* bits = mask.bits(name)) {
      for (Eigen::Index i = 0; i < r * c; ++i) {
        if (!bits->test(static_cast<std::size_t>(i))) d[i] = 0.0;
      }
    }
  });
}

/// exp(mean NLL) of next-token prediction over `tokens`, batch 1, state
/// carried from the first token to the last.
inline double evaluate_perplexity(const LstmParams& p,
                                  std::span<const int> tokens) {
  if (tokens.size() < 2) {
    throw ValidationError("evaluate_perplexity: need at least 2 tokens");
  }
  LstmState state = LstmState::zeros(p, 1);
  double nll = 0.0;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    Eigen::MatrixXd top = lstm_step(p, &tokens[t], 1, state, nullptr);
    Eigen::VectorXd logits = p.w_out * top.col(0) + p.b_out;
    const double mx = logits.maxCoeff();
    const double lse = mx + std::log((logits.array() - mx).exp().sum());
    nll += lse - logits[tokens[t + 1]];
  }
  const double mean = nll / static_cast<double>(tokens.size() - 1);
  if (!std::isfinite(mean)) {
    throw NumericalError("non-finite perplexity", 0);
  }
  return std::exp(mean);
}

/// Splits `tokens` into `batch` parallel streams and cuts them into windows
/// of `steps`; a trailing partial window is dropped.
inline std::vector<TokenWindow> make_windows(std::span<const int> tokens,
                                             int batch, int steps) {
  std::vector<TokenWindow> out;
  const std::size_t stream = tokens.size() / static_cast<std::size_t>(batch);
  if (stream < 2) return out;
  const std::size_t count = (stream - 1) / static_cast<std::size_t>(steps);
  for (std::size_t k = 0; k < count; ++k) {
    TokenWindow w;
    w.steps = steps;
    w.batch = batch;
    w.inputs.resize(static_cast<std::size_t>(steps * batch));
    w.targets.resize(w.inputs.size());
    for (int t = 0; t < steps; ++t) {
      for (int b = 0; b < batch; ++b) {
        const std::size_t pos = b * stream + k * steps + t;
        w.inputs[t * batch + b] = tokens[pos];
        w.targets[t * batch + b] = tokens[pos + 1];
      }
    }
    out.push_back(std::move(w));
  }
  return out;
}

enum class TrainMode { initial, retrain, prune_recovery };

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean NLL, nats
  double valid_ppl = 0.0;
};

/// lr for `epoch` (0-based): base * decay^max(0, epoch - decay_start), where
/// base is lr_init divided by the mode's divisor.
inline double learning_rate(const TrainConfig& cfg, TrainMode mode,
                            int epoch) {
  double base = cfg.lr_init;
  if (mode == TrainMode::retrain) base /= cfg.retrain_lr_divisor;
  if (mode == TrainMode::prune_recovery) base /= cfg.prune_retrain_lr_divisor;
  const int decays = std::max(0, epoch - cfg.decay_start_epoch);
  return base * std::pow(cfg.lr_decay, decays);
}

struct TrainOptions {
  TrainMode mode = TrainMode::initial;
  const PruneMask* mask = nullptr;
  int epoch_offset = 0;  // continues a schedule instead of rewinding it
  bool eval_each_epoch = true;
  std::function<void(const EpochMetrics&)> on_epoch;
};

/// SGD with truncated BPTT. Hidden state carries across windows inside an
/// epoch and resets between epochs. Deterministic for a fixed config.
inline std::vector<EpochMetrics> train(LstmParams& params,
                                       const Corpus& corpus,
                                       const TrainConfig& cfg,
                                       const TrainOptions& opts = {}) {
  cfg.validate();
  if (opts.mask) apply_mask(params, *opts.mask);
  const int epochs = opts.mode == TrainMode::initial
                         ? cfg.epochs
                         : cfg.effective_retrain_epochs();
  const auto windows = make_windows(corpus.train, cfg.batch, cfg.bptt_len);
  if (epochs > 0 && windows.empty()) {
    throw ValidationError("train: corpus too small for batch x bptt_len");
  }
  std::vector<EpochMetrics> history;
  long step = 0;
  for (int e = 0; e < epochs; ++e) {
    EpochMetrics m;
    m.epoch = e + opts.epoch_offset;
    m.lr = learning_rate(cfg, opts.mode, m.epoch);
    LstmState state = LstmState::zeros(params, cfg.batch);
    double total = 0.0;
    for (const auto& w : windows) {
      ForwardResult fr;
      try {
        fr = forward(params, w, state);
      } catch (const NumericalError& err) {
        throw NumericalError(std::string(err.what()) + " (training step " +
                                 std::to_string(step) + ")",
                             step);
      }
      const LstmParams grads = backward(params, w, fr.cache);
      sgd_step(params, grads, m.lr, cfg.clip_norm, opts.mask);
      state = std::move(fr.state);
      total += fr.loss;
      ++step;
    }
    m.train_loss = total / static_cast<double>(windows.size());
    m.valid_ppl = opts.eval_each_epoch
                      ? evaluate_perplexity(params, corpus.valid)
                      : std::numeric_limits<double>::quiet_NaN();
    history.push_back(m);
    if (opts.on_epoch) opts.on_epoch(m);
  }
  return history;
}

}  // namespace iterquant
