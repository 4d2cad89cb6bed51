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

// Character-level LSTM language model: parameters, forward pass with softmax
// cross-entropy, truncated backpropagation through time, and finite
// difference gradient checking. Columns of every activation matrix are batch
// elements. Gate rows are ordered [input, forget, cell candidate, output].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "iterquant/error.hpp"
#include "iterquant/model_io.hpp"

namespace iterquant {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct TrainConfig {
  int hidden = 64;
  int layers = 1;
  int embed_dim = 0;  // 0: one-hot input
  int bptt_len = 32;
  int batch = 32;
  int epochs = 8;
  int retrain_epochs = 0;  // 0: same as epochs
  double lr_init = 1.0;
  double lr_decay = 0.5;
  int decay_start_epoch = 4;
  double clip_norm = 5.0;
  double init_scale = 0.1;
  std::uint64_t seed = 1;
  double retrain_lr_divisor = 100.0;
  // Learning-rate divisor for the masked recovery pass after pruning.
  double prune_retrain_lr_divisor = 10.0;

  int effective_retrain_epochs() const {
    return retrain_epochs > 0 ? retrain_epochs : epochs;
  }

  void validate() const {
    if (hidden < 1 || layers < 1 || bptt_len < 1 || batch < 1 || epochs < 0 ||
        retrain_epochs < 0 || embed_dim < 0 || decay_start_epoch < 0) {
      throw ValidationError("train config: sizes and counts must be positive");
    }
    if (!(lr_init > 0.0) || !(lr_decay > 0.0) || !(clip_norm > 0.0) ||
        !(init_scale > 0.0)) {
      throw ValidationError("train config: lr, decay, clip and init scale "
                            "must be positive");
    }
    if (!(retrain_lr_divisor >= 1.0) || !(prune_retrain_lr_divisor >= 1.0)) {
      throw ValidationError("train config: lr divisors must be >= 1");
    }
  }
};

struct LstmLayer {
  RowMatrix w_x;         // 4h x input_dim
  RowMatrix w_h;         // 4h x h
  Eigen::VectorXd bias;  // 4h
};

/// Model parameters. The same type doubles as the gradient container.
struct LstmParams {
  int vocab = 0;
  int hidden = 0;
  RowMatrix embedding;  // V x e, empty for one-hot input
  std::vector<LstmLayer> layers;
  RowMatrix w_out;        // V x h
  Eigen::VectorXd b_out;  // V

  bool one_hot() const noexcept { return embedding.size() == 0; }

  LstmParams zeros_like() const {
    LstmParams z = *this;
    z.embedding.setZero();
    for (auto& l : z.layers) {
      l.w_x.setZero();
      l.w_h.setZero();
      l.bias.setZero();
    }
    z.w_out.setZero();
    z.b_out.setZero();
    return z;
  }

  /// Visits every tensor as (name, data, rows, cols) in a fixed order.
  template <class Fn>
  void for_each_tensor(Fn&& fn) {
    if (!one_hot()) {
      fn("embed", embedding.data(), embedding.rows(), embedding.cols());
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "lstm.l" + std::to_string(i) + ".";
      auto& l = layers[i];
      fn(p + "w_x", l.w_x.data(), l.w_x.rows(), l.w_x.cols());
      fn(p + "w_h", l.w_h.data(), l.w_h.rows(), l.w_h.cols());
      fn(p + "bias", l.bias.data(), Eigen::Index{1}, l.bias.size());
    }
    fn("out.w", w_out.data(), w_out.rows(), w_out.cols());
    fn("out.bias", b_out.data(), Eigen::Index{1}, b_out.size());
  }

  template <class Fn>
  void for_each_tensor(Fn&& fn) const {
    const_cast<LstmParams*>(this)->for_each_tensor(
        [&](const std::string& name, double* data, Eigen::Index r,
            Eigen::Index c) { fn(name, static_cast<const double*>(data), r, c); });
  }

  bool all_finite() const {
    bool ok = true;
    for_each_tensor([&](const std::string&, const double* d, Eigen::Index r,
                        Eigen::Index c) {
      for (Eigen::Index i = 0; i < r * c; ++i) ok = ok && std::isfinite(d[i]);
    });
    return ok;
  }
};

/// Uniform weights in [-init_scale, init_scale]; forget-gate bias 1, other
/// biases 0.
inline LstmParams init_params(const TrainConfig& cfg, int vocab) {
  cfg.validate();
  if (vocab < 1) throw ValidationError("init_params: empty vocabulary");
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> dist(-cfg.init_scale, cfg.init_scale);
  auto fill = [&](auto& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  };
  const int h = cfg.hidden;
  LstmParams p;
  p.vocab = vocab;
  p.hidden = h;
  if (cfg.embed_dim > 0) {
    p.embedding.resize(vocab, cfg.embed_dim);
    fill(p.embedding);
  }
  for (int l = 0; l < cfg.layers; ++l) {
    LstmLayer layer;
    const int in = l == 0 ? (cfg.embed_dim > 0 ? cfg.embed_dim : vocab) : h;
    layer.w_x.resize(4 * h, in);
    layer.w_h.resize(4 * h, h);
    fill(layer.w_x);
    fill(layer.w_h);
    layer.bias = Eigen::VectorXd::Zero(4 * h);
    layer.bias.segment(h, h).setOnes();
    p.layers.push_back(std::move(layer));
  }
  p.w_out.resize(vocab, h);
  fill(p.w_out);
  p.b_out = Eigen::VectorXd::Zero(vocab);
  return p;
}

inline ModelBundle to_bundle(const LstmParams& p) {
  ModelBundle b;
  p.for_each_tensor([&](const std::string& name, const double* d,
                        Eigen::Index r, Eigen::Index c) {
    b.tensors.push_back(
        {name, DenseMatrix(static_cast<std::size_t>(r),
                           static_cast<std::size_t>(c),
                           std::vector<double>(d, d + r * c))});
  });
  b.set_meta("kind", "char-lstm");
  b.set_meta("vocab", std::to_string(p.vocab));
  b.set_meta("hidden", std::to_string(p.hidden));
  b.set_meta("layers", std::to_string(p.layers.size()));
  b.set_meta("embed_dim", std::to_string(p.embedding.cols()));
  return b;
}

/// Copies the bundle's tensors into `shape`, which fixes the architecture.
inline LstmParams from_bundle(const ModelBundle& b, LstmParams shape) {
  shape.for_each_tensor([&](const std::string& name, double* d,
                            Eigen::Index r, Eigen::Index c) {
    const DenseMatrix* m = b.find(name);
    if (!m) throw FormatError("model bundle lacks tensor '" + name + "'");
    if (m->rows() != static_cast<std::size_t>(r) ||
        m->cols() != static_cast<std::size_t>(c)) {
      throw DimensionError("tensor '" + name + "' has the wrong shape");
    }
    std::copy(m->values().begin(), m->values().end(), d);
  });
  return shape;
}

/// Architecture recorded in a bundle's metadata, with zeroed weights.
inline LstmParams params_shape_from_metadata(const ModelBundle& b) {
  auto get = [&](const char* key) {
    auto v = b.meta(key);
    if (!v) throw FormatError(std::string("model metadata lacks '") + key + "'");
    return std::stoi(*v);
  };
  if (b.meta("kind") != "char-lstm") {
    throw FormatError("model bundle is not a char-lstm");
  }
  TrainConfig cfg;
  cfg.hidden = get("hidden");
  cfg.layers = get("layers");
  cfg.embed_dim = get("embed_dim");
  return init_params(cfg, get("vocab")).zeros_like();
}

/// Recurrent state per layer, h x batch.
struct LstmState {
  std::vector<Eigen::MatrixXd> h;
  std::vector<Eigen::MatrixXd> c;

  static LstmState zeros(const LstmParams& p, int batch) {
    LstmState s;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      s.h.push_back(Eigen::MatrixXd::Zero(p.hidden, batch));
      s.c.push_back(Eigen::MatrixXd::Zero(p.hidden, batch));
    }
    return s;
  }
};

/// steps x batch token ids; targets are the inputs shifted by one.
struct TokenWindow {
  int steps = 0;
  int batch = 0;
  std::vector<int> inputs;
  std::vector<int> targets;

  int input(int t, int b) const { return inputs[t * batch + b]; }
  int target(int t, int b) const { return targets[t * batch + b]; }
};

struct LayerCache {
  Eigen::MatrixXd x;  // layer input (empty for one-hot layer 0)
  Eigen::MatrixXd h_prev, c_prev;
  Eigen::MatrixXd gates;  // activated [i; f; g; o]
  Eigen::MatrixXd c, tanh_c;
};

struct ForwardCache {
  std::vector<std::vector<LayerCache>> steps;  // [t][layer]
  std::vector<Eigen::MatrixXd> probs;          // [t], V x batch
  std::vector<Eigen::MatrixXd> h_top;          // [t], h x batch
};

struct ForwardResult {
  double loss = 0.0;  // mean NLL in nats over steps x batch
  LstmState state;
  ForwardCache cache;
};

namespace detail {

inline Eigen::ArrayXXd sigmoid(const Eigen::ArrayXXd& z) {
  return 1.0 / (1.0 + (-z).exp());
}

inline void check_window(const LstmParams& p, const TokenWindow& w) {
  if (w.steps < 1 || w.batch < 1 ||
      w.inputs.size() != static_cast<std::size_t>(w.steps * w.batch) ||
      w.targets.size() != w.inputs.size()) {
    throw DimensionError("token window shape mismatch");
  }
  for (std::size_t i = 0; i < w.inputs.size(); ++i) {
    if (w.inputs[i] < 0 || w.inputs[i] >= p.vocab || w.targets[i] < 0 ||
        w.targets[i] >= p.vocab) {
      throw ValidationError("token id outside vocabulary");
    }
  }
}

}  // namespace detail

/// One LSTM step for all layers; fills `caches` when non-null.
inline Eigen::MatrixXd lstm_step(const LstmParams& p, const int* tokens,
                                 int batch, LstmState& state,
                                 std::vector<LayerCache>* caches) {
  const int h = p.hidden;
  Eigen::MatrixXd x;
  if (!p.one_hot()) {
    x.resize(p.embedding.cols(), batch);
    for (int b = 0; b < batch; ++b) x.col(b) = p.embedding.row(tokens[b]).transpose();
  }
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& layer = p.layers[l];
    Eigen::MatrixXd z = layer.w_h * state.h[l];
    if (l == 0 && p.one_hot()) {
      for (int b = 0; b < batch; ++b) z.col(b) += layer.w_x.col(tokens[b]);
    } else {
      z.noalias() += layer.w_x * x;
    }
    z.colwise() += layer.bias;

    Eigen::MatrixXd gates(4 * h, batch);
    gates.topRows(2 * h) = detail::sigmoid(z.topRows(2 * h).array()).matrix();
    gates.middleRows(2 * h, h) = z.middleRows(2 * h, h).array().tanh().matrix();
    gates.bottomRows(h) = detail::sigmoid(z.bottomRows(h).array()).matrix();

    Eigen::MatrixXd c = (gates.middleRows(h, h).array() * state.c[l].array() +
                         gates.topRows(h).array() *
                             gates.middleRows(2 * h, h).array())
                            .matrix();
    Eigen::MatrixXd tanh_c = c.array().tanh().matrix();
    Eigen::MatrixXd h_new =
        (gates.bottomRows(h).array() * tanh_c.array()).matrix();

    if (caches) {
      LayerCache& lc = (*caches)[l];
      if (!(l == 0 && p.one_hot())) lc.x = x;
      lc.h_prev = state.h[l];
      lc.c_prev = state.c[l];
      lc.gates = std::move(gates);
      lc.c = c;
      lc.tanh_c = std::move(tanh_c);
    }
    state.c[l] = std::move(c);
    state.h[l] = h_new;
    x = std::move(h_new);
  }
  return x;
}

/// Column-wise softmax of logits, in place.
inline void softmax_columns(Eigen::MatrixXd& logits) {
  for (Eigen::Index b = 0; b < logits.cols(); ++b) {
    auto col = logits.col(b);
    const double mx = col.maxCoeff();
    col = (col.array() - mx).exp().matrix();
    col /= col.sum();
  }
}

/// Runs the window from `state`. Returns mean NLL, the final state and, when
/// keep_cache is set, everything backward() needs.
inline ForwardResult forward(const LstmParams& p, const TokenWindow& w,
                             const LstmState& state, bool keep_cache = true) {
  detail::check_window(p, w);
  ForwardResult out;
  out.state = state;
  if (keep_cache) {
    out.cache.steps.assign(w.steps, std::vector<LayerCache>(p.layers.size()));
    out.cache.probs.resize(w.steps);
    out.cache.h_top.resize(w.steps);
  }
  double total = 0.0;
  for (int t = 0; t < w.steps; ++t) {
    Eigen::MatrixXd top =
        lstm_step(p, &w.inputs[t * w.batch], w.batch, out.state,
                  keep_cache ? &out.cache.steps[t] : nullptr);
    Eigen::MatrixXd probs = p.w_out * top;
    probs.colwise() += p.b_out;
    softmax_columns(probs);
    double step_loss = 0.0;
    for (int b = 0; b < w.batch; ++b) step_loss -= std::log(probs(w.target(t, b), b));
    if (!std::isfinite(step_loss)) {
      throw NumericalError("non-finite loss at step " + std::to_string(t), t);
    }
    total += step_loss;
    if (keep_cache) {
      out.cache.probs[t] = std::move(probs);
      out.cache.h_top[t] = std::move(top);
    }
  }
  out.loss = total / (static_cast<double>(w.steps) * w.batch);
  return out;
}

/// Exact gradient of the mean NLL of forward(); the carried-in state is a
/// constant (truncated BPTT).
inline LstmParams backward(const LstmParams& p, const TokenWindow& w,
                           const ForwardCache& cache) {
  const int h = p.hidden;
  const auto L = p.layers.size();
  const double scale = 1.0 / (static_cast<double>(w.steps) * w.batch);
  LstmParams g = p.zeros_like();
  std::vector<Eigen::MatrixXd> dh_next(L, Eigen::MatrixXd::Zero(h, w.batch));
  std::vector<Eigen::MatrixXd> dc_next(L, Eigen::MatrixXd::Zero(h, w.batch));

  for (int t = w.steps - 1; t >= 0; --t) {
    Eigen::MatrixXd dlogits = cache.probs[t];
    for (int b = 0; b < w.batch; ++b) dlogits(w.target(t, b), b) -= 1.0;
    dlogits *= scale;
    g.w_out.noalias() += dlogits * cache.h_top[t].transpose();
    g.b_out += dlogits.rowwise().sum();
    Eigen::MatrixXd dh_above = p.w_out.transpose() * dlogits;

    for (std::size_t li = L; li-- > 0;) {
      const LayerCache& lc = cache.steps[t][li];
      const auto& layer = p.layers[li];
      auto& gl = g.layers[li];
      const Eigen::ArrayXXd dh = (dh_above + dh_next[li]).array();
      const auto i = lc.gates.topRows(h).array();
      const auto f = lc.gates.middleRows(h, h).array();
      const auto gg = lc.gates.middleRows(2 * h, h).array();
      const auto o = lc.gates.bottomRows(h).array();
      const auto tc = lc.tanh_c.array();

      const Eigen::ArrayXXd dc =
          dh * o * (1.0 - tc.square()) + dc_next[li].array();
      Eigen::MatrixXd dz(4 * h, w.batch);
      dz.topRows(h) = (dc * gg * i * (1.0 - i)).matrix();
      dz.middleRows(h, h) = (dc * lc.c_prev.array() * f * (1.0 - f)).matrix();
      dz.middleRows(2 * h, h) = (dc * i * (1.0 - gg.square())).matrix();
      dz.bottomRows(h) = (dh * tc * o * (1.0 - o)).matrix();
      dc_next[li] = (dc * f).matrix();

      gl.w_h.noalias() += dz * lc.h_prev.transpose();
      gl.bias += dz.rowwise().sum();
      dh_next[li].noalias() = layer.w_h.transpose() * dz;
      if (li == 0 && p.one_hot()) {
        for (int b = 0; b < w.batch; ++b) {
          gl.w_x.col(w.input(t, b)) += dz.col(b);
        }
      } else {
        gl.w_x.noalias() += dz * lc.x.transpose();
        Eigen::MatrixXd dx = layer.w_x.transpose() * dz;
        if (li == 0) {
          for (int b = 0; b < w.batch; ++b) {
            g.embedding.row(w.input(t, b)) += dx.col(b).transpose();
          }
        } else {
          dh_above = std::move(dx);
        }
      }
    }
  }
  return g;
}

/// Euclidean norm over every gradient coordinate.
inline double global_norm(const LstmParams& g) {
  double s = 0.0;
  g.for_each_tensor([&](const std::string&, const double* d, Eigen::Index r,
                        Eigen::Index c) {
    for (Eigen::Index i = 0; i < r * c; ++i) s += d[i] * d[i];
  });
  return std::sqrt(s);
}

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_tensor;
  std::size_t coordinates = 0;
};

struct GradCheckOptions {
  double eps = 1e-5;
  std::size_t samples_per_tensor = 200;
  std::uint64_t seed = 7;
  // Applied to the analytic gradient before comparison; lets tests check
  // that the checker notices a wrong gradient.
  std::function<void(LstmParams&)> tamper;
};

/// Central finite differences against backward() on a sample of coordinates
/// per tensor (all of them when the tensor is small enough). Relative error
/// is |a - n| / max(1e-8, |a| + |n|).
inline GradCheckReport grad_check(const LstmParams& params,
                                  const TokenWindow& w,
                                  const GradCheckOptions& opts = {}) {
  const LstmState zero = LstmState::zeros(params, w.batch);
  const auto fwd = forward(params, w, zero);
  LstmParams analytic = backward(params, w, fwd.cache);
  if (opts.tamper) opts.tamper(analytic);

  std::vector<const double*> grads;
  analytic.for_each_tensor([&](const std::string&, const double* d,
                               Eigen::Index, Eigen::Index) {
    grads.push_back(d);
  });

  LstmParams probe = params;
  std::mt19937_64 rng(opts.seed);
  GradCheckReport report;
  std::size_t tensor_index = 0;
  probe.for_each_tensor([&](const std::string& name, double* d,
                            Eigen::Index r, Eigen::Index c) {
    const auto n = static_cast<std::size_t>(r * c);
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    if (n > opts.samples_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.samples_per_tensor);
    }
    const double* ga = grads[tensor_index++];
    for (auto idx : coords) {
      const double saved = d[idx];
      d[idx] = saved + opts.eps;
      const double up = forward(probe, w, zero, false).loss;
      d[idx] = saved - opts.eps;
      const double down = forward(probe, w, zero, false).loss;
      d[idx] = saved;
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double err = std::abs(ga[idx] - numeric) /
                         std::max(1e-8, std::abs(ga[idx]) + std::abs(numeric));
      ++report.coordinates;
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_tensor = name;
      }
    }
  });
  return report;
}

}  // namespace iterquant
