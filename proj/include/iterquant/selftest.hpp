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
#include <cstdint>
#include <cstdio>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "iterquant/byte_io.hpp"
#include "iterquant/lstm.hpp"
#include "iterquant/oracles.hpp"
#include "iterquant/quantized_tensor.hpp"
#include "iterquant/quantizer.hpp"
#include "iterquant/trainer.hpp"

namespace iterquant {

/// Deliberate regressions the selftest must catch (or, for sign0 in the
/// optimality suite, must tolerate).
struct SelftestFaults {
  bool sign_zero_negative = false;
  bool skip_clipping = false;
};

struct SelftestResult {
  std::string suite;
  bool passed = false;
  std::string detail;
};

namespace selftest {

inline std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", x);
  return buf;
}

/// Row with exact zeros, so the sign convention shows up in the bitplanes.
inline DenseMatrix golden_input() {
  return DenseMatrix(2, 8, std::vector<double>{
                               0.0, 0.5, -1.25, 0.0, 2.0, -0.75, 0.0, 1.0,
                               -0.5, 0.0, 0.25, 1.5, 0.0, -2.0, 0.75, 0.0});
}

inline constexpr std::uint64_t kGoldenHash = 0x88165d5955e90a0cULL;

/// FNV-1a of the IQQT serialization of greedy k = 2 on golden_input().
inline std::uint64_t golden_hash(const SelftestFaults& f) {
  QuantizeOptions o;
  o.bits = 2;
  o.method = QuantMethod::greedy;
  o.threads = 1;
  const DenseMatrix m = golden_input();
  const QuantizedTensor q =
      f.sign_zero_negative
          ? quantize_tensor(m, o, nullptr, nullptr, ZeroToMinus{})
          : quantize_tensor(m, o, nullptr, nullptr, ZeroToPlus{});
  return fnv1a64(serialize_quantized(q));
}

inline SelftestResult one_bit_optimality(const SelftestFaults& f) {
  std::mt19937_64 rng(101);
  std::normal_distribution<double> dist;
  double worst = -std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + trial % 10;
    std::vector<double> w(n);
    for (auto& x : w) x = dist(rng);
    if (trial % 5 == 0) w[trial % n] = 0.0;  // exercise sign(0)
    const OneBitResult r = f.sign_zero_negative
                               ? quantize_1bit(w, {}, ZeroToMinus{})
                               : quantize_1bit(w, {}, ZeroToPlus{});
    const QuantSegment seg{1, n, {r.alpha}, {r.signs}};
    worst = std::max(worst, residual_sse(w, seg) - oracle::one_bit_exhaustive(w));
  }
  return {"1-bit optimality", worst <= 1e-9,
          "max excess over exhaustive " + fmt(worst)};
}

inline SelftestResult bstep_optimality(const SelftestFaults&) {
  std::mt19937_64 rng(202);
  std::normal_distribution<double> dist;
  double worst = -std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + trial % 5;
    const int k = 1 + trial % 3;
    std::vector<double> w(n);
    std::vector<double> a(static_cast<std::size_t>(k));
    for (auto& x : w) x = dist(rng);
    for (auto& x : a) x = dist(rng);
    const Codebook cb = build_codebook(a);
    double e = 0.0;
    for (double x : w) {
      const double d = x - cb.values[nearest_code(cb, x)];
      e += d * d;
    }
    worst = std::max(worst, e - oracle::bstep_exhaustive(w, a));
  }
  return {"B-step optimality", worst <= 1e-12,
          "max excess over exhaustive " + fmt(worst)};
}

inline SelftestResult gradient_check(const SelftestFaults&) {
  TrainConfig cfg;
  cfg.hidden = 6;
  cfg.init_scale = 1.0;
  cfg.seed = 5;
  const LstmParams p = init_params(cfg, 10);
  std::mt19937_64 rng(303);
  TokenWindow w{4, 2, {}, {}};
  for (int i = 0; i < 8; ++i) {
    w.inputs.push_back(static_cast<int>(rng() % 10));
    w.targets.push_back(static_cast<int>(rng() % 10));
  }
  const GradCheckReport r = grad_check(p, w);
  return {"gradient check", r.max_relative_error < 1e-4,
          "max relative error " + fmt(r.max_relative_error) +
              " over " + std::to_string(r.coordinates) + " coordinates"};
}

inline SelftestResult clipping_invariant(const SelftestFaults& f) {
  TrainConfig cfg;
  cfg.hidden = 6;
  const double clip = 0.25;
  LstmParams p = init_params(cfg, 8);
  std::mt19937_64 rng(404);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    TokenWindow w{3, 2, {}, {}};
    for (int i = 0; i < 6; ++i) {
      w.inputs.push_back(static_cast<int>(rng() % 8));
      w.targets.push_back(static_cast<int>(rng() % 8));
    }
    LstmParams g = backward(p, w, forward(p, w, LstmState::zeros(p, 2)).cache);
    g.w_out *= 100.0;
    const SgdStepInfo info =
        sgd_step(p, g, 0.01,
                 f.skip_clipping ? std::numeric_limits<double>::infinity()
                                 : clip);
    worst = std::max(worst, info.applied_norm);
  }
  return {"clipping invariant", worst <= clip + 1e-12,
          "largest applied norm " + fmt(worst) + " (clip " + fmt(clip) + ")"};
}

inline SelftestResult determinism_golden(const SelftestFaults& f) {
  const std::uint64_t a = golden_hash(f);
  const std::uint64_t b = golden_hash(f);
  char buf[64];
  std::snprintf(buf, sizeof buf, "hash %016llx", static_cast<unsigned long long>(a));
  return {"determinism golden", a == b && a == kGoldenHash, buf};
}

}  // namespace selftest

inline std::vector<SelftestResult> run_selftest(const SelftestFaults& f = {}) {
  return {selftest::one_bit_optimality(f), selftest::bstep_optimality(f),
          selftest::gradient_check(f), selftest::clipping_invariant(f),
          selftest::determinism_golden(f)};
}

}  // namespace iterquant
