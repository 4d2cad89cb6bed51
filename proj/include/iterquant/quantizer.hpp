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

// Binary-code quantization of a weight vector w ~ sum_i alpha_i * b_i with
// b_i in {-1, +1}^n: closed-form 1-bit, greedy residual k-bit, least-squares
// alpha refinement and alternating (alpha, B) refinement.
//
// Every routine accepts an optional survivor mask. Masked positions take no
// part in the fit, carry bit value +1 by convention and dequantize to 0.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "iterquant/bit_vector.hpp"
#include "iterquant/error.hpp"

namespace iterquant {

inline constexpr int kMaxBits = 8;

/// sign(x) with sign(0) = +1. Returns true for +1.
struct ZeroToPlus {
  bool operator()(double x) const noexcept { return x >= 0.0; }
};

/// sign(x) with sign(0) = -1. Only used to fault-inject the self test.
struct ZeroToMinus {
  bool operator()(double x) const noexcept { return x > 0.0; }
};

/// One k-bit table: alphas plus k sign planes over `length` weights.
/// A set bit is +1, a clear bit is -1.
struct QuantSegment {
  int k = 0;
  std::size_t length = 0;
  std::vector<double> alphas;
  std::vector<BitVector> bitplanes;

  /// Reconstruction at position j, summed in plane order.
  double value(std::size_t j) const noexcept {
    double v = 0.0;
    for (int i = 0; i < k; ++i) {
      v += bitplanes[i].test(j) ? alphas[i] : -alphas[i];
    }
    return v;
  }

  friend bool operator==(const QuantSegment&, const QuantSegment&) = default;
};

/// SSE between w and the segment reconstruction over surviving positions.
inline double residual_sse(std::span<const double> w, const QuantSegment& seg,
                           MaskView mask = {}) {
  double total = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) {
    if (!mask.survives(j)) continue;
    const double d = w[j] - seg.value(j);
    total += d * d;
  }
  return total;
}

namespace detail {

inline std::size_t count_survivors(std::size_t n, MaskView mask) {
  if (!mask.active()) return n;
  std::size_t c = 0;
  for (std::size_t j = 0; j < n; ++j) c += mask.survives(j) ? 1 : 0;
  return c;
}

inline void check_bits(int k) {
  if (k < 1 || k > kMaxBits) {
    throw ValidationError("bit count must be in [1, 8], got " +
                          std::to_string(k));
  }
}

}  // namespace detail

struct OneBitResult {
  double alpha = 0.0;
  BitVector signs;
};

/// Closed-form optimum of ||w - alpha b||^2: b = sign(w), alpha = mean |w|
/// over survivors.
template <class SignRule = ZeroToPlus>
OneBitResult quantize_1bit(std::span<const double> w, MaskView mask = {},
                           SignRule sign = {}) {
  if (w.empty()) throw DimensionError("quantize_1bit: empty input");
  OneBitResult out{0.0, BitVector(w.size(), true)};
  double dot = 0.0;
  std::size_t survivors = 0;
  for (std::size_t j = 0; j < w.size(); ++j) {
    if (!mask.survives(j)) continue;
    const bool plus = sign(w[j]);
    out.signs.set(j, plus);
    dot += plus ? w[j] : -w[j];
    ++survivors;
  }
  if (survivors == 0) {
    throw DegenerateInputError("quantize_1bit: every position is masked");
  }
  out.alpha = dot / static_cast<double>(survivors);
  return out;
}

/// Greedy k-bit quantization: bit i is the 1-bit optimum of the residual
/// left after bits 1..i-1.
template <class SignRule = ZeroToPlus>
QuantSegment quantize_greedy(std::span<const double> w, int k,
                             MaskView mask = {}, SignRule sign = {}) {
  detail::check_bits(k);
  std::vector<double> residual(w.begin(), w.end());
  QuantSegment seg;
  seg.k = k;
  seg.length = w.size();
  for (int i = 0; i < k; ++i) {
    auto step = quantize_1bit(std::span<const double>(residual), mask, sign);
    for (std::size_t j = 0; j < residual.size(); ++j) {
      if (!mask.survives(j)) continue;
      residual[j] -= step.signs.test(j) ? step.alpha : -step.alpha;
    }
    seg.alphas.push_back(step.alpha);
    seg.bitplanes.push_back(std::move(step.signs));
  }
  return seg;
}

struct RefinedAlphas {
  std::vector<double> alphas;
  // Set when B^T B was singular and the ridge fallback was used.
  bool ridge = false;
};

/// Least-squares alphas for fixed sign planes: argmin ||w_s - B_s alpha||^2
/// over surviving positions s. A singular Gram matrix (duplicate or
/// complementary planes) is regularized with 1e-10 * trace on the diagonal.
inline RefinedAlphas refine_alphas(std::span<const BitVector> planes,
                                   std::span<const double> w,
                                   MaskView mask = {}) {
  const int k = static_cast<int>(planes.size());
  detail::check_bits(k);
  for (const auto& p : planes) {
    if (p.size() != w.size()) {
      throw DimensionError("refine_alphas: plane length " +
                           std::to_string(p.size()) + " != " +
                           std::to_string(w.size()));
    }
  }
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(k, k);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(k);
  std::size_t survivors = 0;
  double s[kMaxBits];
  for (std::size_t j = 0; j < w.size(); ++j) {
    if (!mask.survives(j)) continue;
    ++survivors;
    for (int a = 0; a < k; ++a) s[a] = planes[a].test(j) ? 1.0 : -1.0;
    for (int a = 0; a < k; ++a) {
      rhs[a] += s[a] > 0 ? w[j] : -w[j];
      for (int b = a; b < k; ++b) gram(a, b) += s[a] * s[b];
    }
  }
  if (survivors == 0) {
    throw DegenerateInputError("refine_alphas: every position is masked");
  }
  gram.triangularView<Eigen::StrictlyLower>() = gram.transpose();

  RefinedAlphas out;
  if (k == 1) {
    out.alphas = {rhs[0] / gram(0, 0)};
    return out;
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(gram);
  Eigen::VectorXd solution;
  if (lu.isInvertible()) {
    solution = lu.solve(rhs);
  } else {
    const double lambda = 1e-10 * gram.trace();
    gram.diagonal().array() += lambda;
    solution = gram.ldlt().solve(rhs);
    out.ridge = true;
  }
  out.alphas.assign(solution.data(), solution.data() + k);
  return out;
}

/// All 2^k representable values sum_i +-alpha_i in ascending order.
/// codes[p] has bit i set when plane i is +1 for values[p].
struct Codebook {
  int k = 0;
  std::vector<double> values;
  std::vector<std::uint16_t> codes;
};

/// Equal values keep enumeration order, which is lexicographic in the sign
/// pattern (plane 0 most significant, - before +).
inline Codebook build_codebook(std::span<const double> alphas) {
  const int k = static_cast<int>(alphas.size());
  detail::check_bits(k);
  const std::size_t n = std::size_t{1} << k;
  struct Entry {
    double value;
    std::uint16_t code;
  };
  std::vector<Entry> entries(n);
  for (std::size_t p = 0; p < n; ++p) {
    std::uint16_t code = 0;
    double v = 0.0;
    for (int i = 0; i < k; ++i) {
      const bool plus = (p >> (k - 1 - i)) & 1U;
      if (plus) code |= static_cast<std::uint16_t>(1U << i);
      v += plus ? alphas[i] : -alphas[i];
    }
    entries[p] = {v, code};
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& a, const Entry& b) {
                     return a.value < b.value;
                   });
  Codebook cb;
  cb.k = k;
  cb.values.reserve(n);
  cb.codes.reserve(n);
  for (const auto& e : entries) {
    cb.values.push_back(e.value);
    cb.codes.push_back(e.code);
  }
  return cb;
}

/// Position in `cb` of the value nearest to x. Exact midpoint ties go to the
/// smaller value; among equal values the first entry wins.
inline std::size_t nearest_code(const Codebook& cb, double x) {
  const auto& v = cb.values;
  auto first_of = [&](double value) {
    return static_cast<std::size_t>(
        std::lower_bound(v.begin(), v.end(), value) - v.begin());
  };
  const auto it = std::lower_bound(v.begin(), v.end(), x);
  if (it == v.begin()) return 0;
  if (it == v.end()) return first_of(v.back());
  const auto hi = static_cast<std::size_t>(it - v.begin());
  const double below = x - v[hi - 1];
  const double above = v[hi] - x;
  return above < below ? hi : first_of(v[hi - 1]);
}

struct AlternatingStats {
  int alternations = 0;
  bool ridge = false;
  std::vector<double> sse_trace;  // after init, then after each accepted step
};

struct AlternatingOptions {
  double tol = 1e-6;
  int max_iters = 50;
};

/// Greedy init + refined alphas, then alternate a B-step (nearest codebook
/// entry per element) with an alpha-step (least squares). A step is kept only
/// if it strictly lowers SSE; the loop ends once the relative improvement
/// drops below tol or after max_iters alternations.
template <class SignRule = ZeroToPlus>
QuantSegment alternating_quantize(std::span<const double> w, int k,
                                  MaskView mask = {},
                                  AlternatingOptions opts = {},
                                  AlternatingStats* stats = nullptr,
                                  SignRule sign = {}) {
  if (!(opts.tol > 0.0)) throw ValidationError("alternating: tol must be > 0");
  QuantSegment seg = quantize_greedy(w, k, mask, sign);
  double best = residual_sse(w, seg, mask);
  AlternatingStats local;
  {
    QuantSegment refined = seg;
    auto ra = refine_alphas(refined.bitplanes, w, mask);
    refined.alphas = std::move(ra.alphas);
    local.ridge = ra.ridge;
    const double e = residual_sse(w, refined, mask);
    if (e <= best) {
      seg = std::move(refined);
      best = e;
    }
  }
  local.sse_trace.push_back(best);

  for (int it = 0; it < opts.max_iters && best > 0.0; ++it) {
    ++local.alternations;
    const Codebook cb = build_codebook(seg.alphas);
    QuantSegment next;
    next.k = k;
    next.length = w.size();
    next.bitplanes.assign(k, BitVector(w.size(), true));
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (!mask.survives(j)) continue;
      const std::uint16_t code = cb.codes[nearest_code(cb, w[j])];
      for (int i = 0; i < k; ++i) next.bitplanes[i].set(j, (code >> i) & 1U);
    }
    auto ra = refine_alphas(next.bitplanes, w, mask);
    next.alphas = std::move(ra.alphas);
    const double e = residual_sse(w, next, mask);
    if (!(e < best)) break;
    local.ridge = local.ridge || ra.ridge;
    const double improvement = (best - e) / best;
    seg = std::move(next);
    best = e;
    local.sse_trace.push_back(best);
    if (improvement < opts.tol) break;
  }
  if (stats) *stats = std::move(local);
  return seg;
}

}  // namespace iterquant
