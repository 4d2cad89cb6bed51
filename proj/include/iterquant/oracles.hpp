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

// Brute-force references for the quantizer, used by the test suite and the
// selftest command. Nothing here calls into the rest of the library; every
// value is recomputed from the definitions.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

namespace iterquant::oracle {

inline double sign_of(std::uint32_t pattern, std::size_t j) {
  return (pattern >> j) & 1U ? 1.0 : -1.0;
}

/// min over b in {-1,+1}^n of ||w - alpha(b) b||^2 with alpha(b) = w.b / n.
inline double one_bit_exhaustive(std::span<const double> w) {
  const std::size_t n = w.size();
  double best = std::numeric_limits<double>::infinity();
  for (std::uint32_t p = 0; p < (1U << n); ++p) {
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += w[j] * sign_of(p, j);
    const double alpha = dot / static_cast<double>(n);
    double e = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = w[j] - alpha * sign_of(p, j);
      e += d * d;
    }
    best = std::min(best, e);
  }
  return best;
}

/// min over every B in {-1,+1}^{n x k} of ||w - B alpha||^2, alpha fixed.
inline double bstep_exhaustive(std::span<const double> w,
                               std::span<const double> alphas) {
  const std::size_t n = w.size();
  const std::size_t k = alphas.size();
  const std::uint32_t total = 1U << (n * k);
  double best = std::numeric_limits<double>::infinity();
  for (std::uint32_t p = 0; p < total; ++p) {
    double e = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double v = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        v += ((p >> (j * k + i)) & 1U) ? alphas[i] : -alphas[i];
      }
      e += (w[j] - v) * (w[j] - v);
    }
    best = std::min(best, e);
  }
  return best;
}

/// min over all B in {-1,+1}^{n x 2} and all alpha in R^2 of
/// ||w - B alpha||^2. For each pair of sign vectors the least-squares
/// residual is ||w||^2 - r^T G^{-1} r with G = [[n, c], [c, n]], c = b1.b2;
/// when b2 = +-b1 it degenerates to the 1-column fit.
inline double two_bit_exhaustive(std::span<const double> w) {
  const std::size_t n = w.size();
  const std::uint32_t m = 1U << n;
  std::vector<double> dots(m);
  double norm2 = 0.0;
  for (double x : w) norm2 += x * x;
  for (std::uint32_t p = 0; p < m; ++p) {
    double d = 0.0;
    for (std::size_t j = 0; j < n; ++j) d += w[j] * sign_of(p, j);
    dots[p] = d;
  }
  const double nn = static_cast<double>(n);
  double best = std::numeric_limits<double>::infinity();
  for (std::uint32_t p = 0; p < m; ++p) {
    for (std::uint32_t q = 0; q < m; ++q) {
      const double c =
          nn - 2.0 * static_cast<double>(std::popcount(p ^ q));
      const double det = nn * nn - c * c;
      double explained;
      if (det == 0.0) {
        explained = dots[p] * dots[p] / nn;
      } else {
        const double r1 = dots[p];
        const double r2 = dots[q];
        explained = (nn * r1 * r1 - 2.0 * c * r1 * r2 + nn * r2 * r2) / det;
      }
      best = std::min(best, norm2 - explained);
    }
  }
  return std::max(best, 0.0);
}

}  // namespace iterquant::oracle
