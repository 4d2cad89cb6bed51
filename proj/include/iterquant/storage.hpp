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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "iterquant/error.hpp"

namespace iterquant {

/// Bits-per-weight breakdown of a pruned + binary-code quantized matrix.
struct StorageReport {
  double weight_bits_per_weight = 0.0;
  double mask_bits_per_weight = 0.0;
  double alpha_overhead_bits_per_weight = 0.0;
  double total_bits_per_weight = 0.0;
  double compression_vs_float32 = 0.0;
  double compression_vs_ternary2 = 0.0;  // against 2-bit ternary codes
  double table_size_bytes = 0.0;
  double weight_payload_bytes = 0.0;
  // Alpha tables exceed 5% of the total.
  bool alpha_overhead_significant = false;

  std::vector<std::pair<std::string, double>> fields() const {
    return {
        {"weight_bits_per_weight", weight_bits_per_weight},
        {"mask_bits_per_weight", mask_bits_per_weight},
        {"alpha_overhead_bits_per_weight", alpha_overhead_bits_per_weight},
        {"total_bits_per_weight", total_bits_per_weight},
        {"compression_vs_float32", compression_vs_float32},
        {"compression_vs_ternary2", compression_vs_ternary2},
        {"table_size_bytes", table_size_bytes},
        {"weight_payload_bytes", weight_payload_bytes},
        {"alpha_overhead_significant", alpha_overhead_significant ? 1.0 : 0.0},
    };
  }

  /// Flat "key = value" block, one field per line.
  std::string to_text() const {
    std::string out;
    char buf[96];
    for (const auto& [key, value] : fields()) {
      std::snprintf(buf, sizeof buf, "%s = %.6g\n", key.c_str(), value);
      out += buf;
    }
    return out;
  }
};

struct StorageLayout {
  std::size_t rows = 0;
  std::size_t cols = 0;
  int bits = 1;
  std::size_t tables_per_row = 1;
  double prune_rate = 0.0;
  // Index (mask) cost per weight. The compressed-mask codec is external;
  // 1.0 models a raw bitmask.
  double mask_bits_per_weight = 0.0;
  // 0 leaves alpha tables out of the budget.
  int alpha_bits = 16;
};

inline StorageReport storage_report(const StorageLayout& l) {
  if (l.rows == 0 || l.cols == 0) {
    throw ValidationError("storage_report: rows and cols must be positive");
  }
  if (l.bits < 0 || l.alpha_bits < 0 || l.mask_bits_per_weight < 0.0 ||
      !(l.prune_rate >= 0.0 && l.prune_rate < 1.0)) {
    throw ValidationError("storage_report: arguments must be nonnegative and "
                          "prune_rate in [0, 1)");
  }
  if (l.prune_rate == 0.0 && l.mask_bits_per_weight != 0.0) {
    throw ValidationError(
        "storage_report: mask bits must be 0 when nothing is pruned");
  }
  const double n = static_cast<double>(l.rows) * static_cast<double>(l.cols);
  const double table_bits = static_cast<double>(l.rows) *
                            static_cast<double>(l.tables_per_row) * l.bits *
                            l.alpha_bits;
  StorageReport r;
  r.weight_bits_per_weight = (1.0 - l.prune_rate) * l.bits;
  r.mask_bits_per_weight = l.mask_bits_per_weight;
  r.alpha_overhead_bits_per_weight = table_bits / n;
  r.total_bits_per_weight = r.weight_bits_per_weight + r.mask_bits_per_weight +
                            r.alpha_overhead_bits_per_weight;
  r.compression_vs_float32 =
      r.total_bits_per_weight > 0 ? 32.0 / r.total_bits_per_weight : 0.0;
  r.compression_vs_ternary2 =
      r.total_bits_per_weight > 0 ? 2.0 / r.total_bits_per_weight : 0.0;
  r.table_size_bytes = table_bits / 8.0;
  r.weight_payload_bytes = n * r.weight_bits_per_weight / 8.0;
  r.alpha_overhead_significant =
      r.total_bits_per_weight > 0 &&
      r.alpha_overhead_bits_per_weight > 0.05 * r.total_bits_per_weight;
  return r;
}

/// Weight-count-weighted combination of several tensors' reports.
inline StorageReport storage_report(std::span<const StorageLayout> layouts) {
  if (layouts.empty()) throw ValidationError("storage_report: no tensors");
  StorageReport sum;
  double n_total = 0.0;
  for (const auto& l : layouts) {
    const StorageReport r = storage_report(l);
    const double n = static_cast<double>(l.rows) * static_cast<double>(l.cols);
    n_total += n;
    sum.weight_bits_per_weight += n * r.weight_bits_per_weight;
    sum.mask_bits_per_weight += n * r.mask_bits_per_weight;
    sum.alpha_overhead_bits_per_weight += n * r.alpha_overhead_bits_per_weight;
    sum.table_size_bytes += r.table_size_bytes;
    sum.weight_payload_bytes += r.weight_payload_bytes;
  }
  sum.weight_bits_per_weight /= n_total;
  sum.mask_bits_per_weight /= n_total;
  sum.alpha_overhead_bits_per_weight /= n_total;
  sum.total_bits_per_weight = sum.weight_bits_per_weight +
                              sum.mask_bits_per_weight +
                              sum.alpha_overhead_bits_per_weight;
  const double t = sum.total_bits_per_weight;
  sum.compression_vs_float32 = t > 0 ? 32.0 / t : 0.0;
  sum.compression_vs_ternary2 = t > 0 ? 2.0 / t : 0.0;
  sum.alpha_overhead_significant =
      t > 0 && sum.alpha_overhead_bits_per_weight > 0.05 * t;
  return sum;
}

/// Kilobytes (1024 bytes) with 2 decimals below 10 and 3 significant
/// figures from 10 up, rounding halves up (3.125 -> "3.13").
inline std::string format_kb(double bytes) {
  const double kb = bytes / 1024.0;
  int decimals = 2;
  if (kb >= 10.0) {
    decimals = std::max(0, 2 - static_cast<int>(std::floor(std::log10(kb))));
  }
  const double scale = std::pow(10.0, decimals);
  const double rounded = std::floor(kb * scale + 0.5) / scale;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, rounded);
  return buf;
}

/// "0.300 bits/weight, 106.7× vs f32"
inline std::string headline(const StorageReport& r) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.3f bits/weight, %.1f\u00d7 vs f32",
                r.total_bits_per_weight, r.compression_vs_float32);
  return buf;
}

/// Bits per weight of a CSR encoding: nnz (column index + value) entries plus
/// rows + 1 row pointers, over rows * cols weights.
inline double csr_bits_estimate(std::size_t rows, std::size_t cols,
                                double prune_rate, int index_bits,
                                int value_bits, int pointer_bits = 32) {
  if (rows == 0 || cols == 0) {
    throw ValidationError("csr_bits_estimate: empty matrix");
  }
  const double n = static_cast<double>(rows) * static_cast<double>(cols);
  const double nnz = std::round((1.0 - prune_rate) * n);
  const double bits = nnz * (index_bits + value_bits) +
                      static_cast<double>(rows + 1) * pointer_bits;
  return bits / n;
}

}  // namespace iterquant
