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
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "iterquant/byte_io.hpp"
#include "iterquant/dense_matrix.hpp"
#include "iterquant/quantizer.hpp"

namespace iterquant {

enum class QuantMethod { greedy, refined, alternating };

inline std::string_view to_string(QuantMethod m) {
  switch (m) {
    case QuantMethod::greedy:
      return "greedy";
    case QuantMethod::refined:
      return "refined";
    case QuantMethod::alternating:
      return "alternating";
  }
  return "?";
}

inline QuantMethod parse_method(std::string_view s) {
  if (s == "greedy") return QuantMethod::greedy;
  if (s == "refined") return QuantMethod::refined;
  if (s == "alternating") return QuantMethod::alternating;
  throw ValidationError("unknown quantization method '" + std::string(s) +
                        "' (expected greedy, refined or alternating)");
}

/// First column of table t when a row of `cols` weights is split into
/// `tables` contiguous, nearly equal chunks.
constexpr std::size_t segment_begin(std::size_t cols, std::size_t tables,
                                    std::size_t t) noexcept {
  return t * cols / tables;
}

/// Row-wise quantized matrix. segments[r * tables_per_row + t] covers columns
/// [segment_begin(cols, T, t), segment_begin(cols, T, t + 1)) of row r.
struct QuantizedTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  int k = 1;
  std::size_t tables_per_row = 1;
  std::vector<QuantSegment> segments;
  std::optional<BitVector> mask;  // row-major survivors, rows * cols bits

  const QuantSegment& segment(std::size_t r, std::size_t t) const {
    return segments[r * tables_per_row + t];
  }

  friend bool operator==(const QuantizedTensor&,
                         const QuantizedTensor&) = default;
};

struct QuantizeOptions {
  int bits = 1;
  std::size_t tables_per_row = 1;
  QuantMethod method = QuantMethod::alternating;
  AlternatingOptions alternating{};
  unsigned threads = 0;  // 0: hardware concurrency
};

/// Per-segment bookkeeping reported alongside a quantized tensor.
struct QuantDiagnostics {
  std::vector<double> segment_sse;
  std::size_t empty_segments = 0;  // all positions pruned, alphas forced to 0
  std::size_t ridge_segments = 0;

  double total_sse() const {
    double s = 0.0;
    for (double e : segment_sse) s += e;
    return s;
  }
};

namespace detail {

template <class Fn>
void parallel_rows(std::size_t rows, unsigned threads, Fn&& fn) {
  if (threads == 0) threads = std::max(1U, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(
      std::min<std::size_t>(threads, std::max<std::size_t>(rows, 1)));
  if (threads <= 1) {
    for (std::size_t r = 0; r < rows; ++r) fn(r);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(threads);
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t r = t; r < rows; r += threads) fn(r);
    });
  }
}

template <class SignRule>
QuantSegment quantize_segment(std::span<const double> w, MaskView mask,
                              const QuantizeOptions& opts, SignRule sign,
                              bool& ridge) {
  switch (opts.method) {
    case QuantMethod::greedy:
      return quantize_greedy(w, opts.bits, mask, sign);
    case QuantMethod::refined: {
      QuantSegment seg = quantize_greedy(w, opts.bits, mask, sign);
      auto ra = refine_alphas(seg.bitplanes, w, mask);
      seg.alphas = std::move(ra.alphas);
      ridge = ra.ridge;
      return seg;
    }
    case QuantMethod::alternating: {
      AlternatingStats stats;
      auto seg = alternating_quantize(w, opts.bits, mask, opts.alternating,
                                      &stats, sign);
      ridge = stats.ridge;
      return seg;
    }
  }
  throw ValidationError("unknown quantization method");
}

}  // namespace detail

/// Quantizes every row independently, split into tables_per_row segments.
/// With a mask, only survivors are fitted; a segment with no survivors gets
/// zero alphas.
template <class SignRule = ZeroToPlus>
QuantizedTensor quantize_tensor(const DenseMatrix& m,
                                const QuantizeOptions& opts,
                                const BitVector* mask = nullptr,
                                QuantDiagnostics* diag = nullptr,
                                SignRule sign = {}) {
  detail::check_bits(opts.bits);
  const std::size_t T = opts.tables_per_row;
  if (T < 1 || (m.cols() > 0 && T > m.cols())) {
    throw ValidationError("tables_per_row must be in [1, cols]; got " +
                          std::to_string(T) + " for " +
                          std::to_string(m.cols()) + " columns");
  }
  if (mask && mask->size() != m.size()) {
    throw DimensionError("quantize_tensor: mask has " +
                         std::to_string(mask->size()) + " bits for " +
                         std::to_string(m.size()) + " weights");
  }
  QuantizedTensor q;
  q.rows = m.rows();
  q.cols = m.cols();
  q.k = opts.bits;
  q.tables_per_row = T;
  q.segments.resize(m.rows() * T);
  if (mask) q.mask = *mask;

  std::vector<double> seg_sse(q.segments.size(), 0.0);
  std::vector<char> empty(q.segments.size(), 0);
  std::vector<char> ridge(q.segments.size(), 0);

  detail::parallel_rows(m.rows(), opts.threads, [&](std::size_t r) {
    const auto row = m.row(r);
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t begin = segment_begin(m.cols(), T, t);
      const std::size_t end = segment_begin(m.cols(), T, t + 1);
      const auto w = row.subspan(begin, end - begin);
      const MaskView view =
          mask ? MaskView{mask, r * m.cols() + begin} : MaskView{};
      const std::size_t idx = r * T + t;
      if (detail::count_survivors(w.size(), view) == 0) {
        QuantSegment seg;
        seg.k = opts.bits;
        seg.length = w.size();
        seg.alphas.assign(opts.bits, 0.0);
        seg.bitplanes.assign(opts.bits, BitVector(w.size(), true));
        q.segments[idx] = std::move(seg);
        empty[idx] = 1;
        continue;
      }
      bool used_ridge = false;
      q.segments[idx] =
          detail::quantize_segment(w, view, opts, sign, used_ridge);
      ridge[idx] = used_ridge ? 1 : 0;
      seg_sse[idx] = residual_sse(w, q.segments[idx], view);
    }
  });

  if (diag) {
    diag->segment_sse = std::move(seg_sse);
    diag->empty_segments =
        static_cast<std::size_t>(std::count(empty.begin(), empty.end(), 1));
    diag->ridge_segments =
        static_cast<std::size_t>(std::count(ridge.begin(), ridge.end(), 1));
  }
  return q;
}

/// Expands a quantized tensor back to dense weights; pruned positions are 0.
inline DenseMatrix dequantize(const QuantizedTensor& q) {
  DenseMatrix out(q.rows, q.cols);
  for (std::size_t r = 0; r < q.rows; ++r) {
    auto row = out.row(r);
    for (std::size_t t = 0; t < q.tables_per_row; ++t) {
      const std::size_t begin = segment_begin(q.cols, q.tables_per_row, t);
      const auto& seg = q.segment(r, t);
      for (std::size_t j = 0; j < seg.length; ++j) {
        const std::size_t flat = r * q.cols + begin + j;
        row[begin + j] = (q.mask && !q.mask->test(flat)) ? 0.0 : seg.value(j);
      }
    }
  }
  return out;
}

/// Zeroes the pruned positions of m; the reference that quantization SSE is
/// measured against.
inline DenseMatrix masked_reference(const DenseMatrix& m,
                                    const BitVector* mask) {
  DenseMatrix out = m;
  if (!mask) return out;
  auto v = out.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!mask->test(i)) v[i] = 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// IQQT artifact format

enum class AlphaDtype : std::uint8_t { f32 = 0, f16 = 1 };

namespace iqqt {
inline constexpr char kMagic[4] = {'I', 'Q', 'Q', 'T'};
inline constexpr std::uint32_t kVersion = 1;
}  // namespace iqqt

inline Bytes serialize_quantized(const QuantizedTensor& q,
                                 AlphaDtype alpha_dtype = AlphaDtype::f32) {
  if (q.tables_per_row > 0xffff) {
    throw ValidationError("IQQT: tables_per_row exceeds u16");
  }
  ByteWriter w;
  w.bytes(std::string_view(iqqt::kMagic, 4));
  w.u32(iqqt::kVersion);
  w.u32(static_cast<std::uint32_t>(q.rows));
  w.u32(static_cast<std::uint32_t>(q.cols));
  w.u8(static_cast<std::uint8_t>(q.k));
  w.u16(static_cast<std::uint16_t>(q.tables_per_row));
  w.u8(static_cast<std::uint8_t>(alpha_dtype));
  w.u8(q.mask ? 1 : 0);
  for (const auto& seg : q.segments) {
    for (double a : seg.alphas) {
      if (alpha_dtype == AlphaDtype::f32) {
        w.f32(static_cast<float>(a));
      } else {
        w.u16(float_to_half(static_cast<float>(a)));
      }
    }
    for (const auto& plane : seg.bitplanes) {
      for (auto word : plane.words()) w.u64(word);
    }
  }
  if (q.mask) {
    for (auto word : q.mask->words()) w.u64(word);
  }
  return w.take();
}

struct LoadedQuantized {
  QuantizedTensor tensor;
  AlphaDtype alpha_dtype = AlphaDtype::f32;
};

inline LoadedQuantized parse_quantized(std::span<const std::uint8_t> data,
                                       const std::string& origin = "IQQT") {
  ByteReader r(data, origin);
  if (data.size() < 4) throw FormatError(origin + ": file too short for magic");
  if (r.bytes(4) != std::string_view(iqqt::kMagic, 4)) {
    throw FormatError(origin + ": bad magic (expected IQQT)");
  }
  const auto version = r.u32();
  if (version != iqqt::kVersion) {
    throw FormatError(origin + ": unsupported version " +
                      std::to_string(version));
  }
  LoadedQuantized out;
  QuantizedTensor& q = out.tensor;
  q.rows = r.u32();
  q.cols = r.u32();
  q.k = r.u8();
  q.tables_per_row = r.u16();
  const auto dtype = r.u8();
  const auto mask_present = r.u8();
  if (q.k < 1 || q.k > kMaxBits) {
    throw FormatError(origin + ": bit count " + std::to_string(q.k) +
                      " outside [1, 8]");
  }
  if (q.tables_per_row < 1 || (q.cols > 0 && q.tables_per_row > q.cols)) {
    throw FormatError(origin + ": invalid tables_per_row");
  }
  if (dtype > 1) {
    throw FormatError(origin + ": unknown alpha dtype " +
                      std::to_string(dtype));
  }
  if (mask_present > 1) throw FormatError(origin + ": bad mask flag");
  out.alpha_dtype = static_cast<AlphaDtype>(dtype);

  const std::size_t alpha_bytes = dtype == 0 ? 4 : 2;
  if (r.remaining() / (alpha_bytes * static_cast<std::size_t>(q.k)) <
      q.rows * q.tables_per_row) {
    throw CorruptionError(origin + ": truncated payload");
  }
  q.segments.reserve(q.rows * q.tables_per_row);
  for (std::size_t r_i = 0; r_i < q.rows; ++r_i) {
    for (std::size_t t = 0; t < q.tables_per_row; ++t) {
      QuantSegment seg;
      seg.k = q.k;
      seg.length = segment_begin(q.cols, q.tables_per_row, t + 1) -
                   segment_begin(q.cols, q.tables_per_row, t);
      for (int i = 0; i < q.k; ++i) {
        const float a = out.alpha_dtype == AlphaDtype::f32
                            ? r.f32()
                            : half_to_float(r.u16());
        if (!std::isfinite(a)) {
          throw CorruptionError(origin + ": non-finite alpha");
        }
        seg.alphas.push_back(a);
      }
      const std::size_t words = BitVector::word_count(seg.length);
      for (int i = 0; i < q.k; ++i) {
        std::vector<std::uint64_t> buf(words);
        for (auto& word : buf) word = r.u64();
        seg.bitplanes.push_back(BitVector::from_words(std::move(buf),
                                                      seg.length));
      }
      q.segments.push_back(std::move(seg));
    }
  }
  if (mask_present) {
    const std::size_t n = q.rows * q.cols;
    std::vector<std::uint64_t> buf(BitVector::word_count(n));
    for (auto& word : buf) word = r.u64();
    q.mask = BitVector::from_words(std::move(buf), n);
  }
  r.expect_end();
  return out;
}

inline void save_quantized(const QuantizedTensor& q,
                           const std::filesystem::path& path,
                           AlphaDtype alpha_dtype = AlphaDtype::f32) {
  write_file(path, serialize_quantized(q, alpha_dtype));
}

inline LoadedQuantized load_quantized(const std::filesystem::path& path) {
  return parse_quantized(read_file(path), path.string());
}

/// Rounds alphas the way a save/load cycle with `dtype` does.
inline QuantizedTensor round_alphas(QuantizedTensor q, AlphaDtype dtype) {
  for (auto& seg : q.segments) {
    for (auto& a : seg.alphas) {
      const auto f = static_cast<float>(a);
      a = dtype == AlphaDtype::f32 ? f : half_to_float(float_to_half(f));
    }
  }
  return q;
}

}  // namespace iterquant
