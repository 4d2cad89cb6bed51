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

#include <bit>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "iterquant/error.hpp"

namespace iterquant {

/// Fixed-length bitset stored as little-endian 64-bit words. Bit j lives in
/// word j / 64 at position j % 64; padding bits past length() are always 0.
class BitVector {
 public:
  BitVector() = default;

  explicit BitVector(std::size_t length, bool value = false)
      : length_(length), words_(word_count(length), value ? ~0ULL : 0ULL) {
    clear_padding();
  }

  static constexpr std::size_t word_count(std::size_t length) noexcept {
    return (length + 63) / 64;
  }

  /// Rebuilds a bitset from packed words. Rejects a word count that does not
  /// match the length, and any set padding bit.
  static BitVector from_words(std::vector<std::uint64_t> words,
                              std::size_t length) {
    if (words.size() != word_count(length)) {
      throw FormatError("bitset: expected " +
                        std::to_string(word_count(length)) + " words for " +
                        std::to_string(length) + " bits, got " +
                        std::to_string(words.size()));
    }
    BitVector out;
    out.length_ = length;
    out.words_ = std::move(words);
    const std::size_t tail = length % 64;
    if (tail != 0 && (out.words_.back() >> tail) != 0) {
      throw FormatError("bitset: nonzero padding bits");
    }
    return out;
  }

  std::size_t size() const noexcept { return length_; }
  std::span<const std::uint64_t> words() const noexcept { return words_; }

  bool test(std::size_t i) const noexcept {
    return (words_[i >> 6] >> (i & 63)) & 1ULL;
  }

  void set(std::size_t i, bool value = true) noexcept {
    const std::uint64_t bit = 1ULL << (i & 63);
    if (value) {
      words_[i >> 6] |= bit;
    } else {
      words_[i >> 6] &= ~bit;
    }
  }

  std::size_t count() const noexcept {
    std::size_t n = 0;
    for (auto w : words_) n += static_cast<std::size_t>(std::popcount(w));
    return n;
  }

  /// Copies bits [offset, offset + length) into a new vector.
  BitVector slice(std::size_t offset, std::size_t length) const {
    BitVector out(length);
    for (std::size_t j = 0; j < length; ++j) {
      if (test(offset + j)) out.set(j);
    }
    return out;
  }

  friend bool operator==(const BitVector&, const BitVector&) = default;

 private:
  void clear_padding() noexcept {
    const std::size_t tail = length_ % 64;
    if (tail != 0) words_.back() &= (1ULL << tail) - 1;
  }

  std::size_t length_ = 0;
  std::vector<std::uint64_t> words_;
};

/// Packs a bool sequence into ceil(n/64) words with zeroed padding.
inline std::vector<std::uint64_t> pack_bitplanes(const std::vector<bool>& bits) {
  std::vector<std::uint64_t> words(BitVector::word_count(bits.size()), 0);
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) words[i >> 6] |= 1ULL << (i & 63);
  }
  return words;
}

inline std::vector<bool> unpack_bitplanes(std::span<const std::uint64_t> words,
                                          std::size_t length) {
  const BitVector bv = BitVector::from_words(
      std::vector<std::uint64_t>(words.begin(), words.end()), length);
  std::vector<bool> bits(length);
  for (std::size_t i = 0; i < length; ++i) bits[i] = bv.test(i);
  return bits;
}

/// Non-owning view of a window of a survivor bitset (1 = keep). An inactive
/// view means "no mask": every position survives.
struct MaskView {
  const BitVector* bits = nullptr;
  std::size_t offset = 0;

  bool active() const noexcept { return bits != nullptr; }
  bool survives(std::size_t j) const noexcept {
    return bits == nullptr || bits->test(offset + j);
  }
  MaskView shifted(std::size_t delta) const noexcept {
    return MaskView{bits, offset + delta};
  }
};

}  // namespace iterquant
