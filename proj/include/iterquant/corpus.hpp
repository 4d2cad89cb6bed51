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
#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "iterquant/byte_io.hpp"
#include "iterquant/error.hpp"

namespace iterquant {

/// Byte-level token stream split into contiguous train/valid/test ranges.
struct Corpus {
  std::vector<std::uint8_t> vocab;  // sorted distinct bytes; id = position
  std::vector<int> train;
  std::vector<int> valid;
  std::vector<int> test;
  std::uint64_t checksum = 0;  // FNV-1a of the raw bytes

  int vocab_size() const noexcept { return static_cast<int>(vocab.size()); }
};

struct SplitFractions {
  double train = 0.9;
  double valid = 0.05;  // test gets the remainder
};

inline Corpus make_corpus(std::span<const std::uint8_t> raw,
                          SplitFractions split = {}) {
  if (!(split.train > 0.0 && split.valid > 0.0 &&
        split.train + split.valid <= 1.0)) {
    throw ValidationError("corpus: split fractions must be positive and sum "
                          "to at most 1");
  }
  if (raw.size() < 16) throw ValidationError("corpus: fewer than 16 bytes");
  Corpus c;
  c.checksum = fnv1a64(raw);
  std::array<int, 256> id{};
  id.fill(-1);
  for (auto b : raw) id[b] = 0;
  for (int b = 0; b < 256; ++b) {
    if (id[b] == 0) {
      id[b] = static_cast<int>(c.vocab.size());
      c.vocab.push_back(static_cast<std::uint8_t>(b));
    }
  }
  const std::size_t n = raw.size();
  const auto n_train = static_cast<std::size_t>(split.train * n);
  const auto n_valid = static_cast<std::size_t>(split.valid * n);
  if (n_train < 2 || n_valid < 2) {
    throw ValidationError("corpus: train or valid split too small");
  }
  auto ids = [&](std::size_t from, std::size_t to) {
    std::vector<int> out;
    out.reserve(to - from);
    for (std::size_t i = from; i < to; ++i) out.push_back(id[raw[i]]);
    return out;
  };
  c.train = ids(0, n_train);
  c.valid = ids(n_train, n_train + n_valid);
  c.test = ids(n_train + n_valid, n);
  return c;
}

inline Corpus load_corpus(const std::filesystem::path& path,
                          SplitFractions split = {}) {
  const Bytes raw = read_file(path);
  return make_corpus(raw, split);
}

}  // namespace iterquant
