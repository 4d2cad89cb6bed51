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
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "iterquant/byte_io.hpp"
#include "iterquant/dense_matrix.hpp"

namespace iterquant {

struct NamedTensor {
  std::string name;
  DenseMatrix matrix;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Ordered collection of named weight matrices plus string metadata.
struct ModelBundle {
  std::vector<NamedTensor> tensors;
  std::vector<std::pair<std::string, std::string>> metadata;

  const DenseMatrix* find(std::string_view name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t.matrix;
    }
    return nullptr;
  }

  DenseMatrix* find(std::string_view name) {
    for (auto& t : tensors) {
      if (t.name == name) return &t.matrix;
    }
    return nullptr;
  }

  std::optional<std::string> meta(std::string_view key) const {
    for (const auto& [k, v] : metadata) {
      if (k == key) return v;
    }
    return std::nullopt;
  }

  void set_meta(std::string key, std::string value) {
    for (auto& [k, v] : metadata) {
      if (k == key) {
        v = std::move(value);
        return;
      }
    }
    metadata.emplace_back(std::move(key), std::move(value));
  }

  /// Throws ValidationError on empty or duplicate tensor names.
  void validate() const {
    std::set<std::string_view> seen;
    for (const auto& t : tensors) {
      if (t.name.empty()) throw ValidationError("bundle: empty tensor name");
      if (!seen.insert(t.name).second) {
        throw ValidationError("bundle: duplicate tensor name '" + t.name + "'");
      }
    }
  }

  friend bool operator==(const ModelBundle&, const ModelBundle&) = default;
};

namespace iqwt {
inline constexpr char kMagic[4] = {'I', 'Q', 'W', 'T'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;
}  // namespace iqwt

inline Bytes serialize_model(const ModelBundle& bundle) {
  bundle.validate();
  auto checked_u16 = [](std::size_t n, const char* what) {
    if (n > 0xffff) throw ValidationError(std::string(what) + " too long");
    return static_cast<std::uint16_t>(n);
  };
  ByteWriter w;
  w.bytes(std::string_view(iqwt::kMagic, 4));
  w.u32(iqwt::kVersion);
  w.u32(static_cast<std::uint32_t>(bundle.tensors.size()));
  for (const auto& t : bundle.tensors) {
    w.u16(checked_u16(t.name.size(), "tensor name"));
    w.bytes(t.name);
    w.u8(2);
    w.u32(static_cast<std::uint32_t>(t.matrix.rows()));
    w.u32(static_cast<std::uint32_t>(t.matrix.cols()));
    w.u8(iqwt::kDtypeF32);
    for (double v : t.matrix.values()) {
      const auto f = static_cast<float>(v);
      if (!std::isfinite(f)) {
        throw ValidationError("tensor '" + t.name + "' exceeds f32 range");
      }
      w.f32(f);
    }
  }
  w.u16(checked_u16(bundle.metadata.size(), "metadata list"));
  for (const auto& [k, v] : bundle.metadata) {
    w.u16(checked_u16(k.size(), "metadata key"));
    w.bytes(k);
    w.u16(checked_u16(v.size(), "metadata value"));
    w.bytes(v);
  }
  return w.take();
}

inline ModelBundle parse_model(std::span<const std::uint8_t> data,
                               const std::string& origin = "IQWT") {
  ByteReader r(data, origin);
  if (data.size() < 4) throw FormatError(origin + ": file too short for magic");
  if (r.bytes(4) != std::string_view(iqwt::kMagic, 4)) {
    throw FormatError(origin + ": bad magic (expected IQWT)");
  }
  const auto version = r.u32();
  if (version != iqwt::kVersion) {
    throw FormatError(origin + ": unsupported version " +
                      std::to_string(version));
  }
  ModelBundle bundle;
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.bytes(r.u16());
    const auto ndim = r.u8();
    if (ndim != 2) {
      throw FormatError(origin + ": tensor '" + t.name + "' has ndim " +
                        std::to_string(ndim) + " (only 2 supported)");
    }
    const std::size_t rows = r.u32();
    const std::size_t cols = r.u32();
    const auto dtype = r.u8();
    if (dtype != iqwt::kDtypeF32) {
      throw FormatError(origin + ": tensor '" + t.name + "' has dtype " +
                        std::to_string(dtype) + " (only f32 defined)");
    }
    if (r.remaining() / 4 < rows * cols) {
      throw CorruptionError(origin + ": truncated payload in tensor '" +
                            t.name + "'");
    }
    std::vector<double> values(rows * cols);
    for (auto& v : values) {
      v = r.f32();
      if (!std::isfinite(v)) {
        throw CorruptionError(origin + ": non-finite value in tensor '" +
                              t.name + "'");
      }
    }
    t.matrix = DenseMatrix(rows, cols, std::move(values));
    bundle.tensors.push_back(std::move(t));
  }
  const auto meta_count = r.u16();
  for (std::uint16_t i = 0; i < meta_count; ++i) {
    std::string key = r.bytes(r.u16());
    std::string value = r.bytes(r.u16());
    bundle.metadata.emplace_back(std::move(key), std::move(value));
  }
  r.expect_end();
  try {
    bundle.validate();
  } catch (const ValidationError& e) {
    throw FormatError(origin + ": " + e.what());
  }
  return bundle;
}

inline void save_model(const ModelBundle& bundle,
                       const std::filesystem::path& path) {
  write_file(path, serialize_model(bundle));
}

inline ModelBundle load_model(const std::filesystem::path& path) {
  return parse_model(read_file(path), path.string());
}

/// Rounds every value through f32, i.e. what a save/load cycle yields.
inline ModelBundle round_to_f32(ModelBundle bundle) {
  for (auto& t : bundle.tensors) {
    for (auto& v : t.matrix.values()) v = static_cast<float>(v);
  }
  return bundle;
}

}  // namespace iterquant
