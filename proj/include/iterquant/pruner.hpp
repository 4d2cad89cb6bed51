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
#include <functional>
#include <map>
#include <numeric>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include "iterquant/bit_vector.hpp"
#include "iterquant/dense_matrix.hpp"
#include "iterquant/model_io.hpp"

namespace iterquant {

enum class PruneScope { per_tensor, global };

inline std::string_view to_string(PruneScope s) {
  return s == PruneScope::global ? "global" : "per-tensor";
}

inline PruneScope parse_scope(std::string_view s) {
  if (s == "per-tensor" || s == "per_tensor") return PruneScope::per_tensor;
  if (s == "global") return PruneScope::global;
  throw ValidationError("unknown prune scope '" + std::string(s) +
                        "' (expected per-tensor or global)");
}

/// Survivor bitset for one tensor (1 = keep).
struct TensorMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  BitVector bits;

  std::size_t survivors() const { return bits.count(); }
  double achieved_rate() const {
    const std::size_t n = rows * cols;
    return n == 0 ? 0.0
                  : 1.0 - static_cast<double>(survivors()) /
                              static_cast<double>(n);
  }
  friend bool operator==(const TensorMask&, const TensorMask&) = default;
};

/// Masks keyed by tensor name. Tensors without an entry are unpruned.
struct PruneMask {
  double rate = 0.0;
  PruneScope scope = PruneScope::per_tensor;
  std::map<std::string, TensorMask, std::less<>> tensors;

  const TensorMask* find(std::string_view name) const {
    auto it = tensors.find(name);
    return it == tensors.end() ? nullptr : &it->second;
  }
  const BitVector* bits(std::string_view name) const {
    const auto* m = find(name);
    return m ? &m->bits : nullptr;
  }
  friend bool operator==(const PruneMask&, const PruneMask&) = default;
};

using TensorFilter = std::function<bool(std::string_view)>;

inline TensorFilter match_all() {
  return [](std::string_view) { return true; };
}

/// ECMAScript regex over the full tensor name; empty pattern matches all.
inline TensorFilter regex_filter(const std::string& pattern) {
  if (pattern.empty()) return match_all();
  try {
    return [re = std::regex(pattern)](std::string_view name) {
      return std::regex_match(name.begin(), name.end(), re);
    };
  } catch (const std::regex_error& e) {
    throw ValidationError("invalid tensor filter '" + pattern +
                          "': " + e.what());
  }
}

/// Number of weights pruned out of n at `rate`: ceil(rate * n), guarded
/// against products like 0.8 * 10000 landing a hair above an integer.
inline std::size_t pruned_count(double rate, std::size_t n) {
  const double exact = rate * static_cast<double>(n);
  const double nearest = std::round(exact);
  const double target =
      std::abs(exact - nearest) < 1e-9 * std::max(1.0, exact) ? nearest
                                                               : std::ceil(exact);
  return std::min(n, static_cast<std::size_t>(target));
}

/// Prunes the smallest-magnitude fraction of weights among tensors accepted
/// by `filter`. Ties in |w| are pruned in index order (tensor order first
/// under global scope) so the mask is deterministic.
inline PruneMask magnitude_prune(const ModelBundle& bundle, double rate,
                                 PruneScope scope = PruneScope::per_tensor,
                                 const TensorFilter& filter = match_all()) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ValidationError("prune rate must be in [0, 1), got " +
                          std::to_string(rate));
  }
  PruneMask out;
  out.rate = rate;
  out.scope = scope;

  struct Candidate {
    std::size_t tensor;
    std::size_t index;
  };
  std::vector<const NamedTensor*> selected;
  for (const auto& t : bundle.tensors) {
    if (filter(t.name)) selected.push_back(&t);
  }
  for (const auto* t : selected) {
    out.tensors[t->name] =
        TensorMask{t->matrix.rows(), t->matrix.cols(),
                   BitVector(t->matrix.size(), true)};
  }

  auto prune_group = [&](std::vector<Candidate> group) {
    const std::size_t drop = pruned_count(rate, group.size());
    if (drop == 0) return;
    auto magnitude = [&](const Candidate& c) {
      return std::abs(selected[c.tensor]->matrix.values()[c.index]);
    };
    auto before = [&](const Candidate& a, const Candidate& b) {
      const double ma = magnitude(a);
      const double mb = magnitude(b);
      if (ma != mb) return ma < mb;
      if (a.tensor != b.tensor) return a.tensor < b.tensor;
      return a.index < b.index;
    };
    std::nth_element(group.begin(), group.begin() + (drop - 1), group.end(),
                     before);
    for (std::size_t i = 0; i < drop; ++i) {
      const auto& c = group[i];
      out.tensors[selected[c.tensor]->name].bits.set(c.index, false);
    }
  };

  if (scope == PruneScope::per_tensor) {
    for (std::size_t ti = 0; ti < selected.size(); ++ti) {
      std::vector<Candidate> group(selected[ti]->matrix.size());
      for (std::size_t i = 0; i < group.size(); ++i) group[i] = {ti, i};
      prune_group(std::move(group));
    }
  } else {
    std::vector<Candidate> group;
    for (std::size_t ti = 0; ti < selected.size(); ++ti) {
      for (std::size_t i = 0; i < selected[ti]->matrix.size(); ++i) {
        group.push_back({ti, i});
      }
    }
    prune_group(std::move(group));
  }
  return out;
}

inline DenseMatrix apply_mask(const DenseMatrix& m, const TensorMask& mask) {
  if (m.rows() != mask.rows || m.cols() != mask.cols) {
    throw DimensionError("apply_mask: matrix is " + std::to_string(m.rows()) +
                         "x" + std::to_string(m.cols()) + ", mask is " +
                         std::to_string(mask.rows) + "x" +
                         std::to_string(mask.cols));
  }
  DenseMatrix out = m;
  auto v = out.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!mask.bits.test(i)) v[i] = 0.0;
  }
  return out;
}

inline ModelBundle apply_mask(ModelBundle bundle, const PruneMask& mask) {
  for (auto& t : bundle.tensors) {
    if (const auto* m = mask.find(t.name)) t.matrix = apply_mask(t.matrix, *m);
  }
  return bundle;
}

/// Mask files reuse the IQWT container: one 0/1 tensor per pruned tensor.
inline ModelBundle mask_to_bundle(const PruneMask& mask) {
  ModelBundle b;
  for (const auto& [name, m] : mask.tensors) {
    std::vector<double> v(m.rows * m.cols);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = m.bits.test(i) ? 1 : 0;
    b.tensors.push_back({name, DenseMatrix(m.rows, m.cols, std::move(v))});
  }
  b.set_meta("kind", "prune-mask");
  b.set_meta("rate", std::to_string(mask.rate));
  b.set_meta("scope", std::string(to_string(mask.scope)));
  return b;
}

inline PruneMask mask_from_bundle(const ModelBundle& b) {
  if (b.meta("kind") != "prune-mask") {
    throw FormatError("mask file: metadata kind is not prune-mask");
  }
  PruneMask mask;
  if (auto r = b.meta("rate")) mask.rate = std::stod(*r);
  if (auto s = b.meta("scope")) mask.scope = parse_scope(*s);
  for (const auto& t : b.tensors) {
    TensorMask m{t.matrix.rows(), t.matrix.cols(), BitVector(t.matrix.size())};
    for (std::size_t i = 0; i < t.matrix.size(); ++i) {
      const double v = t.matrix.values()[i];
      if (v != 0.0 && v != 1.0) {
        throw FormatError("mask file: tensor '" + t.name +
                          "' holds a value other than 0/1");
      }
      m.bits.set(i, v == 1.0);
    }
    mask.tensors[t.name] = std::move(m);
  }
  return mask;
}

}  // namespace iterquant
