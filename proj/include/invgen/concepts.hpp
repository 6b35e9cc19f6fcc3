// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <string>
#include <string_view>
#include <vector>

#include "invgen/common.hpp"

namespace invgen {

enum class ConceptKind { kCoordinate, kOneHotLabel, kRelaxedLabel, kEmbedding };

inline std::string_view to_string(ConceptKind k) {
  switch (k) {
    case ConceptKind::kCoordinate: return "coordinate";
    case ConceptKind::kOneHotLabel: return "one-hot-label";
    case ConceptKind::kRelaxedLabel: return "relaxed-label";
    case ConceptKind::kEmbedding: return "embedding";
  }
  return "?";
}

inline ConceptKind concept_kind_from_string(std::string_view s) {
  if (s == "coordinate") return ConceptKind::kCoordinate;
  if (s == "one-hot-label") return ConceptKind::kOneHotLabel;
  if (s == "relaxed-label") return ConceptKind::kRelaxedLabel;
  if (s == "embedding") return ConceptKind::kEmbedding;
  throw ParameterError("unknown concept kind '" + std::string(s) + "'");
}

/// A single conditioning vector c^k with per-entry domain bounds.
struct ConceptVector {
  Vec<double> values;
  ConceptKind kind = ConceptKind::kCoordinate;
  Vec<double> lower;
  Vec<double> upper;

  int dim() const { return static_cast<int>(values.size()); }

  static ConceptVector coordinate(double x, double y, double lo = 0.0,
                                  double hi = 1.0) {
    ConceptVector c;
    c.values = Vec<double>(2);
    c.values << x, y;
    c.kind = ConceptKind::kCoordinate;
    c.lower = Vec<double>::Constant(2, lo);
    c.upper = Vec<double>::Constant(2, hi);
    return c;
  }

  /// Block-one-hot encoding of binary attribute `block` out of `blocks`:
  /// value 1 is [1, 0], value 0 is [0, 1].
  static ConceptVector binary_attribute(int block, int blocks, int value) {
    return relaxed_attribute(block, blocks, value ? 1.0 : 0.0,
                             ConceptKind::kOneHotLabel);
  }

  /// Pseudo one-hot [.., l, 1 - l, ..] at `block`.
  static ConceptVector relaxed_attribute(
      int block, int blocks, double l,
      ConceptKind kind = ConceptKind::kRelaxedLabel) {
    ConceptVector c;
    c.values = Vec<double>::Zero(2 * blocks);
    c.values[2 * block] = l;
    c.values[2 * block + 1] = 1.0 - l;
    c.kind = kind;
    c.lower = Vec<double>::Zero(2 * blocks);
    c.upper = Vec<double>::Ones(2 * blocks);
    return c;
  }

  static ConceptVector one_hot(int index, int size,
                               ConceptKind kind = ConceptKind::kEmbedding) {
    ConceptVector c;
    c.values = Vec<double>::Zero(size);
    c.values[index] = 1.0;
    c.kind = kind;
    c.lower = Vec<double>::Zero(size);
    c.upper = Vec<double>::Ones(size);
    return c;
  }

  void project() {
    values = values.cwiseMax(lower).cwiseMin(upper);
  }

  bool within_bounds() const {
    return (values.array() >= lower.array()).all() &&
           (values.array() <= upper.array()).all();
  }

  void validate() const {
    if (values.size() == 0) throw ShapeError("concept has zero dimension");
    if (lower.size() != values.size() || upper.size() != values.size()) {
      throw ShapeError("concept bounds do not match its dimension");
    }
    if (!values.allFinite()) throw NumericError("concept not finite");
    switch (kind) {
      case ConceptKind::kOneHotLabel: {
        if (values.size() % 2 != 0) {
          throw ParameterError("one-hot label must have paired blocks");
        }
        int hot_blocks = 0;
        for (int b = 0; b < values.size() / 2; ++b) {
          const double a = values[2 * b], z = values[2 * b + 1];
          const bool zero = a == 0.0 && z == 0.0;
          const bool hot = (a == 1.0 && z == 0.0) || (a == 0.0 && z == 1.0);
          if (!zero && !hot) throw ParameterError("one-hot label block invalid");
          hot_blocks += hot ? 1 : 0;
        }
        if (hot_blocks != 1) {
          throw ParameterError("one-hot label must activate exactly one block");
        }
        break;
      }
      case ConceptKind::kRelaxedLabel:
        if ((values.array() < 0.0).any() || (values.array() > 1.0).any()) {
          throw ParameterError("relaxed label entries must lie in [0, 1]");
        }
        break;
      case ConceptKind::kCoordinate:
        if (!within_bounds()) {
          throw ParameterError("coordinate concept outside declared bounds");
        }
        break;
      case ConceptKind::kEmbedding:
        break;
    }
  }

  bool operator==(const ConceptVector& o) const {
    return kind == o.kind && values == o.values && lower == o.lower &&
           upper == o.upper;
  }
};

/// Ordered list of K >= 1 concepts that share kind and dimension.
struct ConceptSet {
  std::vector<ConceptVector> concepts;

  ConceptSet() = default;
  explicit ConceptSet(std::vector<ConceptVector> c) : concepts(std::move(c)) {}

  int size() const { return static_cast<int>(concepts.size()); }
  bool empty() const { return concepts.empty(); }
  const ConceptVector& operator[](int k) const { return concepts.at(k); }
  ConceptVector& operator[](int k) { return concepts.at(k); }

  int dim() const { return concepts.empty() ? 0 : concepts.front().dim(); }

  void validate() const {
    if (concepts.empty()) throw ParameterError("concept set is empty");
    for (const auto& c : concepts) {
      c.validate();
      if (c.kind != concepts.front().kind ||
          c.dim() != concepts.front().dim()) {
        throw ShapeError("concept set members differ in kind or dimension");
      }
    }
  }

  /// Dimension-major matrix with one column per concept.
  Mat<double> as_columns() const {
    Mat<double> m(dim(), size());
    for (int k = 0; k < size(); ++k) m.col(k) = concepts[k].values;
    return m;
  }

  ConceptSet concat(const ConceptSet& other) const {
    ConceptSet out = *this;
    out.concepts.insert(out.concepts.end(), other.concepts.begin(),
                        other.concepts.end());
    return out;
  }

  bool operator==(const ConceptSet& o) const { return concepts == o.concepts; }
};

}  // namespace invgen
