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

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "invgen/common.hpp"

namespace invgen {

struct Assignment {
  std::vector<int> row_to_col;  // -1 when a row is unmatched
  double cost = 0.0;
};

/// Minimum-cost assignment of min(n, m) pairs. Rectangular inputs are padded
/// to square with (max finite cost + 1), so padding never beats a real pair.
inline Assignment hungarian_match(const Mat<double>& cost) {
  const int n = static_cast<int>(cost.rows()), m = static_cast<int>(cost.cols());
  if (n < 1 || m < 1) throw ParameterError("hungarian_match: empty cost matrix");
  if (!cost.allFinite()) throw NumericError("hungarian_match: non-finite cost");
  const int sz = std::max(n, m);
  const double pad = cost.maxCoeff() + 1.0;
  Mat<double> a = Mat<double>::Constant(sz, sz, pad);
  a.topLeftCorner(n, m) = cost;

  // Shortest augmenting path with potentials, 1-based with a virtual column 0.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(sz + 1, 0.0), v(sz + 1, 0.0);
  std::vector<int> p(sz + 1, 0), way(sz + 1, 0);
  for (int i = 1; i <= sz; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(sz + 1, inf);
    std::vector<bool> used(sz + 1, false);
    do {
      used[j0] = true;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= sz; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= sz; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Assignment out;
  out.row_to_col.assign(n, -1);
  for (int j = 1; j <= sz; ++j) {
    const int i = p[j] - 1, c = j - 1;
    if (i < n && c < m) {
      out.row_to_col[i] = c;
      out.cost += cost(i, c);
    }
  }
  return out;
}

using Point2 = std::array<double, 2>;

/// Per-pair coordinate error: mean over the two axes of the squared error.
inline double pair_mse(const Point2& a, const Point2& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1];
  return (dx * dx + dy * dy) / 2.0;
}

inline constexpr double kDiscoveryThreshold = 0.002;

struct SceneMetrics {
  int scene_id = 0;
  int objects = 0;     // ground-truth count
  int predicted = 0;
  int matched = 0;
  int discovered = 0;
  double mse_sum = 0.0;  // matched MSEs plus penalties for unmatched truth
};

struct MetricsReport {
  double perception_rate = 0.0;
  double estimation_error = 0.0;
  int objects = 0;
  int discovered = 0;
  std::vector<SceneMetrics> scenes;
  std::optional<double> multi_label_accuracy;
};

struct PerceptionOptions {
  double threshold = kDiscoveryThreshold;
  Point2 sentinel{0.0, 0.0};  // unmatched truth is charged its MSE to this point
};

/// Hungarian-matches predictions to truth per scene with pair-MSE costs.
inline MetricsReport perception_metrics(
    const std::vector<std::vector<Point2>>& predicted,
    const std::vector<std::vector<Point2>>& truth,
    const PerceptionOptions& opt = {}) {
  if (truth.empty()) throw ParameterError("perception_metrics: no scenes");
  if (predicted.size() != truth.size()) {
    throw ParameterError("perception_metrics: " + std::to_string(predicted.size()) +
                         " predicted scenes vs " + std::to_string(truth.size()) +
                         " ground-truth scenes");
  }
  MetricsReport rep;
  double mse_total = 0.0;
  for (std::size_t s = 0; s < truth.size(); ++s) {
    const auto& pr = predicted[s];
    const auto& gt = truth[s];
    SceneMetrics sm;
    sm.scene_id = static_cast<int>(s);
    sm.objects = static_cast<int>(gt.size());
    sm.predicted = static_cast<int>(pr.size());
    std::vector<bool> gt_matched(gt.size(), false);
    if (!pr.empty() && !gt.empty()) {
      Mat<double> cost(pr.size(), gt.size());
      for (std::size_t i = 0; i < pr.size(); ++i) {
        for (std::size_t j = 0; j < gt.size(); ++j) cost(i, j) = pair_mse(pr[i], gt[j]);
      }
      const auto a = hungarian_match(cost);
      for (std::size_t i = 0; i < pr.size(); ++i) {
        const int j = a.row_to_col[i];
        if (j < 0) continue;
        gt_matched[j] = true;
        ++sm.matched;
        const double e = cost(i, j);
        sm.mse_sum += e;
        if (e < opt.threshold) ++sm.discovered;
      }
    }
    for (std::size_t j = 0; j < gt.size(); ++j) {
      if (!gt_matched[j]) sm.mse_sum += pair_mse(gt[j], opt.sentinel);
    }
    rep.objects += sm.objects;
    rep.discovered += sm.discovered;
    mse_total += sm.mse_sum;
    rep.scenes.push_back(sm);
  }
  rep.perception_rate =
      rep.objects ? static_cast<double>(rep.discovered) / rep.objects : 0.0;
  rep.estimation_error = rep.objects ? mse_total / rep.objects : 0.0;
  return rep;
}

/// Fraction of scenes whose whole bit vector is predicted exactly.
inline double multi_label_accuracy(const std::vector<std::vector<int>>& predicted,
                                   const std::vector<std::vector<int>>& truth) {
  if (predicted.size() != truth.size()) {
    throw ParameterError("multi_label_accuracy: scene counts differ");
  }
  if (truth.empty()) throw ParameterError("multi_label_accuracy: no scenes");
  int exact = 0;
  for (std::size_t s = 0; s < truth.size(); ++s) {
    if (predicted[s].size() != truth[s].size()) {
      throw ParameterError("multi_label_accuracy: scene " + std::to_string(s) +
                           " attribute counts differ");
    }
    exact += predicted[s] == truth[s] ? 1 : 0;
  }
  return static_cast<double>(exact) / static_cast<double>(truth.size());
}

/// `scene_id,objects,predicted,matched,discovered,mse` rows plus a summary.
inline void write_metrics_csv(std::ostream& os, const MetricsReport& rep) {
  os << "scene_id,objects,predicted,matched,discovered,mse\n";
  os.precision(17);
  for (const auto& s : rep.scenes) {
    os << s.scene_id << ',' << s.objects << ',' << s.predicted << ','
       << s.matched << ',' << s.discovered << ','
       << (s.objects ? s.mse_sum / s.objects : 0.0) << '\n';
  }
  os << "summary," << rep.objects << ",,," << rep.discovered << ','
     << rep.estimation_error << '\n';
  os << "# perception_rate=" << rep.perception_rate;
  if (rep.multi_label_accuracy) {
    os << " multi_label_accuracy=" << *rep.multi_label_accuracy;
  }
  os << '\n';
}

}  // namespace invgen
