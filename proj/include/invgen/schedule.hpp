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

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "invgen/common.hpp"

namespace invgen {

/// Forward diffusion schedule over T discrete steps.
///
/// Timesteps are 1-based at every public boundary (t in {1..T}); the
/// tables are stored 0-based, so beta(t) reads betas_[t - 1].
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  int step_count() const { return static_cast<int>(betas_.size()); }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }

  double beta(int t) const { return betas_.at(index(t)); }
  double alpha(int t) const { return alphas_.at(index(t)); }
  double alpha_bar(int t) const { return alpha_bars_.at(index(t)); }

  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

  bool valid_timestep(int t) const { return t >= 1 && t <= step_count(); }

  friend NoiseSchedule make_linear_schedule(int, double, double);

 private:
  std::size_t index(int t) const {
    if (!valid_timestep(t)) {
      throw ParameterError("timestep " + std::to_string(t) +
                           " outside [1, " + std::to_string(step_count()) +
                           "]");
    }
    return static_cast<std::size_t>(t - 1);
  }

  double beta_start_ = 0.0;
  double beta_end_ = 0.0;
  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
};

/// Linear beta schedule from beta_start to beta_end inclusive.
inline NoiseSchedule make_linear_schedule(int step_count, double beta_start,
                                          double beta_end) {
  if (step_count < 1) {
    throw ParameterError("step_count must be >= 1, got " +
                         std::to_string(step_count));
  }
  if (!(beta_start > 0.0) || !(beta_start < 1.0)) {
    throw ParameterError("beta_start must lie in (0, 1)");
  }
  if (!(beta_end >= beta_start) || !(beta_end < 1.0)) {
    throw ParameterError("beta_end must lie in [beta_start, 1)");
  }
  NoiseSchedule s;
  s.beta_start_ = beta_start;
  s.beta_end_ = beta_end;
  s.betas_.resize(step_count);
  s.alphas_.resize(step_count);
  s.alpha_bars_.resize(step_count);
  double running = 1.0;
  for (int i = 0; i < step_count; ++i) {
    const double frac =
        step_count == 1 ? 0.0 : static_cast<double>(i) / (step_count - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    s.betas_[i] = b;
    s.alphas_[i] = 1.0 - b;
    const double previous = running;
    running *= 1.0 - b;
    if (!(running < previous) || !(running >= std::numeric_limits<double>::min())) {
      throw ParameterError("alpha_bar stops decreasing at t=" + std::to_string(i + 1) +
                           " (underflow); shorten the schedule or lower beta_end");
    }
    s.alpha_bars_[i] = running;
  }
  return s;
}

inline NoiseSchedule make_default_schedule() {
  return make_linear_schedule(1000, 1e-4, 2e-2);
}

struct NoiseSample {
  Image epsilon;
  int timestep = 1;
};

/// x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.
template <typename Derived>
Image noise_image(const Eigen::MatrixBase<Derived>& x0,
                  const NoiseSample& sample, const NoiseSchedule& schedule) {
  if (x0.size() != sample.epsilon.size()) {
    throw ShapeError("noise_image: x0 has " + std::to_string(x0.size()) +
                     " entries, epsilon has " +
                     std::to_string(sample.epsilon.size()));
  }
  if (!x0.allFinite()) throw NumericError("noise_image: x0 not finite");
  const double ab = schedule.alpha_bar(sample.timestep);
  return std::sqrt(ab) * x0.template cast<double>() +
         std::sqrt(1.0 - ab) * sample.epsilon;
}

/// Inclusive timestep window used when drawing t during inference.
struct TimestepRange {
  int lo = 1;
  int hi = 0;  // 0 means "up to T"

  int resolved_hi(const NoiseSchedule& s) const {
    return hi <= 0 ? s.step_count() : hi;
  }
  void validate(const NoiseSchedule& s) const {
    const int h = resolved_hi(s);
    if (lo < 1 || h > s.step_count() || lo > h) {
      throw ParameterError("timestep range [" + std::to_string(lo) + ", " +
                           std::to_string(h) + "] invalid for T=" +
                           std::to_string(s.step_count()));
    }
  }
  int draw(const NoiseSchedule& s, Rng& rng) const {
    std::uniform_int_distribution<int> dist(lo, resolved_hi(s));
    return dist(rng);
  }
};

}  // namespace invgen
