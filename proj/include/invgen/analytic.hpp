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

// Closed-form denoisers used to validate the inference algorithms.

#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "invgen/common.hpp"
#include "invgen/concepts.hpp"
#include "invgen/schedule.hpp"

namespace invgen {

/// E[eps | x_t] when x0 ~ Normal(mu, sigma0^2 I):
/// sqrt(1 - abar) (x_t - sqrt(abar) mu) / (abar sigma0^2 + 1 - abar).
inline Image analytic_gaussian_denoiser(const Image& mu, double sigma0,
                                        const Image& xt, int t,
                                        const NoiseSchedule& schedule) {
  if (mu.size() != xt.size()) {
    throw ShapeError("analytic denoiser: mu and x_t differ in size");
  }
  if (sigma0 < 0.0) throw ParameterError("analytic denoiser: sigma0 < 0");
  const double ab = schedule.alpha_bar(t);
  const double denom = ab * sigma0 * sigma0 + 1.0 - ab;
  return std::sqrt(1.0 - ab) * (xt - std::sqrt(ab) * mu) / denom;
}

/// Maps a concept to the Gaussian mean it implies, optionally with the
/// Jacobian d mu / d c (image_dim x concept_dim).
using MeanFunction =
    std::function<void(const Vec<double>& c, Vec<double>& mu, Mat<double>* jac)>;

/// Mean is a radial bump of height `amplitude` and width `sigma` centred at
/// a 2-D coordinate concept, on a constant `background`.
inline MeanFunction bump_mean(ImageShape shape, double amplitude,
                              double sigma, double background = 0.0) {
  return [=](const Vec<double>& c, Vec<double>& mu, Mat<double>* jac) {
    mu.resize(shape.size());
    if (jac) jac->setZero(shape.size(), 2);
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (int y = 0; y < shape.height; ++y) {
      for (int x = 0; x < shape.width; ++x) {
        const double dx = (x + 0.5) / shape.width - c[0];
        const double dy = (y + 0.5) / shape.height - c[1];
        const double b = amplitude * std::exp(-(dx * dx + dy * dy) * inv);
        for (int ch = 0; ch < shape.channels; ++ch) {
          const int p = (y * shape.width + x) * shape.channels + ch;
          mu[p] = background + b;
          if (jac) {
            (*jac)(p, 0) = b * 2.0 * dx * inv;
            (*jac)(p, 1) = b * 2.0 * dy * inv;
          }
        }
      }
    }
  };
}

/// Mean is linear in the concept: mu = sum_i c_i * table.col(i). A one-hot
/// concept therefore selects a column.
inline MeanFunction linear_mean(Mat<double> table) {
  return [table = std::move(table)](const Vec<double>& c, Vec<double>& mu,
                                    Mat<double>* jac) {
    if (c.size() != table.cols()) {
      throw ShapeError("linear mean: concept dimension mismatch");
    }
    mu = table * c;
    if (jac) *jac = table;
  };
}

/// Per-concept pixel mask for oracles whose summands own disjoint regions.
/// Treated as locally constant in the concept (no gradient contribution).
using MaskFunction = std::function<Vec<double>(const Vec<double>& c)>;

/// Mask selecting the pixel stripe owned by the active attribute block of a
/// block-pair concept: block b owns rows [b * H / blocks, (b + 1) * H / blocks).
inline MaskFunction attribute_stripe_mask(ImageShape shape, int blocks) {
  return [=](const Vec<double>& c) {
    int best = 0;
    double best_mass = -1.0;
    for (int b = 0; b < blocks; ++b) {
      const double mass = c[2 * b] + c[2 * b + 1];
      if (mass > best_mass) {
        best_mass = mass;
        best = b;
      }
    }
    Vec<double> m = Vec<double>::Zero(shape.size());
    const int row0 = best * shape.height / blocks;
    const int row1 = (best + 1) * shape.height / blocks;
    const int row_len = shape.width * shape.channels;
    m.segment(row0 * row_len, (row1 - row0) * row_len).setOnes();
    return m;
  };
}

struct OracleCache {
  Mat<double> x, concepts, mu, win, out;
  std::vector<int> t;
  Eigen::Index columns() const { return out.cols(); }
};

/// Model adapter around the analytic denoiser with a concept-dependent
/// mean. Exposes the same batched forward/backward surface as the network
/// so every inference routine runs unchanged against it.
///
/// With `window_radius > 0` each summand is restricted to the
/// neighbourhood of its coordinate, w(c) * analytic(mu(c)), matching the
/// windowed network's composition.
class GaussianOracle {
 public:
  using Scalar = double;
  using Cache = OracleCache;

  GaussianOracle(ImageShape shape, int concept_dim, MeanFunction mean,
                 double sigma0, NoiseSchedule schedule,
                 double window_radius = 0.0)
      : shape_(shape),
        concept_dim_(concept_dim),
        mean_(std::move(mean)),
        sigma0_(sigma0),
        schedule_(std::move(schedule)),
        window_radius_(window_radius) {
    if (sigma0 < 0.0) throw ParameterError("oracle: sigma0 < 0");
    if (window_radius > 0.0 && concept_dim != 2) {
      throw ParameterError("oracle: windowing needs 2-D coordinates");
    }
  }

  /// Restricts every summand to `mask(c)`. Exclusive with windowing.
  GaussianOracle& with_mask(MaskFunction mask) {
    if (window_radius_ > 0.0) {
      throw ParameterError("oracle: mask and window are exclusive");
    }
    mask_ = std::move(mask);
    return *this;
  }

  int image_dim() const { return shape_.size(); }
  int concept_dim() const { return concept_dim_; }
  double sigma0() const { return sigma0_; }
  const NoiseSchedule& schedule() const { return schedule_; }

  Vec<double> mean(const Vec<double>& c) const {
    Vec<double> mu;
    mean_(c, mu, nullptr);
    return mu;
  }

  void forward(const Mat<double>& x, std::span<const int> t,
               const Mat<double>& c, Cache& cache) const {
    const Eigen::Index n = x.cols();
    if (x.rows() != image_dim() || c.rows() != concept_dim_ ||
        c.cols() != n || static_cast<Eigen::Index>(t.size()) != n) {
      throw ShapeError("oracle: batch shape mismatch");
    }
    cache.x = x;
    cache.concepts = c;
    cache.t.assign(t.begin(), t.end());
    cache.mu.resize(image_dim(), n);
    cache.out.resize(image_dim(), n);
    fill_gates(c, cache);
    Vec<double> mu;
    for (Eigen::Index j = 0; j < n; ++j) {
      mean_(c.col(j), mu, nullptr);
      cache.mu.col(j) = mu;
      const double ab = schedule_.alpha_bar(t[j]);
      const double k = std::sqrt(1.0 - ab) / (ab * sigma0_ * sigma0_ + 1.0 - ab);
      cache.out.col(j) = k * (x.col(j) - std::sqrt(ab) * mu);
      if (cache.win.size()) {
        cache.out.col(j) = cache.out.col(j).cwiseProduct(cache.win.col(j));
      }
    }
  }

  /// Same prediction with x_t supplied as its parts sqrt(abar) x0 +
  /// sqrt(1 - abar) eps. Algebraically identical to `forward`, but the
  /// residual against the true noise is exactly zero whenever the mean
  /// matches x0 and sigma0 = 0, with no cancellation error.
  void forward_decomposed(const Mat<double>& x0, const Mat<double>& eps,
                          std::span<const int> t, const Mat<double>& c,
                          Cache& cache) const {
    const Eigen::Index n = x0.cols();
    if (x0.rows() != image_dim() || eps.rows() != image_dim() ||
        eps.cols() != n || c.rows() != concept_dim_ || c.cols() != n ||
        static_cast<Eigen::Index>(t.size()) != n) {
      throw ShapeError("oracle: batch shape mismatch");
    }
    cache.concepts = c;
    cache.t.assign(t.begin(), t.end());
    cache.x.resize(image_dim(), n);
    cache.mu.resize(image_dim(), n);
    cache.out.resize(image_dim(), n);
    fill_gates(c, cache);
    Vec<double> mu;
    for (Eigen::Index j = 0; j < n; ++j) {
      mean_(c.col(j), mu, nullptr);
      cache.mu.col(j) = mu;
      const double ab = schedule_.alpha_bar(t[j]);
      const double sa = std::sqrt(ab), s = std::sqrt(1.0 - ab);
      cache.x.col(j) = sa * x0.col(j) + s * eps.col(j);
      const double v = sigma0_ * sigma0_;
      if (v == 0.0) {
        cache.out.col(j) = (sa / s) * (x0.col(j) - mu) + eps.col(j);
      } else {
        const double k = s / (ab * v + 1.0 - ab);
        cache.out.col(j) = k * (sa * (x0.col(j) - mu) + s * eps.col(j));
      }
      if (cache.win.size()) {
        cache.out.col(j) = cache.out.col(j).cwiseProduct(cache.win.col(j));
      }
    }
  }

  /// Concept gradient of sum_j <d_out_j, out_j>.
  void backward(const Cache& cache, const Mat<double>& d_out, void*,
                Mat<double>* d_concepts) const {
    if (!d_concepts) return;
    const Eigen::Index n = cache.columns();
    d_concepts->resize(concept_dim_, n);
    Vec<double> mu;
    Mat<double> jac;
    for (Eigen::Index j = 0; j < n; ++j) {
      mean_(cache.concepts.col(j), mu, &jac);
      const double ab = schedule_.alpha_bar(cache.t[j]);
      const double k = std::sqrt(1.0 - ab) / (ab * sigma0_ * sigma0_ + 1.0 - ab);
      Vec<double> upstream = d_out.col(j);
      if (cache.win.size()) upstream = upstream.cwiseProduct(cache.win.col(j));
      d_concepts->col(j) = -k * std::sqrt(ab) * (jac.transpose() * upstream);
      if (window_radius_ > 0.0) {
        const Vec<double> raw = k * (cache.x.col(j) - std::sqrt(ab) * mu);
        const double cx = cache.concepts(0, j), cy = cache.concepts(1, j);
        const double inv_r2 = 1.0 / (window_radius_ * window_radius_);
        double gx = 0.0, gy = 0.0;
        for (int p = 0; p < image_dim(); ++p) {
          const auto [px, py] = pixel_centre(p);
          const double dx = px - cx, dy = py - cy;
          const double d2 = dx * dx + dy * dy;
          const double w = cache.win(p, j);
          const double s = d_out(p, j) * raw[p] * w * 4.0 * d2 * inv_r2 * inv_r2;
          gx += s * dx;
          gy += s * dy;
        }
        (*d_concepts)(0, j) += gx;
        (*d_concepts)(1, j) += gy;
      }
    }
  }

  Vec<double> window(double cx, double cy) const {
    Vec<double> w(image_dim());
    const double inv_r2 = 1.0 / (window_radius_ * window_radius_);
    for (int p = 0; p < image_dim(); ++p) {
      const auto [px, py] = pixel_centre(p);
      const double q = ((px - cx) * (px - cx) + (py - cy) * (py - cy)) * inv_r2;
      w[p] = std::exp(-q * q);
    }
    return w;
  }

 private:
  void fill_gates(const Mat<double>& c, Cache& cache) const {
    const Eigen::Index n = c.cols();
    if (window_radius_ > 0.0) {
      cache.win.resize(image_dim(), n);
      for (Eigen::Index j = 0; j < n; ++j) cache.win.col(j) = window(c(0, j), c(1, j));
    } else if (mask_) {
      cache.win.resize(image_dim(), n);
      for (Eigen::Index j = 0; j < n; ++j) cache.win.col(j) = mask_(c.col(j));
    } else {
      cache.win.resize(0, 0);
    }
  }

  std::pair<double, double> pixel_centre(int p) const {
    const int pix = p / shape_.channels;
    const int x = pix % shape_.width, y = pix / shape_.width;
    return {(x + 0.5) / shape_.width, (y + 0.5) / shape_.height};
  }

  ImageShape shape_;
  int concept_dim_;
  MeanFunction mean_;
  double sigma0_;
  NoiseSchedule schedule_;
  double window_radius_;
  MaskFunction mask_;
};

}  // namespace invgen
