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

// Conditional denoiser eps_theta(x_t, t | c).
//
// A two-layer pixel-space network with a feature-wise affine modulation
// driven by the (time, concept) embedding:
//
//   e   = [time_embedding(t); concept_embedding(c)]
//   w   = window(c)                         (all ones unless windowed)
//   h1  = silu(W1x (x * w) + W1e e + b1)
//   m   = h1 * (1 + gamma(e)) + beta(e)      [gamma; beta] = Wf e + bf
//   h2  = silu(W2h m + W2e e + b2)
//   out = (W3 h2 + b3) * w
//
// For coordinate concepts the window is a flat-topped bump centred on the
// coordinate, exp(-(d^2 / r^2)^2), so each summand of a composed
// prediction reads and writes only the neighbourhood of its own object.
// Samples are stored column-wise; all batched operations take a D x N
// image matrix, N timesteps and a concept_dim x N concept matrix.

#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "invgen/common.hpp"
#include "invgen/concepts.hpp"
#include "invgen/schedule.hpp"

namespace invgen {

struct Architecture {
  ImageShape image;
  int concept_dim = 2;
  ConceptKind concept_kind = ConceptKind::kCoordinate;
  int time_embed_dim = 16;
  int fourier_bands = 4;
  int hidden = 256;
  double window_radius = 0.12;
  int step_count = 1000;

  bool coordinate() const { return concept_kind == ConceptKind::kCoordinate; }
  bool windowed() const { return coordinate() && window_radius > 0.0; }

  int concept_embed_dim() const {
    return coordinate() ? concept_dim * (1 + 2 * fourier_bands) : concept_dim;
  }
  int embed_dim() const { return time_embed_dim + concept_embed_dim(); }

  void validate() const {
    if (image.height < 1 || image.width < 1 || image.channels < 1) {
      throw ParameterError("architecture: image dimensions must be >= 1");
    }
    if (concept_dim < 1) throw ParameterError("architecture: concept_dim < 1");
    if (coordinate() && concept_dim != 2) {
      throw ParameterError("architecture: coordinate concepts are 2-D");
    }
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0) {
      throw ParameterError("architecture: time_embed_dim must be even >= 2");
    }
    if (hidden < 1) throw ParameterError("architecture: hidden < 1");
    if (fourier_bands < 0) throw ParameterError("architecture: bands < 0");
    if (step_count < 1) throw ParameterError("architecture: step_count < 1");
  }

  bool operator==(const Architecture&) const = default;
};

/// Weights of the conditional network.
template <typename S>
struct DenoiserParams {
  Architecture arch;
  Mat<S> w1x, w1e;
  Vec<S> b1;
  Mat<S> wf;
  Vec<S> bf;
  Mat<S> w2h, w2e;
  Vec<S> b2;
  Mat<S> w3;
  Vec<S> b3;

  static constexpr std::array<const char*, 10> kBlockNames = {
      "w1x", "w1e", "b1", "wf", "bf", "w2h", "w2e", "b2", "w3", "b3"};

  /// Visits every parameter block as (name, dense storage) in a fixed order.
  template <typename F>
  void for_each_block(F&& f) {
    f("w1x", w1x); f("w1e", w1e); f("b1", b1); f("wf", wf); f("bf", bf);
    f("w2h", w2h); f("w2e", w2e); f("b2", b2); f("w3", w3); f("b3", b3);
  }
  template <typename F>
  void for_each_block(F&& f) const {
    f("w1x", w1x); f("w1e", w1e); f("b1", b1); f("wf", wf); f("bf", bf);
    f("w2h", w2h); f("w2e", w2e); f("b2", b2); f("w3", w3); f("b3", b3);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_block([&](const char*, const auto& m) { n += m.size(); });
    return n;
  }

  /// Zero-valued parameters with the architecture's shapes.
  static DenoiserParams zeros(const Architecture& a) {
    a.validate();
    const int d = a.image.size(), e = a.embed_dim(), h = a.hidden;
    DenoiserParams p;
    p.arch = a;
    p.w1x = Mat<S>::Zero(h, d);
    p.w1e = Mat<S>::Zero(h, e);
    p.b1 = Vec<S>::Zero(h);
    p.wf = Mat<S>::Zero(2 * h, e);
    p.bf = Vec<S>::Zero(2 * h);
    p.w2h = Mat<S>::Zero(h, h);
    p.w2e = Mat<S>::Zero(h, e);
    p.b2 = Vec<S>::Zero(h);
    p.w3 = Mat<S>::Zero(d, h);
    p.b3 = Vec<S>::Zero(d);
    return p;
  }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every layer except the
  /// modulation, which starts at zero (identity modulation).
  static DenoiserParams initialize(const Architecture& a, std::uint64_t seed) {
    DenoiserParams p = zeros(a);
    Rng rng(seed);
    auto fill = [&](auto& m, int fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = S(u(rng));
    };
    const int d = a.image.size(), e = a.embed_dim(), h = a.hidden;
    fill(p.w1x, d + e);
    fill(p.w1e, d + e);
    fill(p.b1, d + e);
    fill(p.w2h, h + e);
    fill(p.w2e, h + e);
    fill(p.b2, h + e);
    fill(p.w3, h);
    fill(p.b3, h);
    return p;
  }

  template <typename T>
  DenoiserParams<T> cast() const {
    DenoiserParams<T> out;
    out.arch = arch;
    out.w1x = w1x.template cast<T>(); out.w1e = w1e.template cast<T>();
    out.b1 = b1.template cast<T>(); out.wf = wf.template cast<T>();
    out.bf = bf.template cast<T>(); out.w2h = w2h.template cast<T>();
    out.w2e = w2e.template cast<T>(); out.b2 = b2.template cast<T>();
    out.w3 = w3.template cast<T>(); out.b3 = b3.template cast<T>();
    return out;
  }

  bool all_finite() const {
    bool ok = true;
    for_each_block([&](const char*, const auto& m) { ok = ok && m.allFinite(); });
    return ok;
  }

  void set_zero() {
    for_each_block([](const char*, auto& m) { m.setZero(); });
  }

  /// Checks that every block has the shape its architecture implies.
  void validate() const {
    const auto ref = zeros(arch);
    bool ok = true;
    auto it = 0;
    std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
    ref.for_each_block([&](const char*, const auto& m) {
      shapes.emplace_back(m.rows(), m.cols());
    });
    for_each_block([&](const char*, const auto& m) {
      ok = ok && m.rows() == shapes[it].first && m.cols() == shapes[it].second;
      ++it;
    });
    if (!ok) throw ShapeError("parameter shapes do not match architecture");
    if (!all_finite()) throw NumericError("parameters are not finite");
  }

  bool operator==(const DenoiserParams& o) const {
    bool same = arch == o.arch;
    std::vector<const S*> mine, theirs;
    std::vector<Eigen::Index> sizes;
    for_each_block([&](const char*, const auto& m) {
      mine.push_back(m.data());
      sizes.push_back(m.size());
    });
    o.for_each_block([&](const char*, const auto& m) {
      theirs.push_back(m.data());
    });
    for (std::size_t b = 0; same && b < mine.size(); ++b) {
      for (Eigen::Index i = 0; same && i < sizes[b]; ++i) {
        same = mine[b][i] == theirs[b][i];
      }
    }
    return same;
  }
};

namespace detail {

template <typename S>
S silu(S a) {
  return a / (S(1) + std::exp(-a));
}

template <typename S>
S silu_grad(S a) {
  const S s = S(1) / (S(1) + std::exp(-a));
  return s * (S(1) + a * (S(1) - s));
}

}  // namespace detail

/// Intermediate activations retained for the backward pass.
template <typename S>
struct MlpCache {
  Mat<S> x, concepts, win, xw, emb, a1, h1, g, m, a2, h2, o;
  std::vector<int> t;
  Mat<S> out;
  Eigen::Index columns() const { return out.cols(); }
};

template <typename S>
class MlpDenoiser {
 public:
  using Scalar = S;
  using Cache = MlpCache<S>;
  using Params = DenoiserParams<S>;

  MlpDenoiser() = default;
  explicit MlpDenoiser(Params params) : params_(std::move(params)) {
    params_.validate();
    precompute_pixel_centres();
  }

  const Params& params() const { return params_; }
  const Architecture& arch() const { return params_.arch; }
  int image_dim() const { return params_.arch.image.size(); }
  int concept_dim() const { return params_.arch.concept_dim; }

  Vec<S> time_embedding(int t) const {
    const auto& a = params_.arch;
    const int half = a.time_embed_dim / 2;
    Vec<S> e(a.time_embed_dim);
    const double phase = 1000.0 * static_cast<double>(t) / a.step_count;
    for (int i = 0; i < half; ++i) {
      const double freq = std::pow(1000.0, -static_cast<double>(i) / half);
      e[i] = S(std::sin(phase * freq));
      e[half + i] = S(std::cos(phase * freq));
    }
    return e;
  }

  /// Writes the concept embedding into `out` and, when `jac` is non-null,
  /// its Jacobian (concept_embed_dim x concept_dim).
  void concept_embedding(const Eigen::Ref<const Vec<S>>& c,
                         Eigen::Ref<Vec<S>> out, Mat<S>* jac) const {
    const auto& a = params_.arch;
    if (!a.coordinate()) {
      out = c;
      if (jac) *jac = Mat<S>::Identity(a.concept_dim, a.concept_dim);
      return;
    }
    const int bands = a.fourier_bands;
    if (jac) jac->setZero(a.concept_embed_dim(), 2);
    out[0] = c[0];
    out[1] = c[1];
    if (jac) {
      (*jac)(0, 0) = S(1);
      (*jac)(1, 1) = S(1);
    }
    for (int b = 0; b < bands; ++b) {
      const S f = S(M_PI * std::ldexp(1.0, b));
      for (int j = 0; j < 2; ++j) {
        const S arg = f * c[j];
        const int si = 2 + 2 * b + j;
        const int ci = 2 + 2 * bands + 2 * b + j;
        out[si] = std::sin(arg);
        out[ci] = std::cos(arg);
        if (jac) {
          (*jac)(si, j) = f * std::cos(arg);
          (*jac)(ci, j) = -f * std::sin(arg);
        }
      }
    }
  }

  /// Batched forward pass. `x` is D x N, `c` is concept_dim x N.
  void forward(const Mat<S>& x, std::span<const int> t, const Mat<S>& c,
               Cache& cache) const {
    const auto& a = params_.arch;
    const Eigen::Index n = x.cols();
    if (x.rows() != image_dim()) {
      throw ShapeError("denoiser: image has " + std::to_string(x.rows()) +
                       " rows, expected " + std::to_string(image_dim()));
    }
    if (c.rows() != a.concept_dim || c.cols() != n ||
        static_cast<Eigen::Index>(t.size()) != n) {
      throw ShapeError("denoiser: concept/timestep batch does not match");
    }
    if (!x.allFinite() || !c.allFinite()) {
      throw NumericError("denoiser: non-finite input");
    }
    for (int ti : t) {
      if (ti < 1 || ti > a.step_count) {
        throw ParameterError("denoiser: timestep " + std::to_string(ti) +
                             " outside [1, " + std::to_string(a.step_count) +
                             "]");
      }
    }
    const int te = a.time_embed_dim;
    cache.x = x;
    cache.concepts = c;
    cache.t.assign(t.begin(), t.end());
    cache.emb.resize(a.embed_dim(), n);
    for (Eigen::Index j = 0; j < n; ++j) {
      cache.emb.col(j).head(te) = time_embedding(t[j]);
      concept_embedding(c.col(j), cache.emb.col(j).tail(a.concept_embed_dim()),
                        nullptr);
    }
    if (a.windowed()) {
      cache.win.resize(image_dim(), n);
      for (Eigen::Index j = 0; j < n; ++j) {
        cache.win.col(j) = window(c(0, j), c(1, j));
      }
      cache.xw = x.cwiseProduct(cache.win);
    } else {
      cache.win.resize(0, 0);
      cache.xw = x;
    }
    const int h = a.hidden;
    cache.a1.noalias() = params_.w1x * cache.xw;
    cache.a1.noalias() += params_.w1e * cache.emb;
    cache.a1.colwise() += params_.b1;
    cache.h1 = cache.a1.unaryExpr([](S v) { return detail::silu(v); });
    cache.g.noalias() = params_.wf * cache.emb;
    cache.g.colwise() += params_.bf;
    // g holds [gamma; beta] stacked, 2h x n
    cache.m = cache.h1.cwiseProduct(
                  (cache.g.topRows(h).array() + S(1)).matrix()) +
              cache.g.bottomRows(h);
    cache.a2.noalias() = params_.w2h * cache.m;
    cache.a2.noalias() += params_.w2e * cache.emb;
    cache.a2.colwise() += params_.b2;
    cache.h2 = cache.a2.unaryExpr([](S v) { return detail::silu(v); });
    cache.o.noalias() = params_.w3 * cache.h2;
    cache.o.colwise() += params_.b3;
    cache.out = a.windowed() ? Mat<S>(cache.o.cwiseProduct(cache.win))
                             : cache.o;
  }

  /// Reverse pass for an upstream gradient d_out (D x N). Accumulates
  /// parameter gradients into `grad` and writes concept gradients into
  /// `d_concepts` when the respective pointer is non-null.
  void backward(const Cache& cache, const Mat<S>& d_out, Params* grad,
                Mat<S>* d_concepts) const {
    const auto& a = params_.arch;
    const int h = a.hidden;
    const Eigen::Index n = cache.columns();
    if (d_out.rows() != image_dim() || d_out.cols() != n) {
      throw ShapeError("denoiser backward: gradient shape mismatch");
    }
    Mat<S> d_o = a.windowed() ? Mat<S>(d_out.cwiseProduct(cache.win)) : d_out;
    Mat<S> d_h2 = params_.w3.transpose() * d_o;
    Mat<S> d_a2 = d_h2.cwiseProduct(
        cache.a2.unaryExpr([](S v) { return detail::silu_grad(v); }));
    Mat<S> d_m = params_.w2h.transpose() * d_a2;
    Mat<S> d_g(2 * h, n);
    d_g.topRows(h) = d_m.cwiseProduct(cache.h1);
    d_g.bottomRows(h) = d_m;
    Mat<S> d_h1 =
        d_m.cwiseProduct((cache.g.topRows(h).array() + S(1)).matrix());
    Mat<S> d_a1 = d_h1.cwiseProduct(
        cache.a1.unaryExpr([](S v) { return detail::silu_grad(v); }));

    if (grad) {
      grad->w3.noalias() += d_o * cache.h2.transpose();
      grad->b3 += d_o.rowwise().sum();
      grad->w2h.noalias() += d_a2 * cache.m.transpose();
      grad->w2e.noalias() += d_a2 * cache.emb.transpose();
      grad->b2 += d_a2.rowwise().sum();
      grad->wf.noalias() += d_g * cache.emb.transpose();
      grad->bf += d_g.rowwise().sum();
      grad->w1x.noalias() += d_a1 * cache.xw.transpose();
      grad->w1e.noalias() += d_a1 * cache.emb.transpose();
      grad->b1 += d_a1.rowwise().sum();
    }
    if (!d_concepts) return;

    Mat<S> d_emb = params_.w2e.transpose() * d_a2;
    d_emb.noalias() += params_.wf.transpose() * d_g;
    d_emb.noalias() += params_.w1e.transpose() * d_a1;
    const int te = a.time_embed_dim;
    const int ce = a.concept_embed_dim();
    d_concepts->resize(a.concept_dim, n);
    Vec<S> scratch(ce);
    Mat<S> jac;
    for (Eigen::Index j = 0; j < n; ++j) {
      concept_embedding(cache.concepts.col(j), scratch, &jac);
      d_concepts->col(j) = jac.transpose() * d_emb.col(j).tail(ce);
    }
    (void)te;
    if (a.windowed()) {
      // window enters twice: out = o * w and xw = x * w
      Mat<S> d_xw = params_.w1x.transpose() * d_a1;
      Mat<S> d_w = d_out.cwiseProduct(cache.o) + d_xw.cwiseProduct(cache.x);
      for (Eigen::Index j = 0; j < n; ++j) {
        const S cx = cache.concepts(0, j), cy = cache.concepts(1, j);
        S gx = 0, gy = 0;
        for (int p = 0; p < image_dim(); ++p) {
          const S dw = d_w(p, j);
          if (dw == S(0)) continue;
          const S dx = px_[p] - cx, dy = py_[p] - cy;
          const S d2 = dx * dx + dy * dy;
          // dw/dc = w * 4 d^2 (p - c) / r^4
          const S k = cache.win(p, j) * S(4) * d2 * inv_r4_;
          gx += dw * k * dx;
          gy += dw * k * dy;
        }
        (*d_concepts)(0, j) += gx;
        (*d_concepts)(1, j) += gy;
      }
    }
  }

  /// Window values for a coordinate at every pixel (ones if not windowed).
  Vec<S> window(S cx, S cy) const {
    if (!params_.arch.windowed()) return Vec<S>::Ones(image_dim());
    Vec<S> w(image_dim());
    for (int p = 0; p < image_dim(); ++p) {
      const S dx = px_[p] - cx, dy = py_[p] - cy;
      const S q = (dx * dx + dy * dy) * inv_r2_;
      w[p] = std::exp(-q * q);
    }
    return w;
  }

 private:
  void precompute_pixel_centres() {
    const auto& im = params_.arch.image;
    px_.resize(im.size());
    py_.resize(im.size());
    for (int y = 0; y < im.height; ++y) {
      for (int x = 0; x < im.width; ++x) {
        for (int ch = 0; ch < im.channels; ++ch) {
          const int p = (y * im.width + x) * im.channels + ch;
          px_[p] = S((x + 0.5) / im.width);
          py_[p] = S((y + 0.5) / im.height);
        }
      }
    }
    const double r = params_.arch.window_radius;
    inv_r2_ = r > 0 ? S(1.0 / (r * r)) : S(0);
    inv_r4_ = inv_r2_ * inv_r2_;
  }

  Params params_;
  std::vector<S> px_, py_;
  S inv_r2_ = 0, inv_r4_ = 0;
};

// ---------------------------------------------------------------------------
// Single-query helpers on parameter sets.

namespace detail {

template <typename S>
Mat<S> replicate_image(const Image& xt, int n) {
  Mat<S> m(xt.size(), n);
  for (int j = 0; j < n; ++j) m.col(j) = xt.cast<S>();
  return m;
}

inline void check_set(const ConceptSet& set, int concept_dim) {
  if (set.empty()) throw ParameterError("concept set is empty");
  for (const auto& c : set.concepts) {
    if (c.dim() != concept_dim) {
      throw ShapeError("concept dimension " + std::to_string(c.dim()) +
                       " does not match architecture (" +
                       std::to_string(concept_dim) + ")");
    }
  }
}

}  // namespace detail

/// eps_theta(x_t, t | c) for one concept.
template <typename S>
Image denoise(const MlpDenoiser<S>& net, const Image& xt, int t,
              const ConceptVector& c) {
  if (c.dim() != net.concept_dim()) {
    throw ShapeError("concept dimension does not match architecture");
  }
  MlpCache<S> cache;
  const std::array<int, 1> ts{t};
  net.forward(detail::replicate_image<S>(xt, 1), ts,
              c.values.cast<S>().eval(), cache);
  return cache.out.col(0).template cast<double>();
}

/// Sum over k of eps_theta(x_t, t | c^k).
template <typename S>
Image composed_denoise(const MlpDenoiser<S>& net, const Image& xt, int t,
                       const ConceptSet& set) {
  detail::check_set(set, net.concept_dim());
  MlpCache<S> cache;
  std::vector<int> ts(set.size(), t);
  net.forward(detail::replicate_image<S>(xt, set.size()), ts,
              set.as_columns().cast<S>().eval(), cache);
  Vec<S> sum = Vec<S>::Zero(net.image_dim());
  for (int k = 0; k < set.size(); ++k) sum += cache.out.col(k);
  return sum.template cast<double>();
}

/// d/dc^k of ||target - composed_denoise||^2 for every member.
template <typename S>
std::vector<Vec<double>> grad_concepts(const MlpDenoiser<S>& net,
                                       const Image& xt, int t,
                                       const ConceptSet& set,
                                       const Image& target_eps) {
  detail::check_set(set, net.concept_dim());
  if (target_eps.size() != xt.size()) {
    throw ShapeError("grad_concepts: target shape mismatch");
  }
  MlpCache<S> cache;
  std::vector<int> ts(set.size(), t);
  net.forward(detail::replicate_image<S>(xt, set.size()), ts,
              set.as_columns().cast<S>().eval(), cache);
  Vec<S> sum = cache.out.rowwise().sum();
  Vec<S> d = S(-2) * (target_eps.cast<S>() - sum);
  Mat<S> d_out = d.replicate(1, set.size());
  Mat<S> dc;
  net.backward(cache, d_out, nullptr, &dc);
  std::vector<Vec<double>> out;
  for (int k = 0; k < set.size(); ++k) {
    out.push_back(dc.col(k).template cast<double>());
  }
  return out;
}

/// d/dtheta of ||target - composed_denoise||^2.
template <typename S>
DenoiserParams<S> grad_params(const MlpDenoiser<S>& net, const Image& xt,
                              int t, const ConceptSet& set,
                              const Image& target_eps) {
  detail::check_set(set, net.concept_dim());
  if (target_eps.size() != xt.size()) {
    throw ShapeError("grad_params: target shape mismatch");
  }
  MlpCache<S> cache;
  std::vector<int> ts(set.size(), t);
  net.forward(detail::replicate_image<S>(xt, set.size()), ts,
              set.as_columns().cast<S>().eval(), cache);
  Vec<S> sum = cache.out.rowwise().sum();
  Vec<S> d = S(-2) * (target_eps.cast<S>() - sum);
  Mat<S> d_out = d.replicate(1, set.size());
  auto grad = DenoiserParams<S>::zeros(net.arch());
  net.backward(cache, d_out, &grad, nullptr);
  return grad;
}

}  // namespace invgen
