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

// Training of the composed denoiser: each scene contributes
// ||eps - sum_k eps_theta(x_t, t | c^k)||^2 and the batch loss is the mean.

#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "invgen/dataset.hpp"
#include "invgen/denoiser.hpp"
#include "invgen/schedule.hpp"

namespace invgen {

enum class OptimizerKind { kSgd, kAdam };

inline std::string_view to_string(OptimizerKind k) {
  return k == OptimizerKind::kSgd ? "sgd" : "adam";
}

inline OptimizerKind optimizer_from_string(std::string_view s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer '" + std::string(s) +
                    "' (expected sgd or adam)");
}

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 32;
  int step_budget = 1000;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 0.0;  // <= 0 disables clipping
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw ConfigError("train: learning_rate must be finite and >= 0");
    }
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (step_budget < 1) throw ConfigError("train: step_budget must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("train: Adam betas must lie in [0, 1)");
    }
    if (checkpoint_every < 0) throw ConfigError("train: checkpoint_every < 0");
  }
};

/// One scene as seen by the trainer.
struct TrainExample {
  Vec<float> x0;
  Mat<float> concepts;  // concept_dim x K
};

inline TrainExample to_example(const SceneRecord& r) {
  return {r.image, r.concepts.as_columns().cast<float>()};
}

/// Adaptive-moment state, shaped like the parameters.
template <typename S>
struct AdamState {
  DenoiserParams<S> m, v;
  std::uint64_t step = 0;

  explicit AdamState(const Architecture& a)
      : m(DenoiserParams<S>::zeros(a)), v(DenoiserParams<S>::zeros(a)) {}
};

namespace detail {

template <typename S>
double squared_norm(const DenoiserParams<S>& g) {
  double n = 0.0;
  g.for_each_block([&](const char*, const auto& m) {
    n += m.template cast<double>().squaredNorm();
  });
  return n;
}

template <typename S>
void apply_update(DenoiserParams<S>& params, DenoiserParams<S>& grad,
                  AdamState<S>& state, const TrainConfig& cfg) {
  if (cfg.clip_norm > 0.0) {
    const double norm = std::sqrt(squared_norm(grad));
    if (norm > cfg.clip_norm) {
      const S scale = S(cfg.clip_norm / norm);
      grad.for_each_block([&](const char*, auto& m) { m *= scale; });
    }
  }
  if (cfg.optimizer == OptimizerKind::kSgd) {
    std::vector<S*> ps;
    params.for_each_block([&](const char*, auto& m) { ps.push_back(m.data()); });
    std::size_t b = 0;
    const S lr = S(cfg.learning_rate);
    grad.for_each_block([&](const char*, const auto& g) {
      S* p = ps[b++];
      for (Eigen::Index i = 0; i < g.size(); ++i) p[i] -= lr * g.data()[i];
    });
    return;
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const S b1 = S(cfg.beta1), b2 = S(cfg.beta2);
  const S step_size = S(cfg.learning_rate / bc1);
  const S inv_bc2 = S(1.0 / bc2);
  const S eps = S(cfg.adam_eps);
  std::vector<S*> ps, ms, vs;
  params.for_each_block([&](const char*, auto& m) { ps.push_back(m.data()); });
  state.m.for_each_block([&](const char*, auto& m) { ms.push_back(m.data()); });
  state.v.for_each_block([&](const char*, auto& m) { vs.push_back(m.data()); });
  std::size_t b = 0;
  grad.for_each_block([&](const char*, const auto& g) {
    S* p = ps[b];
    S* m = ms[b];
    S* v = vs[b];
    ++b;
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      const S gi = g.data()[i];
      m[i] = b1 * m[i] + (S(1) - b1) * gi;
      v[i] = b2 * v[i] + (S(1) - b2) * gi * gi;
      p[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
    }
  });
}

}  // namespace detail

/// Loss and parameter gradient of the batch-mean composed objective for
/// pre-drawn noise. Scenes are grouped by K so each group runs as one dense
/// batch; `eps` and `t` are indexed like `batch`.
template <typename S>
double composed_loss_and_grad(const MlpDenoiser<S>& net,
                              const std::vector<const TrainExample*>& batch,
                              const std::vector<Vec<S>>& eps,
                              const std::vector<int>& t,
                              const NoiseSchedule& schedule,
                              DenoiserParams<S>* grad) {
  const int d = net.image_dim();
  std::map<int, std::vector<int>> by_k;
  for (int i = 0; i < static_cast<int>(batch.size()); ++i) {
    const auto k = static_cast<int>(batch[i]->concepts.cols());
    if (k < 1) throw ParameterError("train: scene without concepts");
    by_k[k].push_back(i);
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  MlpCache<S> cache;
  for (const auto& [k, members] : by_k) {
    const int n = static_cast<int>(members.size());
    Mat<S> x(d, n * k), c(net.concept_dim(), n * k);
    std::vector<int> ts(n * k);
    for (int s = 0; s < n; ++s) {
      const int i = members[s];
      const double ab = schedule.alpha_bar(t[i]);
      const Vec<S> xt = S(std::sqrt(ab)) * batch[i]->x0.template cast<S>() +
                        S(std::sqrt(1.0 - ab)) * eps[i];
      for (int j = 0; j < k; ++j) {
        x.col(s * k + j) = xt;
        c.col(s * k + j) = batch[i]->concepts.col(j).template cast<S>();
        ts[s * k + j] = t[i];
      }
    }
    net.forward(x, ts, c, cache);
    Mat<S> d_out(d, n * k);
    for (int s = 0; s < n; ++s) {
      const int i = members[s];
      const Vec<S> r = eps[i] - cache.out.middleCols(s * k, k).rowwise().sum();
      loss += static_cast<double>(r.squaredNorm()) * inv_b;
      const Vec<S> g = S(-2.0 * inv_b) * r;
      for (int j = 0; j < k; ++j) d_out.col(s * k + j) = g;
    }
    if (grad) net.backward(cache, d_out, grad, nullptr);
  }
  return loss;
}

/// One optimizer update. Draws eps then t for each scene in batch order,
/// and returns the pre-update batch loss.
template <typename S>
double train_step(DenoiserParams<S>& params, AdamState<S>& state,
                  const std::vector<const TrainExample*>& batch,
                  const NoiseSchedule& schedule, const TrainConfig& cfg,
                  Rng& rng, std::uint64_t step_index = 0) {
  if (batch.empty()) throw ParameterError("train_step: empty batch");
  const int d = params.arch.image.size();
  std::normal_distribution<S> normal(S(0), S(1));
  std::uniform_int_distribution<int> tdist(1, schedule.step_count());
  std::vector<Vec<S>> eps(batch.size());
  std::vector<int> t(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i]->x0.size() != d) throw ShapeError("train_step: image size");
    eps[i].resize(d);
    for (int p = 0; p < d; ++p) eps[i][p] = normal(rng);
    t[i] = tdist(rng);
  }
  if (!params.all_finite()) {
    throw NumericError("train: non-finite parameters at step " +
                       std::to_string(step_index));
  }
  const MlpDenoiser<S> net(params);
  auto grad = DenoiserParams<S>::zeros(params.arch);
  const double loss = composed_loss_and_grad(net, batch, eps, t, schedule, &grad);
  if (!std::isfinite(loss) || !grad.all_finite()) {
    throw NumericError("train: non-finite loss at step " +
                       std::to_string(step_index));
  }
  detail::apply_update(params, grad, state, cfg);
  return loss;
}

struct TrainReport {
  std::vector<double> losses;
  DenoiserParams<float> params;
  double seconds = 0.0;
  int steps_completed = 0;
};

/// Called every `checkpoint_every` steps with (step, params).
using CheckpointHook = std::function<void(int, const DenoiserParams<float>&)>;

/// Runs `step_budget` updates with batches drawn uniformly with
/// replacement. The loss trace and final parameters depend only on
/// (initial params, dataset, schedule, config).
inline TrainReport train_loop(DenoiserParams<float> params,
                              const std::vector<TrainExample>& data,
                              const NoiseSchedule& schedule,
                              const TrainConfig& cfg,
                              const CheckpointHook& hook = {}) {
  cfg.validate();
  if (data.empty()) throw ParameterError("train_loop: empty dataset");
  if (params.arch.step_count != schedule.step_count()) {
    throw ConfigError("train_loop: architecture step_count " +
                      std::to_string(params.arch.step_count) +
                      " differs from schedule T=" +
                      std::to_string(schedule.step_count()));
  }
  const auto start = std::chrono::steady_clock::now();
  Rng rng(derive_seed(cfg.seed, 0x7261696eULL));
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  AdamState<float> state(params.arch);
  TrainReport report;
  report.losses.reserve(cfg.step_budget);
  std::vector<const TrainExample*> batch(cfg.batch_size);
  for (int step = 0; step < cfg.step_budget; ++step) {
    for (auto& b : batch) b = &data[pick(rng)];
    report.losses.push_back(
        train_step(params, state, batch, schedule, cfg, rng, step));
    ++report.steps_completed;
    if (hook && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      hook(step + 1, params);
    }
  }
  report.params = std::move(params);
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

inline std::vector<TrainExample> to_examples(const SceneDataset& ds) {
  std::vector<TrainExample> out;
  out.reserve(ds.size());
  for (const auto& r : ds.records) out.push_back(to_example(r));
  return out;
}

/// Trailing moving average over `window` entries (shorter at the start).
inline std::vector<double> smooth(const std::vector<double>& xs, int window) {
  std::vector<double> out(xs.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    acc += xs[i];
    if (i >= static_cast<std::size_t>(window)) acc -= xs[i - window];
    out[i] = acc / static_cast<double>(std::min<std::size_t>(i + 1, window));
  }
  return out;
}

}  // namespace invgen
