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

// Inverse generative inference. Every routine ranks concept hypotheses by
// the composed denoising error
//
//   E(c^1..c^K) = sum_i ||eps_i - sum_k eps_theta(x^{t_i}, t_i | c^k)||^2
//
// over a shared list of (eps_i, t_i) draws, and is templated over a model
// exposing
//
//   using Scalar; using Cache;
//   int image_dim() const; int concept_dim() const;
//   void forward(const Mat<Scalar>& xt, std::span<const int> t,
//                const Mat<Scalar>& c, Cache&) const;
//   void backward(const Cache&, const Mat<Scalar>& d_out, P* /*nullptr*/,
//                 Mat<Scalar>* d_concepts) const;
//
// and optionally forward_decomposed(x0, eps, t, c, cache), which receives
// x_t as its two parts.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "invgen/common.hpp"
#include "invgen/concepts.hpp"
#include "invgen/schedule.hpp"

namespace invgen {

enum class InitMode { kUniform, kNormal };

inline std::string_view to_string(InitMode m) {
  return m == InitMode::kUniform ? "uniform" : "normal";
}

inline InitMode init_mode_from_string(std::string_view s) {
  if (s == "uniform") return InitMode::kUniform;
  if (s == "normal") return InitMode::kNormal;
  throw ConfigError("unknown init mode '" + std::string(s) +
                    "' (expected uniform or normal)");
}

enum class ConceptOptimizer { kSgd, kAdam };

inline std::string_view to_string(ConceptOptimizer o) {
  return o == ConceptOptimizer::kSgd ? "sgd" : "adam";
}

inline ConceptOptimizer concept_optimizer_from_string(std::string_view s) {
  if (s == "sgd") return ConceptOptimizer::kSgd;
  if (s == "adam") return ConceptOptimizer::kAdam;
  throw ConfigError("unknown concept optimizer '" + std::string(s) +
                    "' (expected sgd or adam)");
}

struct InferenceConfig {
  int sample_count = 256;  // N_sample
  int sgd_steps = 400;     // N_step
  int restarts = 8;        // R
  double concept_lr = 0.05;
  int warmup_steps = 10;
  double lr_final_fraction = 1.0;  // cosine decay target; 1 keeps lr flat
  ConceptOptimizer optimizer = ConceptOptimizer::kAdam;
  int k_min = 1;
  int k_max = 1;
  int prune_cadence = 0;  // 0 keeps every restart until final scoring
  double prune_fraction = 0.5;
  double prune_decay = 0.9;
  // Share of count-inference restarts for K that start from the best K-1
  // solution plus one fresh concept.
  double warm_fraction = 0.0;
  InitMode init = InitMode::kUniform;
  double coord_lower = 0.0;
  double coord_upper = 1.0;
  TimestepRange sgd_t;
  TimestepRange score_t;
  int enumeration_cap = 4096;
  double relaxed_init = 0.5;
  bool record_trajectories = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (sample_count < 1) throw ConfigError("infer: sample_count must be >= 1");
    if (sgd_steps < 0) throw ConfigError("infer: sgd_steps must be >= 0");
    if (restarts < 1) throw ConfigError("infer: restarts must be >= 1");
    if (!(concept_lr >= 0.0) || !std::isfinite(concept_lr)) {
      throw ConfigError("infer: concept_lr must be finite and >= 0");
    }
    if (warmup_steps < 0) throw ConfigError("infer: warmup_steps < 0");
    if (!(lr_final_fraction >= 0.0 && lr_final_fraction <= 1.0)) {
      throw ConfigError("infer: lr_final_fraction must lie in [0, 1]");
    }
    if (k_min < 1 || k_max < k_min) {
      throw ConfigError("infer: require 1 <= k_min <= k_max");
    }
    if (prune_cadence < 0) throw ConfigError("infer: prune_cadence < 0");
    if (!(prune_fraction >= 0.0 && prune_fraction < 1.0)) {
      throw ConfigError("infer: prune_fraction must lie in [0, 1)");
    }
    if (!(prune_decay >= 0.0 && prune_decay < 1.0)) {
      throw ConfigError("infer: prune_decay must lie in [0, 1)");
    }
    if (!(warm_fraction >= 0.0 && warm_fraction <= 1.0)) {
      throw ConfigError("infer: warm_fraction must lie in [0, 1]");
    }
    if (!(coord_lower < coord_upper)) {
      throw ConfigError("infer: coord_lower must be < coord_upper");
    }
    if (enumeration_cap < 1) throw ConfigError("infer: enumeration_cap < 1");
    if (!(relaxed_init >= 0.0 && relaxed_init <= 1.0)) {
      throw ConfigError("infer: relaxed_init must lie in [0, 1]");
    }
  }

  /// Learning rate at SGD step n (0-based): linear warmup, then cosine
  /// decay towards lr * lr_final_fraction.
  double lr_at(int n) const {
    double lr = concept_lr;
    if (warmup_steps > 0 && n < warmup_steps) {
      lr *= static_cast<double>(n + 1) / warmup_steps;
    }
    if (lr_final_fraction < 1.0 && sgd_steps > 1) {
      const double progress = static_cast<double>(n) / (sgd_steps - 1);
      const double cosine = 0.5 * (1.0 + std::cos(M_PI * progress));
      lr *= lr_final_fraction + (1.0 - lr_final_fraction) * cosine;
    }
    return lr;
  }
};

inline nlohmann::json to_json(const InferenceConfig& c) {
  return {{"sample_count", c.sample_count},
          {"sgd_steps", c.sgd_steps},
          {"restarts", c.restarts},
          {"concept_lr", c.concept_lr},
          {"warmup_steps", c.warmup_steps},
          {"lr_final_fraction", c.lr_final_fraction},
          {"optimizer", std::string(to_string(c.optimizer))},
          {"k_min", c.k_min},
          {"k_max", c.k_max},
          {"prune_cadence", c.prune_cadence},
          {"prune_fraction", c.prune_fraction},
          {"prune_decay", c.prune_decay},
          {"warm_fraction", c.warm_fraction},
          {"init", std::string(to_string(c.init))},
          {"coord_lower", c.coord_lower},
          {"coord_upper", c.coord_upper},
          {"sgd_t", {c.sgd_t.lo, c.sgd_t.hi}},
          {"score_t", {c.score_t.lo, c.score_t.hi}},
          {"enumeration_cap", c.enumeration_cap},
          {"relaxed_init", c.relaxed_init},
          {"seed", c.seed}};
}

/// Shared (eps_i, t_i) draws. Reconstructible from (seed, count, range).
struct SampleList {
  std::uint64_t seed = 0;
  std::vector<Image> eps;
  std::vector<int> t;

  int size() const { return static_cast<int>(t.size()); }
};

/// Draws eps_i then t_i for i = 0..count-1 from one seeded stream.
inline SampleList draw_samples(int image_dim, int count, const TimestepRange& range,
                               const NoiseSchedule& schedule, std::uint64_t seed) {
  range.validate(schedule);
  SampleList s;
  s.seed = seed;
  s.eps.reserve(count);
  s.t.reserve(count);
  Rng rng(seed);
  for (int i = 0; i < count; ++i) {
    s.eps.push_back(standard_normal_image(image_dim, rng));
    s.t.push_back(range.draw(schedule, rng));
  }
  return s;
}

struct ErrorEntry {
  int id = 0;
  std::string label;
  double error = 0.0;  // accumulated over the shared samples
  int samples = 0;
};

struct ErrorTable {
  std::vector<ErrorEntry> entries;
  std::uint64_t sample_seed = 0;
  std::vector<int> timesteps;

  /// Index of the minimum accumulated error; ties go to the lowest id.
  std::size_t argmin() const {
    if (entries.empty()) throw ParameterError("error table is empty");
    std::size_t best = 0;
    for (std::size_t i = 1; i < entries.size(); ++i) {
      const auto& e = entries[i];
      const auto& b = entries[best];
      if (e.error < b.error || (e.error == b.error && e.id < b.id)) best = i;
    }
    return best;
  }
};

inline nlohmann::json to_json(const ErrorTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : t.entries) {
    rows.push_back({{"id", e.id},
                    {"label", e.label},
                    {"error", e.error},
                    {"mean_error", e.samples ? e.error / e.samples : 0.0},
                    {"samples", e.samples}});
  }
  return {{"sample_seed", t.sample_seed},
          {"sample_count", t.timesteps.size()},
          {"timesteps", t.timesteps},
          {"entries", rows}};
}

struct InferenceReport {
  std::string algorithm;
  ConceptSet chosen;
  int chosen_k = 0;
  double chosen_error = 0.0;
  ErrorTable table;
  std::vector<std::pair<int, double>> error_by_k;  // count search only
  std::vector<double> restart_final_errors;
  std::vector<std::vector<Mat<double>>> trajectories;  // [restart][step]
  std::vector<double> weights;                          // weighted composition
  std::vector<double> relaxed_labels;                   // relaxed discrete
  std::vector<int> labels;                              // decoded discrete labels
  std::uint64_t seed = 0;
  double seconds = 0.0;  // wall clock; kept out of the JSON so reports stay reproducible
};

inline nlohmann::json to_json(const ConceptSet& set) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& c : set.concepts) {
    out.push_back({{"kind", std::string(to_string(c.kind))},
                   {"values", std::vector<double>(c.values.data(),
                                                  c.values.data() + c.dim())}});
  }
  return out;
}

inline nlohmann::json to_json(const InferenceReport& r,
                              const InferenceConfig& cfg) {
  nlohmann::json j = {{"algorithm", r.algorithm},
                      {"seed", r.seed},
                      {"config", to_json(cfg)},
                      {"chosen", to_json(r.chosen)},
                      {"chosen_error", r.chosen_error},
                      {"error_table", to_json(r.table)},
                      {"restart_final_errors", r.restart_final_errors}};
  if (r.chosen_k > 0) j["chosen_k"] = r.chosen_k;
  if (!r.error_by_k.empty()) {
    nlohmann::json by_k = nlohmann::json::array();
    for (const auto& [k, e] : r.error_by_k) by_k.push_back({{"k", k}, {"error", e}});
    j["error_by_k"] = by_k;
  }
  if (!r.weights.empty()) j["weights"] = r.weights;
  if (!r.relaxed_labels.empty()) j["relaxed_labels"] = r.relaxed_labels;
  if (!r.labels.empty()) j["labels"] = r.labels;
  return j;
}


namespace detail {

template <typename M>
concept DecomposedForward = requires(const M& m, const Mat<double>& a,
                                     std::span<const int> t,
                                     typename M::Cache& cache) {
  m.forward_decomposed(a, a, t, a, cache);
};

/// Runs a model on columns that share the observed image but carry their own
/// (eps, t, concept).
template <typename Model>
class Probe {
 public:
  using S = typename Model::Scalar;

  Probe(const Model& model, const Image& x0, const NoiseSchedule& schedule)
      : model_(model), x0_(x0), schedule_(schedule) {
    if (x0.size() != model.image_dim()) {
      throw ShapeError("inference: image has " + std::to_string(x0.size()) +
                       " entries, model expects " +
                       std::to_string(model.image_dim()));
    }
    if (!x0.allFinite()) throw NumericError("inference: image not finite");
  }

  /// Forward pass; returns outputs as double, one column per input column.
  const Mat<double>& forward(const std::vector<const Image*>& eps,
                             const std::vector<int>& t, const Mat<double>& c) {
    const Eigen::Index n = c.cols();
    if constexpr (DecomposedForward<Model> && std::is_same_v<S, double>) {
      Mat<double> x(x0_.size(), n), e(x0_.size(), n);
      for (Eigen::Index j = 0; j < n; ++j) {
        x.col(j) = x0_;
        e.col(j) = *eps[j];
      }
      model_.forward_decomposed(x, e, t, c, cache_);
    } else {
      Mat<S> x(x0_.size(), n);
      for (Eigen::Index j = 0; j < n; ++j) {
        const double ab = schedule_.alpha_bar(t[j]);
        x.col(j) = (std::sqrt(ab) * x0_ + std::sqrt(1.0 - ab) * *eps[j])
                       .template cast<S>();
      }
      model_.forward(x, t, c.template cast<S>(), cache_);
    }
    if constexpr (std::is_same_v<S, double>) {
      out_ = cache_.out;
    } else {
      out_ = cache_.out.template cast<double>();
    }
    return out_;
  }

  /// Concept gradient of sum_j <d_out_j, out_j> for the last forward pass.
  Mat<double> concept_grad(const Mat<double>& d_out) {
    Mat<S> dc;
    model_.backward(cache_, d_out.template cast<S>(), nullptr, &dc);
    if constexpr (std::is_same_v<S, double>) {
      return dc;
    } else {
      return dc.template cast<double>();
    }
  }

 private:
  const Model& model_;
  const Image& x0_;
  const NoiseSchedule& schedule_;
  typename Model::Cache cache_;
  Mat<double> out_;
};

inline constexpr Eigen::Index kMaxColumns = 2048;

/// Accumulated composed error of every configuration (concept_dim x K_j)
/// over the shared samples.
template <typename Model>
std::vector<double> score_configs(const Model& model, const Image& x0,
                                  const std::vector<Mat<double>>& configs,
                                  const SampleList& samples,
                                  const NoiseSchedule& schedule) {
  Probe<Model> probe(model, x0, schedule);
  std::vector<double> err(configs.size(), 0.0);
  for (const auto& c : configs) {
    if (c.rows() != model.concept_dim() || c.cols() < 1) {
      throw ShapeError("inference: configuration shape does not match model");
    }
  }
  for (int i = 0; i < samples.size(); ++i) {
    std::size_t first = 0;
    while (first < configs.size()) {
      // pack whole configurations into one batch
      std::size_t last = first;
      Eigen::Index cols = 0;
      while (last < configs.size() &&
             (cols == 0 || cols + configs[last].cols() <= kMaxColumns)) {
        cols += configs[last].cols();
        ++last;
      }
      Mat<double> c(model.concept_dim(), cols);
      Eigen::Index at = 0;
      for (std::size_t j = first; j < last; ++j) {
        c.middleCols(at, configs[j].cols()) = configs[j];
        at += configs[j].cols();
      }
      const std::vector<const Image*> eps(cols, &samples.eps[i]);
      const std::vector<int> t(cols, samples.t[i]);
      const Mat<double>& out = probe.forward(eps, t, c);
      at = 0;
      for (std::size_t j = first; j < last; ++j) {
        const Eigen::Index k = configs[j].cols();
        Vec<double> sum = out.col(at);
        for (Eigen::Index q = 1; q < k; ++q) sum += out.col(at + q);
        err[j] += (samples.eps[i] - sum).squaredNorm();
        at += k;
      }
      first = last;
    }
  }
  return err;
}

inline ConceptSet columns_to_set(const Mat<double>& c, double lo, double hi) {
  ConceptSet set;
  for (Eigen::Index k = 0; k < c.cols(); ++k) {
    ConceptVector v;
    v.values = c.col(k);
    v.kind = c.rows() == 2 ? ConceptKind::kCoordinate : ConceptKind::kEmbedding;
    v.lower = Vec<double>::Constant(c.rows(), lo);
    v.upper = Vec<double>::Constant(c.rows(), hi);
    set.concepts.push_back(std::move(v));
  }
  return set;
}

/// First-order update rule shared by every concept optimizer.
struct StepRule {
  ConceptOptimizer kind;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void apply(Eigen::Ref<Mat<double>> x, const Mat<double>& g,
             Mat<double>& m, Mat<double>& v, int step, double lr) const {
    if (kind == ConceptOptimizer::kSgd) {
      x -= lr * g;
      return;
    }
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
    const double bc1 = 1.0 - std::pow(beta1, step);
    const double bc2 = 1.0 - std::pow(beta2, step);
    x.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
  }
};

struct RestartRun {
  std::vector<Mat<double>> concepts;  // [restart] concept_dim x K
  std::vector<double> running_error;
  std::vector<bool> alive;
  std::vector<std::vector<Mat<double>>> trajectories;
};

/// Multi-restart stochastic descent on K continuous concepts. Each step
/// draws one (eps, t) shared by every live restart.
template <typename Model>
RestartRun run_restarts(const Model& model, const Image& x, int K,
                        const NoiseSchedule& schedule, const InferenceConfig& cfg,
                        std::uint64_t stream,
                        const std::vector<std::optional<Mat<double>>>* init) {
  const int d = model.concept_dim();
  const int R = cfg.restarts;
  const double lo = cfg.coord_lower, hi = cfg.coord_upper;
  RestartRun run;
  run.concepts.resize(R);
  run.running_error.assign(R, 0.0);
  run.alive.assign(R, true);
  if (cfg.record_trajectories) run.trajectories.resize(R);

  Rng init_rng(derive_seed(stream, 1));
  std::uniform_real_distribution<double> uni(lo, hi);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int r = 0; r < R; ++r) {
    Mat<double> c(d, K);
    for (Eigen::Index i = 0; i < c.size(); ++i) {
      c.data()[i] = cfg.init == InitMode::kUniform ? uni(init_rng) : normal(init_rng);
    }
    if (init && r < static_cast<int>(init->size()) && (*init)[r]) {
      if ((*init)[r]->rows() != d || (*init)[r]->cols() != K) {
        throw ShapeError("inference: initial concepts have the wrong shape");
      }
      c = *(*init)[r];
    }
    run.concepts[r] = c.cwiseMax(lo).cwiseMin(hi);
    if (cfg.record_trajectories) run.trajectories[r].push_back(run.concepts[r]);
  }

  Probe<Model> probe(model, x, schedule);
  const StepRule rule{cfg.optimizer};
  std::vector<Mat<double>> m(R, Mat<double>::Zero(d, K)), v = m;
  Rng step_rng(derive_seed(stream, 2));
  bool first_step = true;
  for (int n = 0; n < cfg.sgd_steps; ++n) {
    const Image eps = standard_normal_image(x.size(), step_rng);
    const int t = cfg.sgd_t.draw(schedule, step_rng);
    std::vector<int> live;
    for (int r = 0; r < R; ++r) {
      if (run.alive[r]) live.push_back(r);
    }
    const auto cols = static_cast<Eigen::Index>(live.size()) * K;
    Mat<double> c(d, cols);
    for (std::size_t i = 0; i < live.size(); ++i) {
      c.middleCols(static_cast<Eigen::Index>(i) * K, K) = run.concepts[live[i]];
    }
    const std::vector<const Image*> eps_cols(cols, &eps);
    const std::vector<int> t_cols(cols, t);
    const Mat<double>& out = probe.forward(eps_cols, t_cols, c);
    Mat<double> d_out(out.rows(), cols);
    for (std::size_t i = 0; i < live.size(); ++i) {
      const Eigen::Index at = static_cast<Eigen::Index>(i) * K;
      const Vec<double> r = eps - out.middleCols(at, K).rowwise().sum();
      const double e = r.squaredNorm();
      double& ema = run.running_error[live[i]];
      ema = first_step ? e : cfg.prune_decay * ema + (1.0 - cfg.prune_decay) * e;
      for (int k = 0; k < K; ++k) d_out.col(at + k) = -2.0 * r;
    }
    first_step = false;
    const Mat<double> g = probe.concept_grad(d_out);
    const double lr = cfg.lr_at(n);
    for (std::size_t i = 0; i < live.size(); ++i) {
      const int r = live[i];
      const Mat<double> gr = g.middleCols(static_cast<Eigen::Index>(i) * K, K);
      if (!gr.allFinite()) {
        throw NumericError("inference: non-finite concept gradient at step " +
                           std::to_string(n));
      }
      rule.apply(run.concepts[r], gr, m[r], v[r], n + 1, lr);
      run.concepts[r] = run.concepts[r].cwiseMax(lo).cwiseMin(hi);
      if (cfg.record_trajectories) run.trajectories[r].push_back(run.concepts[r]);
    }
    if (cfg.prune_cadence > 0 && (n + 1) % cfg.prune_cadence == 0) {
      const auto drop = static_cast<std::size_t>(
          std::floor(cfg.prune_fraction * static_cast<double>(live.size())));
      const std::size_t keep = std::max<std::size_t>(1, live.size() - drop);
      std::stable_sort(live.begin(), live.end(), [&](int a, int b) {
        return run.running_error[a] < run.running_error[b];
      });
      for (std::size_t i = keep; i < live.size(); ++i) run.alive[live[i]] = false;
    }
  }
  return run;
}

inline std::string restart_label(int k, int r) {
  return "K=" + std::to_string(k) + " restart " + std::to_string(r);
}

/// Candidates from several restart runs, scored over one shared list.
struct Candidates {
  std::vector<Mat<double>> configs;
  std::vector<int> k;
  std::vector<int> restart;
};

template <typename Model>
ErrorTable score_candidates(const Model& model, const Image& x,
                            const Candidates& cand, const NoiseSchedule& schedule,
                            const InferenceConfig& cfg) {
  const SampleList samples =
      draw_samples(model.image_dim(), cfg.sample_count, cfg.score_t, schedule,
                   derive_seed(cfg.seed, 3));
  const auto err = score_configs(model, x, cand.configs, samples, schedule);
  ErrorTable table;
  table.sample_seed = samples.seed;
  table.timesteps = samples.t;
  for (std::size_t j = 0; j < err.size(); ++j) {
    table.entries.push_back({static_cast<int>(j),
                             restart_label(cand.k[j], cand.restart[j]), err[j],
                             samples.size()});
  }
  return table;
}

inline constexpr int kWarmScreenCandidates = 64;
inline constexpr int kWarmScreenSamples = 32;

inline std::uint64_t count_stream(std::uint64_t seed, int k) {
  return derive_seed(seed, 1000 + static_cast<std::uint64_t>(k));
}

}  // namespace detail

/// Scores every candidate configuration over one shared list of
/// `sample_count` draws (seeded by `seed`).
template <typename Model>
ErrorTable denoising_error(const Model& model, const Image& x,
                           const std::vector<ConceptSet>& candidates,
                           const NoiseSchedule& schedule, int sample_count,
                           std::uint64_t seed, const TimestepRange& range = {}) {
  if (candidates.empty()) throw ParameterError("denoising_error: no candidates");
  if (sample_count < 1) throw ParameterError("denoising_error: sample_count < 1");
  std::vector<Mat<double>> configs;
  for (const auto& set : candidates) {
    set.validate();
    if (set.dim() != model.concept_dim()) {
      throw ShapeError("denoising_error: concept dimension does not match model");
    }
    configs.push_back(set.as_columns());
  }
  const SampleList samples =
      draw_samples(model.image_dim(), sample_count, range, schedule, seed);
  const auto err = detail::score_configs(model, x, configs, samples, schedule);
  ErrorTable table;
  table.sample_seed = seed;
  table.timesteps = samples.t;
  for (std::size_t j = 0; j < err.size(); ++j) {
    table.entries.push_back({static_cast<int>(j), "candidate " + std::to_string(j),
                             err[j], sample_count});
  }
  return table;
}

/// Exhaustive search over one label per slot (last slot varies fastest).
template <typename Model>
InferenceReport infer_discrete_enumerate(
    const Model& model, const Image& x,
    const std::vector<std::vector<ConceptVector>>& vocabulary,
    const NoiseSchedule& schedule, const InferenceConfig& cfg) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  if (vocabulary.empty()) throw ParameterError("enumerate: no concept slots");
  double total = 1.0;
  for (const auto& slot : vocabulary) {
    if (slot.empty()) throw ParameterError("enumerate: empty label set");
    total *= static_cast<double>(slot.size());
  }
  if (total > cfg.enumeration_cap) {
    throw ParameterError("enumerate: " + std::to_string(static_cast<long long>(total)) +
                         " configurations exceed the cap of " +
                         std::to_string(cfg.enumeration_cap) +
                         "; use infer_discrete_relaxed for large label spaces");
  }
  const int n = static_cast<int>(total);
  const int K = static_cast<int>(vocabulary.size());
  std::vector<ConceptSet> sets(n);
  std::vector<std::vector<int>> tuples(n, std::vector<int>(K));
  for (int j = 0; j < n; ++j) {
    int rest = j;
    for (int k = K - 1; k >= 0; --k) {
      const int m = static_cast<int>(vocabulary[k].size());
      tuples[j][k] = rest % m;
      rest /= m;
    }
    for (int k = 0; k < K; ++k) {
      sets[j].concepts.push_back(vocabulary[k][tuples[j][k]]);
    }
  }
  InferenceReport rep;
  rep.algorithm = "discrete-enumerate";
  rep.seed = cfg.seed;
  rep.table = denoising_error(model, x, sets, schedule, cfg.sample_count,
                              derive_seed(cfg.seed, 3), cfg.score_t);
  for (int j = 0; j < n; ++j) {
    std::string label;
    for (int k = 0; k < K; ++k) {
      label += (k ? "," : "") + std::to_string(tuples[j][k]);
    }
    rep.table.entries[j].label = label;
  }
  const std::size_t best = rep.table.argmin();
  rep.chosen = sets[best];
  rep.labels = tuples[best];
  rep.chosen_error = rep.table.entries[best].error;
  rep.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

/// Multi-restart stochastic gradient search over K continuous concepts,
/// followed by selection over a fresh shared sample list. `init`, when
/// given, overrides the random start of the restarts it has values for.
template <typename Model>
InferenceReport infer_continuous_sgd(
    const Model& model, const Image& x, int K, const NoiseSchedule& schedule,
    const InferenceConfig& cfg,
    const std::vector<std::optional<Mat<double>>>* init = nullptr) {
  cfg.validate();
  if (K < 1) throw ParameterError("continuous inference: K must be >= 1");
  cfg.sgd_t.validate(schedule);
  const auto start = std::chrono::steady_clock::now();
  auto run = detail::run_restarts(model, x, K, schedule, cfg,
                                  detail::count_stream(cfg.seed, K), init);
  detail::Candidates cand;
  for (int r = 0; r < cfg.restarts; ++r) {
    if (!run.alive[r]) continue;
    cand.configs.push_back(run.concepts[r]);
    cand.k.push_back(K);
    cand.restart.push_back(r);
  }
  if (cand.configs.empty()) {
    throw std::logic_error("continuous inference: every restart was pruned");
  }
  InferenceReport rep;
  rep.algorithm = "continuous-sgd";
  rep.seed = cfg.seed;
  rep.table = detail::score_candidates(model, x, cand, schedule, cfg);
  for (auto& e : rep.table.entries) e.id = cand.restart[e.id];
  rep.restart_final_errors.assign(cfg.restarts,
                                  std::numeric_limits<double>::infinity());
  for (const auto& e : rep.table.entries) rep.restart_final_errors[e.id] = e.error;
  const std::size_t best = rep.table.argmin();
  rep.chosen = detail::columns_to_set(run.concepts[rep.table.entries[best].id],
                                      cfg.coord_lower, cfg.coord_upper);
  rep.chosen_k = K;
  rep.chosen_error = rep.table.entries[best].error;
  rep.trajectories = std::move(run.trajectories);
  rep.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

/// Searches K over [k_min, k_max]: one restart search per K, then every
/// surviving candidate is scored over a single shared sample list.
template <typename Model>
InferenceReport infer_concept_count(const Model& model, const Image& x,
                                    const NoiseSchedule& schedule,
                                    const InferenceConfig& cfg) {
  cfg.validate();
  cfg.sgd_t.validate(schedule);
  const auto start = std::chrono::steady_clock::now();
  detail::Candidates cand;
  const SampleList samples =
      draw_samples(model.image_dim(), cfg.sample_count, cfg.score_t, schedule,
                   derive_seed(cfg.seed, 3));
  std::vector<double> errors;
  std::optional<Mat<double>> previous_best;
  const int warm = static_cast<int>(std::lround(cfg.warm_fraction * cfg.restarts));
  for (int K = cfg.k_min; K <= cfg.k_max; ++K) {
    const std::uint64_t stream = detail::count_stream(cfg.seed, K);
    std::vector<std::optional<Mat<double>>> init(cfg.restarts);
    if (previous_best && warm > 0) {
      // Screen random positions for the added concept on a short sample
      // list; the best `warm` of them seed the warm restarts.
      Rng rng(derive_seed(stream, 4));
      std::uniform_real_distribution<double> uni(cfg.coord_lower, cfg.coord_upper);
      const int screen = std::max(detail::kWarmScreenCandidates, warm);
      std::vector<Mat<double>> trial(static_cast<std::size_t>(screen));
      for (auto& c : trial) {
        c.resize(previous_best->rows(), K);
        c.leftCols(K - 1) = *previous_best;
        for (Eigen::Index i = 0; i < c.rows(); ++i) c(i, K - 1) = uni(rng);
      }
      const SampleList probe_samples = draw_samples(
          model.image_dim(), std::min(cfg.sample_count, detail::kWarmScreenSamples),
          cfg.score_t, schedule, derive_seed(stream, 5));
      const auto err = detail::score_configs(model, x, trial, probe_samples, schedule);
      std::vector<std::size_t> order(err.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return err[a] < err[b]; });
      for (int r = 0; r < warm; ++r) init[r] = trial[order[static_cast<std::size_t>(r)]];
    }
    const auto run = detail::run_restarts(model, x, K, schedule, cfg, stream, &init);
    std::vector<Mat<double>> survivors;
    for (int r = 0; r < cfg.restarts; ++r) {
      if (!run.alive[r]) continue;
      survivors.push_back(run.concepts[r]);
      cand.configs.push_back(run.concepts[r]);
      cand.k.push_back(K);
      cand.restart.push_back(r);
    }
    const auto err = detail::score_configs(model, x, survivors, samples, schedule);
    const auto leader = std::min_element(err.begin(), err.end()) - err.begin();
    previous_best = survivors[static_cast<std::size_t>(leader)];
    errors.insert(errors.end(), err.begin(), err.end());
  }
  InferenceReport rep;
  rep.algorithm = "concept-count";
  rep.seed = cfg.seed;
  rep.table.sample_seed = samples.seed;
  rep.table.timesteps = samples.t;
  for (std::size_t j = 0; j < errors.size(); ++j) {
    rep.table.entries.push_back(
        {static_cast<int>(j), detail::restart_label(cand.k[j], cand.restart[j]),
         errors[j], samples.size()});
  }
  for (int K = cfg.k_min; K <= cfg.k_max; ++K) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cand.k.size(); ++j) {
      if (cand.k[j] == K) best = std::min(best, rep.table.entries[j].error);
    }
    rep.error_by_k.emplace_back(K, best);
  }
  const std::size_t best = rep.table.argmin();
  rep.chosen_k = cand.k[best];
  rep.chosen = detail::columns_to_set(cand.configs[best], cfg.coord_lower,
                                      cfg.coord_upper);
  rep.chosen_error = rep.table.entries[best].error;
  for (std::size_t j = 0; j < cand.k.size(); ++j) {
    if (cand.k[j] == rep.chosen_k) {
      rep.restart_final_errors.push_back(rep.table.entries[j].error);
    }
  }
  rep.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

/// Binary label rule for a relaxed value: below 0.5 is 0, otherwise 1.
inline int threshold_label(double l) { return l < 0.5 ? 0 : 1; }

/// Gradient search over relaxed labels l^k in [0, 1], one per binary
/// attribute, each encoded as the block [l, 1 - l]; thresholded at the end.
template <typename Model>
InferenceReport infer_discrete_relaxed(const Model& model, const Image& x,
                                       int attributes,
                                       const NoiseSchedule& schedule,
                                       const InferenceConfig& cfg) {
  cfg.validate();
  cfg.sgd_t.validate(schedule);
  if (attributes < 1) throw ParameterError("relaxed inference: need >= 1 attribute");
  if (model.concept_dim() != 2 * attributes) {
    throw ShapeError("relaxed inference: model concept_dim " +
                     std::to_string(model.concept_dim()) + " != 2 x attributes");
  }
  const auto start = std::chrono::steady_clock::now();
  const int K = attributes;
  auto encode = [&](const Vec<double>& l) {
    Mat<double> c = Mat<double>::Zero(2 * K, K);
    for (int b = 0; b < K; ++b) {
      c(2 * b, b) = l[b];
      c(2 * b + 1, b) = 1.0 - l[b];
    }
    return c;
  };
  Vec<double> l = Vec<double>::Constant(K, cfg.relaxed_init);
  Mat<double> m = Mat<double>::Zero(K, 1), v = m;
  const detail::StepRule rule{cfg.optimizer};
  detail::Probe<Model> probe(model, x, schedule);
  Rng step_rng(derive_seed(cfg.seed, 2));
  for (int n = 0; n < cfg.sgd_steps; ++n) {
    const Image eps = standard_normal_image(x.size(), step_rng);
    const int t = cfg.sgd_t.draw(schedule, step_rng);
    const std::vector<const Image*> eps_cols(K, &eps);
    const std::vector<int> t_cols(K, t);
    const Mat<double>& out = probe.forward(eps_cols, t_cols, encode(l));
    const Vec<double> r = eps - out.rowwise().sum();
    const Mat<double> d_out = (-2.0 * r).replicate(1, K);
    const Mat<double> dc = probe.concept_grad(d_out);
    Mat<double> g(K, 1);
    for (int b = 0; b < K; ++b) g(b, 0) = dc(2 * b, b) - dc(2 * b + 1, b);
    if (!g.allFinite()) {
      throw NumericError("relaxed inference: non-finite gradient at step " +
                         std::to_string(n));
    }
    Mat<double> lm = l;
    rule.apply(lm, g, m, v, n + 1, cfg.lr_at(n));
    l = lm.col(0).cwiseMax(0.0).cwiseMin(1.0);
  }
  InferenceReport rep;
  rep.algorithm = "discrete-relaxed";
  rep.seed = cfg.seed;
  rep.relaxed_labels.assign(l.data(), l.data() + K);
  for (int b = 0; b < K; ++b) {
    rep.labels.push_back(threshold_label(l[b]));
    rep.chosen.concepts.push_back(
        ConceptVector::binary_attribute(b, K, rep.labels.back()));
  }
  rep.table = denoising_error(model, x, {rep.chosen}, schedule, cfg.sample_count,
                              derive_seed(cfg.seed, 3), cfg.score_t);
  rep.chosen_error = rep.table.entries[0].error;
  rep.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

/// Learns one weight per vocabulary concept for sum_k w^k eps_theta(. | c^k)
/// and returns the `pick_count` concepts with the largest weights (ties to
/// the lowest index), in index order.
template <typename Model>
InferenceReport infer_weighted_composition(
    const Model& model, const Image& x, const std::vector<ConceptVector>& vocabulary,
    int pick_count, const NoiseSchedule& schedule, const InferenceConfig& cfg) {
  cfg.validate();
  cfg.sgd_t.validate(schedule);
  const int V = static_cast<int>(vocabulary.size());
  if (pick_count < 1 || pick_count > V) {
    throw ParameterError("weighted composition: pick_count must lie in [1, " +
                         std::to_string(V) + "]");
  }
  const auto start = std::chrono::steady_clock::now();
  ConceptSet vocab_set(vocabulary);
  vocab_set.validate();
  const Mat<double> c = vocab_set.as_columns();
  Mat<double> w = Mat<double>::Constant(V, 1, static_cast<double>(pick_count) / V);
  Mat<double> m = Mat<double>::Zero(V, 1), v = m;
  const detail::StepRule rule{cfg.optimizer};
  detail::Probe<Model> probe(model, x, schedule);
  Rng step_rng(derive_seed(cfg.seed, 2));
  for (int n = 0; n < cfg.sgd_steps; ++n) {
    const Image eps = standard_normal_image(x.size(), step_rng);
    const int t = cfg.sgd_t.draw(schedule, step_rng);
    const std::vector<const Image*> eps_cols(V, &eps);
    const std::vector<int> t_cols(V, t);
    const Mat<double>& out = probe.forward(eps_cols, t_cols, c);
    const Vec<double> r = eps - out * w.col(0);
    const Mat<double> g = -2.0 * (out.transpose() * r);
    rule.apply(w, g, m, v, n + 1, cfg.lr_at(n));
  }
  if (!w.allFinite()) throw NumericError("weighted composition: weights diverged");
  std::vector<int> order(V);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return w(a, 0) > w(b, 0); });
  std::vector<int> picked(order.begin(), order.begin() + pick_count);
  std::sort(picked.begin(), picked.end());
  InferenceReport rep;
  rep.algorithm = "weighted-composition";
  rep.seed = cfg.seed;
  rep.weights.assign(w.data(), w.data() + V);
  rep.labels = picked;
  for (int i : picked) rep.chosen.concepts.push_back(vocabulary[i]);
  rep.table = denoising_error(model, x, {rep.chosen}, schedule, cfg.sample_count,
                              derive_seed(cfg.seed, 3), cfg.score_t);
  rep.chosen_error = rep.table.entries[0].error;
  rep.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

/// Slots for K binary attributes; label index m encodes value m.
inline std::vector<std::vector<ConceptVector>> binary_attribute_vocabulary(int K) {
  std::vector<std::vector<ConceptVector>> slots(K);
  for (int b = 0; b < K; ++b) {
    slots[b] = {ConceptVector::binary_attribute(b, K, 0),
                ConceptVector::binary_attribute(b, K, 1)};
  }
  return slots;
}

}  // namespace invgen
