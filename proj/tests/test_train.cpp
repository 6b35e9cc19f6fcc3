// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "invgen/dataset.hpp"
#include "invgen/train.hpp"

namespace invgen {
namespace {

// Smoothed (window 50) loss after 50 and 500 steps on the fixture.
constexpr double kInitialSmoothed = 237.5;
constexpr double kFinalSmoothed = 81.5;

Architecture fixture_arch(TaskKind task, ImageShape shape, int hidden = 256) {
  Architecture a;
  a.image = shape;
  a.concept_kind = concept_kind_for(task);
  a.concept_dim = concept_dim_for(task);
  a.hidden = hidden;
  return a;
}

// 64 global-task scenes; the fixture behind the progress checks below.
struct Fixture {
  SceneDataset ds;
  std::vector<TrainExample> examples;
  NoiseSchedule schedule = make_default_schedule();
  Architecture arch;

  Fixture() {
    WorldConfig wc;
    wc.task = TaskKind::kGlobal;
    ds = sample_dataset(wc, 64, 2024);
    examples = to_examples(ds);
    arch = fixture_arch(TaskKind::kGlobal, wc.shape);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

TrainReport run(int batch, int steps, std::uint64_t seed = 5) {
  const auto& f = fixture();
  TrainConfig cfg;
  cfg.batch_size = batch;
  cfg.step_budget = steps;
  cfg.seed = seed;
  return train_loop(DenoiserParams<float>::initialize(f.arch, 1), f.examples,
                    f.schedule, cfg);
}

TEST(TrainStep, ZeroLearningRateLeavesParamsUnchanged) {
  const auto& f = fixture();
  auto params = DenoiserParams<float>::initialize(f.arch, 1);
  const auto before = params;
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  for (auto kind : {OptimizerKind::kAdam, OptimizerKind::kSgd}) {
    cfg.optimizer = kind;
    AdamState<float> state(f.arch);
    Rng rng(3);
    std::vector<const TrainExample*> batch{&f.examples[0], &f.examples[1]};
    const double loss = train_step(params, state, batch, f.schedule, cfg, rng);
    EXPECT_GT(loss, 0.0);
    EXPECT_TRUE(params == before);
  }
}

// One K=1 scene: the loss is the squared residual of one denoise call on the
// same (eps, t) draw.
TEST(TrainStep, SingleSceneLossIsOneDenoiseResidual) {
  WorldConfig wc;
  wc.k_min = wc.k_max = 1;
  const auto ds = sample_dataset(wc, 1, 8);
  const auto ex = to_example(ds.records[0]);
  const auto arch = fixture_arch(TaskKind::kLocal, wc.shape);
  const auto s = make_default_schedule();
  auto params = DenoiserParams<float>::initialize(arch, 2);
  const MlpDenoiser<float> net(params);

  Rng rng(77), replay(77);
  std::normal_distribution<float> normal(0.f, 1.f);
  Vec<float> eps(arch.image.size());
  for (auto& e : eps) e = normal(replay);
  const int t = std::uniform_int_distribution<int>(1, s.step_count())(replay);
  const double ab = s.alpha_bar(t);
  const Vec<float> xt = float(std::sqrt(ab)) * ex.x0 + float(std::sqrt(1 - ab)) * eps;
  const Image pred = denoise(net, xt.cast<double>(), t, ds.records[0].concepts[0]);
  const double want = (eps.cast<double>() - pred).squaredNorm();

  AdamState<float> state(arch);
  const double got = train_step(params, state, {&ex}, s, TrainConfig{}, rng);
  EXPECT_NEAR(got, want, 1e-4 * want);
}

TEST(TrainStep, SgdMovesAgainstTheGradient) {
  const auto& f = fixture();
  auto params = DenoiserParams<float>::initialize(f.arch, 4);
  const auto before = params;
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::kSgd;
  cfg.learning_rate = 1e-3;
  std::vector<const TrainExample*> batch{&f.examples[3], &f.examples[9]};

  // Recompute the gradient on the same draws.
  Rng replay(6);
  std::normal_distribution<float> normal(0.f, 1.f);
  std::uniform_int_distribution<int> tdist(1, f.schedule.step_count());
  std::vector<Vec<float>> eps(2);
  std::vector<int> t(2);
  for (int i = 0; i < 2; ++i) {
    eps[i].resize(f.arch.image.size());
    for (auto& e : eps[i]) e = normal(replay);
    t[i] = tdist(replay);
  }
  auto grad = DenoiserParams<float>::zeros(f.arch);
  composed_loss_and_grad(MlpDenoiser<float>(params), batch, eps, t, f.schedule, &grad);

  AdamState<float> state(f.arch);
  Rng rng(6);
  train_step(params, state, batch, f.schedule, cfg, rng);
  EXPECT_TRUE(params.w3.isApprox(before.w3 - 1e-3f * grad.w3, 1e-6f));
  EXPECT_TRUE(params.b1.isApprox(before.b1 - 1e-3f * grad.b1, 1e-6f));
}

TEST(TrainStep, ClippingBoundsTheUpdate) {
  const auto& f = fixture();
  auto params = DenoiserParams<float>::initialize(f.arch, 4);
  const auto before = params;
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::kSgd;
  cfg.learning_rate = 1.0;
  cfg.clip_norm = 0.5;
  AdamState<float> state(f.arch);
  Rng rng(1);
  train_step(params, state, {&f.examples[0]}, f.schedule, cfg, rng);
  double moved = 0.0;
  std::vector<const float*> old;
  before.for_each_block([&](const char*, const auto& m) { old.push_back(m.data()); });
  std::size_t b = 0;
  params.for_each_block([&](const char*, const auto& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double d = m.data()[i] - old[b][i];
      moved += d * d;
    }
    ++b;
  });
  EXPECT_LE(std::sqrt(moved), 0.5 * (1 + 1e-4));
  EXPECT_GT(std::sqrt(moved), 0.0);
}

TEST(TrainStep, Errors) {
  const auto& f = fixture();
  auto params = DenoiserParams<float>::initialize(f.arch, 1);
  AdamState<float> state(f.arch);
  Rng rng(1);
  EXPECT_THROW(train_step(params, state, {}, f.schedule, TrainConfig{}, rng), ParameterError);
  params.b3[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    train_step(params, state, {&f.examples[0]}, f.schedule, TrainConfig{}, rng, 7);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 7"), std::string::npos);
  }
}

// Duplicating a concept doubles its summand: the gradient of
// ||eps - 2 f(c)||^2 is 4x the gradient of ||eps / 2 - f(c)||^2.
TEST(TrainObjective, DuplicatedConceptScalesGradient) {
  Architecture a = fixture_arch(TaskKind::kLocal, {4, 4, 1});
  a.hidden = 8;
  MlpDenoiser<double> net(DenoiserParams<double>::initialize(a, 9));
  Rng rng(2);
  const Image xt = standard_normal_image(16, rng);
  const Image eps = standard_normal_image(16, rng);
  const auto c = ConceptVector::coordinate(0.4, 0.6);
  const auto dup = grad_params(net, xt, 30, ConceptSet({c, c}), eps);
  const auto single = grad_params(net, xt, 30, ConceptSet({c}), Image(eps / 2.0));
  std::vector<double> x, y;
  dup.for_each_block([&](const char*, const auto& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) x.push_back(m.data()[i]);
  });
  single.for_each_block([&](const char*, const auto& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) y.push_back(4.0 * m.data()[i]);
  });
  ASSERT_EQ(x.size(), y.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(x[i], y[i], 1e-12 * (1 + std::abs(y[i])));
  }
}

TEST(TrainLoop, SingleStepBudget) {
  const auto r = run(4, 1);
  EXPECT_EQ(r.losses.size(), 1u);
  EXPECT_EQ(r.steps_completed, 1);
  EXPECT_FALSE(r.params == DenoiserParams<float>::initialize(fixture().arch, 1));
}

TEST(TrainLoop, SameSeedIsBitwiseIdentical) {
  const auto a = run(8, 40), b = run(8, 40);
  EXPECT_TRUE(a.params == b.params);
  EXPECT_EQ(a.losses, b.losses);
  const auto c = run(8, 40, 6);
  EXPECT_FALSE(a.params == c.params);
}

TEST(TrainLoop, ProgressOnFixture) {
  const auto r = run(32, 500);
  for (double l : r.losses) {
    ASSERT_TRUE(std::isfinite(l));
    ASSERT_GE(l, 0.0);
  }
  const auto sm = smooth(r.losses, 50);
  EXPECT_LT(sm.back(), 0.5 * sm[49]);
  EXPECT_NEAR(sm[49], kInitialSmoothed, 0.05 * kInitialSmoothed);
  EXPECT_NEAR(sm.back(), kFinalSmoothed, 0.1 * kFinalSmoothed);
}

TEST(TrainLoop, DoubledBatchReachesSimilarLoss) {
  const double base = smooth(run(32, 500).losses, 50).back();
  const double doubled = smooth(run(64, 500).losses, 50).back();
  EXPECT_NEAR(doubled, base, 0.2 * base);
}

TEST(TrainLoop, Errors) {
  const auto& f = fixture();
  TrainConfig cfg;
  EXPECT_THROW(train_loop(DenoiserParams<float>::initialize(f.arch, 1), {}, f.schedule, cfg),
               ParameterError);
  EXPECT_THROW(train_loop(DenoiserParams<float>::initialize(f.arch, 1), f.examples,
                          make_linear_schedule(10, 1e-4, 2e-2), cfg),
               ConfigError);
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.learning_rate = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(TrainLoop, CheckpointHookCadence) {
  const auto& f = fixture();
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.step_budget = 10;
  cfg.checkpoint_every = 4;
  std::vector<int> seen;
  train_loop(DenoiserParams<float>::initialize(f.arch, 1), f.examples, f.schedule, cfg,
             [&](int step, const DenoiserParams<float>&) { seen.push_back(step); });
  EXPECT_EQ(seen, (std::vector<int>{4, 8}));
}

}  // namespace
}  // namespace invgen
