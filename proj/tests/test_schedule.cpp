// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "invgen/schedule.hpp"

namespace invgen {
namespace {

TEST(Schedule, DefaultHasThousandSteps) {
  const auto s = make_default_schedule();
  EXPECT_EQ(s.step_count(), 1000);
  EXPECT_DOUBLE_EQ(s.beta(1), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta(1000), 2e-2);
}

TEST(Schedule, SingleStep) {
  const auto s = make_linear_schedule(1, 0.1, 0.1);
  EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.9);
}

// Reference values from an exact rational cumulative product.
TEST(Schedule, AlphaBarMatchesExactProduct) {
  const auto s = make_default_schedule();
  const std::pair<int, double> expected[] = {{1, 0.9999},
                                             {10, 0.9981052047858346},
                                             {100, 0.8970181456749604},
                                             {500, 0.07858724288177824},
                                             {1000, 4.0358297653756835e-05}};
  for (const auto& [t, v] : expected) {
    EXPECT_NEAR(s.alpha_bar(t) / v, 1.0, 1e-10) << "t=" << t;
  }
}

TEST(Schedule, BetasAreLinear) {
  const auto s = make_linear_schedule(5, 0.1, 0.5);
  for (int t = 1; t <= 5; ++t) EXPECT_NEAR(s.beta(t), 0.1 * t, 1e-15);
}

TEST(Schedule, RejectsBadArguments) {
  EXPECT_THROW(make_linear_schedule(0, 1e-4, 2e-2), ParameterError);
  EXPECT_THROW(make_linear_schedule(10, 0.0, 2e-2), ParameterError);
  EXPECT_THROW(make_linear_schedule(10, 0.3, 0.2), ParameterError);
  EXPECT_THROW(make_linear_schedule(10, 0.1, 1.0), ParameterError);
  try {
    make_linear_schedule(10, 0.3, 0.2);
  } catch (const ParameterError& e) {
    EXPECT_NE(std::string(e.what()).find("beta_end"), std::string::npos);
  }
}

TEST(Schedule, TimestepsAreOneBased) {
  const auto s = make_linear_schedule(50, 1e-3, 1e-2);
  EXPECT_THROW(s.alpha_bar(0), ParameterError);
  EXPECT_THROW(s.alpha_bar(51), ParameterError);
  EXPECT_NO_THROW(s.alpha_bar(50));
}

TEST(NoiseImage, ZeroNoiseScalesSignal) {
  const auto s = make_default_schedule();
  Image x0 = Image::LinSpaced(16, -1.0, 1.0);
  const Image xt = noise_image(x0, {Image::Zero(16), 300}, s);
  EXPECT_TRUE(xt.isApprox(std::sqrt(s.alpha_bar(300)) * x0, 1e-15));
}

TEST(NoiseImage, ZeroSignalScalesNoise) {
  const auto s = make_default_schedule();
  Rng rng(3);
  const Image eps = standard_normal_image(16, rng);
  const Image xt = noise_image(Image::Zero(16), {eps, 700}, s);
  EXPECT_TRUE(xt.isApprox(std::sqrt(1.0 - s.alpha_bar(700)) * eps, 1e-15));
}

TEST(NoiseImage, ShapeMismatch) {
  const auto s = make_default_schedule();
  EXPECT_THROW(noise_image(Image::Zero(4), {Image::Zero(5), 1}, s), ShapeError);
}

TEST(NoiseImage, NonFiniteInput) {
  const auto s = make_default_schedule();
  Image x0 = Image::Zero(4);
  x0[2] = std::nan("");
  EXPECT_THROW(noise_image(x0, {Image::Zero(4), 1}, s), NumericError);
}

// Variance of x_t over eps is 1 - abar_t per pixel.
TEST(NoiseImage, MonteCarloVariance) {
  const auto s = make_default_schedule();
  const int t = 400, n = 100000, d = 4;
  Image x0(d);
  x0 << 0.2, -0.5, 1.0, 0.0;
  Rng rng(11);
  Image sum = Image::Zero(d), sq = Image::Zero(d);
  for (int i = 0; i < n; ++i) {
    const Image xt = noise_image(x0, {standard_normal_image(d, rng), t}, s);
    sum += xt;
    sq += xt.cwiseProduct(xt);
  }
  const double v = 1.0 - s.alpha_bar(t);
  // Standard error of a normal sample variance: v * sqrt(2 / (n - 1)).
  const double se = v * std::sqrt(2.0 / (n - 1));
  for (int p = 0; p < d; ++p) {
    const double mean = sum[p] / n;
    const double var = (sq[p] - n * mean * mean) / (n - 1);
    EXPECT_NEAR(var, v, 3 * se) << "pixel " << p;
  }
}

TEST(TimestepRange, DrawStaysInside) {
  const auto s = make_default_schedule();
  const TimestepRange r{5, 9};
  r.validate(s);
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const int t = r.draw(s, rng);
    EXPECT_GE(t, 5);
    EXPECT_LE(t, 9);
  }
  EXPECT_THROW((TimestepRange{0, 5}.validate(s)), ParameterError);
  EXPECT_THROW((TimestepRange{10, 5}.validate(s)), ParameterError);
  EXPECT_THROW((TimestepRange{1, 1001}.validate(s)), ParameterError);
  EXPECT_EQ(TimestepRange{}.resolved_hi(s), 1000);
}

}  // namespace
}  // namespace invgen
