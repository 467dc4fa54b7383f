#include <gtest/gtest.h>

#include <cmath>

#include "cdpm/rng.hpp"
#include "cdpm/schedule.hpp"

using namespace cdpm;

namespace {
NoiseSchedule three_step(VarianceMode mode = VarianceMode::Beta) {
  return NoiseSchedule({0.1, 0.2, 0.3}, mode);
}
}  // namespace

TEST(Schedule, LinearEndpoints) {
  const auto s = make_linear_schedule(1000, 1e-4, 0.02);
  EXPECT_EQ(s.steps(), 1000u);
  EXPECT_DOUBLE_EQ(s.beta(0), 1e-4);
  EXPECT_NEAR(s.beta(999), 0.02, 1e-15);
  EXPECT_NEAR(s.beta(1) - s.beta(0), (0.02 - 1e-4) / 999.0, 1e-15);
}

TEST(Schedule, SingleStep) {
  const auto s = make_linear_schedule(1, 0.01, 0.02);
  EXPECT_EQ(s.steps(), 1u);
  EXPECT_DOUBLE_EQ(s.beta(0), 0.01);
}

TEST(Schedule, ThreeStepAlphaBar) {
  const auto s = three_step();
  EXPECT_NEAR(s.alpha_bar(0), 0.9, 1e-15);
  EXPECT_NEAR(s.alpha_bar(1), 0.72, 1e-15);
  EXPECT_NEAR(s.alpha_bar(2), 0.504, 1e-15);
}

TEST(Schedule, RejectsInvalid) {
  EXPECT_THROW(make_linear_schedule(0, 1e-4, 0.02), std::invalid_argument);
  EXPECT_THROW(make_linear_schedule(10, 0.0, 0.02), std::invalid_argument);
  EXPECT_THROW(make_linear_schedule(10, 1e-4, 1.0), std::invalid_argument);
  EXPECT_THROW(make_linear_schedule(10, 1e-4, std::nan("")), std::invalid_argument);
  EXPECT_THROW(three_step().alpha_bar(3), std::out_of_range);
}

TEST(Schedule, AlphaBarMatchesLogSpace) {
  const auto s = make_linear_schedule(1000, 1e-4, 0.02);
  double log_sum = 0.0;
  for (std::size_t t = 0; t < 1000; ++t) {
    log_sum += std::log1p(-s.beta(t));
    EXPECT_NEAR(s.alpha_bar(t) / std::exp(log_sum), 1.0, 1e-10) << "t=" << t;
  }
}

TEST(Schedule, ChainCompositionMoments) {
  // Propagate mean and variance of x_s = sqrt(1-b) x_{s-1} + sqrt(b) e exactly.
  const auto s = make_linear_schedule(1000, 1e-4, 0.02);
  const double x0 = 0.7;
  double mean = x0, var = 0.0;
  for (std::size_t t = 0; t < 1000; ++t) {
    mean *= std::sqrt(1.0 - s.beta(t));
    var = (1.0 - s.beta(t)) * var + s.beta(t);
    EXPECT_NEAR(mean, std::sqrt(s.alpha_bar(t)) * x0, 1e-12);
    EXPECT_NEAR(var, 1.0 - s.alpha_bar(t), 1e-12);
  }
}

TEST(Schedule, OneMinusAlphaBarStrictlyIncreasing) {
  const auto s = make_linear_schedule(1000, 1e-4, 0.02);
  for (std::size_t t = 1; t < 1000; ++t) EXPECT_GT(1.0 - s.alpha_bar(t), 1.0 - s.alpha_bar(t - 1));
}

TEST(ForwardSample, ClosedForm) {
  const auto s = three_step();
  const std::vector<double> x0{1.0, -0.5}, eps{0.25, 2.0};
  const auto xt = forward_sample(x0, 1, eps, s);
  EXPECT_NEAR(xt[0], std::sqrt(0.72) * 1.0 + std::sqrt(0.28) * 0.25, 1e-15);
  EXPECT_NEAR(xt[1], std::sqrt(0.72) * -0.5 + std::sqrt(0.28) * 2.0, 1e-15);
  const std::vector<double> short_eps{1.0};
  EXPECT_THROW(forward_sample(x0, 1, short_eps, s), std::invalid_argument);
  EXPECT_THROW(forward_sample(x0, 3, eps, s), std::out_of_range);
}

TEST(ForwardSample, MonteCarloMoments) {
  const auto s = make_linear_schedule(1000, 1e-4, 0.02);
  Rng rng(11);
  const double x0 = 0.6;
  for (std::size_t t : {250u, 500u, 999u}) {
    const std::size_t n = 10000;
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = rng.normal();
      const double x = forward_sample(std::vector<double>{x0}, t, std::vector<double>{e}, s)[0];
      sum += x;
      sq += x * x;
    }
    const double m = sum / n, v = sq / n - m * m;
    // The mean tolerance is 2% of the standard deviation: near t = T-1 the
    // mean itself is close to zero and a relative bound is meaningless.
    const double sd = std::sqrt(1.0 - s.alpha_bar(t));
    EXPECT_NEAR(m, std::sqrt(s.alpha_bar(t)) * x0, 0.02 * sd) << "t=" << t;
    EXPECT_NEAR(v / (1.0 - s.alpha_bar(t)), 1.0, 0.02) << "t=" << t;
  }
}

TEST(PosteriorMean, ZeroEpsDividesBySqrtAlpha) {
  const auto s = three_step();
  const auto mu = posterior_mean_from_eps(std::vector<double>{0.9}, std::vector<double>{0.0}, 2, s);
  EXPECT_NEAR(mu[0], 0.9 / std::sqrt(0.7), 1e-15);
}

TEST(PosteriorMean, HandEvaluatedValue) {
  const auto s = three_step();
  const auto mu = posterior_mean_from_eps(std::vector<double>{0.0}, std::vector<double>{1.0}, 1, s);
  EXPECT_NEAR(mu[0], -(0.2 / std::sqrt(0.28)) / std::sqrt(0.8), 1e-15);
}

TEST(PosteriorMean, SymbolicExpansionAtLastStep) {
  // x_t = sqrt(ab) x0 + sqrt(1-ab) e, so
  // mu = sqrt(ab)/sqrt(a) x0 + (sqrt(1-ab) - b/sqrt(1-ab))/sqrt(a) e.
  const auto s = three_step();
  const double x0 = 0.37, e = -1.3, ab = 0.504, a = 0.7, b = 0.3;
  const auto xt = forward_sample(std::vector<double>{x0}, 2, std::vector<double>{e}, s);
  const auto mu = posterior_mean_from_eps(xt, std::vector<double>{e}, 2, s);
  const double expected = std::sqrt(ab) / std::sqrt(a) * x0 + (std::sqrt(1 - ab) - b / std::sqrt(1 - ab)) / std::sqrt(a) * e;
  EXPECT_NEAR(mu[0], expected, 1e-14);
}

TEST(PosteriorMean, Superposition) {
  const auto s = make_linear_schedule(50, 2e-3, 0.4);
  Rng rng(5);
  std::vector<double> x1(8), x2(8), e1(8), e2(8);
  for (std::size_t i = 0; i < 8; ++i) {
    x1[i] = rng.normal();
    x2[i] = rng.normal();
    e1[i] = rng.normal();
    e2[i] = rng.normal();
  }
  const double a = 0.7, b = -1.9;
  std::vector<double> xs(8), es(8);
  for (std::size_t i = 0; i < 8; ++i) {
    xs[i] = a * x1[i] + b * x2[i];
    es[i] = a * e1[i] + b * e2[i];
  }
  for (std::size_t t : {0u, 17u, 49u}) {
    const auto m1 = posterior_mean_from_eps(x1, e1, t, s);
    const auto m2 = posterior_mean_from_eps(x2, e2, t, s);
    const auto ms = posterior_mean_from_eps(xs, es, t, s);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(ms[i], a * m1[i] + b * m2[i], 1e-12);
  }
}

TEST(ReverseVariance, Modes) {
  const auto beta = three_step(VarianceMode::Beta);
  EXPECT_DOUBLE_EQ(reverse_variance(2, beta), 0.3);
  const auto tilde = three_step(VarianceMode::BetaTilde);
  EXPECT_DOUBLE_EQ(reverse_variance(0, tilde), 0.0);
  EXPECT_NEAR(reverse_variance(2, tilde), (1 - 0.72) / (1 - 0.504) * 0.3, 1e-15);
  EXPECT_NEAR(reverse_variance(2, tilde), 0.16935, 1e-5);
  EXPECT_THROW(reverse_variance(3, tilde), std::out_of_range);
}

TEST(VarianceModeNames, RoundTrip) {
  for (auto m : {VarianceMode::Beta, VarianceMode::BetaTilde})
    EXPECT_EQ(variance_mode_from_string(to_string(m)), m);
  EXPECT_THROW(variance_mode_from_string("cosine"), std::invalid_argument);
}
