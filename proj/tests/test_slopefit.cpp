#include <gtest/gtest.h>

#include <random>
#include <set>
#include <sstream>

#include "lanekeeper/slopefit.hpp"
#include "support/oracles.hpp"

using namespace lanekeeper;
using namespace lanekeeper::slopefit;

namespace {

// A segment of the requested slope centered at x = cx.
LineSegment with_slope(double slope, int cx = 100) {
  return LineSegment{cx - 10, 0, cx + 10, static_cast<int>(std::lround(20 * slope))};
}

std::vector<SlopeSample> generated(const std::function<double(double)>& f, int n = 61, double lo = -3.0,
                                   double hi = 3.0) {
  std::vector<SlopeSample> out;
  for (int i = 0; i < n; ++i) {
    const double x = lo + (hi - lo) * i / (n - 1);
    out.push_back({x, f(x), i});
  }
  return out;
}

}  // namespace

TEST(Features, Examples) {
  const std::vector<FrameSegments> one{{0, 0.1, 640, {with_slope(1), with_slope(-1)}}};
  const auto plain = mean_slope_features(one, SlopeMode::kPlain);
  ASSERT_EQ(plain.size(), 1u);
  EXPECT_EQ(plain[0].mean_slope, 0.0);
  EXPECT_EQ(plain[0].yaw, 0.1);

  const std::vector<FrameSegments> three{{0, 0.0, 640, {with_slope(2), with_slope(4), with_slope(-1)}}};
  EXPECT_EQ(mean_slope_features(three, SlopeMode::kSignBalanced)[0].mean_slope, 1.0);

  const std::vector<FrameSegments> sides{
      {0, 0.0, 640, {with_slope(2, 100), with_slope(4, 120), with_slope(-1, 500)}}};
  EXPECT_EQ(mean_slope_features(sides, SlopeMode::kSideBalanced)[0].mean_slope, 1.0);

  std::vector<FrameSegments> constant;
  for (int i = 0; i < 10; ++i) constant.push_back({i, 0.0, 640, {with_slope(2, 100), with_slope(2, 400)}});
  for (const auto& s : mean_slope_features(constant, SlopeMode::kWindowedMedian)) EXPECT_EQ(s.mean_slope, 2.0);
}

TEST(Features, SkipsFramesWithoutFiniteSlopes) {
  const std::vector<FrameSegments> frames{{0, 0.0, 640, {}}, {1, 0.0, 640, {LineSegment{5, 0, 5, 90}}},
                                          {2, 0.3, 640, {with_slope(3)}}};
  const auto s = mean_slope_features(frames, SlopeMode::kPlain);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].frame_id, 2);
}

TEST(Features, WindowedMedianUsesTrailingWindow) {
  std::vector<FrameSegments> frames;
  const std::vector<double> slopes{1, 5, 2, 9, 3};
  for (std::size_t i = 0; i < slopes.size(); ++i) {
    frames.push_back({static_cast<std::int64_t>(i), 0.0, 640, {with_slope(slopes[i])}});
  }
  const auto s = mean_slope_features(frames, SlopeMode::kWindowedMedian, 3);
  ASSERT_EQ(s.size(), 5u);
  EXPECT_EQ(s[2].mean_slope, 2.0);  // median {1,5,2}
  EXPECT_EQ(s[3].mean_slope, 5.0);  // median {5,2,9}
  EXPECT_EQ(s[4].mean_slope, 3.0);  // median {2,9,3}
}

TEST(Baseline, Examples) {
  const std::vector<SlopeSample> two{{0.0, 1.0, 0}, {1.0, 3.0, 1}};
  const BaselineFit b = fit_baseline(two);
  EXPECT_EQ(b.mean_yaw, 2.0);
  EXPECT_EQ(b.sse, 2.0);
  EXPECT_EQ(b.r2, 0.0);
  EXPECT_EQ(fit_baseline(generated([](double) { return 0.7; })).sse, 0.0);
  EXPECT_THROW(fit_baseline({}), std::invalid_argument);
}

TEST(Split, EightyTwentyAndDeterministic) {
  const auto s = generated([](double x) { return x; }, 23);
  const SampleSplit a = split_samples(s, 5), b = split_samples(s, 5);
  EXPECT_EQ(a.train.size(), 18u);
  EXPECT_EQ(a.test.size(), 5u);
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].frame_id, b.train[i].frame_id);
  std::set<std::int64_t> ids;
  for (const auto& v : a.train) ids.insert(v.frame_id);
  for (const auto& v : a.test) ids.insert(v.frame_id);
  EXPECT_EQ(ids.size(), s.size());
}

TEST(Linear, ExactLineAndConstant) {
  const LinearFit f = fit_linear(generated([](double x) { return 2 * x + 1; }), 3);
  EXPECT_NEAR(f.slope, 2.0, 1e-12);
  EXPECT_NEAR(f.intercept, 1.0, 1e-12);
  EXPECT_NEAR(f.test_r2, 1.0, 1e-12);
  EXPECT_EQ(fit_linear(generated([](double) { return -0.4; }), 3).slope, 0.0);
  EXPECT_THROW(fit_linear(generated([](double x) { return x; }, 4), 0), std::invalid_argument);
}

TEST(Linear, MatchesNormalEquations) {
  std::mt19937_64 rng(51);
  std::normal_distribution<double> eps(0.0, 0.3);
  std::uniform_real_distribution<double> ux(-4.0, 4.0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::vector<SlopeSample> s;
    for (int i = 0; i < 80; ++i) {
      const double x = ux(rng);
      s.push_back({x, 0.5 * x + eps(rng), i});
    }
    const LinearFit f = fit_linear(s, seed);
    const auto [a, b] = oracle::normal_equation_line(split_samples(s, seed).train);
    EXPECT_NEAR(f.slope, a, 1e-9);
    EXPECT_NEAR(f.intercept, b, 1e-9);
    EXPECT_NEAR(f.slope, 0.5, 0.1);
    const auto [a2, b2] = least_squares_line(s);
    const auto [a3, b3] = oracle::normal_equation_line(s);
    EXPECT_NEAR(a2, a3, 1e-9);
    EXPECT_NEAR(b2, b3, 1e-9);
  }
}

TEST(Sigmoid, RecoversGeneratingParameters) {
  const SigmoidParams truth{2.0, 1.5, 0.3};
  const auto s = generated([&](double x) { return evaluate(truth, x); });
  const auto fit = fit_sigmoid(s);
  EXPECT_TRUE(fit.converged);
  EXPECT_NEAR(fit.params.L, 2.0, 1e-3);
  EXPECT_NEAR(fit.params.k, 1.5, 1e-3);
  EXPECT_NEAR(fit.params.x0, 0.3, 1e-3);
  EXPECT_FALSE(fit.degenerate);
}

TEST(Sigmoid, ConstantDataIsFlaggedDegenerate) {
  const auto fit = fit_sigmoid(generated([](double) { return 0.25; }));
  EXPECT_TRUE(fit.degenerate);
  EXPECT_LT(fit.sse, 1e-12);
  EXPECT_THROW(fit_sigmoid(generated([](double x) { return x; }, 2)), std::invalid_argument);
}

TEST(Arctan, RecoversGeneratingParameters) {
  const ArctanParams truth{1.0, 2.0, 0.0, 0.5};
  const auto s = generated([&](double x) { return evaluate(truth, x); });
  const auto fit = fit_arctan(s);
  EXPECT_TRUE(fit.converged);
  EXPECT_NEAR(fit.params.k, 1.0, 1e-3);
  EXPECT_NEAR(fit.params.w, 2.0, 1e-3);
  EXPECT_NEAR(fit.params.x0, 0.0, 1e-3);
  EXPECT_NEAR(fit.params.y0, 0.5, 1e-3);
}

TEST(Jacobian, SigmoidMatchesFiniteDifferences) {
  const auto s = generated([](double x) { return std::sin(x); }, 15);
  const SigmoidParams p{1.3, -0.8, 0.4};
  const auto jac = residual_jacobian(p, s);
  ASSERT_EQ(jac.size(), s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto num = oracle::central_gradient<3>(
        [&](const std::array<double, 3>& q) { return s[i].yaw - evaluate(SigmoidParams{q[0], q[1], q[2]}, s[i].mean_slope); },
        {p.L, p.k, p.x0});
    for (int j = 0; j < 3; ++j) EXPECT_LT(oracle::relative_error(jac[i][j], num[j]), 1e-4) << i << "," << j;
  }
}

TEST(Jacobian, ArctanMatchesFiniteDifferences) {
  const auto s = generated([](double x) { return std::cos(x); }, 15);
  const ArctanParams p{0.7, 1.9, -0.2, 0.1};
  const auto jac = residual_jacobian(p, s);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto num = oracle::central_gradient<4>(
        [&](const std::array<double, 4>& q) {
          return s[i].yaw - evaluate(ArctanParams{q[0], q[1], q[2], q[3]}, s[i].mean_slope);
        },
        {p.k, p.w, p.x0, p.y0});
    for (int j = 0; j < 4; ++j) EXPECT_LT(oracle::relative_error(jac[i][j], num[j]), 1e-4) << i << "," << j;
  }
}

TEST(Jacobian, ReciprocalMatchesFiniteDifferences) {
  const auto s = generated([](double x) { return 0.3 * x; }, 11, 1.0, 4.0);
  const double x0 = 0.5, k = -0.2;
  const auto jac = reciprocal_residual_jacobian(x0, k, s);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto num = oracle::central_gradient<2>(
        [&](const std::array<double, 2>& q) { return s[i].yaw - (-1.0 / (s[i].mean_slope + q[0]) + q[1]); },
        {x0, k});
    for (int j = 0; j < 2; ++j) EXPECT_LT(oracle::relative_error(jac[i][j], num[j]), 1e-4) << i << "," << j;
  }
}

TEST(Piecewise, LinearDataUsesMiddleBranchOnly) {
  const auto s = generated([](double x) { return 0.5 * x - 1.0; }, 40);
  const std::vector<double> grid{-4.0, 4.0};
  const PiecewiseFit f = fit_piecewise(s, grid);
  EXPECT_EQ(f.params.r1, -4.0);
  EXPECT_EQ(f.params.r2, 4.0);
  EXPECT_NEAR(f.params.m, 0.5, 1e-9);
  EXPECT_NEAR(f.params.b, -1.0, 1e-9);
  EXPECT_LT(f.sse, 1e-18 + fit_linear(s, 0).train_sse + 1e-12);
}

TEST(Piecewise, RecoversGeneratingParameters) {
  std::vector<SlopeSample> s = generated([](double) { return 0.0; }, 97);
  const std::vector<double> grid = decile_grid(s);
  ASSERT_EQ(grid.size(), 11u);
  PiecewiseParams truth{1.0, -1.0, 0.5, 0.2, -1.0, 1.0, grid[3], grid[7]};
  for (auto& v : s) v.yaw = evaluate(truth, v.mean_slope);
  const PiecewiseFit f = fit_piecewise(s, grid);
  EXPECT_LT(f.sse, 1e-6);
  EXPECT_EQ(f.params.r1, truth.r1);
  EXPECT_EQ(f.params.r2, truth.r2);
  EXPECT_NEAR(f.params.x0, truth.x0, 1e-2);
  EXPECT_NEAR(f.params.k1, truth.k1, 1e-2);
  EXPECT_NEAR(f.params.m, truth.m, 1e-2);
  EXPECT_NEAR(f.params.b, truth.b, 1e-2);
  EXPECT_NEAR(f.params.x1, truth.x1, 1e-2);
  EXPECT_NEAR(f.params.k2, truth.k2, 1e-2);
}

TEST(Piecewise, TooFewSamples) {
  const auto s = generated([](double x) { return x; }, 7);
  EXPECT_THROW(fit_piecewise(s, decile_grid(s)), std::invalid_argument);
}

TEST(Study, EveryFitAtLeastAsGoodAsBaselineOnTrain) {
  std::mt19937_64 rng(52);
  std::normal_distribution<double> noise(0.0, 0.2);
  std::uniform_real_distribution<double> ux(-2.0, 2.0);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<SlopeSample> s;
    for (int i = 0; i < 60; ++i) {
      const double x = ux(rng);
      s.push_back({x, 0.3 * std::tanh(x) + noise(rng), i});
    }
    const auto fits = run_study(s, static_cast<std::uint64_t>(trial));
    ASSERT_FALSE(fits.empty());
    const BaselineFit base = fit_baseline(split_samples(s, static_cast<std::uint64_t>(trial)).train);
    for (const auto& f : fits) EXPECT_LE(f.train_sse, base.sse * (1 + 1e-12) + 1e-12) << f.model;
    const auto again = run_study(s, static_cast<std::uint64_t>(trial));
    for (std::size_t i = 0; i < fits.size(); ++i) EXPECT_EQ(fits[i].train_sse, again[i].train_sse);
  }
}

TEST(Metrics, SseAndR2) {
  const std::vector<double> y{1, 2, 3};
  EXPECT_EQ(sum_squared_error(std::vector<double>{1, 2, 4}, y), 1.0);
  EXPECT_DOUBLE_EQ(r_squared(1.0, y), 0.5);
  EXPECT_EQ(r_squared(0.0, std::vector<double>{2, 2}), 1.0);
  EXPECT_EQ(r_squared(0.5, std::vector<double>{2, 2}), 0.0);
}

TEST(Csv, SamplesHaveHeader) {
  std::ostringstream out;
  const std::vector<SlopeSample> s{{0.5, -0.1, 3}};
  write_samples_csv(out, s);
  EXPECT_NE(out.str().find('\n'), std::string::npos);
  EXPECT_NE(out.str().find("0.5"), std::string::npos);
}
