// Slope-vs-yaw study: per-frame mean-slope features and the family of fits
// (constant, linear, logistic sigmoid, arctangent, piecewise
// reciprocal-linear-reciprocal) used to test whether mean lane-line slope
// predicts the yaw rate.
#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lanekeeper/perception.hpp"

namespace lanekeeper::slopefit {

struct SlopeSample {
  double mean_slope = 0.0;
  double yaw = 0.0;
  std::int64_t frame_id = 0;
};

// Detected segments of one frame plus the yaw rate commanded on it.
struct FrameSegments {
  std::int64_t frame_id = 0;
  double yaw = 0.0;
  int image_width = 0;
  std::vector<LineSegment> segments;
};

enum class SlopeMode { kPlain, kSignBalanced, kSideBalanced, kWindowedMedian };

SlopeMode parse_slope_mode(std::string_view name);
std::string_view to_string(SlopeMode mode);

inline constexpr int kMedianWindow = 10;

// One sample per frame with at least one finite-slope segment. When a
// balanced mode finds only one group populated, that group's mean is used.
// The windowed median covers the trailing `window` frames that produced a
// value, the current one included.
std::vector<SlopeSample> mean_slope_features(std::span<const FrameSegments> frames, SlopeMode mode,
                                             int window = kMedianWindow);

double sum_squared_error(std::span<const double> predicted, std::span<const double> actual);
// 1 - SSE/SST. A constant target gives 1 for an exact fit, else 0.
double r_squared(double sse, std::span<const double> actual);

struct BaselineFit {
  double mean_yaw = 0.0;
  double sse = 0.0;
  double r2 = 0.0;
};

// Constant mean-yaw predictor.
BaselineFit fit_baseline(std::span<const SlopeSample> samples);

struct SampleSplit {
  std::vector<SlopeSample> train;
  std::vector<SlopeSample> test;
};

// Seeded Fisher-Yates shuffle, then the first floor(4n/5) samples train.
SampleSplit split_samples(std::span<const SlopeSample> samples, std::uint64_t seed);

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double train_sse = 0.0;
  double test_sse = 0.0;
  double train_r2 = 0.0;
  double test_r2 = 0.0;
};

inline constexpr std::size_t kMinLinearSamples = 5;

// Ordinary least squares on the train partition of split_samples(seed).
LinearFit fit_linear(std::span<const SlopeSample> samples, std::uint64_t split_seed);

// Closed-form OLS on all samples; slope 0 when x has no spread.
std::pair<double, double> least_squares_line(std::span<const SlopeSample> samples);

// f(x) = L / (1 + exp(-k (x - x0)))
struct SigmoidParams {
  double L = 0.0, k = 1.0, x0 = 0.0;
};

// f(x) = k atan(w (x - x0)) + y0
struct ArctanParams {
  double k = 0.0, w = 1.0, x0 = 0.0, y0 = 0.0;
};

double evaluate(const SigmoidParams& p, double x);
double evaluate(const ArctanParams& p, double x);

// Rows of d(y_i - f(x_i)) / d(params), parameters in declaration order.
std::vector<std::array<double, 3>> residual_jacobian(const SigmoidParams& p, std::span<const SlopeSample> samples);
std::vector<std::array<double, 4>> residual_jacobian(const ArctanParams& p, std::span<const SlopeSample> samples);

SigmoidParams default_sigmoid_init(std::span<const SlopeSample> samples);
ArctanParams default_arctan_init(std::span<const SlopeSample> samples);
// Flat curves equal to the mean-yaw constant (k = 0).
SigmoidParams baseline_sigmoid_init(std::span<const SlopeSample> samples);
ArctanParams baseline_arctan_init(std::span<const SlopeSample> samples);

struct SolverOptions {
  int max_iterations = 500;
  double relative_tolerance = 1e-8;
};

template <typename Params>
struct CurveFit {
  Params params;
  double sse = 0.0;
  int iterations = 0;
  bool converged = false;
  // The fitted curve is flat over the sample range.
  bool degenerate = false;
};

// Levenberg-Marquardt (damped Gauss-Newton) minimisation of SSE. A step is
// only accepted if it lowers SSE, so the result never exceeds the SSE at init.
CurveFit<SigmoidParams> fit_sigmoid(std::span<const SlopeSample> samples, std::optional<SigmoidParams> init = {},
                                    const SolverOptions& options = {});
CurveFit<ArctanParams> fit_arctan(std::span<const SlopeSample> samples, std::optional<ArctanParams> init = {},
                                  const SolverOptions& options = {});

// y = -1/(x + x0) + k1 for x < r1, m x + b for r1 <= x <= r2,
// y = -1/(x + x1) + k2 for x > r2. Poles stay outside their branch:
// -x0 >= r1 and -x1 <= r2.
struct PiecewiseParams {
  double x0 = 0.0, k1 = 0.0, m = 0.0, b = 0.0, x1 = 0.0, k2 = 0.0, r1 = 0.0, r2 = 0.0;
};

double evaluate(const PiecewiseParams& p, double x);

// Rows of d(y_i - g(x_i)) / d(x0, k) for g(x) = -1/(x + x0) + k.
std::vector<std::array<double, 2>> reciprocal_residual_jacobian(double x0, double k,
                                                                std::span<const SlopeSample> samples);

inline constexpr std::size_t kPiecewiseParamCount = 8;

struct PiecewiseFit {
  PiecewiseParams params;
  double sse = 0.0;
  std::size_t candidates_evaluated = 0;
};

// Breakpoints at min + j * range / 10, j = 0..10.
std::vector<double> decile_grid(std::span<const SlopeSample> samples);

// Grid search over r1 < r2. A candidate is skipped when the middle region has
// fewer than 2 samples or a side region holds exactly one. Empty side
// branches are unused; their parameters are reported as x0 = -r1 (or
// x1 = -r2) with k equal to the middle branch value at the breakpoint.
// Ties go to the lexicographically smallest (r1, r2).
PiecewiseFit fit_piecewise(std::span<const SlopeSample> samples, std::span<const double> breakpoint_grid);

struct FitSummary {
  std::string model;
  std::string params;
  double train_sse = 0.0;
  double test_sse = 0.0;
  double train_r2 = 0.0;
  double test_r2 = 0.0;
  bool converged = true;
};

// Splits once with `seed`, fits every model on the train partition and
// scores both partitions.
std::vector<FitSummary> run_study(std::span<const SlopeSample> samples, std::uint64_t seed);

void write_samples_csv(std::ostream& out, std::span<const SlopeSample> samples);
void write_summary_csv(std::ostream& out, std::span<const FitSummary> fits);

}  // namespace lanekeeper::slopefit
