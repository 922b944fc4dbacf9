#include "lanekeeper/slopefit.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>
#include <stdexcept>

namespace lanekeeper::slopefit {

namespace {

// Shifted by the first value, so constant input gives its value back exactly.
double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x - v[0];
  return v[0] + s / static_cast<double>(v.size());
}

double median_of(std::vector<double> v) {
  const std::size_t n = v.size();
  std::sort(v.begin(), v.end());
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> xs_of(std::span<const SlopeSample> s) {
  std::vector<double> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = s[i].mean_slope;
  return out;
}

std::vector<double> ys_of(std::span<const SlopeSample> s) {
  std::vector<double> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = s[i].yaw;
  return out;
}

void require_samples(std::span<const SlopeSample> samples, std::size_t n, const char* op) {
  if (samples.size() < n) {
    throw std::invalid_argument(std::string(op) + ": need at least " + std::to_string(n) + " samples, got " +
                                std::to_string(samples.size()));
  }
  for (const auto& s : samples) {
    if (!std::isfinite(s.mean_slope) || !std::isfinite(s.yaw)) {
      throw std::invalid_argument(std::string(op) + ": non-finite sample");
    }
  }
}

template <typename F>
double sse_of(std::span<const SlopeSample> samples, F&& f) {
  double sse = 0.0;
  for (const auto& s : samples) {
    const double r = s.yaw - f(s.mean_slope);
    sse += r * r;
  }
  return sse;
}

template <std::size_t N>
struct LmResult {
  std::array<double, N> p;
  double sse = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Levenberg-Marquardt with Marquardt diagonal scaling. `value(p, x)` is the
// model, `grad(p, x)` its parameter gradient, `feasible(p)` rejects steps.
template <std::size_t N, typename Value, typename Grad, typename Feasible>
LmResult<N> levenberg_marquardt(std::span<const SlopeSample> samples, std::array<double, N> p, Value&& value,
                                Grad&& grad, Feasible&& feasible, const SolverOptions& opt) {
  using Mat = Eigen::Matrix<double, static_cast<int>(N), static_cast<int>(N)>;
  using Vec = Eigen::Matrix<double, static_cast<int>(N), 1>;
  auto sse_at = [&](const std::array<double, N>& q) {
    return sse_of(samples, [&](double x) { return value(q, x); });
  };

  LmResult<N> res{p, sse_at(p), 0, false};
  if (!std::isfinite(res.sse)) return res;
  double lambda = 1e-3;
  while (res.iterations < opt.max_iterations) {
    ++res.iterations;
    Mat A = Mat::Zero();
    Vec g = Vec::Zero();
    for (const auto& s : samples) {
      const std::array<double, N> d = grad(res.p, s.mean_slope);
      const Vec j = Eigen::Map<const Vec>(d.data());
      A.noalias() += j * j.transpose();
      g.noalias() += j * (s.yaw - value(res.p, s.mean_slope));
    }
    if (res.sse == 0.0 || g.cwiseAbs().maxCoeff() == 0.0) {
      res.converged = true;
      break;
    }
    const double floor = std::max(A.diagonal().maxCoeff(), 1.0) * 1e-12;
    bool accepted = false;
    bool solved_any = false;
    while (lambda < 1e16) {
      Mat damped = A;
      for (std::size_t i = 0; i < N; ++i) damped(i, i) += lambda * std::max(A(i, i), floor);
      const Eigen::LDLT<Mat> ldlt(damped);
      const Vec step = ldlt.solve(g);
      if (ldlt.info() != Eigen::Success || !step.allFinite()) {
        lambda *= 10.0;
        continue;
      }
      solved_any = true;
      std::array<double, N> q = res.p;
      for (std::size_t i = 0; i < N; ++i) q[i] += step[i];
      const double sse_new = feasible(q) ? sse_at(q) : std::numeric_limits<double>::infinity();
      if (std::isfinite(sse_new) && sse_new < res.sse) {
        const double rel = (res.sse - sse_new) / res.sse;
        const bool near_gauss_newton = lambda <= 1.0;
        res.p = q;
        res.sse = sse_new;
        lambda = std::max(lambda * 0.1, 1e-15);
        accepted = true;
        if (near_gauss_newton && rel < opt.relative_tolerance) res.converged = true;
        break;
      }
      lambda *= 10.0;
    }
    if (!accepted) {
      // No damping level descends: a stationary point, unless the normal
      // equations could not be solved at all.
      res.converged = solved_any;
      break;
    }
    if (res.converged) break;
  }
  return res;
}

template <typename F>
bool is_flat(std::span<const SlopeSample> samples, F&& f) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo, scale = 1.0;
  for (const auto& s : samples) {
    const double v = f(s.mean_slope);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    scale = std::max(scale, std::abs(s.yaw));
  }
  return hi - lo <= 1e-6 * scale;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

// f = -1/(x + x0) + k
double reciprocal(double x0, double k, double x) { return -1.0 / (x + x0) + k; }

struct BranchFit {
  double x0 = 0.0, k = 0.0, sse = 0.0;
};

// Pole kept at or beyond `boundary`: side = -1 means the branch lies left of
// the boundary (pole >= boundary), +1 right of it (pole <= boundary).
BranchFit fit_reciprocal_branch(std::span<const SlopeSample> region, double boundary, int side) {
  auto pole_ok = [&](double x0) { return side < 0 ? -x0 >= boundary : -x0 <= boundary; };
  auto profile = [&](double x0) {
    double k = 0.0;
    for (const auto& s : region) k += s.yaw + 1.0 / (s.mean_slope + x0);
    k /= static_cast<double>(region.size());
    return BranchFit{x0, k, sse_of(region, [&](double x) { return reciprocal(x0, k, x); })};
  };

  // Coarse scan of the pole distance from the boundary, then refine.
  BranchFit best = profile(-boundary);
  for (int j = -40; j <= 40; ++j) {
    const double d = std::pow(10.0, j / 10.0);
    const BranchFit cand = profile(side < 0 ? -(boundary + d) : -(boundary - d));
    if (std::isfinite(cand.sse) && (!std::isfinite(best.sse) || cand.sse < best.sse)) best = cand;
  }
  const auto lm = levenberg_marquardt<2>(
      region, std::array<double, 2>{best.x0, best.k},
      [](const std::array<double, 2>& p, double x) { return reciprocal(p[0], p[1], x); },
      [](const std::array<double, 2>& p, double x) {
        const double u = x + p[0];
        return std::array<double, 2>{1.0 / (u * u), 1.0};
      },
      [&](const std::array<double, 2>& p) { return pole_ok(p[0]); }, SolverOptions{});
  if (lm.sse < best.sse) best = BranchFit{lm.p[0], lm.p[1], lm.sse};
  return best;
}

}  // namespace

SlopeMode parse_slope_mode(std::string_view name) {
  if (name == "plain") return SlopeMode::kPlain;
  if (name == "sign_balanced") return SlopeMode::kSignBalanced;
  if (name == "side_balanced") return SlopeMode::kSideBalanced;
  if (name == "windowed_median") return SlopeMode::kWindowedMedian;
  throw std::invalid_argument("unknown slope mode '" + std::string(name) + "'");
}

std::string_view to_string(SlopeMode mode) {
  switch (mode) {
    case SlopeMode::kPlain: return "plain";
    case SlopeMode::kSignBalanced: return "sign_balanced";
    case SlopeMode::kSideBalanced: return "side_balanced";
    case SlopeMode::kWindowedMedian: return "windowed_median";
  }
  return "plain";
}

std::vector<SlopeSample> mean_slope_features(std::span<const FrameSegments> frames, SlopeMode mode, int window) {
  if (window < 1) throw std::invalid_argument("mean_slope_features: window must be >= 1");
  std::vector<SlopeSample> out;
  std::vector<double> history;
  for (const auto& frame : frames) {
    std::vector<LineSegment> segs;
    for (const auto& s : frame.segments) {
      if (std::isfinite(s.slope())) segs.push_back(s);
    }
    if (segs.empty()) continue;

    auto plain_mean = [](const std::vector<LineSegment>& v) {
      double sum = 0.0;
      for (const auto& s : v) sum += s.slope();
      return sum / static_cast<double>(v.size());
    };
    auto balance = [&](const std::vector<LineSegment>& a, const std::vector<LineSegment>& b) {
      if (a.empty()) return plain_mean(b);
      if (b.empty()) return plain_mean(a);
      return 0.5 * (plain_mean(a) + plain_mean(b));
    };

    double value = 0.0;
    switch (mode) {
      case SlopeMode::kPlain:
        value = plain_mean(segs);
        break;
      case SlopeMode::kSignBalanced: {
        std::vector<LineSegment> pos, neg;
        for (const auto& s : segs) (s.slope() >= 0.0 ? pos : neg).push_back(s);
        value = balance(pos, neg);
        break;
      }
      case SlopeMode::kSideBalanced: {
        const SideSplit split = split_left_right(segs, frame.image_width);
        value = balance(split.left, split.right);
        break;
      }
      case SlopeMode::kWindowedMedian: {
        double wsum = 0.0, sum = 0.0;
        for (const auto& s : segs) {
          wsum += s.length();
          sum += s.length() * s.slope();
        }
        history.push_back(wsum > 0.0 ? sum / wsum : plain_mean(segs));
        const std::size_t from = history.size() > static_cast<std::size_t>(window) ? history.size() - window : 0;
        value = median_of(std::vector<double>(history.begin() + static_cast<std::ptrdiff_t>(from), history.end()));
        break;
      }
    }
    out.push_back(SlopeSample{value, frame.yaw, frame.frame_id});
  }
  return out;
}

double sum_squared_error(std::span<const double> predicted, std::span<const double> actual) {
  if (predicted.size() != actual.size()) throw std::invalid_argument("sum_squared_error: size mismatch");
  double sse = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) sse += (actual[i] - predicted[i]) * (actual[i] - predicted[i]);
  return sse;
}

double r_squared(double sse, std::span<const double> actual) {
  if (actual.empty()) return 0.0;
  const double mean = mean_of(actual);
  double sst = 0.0;
  for (double y : actual) sst += (y - mean) * (y - mean);
  if (sst == 0.0) return sse == 0.0 ? 1.0 : 0.0;
  return 1.0 - sse / sst;
}

BaselineFit fit_baseline(std::span<const SlopeSample> samples) {
  require_samples(samples, 1, "fit_baseline");
  BaselineFit fit;
  fit.mean_yaw = mean_of(ys_of(samples));
  fit.sse = sse_of(samples, [&](double) { return fit.mean_yaw; });
  fit.r2 = 0.0;
  return fit;
}

SampleSplit split_samples(std::span<const SlopeSample> samples, std::uint64_t seed) {
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
  const std::size_t n_train = samples.size() * 4 / 5;
  SampleSplit split;
  for (std::size_t i = 0; i < idx.size(); ++i) (i < n_train ? split.train : split.test).push_back(samples[idx[i]]);
  return split;
}

std::pair<double, double> least_squares_line(std::span<const SlopeSample> samples) {
  require_samples(samples, 1, "least_squares_line");
  const double mx = mean_of(xs_of(samples)), my = mean_of(ys_of(samples));
  double sxx = 0.0, sxy = 0.0;
  for (const auto& s : samples) {
    sxx += (s.mean_slope - mx) * (s.mean_slope - mx);
    sxy += (s.mean_slope - mx) * (s.yaw - my);
  }
  const double slope = sxx > 0.0 ? sxy / sxx : 0.0;
  return {slope, my - slope * mx};
}

LinearFit fit_linear(std::span<const SlopeSample> samples, std::uint64_t split_seed) {
  require_samples(samples, kMinLinearSamples, "fit_linear");
  const SampleSplit split = split_samples(samples, split_seed);
  LinearFit fit;
  std::tie(fit.slope, fit.intercept) = least_squares_line(split.train);
  auto line = [&](double x) { return fit.slope * x + fit.intercept; };
  fit.train_sse = sse_of(split.train, line);
  fit.test_sse = sse_of(split.test, line);
  fit.train_r2 = r_squared(fit.train_sse, ys_of(split.train));
  fit.test_r2 = r_squared(fit.test_sse, ys_of(split.test));
  return fit;
}

double evaluate(const SigmoidParams& p, double x) { return p.L / (1.0 + std::exp(-p.k * (x - p.x0))); }

double evaluate(const ArctanParams& p, double x) { return p.k * std::atan(p.w * (x - p.x0)) + p.y0; }

namespace {

std::array<double, 3> sigmoid_grad(const SigmoidParams& p, double x) {
  const double s = 1.0 / (1.0 + std::exp(-p.k * (x - p.x0)));
  const double ds = p.L * s * (1.0 - s);
  return {s, ds * (x - p.x0), -ds * p.k};
}

std::array<double, 4> arctan_grad(const ArctanParams& p, double x) {
  const double u = p.w * (x - p.x0);
  const double q = 1.0 / (1.0 + u * u);
  return {std::atan(u), p.k * (x - p.x0) * q, -p.k * p.w * q, 1.0};
}

SigmoidParams to_sigmoid(const std::array<double, 3>& a) { return {a[0], a[1], a[2]}; }
ArctanParams to_arctan(const std::array<double, 4>& a) { return {a[0], a[1], a[2], a[3]}; }

}  // namespace

std::vector<std::array<double, 3>> residual_jacobian(const SigmoidParams& p, std::span<const SlopeSample> samples) {
  std::vector<std::array<double, 3>> rows;
  for (const auto& s : samples) {
    auto g = sigmoid_grad(p, s.mean_slope);
    for (auto& v : g) v = -v;
    rows.push_back(g);
  }
  return rows;
}

std::vector<std::array<double, 4>> residual_jacobian(const ArctanParams& p, std::span<const SlopeSample> samples) {
  std::vector<std::array<double, 4>> rows;
  for (const auto& s : samples) {
    auto g = arctan_grad(p, s.mean_slope);
    for (auto& v : g) v = -v;
    rows.push_back(g);
  }
  return rows;
}

SigmoidParams default_sigmoid_init(std::span<const SlopeSample> samples) {
  require_samples(samples, 1, "default_sigmoid_init");
  const auto ys = ys_of(samples);
  const auto [lo, hi] = std::minmax_element(ys.begin(), ys.end());
  return {*hi - *lo, 1.0, median_of(xs_of(samples))};
}

ArctanParams default_arctan_init(std::span<const SlopeSample> samples) {
  require_samples(samples, 1, "default_arctan_init");
  const auto ys = ys_of(samples);
  const auto [lo, hi] = std::minmax_element(ys.begin(), ys.end());
  return {(*hi - *lo) / std::numbers::pi, 1.0, median_of(xs_of(samples)), mean_of(ys)};
}

SigmoidParams baseline_sigmoid_init(std::span<const SlopeSample> samples) {
  require_samples(samples, 1, "baseline_sigmoid_init");
  return {2.0 * mean_of(ys_of(samples)), 0.0, median_of(xs_of(samples))};
}

ArctanParams baseline_arctan_init(std::span<const SlopeSample> samples) {
  require_samples(samples, 1, "baseline_arctan_init");
  return {0.0, 1.0, median_of(xs_of(samples)), mean_of(ys_of(samples))};
}

CurveFit<SigmoidParams> fit_sigmoid(std::span<const SlopeSample> samples, std::optional<SigmoidParams> init,
                                    const SolverOptions& options) {
  require_samples(samples, 3, "fit_sigmoid");
  const SigmoidParams p0 = init.value_or(default_sigmoid_init(samples));
  const auto lm = levenberg_marquardt<3>(
      samples, std::array<double, 3>{p0.L, p0.k, p0.x0},
      [](const std::array<double, 3>& a, double x) { return evaluate(to_sigmoid(a), x); },
      [](const std::array<double, 3>& a, double x) { return sigmoid_grad(to_sigmoid(a), x); },
      [](const std::array<double, 3>&) { return true; }, options);
  CurveFit<SigmoidParams> fit{to_sigmoid(lm.p), lm.sse, lm.iterations, lm.converged, false};
  fit.degenerate = is_flat(samples, [&](double x) { return evaluate(fit.params, x); });
  return fit;
}

CurveFit<ArctanParams> fit_arctan(std::span<const SlopeSample> samples, std::optional<ArctanParams> init,
                                  const SolverOptions& options) {
  require_samples(samples, 4, "fit_arctan");
  const ArctanParams p0 = init.value_or(default_arctan_init(samples));
  const auto lm = levenberg_marquardt<4>(
      samples, std::array<double, 4>{p0.k, p0.w, p0.x0, p0.y0},
      [](const std::array<double, 4>& a, double x) { return evaluate(to_arctan(a), x); },
      [](const std::array<double, 4>& a, double x) { return arctan_grad(to_arctan(a), x); },
      [](const std::array<double, 4>&) { return true; }, options);
  CurveFit<ArctanParams> fit{to_arctan(lm.p), lm.sse, lm.iterations, lm.converged, false};
  fit.degenerate = is_flat(samples, [&](double x) { return evaluate(fit.params, x); });
  return fit;
}

double evaluate(const PiecewiseParams& p, double x) {
  if (x < p.r1) return reciprocal(p.x0, p.k1, x);
  if (x > p.r2) return reciprocal(p.x1, p.k2, x);
  return p.m * x + p.b;
}

std::vector<std::array<double, 2>> reciprocal_residual_jacobian(double x0, double /*k*/,
                                                                std::span<const SlopeSample> samples) {
  std::vector<std::array<double, 2>> rows;
  for (const auto& s : samples) {
    const double u = s.mean_slope + x0;
    rows.push_back({-1.0 / (u * u), -1.0});
  }
  return rows;
}

std::vector<double> decile_grid(std::span<const SlopeSample> samples) {
  require_samples(samples, 1, "decile_grid");
  const auto xs = xs_of(samples);
  const auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
  std::vector<double> grid;
  for (int j = 0; j <= 10; ++j) grid.push_back(*lo + (*hi - *lo) * j / 10.0);
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

PiecewiseFit fit_piecewise(std::span<const SlopeSample> samples, std::span<const double> breakpoint_grid) {
  require_samples(samples, kPiecewiseParamCount, "fit_piecewise");
  std::vector<double> grid(breakpoint_grid.begin(), breakpoint_grid.end());
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  PiecewiseFit best;
  best.sse = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < grid.size(); ++a) {
    for (std::size_t c = a + 1; c < grid.size(); ++c) {
      const double r1 = grid[a], r2 = grid[c];
      std::vector<SlopeSample> left, mid, right;
      for (const auto& s : samples) {
        (s.mean_slope < r1 ? left : s.mean_slope > r2 ? right : mid).push_back(s);
      }
      if (mid.size() < 2 || left.size() == 1 || right.size() == 1) continue;
      ++best.candidates_evaluated;

      PiecewiseParams p;
      p.r1 = r1;
      p.r2 = r2;
      std::tie(p.m, p.b) = least_squares_line(mid);
      double sse = sse_of(mid, [&](double x) { return p.m * x + p.b; });
      if (left.empty()) {
        p.x0 = -r1;
        p.k1 = p.m * r1 + p.b;
      } else {
        const BranchFit f = fit_reciprocal_branch(left, r1, -1);
        p.x0 = f.x0;
        p.k1 = f.k;
        sse += f.sse;
      }
      if (right.empty()) {
        p.x1 = -r2;
        p.k2 = p.m * r2 + p.b;
      } else {
        const BranchFit f = fit_reciprocal_branch(right, r2, +1);
        p.x1 = f.x0;
        p.k2 = f.k;
        sse += f.sse;
      }
      if (sse < best.sse) {
        best.params = p;
        best.sse = sse;
      }
    }
  }
  if (best.candidates_evaluated == 0) throw std::invalid_argument("fit_piecewise: no admissible breakpoint pair");
  return best;
}

std::vector<FitSummary> run_study(std::span<const SlopeSample> samples, std::uint64_t seed) {
  require_samples(samples, std::max(kMinLinearSamples, kPiecewiseParamCount * 5 / 4 + 1), "run_study");
  const SampleSplit split = split_samples(samples, seed);
  const auto train_y = ys_of(split.train), test_y = ys_of(split.test);
  std::vector<FitSummary> out;

  auto add = [&](std::string name, std::string params, auto&& f, bool converged) {
    FitSummary s{std::move(name), std::move(params), sse_of(split.train, f), sse_of(split.test, f), 0, 0, converged};
    s.train_r2 = r_squared(s.train_sse, train_y);
    s.test_r2 = r_squared(s.test_sse, test_y);
    out.push_back(std::move(s));
  };

  const BaselineFit base = fit_baseline(split.train);
  add("baseline", "mean_yaw=" + fmt(base.mean_yaw), [&](double) { return base.mean_yaw; }, true);
  // The linear fit's own split is recomputed from the same seed.
  const LinearFit lin = fit_linear(samples, seed);
  add("linear", "slope=" + fmt(lin.slope) + ";intercept=" + fmt(lin.intercept),
      [&](double x) { return lin.slope * x + lin.intercept; }, true);

  auto sig = fit_sigmoid(split.train);
  const auto sig_flat = fit_sigmoid(split.train, baseline_sigmoid_init(split.train));
  if (sig_flat.sse < sig.sse) sig = sig_flat;
  add("sigmoid", "L=" + fmt(sig.params.L) + ";k=" + fmt(sig.params.k) + ";x0=" + fmt(sig.params.x0),
      [&](double x) { return evaluate(sig.params, x); }, sig.converged);

  auto atn = fit_arctan(split.train);
  const auto atn_flat = fit_arctan(split.train, baseline_arctan_init(split.train));
  if (atn_flat.sse < atn.sse) atn = atn_flat;
  add("arctan",
      "k=" + fmt(atn.params.k) + ";w=" + fmt(atn.params.w) + ";x0=" + fmt(atn.params.x0) + ";y0=" + fmt(atn.params.y0),
      [&](double x) { return evaluate(atn.params, x); }, atn.converged);

  const PiecewiseFit pw = fit_piecewise(split.train, decile_grid(split.train));
  const auto& q = pw.params;
  add("piecewise",
      "x0=" + fmt(q.x0) + ";k1=" + fmt(q.k1) + ";m=" + fmt(q.m) + ";b=" + fmt(q.b) + ";x1=" + fmt(q.x1) +
          ";k2=" + fmt(q.k2) + ";r1=" + fmt(q.r1) + ";r2=" + fmt(q.r2),
      [&](double x) { return evaluate(q, x); }, true);
  return out;
}

void write_samples_csv(std::ostream& out, std::span<const SlopeSample> samples) {
  out << "frame_id,mean_slope,yaw\n";
  for (const auto& s : samples) out << s.frame_id << ',' << fmt(s.mean_slope) << ',' << fmt(s.yaw) << '\n';
}

void write_summary_csv(std::ostream& out, std::span<const FitSummary> fits) {
  out << "model,params,train_sse,test_sse,train_r2,test_r2,converged\n";
  for (const auto& f : fits) {
    out << f.model << ',' << f.params << ',' << fmt(f.train_sse) << ',' << fmt(f.test_sse) << ',' << fmt(f.train_r2)
        << ',' << fmt(f.test_r2) << ',' << (f.converged ? "true" : "false") << '\n';
  }
}

}  // namespace lanekeeper::slopefit
