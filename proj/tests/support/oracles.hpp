// Independent reference implementations and generators shared by the unit
// tests and the acceptance runner. Nothing here calls the code under test
// except for the value types.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "lanekeeper/image.hpp"
#include "lanekeeper/perception.hpp"
#include "lanekeeper/slopefit.hpp"

namespace lanekeeper::oracle {

inline void plot_line(ImageBuffer& img, int x1, int y1, int x2, int y2) {
  const int dx = std::abs(x2 - x1), sx = x1 < x2 ? 1 : -1;
  const int dy = -std::abs(y2 - y1), sy = y1 < y2 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    if (x1 >= 0 && y1 >= 0 && x1 < img.width() && y1 < img.height()) img.at(x1, y1) = 255;
    if (x1 == x2 && y1 == y2) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x1 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y1 += sy;
    }
  }
}

struct SyntheticMask {
  ImageBuffer mask;
  std::vector<LineSegment> drawn;
};

inline double point_segment_distance(double px, double py, const LineSegment& s) {
  const double dx = s.x2 - s.x1, dy = s.y2 - s.y1;
  const double len2 = dx * dx + dy * dy;
  const double t = len2 == 0.0 ? 0.0 : std::clamp(((px - s.x1) * dx + (py - s.y1) * dy) / len2, 0.0, 1.0);
  return std::hypot(px - (s.x1 + t * dx), py - (s.y1 + t * dy));
}

// 1-3 random straight lines plus up to 2% salt noise on a <= 64x64 canvas.
// Two thirds of the lines cross the middle of the canvas at a diagonal-ish
// angle (usually long enough to survive min_length); the rest join random
// points. Lengths within 4 px of 70 are not drawn. Lines differ in direction by 0.15 rad and no endpoint comes within
// 5 px of another line, so the segment set is unambiguous.
inline SyntheticMask random_line_mask(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> size(48, 64);
  const int w = size(rng), h = size(rng);
  SyntheticMask out{ImageBuffer(w, h, 1), {}};
  const int n_lines = std::uniform_int_distribution<int>(1, 3)(rng);
  std::uniform_int_distribution<int> xs(0, w - 1), ys(0, h - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  int attempts = 0;
  while (static_cast<int>(out.drawn.size()) < n_lines && attempts++ < 500) {
    LineSegment s{xs(rng), ys(rng), xs(rng), ys(rng)};
    if (rng() % 3 != 0) {
      const double cx = w / 2.0 + (unit(rng) - 0.5) * 16.0, cy = h / 2.0 + (unit(rng) - 0.5) * 16.0;
      double angle = (25.0 + 40.0 * unit(rng)) * std::numbers::pi / 180.0;
      if (rng() % 2) angle = std::numbers::pi - angle;
      const double dx = std::cos(angle), dy = std::sin(angle);
      // Distance to the canvas edge along +/-(dx, dy) from the centre.
      auto reach = [&](double sign) {
        double t = 1e9;
        const double vx = sign * dx, vy = sign * dy;
        if (vx > 0) t = std::min(t, (w - 1 - cx) / vx);
        if (vx < 0) t = std::min(t, -cx / vx);
        if (vy > 0) t = std::min(t, (h - 1 - cy) / vy);
        if (vy < 0) t = std::min(t, -cy / vy);
        return t;
      };
      const double tp = reach(1.0), tm = reach(-1.0);
      s = {static_cast<int>(std::lround(cx - tm * dx)), static_cast<int>(std::lround(cy - tm * dy)),
           static_cast<int>(std::lround(cx + tp * dx)), static_cast<int>(std::lround(cy + tp * dy))};
    }
    // Lengths within a few pixels of the default min_length (70) are
    // ambiguous under a 3 px endpoint tolerance.
    if (s.length() < 20.0 || std::abs(s.length() - 70.0) < 4.0) continue;
    const bool crowded = std::any_of(out.drawn.begin(), out.drawn.end(), [&](const LineSegment& o) {
      const double da = std::abs(std::remainder(
          std::atan2(o.y2 - o.y1, o.x2 - o.x1) - std::atan2(s.y2 - s.y1, s.x2 - s.x1), std::numbers::pi));
      return da < 0.15 || point_segment_distance(s.x1, s.y1, o) < 5.0 ||
             point_segment_distance(s.x2, s.y2, o) < 5.0 || point_segment_distance(o.x1, o.y1, s) < 5.0 ||
             point_segment_distance(o.x2, o.y2, s) < 5.0;
    });
    if (crowded) continue;
    out.drawn.push_back(s);
    plot_line(out.mask, s.x1, s.y1, s.x2, s.y2);
  }
  const double noise = std::uniform_real_distribution<double>(0.0, 0.02)(rng);
  const int n_noise = static_cast<int>(noise * w * h);
  for (int i = 0; i < n_noise; ++i) out.mask.at(xs(rng), ys(rng)) = 255;
  return out;
}

// Standard Hough transform over every white pixel followed by exhaustive run
// walking: repeatedly take the strongest remaining (rho, theta) bin over the
// unclaimed pixels, refit that line, gather the pixels within one pixel of
// it, split them into runs along the major axis wherever more than max_gap
// pixels are missing, and keep runs of at least min_length. Accepted runs
// claim their pixels.
inline std::vector<LineSegment> standard_hough_segments(const ImageBuffer& mask, const HoughParams& p) {
  struct Pt {
    int x, y;
  };
  std::vector<Pt> pts;
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      if (mask.at(x, y) != 0) pts.push_back({x, y});
    }
  }
  const int n_theta = static_cast<int>(std::lround(std::numbers::pi / p.theta_resolution));
  const int diag = static_cast<int>(std::ceil(std::hypot(mask.width(), mask.height()) / p.rho_resolution));
  const int n_rho = 2 * diag + 1;
  std::vector<bool> claimed(pts.size(), false), exhausted(static_cast<std::size_t>(n_theta) * n_rho, false);
  std::vector<LineSegment> out;

  for (;;) {
    std::vector<int> acc(static_cast<std::size_t>(n_theta) * n_rho, 0);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (claimed[i]) continue;
      for (int t = 0; t < n_theta; ++t) {
        const double th = t * p.theta_resolution;
        const double rho = pts[i].x * std::cos(th) + pts[i].y * std::sin(th);
        ++acc[static_cast<std::size_t>(t) * n_rho + static_cast<std::size_t>(std::lround(rho / p.rho_resolution) + diag)];
      }
    }
    int best = -1, best_votes = p.vote_threshold - 1;
    for (std::size_t b = 0; b < acc.size(); ++b) {
      if (!exhausted[b] && acc[b] > best_votes) {
        best_votes = acc[b];
        best = static_cast<int>(b);
      }
    }
    if (best < 0) break;
    exhausted[static_cast<std::size_t>(best)] = true;

    const double th = (best / n_rho) * p.theta_resolution;
    const double rho = (best % n_rho - diag) * p.rho_resolution;
    auto gather = [&](double c, double s, double r, double band, bool with_claimed) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < pts.size(); ++i) {
        if ((with_claimed || !claimed[i]) && std::abs(pts[i].x * c + pts[i].y * s - r) <= band) idx.push_back(i);
      }
      return idx;
    };
    double c = std::cos(th), s = std::sin(th), r = rho;
    const std::vector<std::size_t> coarse = gather(c, s, r, 1.5, false);
    // The bin is quantised: refit the normal by total least squares before
    // gathering with a one-pixel band.
    if (coarse.size() >= 3) {
      double cx = 0, cy = 0;
      for (auto i : coarse) cx += pts[i].x, cy += pts[i].y;
      cx /= static_cast<double>(coarse.size());
      cy /= static_cast<double>(coarse.size());
      double sxx = 0, syy = 0, sxy = 0;
      for (auto i : coarse) {
        sxx += (pts[i].x - cx) * (pts[i].x - cx);
        syy += (pts[i].y - cy) * (pts[i].y - cy);
        sxy += (pts[i].x - cx) * (pts[i].y - cy);
      }
      const double dir = 0.5 * std::atan2(2 * sxy, sxx - syy);
      c = -std::sin(dir);
      s = std::cos(dir);
      r = cx * c + cy * s;
    }
    // Pixels claimed by earlier lines (crossings) keep a run connected but
    // never become endpoints.
    std::vector<std::size_t> near = gather(c, s, r, coarse.size() >= 3 ? 1.0 : 1.5, true);
    const bool x_major = std::abs(s) > std::abs(c);  // direction (-s, c)
    auto major = [&](std::size_t i) { return x_major ? pts[i].x : pts[i].y; };
    std::stable_sort(near.begin(), near.end(), [&](std::size_t a, std::size_t b) { return major(a) < major(b); });

    std::size_t start = 0;
    for (std::size_t k = 1; k <= near.size(); ++k) {
      if (k < near.size() && major(near[k]) - major(near[k - 1]) <= p.max_gap + 1) continue;
      std::size_t first = k, last = k;
      for (std::size_t q = start; q < k; ++q) {
        if (claimed[near[q]]) continue;
        if (first == k) first = q;
        last = q;
      }
      if (first != k) {
        const Pt a = pts[near[first]], b = pts[near[last]];
        const LineSegment seg{a.x, a.y, b.x, b.y};
        if (seg.length() >= p.min_length) {
          // Claim everything within 1.5 px of the line over the run's span.
          const int lo = major(near[start]), hi = major(near[k - 1]);
          for (const std::size_t i : gather(c, s, r, 1.5, false)) {
            if (major(i) >= lo && major(i) <= hi) claimed[i] = true;
          }
          out.push_back(seg);
        }
      }
      start = k;
    }
  }
  std::vector<LineSegment> kept;
  for (const auto& seg : out) {
    const double m = std::abs(seg.slope());
    if (m >= p.slope_min && m <= p.slope_max) kept.push_back(seg);
  }
  return kept;
}

inline bool endpoints_match(const LineSegment& a, const LineSegment& b, double tol) {
  auto d = [](int x1, int y1, int x2, int y2) { return std::hypot(x1 - x2, y1 - y2); };
  const bool same = d(a.x1, a.y1, b.x1, b.y1) <= tol && d(a.x2, a.y2, b.x2, b.y2) <= tol;
  const bool swapped = d(a.x1, a.y1, b.x2, b.y2) <= tol && d(a.x2, a.y2, b.x1, b.y1) <= tol;
  return same || swapped;
}

struct SetComparison {
  bool equal = false;
  int missed_long = 0;  // reference segments >= min_length without a partner
  int unmatched_reference = 0;
  int unmatched_candidate = 0;
};

// Greedy one-to-one matching with an endpoint tolerance.
inline SetComparison compare_segment_sets(const std::vector<LineSegment>& reference,
                                          const std::vector<LineSegment>& candidate, double tol, double min_length) {
  SetComparison r;
  std::vector<bool> used(candidate.size(), false);
  for (const auto& ref : reference) {
    bool found = false;
    for (std::size_t j = 0; j < candidate.size() && !found; ++j) {
      if (!used[j] && endpoints_match(ref, candidate[j], tol)) used[j] = found = true;
    }
    if (!found) {
      ++r.unmatched_reference;
      if (ref.length() >= min_length) ++r.missed_long;
    }
  }
  r.unmatched_candidate = static_cast<int>(std::count(used.begin(), used.end(), false));
  r.equal = r.unmatched_reference == 0 && r.unmatched_candidate == 0;
  return r;
}

// Every threshold in [0,255] tried in turn; the in-bounds ones.
inline std::vector<int> satisfying_thresholds(const ImageBuffer& gray, double min_frac, double max_frac) {
  std::vector<int> ok;
  const double total = static_cast<double>(gray.width()) * gray.height();
  for (int t = 0; t <= 255; ++t) {
    std::size_t white = 0;
    for (const auto v : gray.pixels()) white += v > t ? 1 : 0;
    const double f = static_cast<double>(white) / total;
    if (f >= min_frac && f <= max_frac) ok.push_back(t);
  }
  return ok;
}

// Normal equations for y = a x + b solved by Cramer's rule in long double.
inline std::pair<double, double> normal_equation_line(std::span<const slopefit::SlopeSample> samples) {
  long double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const long double n = static_cast<long double>(samples.size());
  for (const auto& s : samples) {
    sx += s.mean_slope;
    sy += s.yaw;
    sxx += static_cast<long double>(s.mean_slope) * s.mean_slope;
    sxy += static_cast<long double>(s.mean_slope) * s.yaw;
  }
  const long double det = n * sxx - sx * sx;
  const long double a = (n * sxy - sx * sy) / det;
  const long double b = (sxx * sy - sx * sxy) / det;
  return {static_cast<double>(a), static_cast<double>(b)};
}

// Central difference of f with respect to parameter i.
template <std::size_t N>
std::array<double, N> central_gradient(const std::function<double(const std::array<double, N>&)>& f,
                                       std::array<double, N> at, double h = 1e-6) {
  std::array<double, N> g{};
  for (std::size_t i = 0; i < N; ++i) {
    const double orig = at[i];
    const double step = h * std::max(1.0, std::abs(orig));
    at[i] = orig + step;
    const double up = f(at);
    at[i] = orig - step;
    const double down = f(at);
    at[i] = orig;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1e-8, std::abs(analytic), std::abs(numeric)});
}

inline ImageBuffer random_gray(std::mt19937_64& rng, int w, int h) {
  ImageBuffer img(w, h, 1);
  for (auto& v : img.pixels()) v = static_cast<std::uint8_t>(rng() & 0xff);
  return img;
}

}  // namespace lanekeeper::oracle
