#include "lanekeeper/perception.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

namespace lanekeeper {

void HoughParams::validate() const {
  if (!(rho_resolution > 0.0) || !(theta_resolution > 0.0)) {
    throw std::invalid_argument("HoughParams: resolutions must be positive");
  }
  if (!(min_length > 0.0)) throw std::invalid_argument("HoughParams: min_length must be positive");
  if (max_gap < 0) throw std::invalid_argument("HoughParams: max_gap must be non-negative");
  if (vote_threshold < 1) throw std::invalid_argument("HoughParams: vote_threshold must be >= 1");
  if (!(slope_min < slope_max)) throw std::invalid_argument("HoughParams: slope_min must be < slope_max");
}

SegmenterMethod parse_segmenter(std::string_view name) {
  if (name == "classical") return SegmenterMethod::kClassical;
  if (name == "oracle") return SegmenterMethod::kOracle;
  throw std::invalid_argument("unknown segmenter: " + std::string(name));
}

std::string_view to_string(SegmenterMethod method) {
  return method == SegmenterMethod::kOracle ? "oracle" : "classical";
}

Segmentation segment_lane_pixels(const ImageBuffer& frame, const SegmenterConfig& config,
                                 const ImageBuffer* oracle_mask) {
  if (config.method == SegmenterMethod::kOracle) {
    if (oracle_mask == nullptr) {
      throw std::logic_error("segment_lane_pixels: oracle segmenter requires a simulation context");
    }
    if (oracle_mask->width() != frame.width() || oracle_mask->height() != frame.height()) {
      throw std::invalid_argument("segment_lane_pixels: oracle mask size differs from frame");
    }
    return {*oracle_mask, -1, true};
  }
  const ImageBuffer gray = frame.channels() == 3 ? to_grayscale(frame) : frame;
  const ImageBuffer blurred = median_blur(gray, config.median_kernel);
  ThresholdResult thr = dynamic_threshold(blurred, config.min_white_frac, config.max_white_frac);
  return {std::move(thr.binary), thr.threshold, thr.in_bounds};
}

Segmentation segment_lower_region(const ImageBuffer& frame, const SegmenterConfig& config,
                                  double keep_fraction, const ImageBuffer* oracle_mask) {
  const int h = frame.height();
  const int keep = std::clamp(static_cast<int>(std::lround(keep_fraction * h)), 1, h);
  const int first = h - keep;
  if (config.method == SegmenterMethod::kOracle) {
    Segmentation seg = segment_lane_pixels(frame, config, oracle_mask);
    seg.mask = restrict_to_lower(seg.mask, static_cast<double>(keep) / h);
    return seg;
  }
  Segmentation roi = segment_lane_pixels(crop_rows(frame, first, keep), config);
  Segmentation full{ImageBuffer(frame.width(), h, 1), roi.threshold, roi.in_bounds};
  const auto src = roi.mask.pixels();
  std::copy(src.begin(), src.end(), full.mask.row(first));
  return full;
}

bool passes_slope_filter(const LineSegment& seg, const HoughParams& params) {
  if (seg.x1 == seg.x2) return false;
  const double s = std::abs(seg.slope());
  return s >= params.slope_min && s <= params.slope_max;
}

namespace {

// Pixel states inside the progressive Hough transform.
enum : std::uint8_t { kEmpty = 0, kPending = 1, kVoted = 2 };

struct Point {
  int x, y;
};

class ProgressiveHough {
 public:
  ProgressiveHough(const ImageBuffer& mask, const HoughParams& params)
      : params_(params), width_(mask.width()), height_(mask.height()) {
    num_angle_ = std::max(1, static_cast<int>(std::lround(std::numbers::pi / params.theta_resolution)));
    num_rho_ = static_cast<int>(std::lround(((width_ + height_) * 2 + 1) / params.rho_resolution));
    accum_.assign(static_cast<std::size_t>(num_angle_) * num_rho_, 0);
    cos_tab_.resize(num_angle_);
    sin_tab_.resize(num_angle_);
    const double irho = 1.0 / params.rho_resolution;
    for (int n = 0; n < num_angle_; ++n) {
      const double ang = n * params.theta_resolution;
      cos_tab_[n] = static_cast<float>(std::cos(ang) * irho);
      sin_tab_[n] = static_cast<float>(std::sin(ang) * irho);
    }
    state_.assign(static_cast<std::size_t>(width_) * height_, kEmpty);
    const auto px = mask.pixels();
    white_.assign(px.begin(), px.end());
    for (int y = 0; y < height_; ++y) {
      for (int x = 0; x < width_; ++x) {
        if (px[static_cast<std::size_t>(y) * width_ + x] != 0) {
          state_[static_cast<std::size_t>(y) * width_ + x] = kPending;
          points_.push_back({x, y});
        }
      }
    }
  }

  std::vector<LineSegment> run() {
    std::vector<LineSegment> lines;
    std::mt19937_64 rng(params_.rng_seed);
    for (std::size_t count = points_.size(); count > 0; --count) {
      const std::size_t idx = static_cast<std::size_t>(rng() % count);
      const Point pt = points_[idx];
      points_[idx] = points_[count - 1];

      if (state(pt.x, pt.y) != kPending) continue;

      int max_votes = params_.vote_threshold - 1;
      int max_n = 0;
      vote(pt, +1, &max_votes, &max_n);
      state(pt.x, pt.y) = kVoted;
      if (max_votes < params_.vote_threshold) continue;

      if (auto seg = extract(pt, max_n)) lines.push_back(*seg);
    }
    return lines;
  }

 private:
  std::uint8_t& state(int x, int y) { return state_[static_cast<std::size_t>(y) * width_ + x]; }

  bool inside(int x, int y) const { return x >= 0 && y >= 0 && x < width_ && y < height_; }

  bool occupied(int x, int y) const {
    return inside(x, y) && state_[static_cast<std::size_t>(y) * width_ + x] != kEmpty;
  }

  bool white(int x, int y) const { return inside(x, y) && white_[static_cast<std::size_t>(y) * width_ + x] != 0; }

  void vote(Point pt, int delta, int* max_votes, int* max_n) {
    const int offset = (num_rho_ - 1) / 2;
    int* row = accum_.data();
    for (int n = 0; n < num_angle_; ++n, row += num_rho_) {
      const float v = pt.x * cos_tab_[n] + pt.y * sin_tab_[n];
      // Round half away from zero without the libm call.
      const int r = (v >= 0.0f ? static_cast<int>(v + 0.5f) : -static_cast<int>(0.5f - v)) + offset;
      const int val = (row[r] += delta);
      if (max_votes != nullptr && val > *max_votes) {
        *max_votes = val;
        *max_n = n;
      }
    }
  }

  // Walk state for one direction along the candidate line, in 16.16 fixed
  // point on the minor axis.
  struct Walker {
    bool x_major;
    long x, y, dx, dy;
    static constexpr int kShift = 16;
    int px() const { return x_major ? static_cast<int>(x) : static_cast<int>(x >> kShift); }
    int py() const { return x_major ? static_cast<int>(y >> kShift) : static_cast<int>(y); }
    void step() { x += dx; y += dy; }
  };

  // Walks along direction (a, b) through seed.
  Walker make_walker(Point seed, double a, double b, bool reverse) const {
    Walker w{};
    constexpr long one = 1L << Walker::kShift;
    w.x = seed.x;
    w.y = seed.y;
    if (std::abs(a) > std::abs(b)) {
      w.x_major = true;
      w.dx = a > 0 ? 1 : -1;
      w.dy = std::lround(b * one / std::abs(a));
      w.y = (static_cast<long>(seed.y) << Walker::kShift) + (one >> 1);
    } else {
      w.x_major = false;
      w.dy = b > 0 ? 1 : -1;
      w.dx = std::lround(a * one / std::abs(b));
      w.x = (static_cast<long>(seed.x) << Walker::kShift) + (one >> 1);
    }
    if (reverse) {
      w.dx = -w.dx;
      w.dy = -w.dy;
    }
    return w;
  }

  // The pixel on the walk plus its two neighbours across the walk direction.
  std::array<Point, 3> corridor(const Walker& w) const {
    const int x = w.px(), y = w.py();
    if (w.x_major) return {Point{x, y}, Point{x, y - 1}, Point{x, y + 1}};
    return {Point{x, y}, Point{x - 1, y}, Point{x + 1, y}};
  }

  struct Walk {
    Point seed;
    double a = 0.0, b = 0.0;
    std::array<Point, 2> ends;
    std::array<int, 2> last_hit{0, 0};  // walk steps to each end
    std::vector<Point> hits;

    double length() const { return std::hypot(ends[1].x - ends[0].x, ends[1].y - ends[0].y); }
  };

  Walk walk(Point seed, double a, double b) const {
    Walk r{seed, a, b, {seed, seed}, {0, 0}, {}};
    for (int k = 0; k < 2; ++k) {
      Walker w = make_walker(seed, a, b, k == 1);
      int gap = 0;
      for (int n = 0;; w.step(), ++n) {
        const auto cells = corridor(w);
        if (std::none_of(cells.begin(), cells.end(), [this](Point p) { return inside(p.x, p.y); })) break;
        const auto hit = std::find_if(cells.begin(), cells.end(),
                                      [this](Point p) { return occupied(p.x, p.y); });
        if (hit != cells.end()) {
          gap = 0;
          r.ends[k] = *hit;
          r.last_hit[k] = n;
          r.hits.push_back(*hit);
        } else if (std::any_of(cells.begin(), cells.end(), [this](Point p) { return white(p.x, p.y); })) {
          // Pixels already taken by another line (a crossing) still bridge the gap.
          gap = 0;
        } else if (++gap > params_.max_gap) {
          break;
        }
      }
    }
    return r;
  }

  // The accumulator angle is quantised, so long walks can drift off the
  // line. A second walk follows the principal axis of the first walk's hits.
  Walk refined_walk(Point seed, int angle_index) const {
    Walk first = walk(seed, -sin_tab_[angle_index], cos_tab_[angle_index]);
    if (first.hits.size() < 3) return first;
    double cx = 0.0, cy = 0.0;
    for (const Point p : first.hits) {
      cx += p.x;
      cy += p.y;
    }
    cx /= static_cast<double>(first.hits.size());
    cy /= static_cast<double>(first.hits.size());
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (const Point p : first.hits) {
      sxx += (p.x - cx) * (p.x - cx);
      syy += (p.y - cy) * (p.y - cy);
      sxy += (p.x - cx) * (p.y - cy);
    }
    const double angle = 0.5 * std::atan2(2.0 * sxy, sxx - syy);
    const Point centre{static_cast<int>(std::lround(cx)), static_cast<int>(std::lround(cy))};
    if (!inside(centre.x, centre.y)) return first;
    Walk second = walk(centre, std::cos(angle), std::sin(angle));
    return second.length() > first.length() ? second : first;
  }

  std::optional<LineSegment> extract(Point seed, int angle_index) {
    const Walk best = refined_walk(seed, angle_index);
    const LineSegment seg{best.ends[0].x, best.ends[0].y, best.ends[1].x, best.ends[1].y};
    const bool good = seg.length() >= params_.min_length;

    // Consume the walked pixels; a good line also withdraws their votes.
    for (int k = 0; k < 2; ++k) {
      Walker w = make_walker(best.seed, best.a, best.b, k == 1);
      for (int n = 0; n <= best.last_hit[k]; w.step(), ++n) {
        for (const Point p : corridor(w)) {
          if (!inside(p.x, p.y)) continue;
          auto& s = state(p.x, p.y);
          if (s == kVoted && good) vote(p, -1, nullptr, nullptr);
          s = kEmpty;
        }
      }
    }
    // The seed itself may sit just off a refined walk.
    state(seed.x, seed.y) = kEmpty;
    if (!good) return std::nullopt;
    return seg;
  }

  const HoughParams& params_;
  int width_, height_;
  int num_angle_ = 0, num_rho_ = 0;
  std::vector<int> accum_;
  std::vector<float> cos_tab_, sin_tab_;
  std::vector<std::uint8_t> state_;
  std::vector<std::uint8_t> white_;
  std::vector<Point> points_;
};

}  // namespace

std::vector<LineSegment> detect_segments(const ImageBuffer& mask, const HoughParams& params) {
  params.validate();
  if (mask.channels() != 1) throw std::invalid_argument("detect_segments: mask must be single-channel");
  ProgressiveHough hough(mask, params);
  std::vector<LineSegment> raw = hough.run();
  std::vector<LineSegment> kept;
  kept.reserve(raw.size());
  for (const auto& s : raw) {
    if (passes_slope_filter(s, params)) kept.push_back(s);
  }
  return kept;
}

ImageBuffer restrict_to_lower(const ImageBuffer& mask, double keep_fraction) {
  ImageBuffer out = mask;
  const int keep_rows = static_cast<int>(std::lround(std::clamp(keep_fraction, 0.0, 1.0) * mask.height()));
  const int first_kept = mask.height() - keep_rows;
  for (int y = 0; y < first_kept; ++y) {
    std::fill_n(out.row(y), static_cast<std::size_t>(mask.width()) * mask.channels(), std::uint8_t{0});
  }
  return out;
}

SideSplit split_left_right(const std::vector<LineSegment>& segments, int image_width) {
  SideSplit split;
  const double half = image_width / 2.0;
  for (const auto& s : segments) {
    (s.center_x() < half ? split.left : split.right).push_back(s);
  }
  return split;
}

namespace {

double mean_center_x(const std::vector<LineSegment>& segs) {
  double sum = 0.0;
  for (const auto& s : segs) sum += s.center_x();
  return sum / static_cast<double>(segs.size());
}

}  // namespace

LaneEstimate estimate_lane(const std::vector<LineSegment>& segments, int image_width,
                           double lane_width_px) {
  LaneEstimate est;
  est.mid_x = image_width / 2.0;
  SideSplit split = split_left_right(segments, image_width);
  if (!split.left.empty()) est.left_x = mean_center_x(split.left);
  if (!split.right.empty()) est.right_x = mean_center_x(split.right);
  if (est.left_x && est.right_x) {
    est.center_x = 0.5 * (*est.left_x + *est.right_x);
  } else if (est.right_x) {
    est.center_x = *est.right_x - 0.5 * lane_width_px;
  } else if (est.left_x) {
    est.center_x = *est.left_x + 0.5 * lane_width_px;
  }
  est.segments_left = std::move(split.left);
  est.segments_right = std::move(split.right);
  return est;
}

void draw_line(ImageBuffer& img, int x1, int y1, int x2, int y2, colors::Rgb color) {
  if (img.channels() != 3) throw std::invalid_argument("draw_line: RGB image required");
  const int dx = std::abs(x2 - x1), sx = x1 < x2 ? 1 : -1;
  const int dy = -std::abs(y2 - y1), sy = y1 < y2 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    if (x1 >= 0 && y1 >= 0 && x1 < img.width() && y1 < img.height()) {
      img.at(x1, y1, 0) = color.r;
      img.at(x1, y1, 1) = color.g;
      img.at(x1, y1, 2) = color.b;
    }
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

ImageBuffer annotate(const ImageBuffer& frame, const LaneEstimate& estimate,
                     const std::vector<LineSegment>& segments) {
  ImageBuffer out = frame.channels() == 3 ? frame : gray_to_rgb(frame);
  const int h = out.height();
  for (const auto& s : segments) {
    draw_line(out, s.x1, s.y1, s.x2, s.y2, s.length() > kLongSegmentPx ? colors::kMagenta : colors::kBlue);
  }
  auto vertical = [&](double x, int y0, int y1, colors::Rgb c) {
    const int xi = static_cast<int>(std::lround(x));
    draw_line(out, xi, y0, xi, y1, c);
  };
  // Lane-side markers and the projected center span the lower half.
  if (estimate.left_x) vertical(*estimate.left_x, h / 2, h - 1, colors::kCyan);
  if (estimate.right_x) vertical(*estimate.right_x, h / 2, h - 1, colors::kYellow);
  if (estimate.center_x) vertical(*estimate.center_x, h / 2, h - 1, colors::kGreen);
  const double mid = estimate.mid_x > 0.0 ? estimate.mid_x : out.width() / 2.0;
  vertical(mid, 0, h - 1, colors::kRed);
  return out;
}

}  // namespace lanekeeper
