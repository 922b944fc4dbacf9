// Lane-line perception: pixel segmentation, progressive probabilistic Hough
// transform, left/right clustering and lane-center estimation.
#pragma once

#include <cmath>
#include <numbers>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "lanekeeper/image.hpp"

namespace lanekeeper {

struct LineSegment {
  int x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double length() const { return std::hypot(static_cast<double>(x2 - x1), static_cast<double>(y2 - y1)); }
  // Rise over run in image coordinates; +/-inf for vertical segments.
  double slope() const {
    if (x1 == x2) return y2 >= y1 ? INFINITY : -INFINITY;
    return static_cast<double>(y2 - y1) / static_cast<double>(x2 - x1);
  }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }

  friend bool operator==(const LineSegment&, const LineSegment&) = default;
};

struct HoughParams {
  double rho_resolution = 1.0;
  double theta_resolution = std::numbers::pi / 180.0;
  int vote_threshold = 30;
  double min_length = 70.0;
  int max_gap = 4;
  double slope_min = 0.25;
  double slope_max = 100.0;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

enum class SegmenterMethod { kClassical, kOracle };

SegmenterMethod parse_segmenter(std::string_view name);
std::string_view to_string(SegmenterMethod method);

struct SegmenterConfig {
  SegmenterMethod method = SegmenterMethod::kClassical;
  int median_kernel = 3;
  double min_white_frac = 0.01;
  double max_white_frac = 0.10;
};

struct Segmentation {
  ImageBuffer mask;
  // Dynamic threshold outcome; the oracle path reports threshold -1, in_bounds true.
  int threshold = -1;
  bool in_bounds = true;
};

// The oracle method needs the renderer's ground-truth line mask; passing
// nullptr there means there is no simulation context and throws.
Segmentation segment_lane_pixels(const ImageBuffer& frame, const SegmenterConfig& config,
                                 const ImageBuffer* oracle_mask = nullptr);

// Segments only the lower `keep_fraction` of the frame (the road region of
// interest); rows above it are zero in the returned full-size mask.
Segmentation segment_lower_region(const ImageBuffer& frame, const SegmenterConfig& config,
                                  double keep_fraction, const ImageBuffer* oracle_mask = nullptr);

bool passes_slope_filter(const LineSegment& seg, const HoughParams& params);

std::vector<LineSegment> detect_segments(const ImageBuffer& mask, const HoughParams& params);

// Zeroes everything above the lower `keep_fraction` of the mask.
ImageBuffer restrict_to_lower(const ImageBuffer& mask, double keep_fraction);

struct SideSplit {
  std::vector<LineSegment> left;
  std::vector<LineSegment> right;
};

// center_x < width/2 goes left, everything else right; input order is kept.
SideSplit split_left_right(const std::vector<LineSegment>& segments, int image_width);

struct LaneEstimate {
  std::optional<double> left_x;
  std::optional<double> right_x;
  std::optional<double> center_x;
  double mid_x = 0.0;
  std::vector<LineSegment> segments_left;
  std::vector<LineSegment> segments_right;
};

// With only one side visible the center is offset by lane_width_px/2 toward
// the missing side.
LaneEstimate estimate_lane(const std::vector<LineSegment>& segments, int image_width,
                           double lane_width_px = 280.0);

namespace colors {
struct Rgb {
  std::uint8_t r, g, b;
};
inline constexpr Rgb kCyan{0, 255, 255};
inline constexpr Rgb kYellow{255, 255, 0};
inline constexpr Rgb kRed{255, 0, 0};
inline constexpr Rgb kGreen{0, 255, 0};
inline constexpr Rgb kBlue{0, 0, 255};
inline constexpr Rgb kMagenta{255, 0, 255};
}  // namespace colors

inline constexpr double kLongSegmentPx = 180.0;

// Diagnostic overlay. Gray frames are promoted to RGB first.
ImageBuffer annotate(const ImageBuffer& frame, const LaneEstimate& estimate,
                     const std::vector<LineSegment>& segments);

void draw_line(ImageBuffer& img, int x1, int y1, int x2, int y2, colors::Rgb color);

}  // namespace lanekeeper
