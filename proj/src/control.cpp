#include "lanekeeper/control.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lanekeeper {

double steer(double center_x, double mid_x, double deadband) {
  if (!(mid_x > 0.0)) throw std::invalid_argument("steer: mid_x must be positive");
  if (std::abs(center_x - mid_x) <= deadband) return 0.0;
  return (mid_x - center_x) / mid_x;
}

void EnvelopeLimits::validate() const {
  if (!(speed_cap > 0.0) || !(yaw_cap > 0.0) || !(yaw_rate_delta > 0.0)) {
    throw std::invalid_argument("EnvelopeLimits: caps and rate delta must be positive");
  }
}

TwistCommand command_envelope(const TwistCommand& raw, const TwistCommand& prev, const EnvelopeLimits& limits) {
  TwistCommand out;
  out.linear_x = std::clamp(raw.linear_x, -limits.speed_cap, limits.speed_cap);
  const double yaw = std::clamp(raw.angular_z, -limits.yaw_cap, limits.yaw_cap);
  const double lo = std::max(prev.angular_z - limits.yaw_rate_delta, -limits.yaw_cap);
  const double hi = std::min(prev.angular_z + limits.yaw_rate_delta, limits.yaw_cap);
  // prev outside the cap can make lo > hi; the cap wins.
  out.angular_z = lo <= hi ? std::clamp(yaw, lo, hi) : std::clamp(yaw, -limits.yaw_cap, limits.yaw_cap);
  return out;
}

namespace {

bool is_red(const std::uint8_t* px, const RedMaskParams& p) {
  const int r = px[0];
  return r >= p.min_red && r - std::max<int>(px[1], px[2]) >= p.min_dominance;
}

bool is_red_scaled(const std::uint8_t* px, const RedMaskParams& p, double gain) {
  auto scaled = [gain](std::uint8_t v) { return std::min(255, static_cast<int>(std::lround(v * gain))); };
  const int r = scaled(px[0]);
  return r >= p.min_red && r - std::max(scaled(px[1]), scaled(px[2])) >= p.min_dominance;
}

double lower_third_mean(const ImageBuffer& frame) {
  const int y0 = frame.height() - frame.height() / 3;
  double sum = 0.0;
  std::size_t n = 0;
  for (int y = y0; y < frame.height(); ++y) {
    const std::uint8_t* row = frame.row(y);
    for (int i = 0; i < frame.width() * frame.channels(); ++i) sum += row[i];
    n += static_cast<std::size_t>(frame.width() * frame.channels());
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

}  // namespace

ImageBuffer red_mask(const ImageBuffer& frame, const RedMaskParams& params) {
  if (frame.channels() != 3) throw std::invalid_argument("red_mask: RGB frame required");
  ImageBuffer out(frame.width(), frame.height(), 1);
  const auto src = frame.pixels();
  auto dst = out.pixels();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = is_red(&src[3 * i], params) ? 255 : 0;
  return out;
}

double red_fraction(const ImageBuffer& frame, const RedMaskParams& params, double gain) {
  if (frame.channels() != 3) throw std::invalid_argument("red_fraction: RGB frame required");
  if (!(gain > 0.0)) throw std::invalid_argument("red_fraction: gain must be positive");
  const int y0 = frame.height() - frame.height() / 3;
  std::size_t red = 0, total = 0;
  for (int y = y0; y < frame.height(); ++y) {
    const std::uint8_t* row = frame.row(y);
    for (int x = 0; x < frame.width(); ++x) red += (gain == 1.0 ? is_red(row + 3 * x, params) : is_red_scaled(row + 3 * x, params, gain)) ? 1 : 0;
    total += static_cast<std::size_t>(frame.width());
  }
  return total == 0 ? 0.0 : static_cast<double>(red) / static_cast<double>(total);
}

LapState update_laps_with_fraction(const LapState& state, double red_frac, double odometer,
                                   const LapCounterParams& params) {
  LapState next = state;
  next.distance_since_trigger += std::max(0.0, odometer - state.last_odometer);
  next.last_odometer = odometer;
  if (next.armed) {
    if (red_frac >= params.trigger_on && next.laps_completed < params.lap_target) {
      ++next.laps_completed;
      next.armed = false;
      next.distance_since_trigger = 0.0;
    }
  } else if (red_frac <= params.trigger_off && next.distance_since_trigger >= params.re_arm_distance) {
    next.armed = true;
  }
  return next;
}

LapState update_laps(const LapState& state, const ImageBuffer& frame, double odometer,
                     const LapCounterParams& params) {
  double gain = 1.0;
  if (params.exposure_target > 0.0 && frame.channels() == 3) {
    const double mean = lower_third_mean(frame);
    if (mean > 0.0 && mean < params.exposure_target) gain = std::min(params.exposure_target / mean, kMaxExposureGain);
  }
  return update_laps_with_fraction(state, red_fraction(frame, params.red, gain), odometer, params);
}

}  // namespace lanekeeper
