// Steering law, command envelope, red start-marker detection and lap counting.
#pragma once

#include "lanekeeper/image.hpp"

namespace lanekeeper {

// Forward speed (m/s) and yaw rate (rad/s, positive = counter-clockwise).
struct TwistCommand {
  double linear_x = 0.0;
  double angular_z = 0.0;

  friend bool operator==(const TwistCommand&, const TwistCommand&) = default;
};

inline constexpr double kDefaultDeadbandPx = 10.0;

// Proportional steering toward the lane center: zero inside the deadband,
// otherwise (mid_x - center_x) / mid_x. Positive means turn left.
double steer(double center_x, double mid_x, double deadband = kDefaultDeadbandPx);

struct EnvelopeLimits {
  double speed_cap = 8.9;       // ~20 mph
  double yaw_cap = 1.5;
  double yaw_rate_delta = 0.1;  // max |yaw change| per tick

  void validate() const;
};

TwistCommand command_envelope(const TwistCommand& raw, const TwistCommand& prev, const EnvelopeLimits& limits);

struct RedMaskParams {
  int min_red = 120;
  int min_dominance = 50;  // R - max(G, B)
};

ImageBuffer red_mask(const ImageBuffer& frame, const RedMaskParams& params = {});

// Fraction of red pixels in the lower third of the frame, after scaling every
// channel value by `gain` (saturating at 255).
double red_fraction(const ImageBuffer& frame, const RedMaskParams& params = {}, double gain = 1.0);

inline constexpr double kMaxExposureGain = 4.0;

struct LapCounterParams {
  int lap_target = 5;
  double trigger_on = 0.05;
  double trigger_off = 0.01;
  double re_arm_distance = 10.0;
  RedMaskParams red;
  // Dark frames are brightened until the lower-third mean reaches this level
  // (gain at most kMaxExposureGain) before marker detection; 0 disables.
  double exposure_target = 90.0;
};

struct LapState {
  int laps_completed = 0;
  bool armed = true;
  double distance_since_trigger = 0.0;
  double last_odometer = 0.0;

  // A vehicle parked behind the start marker: the first crossing is the start,
  // not a lap, so the counter begins disarmed.
  static LapState at_start_line(double odometer = 0.0) {
    return LapState{0, false, 0.0, odometer};
  }
};

LapState update_laps_with_fraction(const LapState& state, double red_frac, double odometer,
                                   const LapCounterParams& params);

LapState update_laps(const LapState& state, const ImageBuffer& frame, double odometer,
                     const LapCounterParams& params);

}  // namespace lanekeeper
