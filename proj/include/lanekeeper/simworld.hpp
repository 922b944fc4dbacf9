// Deterministic 2-D world: a rounded-square two-lane course, unicycle
// kinematics, and a pinhole camera that ray-casts onto the ground plane.
//
// Course frame: the reference path is the middle line between the two lanes,
// i.e. every point at distance corner_radius outside the square
// [-straight_length/2, straight_length/2]^2. Travel is counter-clockwise.
// Track coordinates are (s, n): s = arc length along the reference path
// starting at the left end of the bottom straight, n = signed offset from it,
// positive outward (to the right of travel).
#pragma once

#include <array>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lanekeeper/control.hpp"
#include "lanekeeper/image.hpp"

namespace lanekeeper {

enum class Lane { kInner, kOuter };

Lane parse_lane(std::string_view name);
std::string_view to_string(Lane lane);

struct Marker {
  double s = 0.0;  // arc position of the marker's leading edge
  Lane lane = Lane::kOuter;
};

struct TrackSpec {
  double straight_length = 40.0;
  double corner_radius = 8.0;
  double lane_width = 3.0;
  double line_width = 0.1;
  Lane lane = Lane::kOuter;
  std::vector<Marker> markers{{20.0, Lane::kOuter}, {20.0, Lane::kInner}};
  double marker_length = 1.5;
  double line_fade = 1.0;

  void validate() const;

  double reference_length() const;
  // Offset of a lane's centerline from the reference path.
  double lane_offset(Lane which) const;
  double lane_offset() const { return lane_offset(lane); }
  double lap_length(Lane which) const;
  // True when [s, s + len] lies on one straight.
  bool on_straight(double s, double len) const;
};

struct TrackPoint {
  double s = 0.0;
  double n = 0.0;
};

TrackPoint to_track(const TrackSpec& track, double x, double y);

struct VehiclePose {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;  // (-pi, pi]
  double odometer = 0.0;
};

double normalize_angle(double a);

// Pose on the centerline of `lane` at arc position s, facing the travel direction.
VehiclePose pose_on_track(const TrackSpec& track, double s, double n);

// Start pose: on the active lane, `behind` meters before that lane's marker
// (or before s = 0 when the lane has no marker).
VehiclePose start_pose(const TrackSpec& track, double behind = 3.0);

inline constexpr double kTickSeconds = 0.02;

VehiclePose step(const VehiclePose& pose, const TwistCommand& cmd, double dt = kTickSeconds);

// Signed distance from the active lane centerline, positive = left of travel.
double cross_track_error(const TrackSpec& track, const VehiclePose& pose);

struct CameraModel {
  int native_width = 2064;
  int native_height = 1544;
  int output_width = 640;
  int output_height = 480;
  double horizontal_fov = 70.0 * std::numbers::pi / 180.0;
  double mount_height = 1.6;
  double pitch_down = 12.0 * std::numbers::pi / 180.0;
  double max_fps = 37.0;

  void validate() const;
  double focal_px() const;
  double horizon_row() const;
};

struct ShadowQuad {
  // World-space corners in order.
  std::array<std::pair<double, double>, 4> corners;
  double attenuation = 0.5;
};

// Image-space glare disc in normalized coordinates (fractions of the output
// width/height; radius as a fraction of the width) so presets are resolution
// independent.
struct GlareBlob {
  double cx = 0.5, cy = 0.5;
  double radius = 0.1;
  double intensity = 60.0;  // additive at the center, linear falloff to the rim
};

struct WeatherCondition {
  std::string name = "clear";
  double brightness_gain = 1.0;
  double contrast = 1.0;
  double noise_sigma = 0.0;
  std::vector<ShadowQuad> shadow_polygons;
  std::vector<GlareBlob> glare_blobs;
  double line_fade = 1.0;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

// clear | overcast | rain | glare | dusk. Unknown names throw.
WeatherCondition weather_preset(std::string_view name, std::uint64_t seed = 0);
const std::vector<std::string>& weather_preset_names();

struct RenderedFrame {
  ImageBuffer frame;        // RGB
  ImageBuffer oracle_mask;  // lane-line pixels before photometric effects
};

namespace surface {
inline constexpr std::uint8_t kAsphalt = 90;
inline constexpr std::uint8_t kLine = 235;
inline constexpr std::uint8_t kMarkerR = 200, kMarkerG = 30, kMarkerB = 30;
}  // namespace surface

// Holds per-pixel ground rays for a camera so repeated renders only pay for
// the pose transform and surface lookup.
class Renderer {
 public:
  Renderer(TrackSpec track, CameraModel camera);

  const TrackSpec& track() const { return track_; }
  const CameraModel& camera() const { return camera_; }

  // frame_index seeds the per-frame sensor noise.
  RenderedFrame render(const VehiclePose& pose, const WeatherCondition& weather,
                       std::uint64_t frame_index = 0) const;

 private:
  TrackSpec track_;
  CameraModel camera_;
  int first_ground_row_ = 0;
  // Ground hit of pixel (x, y): forward = row_forward_[y],
  // left = -row_range_[y] * column_offset_[x].
  std::vector<double> row_forward_;
  std::vector<double> row_range_;
  std::vector<double> column_offset_;
};

RenderedFrame render_camera(const TrackSpec& track, const VehiclePose& pose, const CameraModel& camera,
                            const WeatherCondition& weather, std::uint64_t frame_index = 0);

}  // namespace lanekeeper
