// Episode runner, metrics, configuration and the offline subcommands
// (record, augment-data, train-model, compare, eval-frame, slope-study).
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lanekeeper/control.hpp"
#include "lanekeeper/e2e.hpp"
#include "lanekeeper/perception.hpp"
#include "lanekeeper/simworld.hpp"
#include "lanekeeper/slopefit.hpp"

namespace lanekeeper::harness {

enum class ControllerKind { kHybrid, kE2E, kTeleop };

ControllerKind parse_controller(std::string_view name);
std::string_view to_string(ControllerKind kind);

// Every tunable of the workbench. Text form is flat `key = value` lines with
// `#` comments; see config_keys() for the key list.
struct Config {
  ControllerKind controller = ControllerKind::kHybrid;
  int lap_target = 5;
  std::string weather = "clear";
  std::uint64_t seed = 0;
  double tick = kTickSeconds;
  // 0 picks twice the nominal time for lap_target laps at cruise_speed.
  long max_ticks = 0;
  // The camera delivers a frame every camera_divider ticks (25 Hz by default,
  // under the sensor's 37 fps limit); commands are held in between.
  int camera_divider = 2;
  int publish_divider = 1;

  double cruise_speed = 5.0;
  double yaw_gain = 4.0;
  double deadband_px = kDefaultDeadbandPx;
  double lane_width_px = 480.0;
  double roi_keep_fraction = 0.35;
  int lost_lane_ticks = 10;

  SegmenterConfig segmenter;
  HoughParams hough;
  EnvelopeLimits envelope;
  LapCounterParams laps;
  TrackSpec track;
  double start_behind = 3.0;
  CameraModel camera;

  std::string model_path;
  e2e::RecordOptions record;
  // Std-dev (rad/s) of a slowly varying yaw perturbation added to the executed
  // command while recording; labels keep the unperturbed command.
  double record_yaw_noise = 0.0;
  double record_noise_time_constant = 1.0;
  e2e::AugmentParams augment;
  e2e::TrainOptions train;
  e2e::EnsembleParams ensemble;

  double stale_command_ms = 500.0;
  double stream_hz = 20.0;
  int stream_width = 320;
  int stream_height = 240;
  int frame_queue_depth = 4;
  std::string serve_host = "127.0.0.1";
  bool serve_realtime = true;

  slopefit::SlopeMode slope_mode = slopefit::SlopeMode::kPlain;

  void validate() const;
  long effective_max_ticks() const;
};

const std::vector<std::string>& config_keys();

// Throws std::invalid_argument on unknown keys or unparsable values.
void set_config_value(Config& config, std::string_view key, std::string_view value);
std::string get_config_value(const Config& config, std::string_view key);

Config parse_config(std::string_view text, Config base = {});
Config load_config(const std::filesystem::path& path, Config base = {});
// All keys, one per line, in config_keys() order.
std::string dump_config(const Config& config);

struct LapRecord {
  int lap = 0;
  long ticks = 0;
  double avg_speed = 0.0;
  // Absent when no frame of the lap produced a lane estimate.
  std::optional<double> avg_steering_error_px;
  double avg_cross_track_error_m = 0.0;
};

struct LapMetrics {
  std::string controller;
  std::string lane;
  std::string weather;
  std::uint64_t seed = 0;
  int lap_target = 0;

  int laps_completed = 0;
  double avg_speed = 0.0;
  std::optional<double> avg_steering_error_px;
  double avg_cross_track_error_m = 0.0;
  double max_abs_cross_track_error_m = 0.0;
  std::vector<LapRecord> per_lap;
  long partial_lap_ticks = 0;
  long total_ticks = 0;
  long frames = 0;
  // "completed" or "error".
  std::string episode_result = "completed";
  // lap_target | tick_limit for completed episodes; lost_lane | off_track for errors.
  std::string stop_reason;
  std::string error_reason;
  // Simulated seconds (total_ticks * tick), so metrics stay reproducible.
  double wall_time = 0.0;

  bool completed() const { return episode_result == "completed"; }
};

std::string metrics_to_json(const LapMetrics& metrics);
LapMetrics metrics_from_json(std::string_view text);
void write_metrics(const LapMetrics& metrics, const std::filesystem::path& path);
LapMetrics read_metrics(const std::filesystem::path& path);

// Perception front end shared by the hybrid controller and the steering-error
// monitor.
struct LaneObservation {
  Segmentation segmentation;
  std::vector<LineSegment> segments;
  LaneEstimate estimate;
};

LaneObservation observe_lane(const ImageBuffer& frame, const Config& config, std::uint64_t frame_index,
                             const ImageBuffer* oracle_mask = nullptr);

// Yaw command of the hybrid controller, or nothing without a lane estimate.
std::optional<double> hybrid_yaw(const LaneEstimate& estimate, const Config& config);

// One tick's view handed to a controller.
struct ControlInput {
  const RenderedFrame& frame;
  const LaneObservation& observation;
  const TwistCommand& previous;
  long tick = 0;
};

class Controller {
 public:
  virtual ~Controller() = default;
  // nullopt means "no decision": the runner holds the previous command.
  virtual std::optional<TwistCommand> decide(const ControlInput& input) = 0;
};

class HybridController : public Controller {
 public:
  explicit HybridController(const Config& config) : config_(config) {}
  std::optional<TwistCommand> decide(const ControlInput& input) override;

 private:
  const Config& config_;
};

class E2EController : public Controller {
 public:
  E2EController(const Config& config, e2e::LinearSteeringModel model);
  std::optional<TwistCommand> decide(const ControlInput& input) override;

 private:
  const Config& config_;
  e2e::LinearSteeringModel model_;
};

// Remote human commands: steer in [-1,1] (negative = left), speed in [0,1].
struct RemoteCommand {
  double steer = 0.0;
  double speed = 0.0;
};

TwistCommand remote_to_twist(const RemoteCommand& cmd, const Config& config);

struct FrameEvent {
  const RenderedFrame& frame;
  const LaneObservation& observation;
  TwistCommand label;    // the controller's clamped command
  TwistCommand applied;  // what the vehicle executes next
  long tick = 0;
};

struct EpisodeHooks {
  // Teleop command source; returns nothing when no fresh command exists.
  std::function<std::optional<RemoteCommand>()> remote_command;
  std::function<void(const FrameEvent&)> on_frame;
  // Called after each tick; returning false stops the episode (stop_reason "stopped").
  std::function<bool(long tick, const VehiclePose& pose, const LapState& laps)> on_tick;
  // Called before each tick; may block while the episode is paused.
  std::function<void()> wait_if_paused;
};

// Runs one episode. E2E episodes load config.model_path. Controller failures
// (lost lane, off-track) end the episode with episode_result "error".
LapMetrics run_episode(const Config& config, const EpisodeHooks& hooks = {});

// run_episode with every camera frame logged.
struct RecordResult {
  LapMetrics metrics;
  e2e::Dataset dataset;
};
RecordResult record_episode(const Config& config);

// Side-by-side text table; throws on an empty list.
std::string compare_report(const std::vector<std::pair<std::string, LapMetrics>>& runs);

struct FrameEvaluation {
  std::optional<double> yaw;
  std::optional<LaneEstimate> estimate;
  std::vector<LineSegment> segments;
  ImageBuffer annotated;
  std::string message;
};

// Single-image run of the hybrid pipeline or the e2e model (model required).
FrameEvaluation evaluate_frame(const ImageBuffer& frame, const Config& config,
                               const e2e::LinearSteeringModel* model = nullptr);

struct SlopeStudy {
  LapMetrics metrics;
  std::vector<slopefit::SlopeSample> samples;
  std::vector<slopefit::FitSummary> fits;
};

// Drives an episode, extracts per-frame segments and commanded yaw, and fits
// every slope model.
SlopeStudy run_slope_study(const Config& config);

}  // namespace lanekeeper::harness
