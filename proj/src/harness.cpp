#include "lanekeeper/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace lanekeeper::harness {

using json = nlohmann::ordered_json;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T v{};
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw std::invalid_argument("config: bad value for '" + std::string(key) + "': '" + std::string(text) + "'");
  }
  return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw std::invalid_argument("config: bad boolean for '" + std::string(key) + "': '" + std::string(text) + "'");
}

constexpr double kDegToRad = std::numbers::pi / 180.0;

struct Entry {
  std::string key;
  std::function<void(Config&, std::string_view)> set;
  std::function<std::string(const Config&)> get;
};

template <typename T, typename Access>
Entry number(std::string key, Access access) {
  return {key,
          [access, key](Config& c, std::string_view v) { access(c) = parse_number<T>(key, v); },
          [access](const Config& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return fmt_double(access(c));
            } else {
              return std::to_string(access(c));
            }
          }};
}

// Angles are stored in radians but written in degrees.
template <typename Access>
Entry degrees(std::string key, Access access) {
  return {key,
          [access, key](Config& c, std::string_view v) { access(c) = parse_number<double>(key, v) * kDegToRad; },
          [access](const Config& c) { return fmt_double(access(c) / kDegToRad); }};
}

template <typename Access>
Entry text(std::string key, Access access) {
  return {key, [access](Config& c, std::string_view v) { access(c) = std::string(v); },
          [access](const Config& c) { return access(c); }};
}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = [] {
    std::vector<Entry> t;
    t.push_back({"controller", [](Config& c, std::string_view v) { c.controller = parse_controller(v); },
                 [](const Config& c) { return std::string(to_string(c.controller)); }});
    t.push_back({"lane", [](Config& c, std::string_view v) { c.track.lane = parse_lane(v); },
                 [](const Config& c) { return std::string(to_string(c.track.lane)); }});
    t.push_back(number<int>("laps", [](auto& c) -> auto& { return c.lap_target; }));
    t.push_back(text("weather", [](auto& c) -> auto& { return c.weather; }));
    t.push_back(number<std::uint64_t>("seed", [](auto& c) -> auto& { return c.seed; }));
    t.push_back(number<double>("tick", [](auto& c) -> auto& { return c.tick; }));
    t.push_back(number<long>("max_ticks", [](auto& c) -> auto& { return c.max_ticks; }));
    t.push_back(number<int>("camera_divider", [](auto& c) -> auto& { return c.camera_divider; }));
    t.push_back(number<int>("publish_divider", [](auto& c) -> auto& { return c.publish_divider; }));
    t.push_back(number<double>("cruise_speed", [](auto& c) -> auto& { return c.cruise_speed; }));
    t.push_back(number<double>("yaw_gain", [](auto& c) -> auto& { return c.yaw_gain; }));
    t.push_back(number<double>("deadband_px", [](auto& c) -> auto& { return c.deadband_px; }));
    t.push_back(number<double>("lane_width_px", [](auto& c) -> auto& { return c.lane_width_px; }));
    t.push_back(number<double>("roi_keep_fraction", [](auto& c) -> auto& { return c.roi_keep_fraction; }));
    t.push_back(number<int>("lost_lane_ticks", [](auto& c) -> auto& { return c.lost_lane_ticks; }));

    t.push_back({"segmenter", [](Config& c, std::string_view v) { c.segmenter.method = parse_segmenter(v); },
                 [](const Config& c) { return std::string(to_string(c.segmenter.method)); }});
    t.push_back(number<int>("median_kernel", [](auto& c) -> auto& { return c.segmenter.median_kernel; }));
    t.push_back(number<double>("min_white_frac", [](auto& c) -> auto& { return c.segmenter.min_white_frac; }));
    t.push_back(number<double>("max_white_frac", [](auto& c) -> auto& { return c.segmenter.max_white_frac; }));

    t.push_back(number<double>("hough_rho", [](auto& c) -> auto& { return c.hough.rho_resolution; }));
    t.push_back(degrees("hough_theta_deg", [](auto& c) -> auto& { return c.hough.theta_resolution; }));
    t.push_back(number<int>("hough_votes", [](auto& c) -> auto& { return c.hough.vote_threshold; }));
    t.push_back(number<double>("hough_min_length", [](auto& c) -> auto& { return c.hough.min_length; }));
    t.push_back(number<int>("hough_max_gap", [](auto& c) -> auto& { return c.hough.max_gap; }));
    t.push_back(number<double>("slope_min", [](auto& c) -> auto& { return c.hough.slope_min; }));
    t.push_back(number<double>("slope_max", [](auto& c) -> auto& { return c.hough.slope_max; }));

    t.push_back(number<double>("speed_cap", [](auto& c) -> auto& { return c.envelope.speed_cap; }));
    t.push_back(number<double>("yaw_cap", [](auto& c) -> auto& { return c.envelope.yaw_cap; }));
    t.push_back(number<double>("yaw_rate_delta", [](auto& c) -> auto& { return c.envelope.yaw_rate_delta; }));

    t.push_back(number<int>("red_min", [](auto& c) -> auto& { return c.laps.red.min_red; }));
    t.push_back(number<int>("red_dominance", [](auto& c) -> auto& { return c.laps.red.min_dominance; }));
    t.push_back(number<double>("lap_trigger_on", [](auto& c) -> auto& { return c.laps.trigger_on; }));
    t.push_back(number<double>("lap_trigger_off", [](auto& c) -> auto& { return c.laps.trigger_off; }));
    t.push_back(number<double>("lap_re_arm_distance", [](auto& c) -> auto& { return c.laps.re_arm_distance; }));
    t.push_back(number<double>("lap_exposure_target", [](auto& c) -> auto& { return c.laps.exposure_target; }));

    t.push_back(number<double>("straight_length", [](auto& c) -> auto& { return c.track.straight_length; }));
    t.push_back(number<double>("corner_radius", [](auto& c) -> auto& { return c.track.corner_radius; }));
    t.push_back(number<double>("lane_width", [](auto& c) -> auto& { return c.track.lane_width; }));
    t.push_back(number<double>("line_width", [](auto& c) -> auto& { return c.track.line_width; }));
    t.push_back(number<double>("marker_length", [](auto& c) -> auto& { return c.track.marker_length; }));
    t.push_back(number<double>("line_fade", [](auto& c) -> auto& { return c.track.line_fade; }));
    t.push_back(number<double>("start_behind", [](auto& c) -> auto& { return c.start_behind; }));

    t.push_back(number<int>("camera_width", [](auto& c) -> auto& { return c.camera.output_width; }));
    t.push_back(number<int>("camera_height", [](auto& c) -> auto& { return c.camera.output_height; }));
    t.push_back(degrees("camera_hfov_deg", [](auto& c) -> auto& { return c.camera.horizontal_fov; }));
    t.push_back(number<double>("camera_mount_height", [](auto& c) -> auto& { return c.camera.mount_height; }));
    t.push_back(degrees("camera_pitch_deg", [](auto& c) -> auto& { return c.camera.pitch_down; }));

    t.push_back(text("model_path", [](auto& c) -> auto& { return c.model_path; }));
    t.push_back(number<int>("record_width", [](auto& c) -> auto& { return c.record.width; }));
    t.push_back(number<int>("record_height", [](auto& c) -> auto& { return c.record.height; }));
    t.push_back(number<double>("record_yaw_noise", [](auto& c) -> auto& { return c.record_yaw_noise; }));
    t.push_back(number<double>("record_noise_time_constant",
                               [](auto& c) -> auto& { return c.record_noise_time_constant; }));
    t.push_back(number<double>("augment_brightness", [](auto& c) -> auto& { return c.augment.brightness_delta; }));
    t.push_back(number<double>("augment_contrast", [](auto& c) -> auto& { return c.augment.contrast_factor; }));
    t.push_back(number<double>("augment_gamma_low", [](auto& c) -> auto& { return c.augment.gamma_low; }));
    t.push_back(number<double>("augment_gamma_high", [](auto& c) -> auto& { return c.augment.gamma_high; }));
    t.push_back(number<double>("augment_noise_sigma", [](auto& c) -> auto& { return c.augment.noise_sigma; }));
    t.push_back(number<int>("train_epochs", [](auto& c) -> auto& { return c.train.epochs; }));
    t.push_back(number<double>("train_learning_rate", [](auto& c) -> auto& { return c.train.learning_rate; }));
    t.push_back(number<double>("train_l2", [](auto& c) -> auto& { return c.train.l2; }));
    t.push_back(
        number<double>("ensemble_brightness", [](auto& c) -> auto& { return c.ensemble.brightness_delta; }));
    t.push_back(number<double>("ensemble_contrast", [](auto& c) -> auto& { return c.ensemble.contrast_factor; }));
    t.push_back(
        number<double>("ensemble_outlier_delta", [](auto& c) -> auto& { return c.ensemble.outlier_delta; }));
    t.push_back(number<double>("ensemble_rate_delta", [](auto& c) -> auto& { return c.ensemble.rate_delta; }));

    t.push_back(number<double>("stale_command_ms", [](auto& c) -> auto& { return c.stale_command_ms; }));
    t.push_back(number<double>("stream_hz", [](auto& c) -> auto& { return c.stream_hz; }));
    t.push_back(number<int>("stream_width", [](auto& c) -> auto& { return c.stream_width; }));
    t.push_back(number<int>("stream_height", [](auto& c) -> auto& { return c.stream_height; }));
    t.push_back(number<int>("frame_queue_depth", [](auto& c) -> auto& { return c.frame_queue_depth; }));
    t.push_back(text("serve_host", [](auto& c) -> auto& { return c.serve_host; }));
    t.push_back({"serve_realtime", [](Config& c, std::string_view v) { c.serve_realtime = parse_bool("serve_realtime", v); },
                 [](const Config& c) { return std::string(c.serve_realtime ? "true" : "false"); }});
    t.push_back({"slope_mode", [](Config& c, std::string_view v) { c.slope_mode = slopefit::parse_slope_mode(v); },
                 [](const Config& c) { return std::string(slopefit::to_string(c.slope_mode)); }});
    return t;
  }();
  return table;
}

const Entry& find_entry(std::string_view key) {
  for (const auto& e : entries()) {
    if (e.key == key) return e;
  }
  throw std::invalid_argument("config: unknown key '" + std::string(key) + "'");
}

std::optional<double> mean_or_none(double sum, long count) {
  if (count == 0) return std::nullopt;
  return sum / static_cast<double>(count);
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> read_optional(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

ControllerKind parse_controller(std::string_view name) {
  if (name == "hybrid") return ControllerKind::kHybrid;
  if (name == "e2e") return ControllerKind::kE2E;
  if (name == "teleop") return ControllerKind::kTeleop;
  throw std::invalid_argument("unknown controller '" + std::string(name) + "' (hybrid | e2e | teleop)");
}

std::string_view to_string(ControllerKind kind) {
  switch (kind) {
    case ControllerKind::kHybrid: return "hybrid";
    case ControllerKind::kE2E: return "e2e";
    case ControllerKind::kTeleop: return "teleop";
  }
  return "hybrid";
}

void Config::validate() const {
  if (lap_target < 1) throw std::invalid_argument("config: laps must be >= 1");
  if (!(tick > 0.0)) throw std::invalid_argument("config: tick must be > 0");
  if (max_ticks < 0) throw std::invalid_argument("config: max_ticks must be >= 0");
  if (camera_divider < 1 || publish_divider < 1) throw std::invalid_argument("config: dividers must be >= 1");
  if (!(cruise_speed >= 0.0)) throw std::invalid_argument("config: cruise_speed must be >= 0");
  if (!(roi_keep_fraction > 0.0 && roi_keep_fraction <= 1.0)) {
    throw std::invalid_argument("config: roi_keep_fraction must be in (0, 1]");
  }
  if (lost_lane_ticks < 0) throw std::invalid_argument("config: lost_lane_ticks must be >= 0");
  if (!(record_yaw_noise >= 0.0) || !(record_noise_time_constant > 0.0)) {
    throw std::invalid_argument("config: bad recording noise settings");
  }
  if (!(stream_hz > 0.0) || stream_width < 1 || stream_height < 1 || frame_queue_depth < 1) {
    throw std::invalid_argument("config: bad streaming settings");
  }
  if (!(stale_command_ms > 0.0)) throw std::invalid_argument("config: stale_command_ms must be > 0");
  hough.validate();
  envelope.validate();
  track.validate();
  camera.validate();
  ensemble.validate();
  weather_preset(weather, seed);
}

long Config::effective_max_ticks() const {
  if (max_ticks > 0) return max_ticks;
  if (!(cruise_speed > 0.0)) throw std::invalid_argument("config: max_ticks = 0 needs cruise_speed > 0");
  const double nominal = (lap_target * track.lap_length(track.lane) + start_behind) / cruise_speed / tick;
  return static_cast<long>(std::ceil(2.0 * nominal));
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& e : entries()) k.push_back(e.key);
    return k;
  }();
  return keys;
}

void set_config_value(Config& config, std::string_view key, std::string_view value) {
  find_entry(key).set(config, value);
}

std::string get_config_value(const Config& config, std::string_view key) { return find_entry(key).get(config); }

Config parse_config(std::string_view text, Config base) {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    set_config_value(base, trim(std::string_view(stripped).substr(0, eq)),
                     trim(std::string_view(stripped).substr(eq + 1)));
  }
  return base;
}

Config load_config(const std::filesystem::path& path, Config base) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string dump_config(const Config& config) {
  std::string out;
  for (const auto& e : entries()) out += e.key + " = " + e.get(config) + "\n";
  return out;
}

std::string metrics_to_json(const LapMetrics& m) {
  json j;
  j["controller"] = m.controller;
  j["lane"] = m.lane;
  j["weather"] = m.weather;
  j["seed"] = m.seed;
  j["lap_target"] = m.lap_target;
  j["laps_completed"] = m.laps_completed;
  j["avg_speed"] = m.avg_speed;
  j["avg_steering_error_px"] = optional_number(m.avg_steering_error_px);
  j["avg_cross_track_error_m"] = m.avg_cross_track_error_m;
  j["max_abs_cross_track_error_m"] = m.max_abs_cross_track_error_m;
  json laps = json::array();
  for (const auto& lap : m.per_lap) {
    json l;
    l["lap"] = lap.lap;
    l["ticks"] = lap.ticks;
    l["avg_speed"] = lap.avg_speed;
    l["avg_steering_error_px"] = optional_number(lap.avg_steering_error_px);
    l["avg_cross_track_error_m"] = lap.avg_cross_track_error_m;
    laps.push_back(std::move(l));
  }
  j["per_lap"] = std::move(laps);
  j["partial_lap_ticks"] = m.partial_lap_ticks;
  j["total_ticks"] = m.total_ticks;
  j["frames"] = m.frames;
  j["episode_result"] = m.episode_result;
  j["stop_reason"] = m.stop_reason;
  j["error_reason"] = m.error_reason.empty() ? json(nullptr) : json(m.error_reason);
  j["wall_time"] = m.wall_time;
  return j.dump(2) + "\n";
}

LapMetrics metrics_from_json(std::string_view text) try {
  const json j = json::parse(text);
  LapMetrics m;
  m.controller = j.at("controller").get<std::string>();
  m.lane = j.at("lane").get<std::string>();
  m.weather = j.at("weather").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.lap_target = j.at("lap_target").get<int>();
  m.laps_completed = j.at("laps_completed").get<int>();
  m.avg_speed = j.at("avg_speed").get<double>();
  m.avg_steering_error_px = read_optional(j, "avg_steering_error_px");
  m.avg_cross_track_error_m = j.at("avg_cross_track_error_m").get<double>();
  m.max_abs_cross_track_error_m = j.at("max_abs_cross_track_error_m").get<double>();
  for (const auto& l : j.at("per_lap")) {
    m.per_lap.push_back(LapRecord{l.at("lap").get<int>(), l.at("ticks").get<long>(), l.at("avg_speed").get<double>(),
                                  read_optional(l, "avg_steering_error_px"),
                                  l.at("avg_cross_track_error_m").get<double>()});
  }
  m.partial_lap_ticks = j.at("partial_lap_ticks").get<long>();
  m.total_ticks = j.at("total_ticks").get<long>();
  m.frames = j.at("frames").get<long>();
  m.episode_result = j.at("episode_result").get<std::string>();
  m.stop_reason = j.at("stop_reason").get<std::string>();
  m.error_reason = j.at("error_reason").is_null() ? "" : j.at("error_reason").get<std::string>();
  m.wall_time = j.at("wall_time").get<double>();
  return m;
} catch (const json::exception& e) {
  throw std::runtime_error(std::string("metrics JSON: ") + e.what());
}

void write_metrics(const LapMetrics& metrics, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write metrics " + path.string());
  out << metrics_to_json(metrics);
}

LapMetrics read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open metrics " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return metrics_from_json(ss.str());
}

LaneObservation observe_lane(const ImageBuffer& frame, const Config& config, std::uint64_t frame_index,
                             const ImageBuffer* oracle_mask) {
  LaneObservation obs;
  obs.segmentation = segment_lower_region(frame, config.segmenter, config.roi_keep_fraction, oracle_mask);
  HoughParams hp = config.hough;
  hp.rng_seed = config.hough.rng_seed + frame_index;
  obs.segments = detect_segments(obs.segmentation.mask, hp);
  obs.estimate = estimate_lane(obs.segments, frame.width(), config.lane_width_px);
  return obs;
}

std::optional<double> hybrid_yaw(const LaneEstimate& estimate, const Config& config) {
  if (!estimate.center_x) return std::nullopt;
  return config.yaw_gain * steer(*estimate.center_x, estimate.mid_x, config.deadband_px);
}

std::optional<TwistCommand> HybridController::decide(const ControlInput& input) {
  const auto yaw = hybrid_yaw(input.observation.estimate, config_);
  if (!yaw) return std::nullopt;
  return TwistCommand{config_.cruise_speed, *yaw};
}

E2EController::E2EController(const Config& config, e2e::LinearSteeringModel model)
    : config_(config), model_(std::move(model)) {
  model_.validate();
}

std::optional<TwistCommand> E2EController::decide(const ControlInput& input) {
  const double yaw = e2e::ensemble_predict(model_, input.frame.frame, input.previous.angular_z, config_.ensemble);
  return TwistCommand{config_.cruise_speed, yaw};
}

TwistCommand remote_to_twist(const RemoteCommand& cmd, const Config& config) {
  const double steer_in = std::clamp(cmd.steer, -1.0, 1.0);
  const double speed_in = std::clamp(cmd.speed, 0.0, 1.0);
  // Left (negative steer) is a counter-clockwise, positive yaw rate.
  return TwistCommand{speed_in * config.envelope.speed_cap, -steer_in * config.envelope.yaw_cap};
}

namespace {

class TeleopController : public Controller {
 public:
  TeleopController(const Config& config, std::function<std::optional<RemoteCommand>()> source)
      : config_(config), source_(std::move(source)) {}

  std::optional<TwistCommand> decide(const ControlInput& input) override {
    if (source_) {
      if (auto cmd = source_()) return remote_to_twist(*cmd, config_);
    }
    // Stale or absent command: hold speed, zero yaw.
    return TwistCommand{input.previous.linear_x, 0.0};
  }

 private:
  const Config& config_;
  std::function<std::optional<RemoteCommand>()> source_;
};

struct LapAccumulator {
  long ticks = 0;
  double speed_sum = 0.0;
  double cte_sum = 0.0;
  double px_sum = 0.0;
  long px_count = 0;
};

TwistCommand clamp_to_caps(const TwistCommand& cmd, const EnvelopeLimits& limits) {
  return {std::clamp(cmd.linear_x, -limits.speed_cap, limits.speed_cap),
          std::clamp(cmd.angular_z, -limits.yaw_cap, limits.yaw_cap)};
}

}  // namespace

LapMetrics run_episode(const Config& config, const EpisodeHooks& hooks) {
  config.validate();
  std::unique_ptr<Controller> controller;
  switch (config.controller) {
    case ControllerKind::kHybrid:
      controller = std::make_unique<HybridController>(config);
      break;
    case ControllerKind::kE2E:
      if (config.model_path.empty()) throw std::runtime_error("e2e controller needs model_path (--model)");
      if (!std::filesystem::exists(config.model_path)) {
        throw std::runtime_error("model file not found: " + config.model_path);
      }
      controller = std::make_unique<E2EController>(config, e2e::load_model(config.model_path));
      break;
    case ControllerKind::kTeleop:
      controller = std::make_unique<TeleopController>(config, hooks.remote_command);
      break;
  }

  const Renderer renderer(config.track, config.camera);
  const WeatherCondition weather = weather_preset(config.weather, config.seed);
  const long max_ticks = config.effective_max_ticks();
  const double lane_width = config.track.lane_width;

  LapMetrics m;
  m.controller = std::string(to_string(config.controller));
  m.lane = std::string(to_string(config.track.lane));
  m.weather = config.weather;
  m.seed = config.seed;
  m.lap_target = config.lap_target;

  LapCounterParams lap_params = config.laps;
  lap_params.lap_target = config.lap_target;

  VehiclePose pose = start_pose(config.track, config.start_behind);
  LapState laps = LapState::at_start_line(pose.odometer);
  TwistCommand target{};
  TwistCommand applied{};
  long ticks_since_decision = 0;

  std::mt19937_64 noise_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double noise_decay = std::exp(-config.tick / config.record_noise_time_constant);
  const double noise_scale = config.record_yaw_noise * std::sqrt(1.0 - noise_decay * noise_decay);
  double yaw_noise = 0.0;

  LapAccumulator lap_acc, total_acc;
  auto close_lap = [&] {
    LapRecord r;
    r.lap = static_cast<int>(m.per_lap.size()) + 1;
    r.ticks = lap_acc.ticks;
    r.avg_speed = lap_acc.ticks ? lap_acc.speed_sum / lap_acc.ticks : 0.0;
    r.avg_steering_error_px = mean_or_none(lap_acc.px_sum, lap_acc.px_count);
    r.avg_cross_track_error_m = lap_acc.ticks ? lap_acc.cte_sum / lap_acc.ticks : 0.0;
    m.per_lap.push_back(r);
    lap_acc = {};
  };

  long tick = 0;
  for (; tick < max_ticks; ++tick) {
    if (hooks.wait_if_paused) hooks.wait_if_paused();
    bool lap_closed = false;

    if (tick % config.camera_divider == 0) {
      const RenderedFrame frame = renderer.render(pose, weather, static_cast<std::uint64_t>(tick));
      ++m.frames;
      const int before = laps.laps_completed;
      laps = update_laps(laps, frame.frame, pose.odometer, lap_params);
      lap_closed = laps.laps_completed > before;

      const LaneObservation obs =
          observe_lane(frame.frame, config, static_cast<std::uint64_t>(tick), &frame.oracle_mask);
      if (obs.estimate.center_x) {
        const double err = std::abs(*obs.estimate.center_x - obs.estimate.mid_x);
        lap_acc.px_sum += err;
        ++lap_acc.px_count;
        total_acc.px_sum += err;
        ++total_acc.px_count;
      }
      if (auto decision = controller->decide(ControlInput{frame, obs, applied, tick})) {
        target = clamp_to_caps(*decision, config.envelope);
        ticks_since_decision = 0;
      }
      if (hooks.on_frame) {
        TwistCommand executed = target;
        executed.angular_z += yaw_noise;
        const TwistCommand next = command_envelope(executed, applied, config.envelope);
        hooks.on_frame(FrameEvent{frame, obs, target, next, tick});
      }
    }

    if (ticks_since_decision > config.lost_lane_ticks) {
      target.angular_z = 0.0;
      m.episode_result = "error";
      m.stop_reason = "lost_lane";
      m.error_reason = "lost_lane";
      break;
    }
    ++ticks_since_decision;

    if (tick % config.publish_divider == 0) {
      TwistCommand executed = target;
      executed.angular_z += yaw_noise;
      applied = command_envelope(executed, applied, config.envelope);
    }
    yaw_noise = yaw_noise * noise_decay + noise_scale * gauss(noise_rng);

    pose = step(pose, applied, config.tick);
    const double cte = std::abs(cross_track_error(config.track, pose));
    m.max_abs_cross_track_error_m = std::max(m.max_abs_cross_track_error_m, cte);
    for (auto* acc : {&lap_acc, &total_acc}) {
      ++acc->ticks;
      acc->speed_sum += applied.linear_x;
      acc->cte_sum += cte;
    }
    if (lap_closed) close_lap();

    if (cte > lane_width) {
      ++tick;
      m.episode_result = "error";
      m.stop_reason = "off_track";
      m.error_reason = "off_track";
      break;
    }
    if (laps.laps_completed >= config.lap_target) {
      ++tick;
      m.stop_reason = "lap_target";
      break;
    }
    if (hooks.on_tick && !hooks.on_tick(tick, pose, laps)) {
      ++tick;
      m.stop_reason = "stopped";
      break;
    }
  }
  if (m.stop_reason.empty()) {
    m.stop_reason = "tick_limit";
    // An explicit max_ticks is a requested truncation; the derived budget means the car stalled.
    if (config.max_ticks == 0) {
      m.episode_result = "error";
      m.error_reason = "tick_limit";
    }
  }

  m.laps_completed = laps.laps_completed;
  m.partial_lap_ticks = lap_acc.ticks;
  m.total_ticks = total_acc.ticks;
  m.avg_speed = total_acc.ticks ? total_acc.speed_sum / total_acc.ticks : 0.0;
  m.avg_cross_track_error_m = total_acc.ticks ? total_acc.cte_sum / total_acc.ticks : 0.0;
  m.avg_steering_error_px = mean_or_none(total_acc.px_sum, total_acc.px_count);
  m.wall_time = static_cast<double>(m.total_ticks) * config.tick;
  return m;
}

RecordResult record_episode(const Config& config) {
  RecordResult result;
  EpisodeHooks hooks;
  hooks.on_frame = [&](const FrameEvent& ev) {
    e2e::log_record(result.dataset, ev.frame.frame, ev.label, static_cast<double>(ev.tick) * config.tick,
                    config.record);
  };
  result.metrics = run_episode(config, hooks);
  return result;
}

std::string compare_report(const std::vector<std::pair<std::string, LapMetrics>>& runs) {
  if (runs.empty()) throw std::invalid_argument("compare: no metrics given");
  auto num = [](double v, int prec) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
    return std::string(buf);
  };
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"run", "controller", "lane", "weather", "laps", "result", "avg_speed", "steer_err_px", "cte_m",
                  "max_cte_m", "sim_s"});
  for (const auto& [name, m] : runs) {
    const std::string result = m.completed() ? m.stop_reason : "error:" + m.error_reason;
    rows.push_back({name, m.controller, m.lane, m.weather,
                    std::to_string(m.laps_completed) + "/" + std::to_string(m.lap_target), result,
                    num(m.avg_speed, 3), m.avg_steering_error_px ? num(*m.avg_steering_error_px, 2) : "-",
                    num(m.avg_cross_track_error_m, 3), num(m.max_abs_cross_track_error_m, 3), num(m.wall_time, 2)});
  }
  std::vector<std::size_t> width(rows[0].size(), 0);
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::string out;
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      out += r[c];
      if (c + 1 < r.size()) out += std::string(width[c] - r[c].size() + 2, ' ');
    }
    out += '\n';
  }
  return out;
}

FrameEvaluation evaluate_frame(const ImageBuffer& frame, const Config& config, const e2e::LinearSteeringModel* model) {
  FrameEvaluation ev;
  if (config.controller == ControllerKind::kE2E) {
    if (model == nullptr) throw std::invalid_argument("eval-frame: the e2e controller needs a model");
    ev.yaw = std::clamp(e2e::predict(*model, frame), -config.envelope.yaw_cap, config.envelope.yaw_cap);
    ev.annotated = frame.channels() == 3 ? frame : gray_to_rgb(frame);
    ev.message = "steering " + fmt_double(*ev.yaw) + " rad/s";
    return ev;
  }
  const LaneObservation obs = observe_lane(frame, config, 0);
  ev.segments = obs.segments;
  ev.estimate = obs.estimate;
  ev.annotated = annotate(frame, obs.estimate, obs.segments);
  if (const auto yaw = hybrid_yaw(obs.estimate, config)) {
    ev.yaw = std::clamp(*yaw, -config.envelope.yaw_cap, config.envelope.yaw_cap);
    ev.message = "steering " + fmt_double(*ev.yaw) + " rad/s (center_x " + fmt_double(*obs.estimate.center_x) +
                 ", mid_x " + fmt_double(obs.estimate.mid_x) + ", " + std::to_string(obs.segments.size()) +
                 " segments)";
  } else {
    ev.message = "no lane estimate (" + std::to_string(obs.segments.size()) + " segments)";
  }
  return ev;
}

SlopeStudy run_slope_study(const Config& config) {
  SlopeStudy study;
  std::vector<slopefit::FrameSegments> frames;
  EpisodeHooks hooks;
  hooks.on_frame = [&](const FrameEvent& ev) {
    frames.push_back({ev.tick, ev.label.angular_z, ev.frame.frame.width(), ev.observation.segments});
  };
  study.metrics = run_episode(config, hooks);
  study.samples = slopefit::mean_slope_features(frames, config.slope_mode);
  study.fits = slopefit::run_study(study.samples, config.seed);
  return study;
}

}  // namespace lanekeeper::harness
