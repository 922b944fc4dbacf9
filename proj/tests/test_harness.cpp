#include <gtest/gtest.h>

#include <filesystem>

#include <unistd.h>

#include "lanekeeper/harness.hpp"

using namespace lanekeeper;
using namespace lanekeeper::harness;
namespace fs = std::filesystem;

namespace {

void expect_accounting(const LapMetrics& m) {
  long lap_ticks = 0;
  for (const auto& lap : m.per_lap) lap_ticks += lap.ticks;
  EXPECT_EQ(lap_ticks + m.partial_lap_ticks, m.total_ticks);
  EXPECT_EQ(static_cast<int>(m.per_lap.size()), m.laps_completed);
  EXPECT_LE(m.laps_completed, m.lap_target);
  EXPECT_GE(m.max_abs_cross_track_error_m, m.avg_cross_track_error_m);
}

}  // namespace

TEST(Config, DumpParseRoundTrip) {
  Config c;
  c.controller = ControllerKind::kE2E;
  c.lap_target = 2;
  c.weather = "rain";
  c.seed = 77;
  c.yaw_gain = 3.25;
  c.track.lane = Lane::kInner;
  c.hough.min_length = 65.5;
  const std::string text = dump_config(c);
  const Config back = parse_config(text);
  EXPECT_EQ(dump_config(back), text);
  EXPECT_EQ(back.controller, ControllerKind::kE2E);
  EXPECT_EQ(back.track.lane, Lane::kInner);
  EXPECT_EQ(back.hough.min_length, 65.5);
  for (const auto& key : config_keys()) EXPECT_NO_THROW(get_config_value(back, key)) << key;
}

TEST(Config, CommentsAndErrors) {
  const Config c = parse_config("# a comment\nlaps = 3   # trailing\n\nweather = dusk\n");
  EXPECT_EQ(c.lap_target, 3);
  EXPECT_EQ(c.weather, "dusk");
  EXPECT_THROW(parse_config("no_such_key = 1\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("laps = many\n"), std::invalid_argument);
  Config bad;
  EXPECT_THROW(set_config_value(bad, "controller", "autopilot"), std::invalid_argument);
  bad.weather = "fog";
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Metrics, JsonRoundTrip) {
  LapMetrics m;
  m.controller = "hybrid";
  m.lane = "outer";
  m.weather = "clear";
  m.seed = 3;
  m.lap_target = 2;
  m.laps_completed = 1;
  m.avg_speed = 4.99;
  m.avg_steering_error_px = 12.5;
  m.avg_cross_track_error_m = 0.04;
  m.max_abs_cross_track_error_m = 0.12;
  m.per_lap.push_back({1, 2100, 4.99, std::nullopt, 0.04});
  m.partial_lap_ticks = 10;
  m.total_ticks = 2110;
  m.frames = 1055;
  m.stop_reason = "tick_limit";
  m.wall_time = 42.2;
  const std::string json = metrics_to_json(m);
  const LapMetrics back = metrics_from_json(json);
  EXPECT_EQ(metrics_to_json(back), json);
  EXPECT_FALSE(back.per_lap[0].avg_steering_error_px.has_value());
  EXPECT_EQ(back.avg_steering_error_px, 12.5);
  EXPECT_THROW(metrics_from_json("{"), std::runtime_error);
}

TEST(Episode, SingleTickSmoke) {
  Config c;
  c.max_ticks = 1;
  const LapMetrics m = run_episode(c);
  EXPECT_EQ(m.laps_completed, 0);
  EXPECT_TRUE(m.completed());
  EXPECT_EQ(m.stop_reason, "tick_limit");
  EXPECT_EQ(m.total_ticks, 1);
  expect_accounting(m);
}

TEST(Episode, DeterministicMetrics) {
  Config c;
  c.max_ticks = 400;
  c.weather = "rain";
  c.seed = 11;
  EXPECT_EQ(metrics_to_json(run_episode(c)), metrics_to_json(run_episode(c)));
}

TEST(Episode, OneLapCountsExactlyOnce) {
  Config c;
  c.lap_target = 1;
  const LapMetrics m = run_episode(c);
  ASSERT_TRUE(m.completed()) << m.error_reason;
  EXPECT_EQ(m.laps_completed, 1);
  EXPECT_EQ(m.stop_reason, "lap_target");
  EXPECT_LT(m.max_abs_cross_track_error_m, c.track.lane_width / 2);
  // One lap of the outer lane at cruise speed, give or take the start offset.
  const double expected = c.track.lap_length(Lane::kOuter) / c.cruise_speed / c.tick;
  EXPECT_NEAR(static_cast<double>(m.total_ticks), expected, 0.05 * expected);
  expect_accounting(m);
}

TEST(Episode, HooksObserveTicksAndCanStop) {
  Config c;
  c.max_ticks = 1000;
  long seen = 0, frames = 0;
  EpisodeHooks hooks;
  hooks.on_tick = [&](long tick, const VehiclePose&, const LapState&) {
    seen = tick + 1;
    return tick < 49;
  };
  hooks.on_frame = [&](const FrameEvent&) { ++frames; };
  const LapMetrics m = run_episode(c, hooks);
  EXPECT_EQ(m.stop_reason, "stopped");
  EXPECT_EQ(seen, 50);
  EXPECT_EQ(m.total_ticks, 50);
  EXPECT_EQ(frames, m.frames);
  EXPECT_EQ(frames, 25);
}

TEST(Episode, E2EWithoutModelFails) {
  Config c;
  c.controller = ControllerKind::kE2E;
  c.max_ticks = 5;
  EXPECT_ANY_THROW(run_episode(c));
  c.model_path = "/nonexistent/model.txt";
  EXPECT_ANY_THROW(run_episode(c));
}

TEST(Episode, TeleopWithoutCommandsHoldsStill) {
  Config c;
  c.controller = ControllerKind::kTeleop;
  c.max_ticks = 50;
  const LapMetrics m = run_episode(c);
  EXPECT_TRUE(m.completed());
  EXPECT_EQ(m.avg_speed, 0.0);
}

TEST(Episode, StalledCarHitsDerivedTickLimit) {
  Config c;
  c.controller = ControllerKind::kTeleop;
  c.lap_target = 1;
  c.cruise_speed = 100.0;  // small derived budget
  const LapMetrics m = run_episode(c);
  EXPECT_EQ(m.episode_result, "error");
  EXPECT_EQ(m.error_reason, "tick_limit");
  EXPECT_EQ(m.total_ticks, c.effective_max_ticks());
}

TEST(Remote, Mapping) {
  const Config c;
  EXPECT_EQ(remote_to_twist({0.0, 0.0}, c), (TwistCommand{0.0, 0.0}));
  const TwistCommand full = remote_to_twist({-1.0, 1.0}, c);
  EXPECT_GT(full.angular_z, 0.0);  // negative steer = left = counter-clockwise
  EXPECT_LE(std::abs(full.angular_z), c.envelope.yaw_cap);
  EXPECT_LE(full.linear_x, c.envelope.speed_cap);
  EXPECT_EQ(remote_to_twist({0.5, 0.2}, c).angular_z, -remote_to_twist({-0.5, 0.2}, c).angular_z);
}

TEST(Compare, Table) {
  EXPECT_THROW(compare_report({}), std::invalid_argument);
  LapMetrics a;
  a.controller = "hybrid";
  a.laps_completed = 5;
  LapMetrics b = a;
  b.controller = "e2e";
  b.laps_completed = 0;
  b.episode_result = "error";
  b.error_reason = "off_track";
  const std::string one = compare_report({{"a", a}});
  const std::string two = compare_report({{"a", a}, {"b", b}});
  EXPECT_NE(one.find("hybrid"), std::string::npos);
  EXPECT_NE(two.find("e2e"), std::string::npos);
  EXPECT_NE(two.find("off_track"), std::string::npos);
  EXPECT_GT(std::count(two.begin(), two.end(), '\n'), std::count(one.begin(), one.end(), '\n'));
}

TEST(EvalFrame, BlankImageHasNoEstimate) {
  const FrameEvaluation ev = evaluate_frame(ImageBuffer(640, 480, 1, 0), Config{});
  EXPECT_FALSE(ev.yaw.has_value());
  EXPECT_NE(ev.message.find("no lane estimate"), std::string::npos);
  EXPECT_EQ(ev.annotated.channels(), 3);
  Config e2e_config;
  e2e_config.controller = ControllerKind::kE2E;
  EXPECT_THROW(evaluate_frame(ImageBuffer(64, 48, 1), e2e_config), std::invalid_argument);
}

TEST(EvalFrame, RenderedFrameSteers) {
  const Config c;
  const RenderedFrame f = render_camera(c.track, start_pose(c.track), c.camera, weather_preset("clear"));
  const FrameEvaluation ev = evaluate_frame(f.frame, c);
  ASSERT_TRUE(ev.yaw.has_value()) << ev.message;
  EXPECT_LE(std::abs(*ev.yaw), c.envelope.yaw_cap);
  const e2e::LinearSteeringModel zero = e2e::LinearSteeringModel::zeros();
  Config e2e_config;
  e2e_config.controller = ControllerKind::kE2E;
  EXPECT_EQ(*evaluate_frame(f.frame, e2e_config, &zero).yaw, 0.0);
}

TEST(Record, OneRecordPerFrame) {
  Config c;
  c.max_ticks = 40;
  const RecordResult r = record_episode(c);
  EXPECT_EQ(static_cast<long>(r.dataset.size()), r.metrics.frames);
  for (std::size_t i = 1; i < r.dataset.size(); ++i) {
    EXPECT_GT(r.dataset.records[i].timestamp, r.dataset.records[i - 1].timestamp);
  }
}
