#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lanekeeper/harness.hpp"
#include "lanekeeper/netpbm.hpp"
#include "lanekeeper/serve.hpp"

namespace fs = std::filesystem;
using namespace lanekeeper;
using namespace lanekeeper::harness;

namespace {

// Flags shared by the episode subcommands. Unset flags leave the config file
// (or the built-in default) in charge.
struct CommonFlags {
  std::string config_path;
  std::optional<std::string> controller, lane, weather, model;
  std::optional<int> laps;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;

  void attach(CLI::App* app, bool with_controller = true) {
    app->add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    if (with_controller) app->add_option("--controller", controller, "hybrid | e2e | teleop");
    app->add_option("--lane", lane, "inner | outer");
    app->add_option("--laps", laps, "lap target");
    app->add_option("--weather", weather, "clear | overcast | rain | glare | dusk");
    app->add_option("--seed", seed, "episode seed");
    app->add_option("--model", model, "model file for the e2e controller");
    app->add_option("--set", overrides, "extra key=value config overrides")->take_all();
  }

  Config build() const {
    Config c = config_path.empty() ? Config{} : load_config(config_path);
    if (controller) c.controller = parse_controller(*controller);
    if (lane) set_config_value(c, "lane", *lane);
    if (laps) c.lap_target = *laps;
    if (weather) c.weather = *weather;
    if (seed) c.seed = *seed;
    if (model) c.model_path = *model;
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
      set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    c.validate();
    return c;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void print_metrics_line(const LapMetrics& m) {
  std::cerr << m.controller << " " << m.lane << " " << m.weather << ": " << m.laps_completed << "/" << m.lap_target
            << " laps, " << (m.completed() ? m.stop_reason : "error: " + m.error_reason) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lanekeeper: closed-loop lane-keeping workbench"};
  app.require_subcommand(1);

  CommonFlags run_flags;
  std::string run_out;
  auto* run = app.add_subcommand("run", "run one episode and emit LapMetrics JSON");
  run_flags.attach(run);
  run->add_option("--out", run_out, "metrics JSON path (default: stdout)");

  CommonFlags record_flags;
  std::string record_out;
  auto* record = app.add_subcommand("record", "run an episode logging every camera frame");
  record_flags.attach(record);
  record->add_option("--out", record_out, "dataset directory")->required();

  std::string augment_in, augment_out;
  CommonFlags augment_flags;
  auto* augment = app.add_subcommand("augment-data", "expand a dataset tenfold");
  augment->add_option("dataset", augment_in, "input dataset directory")->required()->check(CLI::ExistingDirectory);
  augment->add_option("--out", augment_out, "output dataset directory")->required();
  augment->add_option("--config", augment_flags.config_path, "config file")->check(CLI::ExistingFile);

  std::string train_in, train_out;
  CommonFlags train_flags;
  auto* train_cmd = app.add_subcommand("train-model", "fit the linear steering model");
  train_cmd->add_option("dataset", train_in, "dataset directory")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", train_out, "model file")->required();
  train_cmd->add_option("--config", train_flags.config_path, "config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--seed", train_flags.seed, "initialisation seed");

  std::vector<std::string> compare_in;
  std::string compare_out;
  auto* compare = app.add_subcommand("compare", "side-by-side table of metrics files");
  compare->add_option("metrics", compare_in, "metrics JSON files")->required()->check(CLI::ExistingFile);
  compare->add_option("--out", compare_out, "write the table here instead of stdout");

  CommonFlags eval_flags;
  std::string eval_in, eval_out;
  auto* eval = app.add_subcommand("eval-frame", "run a controller on one PGM/PPM image");
  eval_flags.attach(eval);
  eval->add_option("image", eval_in, "input image")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", eval_out, "annotated PPM output");

  CommonFlags serve_flags;
  std::string serve_out;
  int serve_port = 8765;
  auto* serve_cmd = app.add_subcommand("serve", "teleop/telemetry service for one client");
  serve_flags.attach(serve_cmd, false);
  serve_cmd->add_option("--port", serve_port, "TCP port (0 = ephemeral)");
  serve_cmd->add_option("--out", serve_out, "directory for metrics.json and the recorded dataset");

  CommonFlags slope_flags;
  std::string slope_out;
  std::optional<std::string> slope_mode;
  auto* slope = app.add_subcommand("slope-study", "fit mean lane-line slope against yaw rate");
  slope_flags.attach(slope);
  slope->add_option("--mode", slope_mode, "plain | sign_balanced | side_balanced | windowed_median");
  slope->add_option("--out", slope_out, "report directory")->required();

  CommonFlags config_flags;
  auto* config_cmd = app.add_subcommand("config", "print the effective configuration");
  config_flags.attach(config_cmd);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const Config c = run_flags.build();
      const LapMetrics m = run_episode(c);
      print_metrics_line(m);
      if (run_out.empty()) {
        std::cout << metrics_to_json(m);
      } else {
        write_metrics(m, run_out);
      }
      return m.completed() ? 0 : 2;
    }
    if (*record) {
      const Config c = record_flags.build();
      const RecordResult r = record_episode(c);
      e2e::save_dataset(r.dataset, record_out);
      write_metrics(r.metrics, fs::path(record_out) / "metrics.json");
      print_metrics_line(r.metrics);
      std::cout << r.dataset.size() << " records written to " << record_out << "\n";
      return r.metrics.completed() ? 0 : 2;
    }
    if (*augment) {
      const Config c = augment_flags.build();
      const e2e::Dataset in = e2e::load_dataset(augment_in);
      const e2e::Dataset out = e2e::augment_dataset(in, c.augment);
      e2e::save_dataset(out, augment_out);
      std::cout << in.size() << " records -> " << out.size() << " records\n";
      return 0;
    }
    if (*train_cmd) {
      Config c = train_flags.build();
      if (train_flags.seed) c.train.seed = *train_flags.seed;
      const e2e::Dataset data = e2e::load_dataset(train_in);
      const e2e::TrainResult r = e2e::train(data, c.train, c.record.width, c.record.height);
      e2e::save_model(r.model, train_out);
      std::printf("trained on %zu records: initial loss %.6g, final loss %.6g\n", data.size(),
                  r.loss_history.front(), r.loss_history.back());
      return 0;
    }
    if (*compare) {
      std::vector<std::pair<std::string, LapMetrics>> runs;
      for (const auto& p : compare_in) runs.emplace_back(fs::path(p).stem().string(), read_metrics(p));
      const std::string table = compare_report(runs);
      if (compare_out.empty()) {
        std::cout << table;
      } else {
        write_text(compare_out, table);
      }
      return 0;
    }
    if (*eval) {
      const Config c = eval_flags.build();
      std::optional<e2e::LinearSteeringModel> model;
      if (c.controller == ControllerKind::kE2E) {
        if (c.model_path.empty()) throw std::invalid_argument("eval-frame with the e2e controller needs --model");
        model = e2e::load_model(c.model_path);
      }
      const FrameEvaluation ev = evaluate_frame(read_netpbm(eval_in), c, model ? &*model : nullptr);
      std::cout << ev.message << "\n";
      if (!eval_out.empty()) write_netpbm(eval_out, ev.annotated);
      return 0;
    }
    if (*serve_cmd) {
      Config c = serve_flags.build();
      c.controller = ControllerKind::kTeleop;
      ServeOptions opts;
      opts.port = serve_port;
      opts.out_dir = serve_out;
      opts.on_listening = [](int port) { std::cerr << "listening on port " << port << "\n"; };
      const ServeResult r = serve(c, opts);
      print_metrics_line(r.metrics);
      std::cerr << r.frames_sent << " messages sent, " << r.frames_dropped << " frames dropped, "
                << r.dataset.size() << " records\n";
      if (serve_out.empty()) std::cout << metrics_to_json(r.metrics);
      return 0;
    }
    if (*slope) {
      Config c = slope_flags.build();
      if (slope_mode) c.slope_mode = slopefit::parse_slope_mode(*slope_mode);
      const SlopeStudy s = run_slope_study(c);
      std::ostringstream samples, summary;
      slopefit::write_samples_csv(samples, s.samples);
      slopefit::write_summary_csv(summary, s.fits);
      write_text(fs::path(slope_out) / "samples.csv", samples.str());
      write_text(fs::path(slope_out) / "summary.csv", summary.str());
      write_metrics(s.metrics, fs::path(slope_out) / "metrics.json");
      std::cout << summary.str();
      return 0;
    }
    if (*config_cmd) {
      std::cout << dump_config(config_flags.build());
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
