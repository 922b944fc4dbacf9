#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "lanekeeper/control.hpp"
#include "lanekeeper/e2e.hpp"
#include "lanekeeper/harness.hpp"
#include "lanekeeper/image.hpp"
#include "lanekeeper/netpbm.hpp"
#include "lanekeeper/perception.hpp"
#include "lanekeeper/simworld.hpp"
#include "lanekeeper/slopefit.hpp"

namespace py = pybind11;
using namespace lanekeeper;

namespace {

using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

// (H, W) or (H, W, 3) uint8 arrays.
ImageBuffer to_image(const U8Array& a) {
  if (a.ndim() != 2 && a.ndim() != 3) throw std::invalid_argument("image must be (H, W) or (H, W, 3)");
  const int h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
  const int c = a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1;
  std::vector<std::uint8_t> px(a.data(), a.data() + a.size());
  return ImageBuffer(w, h, c, std::move(px));
}

U8Array to_array(const ImageBuffer& img) {
  std::vector<py::ssize_t> shape{img.height(), img.width()};
  if (img.channels() == 3) shape.push_back(3);
  U8Array out(shape);
  std::memcpy(out.mutable_data(), img.pixels().data(), img.pixels().size());
  return out;
}

harness::Config make_config(const py::dict& overrides) {
  harness::Config c;
  for (const auto& [k, v] : overrides) {
    const auto key = py::str(k).cast<std::string>();
    std::string value;
    if (py::isinstance<py::bool_>(v)) {
      value = v.cast<bool>() ? "true" : "false";
    } else {
      value = py::str(v).cast<std::string>();
    }
    harness::set_config_value(c, key, value);
  }
  c.validate();
  return c;
}

py::object metrics_dict(const harness::LapMetrics& m) {
  return py::module_::import("json").attr("loads")(harness::metrics_to_json(m));
}

std::vector<slopefit::SlopeSample> samples_from(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("x and y differ in length");
  std::vector<slopefit::SlopeSample> s(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) s[i] = {x[i], y[i], static_cast<std::int64_t>(i)};
  return s;
}

}  // namespace

PYBIND11_MODULE(_lanekeeper, m) {
  m.doc() = "Lane-keeping perception, control and simulation core.";

  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const std::logic_error& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    }
  });

  // imaging
  m.def("to_grayscale", [](const U8Array& a) { return to_array(to_grayscale(to_image(a))); });
  m.def("median_blur", [](const U8Array& a, int k) { return to_array(median_blur(to_image(a), k)); },
        py::arg("image"), py::arg("kernel"));
  m.def("apply_threshold", [](const U8Array& a, int t) { return to_array(apply_threshold(to_image(a), t)); });
  m.def("white_fraction", [](const U8Array& a) { return white_fraction(to_image(a)); });
  m.def(
      "dynamic_threshold",
      [](const U8Array& a, double lo, double hi) {
        const ThresholdResult r = dynamic_threshold(to_image(a), lo, hi);
        return py::make_tuple(r.threshold, to_array(r.binary), r.in_bounds, r.iterations);
      },
      py::arg("gray"), py::arg("min_frac"), py::arg("max_frac"),
      "Returns (threshold, binary, in_bounds, iterations).");
  m.def("flip_horizontal", [](const U8Array& a) { return to_array(flip_horizontal(to_image(a))); });
  m.def("read_netpbm", [](const std::filesystem::path& p) { return to_array(read_netpbm(p)); });
  m.def("write_netpbm", [](const std::filesystem::path& p, const U8Array& a) { write_netpbm(p, to_image(a)); });

  // perception
  py::class_<LineSegment>(m, "LineSegment")
      .def(py::init<int, int, int, int>(), py::arg("x1"), py::arg("y1"), py::arg("x2"), py::arg("y2"))
      .def_readwrite("x1", &LineSegment::x1)
      .def_readwrite("y1", &LineSegment::y1)
      .def_readwrite("x2", &LineSegment::x2)
      .def_readwrite("y2", &LineSegment::y2)
      .def("length", &LineSegment::length)
      .def("slope", &LineSegment::slope)
      .def(py::self == py::self)
      .def("__repr__", [](const LineSegment& s) {
        return "LineSegment(" + std::to_string(s.x1) + ", " + std::to_string(s.y1) + ", " + std::to_string(s.x2) +
               ", " + std::to_string(s.y2) + ")";
      });

  py::class_<HoughParams>(m, "HoughParams")
      .def(py::init<>())
      .def_readwrite("rho_resolution", &HoughParams::rho_resolution)
      .def_readwrite("theta_resolution", &HoughParams::theta_resolution)
      .def_readwrite("vote_threshold", &HoughParams::vote_threshold)
      .def_readwrite("min_length", &HoughParams::min_length)
      .def_readwrite("max_gap", &HoughParams::max_gap)
      .def_readwrite("slope_min", &HoughParams::slope_min)
      .def_readwrite("slope_max", &HoughParams::slope_max)
      .def_readwrite("rng_seed", &HoughParams::rng_seed);

  m.def(
      "detect_segments", [](const U8Array& mask, const HoughParams& p) { return detect_segments(to_image(mask), p); },
      py::arg("mask"), py::arg("params") = HoughParams{});

  py::class_<LaneEstimate>(m, "LaneEstimate")
      .def_readonly("left_x", &LaneEstimate::left_x)
      .def_readonly("right_x", &LaneEstimate::right_x)
      .def_readonly("center_x", &LaneEstimate::center_x)
      .def_readonly("mid_x", &LaneEstimate::mid_x);
  m.def("estimate_lane", &estimate_lane, py::arg("segments"), py::arg("image_width"),
        py::arg("lane_width_px") = 280.0);

  // control
  py::class_<TwistCommand>(m, "TwistCommand")
      .def(py::init([](double v, double w) { return TwistCommand{v, w}; }), py::arg("linear_x") = 0.0,
           py::arg("angular_z") = 0.0)
      .def_readwrite("linear_x", &TwistCommand::linear_x)
      .def_readwrite("angular_z", &TwistCommand::angular_z)
      .def(py::self == py::self);
  py::class_<EnvelopeLimits>(m, "EnvelopeLimits")
      .def(py::init<>())
      .def_readwrite("speed_cap", &EnvelopeLimits::speed_cap)
      .def_readwrite("yaw_cap", &EnvelopeLimits::yaw_cap)
      .def_readwrite("yaw_rate_delta", &EnvelopeLimits::yaw_rate_delta);
  m.def("steer", &steer, py::arg("center_x"), py::arg("mid_x"), py::arg("deadband") = kDefaultDeadbandPx);
  m.def("command_envelope", &command_envelope, py::arg("raw"), py::arg("prev"),
        py::arg("limits") = EnvelopeLimits{});
  m.def("red_fraction", [](const U8Array& a, double gain) { return red_fraction(to_image(a), {}, gain); },
        py::arg("frame"), py::arg("gain") = 1.0);

  // simworld
  m.def(
      "render_camera",
      [](const std::string& weather, double s, double n, std::uint64_t seed, const py::dict& overrides) {
        const harness::Config c = make_config(overrides);
        const RenderedFrame f =
            render_camera(c.track, pose_on_track(c.track, s, c.track.lane_offset() + n), c.camera, weather_preset(weather, seed));
        return py::make_tuple(to_array(f.frame), to_array(f.oracle_mask));
      },
      py::arg("weather") = "clear", py::arg("s") = 0.0, py::arg("n") = 0.0, py::arg("seed") = 0,
      py::arg("config") = py::dict(), "Returns (rgb_frame, oracle_mask); n is the lateral offset from the lane center.");
  m.def("weather_presets", &weather_preset_names);

  // e2e
  py::class_<e2e::LinearSteeringModel>(m, "SteeringModel")
      .def_readonly("input_width", &e2e::LinearSteeringModel::input_width)
      .def_readonly("input_height", &e2e::LinearSteeringModel::input_height)
      .def_readonly("weights", &e2e::LinearSteeringModel::weights)
      .def_readonly("bias", &e2e::LinearSteeringModel::bias)
      .def("predict", [](const e2e::LinearSteeringModel& mdl, const U8Array& a) { return e2e::predict(mdl, to_image(a)); })
      .def("save", [](const e2e::LinearSteeringModel& mdl, const std::filesystem::path& p) { e2e::save_model(mdl, p); })
      .def_static("load", &e2e::load_model);
  m.def(
      "ensemble_combine",
      [](double a, double b, double c, double prev) { return e2e::ensemble_combine({a, b, c}, prev, {}); },
      py::arg("primary"), py::arg("brighter"), py::arg("contrast"), py::arg("prev"));
  m.def("augmentations_per_record", [] { return e2e::kAugmentationsPerRecord; });
  m.def(
      "augment_dataset",
      [](const std::filesystem::path& in, const std::filesystem::path& out) {
        const e2e::Dataset d = e2e::augment_dataset(e2e::load_dataset(in));
        e2e::save_dataset(d, out);
        return d.size();
      },
      py::arg("dataset_dir"), py::arg("out_dir"));
  m.def(
      "train_model",
      [](const std::filesystem::path& dir, int epochs, std::uint64_t seed) {
        e2e::TrainOptions opt;
        opt.epochs = epochs;
        opt.seed = seed;
        py::gil_scoped_release release;
        e2e::TrainResult r = e2e::train(e2e::load_dataset(dir), opt);
        return std::make_pair(std::move(r.model), std::move(r.loss_history));
      },
      py::arg("dataset_dir"), py::arg("epochs") = 400, py::arg("seed") = 0, "Returns (model, loss_history).");

  // harness
  m.def("config_keys", &harness::config_keys);
  m.def("dump_config", [](const py::dict& overrides) { return harness::dump_config(make_config(overrides)); },
        py::arg("config") = py::dict());
  m.def(
      "run_episode",
      [](const py::dict& overrides) {
        const harness::Config c = make_config(overrides);
        harness::LapMetrics metrics;
        {
          py::gil_scoped_release release;
          metrics = harness::run_episode(c);
        }
        return metrics_dict(metrics);
      },
      py::arg("config") = py::dict(), "Run one episode; config keys match the CLI --set keys.");
  m.def(
      "record_episode",
      [](const py::dict& overrides, const std::filesystem::path& out) {
        const harness::Config c = make_config(overrides);
        harness::RecordResult r;
        {
          py::gil_scoped_release release;
          r = harness::record_episode(c);
          e2e::save_dataset(r.dataset, out);
        }
        return metrics_dict(r.metrics);
      },
      py::arg("config"), py::arg("out_dir"));
  m.def(
      "evaluate_frame",
      [](const U8Array& frame, const py::dict& overrides) {
        const harness::FrameEvaluation ev = harness::evaluate_frame(to_image(frame), make_config(overrides));
        py::dict d;
        d["yaw"] = ev.yaw;
        d["message"] = ev.message;
        d["segments"] = ev.segments;
        d["annotated"] = to_array(ev.annotated);
        if (ev.estimate) d["center_x"] = ev.estimate->center_x;
        return d;
      },
      py::arg("frame"), py::arg("config") = py::dict());

  // slopefit
  py::class_<slopefit::FitSummary>(m, "FitSummary")
      .def_readonly("model", &slopefit::FitSummary::model)
      .def_readonly("params", &slopefit::FitSummary::params)
      .def_readonly("train_sse", &slopefit::FitSummary::train_sse)
      .def_readonly("test_sse", &slopefit::FitSummary::test_sse)
      .def_readonly("train_r2", &slopefit::FitSummary::train_r2)
      .def_readonly("test_r2", &slopefit::FitSummary::test_r2)
      .def_readonly("converged", &slopefit::FitSummary::converged);
  m.def(
      "least_squares_line",
      [](const std::vector<double>& x, const std::vector<double>& y) {
        return slopefit::least_squares_line(samples_from(x, y));
      },
      py::arg("x"), py::arg("y"), "Returns (slope, intercept).");
  m.def(
      "fit_sigmoid",
      [](const std::vector<double>& x, const std::vector<double>& y) {
        const auto f = slopefit::fit_sigmoid(samples_from(x, y));
        return py::make_tuple(f.params.L, f.params.k, f.params.x0, f.sse);
      },
      py::arg("x"), py::arg("y"), "Returns (L, k, x0, sse).");
  m.def(
      "slope_study",
      [](const std::vector<double>& x, const std::vector<double>& y, std::uint64_t seed) {
        return slopefit::run_study(samples_from(x, y), seed);
      },
      py::arg("x"), py::arg("y"), py::arg("seed") = 0);
}
