#include "lanekeeper/e2e.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

#include "lanekeeper/netpbm.hpp"

namespace lanekeeper::e2e {

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view text) {
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw std::runtime_error("bad number: '" + std::string(text) + "'");
  }
  return v;
}

std::int64_t parse_int(std::string_view text) {
  std::int64_t v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw std::runtime_error("bad integer: '" + std::string(text) + "'");
  }
  return v;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

constexpr std::string_view kIndexHeader = "frame_id,steering,speed,timestamp,augmented_from";

std::string frame_filename(std::int64_t id) { return "frame_" + std::to_string(id) + ".pgm"; }

ColorLut gamma_lut(double gamma) {
  ColorLut lut{};
  for (int v = 0; v < 256; ++v) {
    lut[v] = static_cast<std::uint8_t>(std::lround(255.0 * std::pow(v / 255.0, gamma)));
  }
  return lut;
}

ImageBuffer contrast(const ImageBuffer& img, double factor) {
  return adjust_brightness_contrast(img, factor, 128.0 * (1.0 - factor));
}

ImageBuffer add_noise(const ImageBuffer& img, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, sigma);
  ImageBuffer out = img;
  for (auto& p : out.pixels()) p = static_cast<std::uint8_t>(std::clamp(std::lround(p + nd(rng)), 0L, 255L));
  return out;
}

}  // namespace

std::int64_t Dataset::next_frame_id() const {
  std::int64_t next = 0;
  for (const auto& r : records) next = std::max(next, r.frame_id + 1);
  return next;
}

void log_record(Dataset& dataset, const ImageBuffer& frame, const TwistCommand& cmd, double timestamp,
                const RecordOptions& options) {
  if (!(std::abs(cmd.angular_z) <= options.yaw_cap)) {
    throw std::invalid_argument("log_record: steering exceeds yaw cap");
  }
  const ImageBuffer gray = frame.channels() == 3 ? to_grayscale(frame) : frame;
  SteeringRecord rec;
  rec.frame_id = dataset.next_frame_id();
  rec.image = resize_area(gray, options.width, options.height);
  rec.steering = cmd.angular_z;
  rec.speed = cmd.linear_x;
  rec.timestamp = timestamp;
  dataset.records.push_back(std::move(rec));
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream index(dir / "index.csv", std::ios::binary);
  if (!index) throw std::runtime_error("cannot write " + (dir / "index.csv").string());
  index << kIndexHeader << '\n';
  for (const auto& r : dataset.records) {
    index << r.frame_id << ',' << format_double(r.steering) << ',' << format_double(r.speed) << ','
          << format_double(r.timestamp) << ',';
    if (r.augmented_from) index << *r.augmented_from;
    index << '\n';
    write_netpbm(dir / frame_filename(r.frame_id), r.image);
  }
  if (!index) throw std::runtime_error("failed writing dataset index");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream index(dir / "index.csv", std::ios::binary);
  if (!index) throw std::runtime_error("cannot open " + (dir / "index.csv").string());
  std::string line;
  if (!std::getline(index, line) || line != kIndexHeader) {
    throw std::runtime_error("dataset index has an unexpected header");
  }
  Dataset ds;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    const auto fields = split(line, ',');
    if (fields.size() != 5) throw std::runtime_error("dataset index: expected 5 fields: " + line);
    SteeringRecord r;
    r.frame_id = parse_int(fields[0]);
    r.steering = parse_double(fields[1]);
    r.speed = parse_double(fields[2]);
    r.timestamp = parse_double(fields[3]);
    if (!fields[4].empty()) r.augmented_from = parse_int(fields[4]);
    r.image = read_netpbm(dir / frame_filename(r.frame_id));
    ds.records.push_back(std::move(r));
  }
  return ds;
}

std::vector<SteeringRecord> augment(const SteeringRecord& record, std::int64_t first_id, const AugmentParams& p) {
  const ImageBuffer& img = record.image;
  const ImageBuffer mirrored = flip_horizontal(img);
  const std::array<ColorLut, 3> low{gamma_lut(p.gamma_low), gamma_lut(p.gamma_low), gamma_lut(p.gamma_low)};
  const std::array<ColorLut, 3> high{gamma_lut(p.gamma_high), gamma_lut(p.gamma_high), gamma_lut(p.gamma_high)};
  const std::uint64_t noise_seed = 0x5eed0000ULL ^ static_cast<std::uint64_t>(record.frame_id);

  struct Variant {
    ImageBuffer image;
    bool mirrored;
  };
  std::vector<Variant> variants;
  variants.reserve(kAugmentationsPerRecord);
  variants.push_back({adjust_brightness_contrast(img, 1.0, p.brightness_delta), false});
  variants.push_back({adjust_brightness_contrast(img, 1.0, -p.brightness_delta), false});
  variants.push_back({contrast(img, p.contrast_factor), false});
  variants.push_back({contrast(img, 1.0 / p.contrast_factor), false});
  variants.push_back({mirrored, true});
  variants.push_back({adjust_brightness_contrast(mirrored, 1.0, -p.brightness_delta), true});
  variants.push_back({remap_colors(img, low), false});
  variants.push_back({remap_colors(img, high), false});
  variants.push_back({add_noise(img, p.noise_sigma, noise_seed), false});

  std::vector<SteeringRecord> out;
  out.reserve(variants.size());
  for (std::size_t k = 0; k < variants.size(); ++k) {
    SteeringRecord r;
    r.frame_id = first_id + static_cast<std::int64_t>(k);
    r.image = std::move(variants[k].image);
    r.steering = variants[k].mirrored ? -record.steering : record.steering;
    r.speed = record.speed;
    r.timestamp = record.timestamp;
    r.augmented_from = record.frame_id;
    out.push_back(std::move(r));
  }
  return out;
}

Dataset augment_dataset(const Dataset& dataset, const AugmentParams& params) {
  Dataset out;
  out.records.reserve(dataset.size() * (kAugmentationsPerRecord + 1));
  std::int64_t next_id = dataset.next_frame_id();
  for (const auto& r : dataset.records) out.records.push_back(r);
  for (const auto& r : dataset.records) {
    for (auto& a : augment(r, next_id, params)) out.records.push_back(std::move(a));
    next_id += kAugmentationsPerRecord;
  }
  return out;
}

LinearSteeringModel LinearSteeringModel::zeros(int width, int height) {
  LinearSteeringModel m;
  m.input_width = width;
  m.input_height = height;
  m.weights.assign(m.input_size(), 0.0);
  return m;
}

void LinearSteeringModel::validate() const {
  if (input_width < 1 || input_height < 1) throw std::invalid_argument("model: bad input size");
  if (weights.size() != input_size()) throw std::invalid_argument("model: weight count != width*height");
  if (!std::isfinite(bias) || !std::all_of(weights.begin(), weights.end(), [](double w) { return std::isfinite(w); })) {
    throw std::invalid_argument("model: non-finite parameters");
  }
}

std::vector<double> model_features(const ImageBuffer& frame, int width, int height) {
  const ImageBuffer gray = frame.channels() == 3 ? to_grayscale(frame) : frame;
  const ImageBuffer small = resize_area(gray, width, height);
  std::vector<double> f(small.pixels().size());
  const auto px = small.pixels();
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = px[i] / 255.0;
  return f;
}

double predict_features(const LinearSteeringModel& model, std::span<const double> features) {
  if (features.size() != model.weights.size()) throw std::invalid_argument("predict: feature size mismatch");
  double y = model.bias;
  for (std::size_t i = 0; i < features.size(); ++i) y += model.weights[i] * features[i];
  return y;
}

double predict(const LinearSteeringModel& model, const ImageBuffer& frame) {
  return predict_features(model, model_features(frame, model.input_width, model.input_height));
}

void save_model(const LinearSteeringModel& model, const std::filesystem::path& path) {
  model.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write model " + path.string());
  out << "lanekeeper-linear-model 1\n" << model.input_width << ' ' << model.input_height << '\n';
  out << format_double(model.bias) << '\n';
  for (int y = 0; y < model.input_height; ++y) {
    for (int x = 0; x < model.input_width; ++x) {
      if (x) out << ' ';
      out << format_double(model.weights[static_cast<std::size_t>(y) * model.input_width + x]);
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("failed writing model " + path.string());
}

LinearSteeringModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open model " + path.string());
  std::string magic;
  int version = 0;
  LinearSteeringModel m;
  in >> magic >> version >> m.input_width >> m.input_height;
  if (!in || magic != "lanekeeper-linear-model" || version != 1) {
    throw std::runtime_error("not a lanekeeper model file: " + path.string());
  }
  std::string token;
  in >> token;
  m.bias = parse_double(token);
  m.weights.reserve(static_cast<std::size_t>(m.input_width) * m.input_height);
  while (in >> token) m.weights.push_back(parse_double(token));
  m.validate();
  return m;
}

MseEvaluation mse_loss_and_gradient(const LinearSteeringModel& model, std::span<const std::vector<double>> features,
                                    std::span<const double> targets, double l2) {
  if (features.size() != targets.size() || features.empty()) {
    throw std::invalid_argument("mse: need matching, non-empty features and targets");
  }
  MseEvaluation ev;
  ev.grad_weights.assign(model.weights.size(), 0.0);
  const double n = static_cast<double>(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) {
    const double r = predict_features(model, features[i]) - targets[i];
    ev.loss += r * r / n;
    for (std::size_t j = 0; j < model.weights.size(); ++j) ev.grad_weights[j] += 2.0 * r * features[i][j] / n;
    ev.grad_bias += 2.0 * r / n;
  }
  for (std::size_t j = 0; j < model.weights.size(); ++j) {
    ev.loss += l2 * model.weights[j] * model.weights[j];
    ev.grad_weights[j] += 2.0 * l2 * model.weights[j];
  }
  return ev;
}

TrainResult train(const Dataset& dataset, const TrainOptions& options, int input_width, int input_height) {
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  if (options.epochs < 0 || !(options.learning_rate > 0.0)) throw std::invalid_argument("train: bad options");

  const Eigen::Index d = static_cast<Eigen::Index>(input_width) * input_height;
  const auto n = static_cast<Eigen::Index>(dataset.size());

  // Sufficient statistics: sum x, sum y, sum x x^T, sum x y, sum y^2.
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd sum_x = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd sum_xy = Eigen::VectorXd::Zero(d);
  double sum_y = 0.0, sum_yy = 0.0;
  constexpr Eigen::Index kBlock = 256;
  Eigen::MatrixXd block(d, kBlock);
  for (Eigen::Index start = 0; start < n; start += kBlock) {
    const Eigen::Index rows = std::min(kBlock, n - start);
    for (Eigen::Index k = 0; k < rows; ++k) {
      const auto& rec = dataset.records[static_cast<std::size_t>(start + k)];
      const std::vector<double> f = model_features(rec.image, input_width, input_height);
      block.col(k) = Eigen::Map<const Eigen::VectorXd>(f.data(), d);
      sum_x += block.col(k);
      sum_xy += block.col(k) * rec.steering;
      sum_y += rec.steering;
      sum_yy += rec.steering * rec.steering;
    }
    gram.selfadjointView<Eigen::Lower>().rankUpdate(block.leftCols(rows));
  }
  gram.triangularView<Eigen::StrictlyUpper>() = gram.transpose();

  // Centered problem: the bias absorbs the means, so descent only sees the
  // covariance. loss(w) = w^T C w - 2 w^T c + var(y) + l2 |w|^2.
  const double inv_n = 1.0 / static_cast<double>(n);
  const Eigen::VectorXd mean_x = sum_x * inv_n;
  const double mean_y = sum_y * inv_n;
  const Eigen::MatrixXd cov = gram * inv_n - mean_x * mean_x.transpose();
  const Eigen::VectorXd cross = sum_xy * inv_n - mean_x * mean_y;
  const double var_y = std::max(0.0, sum_yy * inv_n - mean_y * mean_y);

  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> init(0.0, 1e-6);
  Eigen::VectorXd w(d);
  for (Eigen::Index j = 0; j < d; ++j) w[j] = init(rng);

  auto loss_of = [&](const Eigen::VectorXd& cw, const Eigen::VectorXd& cov_w) {
    return std::max(0.0, cw.dot(cov_w) - 2.0 * cw.dot(cross) + var_y) + options.l2 * cw.squaredNorm();
  };

  TrainResult result;
  result.loss_history.reserve(static_cast<std::size_t>(options.epochs) + 1);
  Eigen::VectorXd cov_w = cov * w;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    result.loss_history.push_back(loss_of(w, cov_w));
    const Eigen::VectorXd grad = 2.0 * (cov_w - cross) + 2.0 * options.l2 * w;
    w -= options.learning_rate * grad;
    cov_w.noalias() = cov * w;
  }
  result.loss_history.push_back(loss_of(w, cov_w));

  result.model.input_width = input_width;
  result.model.input_height = input_height;
  result.model.weights.assign(w.data(), w.data() + d);
  result.model.bias = mean_y - w.dot(mean_x);
  return result;
}

void EnsembleParams::validate() const {
  if (!(outlier_delta > 0.0) || !(rate_delta > 0.0)) throw std::invalid_argument("EnsembleParams: deltas must be positive");
}

double ensemble_combine(const std::array<double, 3>& predictions, double prev, const EnsembleParams& params) {
  double sum = 0.0;
  int kept = 0;
  for (const double p : predictions) {
    if (std::abs(p - prev) <= params.outlier_delta) {
      sum += p;
      ++kept;
    }
  }
  if (kept == 0) return prev;
  double out = std::clamp(sum / kept, prev - params.rate_delta, prev + params.rate_delta);
  // prev +/- rate_delta may round away from prev; pull back onto the bound.
  while (std::abs(out - prev) > params.rate_delta) out = std::nextafter(out, prev);
  return out;
}

double ensemble_predict(const LinearSteeringModel& model, const ImageBuffer& frame, double prev,
                        const EnsembleParams& params) {
  params.validate();
  const ImageBuffer brighter = adjust_brightness_contrast(frame, 1.0, params.brightness_delta);
  const ImageBuffer contrasted = adjust_brightness_contrast(frame, params.contrast_factor,
                                                            128.0 * (1.0 - params.contrast_factor));
  return ensemble_combine({predict(model, frame), predict(model, brighter), predict(model, contrasted)}, prev,
                          params);
}

}  // namespace lanekeeper::e2e
