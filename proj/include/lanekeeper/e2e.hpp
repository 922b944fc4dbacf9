// End-to-end steering: recorded (frame, steering) pairs, x10 augmentation, a
// linear regressor over downsampled grayscale frames, and three-way ensemble
// inference with outlier rejection and rate limiting.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "lanekeeper/control.hpp"
#include "lanekeeper/image.hpp"

namespace lanekeeper::e2e {

struct SteeringRecord {
  std::int64_t frame_id = 0;
  ImageBuffer image;
  double steering = 0.0;  // yaw rate, rad/s
  double speed = 0.0;
  double timestamp = 0.0;
  std::optional<std::int64_t> augmented_from;
};

struct Dataset {
  std::vector<SteeringRecord> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  std::int64_t next_frame_id() const;
};

struct RecordOptions {
  double yaw_cap = 1.5;
  // Frames are stored downsampled to gray at this size.
  int width = 64;
  int height = 48;
};

// Appends one record; throws when |cmd.angular_z| exceeds the yaw cap.
void log_record(Dataset& dataset, const ImageBuffer& frame, const TwistCommand& cmd, double timestamp,
                const RecordOptions& options = {});

// On disk: frame_<id>.pgm files plus index.csv
// (frame_id,steering,speed,timestamp,augmented_from).
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// Magnitudes of the fixed nine-transform roster.
struct AugmentParams {
  double brightness_delta = 25.0;
  double contrast_factor = 1.25;
  double gamma_low = 0.7;
  double gamma_high = 1.4;
  double noise_sigma = 8.0;
};

inline constexpr int kAugmentationsPerRecord = 9;

// Roster, in order: brightness +d, brightness -d, contrast *f, contrast /f,
// mirror, mirror + brightness -d, gamma low, gamma high, seeded noise.
// Mirrored variants negate the steering label. Augmented ids start at
// first_id and are consecutive.
std::vector<SteeringRecord> augment(const SteeringRecord& record, std::int64_t first_id,
                                    const AugmentParams& params = {});

// Originals followed by their augmentations: exactly 10x the input size.
Dataset augment_dataset(const Dataset& dataset, const AugmentParams& params = {});

struct LinearSteeringModel {
  int input_width = 64;
  int input_height = 48;
  std::vector<double> weights;  // one per input pixel, row-major
  double bias = 0.0;

  static LinearSteeringModel zeros(int width = 64, int height = 48);
  std::size_t input_size() const { return static_cast<std::size_t>(input_width) * input_height; }
  void validate() const;
};

// Downsampled grayscale scaled to [0,1], row-major.
std::vector<double> model_features(const ImageBuffer& frame, int width, int height);

double predict(const LinearSteeringModel& model, const ImageBuffer& frame);
double predict_features(const LinearSteeringModel& model, std::span<const double> features);

void save_model(const LinearSteeringModel& model, const std::filesystem::path& path);
LinearSteeringModel load_model(const std::filesystem::path& path);

struct TrainOptions {
  int epochs = 400;
  double learning_rate = 0.02;
  std::uint64_t seed = 0;
  double l2 = 0.0;
};

struct TrainResult {
  LinearSteeringModel model;
  std::vector<double> loss_history;  // full-batch MSE before each epoch, then final
};

// Full-batch gradient descent on mean squared error.
TrainResult train(const Dataset& dataset, const TrainOptions& options, int input_width = 64,
                  int input_height = 48);

struct MseEvaluation {
  double loss = 0.0;
  std::vector<double> grad_weights;
  double grad_bias = 0.0;
};

// Direct evaluation over explicit feature rows.
MseEvaluation mse_loss_and_gradient(const LinearSteeringModel& model, std::span<const std::vector<double>> features,
                                    std::span<const double> targets, double l2 = 0.0);

struct EnsembleParams {
  double brightness_delta = 20.0;
  double contrast_factor = 1.15;
  double outlier_delta = 0.3;
  double rate_delta = 0.1;

  void validate() const;
};

// Drops predictions farther than outlier_delta from prev, averages the rest
// (holding prev if none survive), then limits the change to rate_delta.
double ensemble_combine(const std::array<double, 3>& predictions, double prev, const EnsembleParams& params);

double ensemble_predict(const LinearSteeringModel& model, const ImageBuffer& frame, double prev,
                        const EnsembleParams& params = {});

}  // namespace lanekeeper::e2e
