// Raster image buffer and the pixel-level primitives used by every stage of
// the lane-keeping pipeline. All functions are pure and return new buffers.
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace lanekeeper {

class ImageBuffer {
 public:
  ImageBuffer() = default;
  ImageBuffer(int width, int height, int channels, std::uint8_t fill = 0);
  ImageBuffer(int width, int height, int channels, std::vector<std::uint8_t> pixels);

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  bool empty() const { return pixels_.empty(); }

  std::span<const std::uint8_t> pixels() const { return pixels_; }
  std::span<std::uint8_t> pixels() { return pixels_; }

  std::uint8_t at(int x, int y, int c = 0) const {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }
  std::uint8_t& at(int x, int y, int c = 0) {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }

  const std::uint8_t* row(int y) const {
    return pixels_.data() + static_cast<std::size_t>(y) * width_ * channels_;
  }
  std::uint8_t* row(int y) {
    return pixels_.data() + static_cast<std::size_t>(y) * width_ * channels_;
  }

  bool same_shape(const ImageBuffer& other) const {
    return width_ == other.width_ && height_ == other.height_ && channels_ == other.channels_;
  }

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<std::uint8_t> pixels_;
};

struct ThresholdResult {
  int threshold = 0;
  ImageBuffer binary;
  bool in_bounds = false;
  int iterations = 0;
};

// Binary search over [0,255] needs at most 8 probes.
inline constexpr int kMaxThresholdProbes = 8;

using ColorLut = std::array<std::uint8_t, 256>;

// ITU-R 601 luma, rounded. Requires 3 channels.
ImageBuffer to_grayscale(const ImageBuffer& img);

// kernel x kernel median with edge replication. Kernel must be odd.
ImageBuffer median_blur(const ImageBuffer& img, int kernel);

// Strict inequality: pixel > t maps to 255, otherwise 0.
ImageBuffer apply_threshold(const ImageBuffer& img, int t);

double white_fraction(const ImageBuffer& binary);

ThresholdResult dynamic_threshold(const ImageBuffer& gray, double min_frac, double max_frac);

ImageBuffer adjust_brightness_contrast(const ImageBuffer& img, double gain, double bias);

ImageBuffer flip_horizontal(const ImageBuffer& img);

// One LUT per channel. A single-channel image uses luts[0].
ImageBuffer remap_colors(const ImageBuffer& img, const std::array<ColorLut, 3>& luts);

// Area-average downsample to the requested size; keeps channel count.
ImageBuffer resize_area(const ImageBuffer& img, int width, int height);

// Replicates a gray image into 3 channels.
ImageBuffer gray_to_rgb(const ImageBuffer& gray);

double mean_intensity(const ImageBuffer& img);

// Rows [first, first + count) as a new image.
ImageBuffer crop_rows(const ImageBuffer& img, int first, int count);

}  // namespace lanekeeper
