#include "lanekeeper/image.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace lanekeeper {

namespace {

void require_channels(const ImageBuffer& img, int channels, const char* op) {
  if (img.channels() != channels) {
    throw std::invalid_argument(std::string(op) + ": expected " + std::to_string(channels) +
                                "-channel image, got " + std::to_string(img.channels()));
  }
}

std::uint8_t clamp_u8(long v) { return static_cast<std::uint8_t>(std::clamp(v, 0L, 255L)); }

}  // namespace

ImageBuffer::ImageBuffer(int width, int height, int channels, std::uint8_t fill)
    : width_(width), height_(height), channels_(channels) {
  if (width < 1 || height < 1) throw std::invalid_argument("ImageBuffer: dimensions must be >= 1");
  if (channels != 1 && channels != 3) throw std::invalid_argument("ImageBuffer: channels must be 1 or 3");
  pixels_.assign(static_cast<std::size_t>(width) * height * channels, fill);
}

ImageBuffer::ImageBuffer(int width, int height, int channels, std::vector<std::uint8_t> pixels)
    : ImageBuffer(width, height, channels) {
  if (pixels.size() != pixels_.size()) {
    throw std::invalid_argument("ImageBuffer: pixel count does not match width*height*channels");
  }
  pixels_ = std::move(pixels);
}

ImageBuffer to_grayscale(const ImageBuffer& img) {
  require_channels(img, 3, "to_grayscale");
  ImageBuffer out(img.width(), img.height(), 1);
  const auto src = img.pixels();
  auto dst = out.pixels();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) {
    const int r = src[3 * i], g = src[3 * i + 1], b = src[3 * i + 2];
    // round(0.299 R + 0.587 G + 0.114 B), half up, in exact integer arithmetic.
    dst[i] = static_cast<std::uint8_t>((299 * r + 587 * g + 114 * b + 500) / 1000);
  }
  return out;
}

ImageBuffer median_blur(const ImageBuffer& img, int kernel) {
  require_channels(img, 1, "median_blur");
  if (kernel < 1 || kernel % 2 == 0) {
    throw std::invalid_argument("median_blur: kernel must be odd and >= 1");
  }
  if (kernel == 1) return img;

  const int w = img.width(), h = img.height(), r = kernel / 2;
  ImageBuffer out(w, h, 1);
  auto clampx = [w](int x) { return std::clamp(x, 0, w - 1); };
  auto clampy = [h](int y) { return std::clamp(y, 0, h - 1); };

  if (kernel == 3) {
    // Sort each column triple, then median9 = med3(max of lows, med of mids,
    // min of highs) over three adjacent columns.
    std::vector<std::uint8_t> lo(static_cast<std::size_t>(w) + 2), md(lo.size()), hi(lo.size());
    for (int y = 0; y < h; ++y) {
      const std::uint8_t* a = img.row(clampy(y - 1));
      const std::uint8_t* b = img.row(y);
      const std::uint8_t* c = img.row(clampy(y + 1));
      for (int x = 0; x < w; ++x) {
        const std::uint8_t mn = std::min(a[x], b[x]), mx = std::max(a[x], b[x]);
        lo[x + 1] = std::min(mn, c[x]);
        hi[x + 1] = std::max(mx, c[x]);
        md[x + 1] = std::max(mn, std::min(mx, c[x]));
      }
      lo[0] = lo[1], md[0] = md[1], hi[0] = hi[1];
      lo[w + 1] = lo[w], md[w + 1] = md[w], hi[w + 1] = hi[w];
      std::uint8_t* dst = out.row(y);
      for (int x = 0; x < w; ++x) {
        const std::uint8_t l = std::max({lo[x], lo[x + 1], lo[x + 2]});
        const std::uint8_t u = std::min({hi[x], hi[x + 1], hi[x + 2]});
        const std::uint8_t p = md[x], q = md[x + 1], r3 = md[x + 2];
        const std::uint8_t m = std::max(std::min(p, q), std::min(std::max(p, q), r3));
        dst[x] = std::max(std::min(l, m), std::min(std::max(l, m), u));
      }
    }
    return out;
  }

  std::vector<std::uint8_t> window(static_cast<std::size_t>(kernel) * kernel);
  const auto mid = window.begin() + static_cast<std::ptrdiff_t>(window.size() / 2);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      std::size_t k = 0;
      for (int dy = -r; dy <= r; ++dy) {
        const std::uint8_t* src = img.row(clampy(y + dy));
        for (int dx = -r; dx <= r; ++dx) window[k++] = src[clampx(x + dx)];
      }
      std::nth_element(window.begin(), mid, window.end());
      out.at(x, y) = *mid;
    }
  }
  return out;
}

ImageBuffer apply_threshold(const ImageBuffer& img, int t) {
  require_channels(img, 1, "apply_threshold");
  ImageBuffer out(img.width(), img.height(), 1);
  const auto src = img.pixels();
  auto dst = out.pixels();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = src[i] > t ? 255 : 0;
  return out;
}

double white_fraction(const ImageBuffer& binary) {
  require_channels(binary, 1, "white_fraction");
  const auto px = binary.pixels();
  const auto white = std::count(px.begin(), px.end(), std::uint8_t{255});
  return static_cast<double>(white) / static_cast<double>(px.size());
}

ThresholdResult dynamic_threshold(const ImageBuffer& gray, double min_frac, double max_frac) {
  require_channels(gray, 1, "dynamic_threshold");
  if (!(min_frac >= 0.0 && min_frac <= max_frac && max_frac <= 1.0)) {
    throw std::invalid_argument("dynamic_threshold: need 0 <= min_frac <= max_frac <= 1");
  }

  // above[t] = number of pixels strictly greater than t; white_fraction of
  // apply_threshold(gray, t) without materialising every probe.
  std::array<std::size_t, 257> hist{};
  for (const auto v : gray.pixels()) ++hist[v];
  std::array<std::size_t, 256> above{};
  std::size_t acc = 0;
  for (int t = 255; t >= 0; --t) {
    above[t] = acc;
    acc += hist[t];
  }
  const double total = static_cast<double>(gray.pixels().size());

  ThresholdResult result;
  // t = 255 always yields an all-black image, so the probed lattice is [0,254]
  // (255 values, exhausted by 8 halvings).
  int lo = 0, hi = 254;
  int t = 127;
  while (lo <= hi && result.iterations < kMaxThresholdProbes) {
    t = lo + (hi - lo) / 2;
    ++result.iterations;
    const double frac = static_cast<double>(above[t]) / total;
    if (frac > max_frac) {
      lo = t + 1;
    } else if (frac < min_frac) {
      hi = t - 1;
    } else {
      result.in_bounds = true;
      break;
    }
  }
  if (!result.in_bounds && lo > 254 && min_frac == 0.0) {
    // Every probed threshold left too much white; the all-black t = 255 is
    // the only admissible level and needs no probe.
    t = 255;
    result.in_bounds = true;
  }
  result.threshold = t;
  result.binary = apply_threshold(gray, t);
  return result;
}

ImageBuffer adjust_brightness_contrast(const ImageBuffer& img, double gain, double bias) {
  std::array<std::uint8_t, 256> lut{};
  for (int v = 0; v < 256; ++v) lut[v] = clamp_u8(std::lround(gain * v + bias));
  ImageBuffer out = img;
  for (auto& p : out.pixels()) p = lut[p];
  return out;
}

ImageBuffer flip_horizontal(const ImageBuffer& img) {
  ImageBuffer out = img;
  const int w = img.width(), c = img.channels();
  for (int y = 0; y < img.height(); ++y) {
    const std::uint8_t* src = img.row(y);
    std::uint8_t* dst = out.row(y);
    for (int x = 0; x < w; ++x) {
      std::copy_n(src + static_cast<std::size_t>(w - 1 - x) * c, c, dst + static_cast<std::size_t>(x) * c);
    }
  }
  return out;
}

ImageBuffer remap_colors(const ImageBuffer& img, const std::array<ColorLut, 3>& luts) {
  ImageBuffer out = img;
  auto px = out.pixels();
  const auto c = static_cast<std::size_t>(img.channels());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = luts[i % c][px[i]];
  return out;
}

ImageBuffer resize_area(const ImageBuffer& img, int width, int height) {
  if (width < 1 || height < 1) throw std::invalid_argument("resize_area: bad target size");
  if (width == img.width() && height == img.height()) return img;
  const int c = img.channels();
  ImageBuffer out(width, height, c);
  std::vector<std::uint32_t> sums(static_cast<std::size_t>(c));
  for (int oy = 0; oy < height; ++oy) {
    const int y0 = static_cast<int>(static_cast<long>(oy) * img.height() / height);
    const int y1 = std::max(y0 + 1, static_cast<int>(static_cast<long>(oy + 1) * img.height() / height));
    for (int ox = 0; ox < width; ++ox) {
      const int x0 = static_cast<int>(static_cast<long>(ox) * img.width() / width);
      const int x1 = std::max(x0 + 1, static_cast<int>(static_cast<long>(ox + 1) * img.width() / width));
      std::fill(sums.begin(), sums.end(), 0U);
      for (int y = y0; y < y1; ++y) {
        const std::uint8_t* src = img.row(y);
        for (int x = x0; x < x1; ++x) {
          for (int k = 0; k < c; ++k) sums[k] += src[x * c + k];
        }
      }
      const std::uint32_t n = static_cast<std::uint32_t>((y1 - y0) * (x1 - x0));
      for (int k = 0; k < c; ++k) out.at(ox, oy, k) = static_cast<std::uint8_t>((sums[k] + n / 2) / n);
    }
  }
  return out;
}

ImageBuffer gray_to_rgb(const ImageBuffer& gray) {
  require_channels(gray, 1, "gray_to_rgb");
  ImageBuffer out(gray.width(), gray.height(), 3);
  const auto src = gray.pixels();
  auto dst = out.pixels();
  for (std::size_t i = 0; i < src.size(); ++i) dst[3 * i] = dst[3 * i + 1] = dst[3 * i + 2] = src[i];
  return out;
}

double mean_intensity(const ImageBuffer& img) {
  const auto px = img.pixels();
  if (px.empty()) return 0.0;
  double sum = 0.0;
  for (const auto v : px) sum += v;
  return sum / static_cast<double>(px.size());
}

ImageBuffer crop_rows(const ImageBuffer& img, int first, int count) {
  if (first < 0 || count < 1 || first + count > img.height()) {
    throw std::invalid_argument("crop_rows: row range outside image");
  }
  const auto begin = img.pixels().begin() + static_cast<std::ptrdiff_t>(first) * img.width() * img.channels();
  const auto end = begin + static_cast<std::ptrdiff_t>(count) * img.width() * img.channels();
  return ImageBuffer(img.width(), count, img.channels(), std::vector<std::uint8_t>(begin, end));
}

}  // namespace lanekeeper
