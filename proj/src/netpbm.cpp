#include "lanekeeper/netpbm.hpp"

#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lanekeeper {

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(const std::string& bytes) : bytes_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  long read_int() {
    skip_space_and_comments();
    const std::size_t start = pos_;
    long value = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > 1'000'000) throw std::runtime_error("netpbm: header value too large");
      ++pos_;
    }
    if (pos_ == start) throw std::runtime_error("netpbm: malformed header");
    return value;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  void consume_single_whitespace() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
      throw std::runtime_error("netpbm: missing raster separator");
    }
    ++pos_;
  }

  std::size_t pos() const { return pos_; }
  void advance(std::size_t n) { pos_ += n; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

ImageBuffer decode_netpbm(const std::string& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw std::runtime_error("netpbm: only binary P5/P6 is supported");
  }
  const int channels = bytes[1] == '5' ? 1 : 3;
  HeaderReader reader(bytes);
  reader.advance(2);
  const long width = reader.read_int();
  const long height = reader.read_int();
  const long maxval = reader.read_int();
  if (width < 1 || height < 1) throw std::runtime_error("netpbm: bad dimensions");
  if (maxval != 255) throw std::runtime_error("netpbm: only maxval 255 is supported");
  reader.consume_single_whitespace();

  const std::size_t count = static_cast<std::size_t>(width) * height * channels;
  if (bytes.size() - reader.pos() < count) throw std::runtime_error("netpbm: truncated raster");
  const auto* first = reinterpret_cast<const std::uint8_t*>(bytes.data() + reader.pos());
  return ImageBuffer(static_cast<int>(width), static_cast<int>(height), channels,
                     std::vector<std::uint8_t>(first, first + count));
}

std::string encode_netpbm(const ImageBuffer& img) {
  std::ostringstream header;
  header << (img.channels() == 1 ? "P5" : "P6") << '\n'
         << img.width() << ' ' << img.height() << '\n'
         << 255 << '\n';
  std::string out = header.str();
  const auto px = img.pixels();
  out.append(reinterpret_cast<const char*>(px.data()), px.size());
  return out;
}

ImageBuffer read_netpbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("netpbm: cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return decode_netpbm(buffer.str());
}

void write_netpbm(const std::filesystem::path& path, const ImageBuffer& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("netpbm: cannot write " + path.string());
  const std::string bytes = encode_netpbm(img);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("netpbm: write failed for " + path.string());
}

}  // namespace lanekeeper
