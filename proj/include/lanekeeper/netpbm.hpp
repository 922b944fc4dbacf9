// Binary netpbm I/O: P5 (PGM) for gray images, P6 (PPM) for RGB, maxval 255.
#pragma once

#include <filesystem>
#include <string>

#include "lanekeeper/image.hpp"

namespace lanekeeper {

// Parses a P5/P6 stream held in memory. Comments in the header are skipped.
ImageBuffer decode_netpbm(const std::string& bytes);
std::string encode_netpbm(const ImageBuffer& img);

ImageBuffer read_netpbm(const std::filesystem::path& path);
// Writes PGM or PPM according to the channel count.
void write_netpbm(const std::filesystem::path& path, const ImageBuffer& img);

}  // namespace lanekeeper
