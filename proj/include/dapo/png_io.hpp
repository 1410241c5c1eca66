#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace dapo {

// Minimal PNG support: 8-bit gray, RGB, and indexed-color, non-interlaced.
// Covers exactly the files this project writes; anything else is rejected
// with a clear error naming the path.
struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 1;  // 1 = gray or indexed, 3 = rgb
  bool indexed = false;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
  std::vector<std::array<std::uint8_t, 3>> palette;  // indexed images only
};

PngImage read_png(const std::string& path);
void write_png(const std::string& path, const PngImage& img);

}  // namespace dapo
