#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace gfsseg {

// Minimal 8-bit PNG I/O (libpng). Interleaved row-major pixels,
// channels = 1 (gray) or 3 (RGB).
struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

PngImage read_png(const std::string& path);
void write_png(const std::string& path, const PngImage& image);

}  // namespace gfsseg
