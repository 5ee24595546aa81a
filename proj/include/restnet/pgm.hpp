#pragma once

// Binary PGM (P5, maxval 255) images.

#include <cstdint>
#include <filesystem>
#include <vector>

namespace restnet {

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

void write_pgm(const std::filesystem::path& path, const GrayImage& image);
GrayImage read_pgm(const std::filesystem::path& path);

inline std::uint8_t quantize_unit(double v) {
  if (!(v > 0.0)) return 0;
  if (v >= 1.0) return 255;
  return static_cast<std::uint8_t>(v * 255.0 + 0.5);
}

}  // namespace restnet
