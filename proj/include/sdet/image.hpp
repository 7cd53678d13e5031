#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sdet/tensor.hpp"

namespace sdet::img {

// 8-bit raster, row-major, interleaved channels (1 = gray, 3 = RGB).
struct Image8 {
  size_t width = 0, height = 0, channels = 1;
  std::vector<uint8_t> pixels;

  Image8() = default;
  Image8(size_t w, size_t h, size_t c, uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  uint8_t& at(size_t y, size_t x, size_t c = 0) {
    return pixels[(y * width + x) * channels + c];
  }
  uint8_t at(size_t y, size_t x, size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
};

// Dispatch on extension: .pgm or .png.
Image8 read_image(const std::string& path);
void write_image(const std::string& path, const Image8& im);

Image8 read_pgm(const std::string& path);  // binary P5, maxval 255
void write_pgm(const std::string& path, const Image8& im);

Image8 read_png(const std::string& path);
void write_png(const std::string& path, const Image8& im);

// Half-pixel-center sampling: src = (dst + 0.5) * scale - 0.5, edges clamped,
// channels interpolated independently, result rounded to nearest.
Image8 resize_bilinear(const Image8& im, size_t out_w, size_t out_h);

// [1, C, H, W] tensor with values scaled to [0, 1].
Tensor to_tensor(const Image8& im);

}  // namespace sdet::img
