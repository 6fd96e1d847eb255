#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace hashsdf {

/// Interleaved float image, row-major, values nominally in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.f)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  float& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
};

/// 8-bit PNG (gray for 1 channel, RGB for 3). Values are clamped to [0, 1]
/// and rounded to the nearest level. Output bytes depend only on the pixels.
void write_png(const std::filesystem::path& path, const Image& image);
/// Reads gray, gray+alpha, RGB or RGBA 8/16-bit PNGs; alpha is dropped.
Image read_png(const std::filesystem::path& path);

/// Rounds to the 8-bit levels stored by write_png.
float quantize8(float value);

}  // namespace hashsdf
