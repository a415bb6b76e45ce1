#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace resq {

/// Interleaved RGB image (row-major, HxWx3), channel values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> rgb;

  Image() = default;
  Image(int h, int w, double fill = 0.0)
      : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, fill) {}

  double& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  bool operator==(const Image&) const = default;
};

/// Binary PPM (P6), 8 bits per channel. Values are rounded to the nearest
/// 1/255 step on write.
void write_ppm(const std::string& path, const Image& image);
Image read_ppm(const std::string& path);

}  // namespace resq
