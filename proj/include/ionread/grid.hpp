#pragma once
#include <cstdint>
#include <stdexcept>

namespace ionread {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

/// Camera pixel grid expressed in object-plane micrometres. Pixel (ix, iy)
/// covers [ix*pitch, (ix+1)*pitch) x [iy*pitch, (iy+1)*pitch); indices are
/// row-major.
struct PixelGrid {
  int width = 0;
  int height = 0;
  double pitch_um = 2.6;

  int n_pixels() const { return width * height; }
  int index(int ix, int iy) const { return iy * width + ix; }
  int ix(int index) const { return index % width; }
  int iy(int index) const { return index / width; }
  double center_x(int ix) const { return (ix + 0.5) * pitch_um; }
  double center_y(int iy) const { return (iy + 0.5) * pitch_um; }
  double extent_x() const { return width * pitch_um; }
  double extent_y() const { return height * pitch_um; }

  void validate() const {
    if (width <= 0 || height <= 0) throw std::invalid_argument("grid: empty");
    if (!(pitch_um > 0.0)) throw std::invalid_argument("grid: pitch must be > 0");
  }
};

}  // namespace ionread
