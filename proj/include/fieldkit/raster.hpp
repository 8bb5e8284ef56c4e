#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fieldkit/core.hpp"

namespace fieldkit {

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

/// Pixel lattice placement. Rows grow downward, map y grows upward:
/// the center of pixel (r, c) is (origin.x + (c + 0.5) * pixel_size,
/// origin.y - (r + 0.5) * pixel_size).
struct GridGeometry {
  int height = 0;
  int width = 0;
  double pixel_size = 1.0;
  Point origin{0.0, 0.0};

  /// Convenience: a grid whose map coordinates equal pixel coordinates with y
  /// pointing up, i.e. origin (0, height) and unit pixels.
  static GridGeometry pixels(int height, int width) {
    return GridGeometry{height, width, 1.0, Point{0.0, static_cast<double>(height)}};
  }

  std::size_t size() const { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
  Point center(int r, int c) const {
    return {origin.x + (c + 0.5) * pixel_size, origin.y - (r + 0.5) * pixel_size};
  }
  /// Map coordinate of the top-left corner of pixel (r, c).
  Point corner(int r, int c) const { return {origin.x + c * pixel_size, origin.y - r * pixel_size}; }
  /// Sub-grid covering rows [r0, r0+h) and cols [c0, c0+w).
  GridGeometry window(int r0, int c0, int h, int w) const {
    return GridGeometry{h, w, pixel_size, corner(r0, c0)};
  }
  void validate() const;
  friend bool operator==(const GridGeometry&, const GridGeometry&) = default;
};

enum class DType { Float32, UInt8, UInt32 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::Float32; }
template <>
constexpr DType dtype_of<std::uint8_t>() { return DType::UInt8; }
template <>
constexpr DType dtype_of<std::uint32_t>() { return DType::UInt32; }

std::string dtype_name(DType t);
DType dtype_from_name(const std::string& name);

/// H x W x C planar array (channel-major) with its georeferencing.
template <typename T>
struct Raster {
  GridGeometry grid;
  int channels = 1;
  std::vector<std::string> band_names;
  std::vector<T> data;

  Raster() = default;
  Raster(GridGeometry g, int c, T fill = T{}) : grid(g), channels(c), data(g.size() * static_cast<std::size_t>(c), fill) {
    g.validate();
    if (c < 1) throw InvalidArgument("raster needs at least one channel");
  }

  int height() const { return grid.height; }
  int width() const { return grid.width; }
  std::size_t plane_size() const { return grid.size(); }

  T& at(int c, int r, int col) { return data[(static_cast<std::size_t>(c) * grid.height + r) * grid.width + col]; }
  const T& at(int c, int r, int col) const {
    return data[(static_cast<std::size_t>(c) * grid.height + r) * grid.width + col];
  }
  T& operator()(int r, int col) { return at(0, r, col); }
  const T& operator()(int r, int col) const { return at(0, r, col); }

  std::span<T> plane(int c) { return {data.data() + static_cast<std::size_t>(c) * plane_size(), plane_size()}; }
  std::span<const T> plane(int c) const {
    return {data.data() + static_cast<std::size_t>(c) * plane_size(), plane_size()};
  }
};

using FloatRaster = Raster<float>;
using ByteRaster = Raster<std::uint8_t>;
using IdRaster = Raster<std::uint32_t>;

/// Copies rows [r0, r0+h) x cols [c0, c0+w) of every channel.
template <typename T>
Raster<T> crop(const Raster<T>& src, int r0, int c0, int h, int w) {
  if (r0 < 0 || c0 < 0 || h < 1 || w < 1 || r0 + h > src.height() || c0 + w > src.width())
    throw InvalidArgument("crop window outside raster");
  Raster<T> out(src.grid.window(r0, c0, h, w), src.channels);
  out.band_names = src.band_names;
  for (int c = 0; c < src.channels; ++c)
    for (int r = 0; r < h; ++r)
      for (int k = 0; k < w; ++k) out.at(c, r, k) = src.at(c, r0 + r, c0 + k);
  return out;
}

// Raster container: "<stem>.bin" holds the little-endian planar array,
// "<stem>.json" holds {height, width, channels, pixel_size_m, origin_xy,
// band_names, dtype}.
template <typename T>
void write_raster(const Raster<T>& raster, const std::filesystem::path& stem);
template <typename T>
Raster<T> read_raster(const std::filesystem::path& stem);

}  // namespace fieldkit
