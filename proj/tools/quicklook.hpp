#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fieldctl {

/// Interleaved 8-bit RGB image.
struct Rgb {
  int height = 0, width = 0;
  std::vector<std::uint8_t> px;
};

/// First three planes of a float image stretched per band between the 2nd and
/// 98th percentile; fewer bands render as grey.
Rgb stretch(const float* planes, int channels, int height, int width);

/// Paints pixels whose right or lower neighbour carries another instance id.
void overlay_edges(Rgb& img, const std::uint32_t* ids, std::uint8_t r, std::uint8_t g, std::uint8_t b);

/// Throws std::runtime_error on failure.
void write_png(const std::string& path, const Rgb& img);

}  // namespace fieldctl
