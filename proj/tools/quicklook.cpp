#include "quicklook.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace fieldctl {

Rgb stretch(const float* planes, int channels, int height, int width) {
  const std::size_t n = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  Rgb out{height, width, std::vector<std::uint8_t>(n * 3)};
  for (int c = 0; c < 3; ++c) {
    const float* p = planes + n * static_cast<std::size_t>(std::min(c, channels - 1));
    std::vector<float> v;
    v.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      if (std::isfinite(p[i])) v.push_back(p[i]);
    float lo = 0, hi = 1;
    if (!v.empty()) {
      auto at = [&](double q) {
        auto it = v.begin() + static_cast<std::ptrdiff_t>(q * static_cast<double>(v.size() - 1));
        std::nth_element(v.begin(), it, v.end());
        return *it;
      };
      lo = at(0.02);
      hi = at(0.98);
    }
    const float span = hi > lo ? hi - lo : 1.0f;
    for (std::size_t i = 0; i < n; ++i) {
      const float t = std::isfinite(p[i]) ? std::clamp((p[i] - lo) / span, 0.0f, 1.0f) : 0.0f;
      out.px[i * 3 + static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(std::lround(t * 255.0f));
    }
  }
  return out;
}

void overlay_edges(Rgb& img, const std::uint32_t* ids, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  const int h = img.height, w = img.width;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x);
      const bool edge = (x + 1 < w && ids[i + 1] != ids[i]) || (y + 1 < h && ids[i + static_cast<std::size_t>(w)] != ids[i]);
      if (!edge) continue;
      img.px[i * 3] = r;
      img.px[i * 3 + 1] = g;
      img.px[i * 3 + 2] = b;
    }
}

void write_png(const std::string& path, const Rgb& img) {
  std::unique_ptr<FILE, int (*)(FILE*)> f(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    throw std::runtime_error("failed to encode " + path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, img.px.data() + static_cast<std::size_t>(y) * static_cast<std::size_t>(img.width) * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace fieldctl
