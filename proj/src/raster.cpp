#include "fieldkit/raster.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "fieldkit/jsonio.hpp"

namespace fieldkit {

void GridGeometry::validate() const {
  if (height < 1 || width < 1) throw InvalidArgument("grid must be at least 1x1");
  if (!(pixel_size > 0.0) || !std::isfinite(pixel_size)) throw InvalidArgument("pixel_size must be positive");
}

std::string dtype_name(DType t) {
  switch (t) {
    case DType::Float32: return "float32";
    case DType::UInt8: return "uint8";
    case DType::UInt32: return "uint32";
  }
  return "unknown";
}

DType dtype_from_name(const std::string& name) {
  if (name == "float32") return DType::Float32;
  if (name == "uint8") return DType::UInt8;
  if (name == "uint32") return DType::UInt32;
  throw FormatError("unknown raster dtype '" + name + "'");
}

namespace {

template <typename T>
void to_little_endian(std::vector<T>& v) {
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    for (auto& x : v) {
      auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(x);
      std::reverse(bytes.begin(), bytes.end());
      x = std::bit_cast<T>(bytes);
    }
  }
}

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  auto p = stem;
  p += suffix;
  return p;
}

}  // namespace

template <typename T>
void write_raster(const Raster<T>& raster, const std::filesystem::path& stem) {
  nlohmann::ordered_json meta;
  meta["height"] = raster.height();
  meta["width"] = raster.width();
  meta["channels"] = raster.channels;
  meta["pixel_size_m"] = raster.grid.pixel_size;
  meta["origin_xy"] = {raster.grid.origin.x, raster.grid.origin.y};
  meta["band_names"] = raster.band_names;
  meta["dtype"] = dtype_name(dtype_of<T>());
  write_json_file(with_suffix(stem, ".json"), meta);

  auto copy = raster.data;
  to_little_endian(copy);
  std::ofstream out(with_suffix(stem, ".bin"), std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + with_suffix(stem, ".bin").string());
  out.write(reinterpret_cast<const char*>(copy.data()), static_cast<std::streamsize>(copy.size() * sizeof(T)));
  if (!out) throw IoError("short write to " + with_suffix(stem, ".bin").string());
}

template <typename T>
Raster<T> read_raster(const std::filesystem::path& stem) {
  const auto meta = read_json_file(with_suffix(stem, ".json"));
  try {
    if (dtype_from_name(meta.at("dtype").get<std::string>()) != dtype_of<T>())
      throw FormatError("raster " + stem.string() + " has dtype " + meta.at("dtype").get<std::string>() +
                        ", expected " + dtype_name(dtype_of<T>()));
    GridGeometry g{meta.at("height").get<int>(), meta.at("width").get<int>(), meta.at("pixel_size_m").get<double>(),
                   Point{meta.at("origin_xy").at(0).get<double>(), meta.at("origin_xy").at(1).get<double>()}};
    Raster<T> r(g, meta.at("channels").get<int>());
    r.band_names = meta.value("band_names", std::vector<std::string>{});
    std::ifstream in(with_suffix(stem, ".bin"), std::ios::binary);
    if (!in) throw IoError("cannot read " + with_suffix(stem, ".bin").string());
    in.read(reinterpret_cast<char*>(r.data.data()), static_cast<std::streamsize>(r.data.size() * sizeof(T)));
    if (in.gcount() != static_cast<std::streamsize>(r.data.size() * sizeof(T)))
      throw FormatError("raster payload " + with_suffix(stem, ".bin").string() + " is truncated");
    to_little_endian(r.data);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad raster sidecar " + stem.string() + ": " + e.what());
  }
}

template void write_raster(const Raster<float>&, const std::filesystem::path&);
template void write_raster(const Raster<std::uint8_t>&, const std::filesystem::path&);
template void write_raster(const Raster<std::uint32_t>&, const std::filesystem::path&);
template Raster<float> read_raster(const std::filesystem::path&);
template Raster<std::uint8_t> read_raster(const std::filesystem::path&);
template Raster<std::uint32_t> read_raster(const std::filesystem::path&);

}  // namespace fieldkit
