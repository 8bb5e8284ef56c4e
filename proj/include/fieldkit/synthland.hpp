#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fieldkit/fieldgeom.hpp"
#include "fieldkit/jsonio.hpp"

namespace fieldkit::synth {

/// Parameters of a synthetic agricultural landscape. Field areas follow a
/// log-normal in square meters: log(area_m2) ~ N(size_mu, size_sigma^2).
struct LandscapeSpec {
  std::uint64_t seed = 0;
  int height = 128;
  int width = 128;
  double pixel_size = 4.8;
  /// Fields per km^2; when > 0 it overrides size_mu so the mean field area is
  /// 1 / density.
  double field_density = 0.0;
  double size_mu = 7.7832;  // log(2400 m^2)
  double size_sigma = 0.5;
  double crop_fraction = 0.8;
  int n_seasons = 3;
  double contrast = 0.12;
  double noise_sigma = 0.015;
  double blur_sigma = 0.7;

  void validate() const;
  /// Median field area in pixels implied by the size parameters.
  double target_median_px() const;
  friend bool operator==(const LandscapeSpec&, const LandscapeSpec&) = default;
};

Json spec_to_json(const LandscapeSpec& s);
LandscapeSpec spec_from_json(const Json& j);

struct SyntheticScene {
  LandscapeSpec spec;
  /// One 3-band (red, green, blue) raster per season.
  std::vector<FloatRaster> imagery;
  std::vector<geom::FieldPolygon> polygons;
  /// 1 where no field exists.
  ByteRaster noncrop_mask;
  /// Pixel -> 1 + index into `polygons`, 0 on non-crop.
  IdRaster field_ids;

  const GridGeometry& grid() const { return noncrop_mask.grid; }
};

/// Power-diagram tessellation (dart-thrown seeds, two Lloyd steps, density
/// calibrated toward the target median), non-crop chosen as whole cells from a
/// smooth noise field, and seasonal rendering with blur and sensor noise.
SyntheticScene generate_landscape(const LandscapeSpec& spec);

/// "source-large" (median 1.3 ha) or "target-small" (median 0.24 ha).
LandscapeSpec domain_preset(const std::string& name);
std::vector<std::string> preset_names();

/// Re-renders imagery with the inter-field reflectance spread scaled by
/// (1 - contrast_drop). Geometry and noise realizations are unchanged.
SyntheticScene render_low_contrast_variant(const SyntheticScene& scene, double contrast_drop);

/// Areas of all fields in pixels, in polygon order.
std::vector<std::size_t> field_areas_px(const SyntheticScene& scene);

// Scene directory: spec.json, polygons.geojson, noncrop.{bin,json},
// field_ids.{bin,json}, season_<k>.{bin,json}.
void save_scene(const SyntheticScene& scene, const std::filesystem::path& dir);
SyntheticScene load_scene(const std::filesystem::path& dir);

}  // namespace fieldkit::synth
