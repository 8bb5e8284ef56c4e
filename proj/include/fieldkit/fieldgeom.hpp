#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fieldkit/raster.hpp"

namespace fieldkit::geom {

using Ring = std::vector<Point>;

/// A labeled field. Rings are stored open (the closing vertex is implied).
/// Pixel membership uses the even-odd rule over the outer ring and all holes.
struct FieldPolygon {
  std::int64_t id = 0;
  Ring ring;
  std::vector<Ring> holes;
  std::string crs_tag;
};

double signed_area(std::span<const Point> ring);
/// Outer area minus hole areas, always non-negative.
double area(const FieldPolygon& poly);
/// True when no two non-adjacent edges intersect and no adjacent edges overlap.
bool is_simple(std::span<const Point> ring);
/// Throws InvalidArgument on fewer than 3 vertices, non-finite coordinates or a
/// self-intersecting outer ring.
void validate(const FieldPolygon& poly);
bool contains(const FieldPolygon& poly, Point p);

/// Drops a duplicated closing vertex, if present.
Ring open_ring(Ring ring);

/// Collects polygons skipped during rasterization.
struct RasterizeReport {
  std::vector<std::int64_t> skipped_ids;
  std::vector<std::string> warnings;
};

/// Pixel spans [c0, c1) on row r whose centers are inside the polygon. Rows
/// and columns are in the grid's index space but are not clipped to it.
struct RowSpan {
  int row;
  int c0;
  int c1;
};
std::vector<RowSpan> scan_polygon(const FieldPolygon& poly, const GridGeometry& grid);

/// Pixel = 1 iff its center lies inside some polygon. Polygons whose outer ring
/// is smaller than one pixel are skipped and reported.
ByteRaster rasterize_extent(std::span<const FieldPolygon> polys, const GridGeometry& grid,
                            RasterizeReport* report = nullptr);
/// Pixel = 1 + index of the polygon containing its center, 0 elsewhere.
IdRaster rasterize_ids(std::span<const FieldPolygon> polys, const GridGeometry& grid,
                       RasterizeReport* report = nullptr);
/// Pixel = 1 iff it belongs to a field and lies within `thickness` pixels
/// (Chebyshev) of a pixel outside that field. Fields are evaluated on their full
/// footprint, so tile borders never create boundary.
ByteRaster rasterize_boundary(std::span<const FieldPolygon> polys, const GridGeometry& grid, int thickness = 2,
                              RasterizeReport* report = nullptr);
/// Euclidean distance from each field pixel center to the nearest pixel center
/// outside the field, divided by the field's maximum.
FloatRaster rasterize_distance(std::span<const FieldPolygon> polys, const GridGeometry& grid,
                               RasterizeReport* report = nullptr);

struct MaskResult {
  ByteRaster mask;
  double coverage = 0.0;
  bool unsupervisable = false;
};
/// extent | boundary of the given polygons, dilated by a (2*dilation+1) square.
MaskResult build_mask(std::span<const FieldPolygon> polys, const GridGeometry& grid, int dilation = 2);

/// Chebyshev dilation of a binary raster.
ByteRaster dilate(const ByteRaster& in, int radius);

struct LabelStack {
  ByteRaster extent;
  ByteRaster boundary;
  FloatRaster distance;
  ByteRaster mask;
};

struct LabelOptions {
  int boundary_thickness = 2;
  int mask_dilation = 2;
};

/// All four label planes. `labeled` supplies the supervision mask; the other
/// planes are computed from `labeled` as well, so unlabeled fields read as 0.
LabelStack make_label_stack(std::span<const FieldPolygon> labeled, const GridGeometry& grid,
                            const LabelOptions& opts = {}, RasterizeReport* report = nullptr);

struct VectorizeReport {
  std::vector<std::uint32_t> skipped_ids;
  std::vector<std::string> warnings;
};

/// Traces each instance id (1..n) along pixel edges. Pixels are 4-connected;
/// enclosed background becomes hole rings. Collinear vertices are removed.
std::vector<FieldPolygon> vectorize_instances(const IdRaster& instances, VectorizeReport* report = nullptr);

// GeoJSON FeatureCollection, one Polygon feature per field with an integer
// "id" property.
std::string to_geojson(std::span<const FieldPolygon> polys);
std::vector<FieldPolygon> from_geojson(const std::string& text);
void write_geojson(const std::filesystem::path& path, std::span<const FieldPolygon> polys);
std::vector<FieldPolygon> read_geojson(const std::filesystem::path& path);

}  // namespace fieldkit::geom
