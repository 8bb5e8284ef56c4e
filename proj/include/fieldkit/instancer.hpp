#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fieldkit/jsonio.hpp"
#include "fieldkit/raster.hpp"

namespace fieldkit::inst {

enum class Hierarchy {
  /// Merge a basin into its neighbour when its depth below the pass between
  /// them is under the threshold.
  Dynamics,
  /// Merge a basin when its pixel count at the pass is under the threshold.
  Area,
};
std::string hierarchy_name(Hierarchy h);
Hierarchy hierarchy_from_name(const std::string& name);

struct WatershedParams {
  /// surface = surface_mix * boundary + (1 - surface_mix) * (1 - extent)
  double surface_mix = 0.5;
  double marker_threshold = 0.3;
  Hierarchy hierarchy = Hierarchy::Dynamics;
  /// Height difference (dynamics) or pixel count (area) below which basins merge.
  double merge_threshold = 0.1;
  int min_instance_px = 4;
  double extent_cutoff = 0.5;
  /// Gaussian blur of the surface before flooding, in pixels; 0 disables it.
  /// It moves the crest of a flat ridge onto its centre line.
  double smoothing_sigma = 1.0;

  void validate() const;
  friend bool operator==(const WatershedParams&, const WatershedParams&) = default;
};

Json params_to_json(const WatershedParams& p);
WatershedParams params_from_json(const Json& j);

/// Instance ids 1..n_instances, 0 is background. Each id is one 4-connected
/// region.
struct InstanceMap {
  IdRaster labels;
  std::uint32_t n_instances = 0;
};

/// Surface height per pixel, computed in float exactly as the segmenter does.
std::vector<float> watershed_surface(std::span<const float> extent, std::span<const float> boundary, double mix);

/// 4-connected components of surface < threshold, numbered from 1 in scan
/// order of their first pixel.
std::vector<std::uint32_t> find_markers(std::span<const float> surface, int height, int width, double threshold);

/// Marker-controlled flooding. Unlabeled pixels are claimed in order of
/// (height, time they first touched a labeled pixel); neighbours are visited
/// up, left, right, down and a pixel takes the label of the pixel that first
/// reached it. Pixels not connected to any marker keep label 0.
std::vector<std::uint32_t> flood(std::span<const float> surface, int height, int width,
                                 std::vector<std::uint32_t> markers);

/// Separable Gaussian blur truncated at 3 sigma with replicated edges,
/// accumulated in double.
std::vector<float> smooth_surface(std::span<const float> surface, int height, int width, double sigma);

/// Full pipeline: surface, smoothing, markers, flooding, hierarchical merging, extent
/// cutoff with a split into connected pieces, small-instance merging into the
/// neighbour with the lowest shared pass (or background when isolated), and
/// relabeling in scan order.
InstanceMap watershed_segment(const FloatRaster& extent, const FloatRaster& boundary, const WatershedParams& params);

/// Pixels outside the crop mask become background; instances that lose more
/// than half their area are dropped, the others keep their largest remaining
/// connected piece. Ids are re-compacted in scan order.
InstanceMap apply_cropland_mask(const InstanceMap& inst, const ByteRaster& cropmask);

/// Relabels to 1..n in scan order of each id's first pixel.
InstanceMap compact(const IdRaster& labels);

struct SearchGrid {
  std::vector<double> surface_mix{0.3, 0.5, 0.7};
  std::vector<double> marker_threshold{0.2, 0.35, 0.5};
  std::vector<Hierarchy> hierarchy{Hierarchy::Dynamics};
  std::vector<double> merge_threshold{0.05, 0.15, 0.3};
  std::vector<int> min_instance_px{4, 16};
  std::vector<double> extent_cutoff{0.4, 0.5, 0.6};
  std::vector<double> smoothing_sigma{1.0};

  std::vector<WatershedParams> points() const;
  /// The point at the middle index of every axis.
  WatershedParams median_point() const;
};

Json grid_to_json(const SearchGrid& g);
SearchGrid grid_from_json(const Json& j);

struct TuneTile {
  FloatRaster extent;
  FloatRaster boundary;
  IdRaster gt_ids;
  /// Labeled ground-truth ids; empty means all.
  std::vector<std::uint32_t> fields;
};

struct TuneResult {
  WatershedParams params;
  double median_iou = 0.0;
  double iou_50 = 0.0;
  std::size_t n_fields = 0;
  /// Fewer than kConfidentFields labeled fields backed the choice.
  bool low_confidence = false;
  static constexpr std::size_t kConfidentFields = 10;
};

/// Median IoU, fraction with IoU >= 0.5 and field count of `params` on tiles.
struct Score {
  double median_iou = 0.0;
  double iou_50 = 0.0;
  std::size_t n_fields = 0;
};
Score score_params(std::span<const TuneTile> tiles, const WatershedParams& params);

/// Grid-search argmax of median IoU over all labeled fields. Ties go to the
/// higher IoU_50, then the smaller min_instance_px, then the earlier grid point.
TuneResult tune_params(std::span<const TuneTile> tiles, const SearchGrid& grid);

}  // namespace fieldkit::inst
