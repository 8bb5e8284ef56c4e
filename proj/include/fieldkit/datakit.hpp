#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fieldkit/fieldgeom.hpp"
#include "fieldkit/jsonio.hpp"
#include "fieldkit/synthland.hpp"

namespace fieldkit::data {

enum class Split { Train = 0, Val = 1, Test = 2 };
std::string split_name(Split s);
Split split_from_name(const std::string& name);

/// Regional block split: the bounding box of all scene locations is cut into a
/// rows x cols grid and whole cells are assigned to splits.
struct SplitAssignment {
  int rows = 20;
  int cols = 20;
  std::array<double, 3> fractions{0.64, 0.16, 0.20};
  Point min{0.0, 0.0};
  Point max{1.0, 1.0};
  std::vector<Split> cell_to_split;  // row-major

  int cell_of(Point p) const;
  Split split_of(Point p) const { return cell_to_split[static_cast<std::size_t>(cell_of(p))]; }
  /// Realized share of cells per split.
  std::array<double, 3> realized() const;
};

/// Shuffles the cells and hands out round(f * n) cells per split in order
/// train, val, test (test takes the remainder).
SplitAssignment assign_splits(std::span<const Point> locations, int rows, int cols, std::array<double, 3> fractions,
                              std::uint64_t seed);
Json split_to_json(const SplitAssignment& a);
SplitAssignment split_from_json(const Json& j);

struct LabelBudget {
  int total_fields = 0;
  int fields_per_image = 1;

  int n_images() const;
  void validate() const;
};

enum class FieldSampler {
  /// The k fields whose centroids lie closest to a random anchor point.
  Anchor,
  /// k fields uniformly at random without replacement.
  Uniform,
};
std::string sampler_name(FieldSampler s);
FieldSampler sampler_from_name(const std::string& name);

/// Draws `n_subsets` disjoint subsets of `fields_per_image` fields each from one
/// scene. Returns indices into `polys`, sorted within each subset. Fields with
/// no pixel on `grid` are never chosen. Returns fewer subsets when the scene
/// runs out of fields.
std::vector<std::vector<std::size_t>> sample_partial_labels(std::span<const geom::FieldPolygon> polys,
                                                            const GridGeometry& grid, int fields_per_image,
                                                            int n_subsets, std::uint64_t seed,
                                                            FieldSampler sampler = FieldSampler::Anchor);

/// One labeled image of a budget plan.
struct LabeledImage {
  std::size_t scene = 0;
  std::vector<std::size_t> fields;
};

struct BudgetPlan {
  std::vector<LabeledImage> images;
  /// Scenes skipped for having fewer fields than fields_per_image.
  std::vector<std::size_t> skipped_scenes;
};

/// Spreads a field budget over scenes: distinct scenes in a seeded random order
/// first, then further disjoint subsets from already used scenes. Throws
/// InvalidArgument when the scenes cannot supply the budget.
BudgetPlan plan_budget(const std::vector<const synth::SyntheticScene*>& scenes, const LabelBudget& budget,
                       std::uint64_t seed, FieldSampler sampler = FieldSampler::Anchor);

struct DownsampleReport {
  bool cropped = false;
  int cropped_height = 0;
  int cropped_width = 0;
};

/// Block-mean downsampling. H and W that are not multiples of `factor` are
/// first cropped to the largest divisible top-left window (reported).
FloatRaster downsample_imagery(const FloatRaster& img, int factor, DownsampleReport* report = nullptr);

/// Downsamples the imagery and re-derives the field and non-crop rasters from
/// the polygons at the coarser grid. Fields left without any pixel are dropped.
synth::SyntheticScene downsample_scene(const synth::SyntheticScene& scene, int factor,
                                       DownsampleReport* report = nullptr);

/// One of the eight symmetries of the square: k in [0, 8). Bits 0-1 give the
/// number of counter-clockwise quarter turns, bit 2 adds a horizontal flip
/// applied before rotating.
template <typename T>
Raster<T> apply_d4(const Raster<T>& src, int k);

/// A model-ready example: C x H x W input with its labels.
struct Example {
  std::string id;
  FloatRaster image;
  geom::LabelStack labels;
  /// Bands per season; lets stacked inputs shuffle season order at train time.
  int bands_per_season = 3;
  bool shuffle_seasons = false;
};

/// Same D4 transform on image and all four label planes.
Example augment(const Example& ex, std::uint64_t seed);
Example augment_with(const Example& ex, int d4);

enum class TemporalMode { Single, Separate, Stacked };
std::string temporal_mode_name(TemporalMode m);
TemporalMode temporal_mode_from_name(const std::string& name);

/// Separate: one input per season. Stacked: one input with the seasons' bands
/// concatenated; with `shuffle` the season order is permuted using `seed`.
/// Single: the first season only.
std::vector<FloatRaster> make_multitemporal_input(std::span<const FloatRaster> seasons, TemporalMode mode,
                                                  bool shuffle = false, std::uint64_t seed = 0);

struct ExampleOptions {
  TemporalMode mode = TemporalMode::Single;
  int season = 0;  // used by Single
  bool shuffle_seasons = false;
  geom::LabelOptions labels;
};

/// Every field with at least one pixel in the scene.
std::vector<std::size_t> all_fields(const synth::SyntheticScene& scene);

/// Examples of one scene labeled with `fields` (indices into scene.polygons).
/// Separate mode yields one example per season; the other modes yield one.
std::vector<Example> make_examples(const synth::SyntheticScene& scene, const std::string& id,
                                   std::span<const std::size_t> fields, const ExampleOptions& opts = {});

/// Window of `size` x `size` centered on a random supervised pixel and shifted
/// to lie inside the raster. Returns the top-left corner.
std::array<int, 2> draw_crop_window(const geom::LabelStack& labels, int size, Rng& rng);

/// Crop, D4 transform and optional season shuffle for one training step.
Example draw_training_sample(const Example& ex, int crop_size, std::uint64_t seed);

/// Per-sample random stream for (seed, epoch, index). Any worker that draws
/// sample i of an epoch reproduces the same crop and transform.
std::uint64_t sample_seed(std::uint64_t seed, int epoch, std::size_t index);
/// Visiting order of an epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

/// A generated region of synthetic scenes with split assignment.
struct Domain {
  std::string name;
  synth::LandscapeSpec base;
  std::vector<synth::SyntheticScene> scenes;
  std::vector<Point> locations;
  SplitAssignment splits;
  std::vector<Split> scene_split;

  std::vector<std::size_t> indices(Split s) const;
};

struct DomainOptions {
  int n_scenes = 200;
  int grid_rows = 20;
  int grid_cols = 20;
  std::array<double, 3> fractions{0.64, 0.16, 0.20};
};

/// Scenes get seeds derived from `seed` and locations uniform in [0, 1)^2.
Domain generate_domain(const std::string& name, const synth::LandscapeSpec& base, const DomainOptions& opts,
                       std::uint64_t seed);

/// Manifest record of one sample.
struct SampleRecord {
  std::string scene_id;
  std::array<int, 4> crop_window{0, 0, 0, 0};  // row, col, height, width
  std::string imagery_ref;
  std::string labelstack_ref;
  Split split = Split::Train;
  std::vector<int> months;
};
Json record_to_json(const SampleRecord& r);
SampleRecord record_from_json(const Json& j);
/// One JSON object per line.
void write_manifest(const std::filesystem::path& path, std::span<const SampleRecord> records);
std::vector<SampleRecord> read_manifest(const std::filesystem::path& path);

/// Directory layout: domain.json, splits.json, manifest.jsonl and one scene
/// directory per scene under scenes/.
void save_domain(const Domain& d, const std::filesystem::path& dir);
Domain load_domain(const std::filesystem::path& dir);

}  // namespace fieldkit::data
