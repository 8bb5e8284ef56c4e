#include "fieldkit/datakit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace fieldkit::data {

std::string split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw InvalidArgument("unknown split '" + name + "' (valid: train, val, test)");
}

// ---------------------------------------------------------------------------
// Splits

int SplitAssignment::cell_of(Point p) const {
  const double fx = max.x > min.x ? (p.x - min.x) / (max.x - min.x) : 0.0;
  const double fy = max.y > min.y ? (p.y - min.y) / (max.y - min.y) : 0.0;
  const int c = std::clamp(static_cast<int>(fx * cols), 0, cols - 1);
  const int r = std::clamp(static_cast<int>(fy * rows), 0, rows - 1);
  return r * cols + c;
}

std::array<double, 3> SplitAssignment::realized() const {
  std::array<double, 3> n{0, 0, 0};
  for (auto s : cell_to_split) n[static_cast<std::size_t>(s)] += 1.0;
  for (auto& v : n) v /= static_cast<double>(cell_to_split.size());
  return n;
}

SplitAssignment assign_splits(std::span<const Point> locations, int rows, int cols, std::array<double, 3> fractions,
                              std::uint64_t seed) {
  if (locations.empty()) throw InvalidArgument("split assignment needs at least one scene location");
  if (rows < 1 || cols < 1) throw InvalidArgument("split grid must have at least one cell");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw InvalidArgument("split fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("split fractions must sum to 1");

  SplitAssignment a;
  a.rows = rows;
  a.cols = cols;
  a.fractions = fractions;
  a.min = a.max = locations.front();
  for (const auto& p : locations) {
    a.min = {std::min(a.min.x, p.x), std::min(a.min.y, p.y)};
    a.max = {std::max(a.max.x, p.x), std::max(a.max.y, p.y)};
  }
  const std::size_t n = static_cast<std::size_t>(rows) * cols;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "splits"));
  rng.shuffle(order.begin(), order.end());
  const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n))));
  a.cell_to_split.assign(n, Split::Test);
  for (std::size_t i = 0; i < n; ++i)
    a.cell_to_split[order[i]] = i < n_train ? Split::Train : i < n_train + n_val ? Split::Val : Split::Test;
  return a;
}

Json split_to_json(const SplitAssignment& a) {
  Json j;
  j["grid_shape"] = {a.rows, a.cols};
  j["fractions"] = a.fractions;
  j["bounds"] = {a.min.x, a.min.y, a.max.x, a.max.y};
  Json cells = Json::array();
  for (auto s : a.cell_to_split) cells.push_back(split_name(s));
  j["cell_to_split"] = cells;
  return j;
}

SplitAssignment split_from_json(const Json& j) {
  try {
    SplitAssignment a;
    a.rows = j.at("grid_shape").at(0).get<int>();
    a.cols = j.at("grid_shape").at(1).get<int>();
    a.fractions = j.at("fractions").get<std::array<double, 3>>();
    const auto b = j.at("bounds").get<std::array<double, 4>>();
    a.min = {b[0], b[1]};
    a.max = {b[2], b[3]};
    for (const auto& s : j.at("cell_to_split")) a.cell_to_split.push_back(split_from_name(s.get<std::string>()));
    if (a.cell_to_split.size() != static_cast<std::size_t>(a.rows) * a.cols)
      throw FormatError("cell_to_split length does not match grid_shape");
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad split assignment: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Partial labels

int LabelBudget::n_images() const {
  validate();
  return total_fields / fields_per_image;
}

void LabelBudget::validate() const {
  if (fields_per_image < 1) throw InvalidArgument("fields_per_image must be >= 1");
  if (total_fields < 1) throw InvalidArgument("total_fields must be >= 1");
  if (total_fields % fields_per_image)
    throw InvalidArgument("total_fields " + std::to_string(total_fields) + " is not divisible by fields_per_image " +
                          std::to_string(fields_per_image));
}

std::string sampler_name(FieldSampler s) { return s == FieldSampler::Anchor ? "anchor" : "uniform"; }

FieldSampler sampler_from_name(const std::string& name) {
  if (name == "anchor") return FieldSampler::Anchor;
  if (name == "uniform") return FieldSampler::Uniform;
  throw InvalidArgument("unknown field sampler '" + name + "' (valid: anchor, uniform)");
}

std::vector<std::vector<std::size_t>> sample_partial_labels(std::span<const geom::FieldPolygon> polys,
                                                            const GridGeometry& grid, int fields_per_image,
                                                            int n_subsets, std::uint64_t seed, FieldSampler sampler) {
  if (fields_per_image < 1) throw InvalidArgument("fields_per_image must be >= 1");
  if (n_subsets < 0) throw InvalidArgument("n_subsets must be >= 0");
  const auto ids = geom::rasterize_ids(polys, grid);
  std::vector<double> sr(polys.size(), 0.0), sc(polys.size(), 0.0), n(polys.size(), 0.0);
  for (int r = 0; r < grid.height; ++r)
    for (int c = 0; c < grid.width; ++c)
      if (const auto id = ids(r, c)) {
        sr[id - 1] += r + 0.5;
        sc[id - 1] += c + 0.5;
        n[id - 1] += 1.0;
      }
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < polys.size(); ++i)
    if (n[i] > 0) pool.push_back(i);

  Rng rng(derive_seed(seed, "partial_labels"));
  std::vector<std::vector<std::size_t>> out;
  const auto k = static_cast<std::size_t>(fields_per_image);
  while (static_cast<int>(out.size()) < n_subsets && pool.size() >= k) {
    std::vector<std::size_t> chosen;
    if (sampler == FieldSampler::Uniform) {
      // Partial Fisher-Yates: the first k slots become a uniform k-subset.
      for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
      chosen.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
      pool.erase(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
      std::sort(pool.begin(), pool.end());
    } else {
      const double ar = rng.uniform(0.0, grid.height), ac = rng.uniform(0.0, grid.width);
      auto dist = [&](std::size_t i) {
        const double dr = sr[i] / n[i] - ar, dc = sc[i] / n[i] - ac;
        return dr * dr + dc * dc;
      };
      std::stable_sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) { return dist(a) < dist(b); });
      chosen.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
      pool.erase(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
      std::sort(pool.begin(), pool.end());
    }
    std::sort(chosen.begin(), chosen.end());
    out.push_back(std::move(chosen));
  }
  return out;
}

BudgetPlan plan_budget(const std::vector<const synth::SyntheticScene*>& scenes, const LabelBudget& budget,
                       std::uint64_t seed, FieldSampler sampler) {
  const int n_images = budget.n_images();
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "budget_order"));
  rng.shuffle(order.begin(), order.end());

  BudgetPlan plan;
  // Each scene's subsets are drawn once, up to what the budget could need.
  std::vector<std::vector<std::vector<std::size_t>>> subsets(scenes.size());
  const std::size_t rounds_needed = (static_cast<std::size_t>(n_images) + scenes.size() - 1) / std::max<std::size_t>(1, scenes.size());
  std::size_t available = 0;
  for (auto s : order) {
    const auto& sc = *scenes[s];
    subsets[s] = sample_partial_labels(sc.polygons, sc.grid(), budget.fields_per_image,
                                       static_cast<int>(std::max<std::size_t>(rounds_needed * 4, 1)),
                                       derive_seed(seed, "scene_" + std::to_string(s)), sampler);
    if (subsets[s].empty()) plan.skipped_scenes.push_back(s);
    available += subsets[s].size();
  }
  std::sort(plan.skipped_scenes.begin(), plan.skipped_scenes.end());
  if (available < static_cast<std::size_t>(n_images))
    throw InvalidArgument("scenes supply only " + std::to_string(available) + " labeled images of " +
                          std::to_string(budget.fields_per_image) + " fields; budget needs " +
                          std::to_string(n_images));
  for (std::size_t round = 0; static_cast<int>(plan.images.size()) < n_images; ++round)
    for (auto s : order) {
      if (static_cast<int>(plan.images.size()) >= n_images) break;
      if (round < subsets[s].size()) plan.images.push_back({s, subsets[s][round]});
    }
  return plan;
}

// ---------------------------------------------------------------------------
// Downsampling

FloatRaster downsample_imagery(const FloatRaster& img, int factor, DownsampleReport* report) {
  if (factor < 1) throw InvalidArgument("downsampling factor must be >= 1");
  const int h = img.height() / factor * factor, w = img.width() / factor * factor;
  if (h == 0 || w == 0) throw InvalidArgument("raster smaller than the downsampling factor");
  if (report) {
    report->cropped = h != img.height() || w != img.width();
    report->cropped_height = h;
    report->cropped_width = w;
  }
  GridGeometry g{h / factor, w / factor, img.grid.pixel_size * factor, img.grid.origin};
  FloatRaster out(g, img.channels);
  out.band_names = img.band_names;
  const double inv = 1.0 / (static_cast<double>(factor) * factor);
  for (int ch = 0; ch < img.channels; ++ch)
    for (int r = 0; r < g.height; ++r)
      for (int c = 0; c < g.width; ++c) {
        double acc = 0.0;
        for (int i = 0; i < factor; ++i)
          for (int j = 0; j < factor; ++j) acc += img.at(ch, r * factor + i, c * factor + j);
        out.at(ch, r, c) = static_cast<float>(acc * inv);
      }
  return out;
}

synth::SyntheticScene downsample_scene(const synth::SyntheticScene& scene, int factor, DownsampleReport* report) {
  synth::SyntheticScene out;
  out.spec = scene.spec;
  for (const auto& s : scene.imagery) out.imagery.push_back(downsample_imagery(s, factor, report));
  const GridGeometry g = out.imagery.empty()
                             ? GridGeometry{scene.grid().height / factor, scene.grid().width / factor,
                                            scene.grid().pixel_size * factor, scene.grid().origin}
                             : out.imagery.front().grid;
  out.spec.height = g.height;
  out.spec.width = g.width;
  out.spec.pixel_size = g.pixel_size;

  const auto ids = geom::rasterize_ids(scene.polygons, g);
  std::vector<bool> present(scene.polygons.size(), false);
  for (auto v : ids.data)
    if (v) present[v - 1] = true;
  for (std::size_t i = 0; i < scene.polygons.size(); ++i)
    if (present[i]) out.polygons.push_back(scene.polygons[i]);
  out.field_ids = geom::rasterize_ids(out.polygons, g);
  out.noncrop_mask = ByteRaster(g, 1, 0);
  for (std::size_t i = 0; i < out.field_ids.data.size(); ++i) out.noncrop_mask.data[i] = out.field_ids.data[i] == 0;
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

template <typename T>
Raster<T> apply_d4(const Raster<T>& src, int k) {
  if (k < 0 || k > 7) throw InvalidArgument("D4 element must be in [0, 8)");
  const int h = src.height(), w = src.width();
  const int q = k & 3;
  const bool flip = k & 4;
  const int oh = q % 2 ? w : h, ow = q % 2 ? h : w;
  Raster<T> out(GridGeometry{oh, ow, src.grid.pixel_size, src.grid.origin}, src.channels);
  out.band_names = src.band_names;
  for (int r = 0; r < oh; ++r)
    for (int c = 0; c < ow; ++c) {
      int sr = r, sc = c;
      switch (q) {
        case 1: sr = c; sc = w - 1 - r; break;
        case 2: sr = h - 1 - r; sc = w - 1 - c; break;
        case 3: sr = h - 1 - c; sc = r; break;
        default: break;
      }
      if (flip) sc = w - 1 - sc;
      for (int ch = 0; ch < src.channels; ++ch) out.at(ch, r, c) = src.at(ch, sr, sc);
    }
  return out;
}

template FloatRaster apply_d4(const FloatRaster&, int);
template ByteRaster apply_d4(const ByteRaster&, int);
template IdRaster apply_d4(const IdRaster&, int);

namespace {

void check_aligned(const Example& ex) {
  const auto& g = ex.image.grid;
  auto same = [&](const auto& r) { return r.height() == g.height && r.width() == g.width; };
  if (!same(ex.labels.extent) || !same(ex.labels.boundary) || !same(ex.labels.distance) || !same(ex.labels.mask))
    throw InvalidArgument("image and label planes are not aligned");
}

}  // namespace

Example augment_with(const Example& ex, int d4) {
  check_aligned(ex);
  Example out;
  out.id = ex.id;
  out.bands_per_season = ex.bands_per_season;
  out.shuffle_seasons = ex.shuffle_seasons;
  out.image = apply_d4(ex.image, d4);
  out.labels.extent = apply_d4(ex.labels.extent, d4);
  out.labels.boundary = apply_d4(ex.labels.boundary, d4);
  out.labels.distance = apply_d4(ex.labels.distance, d4);
  out.labels.mask = apply_d4(ex.labels.mask, d4);
  return out;
}

Example augment(const Example& ex, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "augment"));
  return augment_with(ex, static_cast<int>(rng.below(8)));
}

// ---------------------------------------------------------------------------
// Multi-temporal inputs and examples

std::string temporal_mode_name(TemporalMode m) {
  switch (m) {
    case TemporalMode::Single: return "single";
    case TemporalMode::Separate: return "separate";
    case TemporalMode::Stacked: return "stacked";
  }
  return "single";
}

TemporalMode temporal_mode_from_name(const std::string& name) {
  if (name == "single") return TemporalMode::Single;
  if (name == "separate") return TemporalMode::Separate;
  if (name == "stacked") return TemporalMode::Stacked;
  throw InvalidArgument("unknown temporal mode '" + name + "' (valid: single, separate, stacked)");
}

namespace {

FloatRaster stack(std::span<const FloatRaster> seasons, std::span<const std::size_t> order) {
  const auto& first = seasons[order.front()];
  int channels = 0;
  for (auto i : order) channels += seasons[i].channels;
  FloatRaster out(first.grid, channels);
  auto dst = out.data.begin();
  for (auto i : order) {
    for (const auto& b : seasons[i].band_names) out.band_names.push_back("s" + std::to_string(i) + "_" + b);
    dst = std::copy(seasons[i].data.begin(), seasons[i].data.end(), dst);
  }
  return out;
}

}  // namespace

std::vector<FloatRaster> make_multitemporal_input(std::span<const FloatRaster> seasons, TemporalMode mode,
                                                  bool shuffle, std::uint64_t seed) {
  if (seasons.empty()) throw InvalidArgument("need at least one season");
  for (const auto& s : seasons)
    if (s.height() != seasons[0].height() || s.width() != seasons[0].width())
      throw ShapeError("seasonal rasters differ in shape");
  switch (mode) {
    case TemporalMode::Single: return {seasons[0]};
    case TemporalMode::Separate: return {seasons.begin(), seasons.end()};
    case TemporalMode::Stacked: {
      std::vector<std::size_t> order(seasons.size());
      std::iota(order.begin(), order.end(), 0);
      if (shuffle) {
        Rng rng(derive_seed(seed, "season_order"));
        rng.shuffle(order.begin(), order.end());
      }
      return {stack(seasons, order)};
    }
  }
  return {};
}

std::vector<std::size_t> all_fields(const synth::SyntheticScene& scene) {
  std::vector<bool> present(scene.polygons.size(), false);
  for (auto v : scene.field_ids.data)
    if (v) present[v - 1] = true;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < present.size(); ++i)
    if (present[i]) out.push_back(i);
  return out;
}

std::vector<Example> make_examples(const synth::SyntheticScene& scene, const std::string& id,
                                   std::span<const std::size_t> fields, const ExampleOptions& opts) {
  std::vector<geom::FieldPolygon> labeled;
  for (auto i : fields) {
    if (i >= scene.polygons.size()) throw InvalidArgument("field index out of range");
    labeled.push_back(scene.polygons[i]);
  }
  const auto labels = geom::make_label_stack(labeled, scene.grid(), opts.labels);
  std::vector<FloatRaster> inputs;
  if (opts.mode == TemporalMode::Single) {
    if (opts.season < 0 || opts.season >= static_cast<int>(scene.imagery.size()))
      throw InvalidArgument("season index out of range");
    inputs.push_back(scene.imagery[static_cast<std::size_t>(opts.season)]);
  } else {
    inputs = make_multitemporal_input(scene.imagery, opts.mode, false);
  }
  std::vector<Example> out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Example ex;
    ex.id = opts.mode == TemporalMode::Separate ? id + "/s" + std::to_string(k) : id;
    ex.image = std::move(inputs[k]);
    ex.labels = labels;
    ex.bands_per_season = scene.imagery.empty() ? ex.image.channels : scene.imagery.front().channels;
    ex.shuffle_seasons = opts.mode == TemporalMode::Stacked && opts.shuffle_seasons;
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training samples

std::array<int, 2> draw_crop_window(const geom::LabelStack& labels, int size, Rng& rng) {
  const int h = labels.mask.height(), w = labels.mask.width();
  if (size < 1 || size > h || size > w)
    throw InvalidArgument("crop size " + std::to_string(size) + " does not fit a " + std::to_string(h) + "x" +
                          std::to_string(w) + " tile");
  std::size_t n = 0;
  for (auto v : labels.mask.data) n += v != 0;
  if (n == 0) throw UnsupervisableError("unsupervisable batch: tile has no supervised pixel");
  auto pick = rng.below(n);
  std::size_t at = 0;
  for (std::size_t i = 0; i < labels.mask.data.size(); ++i)
    if (labels.mask.data[i] && pick-- == 0) {
      at = i;
      break;
    }
  const int r = static_cast<int>(at / static_cast<std::size_t>(w)), c = static_cast<int>(at % static_cast<std::size_t>(w));
  return {std::clamp(r - size / 2, 0, h - size), std::clamp(c - size / 2, 0, w - size)};
}

Example draw_training_sample(const Example& ex, int crop_size, std::uint64_t seed) {
  Rng rng(seed);
  const int size = std::min({crop_size, ex.image.height(), ex.image.width()});
  const auto [r0, c0] = draw_crop_window(ex.labels, size, rng);
  Example cropped;
  cropped.id = ex.id;
  cropped.bands_per_season = ex.bands_per_season;
  cropped.shuffle_seasons = ex.shuffle_seasons;
  cropped.image = crop(ex.image, r0, c0, size, size);
  cropped.labels.extent = crop(ex.labels.extent, r0, c0, size, size);
  cropped.labels.boundary = crop(ex.labels.boundary, r0, c0, size, size);
  cropped.labels.distance = crop(ex.labels.distance, r0, c0, size, size);
  cropped.labels.mask = crop(ex.labels.mask, r0, c0, size, size);
  auto out = augment_with(cropped, static_cast<int>(rng.below(8)));
  if (ex.shuffle_seasons && ex.bands_per_season > 0 && ex.image.channels % ex.bands_per_season == 0) {
    const int groups = ex.image.channels / ex.bands_per_season;
    std::vector<int> order(static_cast<std::size_t>(groups));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    FloatRaster shuffled = out.image;
    const std::size_t plane = out.image.plane_size() * static_cast<std::size_t>(ex.bands_per_season);
    for (int g = 0; g < groups; ++g)
      std::copy_n(out.image.data.begin() + static_cast<std::ptrdiff_t>(plane * static_cast<std::size_t>(order[static_cast<std::size_t>(g)])),
                  plane, shuffled.data.begin() + static_cast<std::ptrdiff_t>(plane * static_cast<std::size_t>(g)));
    out.image = std::move(shuffled);
  }
  return out;
}

std::uint64_t sample_seed(std::uint64_t seed, int epoch, std::size_t index) {
  return derive_seed(derive_seed(seed, "epoch_" + std::to_string(epoch)), "sample_" + std::to_string(index));
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "order_" + std::to_string(epoch)));
  rng.shuffle(order.begin(), order.end());
  return order;
}

// ---------------------------------------------------------------------------
// Domains

std::vector<std::size_t> Domain::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < scene_split.size(); ++i)
    if (scene_split[i] == s) out.push_back(i);
  return out;
}

Domain generate_domain(const std::string& name, const synth::LandscapeSpec& base, const DomainOptions& opts,
                       std::uint64_t seed) {
  if (opts.n_scenes < 1) throw InvalidArgument("a domain needs at least one scene");
  Domain d;
  d.name = name;
  d.base = base;
  Rng loc(derive_seed(seed, name + "/locations"));
  for (int i = 0; i < opts.n_scenes; ++i) d.locations.push_back({loc.uniform(), loc.uniform()});
  d.splits = assign_splits(d.locations, opts.grid_rows, opts.grid_cols, opts.fractions, derive_seed(seed, name));
  d.scenes.resize(static_cast<std::size_t>(opts.n_scenes));
  parallel_for(static_cast<std::size_t>(opts.n_scenes), [&](std::size_t i) {
    auto spec = base;
    spec.seed = derive_seed(seed, name + "/scene_" + std::to_string(i));
    d.scenes[i] = synth::generate_landscape(spec);
  });
  for (const auto& p : d.locations) d.scene_split.push_back(d.splits.split_of(p));
  return d;
}

Json record_to_json(const SampleRecord& r) {
  Json j;
  j["scene_id"] = r.scene_id;
  j["crop_window"] = r.crop_window;
  j["imagery_ref"] = r.imagery_ref;
  j["labelstack_ref"] = r.labelstack_ref;
  j["split"] = split_name(r.split);
  j["months"] = r.months;
  return j;
}

SampleRecord record_from_json(const Json& j) {
  try {
    SampleRecord r;
    r.scene_id = j.at("scene_id").get<std::string>();
    r.crop_window = j.at("crop_window").get<std::array<int, 4>>();
    r.imagery_ref = j.at("imagery_ref").get<std::string>();
    r.labelstack_ref = j.at("labelstack_ref").get<std::string>();
    r.split = split_from_name(j.at("split").get<std::string>());
    r.months = j.at("months").get<std::vector<int>>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad manifest record: ") + e.what());
  }
}

void write_manifest(const std::filesystem::path& path, std::span<const SampleRecord> records) {
  std::string text;
  for (const auto& r : records) text += record_to_json(r).dump() + "\n";
  write_text_file(path, text);
}

std::vector<SampleRecord> read_manifest(const std::filesystem::path& path) {
  std::vector<SampleRecord> out;
  std::istringstream in(read_text_file(path));
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(Json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

namespace {

std::string scene_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "scene_%04zu", i);
  return buf;
}

}  // namespace

void save_domain(const Domain& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "scenes");
  Json meta;
  meta["name"] = d.name;
  meta["base_spec"] = synth::spec_to_json(d.base);
  meta["n_scenes"] = d.scenes.size();
  Json locs = Json::array();
  for (const auto& p : d.locations) locs.push_back({p.x, p.y});
  meta["locations"] = locs;
  write_json_file(dir / "domain.json", meta);
  write_json_file(dir / "splits.json", split_to_json(d.splits));
  std::vector<SampleRecord> records;
  for (std::size_t i = 0; i < d.scenes.size(); ++i) {
    const auto id = scene_id(i);
    synth::save_scene(d.scenes[i], dir / "scenes" / id);
    SampleRecord r;
    r.scene_id = id;
    r.crop_window = {0, 0, d.scenes[i].grid().height, d.scenes[i].grid().width};
    r.imagery_ref = "scenes/" + id + "/season_0";
    r.labelstack_ref = "scenes/" + id + "/polygons.geojson";
    r.split = d.scene_split[i];
    for (int s = 0; s < d.scenes[i].spec.n_seasons; ++s) r.months.push_back(s);
    records.push_back(r);
  }
  write_manifest(dir / "manifest.jsonl", records);
}

Domain load_domain(const std::filesystem::path& dir) {
  const auto meta = read_json_file(dir / "domain.json");
  Domain d;
  try {
    d.name = meta.at("name").get<std::string>();
    d.base = synth::spec_from_json(meta.at("base_spec"));
    for (const auto& p : meta.at("locations")) d.locations.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad domain.json: ") + e.what());
  }
  d.splits = split_from_json(read_json_file(dir / "splits.json"));
  const auto records = read_manifest(dir / "manifest.jsonl");
  if (records.size() != d.locations.size()) throw FormatError("manifest and domain.json disagree on scene count");
  for (const auto& r : records) {
    d.scenes.push_back(synth::load_scene(dir / "scenes" / r.scene_id));
    d.scene_split.push_back(r.split);
  }
  return d;
}

}  // namespace fieldkit::data
