#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <set>

#include "fieldkit/evalkit.hpp"
#include "fieldkit/instancer.hpp"
#include "fieldkit/synthland.hpp"
#include "oracles.hpp"
#include "scene_gen.hpp"

using namespace fieldkit;
using namespace fieldkit::inst;

using oracle::reference_flood;
using oracle::reference_markers;
using oracle::same_partition;
using testgen::random_surface;

namespace {

FloatRaster to_float(const ByteRaster& b) {
  FloatRaster f(b.grid, 1);
  std::transform(b.data.begin(), b.data.end(), f.data.begin(), [](std::uint8_t v) { return static_cast<float>(v); });
  return f;
}

bool four_connected_and_compact(const InstanceMap& m) {
  const int h = m.labels.height(), w = m.labels.width();
  std::set<std::uint32_t> ids;
  for (auto v : m.labels.data)
    if (v) ids.insert(v);
  if (ids.size() != m.n_instances) return false;
  if (!ids.empty() && (*ids.begin() != 1 || *ids.rbegin() != m.n_instances)) return false;
  for (auto id : ids) {
    std::vector<std::uint8_t> seen(m.labels.data.size(), 0);
    std::size_t start = 0;
    while (m.labels.data[start] != id) ++start;
    std::deque<std::size_t> q{start};
    seen[start] = 1;
    std::size_t reached = 1;
    while (!q.empty()) {
      const auto i = q.front();
      q.pop_front();
      const int r = static_cast<int>(i) / w, c = static_cast<int>(i) % w;
      const int nr[4] = {r - 1, r, r, r + 1}, nc[4] = {c, c - 1, c + 1, c};
      for (int k = 0; k < 4; ++k) {
        if (nr[k] < 0 || nc[k] < 0 || nr[k] >= h || nc[k] >= w) continue;
        const auto j = static_cast<std::size_t>(nr[k] * w + nc[k]);
        if (!seen[j] && m.labels.data[j] == id) {
          seen[j] = 1;
          ++reached;
          q.push_back(j);
        }
      }
    }
    if (reached != static_cast<std::size_t>(std::count(m.labels.data.begin(), m.labels.data.end(), id))) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("flooding equals the brute-force priority-flood reference") {
  Rng rng(1);
  for (int trial = 0; trial < 60; ++trial) {
    const int h = 4 + static_cast<int>(rng.below(61)), w = 4 + static_cast<int>(rng.below(61));
    const int levels = trial % 3 == 0 ? 8 : 64;
    const auto s = random_surface(rng, h, w, levels);
    const float t = static_cast<float>(rng.uniform(0.1, 0.4));
    const auto markers = find_markers(s, h, w, t);
    const auto ref_markers = reference_markers(s, h, w, t);
    REQUIRE(same_partition(markers, ref_markers));
    const auto fast = flood(s, h, w, markers);
    const auto slow = reference_flood(s, h, w, ref_markers);
    INFO("trial ", trial, " size ", h, "x", w);
    CHECK(same_partition(fast, slow));
  }
}

TEST_CASE("full pipeline without merging reduces to the flood partition") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const int h = 8 + static_cast<int>(rng.below(57)), w = 8 + static_cast<int>(rng.below(57));
    const auto s = random_surface(rng, h, w, 64);
    const auto g = GridGeometry::pixels(h, w);
    FloatRaster extent(g, 1), boundary(g, 1);
    for (std::size_t i = 0; i < s.size(); ++i) extent.data[i] = 1.0f - s[i];
    WatershedParams p;
    p.surface_mix = 0.0;
    p.marker_threshold = 0.25;
    p.merge_threshold = 0.0;
    p.min_instance_px = 0;
    p.extent_cutoff = 0.01;
    p.smoothing_sigma = 0.0;
    const auto seg = watershed_segment(extent, boundary, p);
    const auto ref = reference_flood(s, h, w, reference_markers(s, h, w, 0.25f));
    if (std::all_of(ref.begin(), ref.end(), [](auto v) { return v == 0; })) continue;
    CHECK(same_partition(seg.labels.data, ref));
    CHECK(four_connected_and_compact(seg));
  }
}

TEST_CASE("surface smoothing matches a direct two-dimensional convolution") {
  Rng rng(11);
  const int h = 9, w = 13;
  std::vector<float> s(static_cast<std::size_t>(h) * w);
  for (auto& v : s) v = static_cast<float>(rng.uniform());
  for (double sigma : {0.6, 1.0, 2.5}) {
    const auto fast = smooth_surface(s, h, w, sigma);
    const int rad = static_cast<int>(std::ceil(3.0 * sigma));
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        double acc = 0.0, total = 0.0;
        for (int dr = -rad; dr <= rad; ++dr)
          for (int dc = -rad; dc <= rad; ++dc) {
            const double k = std::exp(-0.5 * (dr * dr + dc * dc) / (sigma * sigma));
            total += k;
            acc += k * s[static_cast<std::size_t>(std::clamp(r + dr, 0, h - 1)) * w + std::clamp(c + dc, 0, w - 1)];
          }
        CHECK(fast[static_cast<std::size_t>(r) * w + c] == doctest::Approx(acc / total).epsilon(1e-6));
      }
  }
  CHECK(smooth_surface(s, h, w, 0.0) == s);
}

TEST_CASE("ground-truth maps from synthetic scenes are recovered") {
  std::vector<double> ious;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    synth::LandscapeSpec spec;
    spec.seed = seed;
    const auto scene = synth::generate_landscape(spec);
    const auto labels = geom::make_label_stack(scene.polygons, scene.grid());
    const auto seg = watershed_segment(to_float(labels.extent), to_float(labels.boundary), WatershedParams{});
    CHECK(four_connected_and_compact(seg));
    for (const auto& f : eval::match_fields(scene.field_ids, seg.labels)) ious.push_back(f.iou);
  }
  const auto summary = eval::aggregate_instances(ious);
  INFO("fields ", ious.size(), " median IoU ", summary.median_iou);
  CHECK(summary.median_iou >= 0.95);
}

TEST_CASE("trivial and analytic layouts") {
  const auto g = GridGeometry::pixels(20, 30);
  FloatRaster ones(g, 1, 1.0f), zeros(g, 1, 0.0f);
  auto all = watershed_segment(ones, zeros, {});
  CHECK(all.n_instances == 1);
  CHECK(std::all_of(all.labels.data.begin(), all.labels.data.end(), [](auto v) { return v == 1; }));

  auto none = watershed_segment(zeros, zeros, {});
  CHECK(none.n_instances == 0);

  // Two fields separated by a 2-pixel ridge of height 0.9.
  FloatRaster boundary(g, 1, 0.0f);
  for (int r = 0; r < 20; ++r)
    for (int c = 14; c < 16; ++c) boundary(r, c) = 0.9f;
  WatershedParams p;
  p.surface_mix = 1.0;
  p.smoothing_sigma = 0.0;
  auto two = watershed_segment(ones, boundary, p);
  CHECK(two.n_instances == 2);
  CHECK(two.labels(5, 3) != two.labels(5, 25));
}

TEST_CASE("hierarchy criteria merge shallow and small basins") {
  // Columns 0-9: basin A at 0. Column 10: pass at 0.15. Columns 11-13: basin B
  // at 0.1. Columns 14-15: wall at 0.9. Columns 16-20: basin C at 0.1.
  // Flooding gives A the pass column and splits the wall, so the areas are
  // A = 110, B = 40, C = 60.
  const int h = 10, w = 21;
  const auto g = GridGeometry::pixels(h, w);
  FloatRaster extent(g, 1, 1.0f), boundary(g, 1, 0.0f);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) boundary(r, c) = c < 10 ? 0.0f : c == 10 ? 0.15f : c < 14 ? 0.1f : c < 16 ? 0.9f : 0.1f;
  WatershedParams p;
  p.surface_mix = 1.0;
  p.smoothing_sigma = 0.0;
  p.marker_threshold = 0.12;
  p.min_instance_px = 0;
  p.merge_threshold = 0.0;
  CHECK(watershed_segment(extent, boundary, p).n_instances == 3);
  p.merge_threshold = 0.1;  // B is 0.05 deep below its pass, C 0.8
  CHECK(watershed_segment(extent, boundary, p).n_instances == 2);
  p.merge_threshold = 0.85;
  CHECK(watershed_segment(extent, boundary, p).n_instances == 1);

  p.hierarchy = Hierarchy::Area;
  p.merge_threshold = 25;
  CHECK(watershed_segment(extent, boundary, p).n_instances == 3);
  p.merge_threshold = 55;
  const auto two = watershed_segment(extent, boundary, p);
  CHECK(two.n_instances == 2);
  CHECK(two.labels(0, 0) == two.labels(0, 12));
  p.merge_threshold = 80;
  CHECK(watershed_segment(extent, boundary, p).n_instances == 1);
}

TEST_CASE("raising the extent cutoff never adds foreground; outputs are connected") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int h = 16 + static_cast<int>(rng.below(33)), w = 16 + static_cast<int>(rng.below(33));
    const auto g = GridGeometry::pixels(h, w);
    FloatRaster e(g, 1), b(g, 1);
    const auto s1 = random_surface(rng, h, w, 64), s2 = random_surface(rng, h, w, 64);
    for (std::size_t i = 0; i < s1.size(); ++i) {
      e.data[i] = 1.0f - s1[i];
      b.data[i] = s2[i];
    }
    WatershedParams p;
    p.min_instance_px = static_cast<int>(rng.below(10));
    std::size_t prev = std::numeric_limits<std::size_t>::max();
    for (double te : {0.1, 0.3, 0.5, 0.7, 0.9}) {
      p.extent_cutoff = te;
      const auto seg = watershed_segment(e, b, p);
      CHECK(four_connected_and_compact(seg));
      const auto fg = static_cast<std::size_t>(std::count_if(seg.labels.data.begin(), seg.labels.data.end(), [](auto v) { return v != 0; }));
      CHECK(fg <= prev);
      prev = fg;
      // Deterministic relabeling.
      CHECK(watershed_segment(e, b, p).labels.data == seg.labels.data);
    }
  }
}

TEST_CASE("cropland mask") {
  synth::LandscapeSpec spec;
  spec.seed = 11;
  const auto scene = synth::generate_landscape(spec);
  const auto labels = geom::make_label_stack(scene.polygons, scene.grid());
  const auto seg = watershed_segment(to_float(labels.extent), to_float(labels.boundary), {});

  ByteRaster ones(scene.grid(), 1, 1), zeros(scene.grid(), 1, 0);
  const auto same = apply_cropland_mask(seg, ones);
  CHECK(same.labels.data == seg.labels.data);
  CHECK(apply_cropland_mask(seg, zeros).n_instances == 0);

  ByteRaster crop(scene.grid(), 1);
  for (std::size_t i = 0; i < crop.data.size(); ++i) crop.data[i] = scene.noncrop_mask.data[i] ? 0 : 1;
  const auto masked = apply_cropland_mask(compact(scene.field_ids), crop);
  std::set<std::uint32_t> fields(scene.field_ids.data.begin(), scene.field_ids.data.end());
  fields.erase(0);
  CHECK(masked.n_instances == fields.size());

  // An instance that loses more than half its pixels is dropped.
  const auto g = GridGeometry::pixels(4, 4);
  IdRaster block(g, 1, 1);
  ByteRaster half(g, 1, 0);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 2; ++c) half(r, c) = 1;
  CHECK(apply_cropland_mask(compact(block), half).n_instances == 1);
  half(0, 0) = 0;
  CHECK(apply_cropland_mask(compact(block), half).n_instances == 0);
}

TEST_CASE("parameter tuning") {
  synth::LandscapeSpec spec;
  spec.seed = 21;
  const auto scene = synth::generate_landscape(spec);
  const auto labels = geom::make_label_stack(scene.polygons, scene.grid());
  const std::vector<TuneTile> tiles{{to_float(labels.extent), to_float(labels.boundary), scene.field_ids, {}}};

  SearchGrid one;
  one.surface_mix = {0.6};
  one.marker_threshold = {0.2};
  one.merge_threshold = {0.05};
  one.min_instance_px = {8};
  one.extent_cutoff = {0.5};
  const auto r1 = tune_params(tiles, one);
  CHECK(r1.params == one.points()[0]);
  CHECK_FALSE(r1.low_confidence);

  const auto r = tune_params(tiles, SearchGrid{});
  CHECK(r.median_iou >= score_params(tiles, SearchGrid{}.median_point()).median_iou);
  for (const auto& p : SearchGrid{}.points()) CHECK(score_params(tiles, p).median_iou <= r.median_iou);

  // A single labeled field still yields parameters, flagged.
  const std::vector<TuneTile> single{{to_float(labels.extent), to_float(labels.boundary), scene.field_ids, {1}}};
  const auto rs = tune_params(single, one);
  CHECK(rs.n_fields == 1);
  CHECK(rs.low_confidence);

  SearchGrid empty;
  empty.extent_cutoff.clear();
  CHECK_THROWS_AS(tune_params(tiles, empty), InvalidArgument);
  CHECK(params_from_json(params_to_json(r.params)) == r.params);
}

namespace {

// Ground truth degraded like a network output: blurred, then noised.
TuneTile degraded_tile(std::uint64_t seed) {
  synth::LandscapeSpec spec;
  spec.seed = seed;
  const auto scene = synth::generate_landscape(spec);
  const auto labels = geom::make_label_stack(scene.polygons, scene.grid());
  const int h = scene.grid().height, w = scene.grid().width;
  Rng rng(derive_seed(seed, "degrade"));
  auto degrade = [&](const ByteRaster& b, double sigma) {
    const auto f = to_float(b);
    auto s = smooth_surface(f.data, h, w, sigma);
    FloatRaster out(b.grid, 1);
    for (std::size_t i = 0; i < s.size(); ++i)
      out.data[i] = static_cast<float>(std::clamp(0.1 + 0.8 * s[i] + rng.normal(0.0, 0.12), 0.0, 1.0));
    return out;
  };
  return {degrade(labels.extent, 1.2), degrade(labels.boundary, 1.5), scene.field_ids, {}};
}

}  // namespace

TEST_CASE("tuned parameters beat the grid median on held-out tiles") {
  SearchGrid grid;
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::vector<TuneTile> val{degraded_tile(100 + 2 * seed)}, test{degraded_tile(101 + 2 * seed)};
    const auto tuned = tune_params(val, grid);
    const double a = score_params(test, tuned.params).median_iou;
    const double b = score_params(test, grid.median_point()).median_iou;
    INFO("seed ", seed, " tuned ", a, " median point ", b);
    wins += a > b;
  }
  CHECK(wins >= 8);
}
