#include "fieldkit/instancer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <queue>
#include <tuple>

#include "fieldkit/evalkit.hpp"

namespace fieldkit::inst {

std::string hierarchy_name(Hierarchy h) { return h == Hierarchy::Area ? "area" : "dynamics"; }

Hierarchy hierarchy_from_name(const std::string& name) {
  if (name == "dynamics") return Hierarchy::Dynamics;
  if (name == "area") return Hierarchy::Area;
  throw InvalidArgument("unknown hierarchy criterion '" + name + "' (valid: dynamics, area)");
}

void WatershedParams::validate() const {
  if (!(surface_mix >= 0.0 && surface_mix <= 1.0)) throw InvalidArgument("surface_mix must lie in [0, 1]");
  if (!(marker_threshold > 0.0 && marker_threshold < 1.0)) throw InvalidArgument("marker_threshold must lie in (0, 1)");
  if (!(extent_cutoff > 0.0 && extent_cutoff < 1.0)) throw InvalidArgument("extent_cutoff must lie in (0, 1)");
  if (!(merge_threshold >= 0.0)) throw InvalidArgument("merge_threshold must be >= 0");
  if (min_instance_px < 0) throw InvalidArgument("min_instance_px must be >= 0");
  if (!(smoothing_sigma >= 0.0 && smoothing_sigma <= 16.0)) throw InvalidArgument("smoothing_sigma must lie in [0, 16]");
}

Json params_to_json(const WatershedParams& p) {
  Json j;
  j["surface_mix"] = p.surface_mix;
  j["marker_threshold"] = p.marker_threshold;
  j["hierarchy"] = hierarchy_name(p.hierarchy);
  j["merge_threshold"] = p.merge_threshold;
  j["min_instance_px"] = p.min_instance_px;
  j["extent_cutoff"] = p.extent_cutoff;
  j["smoothing_sigma"] = p.smoothing_sigma;
  return j;
}

WatershedParams params_from_json(const Json& j) {
  WatershedParams p;
  try {
    p.surface_mix = j.value("surface_mix", p.surface_mix);
    p.marker_threshold = j.value("marker_threshold", p.marker_threshold);
    if (j.contains("hierarchy")) p.hierarchy = hierarchy_from_name(j.at("hierarchy").get<std::string>());
    p.merge_threshold = j.value("merge_threshold", p.merge_threshold);
    p.min_instance_px = j.value("min_instance_px", p.min_instance_px);
    p.extent_cutoff = j.value("extent_cutoff", p.extent_cutoff);
    p.smoothing_sigma = j.value("smoothing_sigma", p.smoothing_sigma);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad watershed parameters: ") + e.what());
  }
  p.validate();
  return p;
}

std::vector<float> watershed_surface(std::span<const float> extent, std::span<const float> boundary, double mix) {
  if (extent.size() != boundary.size()) throw ShapeError("extent and boundary maps differ in size");
  std::vector<float> s(extent.size());
  const float a = static_cast<float>(mix), b = static_cast<float>(1.0 - mix);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = a * boundary[i] + b * (1.0f - extent[i]);
  return s;
}

std::vector<float> smooth_surface(std::span<const float> surface, int height, int width, double sigma) {
  const std::size_t n = static_cast<std::size_t>(height) * width;
  if (surface.size() != n) throw ShapeError("surface size does not match its shape");
  if (sigma <= 0.0) return {surface.begin(), surface.end()};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * static_cast<std::size_t>(radius) + 1);
  double total = 0.0;
  for (int k = -radius; k <= radius; ++k) total += kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
  for (auto& v : kernel) v /= total;
  std::vector<double> rows(n);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k)
        acc += kernel[k + radius] * surface[static_cast<std::size_t>(r) * width + std::clamp(c + k, 0, width - 1)];
      rows[static_cast<std::size_t>(r) * width + c] = acc;
    }
  std::vector<float> out(n);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k)
        acc += kernel[k + radius] * rows[static_cast<std::size_t>(std::clamp(r + k, 0, height - 1)) * width + c];
      out[static_cast<std::size_t>(r) * width + c] = static_cast<float>(acc);
    }
  return out;
}

namespace {

/// Neighbours in the fixed visiting order up, left, right, down.
template <typename F>
void for_neighbours(std::size_t i, int h, int w, F&& f) {
  const int r = static_cast<int>(i / static_cast<std::size_t>(w)), c = static_cast<int>(i % static_cast<std::size_t>(w));
  if (r > 0) f(i - static_cast<std::size_t>(w));
  if (c > 0) f(i - 1);
  if (c + 1 < w) f(i + 1);
  if (r + 1 < h) f(i + static_cast<std::size_t>(w));
  (void)h;
}

/// 4-connected components of pixels where keep(i) holds and that share
/// key(i); numbered from 1 in scan order.
template <typename Keep, typename Key>
std::vector<std::uint32_t> components(int h, int w, Keep keep, Key key) {
  const std::size_t n = static_cast<std::size_t>(h) * w;
  std::vector<std::uint32_t> out(n, 0);
  std::uint32_t next = 0;
  std::vector<std::size_t> stack;
  for (std::size_t s = 0; s < n; ++s) {
    if (out[s] || !keep(s)) continue;
    out[s] = ++next;
    stack.push_back(s);
    while (!stack.empty()) {
      const auto i = stack.back();
      stack.pop_back();
      for_neighbours(i, h, w, [&](std::size_t j) {
        if (!out[j] && keep(j) && key(j) == key(i)) {
          out[j] = next;
          stack.push_back(j);
        }
      });
    }
  }
  return out;
}

struct UnionFind {
  std::vector<std::uint32_t> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0u); }
  std::uint32_t find(std::uint32_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
};

using Pair = std::pair<std::uint32_t, std::uint32_t>;

/// Lowest pass height between every pair of 4-adjacent labels.
std::map<Pair, float> passes(const std::vector<std::uint32_t>& labels, std::span<const float> surface, int h, int w) {
  std::map<Pair, float> out;
  auto visit = [&](std::size_t i, std::size_t j) {
    const auto a = labels[i], b = labels[j];
    if (!a || !b || a == b) return;
    const Pair key{std::min(a, b), std::max(a, b)};
    const float height = std::max(surface[i], surface[j]);
    auto [it, fresh] = out.emplace(key, height);
    if (!fresh) it->second = std::min(it->second, height);
  };
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const auto i = static_cast<std::size_t>(r) * w + c;
      if (c + 1 < w) visit(i, i + 1);
      if (r + 1 < h) visit(i, i + static_cast<std::size_t>(w));
    }
  return out;
}

/// Merges basins up the flooding hierarchy. Passes are processed from the
/// lowest; at each pass the younger basin (higher minimum; ties: larger
/// smallest id) is absorbed when its attribute is under the threshold.
std::vector<std::uint32_t> merge_hierarchy(const std::vector<std::uint32_t>& labels, std::span<const float> surface,
                                           int h, int w, const WatershedParams& p) {
  std::uint32_t n = 0;
  for (auto l : labels) n = std::max(n, l);
  if (n < 2) return labels;
  std::vector<float> minimum(n + 1, std::numeric_limits<float>::infinity());
  std::vector<double> area(n + 1, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i]) {
      minimum[labels[i]] = std::min(minimum[labels[i]], surface[i]);
      area[labels[i]] += 1.0;
    }
  std::vector<std::tuple<float, std::uint32_t, std::uint32_t>> edges;
  for (const auto& [k, v] : passes(labels, surface, h, w)) edges.emplace_back(v, k.first, k.second);
  std::sort(edges.begin(), edges.end());

  UnionFind tree(n + 1), merged(n + 1);
  std::vector<std::uint32_t> smallest(n + 1);
  std::iota(smallest.begin(), smallest.end(), 0u);
  for (const auto& [height, a, b] : edges) {
    auto ra = tree.find(a), rb = tree.find(b);
    if (ra == rb) continue;
    const bool a_younger = minimum[ra] > minimum[rb] || (minimum[ra] == minimum[rb] && smallest[ra] > smallest[rb]);
    const auto young = a_younger ? ra : rb, old = a_younger ? rb : ra;
    const double attribute =
        p.hierarchy == Hierarchy::Dynamics ? static_cast<double>(height) - minimum[young] : area[young];
    if (attribute < p.merge_threshold) merged.parent[merged.find(a)] = merged.find(b);
    tree.parent[young] = old;
    area[old] += area[young];
    smallest[old] = std::min(smallest[old], smallest[young]);
  }
  std::vector<std::uint32_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] ? merged.find(labels[i]) : 0;
  return out;
}

/// Merges instances under `min_px` into the neighbour with the lowest pass
/// (ties: smaller id), smallest instance first; isolated ones become
/// background.
void merge_small(std::vector<std::uint32_t>& labels, std::span<const float> surface, int h, int w, int min_px) {
  if (min_px <= 1) return;
  std::map<std::uint32_t, std::size_t> area;
  for (auto l : labels)
    if (l) ++area[l];
  std::map<std::uint32_t, std::map<std::uint32_t, float>> adj;
  for (const auto& [k, v] : passes(labels, surface, h, w)) {
    adj[k.first][k.second] = v;
    adj[k.second][k.first] = v;
  }
  std::map<std::uint32_t, std::uint32_t> target;  // absorbed id -> new id (0 = background)
  for (;;) {
    std::uint32_t pick = 0;
    std::size_t pick_area = 0;
    for (const auto& [id, a] : area)
      if (a < static_cast<std::size_t>(min_px) && (!pick || a < pick_area)) {
        pick = id;
        pick_area = a;
      }
    if (!pick) break;
    auto& nb = adj[pick];
    std::uint32_t into = 0;
    float best = std::numeric_limits<float>::infinity();
    for (const auto& [id, height] : nb)
      if (height < best) {
        best = height;
        into = id;
      }
    target[pick] = into;
    if (into) {
      area[into] += area[pick];
      auto& dst = adj[into];
      dst.erase(pick);
      for (const auto& [id, height] : nb) {
        if (id == into) continue;
        auto& other = adj[id];
        other.erase(pick);
        auto it = dst.find(id);
        const float v = it == dst.end() ? height : std::min(it->second, height);
        dst[id] = v;
        other[into] = v;
      }
    }
    adj.erase(pick);
    area.erase(pick);
  }
  if (target.empty()) return;
  auto resolve = [&](std::uint32_t l) {
    while (l) {
      auto it = target.find(l);
      if (it == target.end()) break;
      l = it->second;
    }
    return l;
  };
  for (auto& l : labels) l = resolve(l);
}

InstanceMap compact_vector(const std::vector<std::uint32_t>& labels, const GridGeometry& grid) {
  InstanceMap out;
  out.labels = IdRaster(grid, 1);
  out.labels.band_names = {"instance_id"};
  std::map<std::uint32_t, std::uint32_t> remap;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!labels[i]) continue;
    auto [it, fresh] = remap.emplace(labels[i], static_cast<std::uint32_t>(remap.size() + 1));
    out.labels.data[i] = it->second;
  }
  out.n_instances = static_cast<std::uint32_t>(remap.size());
  return out;
}

}  // namespace

std::vector<std::uint32_t> find_markers(std::span<const float> surface, int height, int width, double threshold) {
  if (surface.size() != static_cast<std::size_t>(height) * width) throw ShapeError("surface size does not match grid");
  const float t = static_cast<float>(threshold);
  return components(height, width, [&](std::size_t i) { return surface[i] < t; }, [](std::size_t) { return 0; });
}

std::vector<std::uint32_t> flood(std::span<const float> surface, int height, int width,
                                 std::vector<std::uint32_t> labels) {
  const std::size_t n = static_cast<std::size_t>(height) * width;
  if (surface.size() != n || labels.size() != n) throw ShapeError("surface and markers differ in size");
  using Entry = std::tuple<float, std::uint64_t, std::size_t>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> queue;
  std::vector<std::uint32_t> owner(n, 0);
  std::vector<std::uint8_t> queued(n, 0);
  std::uint64_t stamp = 0;
  auto reach = [&](std::size_t from) {
    for_neighbours(from, height, width, [&](std::size_t j) {
      if (labels[j] || queued[j]) return;
      queued[j] = 1;
      owner[j] = labels[from];
      queue.emplace(surface[j], stamp++, j);
    });
  };
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i]) reach(i);
  while (!queue.empty()) {
    const auto i = std::get<2>(queue.top());
    queue.pop();
    labels[i] = owner[i];
    reach(i);
  }
  return labels;
}

InstanceMap compact(const IdRaster& labels) { return compact_vector(labels.data, labels.grid); }

InstanceMap watershed_segment(const FloatRaster& extent, const FloatRaster& boundary, const WatershedParams& params) {
  params.validate();
  if (extent.grid.height != boundary.grid.height || extent.grid.width != boundary.grid.width)
    throw ShapeError("extent and boundary maps differ in shape");
  const int h = extent.height(), w = extent.width();
  const auto e = extent.plane(0);
  const auto surface = smooth_surface(watershed_surface(e, boundary.plane(0), params.surface_mix), h, w,
                                      params.smoothing_sigma);
  auto labels = flood(surface, h, w, find_markers(surface, h, w, params.marker_threshold));
  labels = merge_hierarchy(labels, surface, h, w, params);
  const float cutoff = static_cast<float>(params.extent_cutoff);
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (e[i] < cutoff) labels[i] = 0;
  labels = components(h, w, [&](std::size_t i) { return labels[i] != 0; }, [&](std::size_t i) { return labels[i]; });
  merge_small(labels, surface, h, w, params.min_instance_px);
  return compact_vector(labels, extent.grid);
}

InstanceMap apply_cropland_mask(const InstanceMap& inst, const ByteRaster& cropmask) {
  if (inst.labels.grid.height != cropmask.grid.height || inst.labels.grid.width != cropmask.grid.width)
    throw ShapeError("instance map and crop mask differ in shape");
  const int h = inst.labels.height(), w = inst.labels.width();
  const auto& in = inst.labels.data;
  std::map<std::uint32_t, std::size_t> before;
  for (auto l : in)
    if (l) ++before[l];
  std::vector<std::uint32_t> kept(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) kept[i] = cropmask.data[i] ? in[i] : 0;
  const auto pieces = components(h, w, [&](std::size_t i) { return kept[i] != 0; }, [&](std::size_t i) { return kept[i]; });
  std::map<std::uint32_t, std::size_t> piece_area;
  std::map<std::uint32_t, std::size_t> remaining;
  for (std::size_t i = 0; i < in.size(); ++i)
    if (pieces[i]) {
      ++piece_area[pieces[i]];
      ++remaining[kept[i]];
    }
  // Largest piece per instance; ties keep the first in scan order.
  std::map<std::uint32_t, std::uint32_t> best_piece;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (!pieces[i]) continue;
    auto [it, fresh] = best_piece.emplace(kept[i], pieces[i]);
    if (!fresh && piece_area[pieces[i]] > piece_area[it->second]) it->second = pieces[i];
  }
  std::vector<std::uint32_t> out(in.size(), 0);
  for (std::size_t i = 0; i < in.size(); ++i) {
    const auto l = kept[i];
    if (!l || pieces[i] != best_piece[l]) continue;
    if (2 * remaining[l] < before[l]) continue;  // lost more than half
    out[i] = l;
  }
  return compact_vector(out, inst.labels.grid);
}

std::vector<WatershedParams> SearchGrid::points() const {
  std::vector<WatershedParams> out;
  for (double mix : surface_mix)
    for (double tm : marker_threshold)
      for (auto hier : hierarchy)
        for (double merge : merge_threshold)
          for (int px : min_instance_px)
            for (double te : extent_cutoff)
              for (double sigma : smoothing_sigma) {
                WatershedParams p{mix, tm, hier, merge, px, te, sigma};
                p.validate();
                out.push_back(p);
              }
  return out;
}

WatershedParams SearchGrid::median_point() const {
  if (points().empty()) throw InvalidArgument("search grid is empty");
  auto mid = [](const auto& v) { return v[(v.size() - 1) / 2]; };
  return WatershedParams{mid(surface_mix),     mid(marker_threshold), mid(hierarchy),
                         mid(merge_threshold), mid(min_instance_px),  mid(extent_cutoff),
                         mid(smoothing_sigma)};
}

Json grid_to_json(const SearchGrid& g) {
  Json j;
  j["surface_mix"] = g.surface_mix;
  j["marker_threshold"] = g.marker_threshold;
  Json h = Json::array();
  for (auto x : g.hierarchy) h.push_back(hierarchy_name(x));
  j["hierarchy"] = h;
  j["merge_threshold"] = g.merge_threshold;
  j["min_instance_px"] = g.min_instance_px;
  j["extent_cutoff"] = g.extent_cutoff;
  j["smoothing_sigma"] = g.smoothing_sigma;
  return j;
}

SearchGrid grid_from_json(const Json& j) {
  SearchGrid g;
  try {
    g.surface_mix = j.value("surface_mix", g.surface_mix);
    g.marker_threshold = j.value("marker_threshold", g.marker_threshold);
    if (j.contains("hierarchy")) {
      g.hierarchy.clear();
      for (const auto& x : j.at("hierarchy")) g.hierarchy.push_back(hierarchy_from_name(x.get<std::string>()));
    }
    g.merge_threshold = j.value("merge_threshold", g.merge_threshold);
    g.min_instance_px = j.value("min_instance_px", g.min_instance_px);
    g.extent_cutoff = j.value("extent_cutoff", g.extent_cutoff);
    g.smoothing_sigma = j.value("smoothing_sigma", g.smoothing_sigma);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad search grid: ") + e.what());
  }
  return g;
}

Score score_params(std::span<const TuneTile> tiles, const WatershedParams& params) {
  std::vector<double> ious;
  for (const auto& t : tiles) {
    const auto seg = watershed_segment(t.extent, t.boundary, params);
    for (const auto& f : eval::match_fields(t.gt_ids, seg.labels, t.fields)) ious.push_back(f.iou);
  }
  Score s;
  s.n_fields = ious.size();
  if (ious.empty()) return s;
  const auto summary = eval::aggregate_instances(ious);
  s.median_iou = summary.median_iou;
  s.iou_50 = summary.iou_k.at(50);
  return s;
}

TuneResult tune_params(std::span<const TuneTile> tiles, const SearchGrid& grid) {
  const auto points = grid.points();
  if (points.empty()) throw InvalidArgument("search grid is empty");
  if (tiles.empty()) throw InvalidArgument("tuning needs at least one validation tile");
  std::vector<Score> scores(points.size());
  parallel_for(points.size(), [&](std::size_t k) { scores[k] = score_params(tiles, points[k]); });
  if (scores[0].n_fields == 0) throw InvalidArgument("tuning tiles contain no labeled field");
  std::size_t best = 0;
  for (std::size_t k = 1; k < points.size(); ++k) {
    const auto& a = scores[k];
    const auto& b = scores[best];
    if (std::tie(a.median_iou, a.iou_50) > std::tie(b.median_iou, b.iou_50) ||
        (a.median_iou == b.median_iou && a.iou_50 == b.iou_50 && points[k].min_instance_px < points[best].min_instance_px))
      best = k;
  }
  TuneResult r;
  r.params = points[best];
  r.median_iou = scores[best].median_iou;
  r.iou_50 = scores[best].iou_50;
  r.n_fields = scores[best].n_fields;
  r.low_confidence = r.n_fields < TuneResult::kConfidentFields;
  return r;
}

}  // namespace fieldkit::inst
