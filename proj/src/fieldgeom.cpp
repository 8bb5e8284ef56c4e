#include "fieldkit/fieldgeom.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "fieldkit/jsonio.hpp"

namespace fieldkit::geom {

namespace {

double cross(Point o, Point a, Point b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

int orientation(Point o, Point a, Point b) {
  const double v = cross(o, a, b);
  return (v > 0) - (v < 0);
}

bool on_segment(Point p, Point a, Point b) {
  return std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) && std::min(a.y, b.y) <= p.y &&
         p.y <= std::max(a.y, b.y);
}

/// Proper crossing or collinear overlap of positive length. Touching at a
/// single endpoint is allowed.
bool segments_conflict(Point a, Point b, Point c, Point d) {
  const int o1 = orientation(a, b, c), o2 = orientation(a, b, d);
  const int o3 = orientation(c, d, a), o4 = orientation(c, d, b);
  if (o1 * o2 < 0 && o3 * o4 < 0) return true;
  if (o1 == 0 && o2 == 0) {
    // Collinear: conflict if the projections overlap on more than a point.
    const bool horizontal_like = std::abs(b.x - a.x) >= std::abs(b.y - a.y);
    auto key = [&](Point p) { return horizontal_like ? p.x : p.y; };
    const double lo = std::max(std::min(key(a), key(b)), std::min(key(c), key(d)));
    const double hi = std::min(std::max(key(a), key(b)), std::max(key(c), key(d)));
    return hi > lo;
  }
  // An endpoint lying in the interior of the other segment is a T-junction.
  auto interior_touch = [](Point p, Point s0, Point s1) {
    return orientation(s0, s1, p) == 0 && on_segment(p, s0, s1) && !(p == s0) && !(p == s1);
  };
  return interior_touch(c, a, b) || interior_touch(d, a, b) || interior_touch(a, c, d) || interior_touch(b, c, d);
}

template <typename F>
void for_each_edge(const FieldPolygon& poly, F&& f) {
  auto ring_edges = [&](const Ring& ring) {
    const std::size_t n = ring.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) f(ring[j], ring[i]);
  };
  ring_edges(poly.ring);
  for (const auto& h : poly.holes) ring_edges(h);
}

// Shared crossing predicate: edge (a, b) crosses the horizontal line at y and
// its crossing abscissa. Both rasterization paths go through this helper so a
// pixel center lying exactly on an edge is classified identically.
inline bool crosses(Point a, Point b, double y) { return (a.y > y) != (b.y > y); }
inline double crossing_x(Point a, Point b, double y) { return (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x; }

void check_basic(const FieldPolygon& poly) {
  if (poly.ring.size() < 3) throw InvalidArgument("polygon " + std::to_string(poly.id) + " has fewer than 3 vertices");
  auto finite = [](const Ring& r) {
    return std::all_of(r.begin(), r.end(), [](Point p) { return std::isfinite(p.x) && std::isfinite(p.y); });
  };
  if (!finite(poly.ring) || !std::all_of(poly.holes.begin(), poly.holes.end(), finite))
    throw InvalidArgument("polygon " + std::to_string(poly.id) + " has non-finite coordinates");
}

/// Row-major binary mask over an unclipped pixel window.
struct LocalMask {
  int row0 = 0, col0 = 0, height = 0, width = 0;
  std::vector<std::uint8_t> v;
  std::uint8_t& at(int r, int c) { return v[static_cast<std::size_t>(r) * width + c]; }
  std::uint8_t at(int r, int c) const { return v[static_cast<std::size_t>(r) * width + c]; }
};

/// Footprint of a polygon on the (unclipped) lattice, padded by `pad` pixels.
LocalMask footprint(const FieldPolygon& poly, const GridGeometry& grid, int pad) {
  const auto spans = scan_polygon(poly, grid);
  LocalMask m;
  if (spans.empty()) return m;
  int rmin = std::numeric_limits<int>::max(), rmax = std::numeric_limits<int>::min();
  int cmin = rmin, cmax = rmax;
  for (const auto& s : spans) {
    rmin = std::min(rmin, s.row);
    rmax = std::max(rmax, s.row);
    cmin = std::min(cmin, s.c0);
    cmax = std::max(cmax, s.c1 - 1);
  }
  m.row0 = rmin - pad;
  m.col0 = cmin - pad;
  m.height = rmax - rmin + 1 + 2 * pad;
  m.width = cmax - cmin + 1 + 2 * pad;
  m.v.assign(static_cast<std::size_t>(m.height) * m.width, 0);
  for (const auto& s : spans)
    for (int c = s.c0; c < s.c1; ++c) m.at(s.row - m.row0, c - m.col0) = 1;
  return m;
}

bool skip_degenerate(const FieldPolygon& poly, const GridGeometry& grid, RasterizeReport* report) {
  check_basic(poly);
  if (std::abs(signed_area(poly.ring)) < grid.pixel_size * grid.pixel_size * (1.0 - 1e-9)) {
    if (report) {
      report->skipped_ids.push_back(poly.id);
      report->warnings.push_back("polygon " + std::to_string(poly.id) + " is smaller than one pixel; skipped");
    }
    return true;
  }
  return false;
}

/// 1-D squared distance transform (lower envelope of parabolas).
void edt_1d(const double* f, int n, double* d, std::vector<int>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(static_cast<std::size_t>(n), 0);
  z.assign(static_cast<std::size_t>(n) + 1, 0.0);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    double s;
    while (true) {
      const int p = v[static_cast<std::size_t>(k)];
      s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * q - 2.0 * p);
      if (s <= z[static_cast<std::size_t>(k)] && k > 0) {
        --k;
        continue;
      }
      if (s <= z[static_cast<std::size_t>(k)]) {
        // k == 0 and the new parabola dominates everywhere.
        v[0] = q;
        z[0] = -inf;
        z[1] = inf;
        s = std::numeric_limits<double>::quiet_NaN();
      }
      break;
    }
    if (!std::isnan(s)) {
      ++k;
      v[static_cast<std::size_t>(k)] = q;
      z[static_cast<std::size_t>(k)] = s;
      z[static_cast<std::size_t>(k) + 1] = inf;
    }
  }
  if (k < 0) {
    std::fill(d, d + n, inf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(j) + 1] < q) ++j;
    const int p = v[static_cast<std::size_t>(j)];
    d[q] = double(q - p) * (q - p) + f[p];
  }
}

/// Squared Euclidean distance from every pixel to the nearest zero of `m`.
std::vector<double> squared_edt(const LocalMask& m) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const int h = m.height, w = m.width;
  std::vector<double> g(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = m.v[i] ? inf : 0.0;
  std::vector<int> v;
  std::vector<double> z;
  std::vector<double> col(static_cast<std::size_t>(h)), out(static_cast<std::size_t>(std::max(h, w)));
  for (int c = 0; c < w; ++c) {
    for (int r = 0; r < h; ++r) col[static_cast<std::size_t>(r)] = g[static_cast<std::size_t>(r) * w + c];
    edt_1d(col.data(), h, out.data(), v, z);
    for (int r = 0; r < h; ++r) g[static_cast<std::size_t>(r) * w + c] = out[static_cast<std::size_t>(r)];
  }
  for (int r = 0; r < h; ++r) {
    double* row = g.data() + static_cast<std::size_t>(r) * w;
    edt_1d(row, w, out.data(), v, z);
    std::copy(out.begin(), out.begin() + w, row);
  }
  return g;
}

/// Separable min filter with a (2*radius+1) window; out-of-window reads as 0.
LocalMask erode(const LocalMask& m, int radius) {
  LocalMask tmp = m, out = m;
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      std::uint8_t v = 1;
      for (int k = c - radius; k <= c + radius && v; ++k) v = (k >= 0 && k < m.width) ? m.at(r, k) : 0;
      tmp.at(r, c) = v;
    }
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      std::uint8_t v = 1;
      for (int k = r - radius; k <= r + radius && v; ++k) v = (k >= 0 && k < m.height) ? tmp.at(k, c) : 0;
      out.at(r, c) = v;
    }
  return out;
}

}  // namespace

double signed_area(std::span<const Point> ring) {
  const std::size_t n = ring.size();
  if (n < 3) return 0.0;
  double a = 0.0;
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) a += ring[j].x * ring[i].y - ring[i].x * ring[j].y;
  return 0.5 * a;
}

double area(const FieldPolygon& poly) {
  double a = std::abs(signed_area(poly.ring));
  for (const auto& h : poly.holes) a -= std::abs(signed_area(h));
  return std::max(a, 0.0);
}

bool is_simple(std::span<const Point> ring) {
  const std::size_t n = ring.size();
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i) {
    const Point a = ring[i], b = ring[(i + 1) % n];
    if (a == b) return false;
    for (std::size_t j = i + 1; j < n; ++j) {
      const Point c = ring[j], d = ring[(j + 1) % n];
      const bool adjacent = (j == i + 1) || (i == 0 && j == n - 1);
      if (adjacent) {
        // Adjacent edges share one vertex; they only conflict by folding back.
        const Point shared = (j == i + 1) ? b : a;
        const Point p = (j == i + 1) ? a : b;
        const Point q = (j == i + 1) ? d : c;
        if (orientation(shared, p, q) == 0 && ((p.x - shared.x) * (q.x - shared.x) + (p.y - shared.y) * (q.y - shared.y)) > 0)
          return false;
        continue;
      }
      if (segments_conflict(a, b, c, d)) return false;
    }
  }
  return true;
}

void validate(const FieldPolygon& poly) {
  check_basic(poly);
  if (!is_simple(poly.ring)) throw InvalidArgument("polygon " + std::to_string(poly.id) + " is self-intersecting");
  if (!(area(poly) > 0.0)) throw InvalidArgument("polygon " + std::to_string(poly.id) + " has zero area");
}

bool contains(const FieldPolygon& poly, Point p) {
  bool inside = false;
  for_each_edge(poly, [&](Point a, Point b) {
    if (crosses(a, b, p.y) && p.x < crossing_x(a, b, p.y)) inside = !inside;
  });
  return inside;
}

Ring open_ring(Ring ring) {
  if (ring.size() > 1 && ring.front() == ring.back()) ring.pop_back();
  return ring;
}

std::vector<RowSpan> scan_polygon(const FieldPolygon& poly, const GridGeometry& grid) {
  check_basic(poly);
  double ymin = std::numeric_limits<double>::infinity(), ymax = -ymin;
  for_each_edge(poly, [&](Point p, Point) {
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  });
  const double ps = grid.pixel_size;
  // Rows whose center y lies within [ymin, ymax], widened by one for rounding.
  const int r_lo = static_cast<int>(std::floor((grid.origin.y - ymax) / ps - 0.5)) - 1;
  const int r_hi = static_cast<int>(std::ceil((grid.origin.y - ymin) / ps - 0.5)) + 1;
  std::vector<RowSpan> spans;
  std::vector<double> xs;
  auto center_x = [&](int c) { return grid.origin.x + (c + 0.5) * ps; };
  for (int r = r_lo; r <= r_hi; ++r) {
    const double y = grid.origin.y - (r + 0.5) * ps;
    xs.clear();
    for_each_edge(poly, [&](Point a, Point b) {
      if (crosses(a, b, y)) xs.push_back(crossing_x(a, b, y));
    });
    std::sort(xs.begin(), xs.end());
    // Center x is inside iff an odd number of crossings lie strictly right of
    // it, i.e. iff xs[2k] <= x < xs[2k+1] for some k.
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      int c0 = static_cast<int>(std::floor((xs[k] - grid.origin.x) / ps - 0.5));
      while (center_x(c0) < xs[k]) ++c0;
      while (center_x(c0 - 1) >= xs[k]) --c0;
      int c1 = static_cast<int>(std::floor((xs[k + 1] - grid.origin.x) / ps - 0.5));
      while (center_x(c1) < xs[k + 1]) ++c1;
      while (center_x(c1 - 1) >= xs[k + 1]) --c1;
      if (c1 > c0) spans.push_back({r, c0, c1});
    }
  }
  return spans;
}

IdRaster rasterize_ids(std::span<const FieldPolygon> polys, const GridGeometry& grid, RasterizeReport* report) {
  grid.validate();
  IdRaster out(grid, 1, 0u);
  for (std::size_t i = 0; i < polys.size(); ++i) {
    if (skip_degenerate(polys[i], grid, report)) continue;
    for (const auto& s : scan_polygon(polys[i], grid)) {
      if (s.row < 0 || s.row >= grid.height) continue;
      for (int c = std::max(s.c0, 0); c < std::min(s.c1, grid.width); ++c)
        out(s.row, c) = static_cast<std::uint32_t>(i + 1);
    }
  }
  return out;
}

ByteRaster rasterize_extent(std::span<const FieldPolygon> polys, const GridGeometry& grid, RasterizeReport* report) {
  const auto ids = rasterize_ids(polys, grid, report);
  ByteRaster out(grid, 1, 0);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = ids.data[i] ? 1 : 0;
  return out;
}

ByteRaster rasterize_boundary(std::span<const FieldPolygon> polys, const GridGeometry& grid, int thickness,
                              RasterizeReport* report) {
  grid.validate();
  if (thickness < 1) throw InvalidArgument("boundary thickness must be >= 1");
  ByteRaster out(grid, 1, 0);
  for (const auto& poly : polys) {
    if (skip_degenerate(poly, grid, report)) continue;
    const auto m = footprint(poly, grid, thickness);
    if (m.v.empty()) continue;
    const auto core = erode(m, thickness);
    for (int r = 0; r < m.height; ++r) {
      const int gr = r + m.row0;
      if (gr < 0 || gr >= grid.height) continue;
      for (int c = 0; c < m.width; ++c) {
        const int gc = c + m.col0;
        if (gc < 0 || gc >= grid.width) continue;
        if (m.at(r, c) && !core.at(r, c)) out(gr, gc) = 1;
      }
    }
  }
  return out;
}

FloatRaster rasterize_distance(std::span<const FieldPolygon> polys, const GridGeometry& grid,
                               RasterizeReport* report) {
  grid.validate();
  FloatRaster out(grid, 1, 0.0f);
  for (const auto& poly : polys) {
    if (skip_degenerate(poly, grid, report)) continue;
    const auto m = footprint(poly, grid, 1);
    if (m.v.empty()) continue;
    const auto sq = squared_edt(m);
    double max_sq = 0.0;
    for (std::size_t i = 0; i < sq.size(); ++i)
      if (m.v[i]) max_sq = std::max(max_sq, sq[i]);
    const double max_d = std::sqrt(max_sq);
    for (int r = 0; r < m.height; ++r) {
      const int gr = r + m.row0;
      if (gr < 0 || gr >= grid.height) continue;
      for (int c = 0; c < m.width; ++c) {
        const int gc = c + m.col0;
        if (gc < 0 || gc >= grid.width || !m.at(r, c)) continue;
        const double d = std::sqrt(sq[static_cast<std::size_t>(r) * m.width + c]) / max_d;
        out(gr, gc) = std::max(out(gr, gc), static_cast<float>(d));
      }
    }
  }
  return out;
}

ByteRaster dilate(const ByteRaster& in, int radius) {
  if (radius < 0) throw InvalidArgument("dilation radius must be >= 0");
  if (radius == 0) return in;
  const int h = in.height(), w = in.width();
  ByteRaster tmp(in.grid, 1, 0), out(in.grid, 1, 0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      std::uint8_t v = 0;
      for (int k = std::max(0, c - radius); k <= std::min(w - 1, c + radius) && !v; ++k) v = in(r, k);
      tmp(r, c) = v;
    }
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      std::uint8_t v = 0;
      for (int k = std::max(0, r - radius); k <= std::min(h - 1, r + radius) && !v; ++k) v = tmp(k, c);
      out(r, c) = v;
    }
  return out;
}

MaskResult build_mask(std::span<const FieldPolygon> polys, const GridGeometry& grid, int dilation) {
  auto extent = rasterize_extent(polys, grid);
  const auto boundary = rasterize_boundary(polys, grid);
  for (std::size_t i = 0; i < extent.data.size(); ++i) extent.data[i] |= boundary.data[i];
  MaskResult res;
  res.mask = dilate(extent, dilation);
  std::size_t on = 0;
  for (auto v : res.mask.data) on += v;
  res.coverage = static_cast<double>(on) / static_cast<double>(res.mask.data.size());
  res.unsupervisable = on == 0;
  return res;
}

LabelStack make_label_stack(std::span<const FieldPolygon> labeled, const GridGeometry& grid,
                            const LabelOptions& opts, RasterizeReport* report) {
  LabelStack s;
  s.extent = rasterize_extent(labeled, grid, report);
  s.boundary = rasterize_boundary(labeled, grid, opts.boundary_thickness);
  s.distance = rasterize_distance(labeled, grid);
  s.mask = build_mask(labeled, grid, opts.mask_dilation).mask;
  return s;
}

// ---------------------------------------------------------------------------
// Vectorization

namespace {

struct Vertex {
  int r, c;
  auto operator<=>(const Vertex&) const = default;
};

// Direction indices in map orientation: 0 east, 1 north, 2 west, 3 south.
constexpr int kDr[4] = {0, -1, 0, 1};
constexpr int kDc[4] = {1, 0, -1, 0};

struct Edge {
  Vertex from;
  int dir;
};

}  // namespace

std::vector<FieldPolygon> vectorize_instances(const IdRaster& instances, VectorizeReport* report) {
  const int h = instances.height(), w = instances.width();
  std::uint32_t max_id = 0;
  for (auto v : instances.data) max_id = std::max(max_id, v);

  // Directed edges per id with the region on the left (counter-clockwise in
  // map coordinates, where y grows upward).
  std::vector<std::vector<Edge>> edges(static_cast<std::size_t>(max_id) + 1);
  std::vector<std::size_t> pixel_count(static_cast<std::size_t>(max_id) + 1, 0);
  auto id_at = [&](int r, int c) -> std::uint32_t {
    return (r < 0 || c < 0 || r >= h || c >= w) ? 0u : instances(r, c);
  };
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const auto id = instances(r, c);
      if (!id) continue;
      ++pixel_count[id];
      auto& e = edges[id];
      if (id_at(r + 1, c) != id) e.push_back({{r + 1, c}, 0});
      if (id_at(r, c + 1) != id) e.push_back({{r + 1, c + 1}, 1});
      if (id_at(r - 1, c) != id) e.push_back({{r, c + 1}, 2});
      if (id_at(r, c - 1) != id) e.push_back({{r, c}, 3});
    }

  std::vector<FieldPolygon> out;
  for (std::uint32_t id = 1; id <= max_id; ++id) {
    if (pixel_count[id] == 0) {
      if (report) {
        report->skipped_ids.push_back(id);
        report->warnings.push_back("instance " + std::to_string(id) + " has no pixels; skipped");
      }
      continue;
    }
    std::map<Vertex, std::vector<std::size_t>> outgoing;
    const auto& es = edges[id];
    for (std::size_t i = 0; i < es.size(); ++i) outgoing[es[i].from].push_back(i);
    std::vector<bool> used(es.size(), false);

    std::vector<std::pair<double, Ring>> loops;
    for (std::size_t start = 0; start < es.size(); ++start) {
      if (used[start]) continue;
      std::vector<Vertex> verts;
      std::vector<int> dirs;
      std::size_t cur = start;
      while (!used[cur]) {
        used[cur] = true;
        verts.push_back(es[cur].from);
        dirs.push_back(es[cur].dir);
        const Vertex next{es[cur].from.r + kDr[es[cur].dir], es[cur].from.c + kDc[es[cur].dir]};
        // Prefer the leftmost turn so diagonal pinches separate 4-connected
        // pieces.
        std::size_t best = es.size();
        int best_rank = 99;
        for (auto cand : outgoing[next]) {
          if (used[cand] && cand != start) continue;
          const int turn = (es[cand].dir - es[cur].dir + 4) % 4;  // 1 left, 0 straight, 3 right
          const int rank = turn == 1 ? 0 : turn == 0 ? 1 : 2;
          if (rank < best_rank) {
            best_rank = rank;
            best = cand;
          }
        }
        if (best == es.size() || best == start) break;
        cur = best;
      }
      // Keep only corner vertices.
      Ring ring;
      const std::size_t n = verts.size();
      for (std::size_t i = 0; i < n; ++i) {
        const int prev_dir = dirs[(i + n - 1) % n];
        if (prev_dir != dirs[i]) ring.push_back(instances.grid.corner(verts[i].r, verts[i].c));
      }
      // Deterministic start: lowest-left corner first after rotation.
      auto first = std::min_element(ring.begin(), ring.end(), [](Point a, Point b) {
        return a.y != b.y ? a.y > b.y : a.x < b.x;
      });
      std::rotate(ring.begin(), first, ring.end());
      loops.emplace_back(signed_area(ring), std::move(ring));
    }

    FieldPolygon poly;
    poly.id = id;
    std::size_t outer_idx = loops.size();
    for (std::size_t i = 0; i < loops.size(); ++i)
      if (loops[i].first > 0 && (outer_idx == loops.size() || loops[i].first > loops[outer_idx].first)) outer_idx = i;
    std::size_t outers = 0;
    for (std::size_t i = 0; i < loops.size(); ++i) {
      if (loops[i].first > 0) ++outers;
      if (i == outer_idx)
        poly.ring = std::move(loops[i].second);
      else
        poly.holes.push_back(std::move(loops[i].second));
    }
    if (outers > 1 && report)
      report->warnings.push_back("instance " + std::to_string(id) + " is not 4-connected; extra parts stored as rings");
    out.push_back(std::move(poly));
  }
  return out;
}

// ---------------------------------------------------------------------------
// GeoJSON

namespace {

Json ring_to_json(const Ring& ring) {
  Json coords = Json::array();
  for (Point p : ring) coords.push_back({p.x, p.y});
  if (!ring.empty()) coords.push_back({ring.front().x, ring.front().y});
  return coords;
}

Ring ring_from_json(const Json& j) {
  Ring r;
  for (const auto& p : j) r.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  return open_ring(std::move(r));
}

}  // namespace

std::string to_geojson(std::span<const FieldPolygon> polys) {
  Json fc;
  fc["type"] = "FeatureCollection";
  fc["features"] = Json::array();
  for (const auto& p : polys) {
    Json f;
    f["type"] = "Feature";
    f["properties"]["id"] = p.id;
    if (!p.crs_tag.empty()) f["properties"]["crs_tag"] = p.crs_tag;
    Json rings = Json::array();
    rings.push_back(ring_to_json(p.ring));
    for (const auto& hole : p.holes) rings.push_back(ring_to_json(hole));
    f["geometry"]["type"] = "Polygon";
    f["geometry"]["coordinates"] = std::move(rings);
    fc["features"].push_back(std::move(f));
  }
  return fc.dump(1) + "\n";
}

std::vector<FieldPolygon> from_geojson(const std::string& text) {
  std::vector<FieldPolygon> out;
  try {
    const auto fc = Json::parse(text);
    if (fc.value("type", "") != "FeatureCollection") throw FormatError("GeoJSON root must be a FeatureCollection");
    for (const auto& f : fc.at("features")) {
      const auto& geom = f.at("geometry");
      if (geom.at("type").get<std::string>() != "Polygon")
        throw FormatError("only Polygon geometries are supported");
      FieldPolygon p;
      p.id = f.at("properties").at("id").get<std::int64_t>();
      p.crs_tag = f.at("properties").value("crs_tag", "");
      const auto& rings = geom.at("coordinates");
      if (rings.empty()) throw FormatError("polygon " + std::to_string(p.id) + " has no rings");
      p.ring = ring_from_json(rings.at(0));
      for (std::size_t i = 1; i < rings.size(); ++i) p.holes.push_back(ring_from_json(rings[i]));
      out.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed GeoJSON: ") + e.what());
  }
  return out;
}

void write_geojson(const std::filesystem::path& path, std::span<const FieldPolygon> polys) {
  write_text_file(path, to_geojson(polys));
}

std::vector<FieldPolygon> read_geojson(const std::filesystem::path& path) {
  return from_geojson(read_text_file(path));
}

}  // namespace fieldkit::geom
