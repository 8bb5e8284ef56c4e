#include "fieldkit/synthland.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace fieldkit::synth {

namespace {

constexpr int kBands = 3;
constexpr int kCropTypes = 6;
constexpr int kCanvasPad = 8;

struct Seed {
  double x, y;   // pixel coordinates (column, row) of the site
  double weight; // power-diagram weight in px^2
  double radius;
};

// ---------------------------------------------------------------------------
// Noise fields

/// Value noise with lattice spacing `wavelength` and smoothstep interpolation,
/// roughly zero-mean with values in [-1, 1].
std::vector<float> value_noise(int h, int w, double wavelength, Rng& rng) {
  const int gh = static_cast<int>(std::ceil(h / wavelength)) + 2;
  const int gw = static_cast<int>(std::ceil(w / wavelength)) + 2;
  std::vector<double> lattice(static_cast<std::size_t>(gh) * gw);
  for (auto& v : lattice) v = rng.uniform(-1.0, 1.0);
  auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
  std::vector<float> out(static_cast<std::size_t>(h) * w);
  for (int r = 0; r < h; ++r) {
    const double fy = (r + 0.5) / wavelength;
    const int y0 = static_cast<int>(fy);
    const double ty = smooth(fy - y0);
    for (int c = 0; c < w; ++c) {
      const double fx = (c + 0.5) / wavelength;
      const int x0 = static_cast<int>(fx);
      const double tx = smooth(fx - x0);
      auto L = [&](int yy, int xx) { return lattice[static_cast<std::size_t>(yy) * gw + xx]; };
      const double top = L(y0, x0) * (1 - tx) + L(y0, x0 + 1) * tx;
      const double bot = L(y0 + 1, x0) * (1 - tx) + L(y0 + 1, x0 + 1) * tx;
      out[static_cast<std::size_t>(r) * w + c] = static_cast<float>(top * (1 - ty) + bot * ty);
    }
  }
  return out;
}

/// Equal-amplitude octaves from 2 px to 32 px wavelength: statistically close
/// to self-similar, so block-mean downsampling leaves its look unchanged.
std::vector<float> fractal_noise(int h, int w, Rng& rng) {
  std::vector<float> acc(static_cast<std::size_t>(h) * w, 0.0f);
  int octaves = 0;
  for (double wl = 2.0; wl <= 32.0; wl *= 2.0, ++octaves) {
    const auto layer = value_noise(h, w, wl, rng);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += layer[i];
  }
  // A single octave has standard deviation ~0.4; rescale to ~1.
  const float scale = 1.0f / (0.4f * std::sqrt(static_cast<float>(octaves)));
  for (auto& v : acc) v *= scale;
  return acc;
}

void gaussian_blur(std::vector<float>& img, int h, int w, double sigma) {
  if (sigma <= 0.0) return;
  const int rad = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * rad + 1));
  double sum = 0.0;
  for (int i = -rad; i <= rad; ++i) sum += k[static_cast<std::size_t>(i + rad)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  std::vector<float> tmp(img.size());
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int i = -rad; i <= rad; ++i) {
        const int cc = std::clamp(c + i, 0, w - 1);
        acc += k[static_cast<std::size_t>(i + rad)] * img[static_cast<std::size_t>(r) * w + cc];
      }
      tmp[static_cast<std::size_t>(r) * w + c] = static_cast<float>(acc);
    }
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int i = -rad; i <= rad; ++i) {
        const int rr = std::clamp(r + i, 0, h - 1);
        acc += k[static_cast<std::size_t>(i + rad)] * tmp[static_cast<std::size_t>(rr) * w + c];
      }
      img[static_cast<std::size_t>(r) * w + c] = static_cast<float>(acc);
    }
}

// ---------------------------------------------------------------------------
// Tessellation

/// Buckets seeds on a square grid for nearest-site queries.
class SeedIndex {
 public:
  SeedIndex(const std::vector<Seed>& seeds, double x0, double y0, double x1, double y1, double cell)
      : seeds_(seeds), x0_(x0), y0_(y0), cell_(cell) {
    nx_ = std::max(1, static_cast<int>(std::ceil((x1 - x0) / cell)));
    ny_ = std::max(1, static_cast<int>(std::ceil((y1 - y0) / cell)));
    buckets_.assign(static_cast<std::size_t>(nx_) * ny_, {});
    for (std::size_t i = 0; i < seeds.size(); ++i) buckets_[bucket_of(seeds[i].x, seeds[i].y)].push_back(i);
    for (const auto& s : seeds) max_weight_ = std::max(max_weight_, s.weight);
  }

  /// Site minimizing |p - s|^2 - weight; ties go to the lower index.
  std::size_t nearest(double x, double y) const {
    const int bx = std::clamp(static_cast<int>((x - x0_) / cell_), 0, nx_ - 1);
    const int by = std::clamp(static_cast<int>((y - y0_) / cell_), 0, ny_ - 1);
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_i = std::numeric_limits<std::size_t>::max();
    for (int ring = 0; ring <= std::max(nx_, ny_); ++ring) {
      // Any site in ring k is at least (k - 1) * cell away.
      if (ring >= 2) {
        const double reach = (ring - 1) * cell_;
        if (reach * reach - max_weight_ > best) break;
      }
      for (int j = by - ring; j <= by + ring; ++j)
        for (int i = bx - ring; i <= bx + ring; ++i) {
          if (std::max(std::abs(i - bx), std::abs(j - by)) != ring) continue;
          if (i < 0 || j < 0 || i >= nx_ || j >= ny_) continue;
          for (auto s : buckets_[static_cast<std::size_t>(j) * nx_ + i]) {
            const double dx = x - seeds_[s].x, dy = y - seeds_[s].y;
            const double d = dx * dx + dy * dy - seeds_[s].weight;
            if (d < best || (d == best && s < best_i)) {
              best = d;
              best_i = s;
            }
          }
        }
    }
    return best_i;
  }

 private:
  std::size_t bucket_of(double x, double y) const {
    const int bx = std::clamp(static_cast<int>((x - x0_) / cell_), 0, nx_ - 1);
    const int by = std::clamp(static_cast<int>((y - y0_) / cell_), 0, ny_ - 1);
    return static_cast<std::size_t>(by) * nx_ + bx;
  }

  const std::vector<Seed>& seeds_;
  double x0_, y0_, cell_;
  int nx_ = 1, ny_ = 1;
  double max_weight_ = 0.0;
  std::vector<std::vector<std::size_t>> buckets_;
};

/// Variable-radius dart throwing over the padded domain.
std::vector<Seed> throw_darts(int h, int w, double median_px, double sigma, Rng& rng) {
  const double r_med = std::sqrt(median_px / std::numbers::pi);
  const double pad = 2.0 * r_med;
  const double x0 = -pad, y0 = -pad, x1 = w + pad, y1 = h + pad;
  const double domain = (x1 - x0) * (y1 - y0);
  const auto expected = static_cast<std::size_t>(std::ceil(domain / median_px));
  const std::size_t attempts = 30 * expected + 100;

  std::vector<Seed> seeds;
  std::vector<std::vector<std::size_t>> buckets;
  const double cell = std::max(2.0, 2.0 * r_med);
  const int nx = static_cast<int>(std::ceil((x1 - x0) / cell)), ny = static_cast<int>(std::ceil((y1 - y0) / cell));
  buckets.assign(static_cast<std::size_t>(nx) * ny, {});
  double r_max = 0.0;
  for (std::size_t a = 0; a < attempts; ++a) {
    const double x = rng.uniform(x0, x1), y = rng.uniform(y0, y1);
    const double area = median_px * std::exp(sigma * rng.normal());
    const double r = std::sqrt(area / std::numbers::pi);
    // Packing factor 0.9 leaves room for Lloyd relaxation.
    const double reach = 0.9 * (r + r_max);
    const int i0 = std::max(0, static_cast<int>((x - reach - x0) / cell));
    const int i1 = std::min(nx - 1, static_cast<int>((x + reach - x0) / cell));
    const int j0 = std::max(0, static_cast<int>((y - reach - y0) / cell));
    const int j1 = std::min(ny - 1, static_cast<int>((y + reach - y0) / cell));
    bool ok = true;
    for (int j = j0; j <= j1 && ok; ++j)
      for (int i = i0; i <= i1 && ok; ++i)
        for (auto s : buckets[static_cast<std::size_t>(j) * nx + i]) {
          const double dx = x - seeds[s].x, dy = y - seeds[s].y;
          const double need = 0.9 * (r + seeds[s].radius);
          if (dx * dx + dy * dy < need * need) {
            ok = false;
            break;
          }
        }
    if (!ok) continue;
    const int bx = std::clamp(static_cast<int>((x - x0) / cell), 0, nx - 1);
    const int by = std::clamp(static_cast<int>((y - y0) / cell), 0, ny - 1);
    buckets[static_cast<std::size_t>(by) * nx + bx].push_back(seeds.size());
    seeds.push_back({x, y, 0.5 * r * r, r});
    r_max = std::max(r_max, r);
  }
  return seeds;
}

std::vector<std::uint32_t> assign_cells(const std::vector<Seed>& seeds, int h, int w, double median_px) {
  const double r_med = std::sqrt(median_px / std::numbers::pi);
  const double pad = 2.0 * r_med;
  SeedIndex index(seeds, -pad, -pad, w + pad, h + pad, std::max(2.0, 2.0 * r_med));
  std::vector<std::uint32_t> lab(static_cast<std::size_t>(h) * w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) lab[static_cast<std::size_t>(r) * w + c] = static_cast<std::uint32_t>(index.nearest(c + 0.5, r + 0.5));
  return lab;
}

void lloyd_step(std::vector<Seed>& seeds, const std::vector<std::uint32_t>& lab, int h, int w) {
  std::vector<double> sx(seeds.size(), 0.0), sy(seeds.size(), 0.0), n(seeds.size(), 0.0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const auto s = lab[static_cast<std::size_t>(r) * w + c];
      sx[s] += c + 0.5;
      sy[s] += r + 0.5;
      n[s] += 1.0;
    }
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    // Cells clipped by the image border keep their site so they do not drift
    // inward and crowd the interior.
    if (n[i] == 0.0) continue;
    const double cx = sx[i] / n[i], cy = sy[i] / n[i];
    const bool touches_border = seeds[i].x - seeds[i].radius < 0 || seeds[i].y - seeds[i].radius < 0 ||
                                seeds[i].x + seeds[i].radius > w || seeds[i].y + seeds[i].radius > h;
    if (touches_border) continue;
    seeds[i].x = cx;
    seeds[i].y = cy;
  }
}

/// Keeps the largest 4-connected piece of each label and hands stray pieces to
/// the most common neighboring label.
void enforce_connectivity(std::vector<std::uint32_t>& lab, int h, int w) {
  for (int pass = 0; pass < 8; ++pass) {
    std::vector<int> comp(lab.size(), -1);
    std::vector<std::size_t> comp_size;
    std::vector<std::uint32_t> comp_label;
    std::vector<std::size_t> stack;
    for (std::size_t s = 0; s < lab.size(); ++s) {
      if (comp[s] >= 0) continue;
      const int id = static_cast<int>(comp_size.size());
      comp_size.push_back(0);
      comp_label.push_back(lab[s]);
      stack.push_back(s);
      comp[s] = id;
      while (!stack.empty()) {
        const auto p = stack.back();
        stack.pop_back();
        ++comp_size[static_cast<std::size_t>(id)];
        const int r = static_cast<int>(p / w), c = static_cast<int>(p % w);
        const int nb[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
        for (auto& k : nb) {
          if (k[0] < 0 || k[1] < 0 || k[0] >= h || k[1] >= w) continue;
          const auto q = static_cast<std::size_t>(k[0]) * w + k[1];
          if (comp[q] < 0 && lab[q] == lab[p]) {
            comp[q] = id;
            stack.push_back(q);
          }
        }
      }
    }
    std::vector<int> keep_comp(*std::max_element(lab.begin(), lab.end()) + 1, -1);
    for (std::size_t i = 0; i < comp_size.size(); ++i) {
      auto& k = keep_comp[comp_label[i]];
      if (k < 0 || comp_size[i] > comp_size[static_cast<std::size_t>(k)]) k = static_cast<int>(i);
    }
    bool changed = false;
    for (std::size_t p = 0; p < lab.size(); ++p) {
      if (keep_comp[lab[p]] == comp[p]) continue;
      const int r = static_cast<int>(p / w), c = static_cast<int>(p % w);
      const int nb[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      std::uint32_t best = lab[p];
      int best_n = 0;
      for (auto& k : nb) {
        if (k[0] < 0 || k[1] < 0 || k[0] >= h || k[1] >= w) continue;
        const auto q = static_cast<std::size_t>(k[0]) * w + k[1];
        if (lab[q] == lab[p]) continue;
        int n = 0;
        for (auto& k2 : nb) {
          if (k2[0] < 0 || k2[1] < 0 || k2[0] >= h || k2[1] >= w) continue;
          n += lab[static_cast<std::size_t>(k2[0]) * w + k2[1]] == lab[q];
        }
        if (n > best_n || (n == best_n && lab[q] < best)) {
          best_n = n;
          best = lab[q];
        }
      }
      if (best != lab[p]) {
        lab[p] = best;
        changed = true;
      }
    }
    if (!changed) return;
  }
}

double median_interior_area(const std::vector<std::uint32_t>& lab, int h, int w, std::size_t n_seeds) {
  std::vector<std::size_t> area(n_seeds, 0);
  std::vector<bool> border(n_seeds, false);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const auto s = lab[static_cast<std::size_t>(r) * w + c];
      ++area[s];
      if (r == 0 || c == 0 || r == h - 1 || c == w - 1) border[s] = true;
    }
  std::vector<double> v;
  for (std::size_t i = 0; i < n_seeds; ++i)
    if (area[i] && !border[i]) v.push_back(static_cast<double>(area[i]));
  if (v.empty())
    for (std::size_t i = 0; i < n_seeds; ++i)
      if (area[i]) v.push_back(static_cast<double>(area[i]));
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<std::uint32_t> tessellate(const LandscapeSpec& spec, std::size_t* n_cells) {
  const int h = spec.height, w = spec.width;
  const double target = spec.target_median_px();
  double scale = 1.0;
  std::vector<std::uint32_t> best_lab;
  std::size_t best_n = 0;
  double best_err = std::numeric_limits<double>::infinity();
  // Rejection-adjust the seed density until the realized median matches.
  for (int iter = 0; iter < 6; ++iter) {
    Rng rng(derive_seed(spec.seed, "tessellation"));
    auto seeds = throw_darts(h, w, target * scale, spec.size_sigma, rng);
    auto lab = assign_cells(seeds, h, w, target * scale);
    for (int k = 0; k < 2; ++k) {
      lloyd_step(seeds, lab, h, w);
      lab = assign_cells(seeds, h, w, target * scale);
    }
    const double med = median_interior_area(lab, h, w, seeds.size());
    const double err = std::abs(std::log(med / target));
    if (err < best_err) {
      best_err = err;
      best_lab = lab;
      best_n = seeds.size();
    }
    if (err < 0.03) break;
    scale *= std::clamp(target / med, 0.5, 2.0);
  }
  enforce_connectivity(best_lab, h, w);
  *n_cells = best_n;
  return best_lab;
}

// ---------------------------------------------------------------------------
// Rendering

struct FieldLook {
  // Deviation from the seasonal base, unit variance per band.
  std::vector<std::array<double, kBands>> per_season;
};

std::vector<FieldLook> draw_field_looks(const LandscapeSpec& spec, std::size_t n_fields) {
  Rng rng(derive_seed(spec.seed, "field_looks"));
  std::array<std::array<double, kBands>, kCropTypes> types;
  for (auto& t : types)
    for (auto& v : t) v = rng.normal();
  std::vector<FieldLook> looks(n_fields);
  for (auto& look : looks) {
    const auto type = rng.below(kCropTypes);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    std::array<double, kBands> own;
    for (auto& v : own) v = rng.normal();
    look.per_season.resize(static_cast<std::size_t>(spec.n_seasons));
    for (int s = 0; s < spec.n_seasons; ++s) {
      // Phenology: the crop-type signature swings with a per-field phase, so
      // two fields can match in one season and differ in another.
      const double swing = std::cos(2.0 * std::numbers::pi * s / spec.n_seasons + phase);
      for (int b = 0; b < kBands; ++b)
        look.per_season[static_cast<std::size_t>(s)][static_cast<std::size_t>(b)] =
            0.8 * types[type][static_cast<std::size_t>(b)] * swing +
            0.6 * own[static_cast<std::size_t>(b)] + 0.57 * rng.normal();
    }
  }
  return looks;
}

std::array<double, kBands> crop_base(int season, int n_seasons) {
  const double t = std::sin(2.0 * std::numbers::pi * season / std::max(1, n_seasons));
  return {0.30 + 0.04 * t, 0.36 - 0.04 * t, 0.24 + 0.02 * t};
}

std::array<double, kBands> noncrop_base(int season, int n_seasons) {
  const double t = std::sin(2.0 * std::numbers::pi * season / std::max(1, n_seasons));
  return {0.27 + 0.01 * t, 0.33 - 0.01 * t, 0.23};
}

std::vector<FloatRaster> render(const LandscapeSpec& spec, const IdRaster& ids, std::size_t n_fields) {
  const int h = spec.height, w = spec.width;
  const auto looks = draw_field_looks(spec, n_fields);
  Rng tex_rng(derive_seed(spec.seed, "noncrop_texture"));
  const auto shared = fractal_noise(h, w, tex_rng);
  std::array<std::vector<float>, kBands> own;
  for (auto& o : own) o = fractal_noise(h, w, tex_rng);

  std::vector<FloatRaster> seasons;
  for (int s = 0; s < spec.n_seasons; ++s) {
    FloatRaster img(ids.grid, kBands, 0.0f);
    img.band_names = {"red", "green", "blue"};
    const auto cb = crop_base(s, spec.n_seasons);
    const auto nb = noncrop_base(s, spec.n_seasons);
    Rng noise_rng(derive_seed(spec.seed, "sensor_noise_" + std::to_string(s)));
    for (int b = 0; b < kBands; ++b) {
      auto plane = img.plane(b);
      std::vector<float> buf(plane.size());
      for (std::size_t i = 0; i < buf.size(); ++i) {
        const auto id = ids.data[i];
        if (id) {
          const auto& dev = looks[id - 1].per_season[static_cast<std::size_t>(s)];
          buf[i] = static_cast<float>(cb[static_cast<std::size_t>(b)] + spec.contrast * dev[static_cast<std::size_t>(b)]);
        } else {
          const double tex = 0.7 * shared[i] + 0.3 * own[static_cast<std::size_t>(b)][i];
          buf[i] = static_cast<float>(nb[static_cast<std::size_t>(b)] + 0.10 * tex);
        }
      }
      gaussian_blur(buf, h, w, spec.blur_sigma);
      for (std::size_t i = 0; i < buf.size(); ++i) {
        const double v = buf[i] + spec.noise_sigma * noise_rng.normal();
        plane[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
    seasons.push_back(std::move(img));
  }
  return seasons;
}

}  // namespace

void LandscapeSpec::validate() const {
  if (height < 8 || width < 8) throw InvalidArgument("landscape extent must be at least 8x8 pixels");
  if (!(pixel_size > 0.0)) throw InvalidArgument("pixel_size must be positive");
  if (field_density < 0.0) throw InvalidArgument("field_density must be >= 0");
  if (!(size_sigma >= 0.0) || size_sigma > 3.0) throw InvalidArgument("size_sigma must be in [0, 3]");
  if (!std::isfinite(size_mu)) throw InvalidArgument("size_mu must be finite");
  if (!(crop_fraction >= 0.0 && crop_fraction <= 1.0)) throw InvalidArgument("crop_fraction must be in [0, 1]");
  if (n_seasons < 1) throw InvalidArgument("n_seasons must be >= 1");
  if (!(contrast >= 0.0 && contrast <= 1.0)) throw InvalidArgument("contrast must be in [0, 1]");
  if (!(noise_sigma >= 0.0)) throw InvalidArgument("noise_sigma must be >= 0");
  if (!(blur_sigma >= 0.0)) throw InvalidArgument("blur_sigma must be >= 0");
  if (target_median_px() < 4.0) throw InvalidArgument("fields unresolvable at this pixel size");
}

double LandscapeSpec::target_median_px() const {
  double mu = size_mu;
  if (field_density > 0.0) mu = std::log(1e6 / field_density) - 0.5 * size_sigma * size_sigma;
  return std::exp(mu) / (pixel_size * pixel_size);
}

Json spec_to_json(const LandscapeSpec& s) {
  Json j;
  j["seed"] = s.seed;
  j["height"] = s.height;
  j["width"] = s.width;
  j["pixel_size"] = s.pixel_size;
  j["field_density"] = s.field_density;
  j["size_mu"] = s.size_mu;
  j["size_sigma"] = s.size_sigma;
  j["crop_fraction"] = s.crop_fraction;
  j["n_seasons"] = s.n_seasons;
  j["contrast"] = s.contrast;
  j["noise_sigma"] = s.noise_sigma;
  j["blur_sigma"] = s.blur_sigma;
  return j;
}

LandscapeSpec spec_from_json(const Json& j) {
  LandscapeSpec s;
  if (j.contains("preset")) s = domain_preset(j.at("preset").get<std::string>());
  try {
    s.seed = j.value("seed", s.seed);
    s.height = j.value("height", s.height);
    s.width = j.value("width", s.width);
    s.pixel_size = j.value("pixel_size", s.pixel_size);
    s.field_density = j.value("field_density", s.field_density);
    s.size_mu = j.value("size_mu", s.size_mu);
    s.size_sigma = j.value("size_sigma", s.size_sigma);
    s.crop_fraction = j.value("crop_fraction", s.crop_fraction);
    s.n_seasons = j.value("n_seasons", s.n_seasons);
    s.contrast = j.value("contrast", s.contrast);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.blur_sigma = j.value("blur_sigma", s.blur_sigma);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad landscape spec: ") + e.what());
  }
  return s;
}

SyntheticScene generate_landscape(const LandscapeSpec& spec) {
  spec.validate();
  const int h = spec.height, w = spec.width;
  const GridGeometry grid{h, w, spec.pixel_size, Point{0.0, h * spec.pixel_size}};

  // The layout is built on a padded canvas so fields cut by the tile edge keep
  // their true outline beyond it; labels then never show a tile-edge boundary.
  LandscapeSpec canvas = spec;
  canvas.height = h + 2 * kCanvasPad;
  canvas.width = w + 2 * kCanvasPad;
  const int ch = canvas.height, cw = canvas.width;
  std::size_t n_cells = 0;
  const auto cells = tessellate(canvas, &n_cells);

  // Non-crop: whole cells ranked by a smooth noise field at their centroid.
  std::vector<double> cx(n_cells, 0.0), cy(n_cells, 0.0);
  std::vector<std::size_t> area(n_cells, 0), tile_area(n_cells, 0);
  for (int r = 0; r < ch; ++r)
    for (int c = 0; c < cw; ++c) {
      const auto s = cells[static_cast<std::size_t>(r) * cw + c];
      cx[s] += c;
      cy[s] += r;
      ++area[s];
      if (r >= kCanvasPad && c >= kCanvasPad && r < kCanvasPad + h && c < kCanvasPad + w) ++tile_area[s];
    }
  Rng crop_rng(derive_seed(spec.seed, "noncrop_layout"));
  const auto field = value_noise(ch, cw, std::max(h, w) / 2.5, crop_rng);
  std::vector<std::size_t> present;
  for (std::size_t s = 0; s < n_cells; ++s)
    if (tile_area[s]) present.push_back(s);
  auto level = [&](std::size_t s) {
    const int r = static_cast<int>(cy[s] / static_cast<double>(area[s]));
    const int c = static_cast<int>(cx[s] / static_cast<double>(area[s]));
    return field[static_cast<std::size_t>(r) * cw + c];
  };
  std::stable_sort(present.begin(), present.end(), [&](std::size_t a, std::size_t b) { return level(a) < level(b); });
  std::vector<bool> noncrop(n_cells, true);
  for (auto s : present) noncrop[s] = false;
  const double noncrop_goal = (1.0 - spec.crop_fraction) * static_cast<double>(grid.size());
  double noncrop_area = 0.0;
  for (auto s : present) {
    if (spec.crop_fraction >= 1.0) break;
    if (spec.crop_fraction > 0.0 && noncrop_area + 0.5 * static_cast<double>(tile_area[s]) > noncrop_goal) break;
    noncrop[s] = true;
    noncrop_area += static_cast<double>(tile_area[s]);
  }

  // Field ids in tile raster order; the padded id raster carries the same ids.
  std::vector<std::uint32_t> remap(n_cells, 0);
  std::uint32_t next = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const auto s = cells[static_cast<std::size_t>(r + kCanvasPad) * cw + (c + kCanvasPad)];
      if (!noncrop[s] && !remap[s]) remap[s] = ++next;
    }

  const GridGeometry canvas_grid{ch, cw, spec.pixel_size,
                                 Point{-kCanvasPad * spec.pixel_size, (h + kCanvasPad) * spec.pixel_size}};
  IdRaster canvas_ids(canvas_grid, 1, 0u);
  for (std::size_t i = 0; i < cells.size(); ++i) canvas_ids.data[i] = remap[cells[i]];

  SyntheticScene scene;
  scene.spec = spec;
  scene.field_ids = IdRaster(grid, 1, 0u);
  scene.noncrop_mask = ByteRaster(grid, 1, 0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const auto id = canvas_ids(r + kCanvasPad, c + kCanvasPad);
      scene.field_ids(r, c) = id;
      scene.noncrop_mask(r, c) = id == 0;
    }
  scene.polygons = geom::vectorize_instances(canvas_ids);
  for (auto& p : scene.polygons) p.crs_tag = "synthetic-m";
  scene.imagery = render(spec, scene.field_ids, next);
  return scene;
}

LandscapeSpec domain_preset(const std::string& name) {
  LandscapeSpec s;
  if (name == "target-small") {
    s.size_mu = std::log(2400.0);  // median 0.24 ha
    s.size_sigma = 0.5;
  } else if (name == "source-large") {
    s.size_mu = std::log(13000.0);  // median 1.3 ha
    s.size_sigma = 0.6;
  } else {
    std::string valid;
    for (const auto& n : preset_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw InvalidArgument("unknown domain preset '" + name + "' (valid: " + valid + ")");
  }
  return s;
}

std::vector<std::string> preset_names() { return {"source-large", "target-small"}; }

SyntheticScene render_low_contrast_variant(const SyntheticScene& scene, double contrast_drop) {
  if (!(contrast_drop >= 0.0 && contrast_drop <= 1.0)) throw InvalidArgument("contrast_drop must be in [0, 1]");
  SyntheticScene out = scene;
  out.spec.contrast = scene.spec.contrast * (1.0 - contrast_drop);
  out.imagery = render(out.spec, out.field_ids, out.polygons.size());
  return out;
}

std::vector<std::size_t> field_areas_px(const SyntheticScene& scene) {
  std::vector<std::size_t> a(scene.polygons.size(), 0);
  for (auto id : scene.field_ids.data)
    if (id) ++a[id - 1];
  return a;
}

void save_scene(const SyntheticScene& scene, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_json_file(dir / "spec.json", spec_to_json(scene.spec));
  geom::write_geojson(dir / "polygons.geojson", scene.polygons);
  write_raster(scene.noncrop_mask, dir / "noncrop");
  write_raster(scene.field_ids, dir / "field_ids");
  for (std::size_t s = 0; s < scene.imagery.size(); ++s) write_raster(scene.imagery[s], dir / ("season_" + std::to_string(s)));
}

SyntheticScene load_scene(const std::filesystem::path& dir) {
  SyntheticScene scene;
  scene.spec = spec_from_json(read_json_file(dir / "spec.json"));
  scene.polygons = geom::read_geojson(dir / "polygons.geojson");
  scene.noncrop_mask = read_raster<std::uint8_t>(dir / "noncrop");
  scene.field_ids = read_raster<std::uint32_t>(dir / "field_ids");
  for (int s = 0; s < scene.spec.n_seasons; ++s)
    scene.imagery.push_back(read_raster<float>(dir / ("season_" + std::to_string(s))));
  return scene;
}

}  // namespace fieldkit::synth
