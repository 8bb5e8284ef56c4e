#include "fieldkit/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_map>

namespace fieldkit::eval {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double median_of(std::vector<double> v) {
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double nan_mean(const std::vector<double>& v) {
  double s = 0;
  std::size_t n = 0;
  for (double x : v)
    if (!std::isnan(x)) {
      s += x;
      ++n;
    }
  return n ? s / static_cast<double>(n) : kNaN;
}
}  // namespace

ConfusionCounts confusion(std::span<const float> prediction, std::span<const std::uint8_t> label,
                          std::span<const std::uint8_t> mask, double threshold) {
  if (prediction.size() != label.size() || label.size() != mask.size())
    throw ShapeError("confusion: prediction, label and mask sizes differ");
  ConfusionCounts c;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    const bool p = prediction[i] >= threshold;
    const bool y = label[i] != 0;
    if (p && y) ++c.tp;
    else if (!p && !y) ++c.tn;
    else if (p) ++c.fp;
    else ++c.fn;
  }
  if (c.total() == 0) throw UnsupervisableError("confusion: mask selects no pixels");
  return c;
}

double overall_accuracy(const ConfusionCounts& c) {
  if (c.total() == 0) return kNaN;
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

double f1_score(const ConfusionCounts& c) {
  const double denom = static_cast<double>(c.tp) + 0.5 * static_cast<double>(c.fp + c.fn);
  if (denom == 0.0) return kNaN;
  return static_cast<double>(c.tp) / denom;
}

double mcc(const ConfusionCounts& c) {
  const double tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn);
  const double fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  const double a = (tp + fp) * (tp + fn);
  const double b = (tn + fp) * (tn + fn);
  if (a == 0.0 || b == 0.0) return kNaN;
  return (tp * tn - fp * fn) / (std::sqrt(a) * std::sqrt(b));
}

FieldMatch field_iou(std::span<const std::size_t> gt_pixels, const IdRaster& instances) {
  if (gt_pixels.empty()) throw InvalidArgument("field_iou: empty ground-truth field");
  std::map<std::uint32_t, std::size_t> overlap;
  for (auto i : gt_pixels) {
    if (i >= instances.data.size()) throw ShapeError("field_iou: pixel index outside instance map");
    if (auto id = instances.data[i]) ++overlap[id];
  }
  FieldMatch best;
  if (overlap.empty()) return best;
  std::map<std::uint32_t, std::size_t> inst_area;
  for (auto id : instances.data)
    if (overlap.count(id)) ++inst_area[id];
  std::size_t best_inter = 0;
  for (auto [id, inter] : overlap) {  // ascending id, so strict comparisons keep the smaller id
    const double iou = static_cast<double>(inter) / static_cast<double>(gt_pixels.size() + inst_area[id] - inter);
    if (inter > best_inter || (inter == best_inter && iou > best.iou)) {
      best_inter = inter;
      best.iou = iou;
      best.instance = id;
    }
  }
  return best;
}

std::vector<FieldIou> match_fields(const IdRaster& gt_ids, const IdRaster& instances,
                                   std::span<const std::uint32_t> evaluate, bool exclusive) {
  if (gt_ids.grid.height != instances.grid.height || gt_ids.grid.width != instances.grid.width)
    throw ShapeError("match_fields: ground truth and instances differ in shape");
  std::map<std::uint32_t, std::size_t> gt_area;
  std::unordered_map<std::uint32_t, std::size_t> inst_area;
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> inter;
  for (std::size_t i = 0; i < gt_ids.data.size(); ++i) {
    const auto g = gt_ids.data[i], p = instances.data[i];
    if (p) ++inst_area[p];
    if (!g) continue;
    ++gt_area[g];
    if (p) ++inter[{g, p}];
  }
  std::vector<std::uint32_t> wanted;
  if (evaluate.empty()) {
    for (auto& [g, a] : gt_area) wanted.push_back(g);
  } else {
    for (auto g : evaluate)
      if (gt_area.count(g)) wanted.push_back(g);
    std::sort(wanted.begin(), wanted.end());
    wanted.erase(std::unique(wanted.begin(), wanted.end()), wanted.end());
  }
  auto iou_of = [&](std::uint32_t g, std::uint32_t p, std::size_t n) {
    return static_cast<double>(n) / static_cast<double>(gt_area[g] + inst_area[p] - n);
  };

  std::vector<FieldIou> out;
  out.reserve(wanted.size());
  if (!exclusive) {
    for (auto g : wanted) {
      FieldIou f;
      f.field_id = g;
      f.area_px = gt_area[g];
      std::size_t best_n = 0;
      for (auto it = inter.lower_bound({g, 0}); it != inter.end() && it->first.first == g; ++it) {
        const double iou = iou_of(g, it->first.second, it->second);
        if (it->second > best_n || (it->second == best_n && iou > f.iou)) {
          best_n = it->second;
          f.iou = iou;
          f.instance = it->first.second;
        }
      }
      out.push_back(f);
    }
    return out;
  }

  struct Pair {
    double iou;
    std::uint32_t g, p;
  };
  std::vector<Pair> pairs;
  std::map<std::uint32_t, bool> want_set;
  for (auto g : wanted) want_set[g] = true;
  for (auto& [k, n] : inter)
    if (want_set.count(k.first)) pairs.push_back({iou_of(k.first, k.second, n), k.first, k.second});
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.iou != b.iou) return a.iou > b.iou;
    if (a.g != b.g) return a.g < b.g;
    return a.p < b.p;
  });
  std::map<std::uint32_t, FieldIou> result;
  for (auto g : wanted) result[g] = FieldIou{"", g, 0.0, gt_area[g], std::nullopt};
  std::map<std::uint32_t, bool> taken;
  for (const auto& pr : pairs) {
    auto& f = result[pr.g];
    if (f.instance || taken[pr.p]) continue;
    f.iou = pr.iou;
    f.instance = pr.p;
    taken[pr.p] = true;
  }
  for (auto g : wanted) out.push_back(result[g]);
  return out;
}

InstanceSummary aggregate_instances(std::span<const double> ious) {
  InstanceSummary s;
  std::vector<double> v(ious.begin(), ious.end());
  s.median_iou = median_of(v);
  for (int k = 0; k <= 100; k += 5) {
    if (v.empty()) {
      s.iou_k[k] = kNaN;
      continue;
    }
    const double thr = k / 100.0;
    const auto n = std::count_if(v.begin(), v.end(), [&](double x) { return x >= thr; });
    s.iou_k[k] = static_cast<double>(n) / static_cast<double>(v.size());
  }
  return s;
}

void Evaluator::add_image(const std::string& name, std::span<const float> extent_prob, const ByteRaster& extent_label,
                          const ByteRaster& mask, const IdRaster* gt_ids, const IdRaster* instances,
                          std::span<const std::uint32_t> evaluate_fields) {
  ImageReport img;
  img.image = name;
  img.counts = confusion(extent_prob, extent_label.data, mask.data);
  img.oa = overall_accuracy(img.counts);
  img.f1 = f1_score(img.counts);
  img.mcc = mcc(img.counts);
  pooled_ += img.counts;
  img.median_iou = kNaN;
  if (gt_ids && instances) {
    auto fields = match_fields(*gt_ids, *instances, evaluate_fields, exclusive_);
    std::vector<double> ious;
    for (auto& f : fields) {
      f.image = name;
      ious.push_back(f.iou);
      fields_.push_back(f);
    }
    img.n_fields = fields.size();
    img.median_iou = median_of(ious);
  }
  images_.push_back(std::move(img));
}

EvalReport Evaluator::report() const {
  EvalReport r;
  r.pooled = pooled_;
  r.oa = overall_accuracy(pooled_);
  r.f1 = f1_score(pooled_);
  r.mcc = mcc(pooled_);
  std::vector<double> oa, f1, m;
  for (const auto& img : images_) {
    oa.push_back(img.oa);
    f1.push_back(img.f1);
    m.push_back(img.mcc);
  }
  r.oa_image_mean = nan_mean(oa);
  r.f1_image_mean = nan_mean(f1);
  r.mcc_image_mean = nan_mean(m);
  r.per_field = fields_;
  std::vector<double> ious;
  for (const auto& f : fields_) ious.push_back(f.iou);
  r.instances = aggregate_instances(ious);
  r.per_image = images_;
  return r;
}

Json metric_json(double v) { return std::isnan(v) ? Json(nullptr) : Json(v); }

Json report_to_json(const EvalReport& r) {
  Json j;
  j["pixel"]["pooled"] = {{"tp", r.pooled.tp}, {"tn", r.pooled.tn}, {"fp", r.pooled.fp}, {"fn", r.pooled.fn}};
  j["pixel"]["oa"] = metric_json(r.oa);
  j["pixel"]["f1"] = metric_json(r.f1);
  j["pixel"]["mcc"] = metric_json(r.mcc);
  j["pixel"]["per_image_mean"] = {{"oa", metric_json(r.oa_image_mean)},
                                  {"f1", metric_json(r.f1_image_mean)},
                                  {"mcc", metric_json(r.mcc_image_mean)}};
  j["instance"]["n_fields"] = r.per_field.size();
  j["instance"]["median_iou"] = metric_json(r.instances.median_iou);
  Json curve = Json::object();
  for (auto [k, v] : r.instances.iou_k) curve[std::to_string(k)] = metric_json(v);
  j["instance"]["iou_k"] = curve;
  Json imgs = Json::array();
  for (const auto& img : r.per_image) {
    imgs.push_back({{"image", img.image},
                    {"oa", metric_json(img.oa)},
                    {"f1", metric_json(img.f1)},
                    {"mcc", metric_json(img.mcc)},
                    {"n_fields", img.n_fields},
                    {"median_iou", metric_json(img.median_iou)}});
  }
  j["per_image"] = imgs;
  return j;
}

std::string per_field_csv(const EvalReport& r) {
  std::ostringstream ss;
  ss << "image,field_id,area_px,iou,matched_instance\n";
  for (const auto& f : r.per_field) {
    ss << f.image << ',' << f.field_id << ',' << f.area_px << ',' << format_double(f.iou) << ',';
    if (f.instance) ss << *f.instance;
    ss << '\n';
  }
  return ss.str();
}

}  // namespace fieldkit::eval
