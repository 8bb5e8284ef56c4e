#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fieldkit/jsonio.hpp"
#include "fieldkit/raster.hpp"

namespace fieldkit::eval {

struct ConfusionCounts {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::uint64_t total() const { return tp + tn + fp + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Thresholds the prediction (>= threshold is positive) and counts only
/// pixels with mask = 1. Throws UnsupervisableError on an empty mask.
ConfusionCounts confusion(std::span<const float> prediction, std::span<const std::uint8_t> label,
                          std::span<const std::uint8_t> mask, double threshold = 0.5);

// Undefined metrics (zero denominators) come back as NaN; callers surface them
// as "undefined" rather than zero.
double overall_accuracy(const ConfusionCounts& c);
double f1_score(const ConfusionCounts& c);
double mcc(const ConfusionCounts& c);

struct FieldMatch {
  double iou = 0.0;
  std::optional<std::uint32_t> instance;
};

/// IoU of one ground-truth pixel set against the predicted instance with the
/// largest overlap (ties: larger IoU, then smaller id).
FieldMatch field_iou(std::span<const std::size_t> gt_pixels, const IdRaster& instances);

struct FieldIou {
  std::string image;
  std::int64_t field_id = 0;
  double iou = 0.0;
  std::size_t area_px = 0;
  std::optional<std::uint32_t> instance;
};

/// Per-field IoU for every positive id in `gt_ids` (ids restricted to
/// `evaluate` when non-empty). With `exclusive`, instances are assigned
/// greedily by descending IoU so each prediction matches at most one field.
std::vector<FieldIou> match_fields(const IdRaster& gt_ids, const IdRaster& instances,
                                   std::span<const std::uint32_t> evaluate = {}, bool exclusive = false);

struct InstanceSummary {
  double median_iou = 0.0;
  /// k in {0, 5, ..., 100} -> fraction of fields with IoU >= k/100.
  std::map<int, double> iou_k;
};

InstanceSummary aggregate_instances(std::span<const double> ious);

struct ImageReport {
  std::string image;
  ConfusionCounts counts;
  double oa = 0, f1 = 0, mcc = 0;
  std::size_t n_fields = 0;
  double median_iou = 0;
};

struct EvalReport {
  ConfusionCounts pooled;
  double oa = 0, f1 = 0, mcc = 0;
  // Mean of per-image metrics over images where they are defined.
  double oa_image_mean = 0, f1_image_mean = 0, mcc_image_mean = 0;
  std::vector<FieldIou> per_field;
  InstanceSummary instances;
  std::vector<ImageReport> per_image;
};

/// Accumulates images in call order and produces a pooled report.
class Evaluator {
 public:
  /// `exclusive` switches instance matching to one field per prediction.
  explicit Evaluator(bool exclusive = false) : exclusive_(exclusive) {}
  /// `evaluate_fields` restricts instance metrics to those gt ids (empty = all).
  void add_image(const std::string& name, std::span<const float> extent_prob, const ByteRaster& extent_label,
                 const ByteRaster& mask, const IdRaster* gt_ids = nullptr, const IdRaster* instances = nullptr,
                 std::span<const std::uint32_t> evaluate_fields = {});
  EvalReport report() const;

 private:
  std::vector<ImageReport> images_;
  std::vector<FieldIou> fields_;
  ConfusionCounts pooled_;
  bool exclusive_ = false;
};

Json report_to_json(const EvalReport& r);
/// Per-field table: image,field_id,area_px,iou,matched_instance.
std::string per_field_csv(const EvalReport& r);

/// JSON number, or null when NaN.
Json metric_json(double v);

}  // namespace fieldkit::eval
