#include "fieldkit/loss.hpp"

#include <cmath>

namespace fieldkit::train {

void TanimotoConfig::validate() const {
  if (d < 0) throw InvalidArgument("Tanimoto depth d must be >= 0");
  if (d > 30) throw InvalidArgument("Tanimoto depth d must be <= 30");
  if (!(epsilon > 0.0)) throw InvalidArgument("Tanimoto epsilon must be positive");
}

double tanimoto_from_sums(const TanimotoSums& s, int d, double epsilon) {
  const double denom = std::ldexp(s.sq, d) + s.dot;
  if (denom <= epsilon) return 1.0;
  return s.dot / denom;
}

std::array<double, 2> tanimoto_partials(const TanimotoSums& s, int d, double epsilon) {
  const double scale = std::ldexp(1.0, d);
  const double denom = scale * s.sq + s.dot;
  if (denom <= epsilon) return {0.0, 0.0};
  const double inv2 = 1.0 / (denom * denom);
  return {scale * s.sq * inv2, -scale * s.dot * inv2};
}

namespace {

TanimotoSums sums(std::span<const double> y, std::span<const double> p) {
  if (y.size() != p.size()) throw ShapeError("label and prediction differ in size");
  TanimotoSums s;
  for (std::size_t i = 0; i < y.size(); ++i) {
    s.dot += y[i] * p[i];
    s.sq += (y[i] - p[i]) * (y[i] - p[i]);
  }
  return s;
}

}  // namespace

double tanimoto(std::span<const double> y, std::span<const double> p, int d, double epsilon) {
  return tanimoto_from_sums(sums(y, p), d, epsilon);
}

double tanimoto_with_complement(std::span<const double> y, std::span<const double> p, int d, double epsilon) {
  const auto s = sums(y, p);
  TanimotoSums c{0.0, s.sq};
  for (std::size_t i = 0; i < y.size(); ++i) c.dot += (1.0 - y[i]) * (1.0 - p[i]);
  return 0.5 * (tanimoto_from_sums(s, d, epsilon) + tanimoto_from_sums(c, d, epsilon));
}

namespace {

template <typename T, typename L>
double task_loss(std::span<const L> label, std::span<const T> pred, std::span<const std::uint8_t> mask,
                 const TanimotoConfig& cfg, double weight, std::span<T> grad) {
  // The positive and complement terms share the squared difference.
  TanimotoSums pos, neg;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    const double y = static_cast<double>(label[i]), p = static_cast<double>(pred[i]);
    pos.dot += y * p;
    neg.dot += (1.0 - y) * (1.0 - p);
    pos.sq += (y - p) * (y - p);
  }
  neg.sq = pos.sq;

  const int lo = cfg.average_over_depths ? 0 : cfg.d;
  const double n_depths = cfg.d - lo + 1;
  double ft = 0.0, d_pos_dot = 0.0, d_neg_dot = 0.0, d_sq = 0.0;
  for (int i = lo; i <= cfg.d; ++i) {
    ft += 0.5 * (tanimoto_from_sums(pos, i, cfg.epsilon) + tanimoto_from_sums(neg, i, cfg.epsilon));
    const auto a = tanimoto_partials(pos, i, cfg.epsilon);
    const auto b = tanimoto_partials(neg, i, cfg.epsilon);
    d_pos_dot += 0.5 * a[0];
    d_neg_dot += 0.5 * b[0];
    d_sq += 0.5 * (a[1] + b[1]);
  }
  ft /= n_depths;

  if (!grad.empty()) {
    // d loss / d p = -weight * d FT / d p.
    const double k = -weight / n_depths;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask[i]) {
        grad[i] = T(0);
        continue;
      }
      const double y = static_cast<double>(label[i]), p = static_cast<double>(pred[i]);
      const double g = d_pos_dot * y - d_neg_dot * (1.0 - y) - 2.0 * d_sq * (y - p);
      grad[i] = static_cast<T>(k * g);
    }
  }
  return weight * (1.0 - ft);
}

}  // namespace

template <typename T>
double masked_loss(const PredictionMaps<T>& pred, const geom::LabelStack& labels, const TanimotoConfig& cfg,
                   const TaskWeights& weights, const PredictionGrads<T>* grad) {
  cfg.validate();
  const std::span<const std::uint8_t> mask = labels.mask.data;
  const std::size_t n = mask.size();
  if (labels.extent.data.size() != n || labels.boundary.data.size() != n || labels.distance.data.size() != n)
    throw ShapeError("label planes differ in size");
  for (int t = 0; t < 3; ++t) {
    if (pred.task[static_cast<std::size_t>(t)].size() != n) throw ShapeError("prediction and labels differ in size");
    if (grad && grad->task[static_cast<std::size_t>(t)].size() != n) throw ShapeError("gradient buffer has wrong size");
  }
  bool any = false;
  for (auto m : mask) any |= m != 0;
  if (!any) throw UnsupervisableError("unsupervisable batch: supervision mask is empty");

  auto g = [&](int t) { return grad ? grad->task[static_cast<std::size_t>(t)] : std::span<T>{}; };
  double loss = 0.0;
  loss += task_loss<T, std::uint8_t>(labels.extent.data, pred.task[0], mask, cfg, weights.extent, g(0));
  loss += task_loss<T, std::uint8_t>(labels.boundary.data, pred.task[1], mask, cfg, weights.boundary, g(1));
  loss += task_loss<T, float>(labels.distance.data, pred.task[2], mask, cfg, weights.distance, g(2));
  return loss;
}

template double masked_loss<float>(const PredictionMaps<float>&, const geom::LabelStack&, const TanimotoConfig&,
                                   const TaskWeights&, const PredictionGrads<float>*);
template double masked_loss<double>(const PredictionMaps<double>&, const geom::LabelStack&, const TanimotoConfig&,
                                    const TaskWeights&, const PredictionGrads<double>*);

}  // namespace fieldkit::train
