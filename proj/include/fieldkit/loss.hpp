#pragma once

#include <array>
#include <span>

#include "fieldkit/fieldgeom.hpp"

namespace fieldkit::train {

/// Settings of the fractal Tanimoto loss.
struct TanimotoConfig {
  int d = 0;
  /// Average the coefficient over depths 0..d instead of using depth d alone.
  bool average_over_depths = false;
  /// Denominators at or below epsilon mean both inputs are (numerically) zero
  /// on the evaluated pixels; the coefficient is then 1 by convention.
  double epsilon = 1e-7;

  void validate() const;
};

/// Reduced sums that determine the Tanimoto coefficient of (y, p):
/// dot = sum(y * p), sq = sum((y - p)^2).
struct TanimotoSums {
  double dot = 0.0;
  double sq = 0.0;
};

/// dot / (2^d * (|y|^2 + |p|^2) - (2^(d+1) - 1) * dot), computed as
/// dot / (2^d * sq + dot), which is the same quantity and exactly 1 at y = p.
double tanimoto_from_sums(const TanimotoSums& s, int d, double epsilon = 1e-7);
/// Partial derivatives of the coefficient with respect to dot and sq.
std::array<double, 2> tanimoto_partials(const TanimotoSums& s, int d, double epsilon = 1e-7);

double tanimoto(std::span<const double> y, std::span<const double> p, int d, double epsilon = 1e-7);
/// Mean of the coefficient on (y, p) and on (1 - y, 1 - p).
double tanimoto_with_complement(std::span<const double> y, std::span<const double> p, int d,
                                double epsilon = 1e-7);

struct TaskWeights {
  double extent = 1.0;
  double boundary = 1.0;
  double distance = 1.0;

  double operator[](int t) const { return t == 0 ? extent : t == 1 ? boundary : distance; }
};

/// Extent, boundary and distance predictions of one image.
template <typename T>
struct PredictionMaps {
  std::array<std::span<const T>, 3> task;
};

template <typename T>
struct PredictionGrads {
  std::array<std::span<T>, 3> task;
};

/// sum_t w_t * (1 - FT(label_t, pred_t)) where FT is the Tanimoto with
/// complement and all sums run over mask = 1 pixels only, so masked-out
/// predictions never influence the value. With average_over_depths FT is the
/// mean over depths 0..d. When `grad` is given it receives d loss / d pred
/// (zero at masked-out pixels). Throws UnsupervisableError on an empty mask.
template <typename T>
double masked_loss(const PredictionMaps<T>& pred, const geom::LabelStack& labels, const TanimotoConfig& cfg,
                   const TaskWeights& weights = {}, const PredictionGrads<T>* grad = nullptr);

}  // namespace fieldkit::train
