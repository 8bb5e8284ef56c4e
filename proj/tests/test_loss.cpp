#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "fieldkit/loss.hpp"

using namespace fieldkit;
using namespace fieldkit::train;

namespace {

struct Case {
  geom::LabelStack labels;
  std::array<std::vector<double>, 3> pred;

  PredictionMaps<double> maps() const { return {{pred[0], pred[1], pred[2]}}; }
};

Case random_case(Rng& rng, int h, int w, double mask_share) {
  const auto g = GridGeometry::pixels(h, w);
  Case c;
  c.labels.extent = ByteRaster(g, 1);
  c.labels.boundary = ByteRaster(g, 1);
  c.labels.distance = FloatRaster(g, 1);
  c.labels.mask = ByteRaster(g, 1);
  for (std::size_t i = 0; i < g.size(); ++i) {
    c.labels.extent.data[i] = rng.uniform() < 0.5;
    c.labels.boundary.data[i] = rng.uniform() < 0.2;
    c.labels.distance.data[i] = static_cast<float>(rng.uniform());
    c.labels.mask.data[i] = rng.uniform() < mask_share;
  }
  c.labels.mask.data[0] = 1;
  for (auto& p : c.pred) {
    p.resize(g.size());
    for (auto& v : p) v = rng.uniform(0.02, 0.98);
  }
  return c;
}

double fd_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

}  // namespace

TEST_CASE("Tanimoto hand values") {
  const std::vector<double> y{1, 0}, half{0.5, 0.5};
  CHECK(std::abs(tanimoto(y, y, 0) - 1.0) < 1e-9);
  CHECK(std::abs(tanimoto(y, half, 0) - 0.5) < 1e-9);
  CHECK(std::abs(tanimoto(y, half, 1) - 1.0 / 3.0) < 1e-9);
  CHECK(std::abs(tanimoto_with_complement(y, half, 0) - 0.5) < 1e-9);
  // All-empty inputs agree perfectly by convention.
  const std::vector<double> zero{0, 0, 0};
  CHECK(tanimoto(zero, zero, 3) == 1.0);
}

TEST_CASE("the difference form equals the textbook denominator") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> y(10), p(10);
    for (auto& v : y) v = rng.uniform();
    for (auto& v : p) v = rng.uniform();
    for (int d : {0, 1, 3, 7}) {
      double dot = 0, yy = 0, pp = 0;
      for (int i = 0; i < 10; ++i) {
        dot += y[i] * p[i];
        yy += y[i] * y[i];
        pp += p[i] * p[i];
      }
      const double textbook = dot / (std::ldexp(yy + pp, d) - (std::ldexp(1.0, d + 1) - 1) * dot);
      CHECK(tanimoto(y, p, d) == doctest::Approx(textbook).epsilon(1e-12));
    }
  }
}

TEST_CASE("FT(y, y) = 1 for random binary y") {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> y(1 + rng.below(40));
    for (auto& v : y) v = static_cast<double>(rng.below(2));
    const int d = static_cast<int>(rng.below(6));
    CHECK(tanimoto_with_complement(y, y, d) == 1.0);
  }
}

TEST_CASE("FT is symmetric under complementing both inputs") {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> y(12), p(12), yc(12), pc(12);
    for (int i = 0; i < 12; ++i) {
      y[i] = rng.uniform();
      p[i] = rng.uniform();
      yc[i] = 1 - y[i];
      pc[i] = 1 - p[i];
    }
    CHECK(tanimoto_with_complement(y, p, 2) == doctest::Approx(tanimoto_with_complement(yc, pc, 2)).epsilon(1e-12));
  }
}

TEST_CASE("masked loss: single task example and perfect predictions") {
  const auto g = GridGeometry::pixels(1, 2);
  geom::LabelStack l{ByteRaster(g, 1), ByteRaster(g, 1), FloatRaster(g, 1), ByteRaster(g, 1, 1)};
  l.extent.data = {1, 0};
  const std::vector<double> half{0.5, 0.5}, zeros{0, 0};
  PredictionMaps<double> m{{half, zeros, zeros}};
  CHECK(std::abs(masked_loss(m, l, {}, {1, 0, 0}) - 0.5) < 1e-9);

  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    auto c = random_case(rng, 5, 6, 0.5);
    for (std::size_t i = 0; i < c.pred[0].size(); ++i) {
      c.pred[0][i] = c.labels.extent.data[i];
      c.pred[1][i] = c.labels.boundary.data[i];
      c.pred[2][i] = c.labels.distance.data[i];
    }
    TanimotoConfig cfg;
    cfg.d = static_cast<int>(rng.below(5));
    cfg.average_over_depths = trial % 2;
    CHECK(masked_loss(c.maps(), c.labels, cfg) == 0.0);
  }
}

TEST_CASE("masked loss range and empty-mask error") {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const auto c = random_case(rng, 4, 4, 0.7);
    const double v = masked_loss(c.maps(), c.labels, {}, {1, 2, 0.5});
    CHECK(v >= 0.0);
    CHECK(v <= 3.5);
  }
  auto c = random_case(rng, 4, 4, 0.5);
  std::fill(c.labels.mask.data.begin(), c.labels.mask.data.end(), 0);
  CHECK_THROWS_AS(masked_loss(c.maps(), c.labels, {}), UnsupervisableError);
}

TEST_CASE("perturbing masked-out predictions changes nothing, bitwise") {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    auto c = random_case(rng, 6, 7, 0.5);
    TanimotoConfig cfg;
    cfg.d = static_cast<int>(rng.below(6));
    cfg.average_over_depths = rng.below(2);
    const double before = masked_loss(c.maps(), c.labels, cfg);
    for (auto& p : c.pred)
      for (std::size_t i = 0; i < p.size(); ++i)
        if (!c.labels.mask.data[i]) p[i] = rng.uniform();
    const double after = masked_loss(c.maps(), c.labels, cfg);
    CHECK(std::memcmp(&before, &after, sizeof(double)) == 0);
  }
}

TEST_CASE("loss gradients match central differences") {
  Rng rng(11);
  for (int d : {0, 2, 5}) {
    for (bool avg : {false, true}) {
      TanimotoConfig cfg;
      cfg.d = d;
      cfg.average_over_depths = avg;
      auto c = random_case(rng, 5, 5, 0.6);
      std::array<std::vector<double>, 3> grad;
      for (auto& gv : grad) gv.assign(25, 0.0);
      PredictionGrads<double> g{{grad[0], grad[1], grad[2]}};
      const TaskWeights w{1.0, 0.7, 1.3};
      masked_loss(c.maps(), c.labels, cfg, w, &g);
      double worst = 0.0;
      for (int t = 0; t < 3; ++t)
        for (std::size_t i = 0; i < 25; ++i) {
          if (!c.labels.mask.data[i]) {
            CHECK(grad[static_cast<std::size_t>(t)][i] == 0.0);
            continue;
          }
          const double h = 1e-6, keep = c.pred[static_cast<std::size_t>(t)][i];
          c.pred[static_cast<std::size_t>(t)][i] = keep + h;
          const double up = masked_loss(c.maps(), c.labels, cfg, w);
          c.pred[static_cast<std::size_t>(t)][i] = keep - h;
          const double down = masked_loss(c.maps(), c.labels, cfg, w);
          c.pred[static_cast<std::size_t>(t)][i] = keep;
          worst = std::max(worst, fd_rel_error(grad[static_cast<std::size_t>(t)][i], (up - down) / (2 * h)));
        }
      INFO("d=", d, " avg=", avg);
      CHECK(worst < 1e-4);
    }
  }
}

TEST_CASE("loss grows monotonically as predictions blur toward the complement") {
  Rng rng(12);
  const auto g = GridGeometry::pixels(6, 6);
  for (int d : {0, 1, 2, 3, 5}) {
    for (int trial = 0; trial < 10; ++trial) {
      geom::LabelStack l{ByteRaster(g, 1), ByteRaster(g, 1), FloatRaster(g, 1), ByteRaster(g, 1, 1)};
      for (auto& v : l.extent.data) v = rng.below(2);
      for (auto& v : l.boundary.data) v = rng.below(2);
      for (std::size_t i = 0; i < l.distance.data.size(); ++i) l.distance.data[i] = l.extent.data[i];
      TanimotoConfig cfg;
      cfg.d = d;
      double prev = -1.0;
      for (int step = 0; step <= 50; ++step) {
        const double alpha = 0.5 * step / 50.0;
        std::array<std::vector<double>, 3> p;
        for (auto& v : p) v.resize(36);
        for (std::size_t i = 0; i < 36; ++i) {
          p[0][i] = (1 - alpha) * l.extent.data[i] + alpha * (1 - l.extent.data[i]);
          p[1][i] = (1 - alpha) * l.boundary.data[i] + alpha * (1 - l.boundary.data[i]);
          p[2][i] = p[0][i];
        }
        const double v = masked_loss(PredictionMaps<double>{{p[0], p[1], p[2]}}, l, cfg);
        CHECK(v > prev);
        prev = v;
      }
    }
  }
}

TEST_CASE("config validation") {
  TanimotoConfig c;
  c.epsilon = 0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = {};
  c.d = -1;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}
