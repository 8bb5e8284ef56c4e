#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "fieldkit/fractalnet.hpp"

using namespace fieldkit;
using namespace fieldkit::net;

namespace {

template <typename T>
Tensor<T> random_input(Rng& rng, int c, int h, int w) {
  Tensor<T> x(c, h, w);
  for (auto& v : x.data) v = static_cast<T>(rng.uniform());
  return x;
}

void open_gates(Network<double>& net, Rng& rng) {
  for (auto& p : net.parameters())
    if (p.unit_interval)
      for (auto& v : p.value) v = rng.uniform(0.2, 0.8);
}

/// Scalar objective sum_t <r_t, out_t> with fixed random weights r.
struct Objective {
  std::array<Tensor<double>, 3> r;

  double value(Network<double>& net, const Tensor<double>& x) const {
    const auto out = net.forward(x);
    double s = 0.0;
    for (int t = 0; t < 3; ++t)
      for (std::size_t i = 0; i < r[t].data.size(); ++i) s += r[t].data[i] * out.maps[t].data[i];
    return s;
  }
};

}  // namespace

TEST_CASE("output shapes match the input for random legal specs") {
  Rng rng(1);
  for (int trial = 0; trial < 12; ++trial) {
    NetworkSpec s;
    s.depth = 1 + static_cast<int>(rng.below(3));
    s.base_filters = 1 + static_cast<int>(rng.below(6));
    s.in_channels = 1 + static_cast<int>(rng.below(5));
    s.attention = rng.below(2);
    s.separate_heads = rng.below(2);
    s.attention_depth = static_cast<int>(rng.below(4));
    const int m = s.size_multiple();
    const int h = m * (1 + static_cast<int>(rng.below(3))), w = m * (1 + static_cast<int>(rng.below(3)));
    Network<float> net(s, trial);
    const auto out = net.forward(random_input<float>(rng, s.in_channels, h, w));
    for (const auto& o : out.maps) {
      CHECK(o.c == 1);
      CHECK(o.h == h);
      CHECK(o.w == w);
      for (float v : o.data) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
      }
    }
  }
}

TEST_CASE("smallest network runs on a 2x2 input") {
  NetworkSpec s;
  s.depth = 1;
  s.base_filters = 1;
  s.in_channels = 1;
  Network<double> net(s, 3);
  Rng rng(2);
  const auto out = net.forward(random_input<double>(rng, 1, 2, 2));
  CHECK(out.maps[0].data.size() == 4);
}

TEST_CASE("inputs that are not a multiple of 2^depth are rejected") {
  NetworkSpec s;
  s.depth = 3;
  Network<float> net(s, 0);
  Rng rng(3);
  try {
    net.forward(random_input<float>(rng, 3, 20, 16));
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("multiple of 8") != std::string::npos);
  }
  CHECK_THROWS_AS(net.forward(random_input<float>(rng, 2, 16, 16)), ShapeError);
}

TEST_CASE("attention adds parameters; closed gates leave the output unchanged") {
  NetworkSpec with;
  with.depth = 2;
  with.base_filters = 4;
  NetworkSpec without = with;
  without.attention = false;
  Network<double> a(with, 7), b(without, 7);
  CHECK(a.parameter_count() > b.parameter_count());

  // Shared parameter names draw identical values, so with all gates at zero the
  // two networks compute the same function.
  Rng rng(4);
  const auto x = random_input<double>(rng, 3, 16, 16);
  const auto ya = a.forward(x), yb = b.forward(x);
  double worst = 0.0;
  for (int t = 0; t < 3; ++t)
    for (std::size_t i = 0; i < ya.maps[t].data.size(); ++i)
      worst = std::max(worst, std::abs(ya.maps[t].data[i] - yb.maps[t].data[i]));
  CHECK(worst < 1e-6);

  open_gates(a, rng);
  const auto yo = a.forward(x);
  double diff = 0.0;
  for (std::size_t i = 0; i < yo.maps[0].data.size(); ++i) diff += std::abs(yo.maps[0].data[i] - yb.maps[0].data[i]);
  CHECK(diff > 1e-6);
}

TEST_CASE("same seed gives bit-identical networks and outputs") {
  NetworkSpec s;
  s.depth = 2;
  s.base_filters = 3;
  Network<float> a(s, 11), b(s, 11), c(s, 12);
  Rng rng(5);
  const auto x = random_input<float>(rng, 3, 8, 8);
  const auto ya = a.forward(x), yb = b.forward(x), yc = c.forward(x);
  CHECK(std::memcmp(ya.maps[0].data.data(), yb.maps[0].data.data(), ya.maps[0].data.size() * sizeof(float)) == 0);
  CHECK(ya.maps[0].data != yc.maps[0].data);
}

TEST_CASE("backpropagated gradients match central differences") {
  for (bool separate : {false, true}) {
    NetworkSpec s;
    s.depth = 2;
    s.base_filters = 4;
    s.in_channels = 3;
    s.attention_depth = 2;
    s.separate_heads = separate;
    Network<double> net(s, 21);
    Rng rng(6);
    open_gates(net, rng);
    const auto x = random_input<double>(rng, 3, 16, 16);
    Objective obj;
    for (auto& r : obj.r) r = random_input<double>(rng, 1, 16, 16);

    net.zero_grad();
    net.forward(x, true);
    net.backward(obj.r);

    // Every parameter tensor, a few entries each.
    int checked = 0;
    double worst = 0.0;
    std::string worst_name;
    for (auto& p : net.parameters()) {
      for (int k = 0; k < 2; ++k) {
        const std::size_t i = rng.below(p.value.size());
        const double keep = p.value[i], h = 1e-5;
        p.value[i] = keep + h;
        const double up = obj.value(net, x);
        p.value[i] = keep - h;
        const double down = obj.value(net, x);
        p.value[i] = keep;
        const double num = (up - down) / (2 * h), ana = p.grad[i];
        if (std::abs(num) < 1e-7 && std::abs(ana) < 1e-7) continue;
        const double rel = std::abs(num - ana) / std::max(std::abs(num), std::abs(ana));
        ++checked;
        if (rel > worst) {
          worst = rel;
          worst_name = p.name;
        }
      }
    }
    INFO("separate_heads=", separate, " worst at ", worst_name);
    CHECK(checked >= 20);
    CHECK(worst < 1e-3);
  }
}

TEST_CASE("input gradient matches central differences") {
  NetworkSpec s;
  s.depth = 1;
  s.base_filters = 4;
  s.in_channels = 2;
  Network<double> net(s, 8);
  Rng rng(7);
  open_gates(net, rng);
  auto x = random_input<double>(rng, 2, 8, 8);
  Objective obj;
  for (auto& r : obj.r) r = random_input<double>(rng, 1, 8, 8);
  net.forward(x, true);
  const auto dx = net.backward(obj.r);
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    const std::size_t i = rng.below(x.data.size());
    const double keep = x.data[i], h = 1e-5;
    x.data[i] = keep + h;
    const double up = obj.value(net, x);
    x.data[i] = keep - h;
    const double down = obj.value(net, x);
    x.data[i] = keep;
    const double num = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(num - dx.data[i]) / std::max({std::abs(num), std::abs(dx.data[i]), 1e-8}));
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("attention stays finite across similarity depths") {
  Rng rng(9);
  for (int d = 0; d <= 10; ++d) {
    NetworkSpec s;
    s.depth = 2;
    s.base_filters = 4;
    s.attention_depth = d;
    Network<double> net(s, 30);
    open_gates(net, rng);
    const auto x = random_input<double>(rng, 3, 16, 16);
    net.forward(x, true);
    std::array<Tensor<double>, 3> g;
    for (auto& t : g) t = Tensor<double>(1, 16, 16, 1.0);
    const auto dx = net.backward(g);
    bool finite = true;
    for (const auto& p : net.parameters())
      for (double v : p.grad) finite &= std::isfinite(v);
    for (double v : dx.data) finite &= std::isfinite(v);
    INFO("d=", d);
    CHECK(finite);
  }
}

TEST_CASE("projection keeps gates in the unit interval") {
  NetworkSpec s;
  s.depth = 1;
  s.base_filters = 2;
  Network<float> net(s, 1);
  for (auto& p : net.parameters())
    if (p.unit_interval) std::fill(p.value.begin(), p.value.end(), 1.7f);
  net.project();
  for (auto& p : net.parameters())
    if (p.unit_interval)
      for (float v : p.value) CHECK(v == 1.0f);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  NetworkSpec s;
  s.depth = 2;
  s.base_filters = 3;
  s.separate_heads = true;
  Network<float> net(s, 5);
  Rng rng(10);
  for (auto& p : net.parameters())
    for (auto& v : p.value) v = static_cast<float>(rng.normal());
  Provenance prov{"dataset-abc", 7, 0.61, std::string("0123456789abcdef")};
  const auto ck = make_checkpoint(net, prov);
  const auto dir = std::filesystem::temp_directory_path() / "fieldkit_test_ckpt";
  std::filesystem::remove_all(dir);
  save_checkpoint(ck, dir / "model");
  const auto back = load_checkpoint(dir / "model");
  CHECK(back.id() == ck.id());
  CHECK(back.spec == s);
  CHECK(back.provenance.epoch == 7);
  CHECK(back.provenance.parent_checkpoint_id == prov.parent_checkpoint_id);
  auto net2 = network_from_checkpoint(back);
  const auto x = random_input<float>(rng, 3, 8, 8);
  const auto a = net.forward(x), b = net2.forward(x);
  for (int t = 0; t < 3; ++t)
    CHECK(std::memcmp(a.maps[t].data.data(), b.maps[t].data.data(), a.maps[t].data.size() * sizeof(float)) == 0);

  // A different lineage gives a different id even with equal weights.
  Provenance other = prov;
  other.parent_checkpoint_id.reset();
  CHECK(make_checkpoint(net, other).id() != ck.id());

  // Corrupting the weights is detected.
  {
    std::fstream f(dir / "model.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const float junk = 123.0f;
    f.write(reinterpret_cast<const char*>(&junk), sizeof junk);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "model"), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("spec validation and JSON round trip") {
  NetworkSpec s;
  s.depth = 0;
  CHECK_THROWS_AS(s.validate(), InvalidArgument);
  s = {};
  s.base_filters = 0;
  CHECK_THROWS_AS(s.validate(), InvalidArgument);
  s = {};
  s.attention_depth = 5;
  s.separate_heads = true;
  CHECK(spec_from_json(spec_to_json(s)) == s);
}
