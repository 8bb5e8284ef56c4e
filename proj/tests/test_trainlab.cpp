#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fieldkit/trainlab.hpp"

using namespace fieldkit;
using namespace fieldkit::train;

namespace {

std::vector<data::Example> scene_examples(int n, int size, std::uint64_t seed) {
  std::vector<data::Example> out;
  for (int i = 0; i < n; ++i) {
    synth::LandscapeSpec s;
    s.seed = seed + static_cast<std::uint64_t>(i);
    s.height = s.width = size;
    const auto scene = synth::generate_landscape(s);
    auto ex = data::make_examples(scene, "s" + std::to_string(i), data::all_fields(scene));
    out.insert(out.end(), ex.begin(), ex.end());
  }
  return out;
}

net::NetworkSpec tiny_spec() {
  net::NetworkSpec s;
  s.depth = 2;
  s.base_filters = 4;
  return s;
}

bool same_values(const net::Checkpoint& a, const net::Checkpoint& b) {
  if (a.values.size() != b.values.size()) return false;
  for (std::size_t i = 0; i < a.values.size(); ++i)
    if (a.values[i].size() != b.values[i].size() ||
        std::memcmp(a.values[i].data(), b.values[i].data(), a.values[i].size() * sizeof(float)) != 0)
      return false;
  return true;
}

}  // namespace

TEST_CASE("zero epochs returns the initialized weights after one validation pass") {
  Dataset ds{"d", scene_examples(2, 32, 1), scene_examples(1, 32, 9)};
  net::Network<float> model(tiny_spec(), 3);
  const auto init = net::make_checkpoint(model, {});
  TrainConfig cfg;
  cfg.max_epochs = 0;
  const auto r = train::train(model, ds, cfg);
  REQUIRE(r.log.size() == 1);
  CHECK(r.log[0].epoch == 0);
  CHECK(std::isnan(r.log[0].train_loss));
  CHECK(r.best_epoch == 0);
  CHECK(same_values(r.checkpoint, init));
  CHECK(r.checkpoint.provenance.train_dataset_id == "d");
}

TEST_CASE("a tiny network overfits a single tile") {
  Dataset ds{"one", scene_examples(1, 32, 4), {}};
  auto spec = tiny_spec();
  spec.base_filters = 8;
  net::Network<float> model(spec, 5);
  TrainConfig cfg;
  cfg.max_epochs = 500;
  cfg.batch_size = 1;
  cfg.crop_size = 0;
  cfg.seed = 2;
  const auto r = train::train(model, ds, cfg);
  REQUIRE(r.log.size() == 501);
  INFO("final loss ", r.log.back().train_loss);
  CHECK(r.log.back().train_loss < 0.05);
  CHECK(r.log.back().train_loss < r.log[1].train_loss);
}

TEST_CASE("training is deterministic and keeps the best validation epoch") {
  Dataset ds{"d", scene_examples(3, 32, 20), scene_examples(2, 32, 40)};
  TrainConfig cfg;
  cfg.max_epochs = 6;
  cfg.crop_size = 16;
  cfg.samples_per_epoch = 12;
  cfg.seed = 7;
  net::Network<float> a(tiny_spec(), 1), b(tiny_spec(), 1);
  const auto dir = std::filesystem::temp_directory_path() / "fieldkit_test_train";
  std::filesystem::create_directories(dir);
  TrainHooks hooks;
  hooks.log_csv = dir / "log.csv";
  const auto ra = train::train(a, ds, cfg, hooks);
  const auto rb = train::train(b, ds, cfg);
  CHECK(ra.checkpoint.id() == rb.checkpoint.id());
  CHECK(same_values(ra.checkpoint, rb.checkpoint));

  // The persisted log agrees with the selected epoch.
  std::ifstream in(dir / "log.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,train_loss,val_oa,val_f1,val_mcc,wall_time");
  int best_epoch = -1;
  double best = -2.0;
  int rows = 0;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    REQUIRE(cells.size() == 6);
    ++rows;
    if (cells[4] == "nan") continue;
    const double v = std::stod(cells[4]);
    if (v > best + 5e-7) {
      best = v;
      best_epoch = std::stoi(cells[0]);
    }
  }
  CHECK(rows == static_cast<int>(ra.log.size()));
  CHECK(best_epoch == ra.best_epoch);
  CHECK(ra.checkpoint.provenance.epoch == ra.best_epoch);

  // The trained model holds the selected weights.
  CHECK(same_values(net::make_checkpoint(a, {}), ra.checkpoint));
  std::filesystem::remove_all(dir);
}

TEST_CASE("non-finite parameters abort with a diagnostic") {
  Dataset ds{"d", scene_examples(1, 32, 60), {}};
  net::Network<float> model(tiny_spec(), 1);
  model.find("stem.b")->value[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg;
  cfg.max_epochs = 1;
  cfg.crop_size = 16;
  try {
    train::train(model, ds, cfg);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("batch 0") != std::string::npos);
    CHECK(msg.find("non-finite parameter values") != std::string::npos);
  }
}

TEST_CASE("unsupervisable datasets are rejected") {
  auto ex = scene_examples(1, 32, 61);
  std::fill(ex[0].labels.mask.data.begin(), ex[0].labels.mask.data.end(), 0);
  Dataset ds{"d", ex, {}};
  net::Network<float> model(tiny_spec(), 1);
  TrainConfig cfg;
  cfg.max_epochs = 1;
  CHECK_THROWS_AS(train::train(model, ds, cfg), UnsupervisableError);
}

TEST_CASE("finetuning records its parent and starts from its weights") {
  Dataset ds{"d", scene_examples(2, 32, 70), scene_examples(1, 32, 80)};
  net::Network<float> model(tiny_spec(), 1);
  const auto parent = net::make_checkpoint(model, {"src", 3, 0.5, std::nullopt});
  TrainConfig cfg;
  cfg.max_epochs = 0;
  const auto child = finetune(parent, ds, cfg);
  CHECK(same_values(child.checkpoint, parent));
  REQUIRE(child.checkpoint.provenance.parent_checkpoint_id);
  CHECK(*child.checkpoint.provenance.parent_checkpoint_id == parent.id());
  CHECK(child.checkpoint.id() != parent.id());

  cfg.max_epochs = 1;
  cfg.crop_size = 16;
  cfg.samples_per_epoch = 4;
  const auto grand = finetune(child.checkpoint, ds, cfg);
  CHECK(*grand.checkpoint.provenance.parent_checkpoint_id == child.checkpoint.id());
}

TEST_CASE("channel mismatch needs an adapter; tile_mean preserves the response on repeated groups") {
  net::Network<float> model(tiny_spec(), 2);
  const auto parent = net::make_checkpoint(model, {});
  CHECK_THROWS_AS(network_for_channels(parent, 9, ChannelAdapter::None), ShapeError);
  CHECK_THROWS_AS(network_for_channels(parent, 7, ChannelAdapter::TileMean), ShapeError);
  auto wide = network_for_channels(parent, 9, ChannelAdapter::TileMean);
  CHECK(wide.spec().in_channels == 9);

  const auto ex = scene_examples(1, 16, 90)[0];
  FloatRaster stacked(ex.image.grid, 9);
  for (int g = 0; g < 3; ++g)
    std::copy(ex.image.data.begin(), ex.image.data.end(), stacked.data.begin() + static_cast<std::ptrdiff_t>(g * ex.image.data.size()));
  const auto a = predict(model, ex.image), b = predict(wide, stacked);
  double worst = 0.0;
  for (std::size_t i = 0; i < a[0].data.size(); ++i) worst = std::max(worst, static_cast<double>(std::abs(a[0].data[i] - b[0].data[i])));
  CHECK(worst < 1e-5);
  CHECK(adapter_from_name("tile_mean") == ChannelAdapter::TileMean);
  CHECK_THROWS_AS(adapter_from_name("bogus"), InvalidArgument);
}

TEST_CASE("consensus prediction averages seasons") {
  net::Network<float> model(tiny_spec(), 3);
  synth::LandscapeSpec s;
  s.height = s.width = 24;
  s.seed = 5;
  const auto scene = synth::generate_landscape(s);
  const std::vector<FloatRaster> one{scene.imagery[0]};
  const auto single = consensus_predict(model, one);
  const auto direct = predict(model, scene.imagery[0]);
  CHECK(single[0].data == direct[0].data);

  const auto all = consensus_predict(model, scene.imagery);
  std::vector<FloatRaster> rev(scene.imagery.rbegin(), scene.imagery.rend());
  const auto reversed = consensus_predict(model, rev);
  double worst = 0.0;
  for (std::size_t i = 0; i < all[0].data.size(); ++i) worst = std::max(worst, static_cast<double>(std::abs(all[0].data[i] - reversed[0].data[i])));
  CHECK(worst < 1e-6);

  std::array<std::array<FloatRaster, 3>, 3> per;
  for (std::size_t k = 0; k < 3; ++k) per[k] = predict(model, scene.imagery[k]);
  for (std::size_t i = 0; i < all[1].data.size(); i += 7) {
    const double mean = (per[0][1].data[i] + static_cast<double>(per[1][1].data[i]) + per[2][1].data[i]) / 3.0;
    CHECK(all[1].data[i] == doctest::Approx(mean).epsilon(1e-6));
  }

  std::vector<FloatRaster> bad{scene.imagery[0], crop(scene.imagery[1], 0, 0, 16, 16)};
  CHECK_THROWS_AS(consensus_predict(model, bad), ShapeError);
  CHECK_THROWS_AS(consensus_predict(model, std::vector<FloatRaster>{}), InvalidArgument);
}

TEST_CASE("predict pads sizes that are not a multiple of the network's") {
  net::Network<float> model(tiny_spec(), 3);
  synth::LandscapeSpec s;
  s.height = 21;
  s.width = 30;
  const auto scene = synth::generate_landscape(s);
  const auto maps = predict(model, scene.imagery[0]);
  CHECK(maps[0].height() == 21);
  CHECK(maps[0].width() == 30);
  FloatRaster wrong(scene.grid(), 2);
  CHECK_THROWS_AS(predict(model, wrong), ShapeError);
}

TEST_CASE("training config JSON round trip and validation") {
  TrainConfig c;
  c.learning_rate = 0.002;
  c.task_weights = {1, 0.5, 2};
  c.loss.d = 3;
  c.seed = 99;
  const auto back = train_config_from_json(train_config_to_json(c));
  CHECK(back.learning_rate == 0.002);
  CHECK(back.task_weights.boundary == 0.5);
  CHECK(back.loss.d == 3);
  CHECK(back.seed == 99);
  CHECK_THROWS_AS(train_config_from_json(Json{{"learning_rate", -1.0}}), InvalidArgument);
  CHECK_THROWS_AS(train_config_from_json(Json{{"batch_size", 0}}), InvalidArgument);
  CHECK_THROWS_AS(train_config_from_json(Json{{"lr", 0.1}}), FormatError);
}
