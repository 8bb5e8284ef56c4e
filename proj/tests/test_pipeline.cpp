#include <doctest.h>

#include "fieldkit/pipeline.hpp"

using namespace fieldkit;
using namespace fieldkit::pipe;

namespace {

data::Domain small_domain(std::uint64_t seed) {
  synth::LandscapeSpec s;
  s.height = s.width = 48;
  data::DomainOptions o;
  o.n_scenes = 16;
  o.grid_rows = o.grid_cols = 4;
  return data::generate_domain("small", s, o, seed);
}

TrainRequest tiny_request() {
  auto r = request_from_json(Json::parse(R"({"network": {"depth": 2, "base_filters": 4},
      "training": {"max_epochs": 1, "samples_per_epoch": 8, "crop_size": 32}})"));
  return r;
}

}  // namespace

TEST_CASE("training requests follow the temporal mode for input channels") {
  CHECK(request_from_json(Json::object()).network.in_channels == 3);
  const auto stacked = request_from_json(Json::parse(R"({"temporal": {"mode": "stacked"}})"), 4, 3);
  CHECK(stacked.network.in_channels == 12);
  const auto explicit_ch = request_from_json(Json::parse(R"({"network": {"in_channels": 5}})"));
  CHECK(explicit_ch.network.in_channels == 5);
  const auto r = request_from_json(Json::parse(R"({"labels": {"n_images": 3, "fields_per_image": 4}})"));
  CHECK(r.labels.n_images == 3);
  CHECK(r.labels.fields_per_image == 4);
  CHECK(request_from_json(request_to_json(r)).labels.n_images == 3);
}

TEST_CASE("malformed training requests are rejected") {
  CHECK_THROWS_AS(request_from_json(Json::parse(R"({"trainng": {}})")), FormatError);
  CHECK_THROWS_AS(request_from_json(Json::parse(R"({"labels": {"n_images": -1}})")), InvalidArgument);
  CHECK_THROWS_AS(request_from_json(Json::parse(R"({"temporal": {"mode": "single", "shuffle": true}})")),
                  InvalidArgument);
  CHECK_THROWS_AS(request_from_json(Json::parse(R"({"training": {"max_epochs": "ten"}})")), FormatError);
}

TEST_CASE("label policy controls the labeled fields of the training split") {
  const auto d = small_domain(5);
  auto r = tiny_request();
  const auto full = domain_dataset(d, r);
  std::size_t train_fields = 0;
  for (auto i : d.indices(data::Split::Train)) train_fields += data::all_fields(d.scenes[i]).size();
  CHECK(full.train.size() == d.indices(data::Split::Train).size());
  CHECK(full.val.size() == d.indices(data::Split::Val).size());

  r.labels.n_images = 3;
  r.labels.fields_per_image = 2;
  const auto partial = domain_dataset(d, r);
  CHECK(partial.train.size() == 3);
  CHECK(partial.id != full.id);
  // Validation always keeps every field.
  CHECK(partial.val.size() == full.val.size());
  CHECK(train_fields > 6);
}

TEST_CASE("training on a domain is deterministic and evaluation covers every test field") {
  const auto d = small_domain(9);
  const auto r = tiny_request();
  const auto a = train_on_domain(d, r, nullptr);
  const auto b = train_on_domain(d, r, nullptr);
  CHECK(a.checkpoint.id() == b.checkpoint.id());

  const auto ft = train_on_domain(d, r, &a.checkpoint);
  REQUIRE(ft.checkpoint.provenance.parent_checkpoint_id.has_value());
  CHECK(*ft.checkpoint.provenance.parent_checkpoint_id == a.checkpoint.id());

  auto model = net::network_from_checkpoint(a.checkpoint);
  const auto report = evaluate_on_domain(model, d, EvalRequest{});
  std::size_t fields = 0;
  for (auto i : d.indices(data::Split::Test)) fields += data::all_fields(d.scenes[i]).size();
  CHECK(report.per_field.size() == fields);
}

TEST_CASE("evaluation requests") {
  const auto r = eval_request_from_json(Json::parse(R"({"split": "val", "exclusive": true})"));
  CHECK(r.split == data::Split::Val);
  CHECK(r.exclusive);
  CHECK(eval_request_from_json(Json()).split == data::Split::Test);
  CHECK_THROWS_AS(eval_request_from_json(Json::parse(R"({"splt": "val"})")), FormatError);
}
