// Exercises the shared library through its C header only.
#include <doctest.h>
#include <json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>

#include "fieldkit/fieldkit.h"

namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

std::string take(char* s) {
  std::string out = s ? s : "";
  fk_string_free(s);
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("fieldkit_capi_" + name);
  fs::remove_all(p);
  return p;
}

const char* kDomain = R"({"name": "t", "preset": "target-small", "n_scenes": 12, "grid": [4, 4],
                          "spec": {"height": 48, "width": 48}})";

const char* kTrain = R"({"network": {"depth": 2, "base_filters": 4},
                         "training": {"max_epochs": 1, "samples_per_epoch": 8, "crop_size": 32}})";

}  // namespace

TEST_CASE("errors carry a status and a thread-local message") {
  fk_scene* s = nullptr;
  CHECK(fk_scene_generate(R"({"preset": "nowhere"})", &s) == FK_ERR_INVALID_ARGUMENT);
  CHECK(s == nullptr);
  const std::string msg = fk_last_error();
  CHECK(msg.find("target-small") != std::string::npos);
  CHECK(fk_scene_generate("{not json", &s) == FK_ERR_FORMAT);
  CHECK(fk_scene_generate(nullptr, nullptr) == FK_ERR_INVALID_ARGUMENT);

  CHECK(fk_scene_generate(R"({"preset": "nowhere"})", &s) == FK_ERR_INVALID_ARGUMENT);
  std::thread([] { fk_scene_load("/nonexistent/scene", nullptr); }).join();
  CHECK(std::string(fk_last_error()).find("target-small") != std::string::npos);
  CHECK(std::string(fk_status_name(FK_ERR_SHAPE)) == "shape mismatch");
  CHECK(fk_version()[0] != '\0');
  CHECK(std::string(fk_preset_names()) == "source-large,target-small");
}

TEST_CASE("scenes and rasters round trip through files") {
  fk_scene* s = nullptr;
  REQUIRE(fk_scene_generate(R"({"preset": "target-small", "height": 40, "width": 56, "seed": 3})", &s) == FK_OK);
  char* info = nullptr;
  REQUIRE(fk_scene_info(s, &info) == FK_OK);
  const auto j = Json::parse(take(info));
  CHECK(j["height"] == 40);
  CHECK(j["width"] == 56);
  CHECK(j["n_seasons"] == 3);

  fk_raster* img = nullptr;
  REQUIRE(fk_scene_season(s, 1, &img) == FK_OK);
  fk_dtype dt;
  int c, h, w;
  REQUIRE(fk_raster_info(img, &dt, &c, &h, &w) == FK_OK);
  CHECK(dt == FK_FLOAT32);
  CHECK(h == 40);
  CHECK(w == 56);
  CHECK(fk_scene_season(s, 3, &img) == FK_ERR_INVALID_ARGUMENT);

  const auto dir = scratch("raster");
  fs::create_directories(dir);
  REQUIRE(fk_raster_write(img, (dir / "img").c_str()) == FK_OK);
  fk_raster* back = nullptr;
  REQUIRE(fk_raster_read((dir / "img").c_str(), &back) == FK_OK);
  CHECK(std::memcmp(fk_raster_data(img), fk_raster_data(back), sizeof(float) * static_cast<std::size_t>(c * h * w)) == 0);

  REQUIRE(fk_scene_save(s, (dir / "scene").c_str()) == FK_OK);
  fk_scene* loaded = nullptr;
  REQUIRE(fk_scene_load((dir / "scene").c_str(), &loaded) == FK_OK);
  char* info2 = nullptr;
  REQUIRE(fk_scene_info(loaded, &info2) == FK_OK);
  CHECK(Json::parse(take(info2)) == j);

  fk_raster_free(img);
  fk_raster_free(back);
  fk_scene_free(s);
  fk_scene_free(loaded);
  fs::remove_all(dir);
}

TEST_CASE("vectorized field ids rasterize back to the same ids") {
  fk_scene* s = nullptr;
  REQUIRE(fk_scene_generate(R"({"preset": "target-small", "height": 48, "width": 48, "seed": 11})", &s) == FK_OK);
  fk_raster* ids = nullptr;
  REQUIRE(fk_scene_field_ids(s, &ids) == FK_OK);
  const auto dir = scratch("vector");
  fs::create_directories(dir);
  char* rep = nullptr;
  REQUIRE(fk_vectorize(ids, (dir / "fields.geojson").c_str(), &rep) == FK_OK);
  take(rep);

  char* info = nullptr;
  REQUIRE(fk_scene_info(s, &info) == FK_OK);
  const auto grid = Json::parse(take(info))["grid"].dump();
  REQUIRE(fk_rasterize((dir / "fields.geojson").c_str(), grid.c_str(), nullptr, (dir / "labels").c_str(), &rep) == FK_OK);
  take(rep);
  fk_raster* back = nullptr;
  REQUIRE(fk_raster_read((dir / "labels" / "field_ids").c_str(), &back) == FK_OK);
  int c, h, w;
  fk_dtype dt;
  REQUIRE(fk_raster_info(back, &dt, &c, &h, &w) == FK_OK);
  CHECK(dt == FK_UINT32);
  CHECK(std::memcmp(fk_raster_data(ids), fk_raster_data(back), sizeof(std::uint32_t) * static_cast<std::size_t>(h * w)) == 0);
  for (const char* f : {"extent", "boundary", "distance", "mask"}) CHECK(fs::exists(dir / "labels" / (std::string(f) + ".json")));

  CHECK(fk_rasterize((dir / "fields.geojson").c_str(), grid.c_str(), R"({"fields": [999999]})", (dir / "x").c_str(),
                     nullptr) == FK_ERR_INVALID_ARGUMENT);
  fk_raster_free(ids);
  fk_raster_free(back);
  fk_scene_free(s);
  fs::remove_all(dir);
}

TEST_CASE("domains: generation is deterministic, guarded, and resplittable") {
  const auto a = scratch("dom_a"), b = scratch("dom_b");
  char* sum = nullptr;
  REQUIRE(fk_domain_generate(kDomain, 5, a.c_str(), 0, &sum) == FK_OK);
  CHECK(Json::parse(take(sum))["n_scenes"] == 12);
  REQUIRE(fk_domain_generate(kDomain, 5, b.c_str(), 0, nullptr) == FK_OK);
  CHECK(slurp(a / "manifest.jsonl") == slurp(b / "manifest.jsonl"));
  CHECK(slurp(a / "splits.json") == slurp(b / "splits.json"));

  CHECK(fk_domain_generate(kDomain, 5, a.c_str(), 0, nullptr) == FK_ERR_INVALID_ARGUMENT);
  CHECK(std::string(fk_last_error()).find("--force") != std::string::npos);
  CHECK(fk_domain_generate(kDomain, 6, a.c_str(), 1, nullptr) == FK_OK);
  CHECK(slurp(a / "manifest.jsonl") != slurp(b / "manifest.jsonl"));
  CHECK(fk_domain_validate(R"({"preset": "atlantis"})") == FK_ERR_INVALID_ARGUMENT);
  CHECK(fk_domain_validate(kDomain) == FK_OK);

  const auto before = slurp(b / "manifest.jsonl");
  REQUIRE(fk_domain_split(b.c_str(), R"({"grid": [2, 2], "fractions": [0.5, 0.25, 0.25]})", 1, &sum) == FK_OK);
  const auto s = Json::parse(take(sum));
  CHECK(s["grid"] == Json::array({2, 2}));
  // Only the split fields of the manifest may change.
  auto strip = [](const std::string& text) {
    std::istringstream in(text);
    std::string line, out;
    while (std::getline(in, line)) {
      auto j = Json::parse(line);
      j.erase("split");
      out += j.dump() + "\n";
    }
    return out;
  };
  CHECK(strip(before) == strip(slurp(b / "manifest.jsonl")));
  CHECK(fk_domain_split(b.c_str(), R"({"grid": [2, 2], "bogus": 1})", 1, nullptr) == FK_ERR_FORMAT);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("train, save, predict, segment and evaluate") {
  const auto dom = scratch("pipe_dom"), out = scratch("pipe_out");
  fs::create_directories(out);
  REQUIRE(fk_domain_generate(kDomain, 2, dom.c_str(), 0, nullptr) == FK_OK);

  int lines = 0;
  auto progress = [](const char*, void* user) { ++*static_cast<int*>(user); };
  fk_model* m = nullptr;
  char* result = nullptr;
  REQUIRE(fk_train(kTrain, dom.c_str(), nullptr, (out / "log.csv").c_str(), progress, &lines, &m, &result) == FK_OK);
  const auto r = Json::parse(take(result));
  CHECK(lines == 2);
  CHECK(fs::exists(out / "log.csv"));
  REQUIRE(fk_model_save(m, (out / "model").c_str()) == FK_OK);
  fk_model* loaded = nullptr;
  REQUIRE(fk_model_load((out / "model").c_str(), &loaded) == FK_OK);
  char* info = nullptr;
  REQUIRE(fk_model_info(loaded, &info) == FK_OK);
  CHECK(Json::parse(take(info))["id"] == r["checkpoint_id"]);

  fk_model* ft = nullptr;
  REQUIRE(fk_train(kTrain, dom.c_str(), (out / "model").c_str(), nullptr, nullptr, nullptr, &ft, &result) == FK_OK);
  REQUIRE(fk_model_info(ft, &info) == FK_OK);
  CHECK(Json::parse(take(info))["provenance"]["parent_checkpoint_id"] == r["checkpoint_id"]);
  take(result);

  fk_scene* s = nullptr;
  REQUIRE(fk_scene_load((dom / "scenes" / "scene_0000").c_str(), &s) == FK_OK);
  fk_raster* maps = nullptr;
  REQUIRE(fk_predict_scene(loaded, s, nullptr, &maps) == FK_OK);
  int c, h, w;
  fk_dtype dt;
  REQUIRE(fk_raster_info(maps, &dt, &c, &h, &w) == FK_OK);
  CHECK(c == 3);
  CHECK(fk_predict_scene(loaded, s, R"({"mode": "stacked"})", &maps) == FK_ERR_SHAPE);
  CHECK(std::string(fk_last_error()).find("expects 3 input channels") != std::string::npos);

  fk_raster* inst = nullptr;
  char* seg = nullptr;
  REQUIRE(fk_segment(maps, nullptr, nullptr, &inst, &seg) == FK_OK);
  take(seg);
  // An all-zero crop mask removes every instance.
  fk_raster* ids = nullptr;
  REQUIRE(fk_scene_field_ids(s, &ids) == FK_OK);
  {
    std::ofstream meta(out / "zero.json");
    meta << Json{{"height", h}, {"width", w}, {"channels", 1}, {"pixel_size_m", 4.8}, {"origin_xy", {0.0, h * 4.8}},
                 {"band_names", {"crop"}}, {"dtype", "uint8"}}
                .dump();
    std::ofstream bin(out / "zero.bin", std::ios::binary);
    bin << std::string(static_cast<std::size_t>(h * w), '\0');
  }
  fk_raster* zero = nullptr;
  REQUIRE(fk_raster_read((out / "zero").c_str(), &zero) == FK_OK);
  fk_raster* none = nullptr;
  REQUIRE(fk_segment(maps, nullptr, zero, &none, &seg) == FK_OK);
  CHECK(Json::parse(take(seg))["n_instances"] == 0);
  CHECK(fk_segment(maps, nullptr, ids, &none, &seg) == FK_ERR_INVALID_ARGUMENT);

  char *report = nullptr, *csv = nullptr;
  REQUIRE(fk_evaluate(loaded, dom.c_str(), R"({"split": "test"})", &report, &csv) == FK_OK);
  const auto rep = Json::parse(take(report));
  CHECK(rep["split"] == "test");
  CHECK(rep["instance"]["n_fields"].get<int>() > 0);
  CHECK(take(csv).rfind("image,field_id", 0) == 0);

  for (auto* p : {maps, inst, ids, zero, none}) fk_raster_free(p);
  fk_scene_free(s);
  fk_model_free(m);
  fk_model_free(loaded);
  fk_model_free(ft);
  fs::remove_all(dom);
  fs::remove_all(out);
}

TEST_CASE("experiment configs are served and validated") {
  char* j = nullptr;
  REQUIRE(fk_experiment_default_config("transfer_matrix", &j) == FK_OK);
  CHECK(Json::parse(take(j))["scenario"] == "transfer_matrix");
  CHECK(fk_experiment_default_config("bogus", &j) == FK_ERR_INVALID_ARGUMENT);
  CHECK(fk_experiment_run(R"({"scenario": "budget_study", "budget_grid": [[25, 8], [100, 3]]})", 1, -1, nullptr,
                          nullptr, nullptr, nullptr) == FK_ERR_INVALID_ARGUMENT);
}
