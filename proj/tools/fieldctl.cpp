// Command-line front end. Talks to the toolkit through the C interface only.
#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>

#include "fieldkit/fieldkit.h"
#include "plot.hpp"
#include "quicklook.hpp"

namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Failure {
  int exit_code;
  std::string message;
};

[[noreturn]] void config_error(const std::string& msg) { throw Failure{kExitConfig, msg}; }
[[noreturn]] void runtime_error(const std::string& msg) { throw Failure{kExitRuntime, msg}; }

void check(fk_status s) {
  if (s == FK_OK) return;
  const bool config = s == FK_ERR_INVALID_ARGUMENT || s == FK_ERR_FORMAT;
  throw Failure{config ? kExitConfig : kExitRuntime, std::string(fk_status_name(s)) + ": " + fk_last_error()};
}

struct StrDeleter {
  void operator()(char* p) const { fk_string_free(p); }
};
using Str = std::unique_ptr<char, StrDeleter>;

struct RasterDeleter {
  void operator()(fk_raster* p) const { fk_raster_free(p); }
};
struct SceneDeleter {
  void operator()(fk_scene* p) const { fk_scene_free(p); }
};
struct ModelDeleter {
  void operator()(fk_model* p) const { fk_model_free(p); }
};
using RasterPtr = std::unique_ptr<fk_raster, RasterDeleter>;
using ScenePtr = std::unique_ptr<fk_scene, SceneDeleter>;
using ModelPtr = std::unique_ptr<fk_model, ModelDeleter>;

std::string take(char* s) {
  Str owned(s);
  return s ? std::string(s) : std::string();
}

Json load_config(const std::string& path) {
  if (path.empty()) return Json();
  std::ifstream in(path);
  if (!in) config_error("cannot read config " + path);
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    config_error("config " + path + " is not valid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) runtime_error("cannot write " + path.string());
  out << text;
  if (text.empty() || text.back() != '\n') out << '\n';
}

fs::path output_dir(const std::string& out) {
  if (out.empty()) config_error("--out is required");
  fs::create_directories(out);
  return out;
}

void print_progress(const char* line, void*) { std::cerr << line << std::endl; }

struct RasterView {
  fk_dtype dtype;
  int channels, height, width;
  const void* data;
};

RasterView view(const fk_raster* r) {
  RasterView v{};
  check(fk_raster_info(r, &v.dtype, &v.channels, &v.height, &v.width));
  v.data = fk_raster_data(r);
  return v;
}

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  int jobs = 1;
};

// generate ----------------------------------------------------------------------

void cmd_generate(const Globals& g) {
  if (g.config.empty()) config_error("generate needs --config");
  const auto cfg = load_config(g.config);
  const fs::path out = output_dir(g.out);
  std::vector<Json> domains;
  if (cfg.is_object() && cfg.contains("domains")) {
    if (!cfg.at("domains").is_array() || cfg.at("domains").empty()) config_error("\"domains\" must be a non-empty array");
    for (const auto& d : cfg.at("domains")) domains.push_back(d);
  } else {
    domains.push_back(cfg);
  }
  std::map<std::string, int> seen;
  for (auto& d : domains) {
    if (!d.is_object()) config_error("each domain config must be a JSON object");
    if (!d.contains("name")) d["name"] = "domain";
    const auto name = d.at("name").get<std::string>();
    if (name.empty() || name.find('/') != std::string::npos || name == "." || name == "..")
      config_error("invalid domain name '" + name + "'");
    if (seen[name]++) config_error("duplicate domain name '" + name + "'");
    check(fk_domain_validate(d.dump().c_str()));
    const fs::path dir = out / name;
    if (!g.force && fs::exists(dir) && !fs::is_empty(dir))
      config_error("refusing to overwrite " + dir.string() + " (use --force)");
  }
  const std::uint64_t seed = g.seed.value_or(0);
  for (std::size_t i = 0; i < domains.size(); ++i) {
    const auto& d = domains[i];
    const auto name = d.at("name").get<std::string>();
    char* summary = nullptr;
    // Several domains from one seed must not share scenes.
    const std::uint64_t s = domains.size() == 1 ? seed : seed + 1000003ULL * i;
    check(fk_domain_generate(d.dump().c_str(), s, (out / name).string().c_str(), g.force, &summary));
    std::cout << take(summary) << std::endl;
  }
}

// rasterize ---------------------------------------------------------------------

void cmd_rasterize(const Globals& g, std::string geojson, std::string like) {
  Json cfg = load_config(g.config);
  if (cfg.is_null()) cfg = Json::object();
  if (!cfg.is_object()) config_error("rasterize config must be a JSON object");
  for (const auto& [k, v] : cfg.items())
    if (k != "geojson" && k != "grid" && k != "like" && k != "options") config_error("unknown rasterize key '" + k + "'");
  if (geojson.empty()) geojson = cfg.value("geojson", std::string());
  if (like.empty()) like = cfg.value("like", std::string());
  if (geojson.empty()) config_error("rasterize needs --geojson or \"geojson\" in the config");
  Json grid;
  if (!like.empty()) {
    std::ifstream in(like + ".json");
    if (!in) config_error("cannot read raster header " + like + ".json");
    const auto meta = Json::parse(in);
    grid = {{"height", meta.at("height")},
            {"width", meta.at("width")},
            {"pixel_size_m", meta.at("pixel_size_m")},
            {"origin_xy", meta.at("origin_xy")}};
  } else if (cfg.contains("grid")) {
    grid = cfg.at("grid");
  } else {
    config_error("rasterize needs a grid: --like RASTER or \"grid\" in the config");
  }
  const auto opts = cfg.contains("options") ? cfg.at("options").dump() : std::string();
  const fs::path out = output_dir(g.out);
  char* report = nullptr;
  check(fk_rasterize(geojson.c_str(), grid.dump().c_str(), opts.empty() ? nullptr : opts.c_str(), out.string().c_str(),
                     &report));
  const auto text = take(report);
  write_text(out / "rasterize.json", Json::parse(text).dump(2));
  std::cout << text << std::endl;
}

// split -------------------------------------------------------------------------

void cmd_split(const Globals& g, const std::string& domain) {
  const auto cfg = load_config(g.config);
  char* summary = nullptr;
  const auto text = cfg.is_null() ? std::string() : cfg.dump();
  check(fk_domain_split(domain.c_str(), text.empty() ? nullptr : text.c_str(), g.seed.value_or(0), &summary));
  std::cout << take(summary) << std::endl;
}

// train / finetune --------------------------------------------------------------

void cmd_train(const Globals& g, const std::string& domain, const std::string& parent) {
  Json cfg = load_config(g.config);
  if (cfg.is_null()) cfg = Json::object();
  if (!cfg.is_object()) config_error("training config must be a JSON object");
  if (g.seed) cfg["training"]["seed"] = *g.seed;
  const fs::path out = output_dir(g.out);
  if (!g.force && fs::exists(out / "model.json")) config_error("refusing to overwrite " + (out / "model").string() + " (use --force)");
  fk_model* raw = nullptr;
  char* result = nullptr;
  check(fk_train(cfg.dump().c_str(), domain.c_str(), parent.empty() ? nullptr : parent.c_str(),
                 (out / "training_log.csv").string().c_str(), print_progress, nullptr, &raw, &result));
  ModelPtr model(raw);
  check(fk_model_save(model.get(), (out / "model").string().c_str()));
  auto j = Json::parse(take(result));
  write_text(out / "train.json", j.dump(2));
  std::cout << "checkpoint " << j.at("checkpoint_id").get<std::string>() << " best epoch " << j.at("best_epoch")
            << " val MCC " << j.at("best_val_mcc") << std::endl;
}

// segment -----------------------------------------------------------------------

void cmd_segment(const Globals& g, const std::string& model_stem, const std::string& scene_dir,
                 const std::string& image_stem, const std::string& cropmask_stem, const std::string& mode, int season) {
  if (model_stem.empty()) config_error("segment needs --model");
  if (scene_dir.empty() == image_stem.empty()) config_error("segment needs exactly one of --scene or --image");
  const auto params = load_config(g.config);
  const fs::path out = output_dir(g.out);

  fk_model* m = nullptr;
  check(fk_model_load(model_stem.c_str(), &m));
  ModelPtr model(m);

  RasterPtr image, maps;
  fk_raster* raw = nullptr;
  if (!scene_dir.empty()) {
    fk_scene* s = nullptr;
    check(fk_scene_load(scene_dir.c_str(), &s));
    ScenePtr scene(s);
    const Json mj = {{"mode", mode}, {"season", season}};
    check(fk_predict_scene(model.get(), scene.get(), mj.dump().c_str(), &raw));
    maps.reset(raw);
    check(fk_scene_season(scene.get(), season, &raw));
    image.reset(raw);
  } else {
    check(fk_raster_read(image_stem.c_str(), &raw));
    image.reset(raw);
    check(fk_predict(model.get(), image.get(), &raw));
    maps.reset(raw);
  }

  RasterPtr cropmask;
  if (!cropmask_stem.empty()) {
    check(fk_raster_read(cropmask_stem.c_str(), &raw));
    cropmask.reset(raw);
  }
  char* info = nullptr;
  const auto ptext = params.is_null() ? std::string() : params.dump();
  check(fk_segment(maps.get(), ptext.empty() ? nullptr : ptext.c_str(), cropmask.get(), &raw, &info));
  RasterPtr instances(raw);
  auto ij = Json::parse(take(info));

  check(fk_raster_write(maps.get(), (out / "maps").string().c_str()));
  check(fk_raster_write(instances.get(), (out / "instances").string().c_str()));
  char* vreport = nullptr;
  check(fk_vectorize(instances.get(), (out / "fields.geojson").string().c_str(), &vreport));
  ij["vectorize"] = Json::parse(take(vreport));
  write_text(out / "segment.json", ij.dump(2));

  const auto iv = view(image.get());
  if (iv.dtype != FK_FLOAT32) runtime_error("quicklook needs float imagery");
  auto rgb = fieldctl::stretch(static_cast<const float*>(iv.data), iv.channels, iv.height, iv.width);
  fieldctl::overlay_edges(rgb, static_cast<const std::uint32_t*>(fk_raster_data(instances.get())), 255, 230, 0);
  fieldctl::write_png((out / "quicklook.png").string(), rgb);

  const int n = ij.at("n_instances").get<int>();
  if (n == 0)
    std::cerr << "warning: no field instances"
              << (cropmask ? " remain after the crop mask" : " were found") << std::endl;
  std::cout << n << " field instances written to " << (out / "fields.geojson").string() << std::endl;
}

// evaluate ----------------------------------------------------------------------

fieldctl::Series iou_series(const Json& curve, const std::string& label) {
  fieldctl::Series s;
  s.label = label;
  for (const auto& [k, v] : curve.items()) {
    s.x.push_back(std::stod(k));
    s.y.push_back(v.is_null() ? NAN : v.get<double>());
  }
  return s;
}

void cmd_evaluate(const Globals& g, const std::string& model_stem, const std::string& domain) {
  if (model_stem.empty()) config_error("evaluate needs --model");
  const auto cfg = load_config(g.config);
  const fs::path out = output_dir(g.out);
  fk_model* m = nullptr;
  check(fk_model_load(model_stem.c_str(), &m));
  ModelPtr model(m);
  char *report = nullptr, *csv = nullptr;
  const auto text = cfg.is_null() ? std::string() : cfg.dump();
  check(fk_evaluate(model.get(), domain.c_str(), text.empty() ? nullptr : text.c_str(), &report, &csv));
  const auto rj = Json::parse(take(report));
  write_text(out / "report.json", rj.dump(2));
  write_text(out / "per_field.csv", take(csv));

  fieldctl::LineChart chart;
  chart.title = "Fields above an IoU threshold";
  chart.x_label = "IoU threshold (%)";
  chart.y_label = "fraction of fields";
  chart.x_max = 100;
  chart.series.push_back(iou_series(rj.at("instance").at("iou_k"), "split " + rj.value("split", std::string("test"))));
  write_text(out / "iou_curve.svg", fieldctl::render_svg(chart));

  auto show = [](const Json& v) { return v.is_null() ? std::string("undefined") : std::to_string(v.get<double>()); };
  std::cout << "OA " << show(rj["pixel"]["oa"]) << "  F1 " << show(rj["pixel"]["f1"]) << "  MCC "
            << show(rj["pixel"]["mcc"]) << "  median IoU " << show(rj["instance"]["median_iou"]) << "  fields "
            << rj["instance"]["n_fields"] << std::endl;
}

// experiment --------------------------------------------------------------------

double num_or_nan(const Json& v) { return v.is_null() ? NAN : v.get<double>(); }

void experiment_plots(const Json& report, const fs::path& out) {
  const auto scenario = report.at("scenario").get<std::string>();
  const auto& summary = report.at("summary");

  // Mean MCC per cell with per-seed points.
  fieldctl::LineChart bars;
  bars.title = report.at("experiment").get<std::string>() + ": test MCC per cell";
  bars.x_label = "cell";
  bars.y_label = "MCC";
  bars.y_min = 0;
  bars.y_max = 1;
  fieldctl::Series mean{"mean ± std", {}, {}, {}, true}, seeds{"per seed", {}, {}, {}, true};
  std::map<std::pair<std::string, int>, std::size_t> index;
  for (const auto& s : summary) {
    const auto label = s.at("cell").get<std::string>() +
                       (scenario == "label_efficiency" ? " " + std::to_string(s.at("param").get<int>()) : "");
    index[{s.at("cell").get<std::string>(), s.at("param").get<int>()}] = bars.categories.size();
    mean.x.push_back(static_cast<double>(bars.categories.size()));
    mean.y.push_back(num_or_nan(s.at("mcc").at("mean")));
    mean.err.push_back(num_or_nan(s.at("mcc").at("std")));
    bars.categories.push_back(label);
  }
  for (const auto& r : report.at("runs")) {
    const auto it = index.find({r.at("cell").get<std::string>(), r.at("param").get<int>()});
    if (it == index.end() || r.at("status") != "ok") continue;
    seeds.x.push_back(static_cast<double>(it->second) + 0.15);
    seeds.y.push_back(num_or_nan(r.at("mcc")));
  }
  bars.x_min = -0.5;
  bars.x_max = static_cast<double>(bars.categories.size()) - 0.5;
  bars.series = {mean, seeds};
  write_text(out / "mcc.svg", fieldctl::render_svg(bars));

  if (scenario != "label_efficiency") return;
  fieldctl::LineChart curve;
  curve.title = "MCC against labeled target fields";
  curve.x_label = "labeled fields";
  curve.y_label = "MCC";
  curve.log_x = true;
  curve.y_min = 0;
  curve.y_max = 1;
  std::map<std::string, fieldctl::Series> by_cell;
  double lo = INFINITY, hi = 0;
  for (const auto& s : summary) {
    // Cells without a label count (the pretraining run) are not on the curve.
    if (s.at("param").get<int>() <= 0) continue;
    auto& sr = by_cell[s.at("cell").get<std::string>()];
    sr.label = s.at("cell").get<std::string>();
    const double x = s.at("param").get<int>();
    sr.x.push_back(x);
    sr.y.push_back(num_or_nan(s.at("mcc").at("mean")));
    sr.err.push_back(num_or_nan(s.at("mcc").at("std")));
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  if (by_cell.empty()) return;
  curve.x_min = lo * 0.8;
  curve.x_max = hi * 1.25;
  for (auto& [k, s] : by_cell) curve.series.push_back(s);
  write_text(out / "label_efficiency.svg", fieldctl::render_svg(curve));
}

void cmd_experiment(const Globals& g, const std::string& scenario, bool print_config) {
  if (print_config) {
    if (scenario.empty()) config_error("--print-config needs --scenario");
    char* j = nullptr;
    check(fk_experiment_default_config(scenario.c_str(), &j));
    std::cout << take(j) << std::endl;
    return;
  }
  Json cfg = load_config(g.config);
  if (cfg.is_null()) {
    if (scenario.empty()) config_error("experiment needs --config or --scenario");
    cfg = {{"scenario", scenario}};
  } else if (!scenario.empty()) {
    cfg["scenario"] = scenario;
  }
  const fs::path out = output_dir(g.out);
  if (!g.force && fs::exists(out / "report.json")) config_error("refusing to overwrite " + (out / "report.json").string() + " (use --force)");
  char* report = nullptr;
  check(fk_experiment_run(cfg.dump().c_str(), g.jobs, g.seed ? static_cast<std::int64_t>(*g.seed) : -1, print_progress,
                          nullptr, out.string().c_str(), &report));
  const auto rj = Json::parse(take(report));
  experiment_plots(rj, out);

  std::ifstream summary(out / "summary.csv");
  std::cout << summary.rdbuf();
  std::size_t failed = 0, runs = 0;
  for (const auto& r : rj.at("runs")) {
    ++runs;
    if (r.at("status") != "ok") {
      ++failed;
      std::cerr << "warning: " << r.at("cell").get<std::string>() << " seed " << r.at("seed") << " failed: "
                << r.value("error", std::string()) << std::endl;
    }
  }
  for (const auto& c : rj.at("checks"))
    std::cout << (c.at("passed").get<bool>() ? "PASS " : "FAIL ") << c.at("name").get<std::string>() << ": "
              << c.at("detail").get<std::string>() << "\n";
  for (const auto& r : rj.at("references")) std::cout << "reference " << r.get<std::string>() << "\n";
  if (runs > 0 && failed == runs) runtime_error("every run failed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Crop field delineation toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON config file");
  app.add_option("--seed", g.seed, "Seed");
  app.add_option("--out", g.out, "Output directory");
  app.add_flag("--force", g.force, "Overwrite existing outputs");
  app.add_option("--jobs", g.jobs, "Worker threads")->check(CLI::Range(1, 1024));
  app.add_flag_callback("--version", [] {
    std::cout << "fieldctl " << fk_version() << std::endl;
    throw CLI::Success();
  });

  auto* gen = app.add_subcommand("generate", "Write synthetic domains (one or {\"domains\": [...]})");
  auto* ras = app.add_subcommand("rasterize", "Label rasters from GeoJSON field polygons");
  std::string geojson, like;
  ras->add_option("--geojson", geojson, "Field polygons");
  ras->add_option("--like", like, "Raster stem whose grid the labels follow");
  auto* spl = app.add_subcommand("split", "Reassign train/val/test grid cells of a domain");
  std::string domain;
  spl->add_option("domain", domain, "Domain directory")->required();
  auto* trn = app.add_subcommand("train", "Train a model on a domain");
  trn->add_option("domain", domain, "Domain directory")->required();
  auto* fin = app.add_subcommand("finetune", "Finetune a checkpoint on a domain");
  std::string parent;
  fin->add_option("domain", domain, "Domain directory")->required();
  fin->add_option("--parent", parent, "Checkpoint stem to start from")->required();
  auto* seg = app.add_subcommand("segment", "Predict, delineate and vectorize fields");
  std::string model, scene, image, cropmask, mode = "single";
  int season = 0;
  seg->add_option("--model", model, "Checkpoint stem");
  seg->add_option("--scene", scene, "Scene directory");
  seg->add_option("--image", image, "Float raster stem");
  seg->add_option("--cropmask", cropmask, "uint8 crop mask raster stem");
  seg->add_option("--mode", mode, "Temporal mode for scenes")->check(CLI::IsMember({"single", "separate", "stacked"}));
  seg->add_option("--season", season, "Season used in single mode");
  auto* evl = app.add_subcommand("evaluate", "Evaluate a model on a domain split");
  evl->add_option("domain", domain, "Domain directory")->required();
  evl->add_option("--model", model, "Checkpoint stem");
  auto* exp = app.add_subcommand("experiment", "Run a scenario grid and write reports and plots");
  std::string scenario;
  bool print_config = false;
  exp->add_option("--scenario", scenario, "budget_study | transfer_matrix | label_efficiency | temporal_mode");
  exp->add_flag("--print-config", print_config, "Print the default config of --scenario");
  for (auto* sub : {gen, ras, spl, trn, fin, seg, evl, exp}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  fk_set_threads(g.jobs);
  try {
    if (gen->parsed()) cmd_generate(g);
    if (ras->parsed()) cmd_rasterize(g, geojson, like);
    if (spl->parsed()) cmd_split(g, domain);
    if (trn->parsed()) cmd_train(g, domain, {});
    if (fin->parsed()) cmd_train(g, domain, parent);
    if (seg->parsed()) cmd_segment(g, model, scene, image, cropmask, mode, season);
    if (evl->parsed()) cmd_evaluate(g, model, domain);
    if (exp->parsed()) cmd_experiment(g, scenario, print_config);
  } catch (const Failure& f) {
    std::cerr << "fieldctl: " << f.message << std::endl;
    return f.exit_code;
  } catch (const Json::exception& e) {
    std::cerr << "fieldctl: malformed JSON: " << e.what() << std::endl;
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "fieldctl: " << e.what() << std::endl;
    return kExitRuntime;
  }
  return 0;
}
