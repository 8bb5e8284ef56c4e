#include "fieldkit/fieldkit.h"

#include <cstring>
#include <filesystem>
#include <new>
#include <variant>

#include "fieldkit/pipeline.hpp"

using namespace fieldkit;

struct fk_raster {
  std::variant<FloatRaster, ByteRaster, IdRaster> r;
};

struct fk_scene {
  synth::SyntheticScene s;
};

struct fk_model {
  net::Checkpoint ck;
  net::Network<float> net;
};

namespace {

thread_local std::string t_error;

fk_status fail(fk_status s, const std::string& msg) {
  t_error = msg;
  return s;
}

template <typename F>
fk_status guard(F&& f) {
  try {
    f();
    return FK_OK;
  } catch (const Error& e) {
    return fail(static_cast<fk_status>(e.code()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(FK_ERR_FORMAT, std::string("malformed JSON: ") + e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(FK_ERR_IO, e.what());
  } catch (const std::bad_alloc&) {
    return fail(FK_ERR_RUNTIME, "out of memory");
  } catch (const std::exception& e) {
    return fail(FK_ERR_RUNTIME, e.what());
  }
}

void need(const void* p, const char* name) {
  if (!p) throw InvalidArgument(std::string(name) + " must not be null");
}

char* dup(const std::string& s) {
  auto* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void put(char** out, const std::string& s) {
  if (out) *out = dup(s);
}

Json parse(const char* text) {
  if (!text || !*text) return Json();
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("malformed JSON argument: ") + e.what());
  }
}

Json grid_json(const GridGeometry& g) {
  return {{"height", g.height}, {"width", g.width}, {"pixel_size_m", g.pixel_size}, {"origin_xy", {g.origin.x, g.origin.y}}};
}

GridGeometry grid_from(const Json& j) {
  GridGeometry g;
  g.height = j.at("height").get<int>();
  g.width = j.at("width").get<int>();
  g.pixel_size = j.value("pixel_size_m", 1.0);
  if (j.contains("origin_xy")) {
    g.origin = {j.at("origin_xy").at(0).get<double>(), j.at("origin_xy").at(1).get<double>()};
  } else {
    g.origin = {0.0, g.height * g.pixel_size};
  }
  g.validate();
  return g;
}

const FloatRaster& as_float(const fk_raster* r, const char* what) {
  need(r, what);
  if (auto* f = std::get_if<FloatRaster>(&r->r)) return *f;
  throw InvalidArgument(std::string(what) + " must be a float32 raster");
}

train::TrainHooks hooks_for(fk_progress_fn progress, void* user, const char* log_csv) {
  train::TrainHooks h;
  if (log_csv) h.log_csv = std::filesystem::path(log_csv);
  if (progress)
    h.on_epoch = [progress, user](const train::EpochLog& e) {
      char line[200];
      std::snprintf(line, sizeof line, "epoch %d train_loss=%.5f val_mcc=%.4f", e.epoch, e.train_loss, e.val_mcc);
      progress(line, user);
    };
  return h;
}

Json train_result_json(const train::TrainResult& r) {
  Json log = Json::array();
  for (const auto& e : r.log)
    log.push_back({{"epoch", e.epoch},
                   {"train_loss", eval::metric_json(e.train_loss)},
                   {"val_oa", eval::metric_json(e.val_oa)},
                   {"val_f1", eval::metric_json(e.val_f1)},
                   {"val_mcc", eval::metric_json(e.val_mcc)}});
  return {{"checkpoint_id", r.checkpoint.id()},
          {"best_epoch", r.best_epoch},
          {"best_val_mcc", eval::metric_json(r.best_val_mcc)},
          {"epochs_run", static_cast<int>(r.log.size()) - 1},
          {"log", log}};
}

bool non_empty_dir(const std::filesystem::path& p) {
  return std::filesystem::exists(p) && (!std::filesystem::is_directory(p) || !std::filesystem::is_empty(p));
}

}  // namespace

extern "C" {

const char* fk_version(void) { return "0.1.0"; }

const char* fk_last_error(void) { return t_error.c_str(); }

const char* fk_status_name(fk_status s) {
  switch (s) {
    case FK_OK: return "ok";
    case FK_ERR_INVALID_ARGUMENT: return "invalid argument";
    case FK_ERR_SHAPE: return "shape mismatch";
    case FK_ERR_IO: return "i/o error";
    case FK_ERR_FORMAT: return "format error";
    case FK_ERR_UNSUPERVISABLE: return "unsupervisable";
    case FK_ERR_NUMERIC: return "numeric error";
    case FK_ERR_RUNTIME: return "runtime error";
  }
  return "unknown status";
}

void fk_string_free(char* s) { std::free(s); }

void fk_set_threads(int n) { set_num_threads(n); }

// Rasters ---------------------------------------------------------------------

fk_status fk_raster_read(const char* stem, fk_raster** out) {
  return guard([&] {
    need(stem, "stem");
    need(out, "out");
    const auto meta = read_json_file(std::string(stem) + ".json");
    const auto dtype = dtype_from_name(meta.at("dtype").get<std::string>());
    auto* r = new fk_raster;
    try {
      switch (dtype) {
        case DType::Float32: r->r = read_raster<float>(stem); break;
        case DType::UInt8: r->r = read_raster<std::uint8_t>(stem); break;
        case DType::UInt32: r->r = read_raster<std::uint32_t>(stem); break;
      }
    } catch (...) {
      delete r;
      throw;
    }
    *out = r;
  });
}

fk_status fk_raster_write(const fk_raster* r, const char* stem) {
  return guard([&] {
    need(r, "raster");
    need(stem, "stem");
    std::visit([&](const auto& x) { write_raster(x, stem); }, r->r);
  });
}

fk_status fk_raster_info(const fk_raster* r, fk_dtype* dtype, int* channels, int* height, int* width) {
  return guard([&] {
    need(r, "raster");
    std::visit(
        [&](const auto& x) {
          using T = std::decay_t<decltype(x.data[0])>;
          if (dtype) *dtype = std::is_same_v<T, float> ? FK_FLOAT32 : std::is_same_v<T, std::uint8_t> ? FK_UINT8 : FK_UINT32;
          if (channels) *channels = x.channels;
          if (height) *height = x.height();
          if (width) *width = x.width();
        },
        r->r);
  });
}

const void* fk_raster_data(const fk_raster* r) {
  if (!r) return nullptr;
  return std::visit([](const auto& x) { return static_cast<const void*>(x.data.data()); }, r->r);
}

void fk_raster_free(fk_raster* r) { delete r; }

// Scenes ------------------------------------------------------------------------

fk_status fk_scene_generate(const char* spec_json, fk_scene** out) {
  return guard([&] {
    need(out, "out");
    const auto j = parse(spec_json);
    const auto spec = j.is_null() ? synth::LandscapeSpec{} : synth::spec_from_json(j);
    *out = new fk_scene{synth::generate_landscape(spec)};
  });
}

fk_status fk_scene_load(const char* dir, fk_scene** out) {
  return guard([&] {
    need(dir, "dir");
    need(out, "out");
    *out = new fk_scene{synth::load_scene(dir)};
  });
}

fk_status fk_scene_save(const fk_scene* s, const char* dir) {
  return guard([&] {
    need(s, "scene");
    need(dir, "dir");
    synth::save_scene(s->s, dir);
  });
}

fk_status fk_scene_info(const fk_scene* s, char** json) {
  return guard([&] {
    need(s, "scene");
    Json j;
    j["spec"] = synth::spec_to_json(s->s.spec);
    j["height"] = s->s.grid().height;
    j["width"] = s->s.grid().width;
    j["grid"] = grid_json(s->s.grid());
    j["n_fields"] = data::all_fields(s->s).size();
    j["n_seasons"] = s->s.imagery.size();
    j["field_areas_px"] = synth::field_areas_px(s->s);
    put(json, j.dump());
  });
}

fk_status fk_scene_season(const fk_scene* s, int season, fk_raster** out) {
  return guard([&] {
    need(s, "scene");
    need(out, "out");
    if (season < 0 || season >= static_cast<int>(s->s.imagery.size()))
      throw InvalidArgument("season " + std::to_string(season) + " out of range (scene has " +
                            std::to_string(s->s.imagery.size()) + ")");
    *out = new fk_raster{s->s.imagery[static_cast<std::size_t>(season)]};
  });
}

fk_status fk_scene_field_ids(const fk_scene* s, fk_raster** out) {
  return guard([&] {
    need(s, "scene");
    need(out, "out");
    *out = new fk_raster{s->s.field_ids};
  });
}

void fk_scene_free(fk_scene* s) { delete s; }

const char* fk_preset_names(void) {
  static const std::string names = [] {
    std::string out;
    for (const auto& n : synth::preset_names()) out += (out.empty() ? "" : ",") + n;
    return out;
  }();
  return names.c_str();
}

}  // extern "C"

// Domains -----------------------------------------------------------------------

namespace {

std::pair<std::string, xp::DomainConfig> domain_config(const char* config_json) {
  auto j = parse(config_json);
  if (j.is_null()) j = Json::object();
  if (!j.is_object()) throw FormatError("domain config must be a JSON object");
  const std::string name = j.value("name", std::string("domain"));
  j.erase("name");
  auto cfg = xp::domain_config_from_json(j);
  cfg.spec.validate();
  return {name, std::move(cfg)};
}

}  // namespace

extern "C" {

fk_status fk_domain_validate(const char* config_json) {
  return guard([&] { domain_config(config_json); });
}

fk_status fk_domain_generate(const char* config_json, uint64_t seed, const char* dir, int force, char** summary_json) {
  return guard([&] {
    need(dir, "dir");
    const auto [name, cfg] = domain_config(config_json);
    if (non_empty_dir(dir) && !force)
      throw InvalidArgument(std::string("refusing to overwrite ") + dir + " (use --force)");
    if (force && std::filesystem::exists(dir)) std::filesystem::remove_all(dir);
    const auto d = data::generate_domain(name, cfg.spec, cfg.options, seed);
    data::save_domain(d, dir);
    Json s;
    s["name"] = name;
    s["seed"] = seed;
    s["n_scenes"] = d.scenes.size();
    s["splits"] = {{"train", d.indices(data::Split::Train).size()},
                   {"val", d.indices(data::Split::Val).size()},
                   {"test", d.indices(data::Split::Test).size()}};
    std::size_t fields = 0;
    for (const auto& sc : d.scenes) fields += data::all_fields(sc).size();
    s["n_fields"] = fields;
    put(summary_json, s.dump());
  });
}

fk_status fk_domain_split(const char* dir, const char* split_json, uint64_t seed, char** summary_json) {
  return guard([&] {
    need(dir, "dir");
    const std::filesystem::path root(dir);
    const auto meta = read_json_file(root / "domain.json");
    std::vector<Point> locations;
    for (const auto& p : meta.at("locations")) locations.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    const auto old = data::split_from_json(read_json_file(root / "splits.json"));
    int rows = old.rows, cols = old.cols;
    auto fractions = old.fractions;
    const auto j = parse(split_json);
    if (!j.is_null()) {
      for (const auto& [k, v] : j.items())
        if (k != "grid" && k != "fractions") throw FormatError("unknown split key '" + k + "'");
      if (j.contains("grid")) {
        rows = j.at("grid").at(0).get<int>();
        cols = j.at("grid").at(1).get<int>();
      }
      if (j.contains("fractions")) fractions = j.at("fractions").get<std::array<double, 3>>();
    }
    const auto a = data::assign_splits(locations, rows, cols, fractions, seed);
    auto records = data::read_manifest(root / "manifest.jsonl");
    if (records.size() != locations.size()) throw FormatError("manifest and domain.json disagree on scene count");
    std::array<std::size_t, 3> counts{0, 0, 0};
    for (std::size_t i = 0; i < records.size(); ++i) {
      records[i].split = a.split_of(locations[i]);
      ++counts[static_cast<std::size_t>(records[i].split)];
    }
    write_json_file(root / "splits.json", data::split_to_json(a));
    data::write_manifest(root / "manifest.jsonl", records);
    const auto realized = a.realized();
    put(summary_json, Json{{"grid", {rows, cols}},
                           {"scenes", {{"train", counts[0]}, {"val", counts[1]}, {"test", counts[2]}}},
                           {"cell_fractions", realized}}
                          .dump());
  });
}

// Labels ------------------------------------------------------------------------

fk_status fk_rasterize(const char* geojson_path, const char* grid_json, const char* options_json, const char* out_dir,
                       char** report_json) {
  return guard([&] {
    need(geojson_path, "geojson_path");
    need(out_dir, "out_dir");
    const auto grid = grid_from(parse(grid_json));
    const auto polys = geom::read_geojson(geojson_path);
    geom::LabelOptions lo;
    std::vector<geom::FieldPolygon> labeled;
    const auto o = parse(options_json);
    if (!o.is_null()) {
      for (const auto& [k, v] : o.items())
        if (k != "boundary_thickness" && k != "mask_dilation" && k != "fields")
          throw FormatError("unknown rasterize option '" + k + "'");
      lo.boundary_thickness = o.value("boundary_thickness", lo.boundary_thickness);
      lo.mask_dilation = o.value("mask_dilation", lo.mask_dilation);
    }
    if (!o.is_null() && o.contains("fields")) {
      for (auto id : o.at("fields").get<std::vector<std::int64_t>>()) {
        auto it = std::find_if(polys.begin(), polys.end(), [&](const auto& p) { return p.id == id; });
        if (it == polys.end()) throw InvalidArgument("field id " + std::to_string(id) + " not in " + geojson_path);
        labeled.push_back(*it);
      }
    } else {
      labeled = polys;
    }
    geom::RasterizeReport rep;
    const auto stack = geom::make_label_stack(labeled, grid, lo, &rep);
    const std::filesystem::path out(out_dir);
    std::filesystem::create_directories(out);
    auto named = [](auto r, const char* band) {
      r.band_names = {band};
      return r;
    };
    write_raster(named(stack.extent, "extent"), out / "extent");
    write_raster(named(stack.boundary, "boundary"), out / "boundary");
    write_raster(named(stack.distance, "distance"), out / "distance");
    write_raster(named(stack.mask, "mask"), out / "mask");
    auto ids = geom::rasterize_ids(labeled, grid);
    write_raster(named(ids, "field_id"), out / "field_ids");
    Json r;
    r["n_polygons"] = polys.size();
    r["n_labeled"] = labeled.size();
    r["skipped_ids"] = rep.skipped_ids;
    r["warnings"] = rep.warnings;
    put(report_json, r.dump());
  });
}

// Models ------------------------------------------------------------------------

fk_status fk_model_load(const char* stem, fk_model** out) {
  return guard([&] {
    need(stem, "stem");
    need(out, "out");
    auto ck = net::load_checkpoint(stem);
    auto n = net::network_from_checkpoint(ck);
    *out = new fk_model{std::move(ck), std::move(n)};
  });
}

fk_status fk_model_save(const fk_model* m, const char* stem) {
  return guard([&] {
    need(m, "model");
    need(stem, "stem");
    net::save_checkpoint(m->ck, stem);
  });
}

fk_status fk_model_info(const fk_model* m, char** json) {
  return guard([&] {
    need(m, "model");
    Json j;
    j["id"] = m->ck.id();
    j["spec"] = net::spec_to_json(m->ck.spec);
    Json p;
    p["train_dataset_id"] = m->ck.provenance.train_dataset_id;
    p["epoch"] = m->ck.provenance.epoch;
    p["val_mcc"] = eval::metric_json(m->ck.provenance.val_mcc);
    p["parent_checkpoint_id"] = m->ck.provenance.parent_checkpoint_id ? Json(*m->ck.provenance.parent_checkpoint_id) : Json();
    j["provenance"] = p;
    std::size_t n = 0;
    for (const auto& v : m->ck.values) n += v.size();
    j["n_parameters"] = n;
    put(json, j.dump());
  });
}

void fk_model_free(fk_model* m) { delete m; }

fk_status fk_train(const char* config_json, const char* domain_dir, const char* parent_stem, const char* log_csv,
                   fk_progress_fn progress, void* user, fk_model** out, char** result_json) {
  return guard([&] {
    need(domain_dir, "domain_dir");
    need(out, "out");
    auto j = parse(config_json);
    if (j.is_null()) j = Json::object();
    const auto d = data::load_domain(domain_dir);
    if (d.scenes.empty()) throw InvalidArgument("domain has no scenes");
    const int bands = d.scenes.front().imagery.front().channels;
    const auto req = pipe::request_from_json(j, bands, static_cast<int>(d.scenes.front().imagery.size()));
    std::optional<net::Checkpoint> parent;
    if (parent_stem) parent = net::load_checkpoint(parent_stem);
    auto r = pipe::train_on_domain(d, req, parent ? &*parent : nullptr, hooks_for(progress, user, log_csv));
    auto n = net::network_from_checkpoint(r.checkpoint);
    if (result_json) put(result_json, train_result_json(r).dump(2));
    *out = new fk_model{std::move(r.checkpoint), std::move(n)};
  });
}

fk_status fk_predict(fk_model* m, const fk_raster* image, fk_raster** maps) {
  return guard([&] {
    need(m, "model");
    need(maps, "maps");
    const auto& img = as_float(image, "image");
    if (img.channels != m->ck.spec.in_channels)
      throw ShapeError("model expects " + std::to_string(m->ck.spec.in_channels) + " input channels, image has " +
                       std::to_string(img.channels));
    const auto p = train::predict(m->net, img);
    FloatRaster out(img.grid, 3);
    for (int c = 0; c < 3; ++c) std::copy(p[c].data.begin(), p[c].data.end(), out.plane(c).begin());
    out.band_names = {"extent", "boundary", "distance"};
    *maps = new fk_raster{std::move(out)};
  });
}

fk_status fk_predict_scene(fk_model* m, const fk_scene* s, const char* mode_json, fk_raster** maps) {
  return guard([&] {
    need(m, "model");
    need(s, "scene");
    need(maps, "maps");
    xp::InputMode mode;
    const auto j = parse(mode_json);
    if (!j.is_null()) {
      if (j.contains("mode")) mode.mode = data::temporal_mode_from_name(j.at("mode").get<std::string>());
      mode.season = j.value("season", 0);
    }
    const int bands = s->s.imagery.front().channels;
    const int expected = mode.mode == data::TemporalMode::Stacked ? bands * static_cast<int>(s->s.imagery.size()) : bands;
    if (expected != m->ck.spec.in_channels)
      throw ShapeError("model expects " + std::to_string(m->ck.spec.in_channels) + " input channels, " +
                       data::temporal_mode_name(mode.mode) + " input of this scene has " + std::to_string(expected));
    const auto p = xp::predict_scene(m->net, s->s, mode);
    FloatRaster out(s->s.grid(), 3);
    for (int c = 0; c < 3; ++c) std::copy(p[c].data.begin(), p[c].data.end(), out.plane(c).begin());
    out.band_names = {"extent", "boundary", "distance"};
    *maps = new fk_raster{std::move(out)};
  });
}

// Instances ---------------------------------------------------------------------

fk_status fk_segment(const fk_raster* maps, const char* params_json, const fk_raster* cropmask, fk_raster** instances,
                     char** info_json) {
  return guard([&] {
    need(instances, "instances");
    const auto& m = as_float(maps, "maps");
    if (m.channels < 2) throw ShapeError("segmentation needs extent and boundary bands");
    const auto j = parse(params_json);
    const auto params = j.is_null() ? inst::WatershedParams{} : inst::params_from_json(j);
    FloatRaster extent(m.grid, 1), boundary(m.grid, 1);
    std::copy(m.plane(0).begin(), m.plane(0).end(), extent.data.begin());
    std::copy(m.plane(1).begin(), m.plane(1).end(), boundary.data.begin());
    auto result = inst::watershed_segment(extent, boundary, params);
    const auto before = result.n_instances;
    if (cropmask) {
      const auto* mask = std::get_if<ByteRaster>(&cropmask->r);
      if (!mask) throw InvalidArgument("crop mask must be a uint8 raster");
      result = inst::apply_cropland_mask(result, *mask);
    }
    result.labels.band_names = {"instance_id"};
    put(info_json, Json{{"n_instances", result.n_instances},
                        {"n_before_mask", before},
                        {"params", inst::params_to_json(params)}}
                       .dump());
    *instances = new fk_raster{std::move(result.labels)};
  });
}

fk_status fk_vectorize(const fk_raster* instances, const char* geojson_path, char** report_json) {
  return guard([&] {
    need(instances, "instances");
    need(geojson_path, "geojson_path");
    const auto* ids = std::get_if<IdRaster>(&instances->r);
    if (!ids) throw InvalidArgument("instances must be a uint32 raster");
    geom::VectorizeReport rep;
    const auto polys = geom::vectorize_instances(*ids, &rep);
    geom::write_geojson(geojson_path, polys);
    put(report_json, Json{{"n_polygons", polys.size()}, {"skipped_ids", rep.skipped_ids}, {"warnings", rep.warnings}}.dump());
  });
}

// Evaluation and experiments ----------------------------------------------------

fk_status fk_evaluate(fk_model* m, const char* domain_dir, const char* options_json, char** report_json,
                      char** per_field_csv) {
  return guard([&] {
    need(m, "model");
    need(domain_dir, "domain_dir");
    const auto req = pipe::eval_request_from_json(parse(options_json));
    const auto d = data::load_domain(domain_dir);
    const auto r = pipe::evaluate_on_domain(m->net, d, req);
    auto j = eval::report_to_json(r);
    j["split"] = data::split_name(req.split);
    j["checkpoint_id"] = m->ck.id();
    put(report_json, j.dump(2));
    put(per_field_csv, eval::per_field_csv(r));
  });
}

fk_status fk_experiment_run(const char* config_json, int jobs, int64_t seed_override, fk_progress_fn progress,
                            void* user, const char* out_dir, char** report_json) {
  return guard([&] {
    auto cfg = xp::config_from_json(parse(config_json));
    if (seed_override >= 0) cfg.seeds = {static_cast<std::uint64_t>(seed_override)};
    xp::RunOptions opts;
    opts.jobs = jobs;
    if (progress) opts.progress = [progress, user](const std::string& s) { progress(s.c_str(), user); };
    const auto r = xp::run_experiment(cfg, opts);
    if (out_dir) xp::write_report(r, out_dir);
    put(report_json, xp::report_to_json(r).dump(2));
  });
}

fk_status fk_experiment_default_config(const char* scenario, char** json) {
  return guard([&] {
    need(scenario, "scenario");
    put(json, xp::config_to_json(xp::default_config(xp::scenario_from_name(scenario))).dump(2));
  });
}

}  // extern "C"
