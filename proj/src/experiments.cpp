#include "fieldkit/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

namespace fieldkit::xp {

std::string scenario_name(Scenario s) {
  switch (s) {
    case Scenario::BudgetStudy: return "budget_study";
    case Scenario::TransferMatrix: return "transfer_matrix";
    case Scenario::LabelEfficiency: return "label_efficiency";
    case Scenario::TemporalMode: return "temporal_mode";
  }
  return "unknown";
}

Scenario scenario_from_name(const std::string& name) {
  for (auto s : {Scenario::BudgetStudy, Scenario::TransferMatrix, Scenario::LabelEfficiency, Scenario::TemporalMode})
    if (scenario_name(s) == name) return s;
  throw InvalidArgument("unknown scenario '" + name +
                        "' (valid: budget_study, transfer_matrix, label_efficiency, temporal_mode)");
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw InvalidArgument("an experiment needs at least one seed");
  network.validate();
  training.validate();
  watershed.validate();
  target.spec.validate();
  if (max_test_scenes < 0) throw InvalidArgument("max_test_scenes must be >= 0");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw InvalidArgument("seeds must be distinct");
  switch (scenario) {
    case Scenario::BudgetStudy: {
      if (budget_grid.empty()) throw InvalidArgument("budget grid is empty");
      const long total = static_cast<long>(budget_grid[0].n_images) * budget_grid[0].fields_per_image;
      for (const auto& c : budget_grid) {
        if (c.n_images < 1 || c.fields_per_image < 1)
          throw InvalidArgument("budget cells need n_images >= 1 and fields_per_image >= 1");
        if (static_cast<long>(c.n_images) * c.fields_per_image != total)
          throw InvalidArgument("budget grid must keep n_images * fields_per_image constant (" +
                                std::to_string(c.n_images) + "x" + std::to_string(c.fields_per_image) + " != " +
                                std::to_string(total) + ")");
      }
      break;
    }
    case Scenario::TransferMatrix:
    case Scenario::LabelEfficiency:
      source.spec.validate();
      if (downsample_factor < 1) throw InvalidArgument("downsample_factor must be >= 1");
      if (scenario == Scenario::LabelEfficiency) {
        if (label_counts.empty()) throw InvalidArgument("label count grid is empty");
        if (label_fields_per_image < 1) throw InvalidArgument("label_fields_per_image must be >= 1");
        for (int c : label_counts)
          if (c < label_fields_per_image || c % label_fields_per_image != 0)
            throw InvalidArgument("label counts must be positive multiples of label_fields_per_image");
        if (!std::is_sorted(label_counts.begin(), label_counts.end()) ||
            std::adjacent_find(label_counts.begin(), label_counts.end()) != label_counts.end())
          throw InvalidArgument("label counts must be strictly increasing");
      }
      break;
    case Scenario::TemporalMode:
      if (target.spec.n_seasons < 2)
        throw InvalidArgument("temporal experiments need at least 2 seasons (target has " +
                              std::to_string(target.spec.n_seasons) + ")");
      if (!(contrast_drop >= 0.0 && contrast_drop <= 1.0)) throw InvalidArgument("contrast_drop must lie in [0, 1]");
      break;
  }
}

ExperimentConfig default_config(Scenario s) {
  ExperimentConfig c;
  c.name = scenario_name(s);
  c.scenario = s;
  c.target.spec = synth::domain_preset("target-small");
  c.target.options.n_scenes = 200;
  c.source.spec = synth::domain_preset("source-large");
  c.source.spec.height = c.source.spec.width = 256;
  c.source.options.n_scenes = 60;
  c.training.max_epochs = 10;
  c.training.samples_per_epoch = 256;
  c.training.crop_size = 64;
  return c;
}

namespace {

const std::set<std::string> kConfigKeys{"name",           "scenario",          "seeds",        "target",
                                        "source",         "network",           "training",     "budget_grid",
                                        "sampler",        "downsample_factor", "label_counts", "label_fields_per_image",
                                        "contrast_drop",  "watershed",         "tune_watershed", "max_test_scenes"};

}  // namespace

Json domain_config_to_json(const DomainConfig& d) {
  Json j;
  j["spec"] = synth::spec_to_json(d.spec);
  j["n_scenes"] = d.options.n_scenes;
  j["grid"] = {d.options.grid_rows, d.options.grid_cols};
  j["fractions"] = d.options.fractions;
  return j;
}

DomainConfig domain_config_from_json(const Json& j, DomainConfig d) {
  for (const auto& [k, v] : j.items())
    if (k != "preset" && k != "spec" && k != "n_scenes" && k != "grid" && k != "fractions")
      throw FormatError("unknown domain key '" + k + "'");
  Json spec = j.value("spec", Json::object());
  if (j.contains("preset") && !spec.contains("preset")) spec["preset"] = j.at("preset");
  if (spec.contains("preset")) {
    d.spec = synth::spec_from_json(spec);
  } else {
    Json merged = synth::spec_to_json(d.spec);
    for (const auto& [k, v] : spec.items()) merged[k] = v;
    d.spec = synth::spec_from_json(merged);
  }
  d.options.n_scenes = j.value("n_scenes", d.options.n_scenes);
  if (j.contains("grid")) {
    const auto g = j.at("grid").get<std::vector<int>>();
    if (g.size() != 2) throw FormatError("domain grid must be [rows, cols]");
    d.options.grid_rows = g[0];
    d.options.grid_cols = g[1];
  }
  if (j.contains("fractions")) d.options.fractions = j.at("fractions").get<std::array<double, 3>>();
  return d;
}

Json config_to_json(const ExperimentConfig& c) {
  Json j;
  j["name"] = c.name;
  j["scenario"] = scenario_name(c.scenario);
  j["seeds"] = c.seeds;
  j["target"] = domain_config_to_json(c.target);
  j["source"] = domain_config_to_json(c.source);
  j["network"] = net::spec_to_json(c.network);
  j["training"] = train::train_config_to_json(c.training);
  Json grid = Json::array();
  for (const auto& b : c.budget_grid) grid.push_back({b.n_images, b.fields_per_image});
  j["budget_grid"] = grid;
  j["sampler"] = data::sampler_name(c.sampler);
  j["downsample_factor"] = c.downsample_factor;
  j["label_counts"] = c.label_counts;
  j["label_fields_per_image"] = c.label_fields_per_image;
  j["contrast_drop"] = c.contrast_drop;
  j["watershed"] = inst::params_to_json(c.watershed);
  j["tune_watershed"] = c.tune_watershed;
  j["max_test_scenes"] = c.max_test_scenes;
  return j;
}

ExperimentConfig config_from_json(const Json& j) {
  if (!j.is_object()) throw FormatError("experiment config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!kConfigKeys.count(k)) throw FormatError("unknown experiment config key '" + k + "'");
  if (!j.contains("scenario")) throw FormatError("experiment config needs a 'scenario'");
  ExperimentConfig c;
  try {
    c = default_config(scenario_from_name(j.at("scenario").get<std::string>()));
    c.name = j.value("name", c.name);
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("target")) c.target = domain_config_from_json(j.at("target"), c.target);
    if (j.contains("source")) c.source = domain_config_from_json(j.at("source"), c.source);
    if (j.contains("network")) c.network = net::spec_from_json(j.at("network"));
    if (j.contains("training")) {
      Json t = train::train_config_to_json(c.training);
      for (const auto& [k, v] : j.at("training").items()) t[k] = v;
      c.training = train::train_config_from_json(t);
    }
    if (j.contains("budget_grid")) {
      c.budget_grid.clear();
      for (const auto& cell : j.at("budget_grid")) {
        const auto v = cell.get<std::vector<int>>();
        if (v.size() != 2) throw FormatError("budget grid cells must be [n_images, fields_per_image]");
        c.budget_grid.push_back({v[0], v[1]});
      }
    }
    if (j.contains("sampler")) c.sampler = data::sampler_from_name(j.at("sampler").get<std::string>());
    c.downsample_factor = j.value("downsample_factor", c.downsample_factor);
    if (j.contains("label_counts")) c.label_counts = j.at("label_counts").get<std::vector<int>>();
    c.label_fields_per_image = j.value("label_fields_per_image", c.label_fields_per_image);
    c.contrast_drop = j.value("contrast_drop", c.contrast_drop);
    if (j.contains("watershed")) c.watershed = inst::params_from_json(j.at("watershed"));
    c.tune_watershed = j.value("tune_watershed", c.tune_watershed);
    c.max_test_scenes = j.value("max_test_scenes", c.max_test_scenes);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Evaluation

std::array<FloatRaster, 3> predict_scene(net::Network<float>& model, const synth::SyntheticScene& scene,
                                         const InputMode& mode) {
  switch (mode.mode) {
    case data::TemporalMode::Single:
      if (mode.season < 0 || mode.season >= static_cast<int>(scene.imagery.size()))
        throw InvalidArgument("season index out of range");
      return train::predict(model, scene.imagery[static_cast<std::size_t>(mode.season)]);
    case data::TemporalMode::Separate:
      return train::consensus_predict(model, scene.imagery);
    case data::TemporalMode::Stacked:
      return train::predict(model, data::make_multitemporal_input(scene.imagery, data::TemporalMode::Stacked)[0]);
  }
  throw InvalidArgument("unknown temporal mode");
}

RunMetrics evaluate_scenes(net::Network<float>& model, std::span<const synth::SyntheticScene* const> scenes,
                           const InputMode& mode, const inst::WatershedParams& params) {
  eval::Evaluator ev;
  for (std::size_t k = 0; k < scenes.size(); ++k) {
    const auto& sc = *scenes[k];
    const auto labels = geom::make_label_stack(sc.polygons, sc.grid());
    const auto maps = predict_scene(model, sc, mode);
    const auto seg = inst::watershed_segment(maps[0], maps[1], params);
    ev.add_image("scene_" + std::to_string(k), maps[0].data, labels.extent, labels.mask, &sc.field_ids, &seg.labels);
  }
  const auto r = ev.report();
  RunMetrics m;
  m.oa = r.oa;
  m.f1 = r.f1;
  m.mcc = r.mcc;
  m.median_iou = r.instances.median_iou;
  m.iou_50 = r.instances.iou_k.count(50) ? r.instances.iou_k.at(50) : 0.0;
  m.n_fields = r.per_field.size();
  return m;
}

// ---------------------------------------------------------------------------
// Runner

namespace {

/// Scenes of one domain realization with their splits.
struct DomainData {
  std::vector<synth::SyntheticScene> scenes;
  std::vector<data::Split> split;

  std::vector<const synth::SyntheticScene*> of(data::Split s, int limit = 0) const {
    std::vector<const synth::SyntheticScene*> out;
    for (std::size_t i = 0; i < scenes.size(); ++i)
      if (split[i] == s && (limit == 0 || static_cast<int>(out.size()) < limit)) out.push_back(&scenes[i]);
    return out;
  }
};

DomainData make_domain(const DomainConfig& dc, const std::string& name, std::uint64_t seed) {
  auto d = data::generate_domain(name, dc.spec, dc.options, derive_seed(seed, name));
  if (d.indices(data::Split::Train).empty() || d.indices(data::Split::Val).empty() ||
      d.indices(data::Split::Test).empty())
    throw InvalidArgument("domain '" + name + "' has an empty split; raise n_scenes");
  return {std::move(d.scenes), std::move(d.scene_split)};
}

DomainData downsampled(const DomainData& d, int factor) {
  DomainData out;
  out.split = d.split;
  out.scenes.resize(d.scenes.size());
  parallel_for(d.scenes.size(), [&](std::size_t i) { out.scenes[i] = data::downsample_scene(d.scenes[i], factor); });
  return out;
}

std::vector<data::Example> full_examples(std::span<const synth::SyntheticScene* const> scenes,
                                         const std::string& prefix, const data::ExampleOptions& opts = {}) {
  std::vector<data::Example> out;
  for (std::size_t k = 0; k < scenes.size(); ++k) {
    auto ex = data::make_examples(*scenes[k], prefix + std::to_string(k), data::all_fields(*scenes[k]), opts);
    for (auto& e : ex) out.push_back(std::move(e));
  }
  return out;
}

/// Labeled examples for a field budget over the training scenes.
std::vector<data::Example> budget_examples(std::span<const synth::SyntheticScene* const> scenes, int n_images,
                                           int fields_per_image, std::uint64_t seed, data::FieldSampler sampler) {
  std::vector<const synth::SyntheticScene*> v(scenes.begin(), scenes.end());
  const auto plan = data::plan_budget(v, {n_images * fields_per_image, fields_per_image}, seed, sampler);
  std::vector<data::Example> out;
  for (std::size_t k = 0; k < plan.images.size(); ++k) {
    const auto& img = plan.images[k];
    auto ex = data::make_examples(*v[img.scene], "b" + std::to_string(k), img.fields);
    for (auto& e : ex) out.push_back(std::move(e));
  }
  return out;
}

inst::WatershedParams watershed_for(const ExperimentConfig& cfg, net::Network<float>& model,
                                    std::span<const synth::SyntheticScene* const> val, const InputMode& mode) {
  if (!cfg.tune_watershed) return cfg.watershed;
  std::vector<inst::TuneTile> tiles;
  for (const auto* sc : val) {
    auto maps = predict_scene(model, *sc, mode);
    tiles.push_back({std::move(maps[0]), std::move(maps[1]), sc->field_ids, {}});
  }
  return inst::tune_params(tiles, inst::SearchGrid{}).params;
}

/// One unit of work: trains (or finetunes) and evaluates.
struct Task {
  std::string cell;
  int param = 0;
  std::function<train::TrainResult(CellResult&)> fit;
  std::function<RunMetrics(net::Network<float>&)> evaluate;
  /// Keeps the trained checkpoint for later stages.
  net::Checkpoint* keep = nullptr;
};

void run_tasks(std::vector<Task>& tasks, std::vector<CellResult>& out, std::uint64_t seed, const RunOptions& opts) {
  std::vector<CellResult> results(tasks.size());
  parallel_for(tasks.size(), [&](std::size_t i) {
    auto& t = tasks[i];
    auto& r = results[i];
    r.cell = t.cell;
    r.param = t.param;
    r.seed = seed;
    try {
      auto fit = t.fit(r);
      auto model = net::network_from_checkpoint(fit.checkpoint);
      r.metrics = t.evaluate(model);
      r.best_epoch = fit.best_epoch;
      r.ok = true;
      if (t.keep) *t.keep = std::move(fit.checkpoint);
    } catch (const std::exception& e) {
      r.ok = false;
      r.error = e.what();
    }
    if (opts.progress) {
      char line[256];
      std::snprintf(line, sizeof line, "seed %llu %s: %s mcc=%.4f median_iou=%.4f",
                    static_cast<unsigned long long>(seed), t.cell.c_str(), r.ok ? "ok" : "failed", r.metrics.mcc,
                    r.metrics.median_iou);
      opts.progress(r.ok ? line : std::string(line) + " (" + r.error + ")");
    }
  });
  for (auto& r : results) out.push_back(std::move(r));
}

train::TrainConfig seeded(const train::TrainConfig& base, std::uint64_t seed, const std::string& cell) {
  auto c = base;
  c.seed = derive_seed(seed, "train/" + cell);
  return c;
}

train::TrainResult fit_scratch(const net::NetworkSpec& spec, std::uint64_t seed, const train::Dataset& ds,
                               const train::TrainConfig& cfg) {
  net::Network<float> model(spec, derive_seed(seed, "init"));
  return train::train(model, ds, cfg);
}

void run_budget_study(const ExperimentConfig& cfg, std::uint64_t seed, std::vector<CellResult>& out,
                      const RunOptions& opts) {
  const auto target = make_domain(cfg.target, "target", seed);
  const auto train_scenes = target.of(data::Split::Train), val = target.of(data::Split::Val);
  const auto test = target.of(data::Split::Test, cfg.max_test_scenes);
  const auto val_ex = full_examples(val, "v");
  std::vector<Task> tasks;
  for (const auto& b : cfg.budget_grid) {
    const std::string cell = std::to_string(b.n_images) + "x" + std::to_string(b.fields_per_image);
    tasks.push_back({cell, b.n_images,
                     [&, b, cell](CellResult& r) {
                       train::Dataset ds{"target/" + cell,
                                         budget_examples(train_scenes, b.n_images, b.fields_per_image,
                                                         derive_seed(seed, "budget/" + cell), cfg.sampler),
                                         val_ex};
                       r.n_train_examples = ds.train.size();
                       r.n_labeled_fields = static_cast<std::size_t>(b.n_images) * b.fields_per_image;
                       return fit_scratch(cfg.network, seed, ds, seeded(cfg.training, seed, "budget"));
                     },
                     [&](net::Network<float>& m) {
                       const InputMode mode;
                       return evaluate_scenes(m, test, mode, watershed_for(cfg, m, val, mode));
                     }});
  }
  run_tasks(tasks, out, seed, opts);
}

void run_transfer(const ExperimentConfig& cfg, std::uint64_t seed, std::vector<CellResult>& out,
                  const RunOptions& opts) {
  const auto target = make_domain(cfg.target, "target", seed);
  const auto source = make_domain(cfg.source, "source", seed);
  const auto source_down = downsampled(source, cfg.downsample_factor);
  const auto t_train = target.of(data::Split::Train), t_val = target.of(data::Split::Val);
  const auto test = target.of(data::Split::Test, cfg.max_test_scenes);
  const auto t_train_ex = full_examples(t_train, "t"), t_val_ex = full_examples(t_val, "v");
  const InputMode mode;
  auto evaluate = [&](net::Network<float>& m) { return evaluate_scenes(m, test, mode, watershed_for(cfg, m, t_val, mode)); };
  auto source_fit = [&](const DomainData& d, const std::string& cell) {
    return [&, cell](CellResult& r) {
      train::Dataset ds{"source/" + cell, full_examples(d.of(data::Split::Train), "s"),
                        full_examples(d.of(data::Split::Val), "sv")};
      r.n_train_examples = ds.train.size();
      return fit_scratch(cfg.network, seed, ds, seeded(cfg.training, seed, cell));
    };
  };
  net::Checkpoint pretrained;
  std::vector<Task> stage1{
      {"source_original", 0, source_fit(source, "source_original"), evaluate},
      {"source_downsampled", 0, source_fit(source_down, "source_downsampled"), evaluate, &pretrained},
      {"target_scratch", 0,
       [&](CellResult& r) {
         train::Dataset ds{"target/full", t_train_ex, t_val_ex};
         r.n_train_examples = ds.train.size();
         return fit_scratch(cfg.network, seed, ds, seeded(cfg.training, seed, "target"));
       },
       evaluate},
  };
  std::vector<CellResult> first;
  run_tasks(stage1, first, seed, opts);
  std::vector<Task> stage2{{"pretrain_finetune", 0,
                            [&](CellResult& r) {
                              if (!first[1].ok) throw Error(ErrorCode::Runtime, "pretraining failed: " + first[1].error);
                              train::Dataset ds{"target/full", t_train_ex, t_val_ex};
                              r.n_train_examples = ds.train.size();
                              return train::finetune(pretrained, ds, seeded(cfg.training, seed, "finetune"));
                            },
                            evaluate}};
  std::vector<CellResult> second;
  run_tasks(stage2, second, seed, opts);
  // Table order: source only (original, downsampled), finetuned, scratch.
  out.push_back(first[0]);
  out.push_back(first[1]);
  out.push_back(second[0]);
  out.push_back(first[2]);
}

void run_label_efficiency(const ExperimentConfig& cfg, std::uint64_t seed, std::vector<CellResult>& out,
                          const RunOptions& opts) {
  const auto target = make_domain(cfg.target, "target", seed);
  const auto t_train = target.of(data::Split::Train), t_val = target.of(data::Split::Val);
  const auto test = target.of(data::Split::Test, cfg.max_test_scenes);
  std::size_t available = 0;
  for (const auto* sc : t_train) available += data::all_fields(*sc).size();
  if (static_cast<std::size_t>(cfg.label_counts.back()) > available)
    throw InvalidArgument("label count " + std::to_string(cfg.label_counts.back()) + " exceeds the " +
                          std::to_string(available) + " fields of the target training scenes");
  const auto source_down = downsampled(make_domain(cfg.source, "source", seed), cfg.downsample_factor);
  const auto t_val_ex = full_examples(t_val, "v");
  const InputMode mode;
  auto evaluate = [&](net::Network<float>& m) { return evaluate_scenes(m, test, mode, watershed_for(cfg, m, t_val, mode)); };

  net::Checkpoint pretrained;
  std::vector<Task> stage1{{"pretrain", 0,
                            [&](CellResult& r) {
                              train::Dataset ds{"source/downsampled",
                                                full_examples(source_down.of(data::Split::Train), "s"),
                                                full_examples(source_down.of(data::Split::Val), "sv")};
                              r.n_train_examples = ds.train.size();
                              return fit_scratch(cfg.network, seed, ds, seeded(cfg.training, seed, "pretrain"));
                            },
                            evaluate, &pretrained}};
  std::vector<CellResult> first;
  run_tasks(stage1, first, seed, opts);

  std::vector<Task> tasks;
  for (int count : cfg.label_counts) {
    const int n_images = count / cfg.label_fields_per_image;
    auto labeled = [&, count, n_images] {
      return budget_examples(t_train, n_images, cfg.label_fields_per_image,
                             derive_seed(seed, "labels/" + std::to_string(count)), cfg.sampler);
    };
    tasks.push_back({"scratch", count,
                     [&, labeled, count](CellResult& r) {
                       train::Dataset ds{"target/" + std::to_string(count), labeled(), t_val_ex};
                       r.n_train_examples = ds.train.size();
                       r.n_labeled_fields = static_cast<std::size_t>(count);
                       return fit_scratch(cfg.network, seed, ds, seeded(cfg.training, seed, "target"));
                     },
                     evaluate});
    tasks.push_back({"finetune", count,
                     [&, labeled, count](CellResult& r) {
                       if (!first[0].ok) throw Error(ErrorCode::Runtime, "pretraining failed: " + first[0].error);
                       train::Dataset ds{"target/" + std::to_string(count), labeled(), t_val_ex};
                       r.n_train_examples = ds.train.size();
                       r.n_labeled_fields = static_cast<std::size_t>(count);
                       return train::finetune(pretrained, ds, seeded(cfg.training, seed, "finetune"));
                     },
                     evaluate});
  }
  out.push_back(first[0]);
  run_tasks(tasks, out, seed, opts);
}

void run_temporal(const ExperimentConfig& cfg, std::uint64_t seed, std::vector<CellResult>& out,
                  const RunOptions& opts) {
  auto target = make_domain(cfg.target, "target", seed);
  for (auto& sc : target.scenes) sc = synth::render_low_contrast_variant(sc, cfg.contrast_drop);
  const auto t_train = target.of(data::Split::Train), t_val = target.of(data::Split::Val);
  const auto test = target.of(data::Split::Test, cfg.max_test_scenes);
  const int bands = cfg.target.spec.n_seasons * static_cast<int>(target.scenes.front().imagery.front().channels);

  struct Variant {
    std::string cell;
    data::ExampleOptions opts;
    InputMode mode;
    int channels;
  };
  std::vector<Variant> variants;
  variants.push_back({"single_season", {}, {}, cfg.network.in_channels});
  data::ExampleOptions sep;
  sep.mode = data::TemporalMode::Separate;
  variants.push_back({"consensus", sep, {data::TemporalMode::Separate, 0}, cfg.network.in_channels});
  data::ExampleOptions st;
  st.mode = data::TemporalMode::Stacked;
  variants.push_back({"stacked", st, {data::TemporalMode::Stacked, 0}, bands});
  st.shuffle_seasons = true;
  variants.push_back({"stacked_shuffled", st, {data::TemporalMode::Stacked, 0}, bands});

  std::vector<Task> tasks;
  for (const auto& v : variants) {
    tasks.push_back({v.cell, 0,
                     [&, v](CellResult& r) {
                       train::Dataset ds{"target/" + v.cell, full_examples(t_train, "t", v.opts),
                                         full_examples(t_val, "v", v.opts)};
                       r.n_train_examples = ds.train.size();
                       auto spec = cfg.network;
                       spec.in_channels = v.channels;
                       return fit_scratch(spec, seed, ds, seeded(cfg.training, seed, "temporal"));
                     },
                     [&, v](net::Network<float>& m) {
                       return evaluate_scenes(m, test, v.mode, watershed_for(cfg, m, t_val, v.mode));
                     }});
  }
  run_tasks(tasks, out, seed, opts);
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

const CellSummary* find_cell(const ExperimentReport& r, const std::string& cell, int param = 0) {
  for (const auto& s : r.summary)
    if (s.cell == cell && s.param == param) return &s;
  return nullptr;
}

/// Per-seed metric of a cell; NaN when the run failed.
double seed_value(const ExperimentReport& r, const std::string& cell, int param, std::uint64_t seed,
                  double RunMetrics::*metric) {
  for (const auto& row : r.rows)
    if (row.cell == cell && row.param == param && row.seed == seed)
      return row.ok ? row.metrics.*metric : std::nan("");
  return std::nan("");
}

void add_checks(ExperimentReport& r) {
  const auto& cfg = r.config;
  auto& checks = r.checks;
  switch (cfg.scenario) {
    case Scenario::BudgetStudy: {
      r.references = {"125 images x 80 fields: MCC 0.563 (paper, real data — not a target)",
                      "5000 images x 2 fields: MCC 0.601 (paper, real data — not a target)"};
      if (cfg.budget_grid.size() < 2) break;
      auto many = std::max_element(cfg.budget_grid.begin(), cfg.budget_grid.end(),
                                   [](auto a, auto b) { return a.n_images < b.n_images; });
      auto few = std::min_element(cfg.budget_grid.begin(), cfg.budget_grid.end(),
                                  [](auto a, auto b) { return a.n_images < b.n_images; });
      auto name = [](const BudgetCell& b) { return std::to_string(b.n_images) + "x" + std::to_string(b.fields_per_image); };
      const auto* a = find_cell(r, name(*many), many->n_images);
      const auto* b = find_cell(r, name(*few), few->n_images);
      TrendCheck c{"more_images_not_worse",
                   "mean MCC(" + name(*many) + ") >= mean MCC(" + name(*few) + ") - 0.02", false, ""};
      if (a && b) {
        c.passed = a->mcc.mean >= b->mcc.mean - 0.02;
        c.detail = fmt(a->mcc.mean) + " vs " + fmt(b->mcc.mean);
      }
      checks.push_back(c);
      break;
    }
    case Scenario::TransferMatrix: {
      r.references = {"source only, original resolution: MCC 0.29, median IoU 0.39 (paper, real data — not a target)",
                      "source only, downsampled: MCC 0.50, median IoU 0.68 (paper, real data — not a target)",
                      "pretrain + finetune: MCC 0.65, median IoU 0.86 (paper, real data — not a target)",
                      "target only from scratch: MCC 0.64, median IoU 0.85 (paper, real data — not a target)"};
      int wins = 0, counted = 0;
      std::string detail;
      for (auto s : cfg.seeds) {
        const double d = seed_value(r, "source_downsampled", 0, s, &RunMetrics::mcc);
        const double o = seed_value(r, "source_original", 0, s, &RunMetrics::mcc);
        if (std::isnan(d) || std::isnan(o)) continue;
        ++counted;
        wins += d > o;
        detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(s) + ": " + fmt(d) + " vs " + fmt(o);
      }
      const int need = (2 * static_cast<int>(cfg.seeds.size()) + 2) / 3;
      checks.push_back({"downsampled_beats_original",
                        "downsampled-source MCC > original-source MCC on the target in >= 2/3 of seeds",
                        counted == static_cast<int>(cfg.seeds.size()) && wins >= need,
                        std::to_string(wins) + "/" + std::to_string(cfg.seeds.size()) + " (" + detail + ")"});
      const auto* ft = find_cell(r, "pretrain_finetune");
      const auto* so = find_cell(r, "source_downsampled");
      if (ft && so)
        checks.push_back({"finetune_not_worse_than_source_only",
                          "mean median IoU(pretrain_finetune) >= mean median IoU(source_downsampled)",
                          ft->median_iou.mean >= so->median_iou.mean,
                          fmt(ft->median_iou.mean) + " vs " + fmt(so->median_iou.mean)});
      break;
    }
    case Scenario::LabelEfficiency: {
      r.references = {"100 labels: MCC 0.60 finetuned vs 0.36 from scratch (paper, real data — not a target)",
                      "5000 labels: MCC 0.66 finetuned vs 0.61 from scratch (paper, real data — not a target)"};
      std::vector<double> gaps;
      std::string detail;
      for (int count : cfg.label_counts) {
        const auto* f = find_cell(r, "finetune", count);
        const auto* s = find_cell(r, "scratch", count);
        const double g = f && s ? f->mcc.mean - s->mcc.mean : std::nan("");
        gaps.push_back(g);
        detail += (detail.empty() ? "" : "; ") + std::to_string(count) + ": " + fmt(g);
      }
      bool monotone = std::none_of(gaps.begin(), gaps.end(), [](double g) { return std::isnan(g); });
      for (std::size_t i = 1; i < gaps.size(); ++i) monotone = monotone && gaps[i] <= gaps[i - 1];
      checks.push_back({"gap_non_increasing", "mean finetune-minus-scratch MCC gap non-increasing in label count",
                        monotone, detail});
      int positive = 0;
      std::string seeds_detail;
      for (auto s : cfg.seeds) {
        const int c0 = cfg.label_counts.front();
        const double g = seed_value(r, "finetune", c0, s, &RunMetrics::mcc) - seed_value(r, "scratch", c0, s, &RunMetrics::mcc);
        positive += g > 0;
        seeds_detail += (seeds_detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(s) + ": " + fmt(g);
      }
      checks.push_back({"gap_positive_at_smallest", "finetune-minus-scratch MCC gap > 0 at the smallest count in every seed",
                        positive == static_cast<int>(cfg.seeds.size()),
                        std::to_string(positive) + "/" + std::to_string(cfg.seeds.size()) + " (" + seeds_detail + ")"});
      break;
    }
    case Scenario::TemporalMode: {
      r.references = {"stacked 9-band input: MCC 0.64 (paper, real data — not a target)",
                      "consensus of 3 predictions: MCC 0.62 (paper, real data — not a target)"};
      const auto* base = find_cell(r, "single_season");
      for (const char* m : {"consensus", "stacked"}) {
        const auto* c = find_cell(r, m);
        if (!base || !c) continue;
        checks.push_back({std::string(m) + "_beats_single_season",
                          std::string("mean MCC(") + m + ") > mean MCC(single_season)", c->mcc.mean > base->mcc.mean,
                          fmt(c->mcc.mean) + " vs " + fmt(base->mcc.mean)});
      }
      break;
    }
  }
}

}  // namespace

Stat mean_std(std::span<const double> v) {
  Stat s;
  if (v.empty()) return {std::nan(""), std::nan("")};
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() < 2) {
    s.std = std::nan("");
    return s;
  }
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  return s;
}

void summarize(ExperimentReport& r) {
  r.summary.clear();
  r.checks.clear();
  std::vector<std::pair<std::string, int>> cells;
  for (const auto& row : r.rows)
    if (std::find(cells.begin(), cells.end(), std::pair{row.cell, row.param}) == cells.end())
      cells.emplace_back(row.cell, row.param);
  for (const auto& [cell, param] : cells) {
    CellSummary s;
    s.cell = cell;
    s.param = param;
    std::vector<double> oa, f1, mcc, iou, iou50;
    for (const auto& row : r.rows) {
      if (row.cell != cell || row.param != param || !row.ok) continue;
      ++s.n_ok;
      oa.push_back(row.metrics.oa);
      f1.push_back(row.metrics.f1);
      mcc.push_back(row.metrics.mcc);
      iou.push_back(row.metrics.median_iou);
      iou50.push_back(row.metrics.iou_50);
    }
    s.oa = mean_std(oa);
    s.f1 = mean_std(f1);
    s.mcc = mean_std(mcc);
    s.median_iou = mean_std(iou);
    s.iou_50 = mean_std(iou50);
    r.summary.push_back(s);
  }
  add_checks(r);
}

ExperimentReport run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  const int before = num_threads();
  set_num_threads(std::max(1, opts.jobs));
  ExperimentReport report;
  report.config = cfg;
  try {
    for (auto seed : cfg.seeds) {
      std::vector<CellResult> rows;
      switch (cfg.scenario) {
        case Scenario::BudgetStudy: run_budget_study(cfg, seed, rows, opts); break;
        case Scenario::TransferMatrix: run_transfer(cfg, seed, rows, opts); break;
        case Scenario::LabelEfficiency: run_label_efficiency(cfg, seed, rows, opts); break;
        case Scenario::TemporalMode: run_temporal(cfg, seed, rows, opts); break;
      }
      for (auto& row : rows) report.rows.push_back(std::move(row));
    }
  } catch (...) {
    set_num_threads(before);
    throw;
  }
  set_num_threads(before);
  // Cell order, then seed order.
  std::vector<std::pair<std::string, int>> order;
  for (const auto& row : report.rows)
    if (std::find(order.begin(), order.end(), std::pair{row.cell, row.param}) == order.end())
      order.emplace_back(row.cell, row.param);
  std::stable_sort(report.rows.begin(), report.rows.end(), [&](const CellResult& a, const CellResult& b) {
    const auto ia = std::find(order.begin(), order.end(), std::pair{a.cell, a.param}) - order.begin();
    const auto ib = std::find(order.begin(), order.end(), std::pair{b.cell, b.param}) - order.begin();
    return ia < ib;
  });
  summarize(report);
  return report;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

Json stat_json(const Stat& s) { return {{"mean", eval::metric_json(s.mean)}, {"std", eval::metric_json(s.std)}}; }

}  // namespace

Json report_to_json(const ExperimentReport& r) {
  Json j;
  j["experiment"] = r.config.name;
  j["scenario"] = scenario_name(r.config.scenario);
  j["config"] = config_to_json(r.config);
  Json rows = Json::array();
  for (const auto& row : r.rows) {
    Json x;
    x["cell"] = row.cell;
    x["param"] = row.param;
    x["seed"] = row.seed;
    x["status"] = row.ok ? "ok" : "failed";
    if (!row.ok) x["error"] = row.error;
    x["oa"] = eval::metric_json(row.metrics.oa);
    x["f1"] = eval::metric_json(row.metrics.f1);
    x["mcc"] = eval::metric_json(row.metrics.mcc);
    x["median_iou"] = eval::metric_json(row.metrics.median_iou);
    x["iou_50"] = eval::metric_json(row.metrics.iou_50);
    x["n_eval_fields"] = row.metrics.n_fields;
    x["best_epoch"] = row.best_epoch;
    x["n_train_examples"] = row.n_train_examples;
    x["n_labeled_fields"] = row.n_labeled_fields;
    rows.push_back(x);
  }
  j["runs"] = rows;
  Json summary = Json::array();
  for (const auto& s : r.summary)
    summary.push_back({{"cell", s.cell},
                       {"param", s.param},
                       {"n_ok", s.n_ok},
                       {"oa", stat_json(s.oa)},
                       {"f1", stat_json(s.f1)},
                       {"mcc", stat_json(s.mcc)},
                       {"median_iou", stat_json(s.median_iou)},
                       {"iou_50", stat_json(s.iou_50)}});
  j["summary"] = summary;
  Json checks = Json::array();
  for (const auto& c : r.checks)
    checks.push_back({{"name", c.name}, {"description", c.description}, {"passed", c.passed}, {"detail", c.detail}});
  j["checks"] = checks;
  j["references"] = r.references;
  return j;
}

std::string rows_csv(const ExperimentReport& r) {
  std::string out = "scenario,cell,param,seed,status,oa,f1,mcc,median_iou,iou_50,best_epoch,n_train_examples,n_labeled_fields,error\n";
  for (const auto& row : r.rows) {
    std::string err = row.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out += scenario_name(r.config.scenario) + "," + row.cell + "," + std::to_string(row.param) + "," +
           std::to_string(row.seed) + "," + (row.ok ? "ok" : "failed") + "," + fmt(row.metrics.oa) + "," +
           fmt(row.metrics.f1) + "," + fmt(row.metrics.mcc) + "," + fmt(row.metrics.median_iou) + "," +
           fmt(row.metrics.iou_50) + "," + std::to_string(row.best_epoch) + "," +
           std::to_string(row.n_train_examples) + "," + std::to_string(row.n_labeled_fields) + "," + err + "\n";
  }
  return out;
}

std::string summary_csv(const ExperimentReport& r) {
  std::string out =
      "cell,param,n_ok,oa_mean,oa_std,f1_mean,f1_std,mcc_mean,mcc_std,median_iou_mean,median_iou_std,iou_50_mean,iou_50_std\n";
  for (const auto& s : r.summary) {
    out += s.cell + "," + std::to_string(s.param) + "," + std::to_string(s.n_ok);
    for (const auto* st : {&s.oa, &s.f1, &s.mcc, &s.median_iou, &s.iou_50}) out += "," + fmt(st->mean) + "," + fmt(st->std);
    out += "\n";
  }
  return out;
}

void write_report(const ExperimentReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_json_file(dir / "report.json", report_to_json(r));
  auto write = [&](const std::filesystem::path& p, const std::string& s) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot write " + p.string());
    f << s;
  };
  write(dir / "results.csv", rows_csv(r));
  write(dir / "summary.csv", summary_csv(r));
}

}  // namespace fieldkit::xp
