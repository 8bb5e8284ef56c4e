#include "fieldkit/pipeline.hpp"

#include <set>

namespace fieldkit::pipe {

namespace {

void reject_unknown(const Json& j, const std::set<std::string>& keys, const std::string& what) {
  if (!j.is_object()) throw FormatError(what + " must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!keys.count(k)) throw FormatError("unknown " + what + " key '" + k + "'");
}

data::ExampleOptions temporal_from_json(const Json& j) {
  reject_unknown(j, {"mode", "season", "shuffle"}, "temporal");
  data::ExampleOptions o;
  if (j.contains("mode")) o.mode = data::temporal_mode_from_name(j.at("mode").get<std::string>());
  o.season = j.value("season", 0);
  o.shuffle_seasons = j.value("shuffle", false);
  if (o.shuffle_seasons && o.mode != data::TemporalMode::Stacked)
    throw InvalidArgument("season shuffling applies to the stacked mode only");
  return o;
}

Json temporal_to_json(const data::ExampleOptions& o) {
  return {{"mode", data::temporal_mode_name(o.mode)}, {"season", o.season}, {"shuffle", o.shuffle_seasons}};
}

}  // namespace

Json request_to_json(const TrainRequest& r) {
  Json j;
  j["network"] = net::spec_to_json(r.network);
  j["training"] = train::train_config_to_json(r.training);
  j["labels"] = {{"n_images", r.labels.n_images},
                 {"fields_per_image", r.labels.fields_per_image},
                 {"sampler", data::sampler_name(r.labels.sampler)}};
  j["temporal"] = temporal_to_json(r.temporal);
  j["adapter"] = train::adapter_name(r.adapter);
  return j;
}

TrainRequest request_from_json(const Json& j, int bands_per_season, int n_seasons) {
  reject_unknown(j, {"network", "training", "labels", "temporal", "adapter"}, "training request");
  TrainRequest r;
  try {
    if (j.contains("temporal")) r.temporal = temporal_from_json(j.at("temporal"));
    if (j.contains("training")) r.training = train::train_config_from_json(j.at("training"));
    if (j.contains("labels")) {
      const auto& l = j.at("labels");
      reject_unknown(l, {"n_images", "fields_per_image", "sampler"}, "labels");
      r.labels.n_images = l.value("n_images", r.labels.n_images);
      r.labels.fields_per_image = l.value("fields_per_image", r.labels.fields_per_image);
      if (l.contains("sampler")) r.labels.sampler = data::sampler_from_name(l.at("sampler").get<std::string>());
      if (r.labels.n_images < 0 || r.labels.fields_per_image < 1)
        throw InvalidArgument("labels need n_images >= 0 and fields_per_image >= 1");
    }
    if (j.contains("adapter")) r.adapter = train::adapter_from_name(j.at("adapter").get<std::string>());
    Json n = j.value("network", Json::object());
    if (!n.contains("in_channels"))
      n["in_channels"] = r.temporal.mode == data::TemporalMode::Stacked ? bands_per_season * n_seasons : bands_per_season;
    r.network = net::spec_from_json(n);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad training request: ") + e.what());
  }
  return r;
}

train::Dataset domain_dataset(const data::Domain& d, const TrainRequest& r) {
  train::Dataset ds;
  const auto train_idx = d.indices(data::Split::Train), val_idx = d.indices(data::Split::Val);
  if (train_idx.empty()) throw InvalidArgument("domain '" + d.name + "' has no training scenes");
  auto add = [&](std::vector<data::Example>& dst, std::vector<data::Example> ex) {
    for (auto& e : ex) dst.push_back(std::move(e));
  };
  if (r.labels.n_images == 0) {
    for (auto i : train_idx)
      add(ds.train, data::make_examples(d.scenes[i], "scene_" + std::to_string(i), data::all_fields(d.scenes[i]), r.temporal));
  } else {
    std::vector<const synth::SyntheticScene*> scenes;
    for (auto i : train_idx) scenes.push_back(&d.scenes[i]);
    const auto plan = data::plan_budget(scenes, {r.labels.n_images * r.labels.fields_per_image, r.labels.fields_per_image},
                                        derive_seed(r.training.seed, "labels"), r.labels.sampler);
    for (std::size_t k = 0; k < plan.images.size(); ++k) {
      const auto i = train_idx[plan.images[k].scene];
      add(ds.train, data::make_examples(d.scenes[i], "scene_" + std::to_string(i) + "/" + std::to_string(k),
                                        plan.images[k].fields, r.temporal));
    }
  }
  for (auto i : val_idx)
    add(ds.val, data::make_examples(d.scenes[i], "scene_" + std::to_string(i), data::all_fields(d.scenes[i]), r.temporal));
  ds.id = d.name + "/" + train::dataset_fingerprint(ds.train, ds.val);
  return ds;
}

train::TrainResult train_on_domain(const data::Domain& d, const TrainRequest& r, const net::Checkpoint* parent,
                                   const train::TrainHooks& hooks) {
  const auto ds = domain_dataset(d, r);
  if (parent) return train::finetune(*parent, ds, r.training, r.adapter, hooks);
  net::Network<float> model(r.network, derive_seed(r.training.seed, "init"));
  return train::train(model, ds, r.training, hooks);
}

xp::InputMode input_mode(const data::ExampleOptions& o) { return {o.mode, o.season}; }

EvalRequest eval_request_from_json(const Json& j) {
  EvalRequest r;
  if (j.is_null()) return r;
  reject_unknown(j, {"split", "temporal", "watershed", "tune_watershed", "exclusive"}, "evaluation request");
  try {
    if (j.contains("split")) r.split = data::split_from_name(j.at("split").get<std::string>());
    if (j.contains("temporal")) r.temporal = temporal_from_json(j.at("temporal"));
    if (j.contains("watershed")) r.watershed = inst::params_from_json(j.at("watershed"));
    r.tune_watershed = j.value("tune_watershed", false);
    r.exclusive = j.value("exclusive", false);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad evaluation request: ") + e.what());
  }
  return r;
}

eval::EvalReport evaluate_on_domain(net::Network<float>& model, const data::Domain& d, const EvalRequest& r) {
  const auto mode = input_mode(r.temporal);
  auto params = r.watershed;
  if (r.tune_watershed) {
    std::vector<inst::TuneTile> tiles;
    for (auto i : d.indices(data::Split::Val)) {
      auto maps = xp::predict_scene(model, d.scenes[i], mode);
      tiles.push_back({std::move(maps[0]), std::move(maps[1]), d.scenes[i].field_ids, {}});
    }
    if (tiles.empty()) throw InvalidArgument("watershed tuning needs validation scenes");
    params = inst::tune_params(tiles, inst::SearchGrid{}).params;
  }
  const auto idx = d.indices(r.split);
  if (idx.empty()) throw InvalidArgument("split '" + data::split_name(r.split) + "' has no scenes");
  eval::Evaluator ev(r.exclusive);
  for (auto i : idx) {
    const auto& sc = d.scenes[i];
    const auto labels = geom::make_label_stack(sc.polygons, sc.grid());
    const auto maps = xp::predict_scene(model, sc, mode);
    const auto seg = inst::watershed_segment(maps[0], maps[1], params);
    ev.add_image("scene_" + std::to_string(i), maps[0].data, labels.extent, labels.mask, &sc.field_ids, &seg.labels);
  }
  return ev.report();
}

}  // namespace fieldkit::pipe
