#pragma once

#include <optional>
#include <string>

#include "fieldkit/experiments.hpp"

namespace fieldkit::pipe {

/// Which fields of the training scenes carry labels. Zero n_images labels
/// every field of every training scene.
struct LabelPolicy {
  int n_images = 0;
  int fields_per_image = 2;
  data::FieldSampler sampler = data::FieldSampler::Anchor;
};

struct TrainRequest {
  net::NetworkSpec network;
  train::TrainConfig training;
  LabelPolicy labels;
  data::ExampleOptions temporal;
  train::ChannelAdapter adapter = train::ChannelAdapter::None;
};

Json request_to_json(const TrainRequest& r);
/// Unknown keys are rejected. The network's input channels follow the
/// temporal mode when "network.in_channels" is absent.
TrainRequest request_from_json(const Json& j, int bands_per_season = 3, int n_seasons = 3);

/// Training set from the train split and validation set (all fields) from
/// the val split.
train::Dataset domain_dataset(const data::Domain& d, const TrainRequest& r);

/// Trains from scratch, or finetunes `parent` when given.
train::TrainResult train_on_domain(const data::Domain& d, const TrainRequest& r, const net::Checkpoint* parent,
                                   const train::TrainHooks& hooks = {});

xp::InputMode input_mode(const data::ExampleOptions& o);

struct EvalRequest {
  data::Split split = data::Split::Test;
  data::ExampleOptions temporal;
  inst::WatershedParams watershed;
  bool tune_watershed = false;
  bool exclusive = false;
};

EvalRequest eval_request_from_json(const Json& j);

/// Pixel and instance metrics of `model` over one split; every field counts.
eval::EvalReport evaluate_on_domain(net::Network<float>& model, const data::Domain& d, const EvalRequest& r);

}  // namespace fieldkit::pipe
