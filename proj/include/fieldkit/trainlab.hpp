#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fieldkit/datakit.hpp"
#include "fieldkit/evalkit.hpp"
#include "fieldkit/fractalnet.hpp"
#include "fieldkit/loss.hpp"

namespace fieldkit::train {

struct TrainConfig {
  double learning_rate = 1e-3;
  /// Adam moment decay rates and stabilizer.
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int batch_size = 4;
  int max_epochs = 30;
  /// Training samples drawn per epoch; 0 means one per training example.
  int samples_per_epoch = 0;
  /// Side of the random training crop; 0 trains on whole examples.
  int crop_size = 64;
  /// Stop after this many epochs without a new best validation MCC.
  int patience = 20;
  std::uint64_t seed = 0;
  TaskWeights task_weights;
  TanimotoConfig loss;

  void validate() const;
};

Json train_config_to_json(const TrainConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig train_config_from_json(const Json& j);

struct Dataset {
  /// Content id recorded in checkpoint provenance.
  std::string id;
  std::vector<data::Example> train;
  std::vector<data::Example> val;
};

/// Hash of example ids, shapes and pixel bytes.
std::string dataset_fingerprint(std::span<const data::Example> train, std::span<const data::Example> val);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;  // NaN for the initial evaluation
  double val_oa = 0.0, val_f1 = 0.0, val_mcc = 0.0;
  double wall_time = 0.0;  // seconds since the start of training
};

/// epoch,train_loss,val_oa,val_f1,val_mcc,wall_time
std::string training_log_csv(std::span<const EpochLog> log);

struct TrainResult {
  net::Checkpoint checkpoint;  // weights of the best validation epoch
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_val_mcc = 0.0;
};

struct TrainHooks {
  /// Called after each logged epoch.
  std::function<void(const EpochLog&)> on_epoch;
  /// Written after every epoch when set.
  std::optional<std::filesystem::path> log_csv;
};

/// Trains `model` in place with Adam. Validation extent MCC (pooled over the
/// validation examples) is evaluated before the first update and after every
/// epoch; the returned checkpoint holds the weights of the first epoch that
/// reached the highest MCC, and `model` is left holding those weights too.
/// Undefined MCC ranks below every defined value. A non-finite loss aborts
/// with a NumericError naming the batch and the parameter norms.
TrainResult train(net::Network<float>& model, const Dataset& ds, const TrainConfig& cfg, const TrainHooks& hooks = {},
                  std::optional<std::string> parent_checkpoint_id = std::nullopt);

/// How to reuse a checkpoint whose input channel count differs from the data.
enum class ChannelAdapter {
  None,
  /// Requires the new count to be a multiple of the old one; first-layer
  /// weights are tiled across the channel groups and divided by the group
  /// count, so an input made of identical groups gives the parent's response.
  TileMean,
};
std::string adapter_name(ChannelAdapter a);
ChannelAdapter adapter_from_name(const std::string& name);

/// Builds a float network from `parent`, adapting the first layer to
/// `in_channels` when needed.
net::Network<float> network_for_channels(const net::Checkpoint& parent, int in_channels, ChannelAdapter adapter);

/// Continues training every parameter of `parent` on `ds`. The result's
/// provenance names the parent checkpoint.
TrainResult finetune(const net::Checkpoint& parent, const Dataset& ds, const TrainConfig& cfg,
                     ChannelAdapter adapter = ChannelAdapter::None, const TrainHooks& hooks = {});

/// Extent, boundary and distance probability maps on the image grid. Inputs
/// whose size is not a multiple of the network's are padded by edge
/// replication and the result is cropped back.
std::array<FloatRaster, 3> predict(net::Network<float>& model, const FloatRaster& image);

/// Element-wise mean of the per-input predictions (summed in input order).
std::array<FloatRaster, 3> consensus_predict(net::Network<float>& model, std::span<const FloatRaster> inputs);

/// Pooled extent confusion of the model over examples (threshold 0.5).
eval::ConfusionCounts evaluate_extent(net::Network<float>& model, std::span<const data::Example> examples);

}  // namespace fieldkit::train
