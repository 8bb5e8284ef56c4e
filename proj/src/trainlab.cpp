#include "fieldkit/trainlab.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace fieldkit::train {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw InvalidArgument("Adam decay rates must lie in [0, 1)");
  if (!(adam_epsilon > 0.0)) throw InvalidArgument("adam_epsilon must be positive");
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (max_epochs < 0) throw InvalidArgument("max_epochs must be >= 0");
  if (samples_per_epoch < 0) throw InvalidArgument("samples_per_epoch must be >= 0");
  if (crop_size < 0) throw InvalidArgument("crop_size must be >= 0");
  if (patience < 1) throw InvalidArgument("patience must be >= 1");
  if (task_weights.extent < 0 || task_weights.boundary < 0 || task_weights.distance < 0)
    throw InvalidArgument("task weights must be non-negative");
  loss.validate();
}

Json train_config_to_json(const TrainConfig& c) {
  Json j;
  j["learning_rate"] = c.learning_rate;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_epsilon"] = c.adam_epsilon;
  j["batch_size"] = c.batch_size;
  j["max_epochs"] = c.max_epochs;
  j["samples_per_epoch"] = c.samples_per_epoch;
  j["crop_size"] = c.crop_size;
  j["patience"] = c.patience;
  j["seed"] = c.seed;
  j["task_weights"] = {c.task_weights.extent, c.task_weights.boundary, c.task_weights.distance};
  j["tanimoto_d"] = c.loss.d;
  j["average_over_depths"] = c.loss.average_over_depths;
  j["tanimoto_epsilon"] = c.loss.epsilon;
  return j;
}

TrainConfig train_config_from_json(const Json& j) {
  if (!j.is_object()) throw FormatError("training config must be a JSON object");
  static const std::vector<std::string> known{"learning_rate", "beta1",        "beta2",      "adam_epsilon",
                                              "batch_size",    "max_epochs",   "samples_per_epoch",
                                              "crop_size",     "patience",     "seed",       "task_weights",
                                              "tanimoto_d",    "average_over_depths", "tanimoto_epsilon"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw FormatError("unknown training option: " + k);
  TrainConfig c;
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.samples_per_epoch = j.value("samples_per_epoch", c.samples_per_epoch);
    c.crop_size = j.value("crop_size", c.crop_size);
    c.patience = j.value("patience", c.patience);
    c.seed = j.value("seed", c.seed);
    if (j.contains("task_weights")) {
      const auto w = j.at("task_weights").get<std::vector<double>>();
      if (w.size() != 3) throw FormatError("task_weights needs three values");
      c.task_weights = {w[0], w[1], w[2]};
    }
    c.loss.d = j.value("tanimoto_d", c.loss.d);
    c.loss.average_over_depths = j.value("average_over_depths", c.loss.average_over_depths);
    c.loss.epsilon = j.value("tanimoto_epsilon", c.loss.epsilon);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad training config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string dataset_fingerprint(std::span<const data::Example> train, std::span<const data::Example> val) {
  std::uint64_t h = fnv1a("dataset");
  auto add = [&](const data::Example& e) {
    h = fnv1a(e.id, h);
    const int dims[3] = {e.image.channels, e.image.height(), e.image.width()};
    h = fnv1a_bytes(dims, sizeof dims, h);
    h = fnv1a_bytes(e.image.data.data(), e.image.data.size() * sizeof(float), h);
    h = fnv1a_bytes(e.labels.extent.data.data(), e.labels.extent.data.size(), h);
    h = fnv1a_bytes(e.labels.boundary.data.data(), e.labels.boundary.data.size(), h);
    h = fnv1a_bytes(e.labels.distance.data.data(), e.labels.distance.data.size() * sizeof(float), h);
    h = fnv1a_bytes(e.labels.mask.data.data(), e.labels.mask.data.size(), h);
  };
  for (const auto& e : train) add(e);
  h = fnv1a("|val|", h);
  for (const auto& e : val) add(e);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

bool has_supervision(const data::Example& e) {
  return std::any_of(e.labels.mask.data.begin(), e.labels.mask.data.end(), [](std::uint8_t m) { return m != 0; });
}

/// NaN ranks below every number.
bool better(double candidate, double best) {
  if (std::isnan(candidate)) return false;
  return std::isnan(best) || candidate > best;
}

std::string parameter_norm_report(const net::Network<float>& model) {
  std::vector<std::pair<double, std::string>> norms;
  std::size_t non_finite = 0;
  for (const auto& p : model.parameters()) {
    double s = 0.0;
    for (float v : p.value) {
      if (!std::isfinite(v)) ++non_finite;
      s += static_cast<double>(v) * v;
    }
    norms.emplace_back(std::sqrt(s), p.name);
  }
  std::sort(norms.begin(), norms.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::ostringstream os;
  os << non_finite << " non-finite parameter values; largest norms:";
  for (std::size_t i = 0; i < std::min<std::size_t>(5, norms.size()); ++i)
    os << ' ' << norms[i].second << '=' << csv_number(norms[i].first);
  return os.str();
}

class Adam {
 public:
  Adam(const net::Network<float>& model, const TrainConfig& cfg) : cfg_(cfg) {
    for (const auto& p : model.parameters()) {
      m_.emplace_back(p.value.size(), 0.0f);
      v_.emplace_back(p.value.size(), 0.0f);
    }
  }

  void step(net::Network<float>& model, double grad_scale) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_), c2 = 1.0 - std::pow(cfg_.beta2, t_);
    auto& params = model.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = params[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i] * grad_scale;
        const double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        const double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        m[i] = static_cast<float>(mi);
        v[i] = static_cast<float>(vi);
        p.value[i] = static_cast<float>(p.value[i] - cfg_.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + cfg_.adam_epsilon));
      }
    }
    model.project();
  }

 private:
  const TrainConfig& cfg_;
  std::vector<std::vector<float>> m_, v_;
  int t_ = 0;
};

net::Tensor<float> pad_to_multiple(const FloatRaster& image, int m) {
  const int h = image.height(), w = image.width();
  const int ph = (h + m - 1) / m * m, pw = (w + m - 1) / m * m;
  net::Tensor<float> t(image.channels, ph, pw);
  for (int c = 0; c < image.channels; ++c)
    for (int r = 0; r < ph; ++r)
      for (int k = 0; k < pw; ++k)
        t.channel(c)[static_cast<std::size_t>(r) * pw + k] = image.at(c, std::min(r, h - 1), std::min(k, w - 1));
  return t;
}

}  // namespace

std::string training_log_csv(std::span<const EpochLog> log) {
  std::string s = "epoch,train_loss,val_oa,val_f1,val_mcc,wall_time\n";
  for (const auto& e : log)
    s += std::to_string(e.epoch) + ',' + csv_number(e.train_loss) + ',' + csv_number(e.val_oa) + ',' +
         csv_number(e.val_f1) + ',' + csv_number(e.val_mcc) + ',' + csv_number(e.wall_time) + '\n';
  return s;
}

std::array<FloatRaster, 3> predict(net::Network<float>& model, const FloatRaster& image) {
  if (image.channels != model.spec().in_channels)
    throw ShapeError("model expects " + std::to_string(model.spec().in_channels) + " input channels, imagery has " +
                     std::to_string(image.channels));
  const auto x = pad_to_multiple(image, model.spec().size_multiple());
  const auto out = model.forward(x);
  std::array<FloatRaster, 3> maps;
  for (int t = 0; t < 3; ++t) {
    auto& m = maps[static_cast<std::size_t>(t)];
    m = FloatRaster(image.grid, 1);
    const auto& src = out.maps[static_cast<std::size_t>(t)];
    for (int r = 0; r < image.height(); ++r)
      std::copy_n(src.data.begin() + static_cast<std::ptrdiff_t>(r) * src.w, image.width(),
                  m.data.begin() + static_cast<std::ptrdiff_t>(r) * image.width());
  }
  return maps;
}

std::array<FloatRaster, 3> consensus_predict(net::Network<float>& model, std::span<const FloatRaster> inputs) {
  if (inputs.empty()) throw InvalidArgument("consensus needs at least one input");
  for (const auto& in : inputs)
    if (in.height() != inputs[0].height() || in.width() != inputs[0].width() || in.channels != inputs[0].channels)
      throw ShapeError("consensus inputs differ in shape");
  std::array<std::vector<double>, 3> sum;
  for (auto& s : sum) s.assign(inputs[0].plane_size(), 0.0);
  for (const auto& in : inputs) {
    const auto maps = predict(model, in);
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t i = 0; i < sum[t].size(); ++i) sum[t][i] += maps[t].data[i];
  }
  std::array<FloatRaster, 3> out;
  for (std::size_t t = 0; t < 3; ++t) {
    out[t] = FloatRaster(inputs[0].grid, 1);
    for (std::size_t i = 0; i < sum[t].size(); ++i)
      out[t].data[i] = static_cast<float>(sum[t][i] / static_cast<double>(inputs.size()));
  }
  return out;
}

eval::ConfusionCounts evaluate_extent(net::Network<float>& model, std::span<const data::Example> examples) {
  eval::ConfusionCounts total;
  for (const auto& e : examples) {
    if (!has_supervision(e)) continue;
    const auto maps = predict(model, e.image);
    total += eval::confusion(maps[0].data, e.labels.extent.data, e.labels.mask.data);
  }
  return total;
}

TrainResult train(net::Network<float>& model, const Dataset& ds, const TrainConfig& cfg, const TrainHooks& hooks,
                  std::optional<std::string> parent_checkpoint_id) {
  cfg.validate();
  std::vector<const data::Example*> pool;
  for (const auto& e : ds.train) {
    if (e.image.channels != model.spec().in_channels)
      throw ShapeError("example " + e.id + " has " + std::to_string(e.image.channels) + " channels, model expects " +
                       std::to_string(model.spec().in_channels));
    if (has_supervision(e)) pool.push_back(&e);
  }
  if (cfg.max_epochs > 0 && pool.empty()) throw UnsupervisableError("unsupervisable dataset: no training example has a labeled pixel");
  const int m = model.spec().size_multiple();
  if (cfg.crop_size > 0 && cfg.crop_size % m)
    throw ShapeError("crop_size " + std::to_string(cfg.crop_size) + " must be a multiple of " + std::to_string(m));

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  TrainResult result;
  auto record = [&](int epoch, double train_loss) {
    const auto c = evaluate_extent(model, ds.val);
    EpochLog e{epoch, train_loss, eval::overall_accuracy(c), eval::f1_score(c), eval::mcc(c), elapsed()};
    result.log.push_back(e);
    // Without validation data the last epoch is kept.
    const bool take = ds.val.empty() ? true : (epoch == 0 || better(e.val_mcc, result.best_val_mcc));
    if (take) {
      result.best_epoch = epoch;
      result.best_val_mcc = e.val_mcc;
      result.checkpoint = net::make_checkpoint(model, net::Provenance{ds.id, epoch, e.val_mcc, parent_checkpoint_id});
    }
    if (hooks.on_epoch) hooks.on_epoch(e);
    if (hooks.log_csv) {
      std::ofstream out(*hooks.log_csv, std::ios::binary);
      if (!out) throw IoError("cannot write " + hooks.log_csv->string());
      out << training_log_csv(result.log);
    }
  };

  record(0, std::numeric_limits<double>::quiet_NaN());
  Adam opt(model, cfg);
  const std::size_t per_epoch = cfg.samples_per_epoch > 0 ? static_cast<std::size_t>(cfg.samples_per_epoch) : pool.size();
  const int crop = cfg.crop_size > 0 ? cfg.crop_size : std::numeric_limits<int>::max();
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto order = data::epoch_order(pool.size(), cfg.seed, epoch);
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < per_epoch; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(per_epoch, start + static_cast<std::size_t>(cfg.batch_size));
      model.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = *pool[order[i % pool.size()]];
        const auto s = data::draw_training_sample(ex, crop, data::sample_seed(cfg.seed, epoch, i));
        net::Tensor<float> x(s.image.channels, s.image.height(), s.image.width());
        x.data.assign(s.image.data.begin(), s.image.data.end());
        const auto out = model.forward(x, true);
        std::array<net::Tensor<float>, 3> g;
        for (auto& t : g) t = net::Tensor<float>(1, x.h, x.w);
        const PredictionMaps<float> pm{{out.maps[0].data, out.maps[1].data, out.maps[2].data}};
        const PredictionGrads<float> pg{{g[0].data, g[1].data, g[2].data}};
        const double l = masked_loss(pm, s.labels, cfg.loss, cfg.task_weights, &pg);
        if (!std::isfinite(l))
          throw NumericError("non-finite loss in epoch " + std::to_string(epoch) + " batch " +
                             std::to_string(n_batches) + " (sample " + s.id + "); " + parameter_norm_report(model));
        batch_loss += l;
        model.backward(g);
      }
      const double count = static_cast<double>(end - start);
      opt.step(model, 1.0 / count);
      loss_sum += batch_loss / count;
      ++n_batches;
    }
    for (const auto& p : model.parameters())
      for (float v : p.value)
        if (!std::isfinite(v))
          throw NumericError("non-finite parameter after epoch " + std::to_string(epoch) + "; " +
                             parameter_norm_report(model));
    record(epoch, n_batches ? loss_sum / static_cast<double>(n_batches) : 0.0);
    if (!ds.val.empty() && epoch - result.best_epoch >= cfg.patience) break;
  }
  net::load_parameters(model, result.checkpoint);
  return result;
}

std::string adapter_name(ChannelAdapter a) { return a == ChannelAdapter::TileMean ? "tile_mean" : "none"; }

ChannelAdapter adapter_from_name(const std::string& name) {
  if (name == "none") return ChannelAdapter::None;
  if (name == "tile_mean") return ChannelAdapter::TileMean;
  throw InvalidArgument("unknown channel adapter '" + name + "' (valid: none, tile_mean)");
}

net::Network<float> network_for_channels(const net::Checkpoint& parent, int in_channels, ChannelAdapter adapter) {
  if (parent.spec.in_channels == in_channels) return net::network_from_checkpoint(parent);
  const int old_c = parent.spec.in_channels;
  if (adapter == ChannelAdapter::None)
    throw ShapeError("checkpoint expects " + std::to_string(old_c) + " input channels, data has " +
                     std::to_string(in_channels) + "; declare a channel adapter");
  if (in_channels % old_c)
    throw ShapeError("tile_mean adapter needs a multiple of " + std::to_string(old_c) + " input channels, got " +
                     std::to_string(in_channels));
  auto spec = parent.spec;
  spec.in_channels = in_channels;
  net::Network<float> model(spec, 0);
  auto& params = model.parameters();
  const int groups = in_channels / old_c;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (p.name != parent.names[i]) throw ShapeError("checkpoint layout does not match network at " + p.name);
    if (p.shape == parent.shapes[i]) {
      std::copy(parent.values[i].begin(), parent.values[i].end(), p.value.begin());
      continue;
    }
    // First-layer weights: [out, in, k, k].
    const int out = p.shape[0], kk = p.shape[2] * p.shape[3];
    for (int o = 0; o < out; ++o)
      for (int c = 0; c < in_channels; ++c)
        for (int k = 0; k < kk; ++k)
          p.value[(static_cast<std::size_t>(o) * in_channels + c) * kk + k] =
              parent.values[i][(static_cast<std::size_t>(o) * old_c + c % old_c) * kk + k] / static_cast<float>(groups);
  }
  return model;
}

TrainResult finetune(const net::Checkpoint& parent, const Dataset& ds, const TrainConfig& cfg, ChannelAdapter adapter,
                     const TrainHooks& hooks) {
  const int channels = !ds.train.empty() ? ds.train[0].image.channels
                       : !ds.val.empty() ? ds.val[0].image.channels
                                         : parent.spec.in_channels;
  auto model = network_for_channels(parent, channels, adapter);
  return train(model, ds, cfg, hooks, parent.id());
}

}  // namespace fieldkit::train
