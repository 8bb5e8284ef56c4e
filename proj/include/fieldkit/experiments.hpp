#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fieldkit/datakit.hpp"
#include "fieldkit/evalkit.hpp"
#include "fieldkit/fractalnet.hpp"
#include "fieldkit/instancer.hpp"
#include "fieldkit/trainlab.hpp"

namespace fieldkit::xp {

enum class Scenario { BudgetStudy, TransferMatrix, LabelEfficiency, TemporalMode };
std::string scenario_name(Scenario s);
Scenario scenario_from_name(const std::string& name);

/// Scene parameters plus domain layout. The spec's seed is ignored: scene
/// seeds derive from the experiment seed.
struct DomainConfig {
  synth::LandscapeSpec spec;
  data::DomainOptions options;
};

/// {"preset", "spec", "n_scenes", "grid", "fractions"}; "spec" keys override
/// the preset, or the defaults when no preset is named.
Json domain_config_to_json(const DomainConfig& d);
DomainConfig domain_config_from_json(const Json& j, DomainConfig defaults = {});

struct BudgetCell {
  int n_images = 0;
  int fields_per_image = 0;
};

struct ExperimentConfig {
  std::string name = "experiment";
  Scenario scenario = Scenario::BudgetStudy;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  DomainConfig target;
  DomainConfig source;
  net::NetworkSpec network;
  train::TrainConfig training;

  /// Budget study grid; every cell must label the same number of fields.
  std::vector<BudgetCell> budget_grid{{25, 8}, {100, 2}};
  data::FieldSampler sampler = data::FieldSampler::Anchor;

  /// Block size used to shrink source imagery toward target field sizes.
  int downsample_factor = 2;
  /// Label-efficiency grid of labeled target fields, and how many fields
  /// each labeled image carries.
  std::vector<int> label_counts{10, 40, 160};
  int label_fields_per_image = 2;

  /// Temporal scenario: scenes are re-rendered with this contrast loss.
  double contrast_drop = 0.6;

  inst::WatershedParams watershed;
  /// Grid-search watershed parameters on validation predictions per run.
  bool tune_watershed = false;
  /// Test scenes evaluated per run; 0 means all.
  int max_test_scenes = 0;

  void validate() const;
};

/// Desk-scale defaults: 128 px target tiles, 256 px source tiles, depth-3
/// network with 8 filters and short training runs.
ExperimentConfig default_config(Scenario s);

Json config_to_json(const ExperimentConfig& c);
/// Missing keys keep the scenario defaults; unknown keys are rejected.
ExperimentConfig config_from_json(const Json& j);

/// Metrics of one model on one set of test scenes.
struct RunMetrics {
  double oa = 0, f1 = 0, mcc = 0;
  double median_iou = 0, iou_50 = 0;
  std::size_t n_fields = 0;
};

/// One (cell, seed) training run.
struct CellResult {
  std::string cell;
  /// Grid value of the cell: images for budget cells, labeled fields for
  /// label-efficiency cells, 0 otherwise.
  int param = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  RunMetrics metrics;
  int best_epoch = 0;
  std::size_t n_train_examples = 0;
  std::size_t n_labeled_fields = 0;
};

struct Stat {
  double mean = 0, std = 0;
};

struct CellSummary {
  std::string cell;
  int param = 0;
  std::size_t n_ok = 0;
  Stat oa, f1, mcc, median_iou, iou_50;
};

/// Verdict on an expected trend, computed from the runs of the report.
struct TrendCheck {
  std::string name;
  std::string description;
  bool passed = false;
  std::string detail;
};

struct ExperimentReport {
  ExperimentConfig config;
  std::vector<CellResult> rows;  // cell order, then seed order
  std::vector<CellSummary> summary;
  std::vector<TrendCheck> checks;
  /// Published values of the analogous real-data experiment.
  std::vector<std::string> references;
};

struct RunOptions {
  int jobs = 1;
  std::function<void(const std::string&)> progress;
};

ExperimentReport run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

/// Mean and sample standard deviation (NaN below two values).
Stat mean_std(std::span<const double> v);

/// Rebuilds summary and checks from the rows.
void summarize(ExperimentReport& r);

Json report_to_json(const ExperimentReport& r);
/// scenario,cell,param,seed,status,oa,f1,mcc,median_iou,iou_50,best_epoch,n_train_examples,n_labeled_fields,error
std::string rows_csv(const ExperimentReport& r);
/// cell,param,n_ok and mean/std of every metric.
std::string summary_csv(const ExperimentReport& r);
/// report.json, results.csv and summary.csv under `dir`.
void write_report(const ExperimentReport& r, const std::filesystem::path& dir);

/// How a model consumes the seasons of a scene.
struct InputMode {
  data::TemporalMode mode = data::TemporalMode::Single;
  int season = 0;
};

/// Extent, boundary and distance maps for a scene. Separate mode averages
/// the per-season predictions.
std::array<FloatRaster, 3> predict_scene(net::Network<float>& model, const synth::SyntheticScene& scene,
                                         const InputMode& mode);

/// Pixel metrics against full labels and watershed instance metrics against
/// every field of each scene.
RunMetrics evaluate_scenes(net::Network<float>& model, std::span<const synth::SyntheticScene* const> scenes,
                           const InputMode& mode, const inst::WatershedParams& params);

}  // namespace fieldkit::xp
