#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fieldkit/experiments.hpp"
#include "fieldkit/jsonio.hpp"

using namespace fieldkit;
using namespace fieldkit::xp;

namespace {

/// Seconds-scale config: 48 px tiles, depth-2 network, one short epoch.
ExperimentConfig tiny(Scenario s) {
  auto c = default_config(s);
  c.seeds = {7};
  for (auto* d : {&c.target, &c.source}) {
    d->spec.height = d->spec.width = 48;
    d->options.n_scenes = 16;
    d->options.grid_rows = d->options.grid_cols = 4;
  }
  c.network.depth = 2;
  c.network.base_filters = 4;
  c.training.max_epochs = 1;
  c.training.samples_per_epoch = 8;
  c.training.crop_size = 32;
  c.budget_grid = {{2, 4}, {4, 2}};
  c.label_counts = {4, 8};
  c.max_test_scenes = 2;
  return c;
}

std::vector<std::string> cells(const ExperimentReport& r) {
  std::vector<std::string> out;
  for (const auto& row : r.rows) out.push_back(row.cell);
  return out;
}

bool all_ok(const ExperimentReport& r) {
  for (const auto& row : r.rows)
    if (!row.ok) return false;
  return true;
}

}  // namespace

TEST_CASE("default configs survive a JSON round trip") {
  for (auto s : {Scenario::BudgetStudy, Scenario::TransferMatrix, Scenario::LabelEfficiency, Scenario::TemporalMode}) {
    const auto c = default_config(s);
    CHECK_NOTHROW(c.validate());
    const auto j = config_to_json(c);
    CHECK(config_to_json(config_from_json(j)) == j);
    CHECK(scenario_from_name(scenario_name(s)) == s);
  }
}

TEST_CASE("desk defaults stay within the desk budget") {
  const auto c = default_config(Scenario::TransferMatrix);
  CHECK(c.target.spec.height == 128);
  CHECK(c.network.depth == 3);
  CHECK(c.network.base_filters == 8);
  CHECK(c.training.max_epochs <= 50);
  CHECK(c.seeds.size() <= 3);
}

TEST_CASE("config parsing applies overrides and rejects mistakes") {
  const auto c = config_from_json(Json::parse(R"({"scenario": "label_efficiency", "seeds": [3],
      "target": {"preset": "target-small", "spec": {"height": 64}}, "label_counts": [2, 6]})"));
  CHECK(c.scenario == Scenario::LabelEfficiency);
  CHECK(c.seeds == std::vector<std::uint64_t>{3});
  CHECK(c.target.spec.height == 64);
  CHECK(c.label_counts == std::vector<int>{2, 6});
  // Untouched sections keep the scenario defaults.
  CHECK(c.training.max_epochs == default_config(Scenario::LabelEfficiency).training.max_epochs);

  CHECK_THROWS_AS(config_from_json(Json::parse(R"({"scenario": "budget_study", "sedes": [1]})")), FormatError);
  CHECK_THROWS_AS(config_from_json(Json::parse(R"({"scenario": "nope"})")), InvalidArgument);
  CHECK_THROWS_AS(config_from_json(Json::parse(R"({"scenario": "budget_study", "target": {"preset": "nope"}})")), InvalidArgument);
  CHECK_THROWS_AS(config_from_json(Json::parse(R"({"scenario": "budget_study", "seeds": []})")), InvalidArgument);
  CHECK_THROWS_AS(config_from_json(Json::parse(R"({"seeds": [1]})")), FormatError);
}

TEST_CASE("budget grids must keep the field budget constant") {
  auto c = default_config(Scenario::BudgetStudy);
  c.budget_grid = {{25, 8}, {100, 3}};
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c.budget_grid = {{40, 5}};
  CHECK_NOTHROW(c.validate());
  c.budget_grid.clear();
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}

TEST_CASE("temporal experiments need several seasons") {
  auto c = default_config(Scenario::TemporalMode);
  c.target.spec.n_seasons = 1;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}

TEST_CASE("label counts beyond the available fields are an error") {
  auto c = tiny(Scenario::LabelEfficiency);
  c.label_counts = {2, 1000000};
  CHECK_THROWS_AS(run_experiment(c), InvalidArgument);
}

TEST_CASE("mean and sample standard deviation") {
  const std::vector<double> v{1.0, 2.0, 6.0};
  const auto s = mean_std(v);
  CHECK(s.mean == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(s.std == doctest::Approx(std::sqrt(7.0)).epsilon(1e-15));
  const std::vector<double> one{0.5};
  CHECK(mean_std(one).mean == 0.5);
  CHECK(std::isnan(mean_std(one).std));
}

TEST_CASE("failed runs stay visible in summaries and reports") {
  ExperimentReport r;
  r.config = default_config(Scenario::BudgetStudy);
  CellResult ok{"a", 1, 0, true, "", {0.9, 0.8, 0.5, 0.7, 0.6, 10}};
  CellResult bad{"b", 2, 0, false, "boom", {}};
  r.rows = {ok, bad};
  summarize(r);
  REQUIRE(r.summary.size() == 2);
  CHECK(r.summary[1].n_ok == 0);
  CHECK(std::isnan(r.summary[1].mcc.mean));
  const auto csv = rows_csv(r);
  CHECK(csv.find("failed") != std::string::npos);
  CHECK(csv.find("boom") != std::string::npos);
  CHECK(summary_csv(r).find("nan") != std::string::npos);
  CHECK(report_to_json(r)["summary"][1]["mcc"]["mean"].is_null());
}

TEST_CASE("budget study runs every cell for every seed and is reproducible") {
  auto c = tiny(Scenario::BudgetStudy);
  c.seeds = {1, 2};
  const auto a = run_experiment(c);
  CHECK(a.rows.size() == 4);
  CHECK(all_ok(a));
  CHECK(a.summary.size() == 2);
  CHECK(a.checks.size() == 1);
  for (const auto& row : a.rows) CHECK(row.n_labeled_fields == 8);
  REQUIRE_FALSE(a.references.empty());
  CHECK(a.references[0].find("paper, real data — not a target") != std::string::npos);

  RunOptions two;
  two.jobs = 2;
  const auto b = run_experiment(c, two);
  CHECK(rows_csv(a) == rows_csv(b));
  CHECK(summary_csv(a) == summary_csv(b));
  CHECK(report_to_json(a).dump() == report_to_json(b).dump());
}

TEST_CASE("a single-pair budget grid is a valid degenerate study") {
  auto c = tiny(Scenario::BudgetStudy);
  c.budget_grid = {{4, 2}};
  const auto r = run_experiment(c);
  CHECK(r.rows.size() == 1);
  CHECK(all_ok(r));
}

TEST_CASE("transfer matrix emits four cells in table order") {
  const auto r = run_experiment(tiny(Scenario::TransferMatrix));
  CHECK(cells(r) ==
        std::vector<std::string>{"source_original", "source_downsampled", "pretrain_finetune", "target_scratch"});
  CHECK(all_ok(r));
  CHECK(r.checks.size() == 2);
}

TEST_CASE("label efficiency trains scratch and finetune per count") {
  const auto r = run_experiment(tiny(Scenario::LabelEfficiency));
  std::size_t scratch = 0, finetune = 0;
  for (const auto& row : r.rows) {
    scratch += row.cell == "scratch";
    finetune += row.cell == "finetune";
  }
  CHECK(scratch == 2);
  CHECK(finetune == 2);
  CHECK(all_ok(r));
}

TEST_CASE("temporal scenario compares input modes") {
  const auto r = run_experiment(tiny(Scenario::TemporalMode));
  CHECK(cells(r) == std::vector<std::string>{"single_season", "consensus", "stacked", "stacked_shuffled"});
  CHECK(all_ok(r));
}

TEST_CASE("consensus of identical seasons equals the single-season prediction") {
  synth::LandscapeSpec s;
  s.height = s.width = 32;
  auto scene = synth::generate_landscape(s);
  for (auto& season : scene.imagery) season = scene.imagery[0];
  net::NetworkSpec ns;
  ns.depth = 2;
  ns.base_filters = 4;
  net::Network<float> model(ns, 3);
  const auto single = predict_scene(model, scene, {data::TemporalMode::Single, 0});
  const auto consensus = predict_scene(model, scene, {data::TemporalMode::Separate, 0});
  for (int c = 0; c < 3; ++c) {
    REQUIRE(single[c].data.size() == consensus[c].data.size());
    for (std::size_t i = 0; i < single[c].data.size(); ++i)
      CHECK(consensus[c].data[i] == doctest::Approx(single[c].data[i]).epsilon(1e-6));
  }
}

TEST_CASE("reports are written as JSON and CSV") {
  ExperimentReport r;
  r.config = default_config(Scenario::BudgetStudy);
  r.rows = {CellResult{"a", 1, 0, true, "", {0.9, 0.8, 0.5, 0.7, 0.6, 10}}};
  summarize(r);
  const auto dir = std::filesystem::temp_directory_path() / "fieldkit_test_report";
  std::filesystem::remove_all(dir);
  write_report(r, dir);
  for (const char* f : {"report.json", "results.csv", "summary.csv"}) CHECK(std::filesystem::exists(dir / f));
  CHECK(read_json_file(dir / "report.json")["runs"].size() == 1);
  std::filesystem::remove_all(dir);
}
