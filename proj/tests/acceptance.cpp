// Acceptance run: one PASS/FAIL line per criterion. Criteria 7 to 10 train
// networks and take a long time on a desk machine; use --only to pick some.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "fieldkit/evalkit.hpp"
#include "fieldkit/experiments.hpp"
#include "fieldkit/fieldgeom.hpp"
#include "fieldkit/instancer.hpp"
#include "fieldkit/loss.hpp"
#include "fieldkit/pipeline.hpp"
#include "fieldkit/synthland.hpp"
#include "oracles.hpp"
#include "scene_gen.hpp"

using namespace fieldkit;

namespace {

struct Verdict {
  bool passed = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

double rel_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

// ---------------------------------------------------------------------------
// 1. Loss exactness

Verdict loss_exactness() {
  const std::vector<double> y{1, 0}, half{0.5, 0.5};
  const double cases[][2] = {{train::tanimoto(y, y, 0), 1.0},
                             {train::tanimoto(y, half, 0), 0.5},
                             {train::tanimoto(y, half, 1), 1.0 / 3.0},
                             {train::tanimoto_with_complement(y, half, 0), 0.5}};
  double worst = 0;
  for (const auto& c : cases) worst = std::max(worst, std::abs(c[0] - c[1]));
  Rng rng(5);
  int ones = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> b(1 + rng.below(64));
    for (auto& v : b) v = static_cast<double>(rng.below(2));
    ones += train::tanimoto_with_complement(b, b, static_cast<int>(rng.below(6))) == 1.0;
  }
  return {worst <= 1e-9 && ones == 1000,
          "hand values max error " + sci(worst) + ", FT(y,y)=1 in " + std::to_string(ones) + "/1000"};
}

// ---------------------------------------------------------------------------
// 2. Gradient correctness

struct LossCase {
  geom::LabelStack labels;
  std::array<std::vector<double>, 3> pred;
  train::PredictionMaps<double> maps() const { return {{pred[0], pred[1], pred[2]}}; }
};

LossCase random_loss_case(Rng& rng, int h, int w, double mask_share) {
  const auto g = GridGeometry::pixels(h, w);
  LossCase c;
  c.labels.extent = ByteRaster(g, 1);
  c.labels.boundary = ByteRaster(g, 1);
  c.labels.distance = FloatRaster(g, 1);
  c.labels.mask = ByteRaster(g, 1);
  for (std::size_t i = 0; i < g.size(); ++i) {
    c.labels.extent.data[i] = rng.uniform() < 0.5;
    c.labels.boundary.data[i] = rng.uniform() < 0.2;
    c.labels.distance.data[i] = static_cast<float>(rng.uniform());
    c.labels.mask.data[i] = rng.uniform() < mask_share;
  }
  c.labels.mask.data[0] = 1;
  for (auto& p : c.pred) {
    p.resize(g.size());
    for (auto& v : p) v = rng.uniform(0.02, 0.98);
  }
  return c;
}

double loss_gradient_error() {
  Rng rng(11);
  double worst = 0;
  for (int d : {0, 2, 5})
    for (bool avg : {false, true}) {
      train::TanimotoConfig cfg;
      cfg.d = d;
      cfg.average_over_depths = avg;
      auto c = random_loss_case(rng, 6, 6, 0.6);
      const std::size_t n = c.pred[0].size();
      std::array<std::vector<double>, 3> grad;
      for (auto& g : grad) g.assign(n, 0.0);
      train::PredictionGrads<double> pg{{grad[0], grad[1], grad[2]}};
      const train::TaskWeights w{1.0, 0.7, 1.3};
      train::masked_loss(c.maps(), c.labels, cfg, w, &pg);
      for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t i = 0; i < n; ++i) {
          if (!c.labels.mask.data[i]) continue;
          const double h = 1e-6, keep = c.pred[t][i];
          c.pred[t][i] = keep + h;
          const double up = train::masked_loss(c.maps(), c.labels, cfg, w);
          c.pred[t][i] = keep - h;
          const double down = train::masked_loss(c.maps(), c.labels, cfg, w);
          c.pred[t][i] = keep;
          worst = std::max(worst, rel_error(grad[t][i], (up - down) / (2 * h)));
        }
    }
  return worst;
}

double network_gradient_error(int* checked) {
  double worst = 0;
  *checked = 0;
  for (bool separate : {false, true}) {
    net::NetworkSpec s;
    s.depth = 2;
    s.base_filters = 4;
    s.in_channels = 3;
    s.separate_heads = separate;
    net::Network<double> model(s, 21);
    Rng rng(6);
    // Gates start closed; open them so the attention path carries gradient.
    for (auto& p : model.parameters())
      if (p.unit_interval)
        for (auto& v : p.value) v = rng.uniform(0.2, 0.8);
    net::Tensor<double> x(3, 16, 16);
    for (auto& v : x.data) v = rng.uniform();
    std::array<net::Tensor<double>, 3> r;
    for (auto& t : r) {
      // Zero-mean weights keep the objective small, so a step small enough
      // to rarely straddle a ReLU kink is not drowned in roundoff.
      t = net::Tensor<double>(1, 16, 16);
      for (auto& v : t.data) v = rng.uniform(-1.0, 1.0);
    }
    auto objective = [&] {
      const auto out = model.forward(x);
      double acc = 0;
      for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t i = 0; i < r[t].data.size(); ++i) acc += r[t].data[i] * out.maps[t].data[i];
      return acc;
    };
    model.zero_grad();
    model.forward(x, true);
    model.backward(r);
    for (auto& p : model.parameters())
      for (int k = 0; k < 3; ++k) {
        const std::size_t i = rng.below(p.value.size());
        const double keep = p.value[i], h = 1e-6;
        p.value[i] = keep + h;
        const double up = objective();
        p.value[i] = keep - h;
        const double down = objective();
        p.value[i] = keep;
        const double num = (up - down) / (2 * h);
        if (std::abs(num) < 1e-7 && std::abs(p.grad[i]) < 1e-7) continue;
        ++*checked;
        worst = std::max(worst, rel_error(p.grad[i], num));
      }
  }
  return worst;
}

Verdict gradient_correctness() {
  const double loss = loss_gradient_error();
  int checked = 0;
  const double network = network_gradient_error(&checked);
  return {loss < 1e-4 && network < 1e-3 && checked >= 20,
          "loss max rel error " + sci(loss) + ", network max rel error " + sci(network) + " over " +
              std::to_string(checked) + " parameters"};
}

// ---------------------------------------------------------------------------
// 3. Masking contract

Verdict masking_contract() {
  Rng rng(10);
  int same = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto c = random_loss_case(rng, 8, 9, 0.5);
    train::TanimotoConfig cfg;
    cfg.d = static_cast<int>(rng.below(6));
    cfg.average_over_depths = rng.below(2);
    const double before = train::masked_loss(c.maps(), c.labels, cfg);
    for (auto& p : c.pred)
      for (std::size_t i = 0; i < p.size(); ++i)
        if (!c.labels.mask.data[i]) p[i] = rng.uniform();
    const double after = train::masked_loss(c.maps(), c.labels, cfg);
    same += std::memcmp(&before, &after, sizeof(double)) == 0;
  }
  return {same == 100, std::to_string(same) + "/100 bitwise unchanged"};
}

// ---------------------------------------------------------------------------
// 4. Rasterization oracle

Verdict rasterization_oracle() {
  Rng rng(2024);
  int ok = 0;
  const int trials = 100;
  for (int trial = 0; trial < trials; ++trial) {
    const int h = 6 + static_cast<int>(rng.below(27)), w = 6 + static_cast<int>(rng.below(27));
    const auto g = GridGeometry::pixels(h, w);
    const auto polys = testgen::random_tiling(rng, h, w);
    bool equal = geom::rasterize_extent(polys, g).data == oracle::extent(polys, g) &&
                 geom::rasterize_boundary(polys, g, 2).data == oracle::boundary(polys, g, 2, 5);
    const auto d = geom::rasterize_distance(polys, g);
    const auto ref = oracle::distance(polys, g, 5);
    for (std::size_t i = 0; i < ref.size(); ++i) equal = equal && d.data[i] == static_cast<float>(ref[i]);
    ok += equal;
  }
  return {ok == trials, std::to_string(ok) + "/" + std::to_string(trials) + " scenes equal"};
}

// ---------------------------------------------------------------------------
// 5. Watershed oracle

FloatRaster as_float(const ByteRaster& b) {
  FloatRaster f(b.grid, 1);
  std::transform(b.data.begin(), b.data.end(), f.data.begin(), [](std::uint8_t v) { return static_cast<float>(v); });
  return f;
}

Verdict watershed_oracle() {
  Rng rng(1);
  int equal = 0;
  const int trials = 100;
  for (int trial = 0; trial < trials; ++trial) {
    const int h = 4 + static_cast<int>(rng.below(61)), w = 4 + static_cast<int>(rng.below(61));
    const auto s = testgen::random_surface(rng, h, w, trial % 3 == 0 ? 8 : 64);
    const float t = static_cast<float>(rng.uniform(0.1, 0.4));
    const auto fast = inst::flood(s, h, w, inst::find_markers(s, h, w, t));
    const auto slow = oracle::reference_flood(s, h, w, oracle::reference_markers(s, h, w, t));
    equal += oracle::same_partition(fast, slow);
  }
  std::vector<double> ious;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    synth::LandscapeSpec spec;
    spec.seed = seed;
    const auto scene = synth::generate_landscape(spec);
    const auto labels = geom::make_label_stack(scene.polygons, scene.grid());
    const auto seg = inst::watershed_segment(as_float(labels.extent), as_float(labels.boundary), inst::WatershedParams{});
    for (const auto& f : eval::match_fields(scene.field_ids, seg.labels)) ious.push_back(f.iou);
  }
  const double median = eval::aggregate_instances(ious).median_iou;
  return {equal == trials && median >= 0.95,
          std::to_string(equal) + "/" + std::to_string(trials) + " partitions equal; ground-truth median IoU " +
              fmt(median) + " over " + std::to_string(ious.size()) + " fields"};
}

// ---------------------------------------------------------------------------
// 6. Metric exactness

Verdict metric_exactness() {
  const eval::ConfusionCounts c{2, 3, 1, 1};
  double worst = std::max({std::abs(eval::overall_accuracy(c) - 5.0 / 7.0), std::abs(eval::f1_score(c) - 2.0 / 3.0),
                           std::abs(eval::mcc(c) - 5.0 / 12.0)});
  // Field IoU: 4 gt pixels, prediction covers 2 of them and nothing else.
  IdRaster inst(GridGeometry::pixels(4, 4), 1, 0u);
  inst.data[0] = inst.data[1] = 1;
  const std::vector<std::size_t> gt{0, 1, 4, 5};
  worst = std::max(worst, std::abs(eval::field_iou(gt, inst).iou - 0.5));

  // 95:5 labels, predictor answers the majority class everywhere but once.
  std::vector<std::uint8_t> lab(2000, 1), mask(2000, 1);
  for (std::size_t i = 0; i < 100; ++i) lab[i * 20] = 0;
  std::vector<float> pred(2000, 1.0f);
  pred[0] = 0.0f;
  const auto m = eval::confusion(pred, lab, mask);
  const double oa = eval::overall_accuracy(m), mc = eval::mcc(m);
  return {worst <= 1e-12 && mc < 0.1 && oa > 0.9,
          "hand values max error " + sci(worst) + "; majority predictor OA " + fmt(oa) + ", MCC " + fmt(mc)};
}

// ---------------------------------------------------------------------------
// 7. End-to-end desk run

struct DeskRun {
  double mcc = 0, median_iou = 0, seconds = 0;
};

DeskRun desk_run(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cfg = xp::default_config(xp::Scenario::TransferMatrix);
  auto spec = cfg.target.spec;
  const auto domain = data::generate_domain("target", spec, cfg.target.options, seed);
  pipe::TrainRequest req;
  req.network = cfg.network;
  req.training = cfg.training;
  req.training.seed = seed;
  const auto trained = pipe::train_on_domain(domain, req, nullptr);
  auto model = net::network_from_checkpoint(trained.checkpoint);
  const auto report = pipe::evaluate_on_domain(model, domain, pipe::EvalRequest{});
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {report.mcc, report.instances.median_iou, s};
}

template <typename T, typename F>
std::vector<T> parallel_map(const std::vector<std::uint64_t>& seeds, int jobs, F f) {
  std::vector<T> out(seeds.size());
  for (std::size_t start = 0; start < seeds.size(); start += static_cast<std::size_t>(jobs)) {
    std::vector<std::future<T>> batch;
    for (std::size_t i = start; i < std::min(seeds.size(), start + static_cast<std::size_t>(jobs)); ++i)
      batch.push_back(std::async(std::launch::async, f, seeds[i]));
    for (std::size_t k = 0; k < batch.size(); ++k) out[start + k] = batch[k].get();
  }
  return out;
}

Verdict end_to_end(int jobs) {
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  const auto t0 = std::chrono::steady_clock::now();
  const auto runs = parallel_map<DeskRun>(seeds, jobs, desk_run);
  const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  int ok = 0;
  std::string detail;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const bool pass = runs[i].mcc >= 0.6 && runs[i].median_iou >= 0.6 && runs[i].seconds <= 1800;
    ok += pass;
    detail += (i ? "; " : "") + std::string("seed ") + std::to_string(seeds[i]) + ": MCC " + fmt(runs[i].mcc) +
              ", median IoU " + fmt(runs[i].median_iou) + ", " + fmt(runs[i].seconds, 0) + " s";
  }
  return {ok == 3, std::to_string(ok) + "/3 seeds (" + detail + "); total " + fmt(total, 0) + " s"};
}

// ---------------------------------------------------------------------------
// 8 to 10. Trend experiments

Verdict trend(xp::Scenario s, const std::set<std::string>& check_names, int jobs, const std::string& out_dir) {
  auto cfg = xp::default_config(s);
  xp::RunOptions opts;
  opts.jobs = jobs;
  opts.progress = [](const std::string& line) { std::fprintf(stderr, "  %s\n", line.c_str()); };
  const auto report = xp::run_experiment(cfg, opts);
  if (!out_dir.empty()) xp::write_report(report, std::filesystem::path(out_dir) / xp::scenario_name(s));
  bool passed = true;
  std::size_t found = 0;
  std::string detail;
  for (const auto& c : report.checks) {
    if (!check_names.count(c.name)) continue;
    ++found;
    passed = passed && c.passed;
    detail += (detail.empty() ? "" : "; ") + c.name + " " + (c.passed ? "pass" : "fail") + " [" + c.detail + "]";
  }
  for (const auto& row : report.rows)
    if (!row.ok) {
      passed = false;
      detail += "; run " + row.cell + " seed " + std::to_string(row.seed) + " failed: " + row.error;
    }
  return {passed && found == check_names.size(), detail};
}

// ---------------------------------------------------------------------------
// 11. Reproducibility

xp::ExperimentConfig small_config(xp::Scenario s) {
  auto c = xp::default_config(s);
  c.seeds = {0, 1};
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

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Verdict reproducibility() {
  const auto root = std::filesystem::temp_directory_path() / ("fieldkit_acceptance_" + std::to_string(::getpid()));
  int identical = 0, files = 0;
  std::string differing;
  for (auto s : {xp::Scenario::BudgetStudy, xp::Scenario::TransferMatrix, xp::Scenario::LabelEfficiency,
                 xp::Scenario::TemporalMode}) {
    const auto cfg = small_config(s);
    // The second run goes through the JSON form of the config and two workers.
    const auto again = xp::config_from_json(xp::config_to_json(cfg));
    const auto a = root / (xp::scenario_name(s) + "_a"), b = root / (xp::scenario_name(s) + "_b");
    xp::write_report(xp::run_experiment(cfg, {1, {}}), a);
    xp::write_report(xp::run_experiment(again, {2, {}}), b);
    for (const char* f : {"report.json", "results.csv", "summary.csv"}) {
      ++files;
      if (slurp(a / f) == slurp(b / f) && !slurp(a / f).empty())
        ++identical;
      else
        differing += std::string(" ") + xp::scenario_name(s) + "/" + f;
    }
  }
  std::filesystem::remove_all(root);
  return {identical == files, std::to_string(identical) + "/" + std::to_string(files) + " report files byte-identical" +
                                  (differing.empty() ? "" : "; differing:" + differing)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fieldkit acceptance run"};
  std::vector<int> only;
  int jobs = 1;
  std::string out_dir;
  app.add_option("--only", only, "criteria to run (default: all)")->check(CLI::Range(1, 11));
  app.add_option("--jobs", jobs, "parallel training runs")->check(CLI::Range(1, 64));
  app.add_option("--out", out_dir, "directory for the trend experiment reports");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"loss exactness", loss_exactness},
      {"gradient correctness", gradient_correctness},
      {"masking contract", masking_contract},
      {"rasterization oracle", rasterization_oracle},
      {"watershed oracle", watershed_oracle},
      {"metric exactness", metric_exactness},
      {"end-to-end desk run", [&] { return end_to_end(jobs); }},
      {"budget-study trend",
       [&] { return trend(xp::Scenario::BudgetStudy, {"more_images_not_worse"}, jobs, out_dir); }},
      {"downsampling-transfer trend",
       [&] { return trend(xp::Scenario::TransferMatrix, {"downsampled_beats_original"}, jobs, out_dir); }},
      {"label-efficiency trend",
       [&] {
         return trend(xp::Scenario::LabelEfficiency, {"gap_non_increasing", "gap_positive_at_smallest"}, jobs, out_dir);
       }},
      {"reproducibility", reproducibility},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), n) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !v.passed;
    std::printf("%s %2d %s: %s (%.1f s)\n", v.passed ? "PASS" : "FAIL", n, criteria[i].first, v.detail.c_str(), s);
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
