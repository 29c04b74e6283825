#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "cmco/checkpoint.hpp"
#include "cmco/error.hpp"
#include "cmco/pipeline.hpp"
#include "test_util.hpp"

using namespace cmco;
using cmco::testing::read_bytes;
using cmco::testing::scratch_dir;
namespace fs = std::filesystem;

namespace {

// Small enough to train in well under a second.
PipelineConfig small_config(const fs::path& root, std::uint64_t seed = 3) {
  PipelineConfig c = preset("antiderivative");
  c.seed = seed;
  c.paths = PipelinePaths::under(root);
  c.task.n = 100;
  c.task.steps = 8;
  c.task.points = 16;
  c.task.fine_steps = 2000;
  c.split = SplitSpec{};
  c.split.counts = std::array<std::size_t, 3>{40, 40, 20};
  c.branch = BranchConfig{nn::CellKind::gru, 1, 8, 1, 0.1, true};
  c.trunk = TrunkConfig{{1, 16, 8}, nn::Activation::tanh, 0.1};
  c.train.epochs = 2;
  c.train.batch_size = 16;
  c.finalize();
  return c;
}

std::string run_all(const PipelineConfig& c) {
  std::ostringstream log;
  cmd_gen(c, log);
  cmd_train(c, log);
  cmd_calibrate(c, log);
  cmd_evaluate(c, log);
  return log.str();
}

int cli(std::vector<std::string> args, std::string* err_text = nullptr) {
  args.insert(args.begin(), "cmco");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (err_text) *err_text = err.str();
  return code;
}

}  // namespace

TEST_CASE("gen writes three role splits with float32 byte counts") {
  const auto root = scratch_dir("pipeline_gen");
  PipelineConfig c = preset("antiderivative");
  c.paths = PipelinePaths::under(root);
  c.task.fine_steps = 500;
  c.finalize();
  std::ostringstream log;
  cmd_gen(c, log);
  const std::size_t sizes[3] = {600, 200, 200};
  const char* names[3] = {"train", "calibration", "test"};
  for (int k = 0; k < 3; ++k) {
    const fs::path dir = root / "data" / names[k];
    const auto manifest = io::read_json(dir / "manifest.json");
    CHECK(manifest.at("role").get<std::string>() == names[k]);
    CHECK(manifest.at("format_version").get<int>() == kDatasetFormatVersion);
    CHECK(fs::file_size(dir / "branch_inputs.bin") == sizes[k] * c.task.steps * 1 * 4);
    CHECK(fs::file_size(dir / "coords.bin") == c.task.points * 1 * 4);
    CHECK(fs::file_size(dir / "fields.bin") == sizes[k] * c.task.points * 4);
  }
  const std::string first = read_bytes(root / "data" / "test" / "fields.bin");
  cmd_gen(c, log);
  CHECK(read_bytes(root / "data" / "test" / "fields.bin") == first);
}

TEST_CASE("gen rejects a split that leaves calibration empty") {
  const auto root = scratch_dir("pipeline_empty_split");
  PipelineConfig c = small_config(root);
  c.split.counts.reset();
  c.split.fractions = {1.0, 0.0, 0.0};
  std::ostringstream log;
  CHECK_THROWS_AS(cmd_gen(c, log), ConfigError);

  io::write_json(root / "cfg.json", {{"split", {{"fractions", {1.0, 0.0, 0.0}}}}});
  CHECK(cli({"gen", "--config", (root / "cfg.json").string(), "--root", root.string()}) == kExitConfig);
}

TEST_CASE("zero-epoch training saves the initialization and an empty history") {
  const auto root = scratch_dir("pipeline_zero_epoch");
  PipelineConfig c = small_config(root);
  c.train.epochs = 0;
  std::ostringstream log;
  cmd_gen(c, log);
  const TrainOutcome out = cmd_train(c, log);
  CHECK(out.history.empty());

  nn::RngStream init(init_seed(c), 0);
  const DeepONetModel fresh = build_model(c.branch, c.trunk, init);
  const DeepONetModel saved = load_checkpoint(c.paths.checkpoint);
  const auto a = fresh.params.named();
  const auto b = saved.params.named();
  REQUIRE(a.size() == b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::size_t i = 0; i < a[k].second->size(); ++i) {
      CHECK((*b[k].second)[i] == io::to_f32((*a[k].second)[i]));
    }
  }
  CHECK(read_bytes(c.paths.checkpoint / "loss_history.csv") == "epoch,lr,train_loss\n");
}

TEST_CASE("training twice with the same seed gives identical loss histories") {
  const auto root = scratch_dir("pipeline_train_repeat");
  PipelineConfig c = small_config(root);
  std::ostringstream log;
  cmd_gen(c, log);
  cmd_train(c, log);
  const std::string first = read_bytes(c.paths.checkpoint / "loss_history.csv");
  const std::string params = read_bytes(c.paths.checkpoint / "params.bin");
  cmd_train(c, log);
  CHECK(read_bytes(c.paths.checkpoint / "loss_history.csv") == first);
  CHECK(read_bytes(c.paths.checkpoint / "params.bin") == params);
  CHECK(std::count(first.begin(), first.end(), '\n') == 3);
}

TEST_CASE("non-finite training loss exits with the numeric code and names the epoch") {
  const auto root = scratch_dir("pipeline_nan");
  io::write_json(root / "cfg.json", {{"task", {{"n", 100}, {"t", 8}, {"p", 16}}},
                                     {"split", {{"counts", {40, 40, 20}}}},
                                     {"train", {{"learning_rate", 1e300}, {"epochs", 2}}}});
  const std::vector<std::string> base{"--config", (root / "cfg.json").string(), "--root", root.string()};
  auto with = [&](const std::string& sub) {
    std::vector<std::string> a{sub};
    a.insert(a.end(), base.begin(), base.end());
    return a;
  };
  REQUIRE(cli(with("gen")) == kExitOk);
  std::string err;
  CHECK(cli(with("train"), &err) == kExitNumeric);
  CHECK(err.find("epoch 0") != std::string::npos);
}

TEST_CASE("calibrate rejects too few calibration samples and names the minimum") {
  const auto root = scratch_dir("pipeline_infeasible");
  PipelineConfig c = small_config(root);
  c.split.counts = std::array<std::size_t, 3>{70, 10, 20};
  std::ostringstream log;
  cmd_gen(c, log);
  cmd_train(c, log);
  try {
    cmd_calibrate(c, log);
    FAIL("expected InfeasibleCalibration");
  } catch (const InfeasibleCalibration& e) {
    CHECK(std::string(e.what()).find("19") != std::string::npos);
  }
}

TEST_CASE("calibration without dropout hits the sigma floor and warns") {
  const auto root = scratch_dir("pipeline_no_dropout");
  PipelineConfig c = small_config(root);
  c.branch.dropout = 0.0;
  c.trunk.dropout = 0.0;
  std::ostringstream log;
  cmd_gen(c, log);
  cmd_train(c, log);
  const ConformalCalibration cal = cmd_calibrate(c, log);
  CHECK(cal.floor_hits == 40 * 16);
  CHECK(log.str().find("warning") != std::string::npos);
  CHECK(fs::exists(c.paths.calibration / "q.bin"));
}

TEST_CASE("a standard calibration records its provenance and q >= 0") {
  const auto root = scratch_dir("pipeline_calibrate");
  PipelineConfig c = small_config(root);
  std::ostringstream log;
  cmd_gen(c, log);
  cmd_train(c, log);
  const ConformalCalibration cal = cmd_calibrate(c, log);
  for (double q : cal.q) CHECK(q >= 0.0);
  const auto m = io::read_json(c.paths.calibration / "manifest.json");
  CHECK(m.at("alpha").get<double>() == 0.05);
  CHECK(m.at("z").get<double>() == 1.96);
  CHECK(m.at("n_c").get<std::size_t>() == 10);
  CHECK(m.at("n_cal").get<std::size_t>() == 40);
  CHECK(m.contains("format_version"));
}

TEST_CASE("evaluate refuses mismatched calibration provenance") {
  const auto root = scratch_dir("pipeline_provenance");
  PipelineConfig c = small_config(root);
  run_all(c);
  std::ostringstream log;
  SUBCASE("alpha") {
    c.uq.alpha = 0.1;
    CHECK_THROWS_AS(cmd_evaluate(c, log), ProvenanceMismatch);
  }
  SUBCASE("z") {
    c.uq.z = 1.0;
    CHECK_THROWS_AS(cmd_evaluate(c, log), ProvenanceMismatch);
  }
  SUBCASE("n_c") {
    c.uq.passes = 20;
    CHECK_THROWS_AS(cmd_evaluate(c, log), ProvenanceMismatch);
  }
  SUBCASE("retrained checkpoint") {
    c.train.epochs = 3;
    cmd_train(c, log);
    CHECK_THROWS_AS(cmd_evaluate(c, log), ProvenanceMismatch);
  }
  SUBCASE("through the command line") {
    io::write_json(root / "cfg.json", to_json(c));
    CHECK(cli({"evaluate", "--config", (root / "cfg.json").string(), "--passes", "12"}) == kExitProvenance);
    CHECK(cli({"evaluate", "--config", (root / "cfg.json").string()}) == kExitOk);
  }
}

TEST_CASE("evaluate limiting cases: huge z covers everything, z = 0 covers nothing") {
  const auto root = scratch_dir("pipeline_limits");
  PipelineConfig c = small_config(root);
  std::ostringstream log;
  cmd_gen(c, log);
  cmd_train(c, log);

  c.uq.z = 1e12;
  cmd_calibrate(c, log);
  const auto wide = cmd_evaluate(c, log);
  CHECK(wide.at("coverage").at("average_coverage_pct").get<double>() == 100.0);
  CHECK(wide.at("coverage").at("count_below_nominal").get<std::size_t>() == 0);

  // Everything in the top histogram bin.
  cmd_report(c, log);
  std::istringstream hist(read_bytes(c.paths.report / "coverage_histogram.csv"));
  std::string line;
  std::getline(hist, line);
  std::vector<std::string> rows;
  while (std::getline(hist, line)) rows.push_back(line);
  REQUIRE(rows.size() == 20);
  CHECK(rows.back().find("0.95,1,20,") == 0);
  for (std::size_t b = 0; b + 1 < rows.size(); ++b) CHECK(rows[b].find(",0,") != std::string::npos);

  c.uq.z = 0.0;
  cmd_calibrate(c, log);
  const auto narrow = cmd_evaluate(c, log);
  CHECK(narrow.at("coverage").at("average_coverage_pct").get<double>() < 1.0);
  for (const auto& r : read_report_csv(c.paths.report / "report.csv")) CHECK(r.failure_rate_pct > 99.0);
}

TEST_CASE("summary statistics recompute exactly from the per-sample CSV") {
  const auto root = scratch_dir("pipeline_summary");
  PipelineConfig c = small_config(root);
  run_all(c);
  const auto summary = io::read_json(c.paths.report / "summary.json");
  const auto rows = read_report_csv(c.paths.report / "report.csv");
  REQUIRE(rows.size() == 20);
  double sum = 0.0, lo = 100.0, hi = 0.0;
  std::size_t below = 0, outliers = 0;
  for (const auto& r : rows) {
    const double pct = 100.0 * r.coverage;
    sum += pct;
    lo = std::min(lo, pct);
    hi = std::max(hi, pct);
    below += pct < 95.0 - 1e-12 ? 1 : 0;
    outliers += (r.failure_rate_pct > 10.0 && r.mean_rel_err_pct > 20.0) ? 1 : 0;
    CHECK(r.outlier == (r.failure_rate_pct > 10.0 && r.mean_rel_err_pct > 20.0));
  }
  const auto& cs = summary.at("coverage");
  CHECK(cs.at("average_coverage_pct").get<double>() == sum / 20.0);
  CHECK(cs.at("min_coverage_pct").get<double>() == lo);
  CHECK(cs.at("max_coverage_pct").get<double>() == hi);
  CHECK(cs.at("count_below_nominal").get<std::size_t>() == below);
  CHECK(cs.at("count_at_or_above_nominal").get<std::size_t>() == 20 - below);
  CHECK(cs.at("outliers").get<std::size_t>() == outliers);
  CHECK(summary.at("format_version").get<int>() == 1);
  CHECK(fs::file_size(c.paths.report / "intervals.bin") == 20 * 3 * 16 * 4);
}

TEST_CASE("report scatter flags and best/worst selection follow the per-sample CSV") {
  const auto root = scratch_dir("pipeline_report");
  PipelineConfig c = small_config(root);
  run_all(c);
  std::ostringstream log;
  const auto rep = cmd_report(c, log);
  const auto rows = read_report_csv(c.paths.report / "report.csv");

  std::istringstream scatter(read_bytes(c.paths.report / "failure_vs_error.csv"));
  std::string line;
  std::getline(scatter, line);
  CHECK(line == "sample_id,failure_rate_pct,mean_rel_err_pct,coverage,below_nominal,outlier_flag");
  std::size_t i = 0;
  while (std::getline(scatter, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    REQUIRE(cells.size() == 6);
    CHECK(cells[4] == (std::stod(cells[3]) < 0.95 ? "1" : "0"));
    ++i;
  }
  CHECK(i == rows.size());

  // Sort oracle: coverage descending, then error ascending, then id.
  auto order = rows;
  std::stable_sort(order.begin(), order.end(), [](const SampleReport& a, const SampleReport& b) {
    if (a.coverage != b.coverage) return a.coverage > b.coverage;
    return a.mean_rel_err_pct < b.mean_rel_err_pct;
  });
  CHECK(rep.at("best_sample").get<std::size_t>() == order.front().sample_id);
  std::stable_sort(order.begin(), order.end(), [](const SampleReport& a, const SampleReport& b) {
    if (a.coverage != b.coverage) return a.coverage < b.coverage;
    return a.mean_rel_err_pct < b.mean_rel_err_pct;
  });
  CHECK(rep.at("worst_sample").get<std::size_t>() == order.front().sample_id);

  const std::string best = read_bytes(c.paths.report / "best_sample.csv");
  CHECK(best.rfind("point,x0,truth,mean,lower,upper\n", 0) == 0);
  CHECK(std::count(best.begin(), best.end(), '\n') == 17);
}

TEST_CASE("best and worst ties go to the lower error, then the earlier row") {
  const std::vector<SampleReport> rows{{0, 0.9, 5.0, 10.0, false},
                                       {1, 1.0, 3.0, 0.0, false},
                                       {2, 1.0, 2.0, 0.0, false},
                                       {3, 0.9, 4.0, 10.0, false},
                                       {4, 1.0, 2.0, 0.0, false}};
  CHECK(best_sample(rows) == 2);
  CHECK(worst_sample(rows) == 3);
  CHECK_THROWS_AS(best_sample({}), ConfigError);
}

TEST_CASE("coverage histogram bins are half-open except the closed top bin") {
  const auto h = coverage_histogram({0.0, 0.049, 0.05, 0.5, 0.95, 1.0, 1.0});
  REQUIRE(h.size() == 20);
  CHECK(h[0] == 2);
  CHECK(h[1] == 1);
  CHECK(h[10] == 1);
  CHECK(h[19] == 3);
  std::size_t total = 0;
  for (auto v : h) total += v;
  CHECK(total == 7);
}

TEST_CASE("evaluate and report are idempotent") {
  const auto root = scratch_dir("pipeline_idempotent");
  PipelineConfig c = small_config(root);
  c.dump_bounds = true;
  run_all(c);
  std::ostringstream log;
  cmd_report(c, log);
  std::vector<std::pair<fs::path, std::string>> before;
  for (const auto& e : fs::recursive_directory_iterator(c.paths.report)) {
    if (e.is_regular_file()) before.emplace_back(e.path(), read_bytes(e.path()));
  }
  CHECK(fs::exists(c.paths.report / "bounds" / "sample_00019.csv"));
  cmd_evaluate(c, log);
  cmd_report(c, log);
  for (const auto& [path, bytes] : before) CHECK(read_bytes(path) == bytes);
}

TEST_CASE("report needs evaluate outputs") {
  const auto root = scratch_dir("pipeline_report_missing");
  PipelineConfig c = small_config(root);
  std::ostringstream log;
  CHECK_THROWS_AS(cmd_report(c, log), ConfigError);
  CHECK(cli({"report", "--root", root.string()}) == kExitConfig);
}

TEST_CASE("config files, presets and flags resolve in order") {
  const auto root = scratch_dir("pipeline_config");
  CHECK_THROWS_AS(preset("navier_stokes"), ConfigError);
  for (const auto& name : preset_names()) CHECK_NOTHROW(preset(name));

  const PipelineConfig c = small_config(root, 11);
  const PipelineConfig back = pipeline_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(back.task.seed == 11);
  CHECK(back.train.seed == 11);

  io::json partial = {{"preset", "heat1d"}, {"train", {{"epochs", 7}}}};
  const PipelineConfig p = pipeline_config_from_json(partial);
  CHECK(p.task.kind == TaskKind::heat1d);
  CHECK(p.train.epochs == 7);
  CHECK(p.train.learning_rate == preset("heat1d").train.learning_rate);

  CHECK_THROWS_AS(pipeline_config_from_json({{"uq", {{"alpha", 1.5}}}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json({{"uq", {{"passes", 1}}}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json({{"trunk", {{"widths", {2, 8, 32}}}}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json(io::json::array()), ConfigError);

  CHECK(cli({"config", "--preset", "unknown"}) == kExitConfig);
  CHECK(cli({"--help"}) == kExitOk);
  CHECK(cli({"bogus"}) == kExitConfig);
  CHECK(cli({"config", "--alpha", "0"}) == kExitConfig);
}

TEST_CASE("the seed drives every stage") {
  const auto a = scratch_dir("pipeline_seed_a");
  const auto b = scratch_dir("pipeline_seed_b");
  run_all(small_config(a, 5));
  run_all(small_config(b, 6));
  CHECK(read_bytes(a / "data" / "train" / "fields.bin") != read_bytes(b / "data" / "train" / "fields.bin"));
  CHECK(read_bytes(a / "checkpoint" / "params.bin") != read_bytes(b / "checkpoint" / "params.bin"));
  CHECK(init_seed(small_config(a, 5)) != ensemble_seed(small_config(a, 5)));
}
