#include "cmco/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cmco/checkpoint.hpp"
#include "cmco/error.hpp"

namespace cmco {

namespace fs = std::filesystem;
using io::json;
using nn::Matrix;

namespace {

constexpr int kEvaluationFormatVersion = 1;
constexpr std::uint64_t kInitDomain = 0x494e4954;      // "INIT"
constexpr std::uint64_t kEnsembleDomain = 0x4d43444f;  // "MCDO"

const char* const kSplitNames[3] = {"train", "calibration", "test"};

std::string checkpoint_checksum(const fs::path& dir) {
  return io::file_checksum(dir / "manifest.json") + io::file_checksum(dir / "params.bin");
}

Matrix field_matrix(const Dataset& d) { return Matrix(d.size(), d.points(), d.fields); }

json uq_to_json(const UqSettings& u) {
  return {{"alpha", u.alpha},
          {"z", u.z},
          {"passes", u.passes},
          {"sigma_floor", u.sigma_floor},
          {"outlier_failure_pct", u.thresholds.failure_pct},
          {"outlier_error_pct", u.thresholds.error_pct}};
}

void apply_uq(UqSettings& u, const json& j) {
  u.alpha = j.value("alpha", u.alpha);
  u.z = j.value("z", u.z);
  u.passes = j.value("passes", u.passes);
  u.sigma_floor = j.value("sigma_floor", u.sigma_floor);
  u.thresholds.failure_pct = j.value("outlier_failure_pct", u.thresholds.failure_pct);
  u.thresholds.error_pct = j.value("outlier_error_pct", u.thresholds.error_pct);
}

// Sections given in a config override the base field by field.
json merged(json base, const json& patch) {
  base.merge_patch(patch);
  return base;
}

void write_field_dump(const fs::path& path, const Dataset& test, std::size_t i,
                      const std::vector<double>& stacked) {
  const std::size_t P = test.points(), d = test.query_dim();
  std::ostringstream out;
  out << "point";
  for (std::size_t k = 0; k < d; ++k) out << ",x" << k;
  out << ",truth,mean,lower,upper\n";
  const double* base = stacked.data() + i * 3 * P;
  for (std::size_t j = 0; j < P; ++j) {
    out << j;
    for (std::size_t k = 0; k < d; ++k) out << ',' << io::format_double(test.grid(j, k));
    out << ',' << io::format_double(test.field(i)[j]) << ',' << io::format_double(base[j]) << ','
        << io::format_double(base[P + j]) << ',' << io::format_double(base[2 * P + j]) << '\n';
  }
  io::write_text(path, out.str());
}

std::vector<double> read_coverage_csv(const fs::path& path) {
  io::require_file(path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  std::vector<double> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ConfigError("malformed row in " + path.string());
    out.push_back(std::stod(line.substr(comma + 1)));
  }
  return out;
}

}  // namespace

PipelinePaths PipelinePaths::under(const fs::path& root) {
  return {root / "data", root / "checkpoint", root / "calibration", root / "report"};
}

void PipelineConfig::finalize() {
  task.seed = seed;
  train.seed = seed;
  validate();
}

void PipelineConfig::validate() const {
  task.validate();
  split_sizes(task.n, split);
  branch.validate();
  trunk.validate();
  train.validate();
  if (branch.input_channels != task.channels) {
    throw ConfigError("branch input_channels = " + std::to_string(branch.input_channels) +
                      " but the task has C = " + std::to_string(task.channels));
  }
  const std::size_t d = task.kind == TaskKind::proxy_field ? 2 : 1;
  if (trunk.query_dim() != d) {
    throw ConfigError("trunk input width " + std::to_string(trunk.query_dim()) + " but the task has d = " +
                      std::to_string(d));
  }
  if (branch.hidden != trunk.embedding_size()) {
    throw ConfigError("branch hidden size must equal the trunk output width");
  }
  if (!(uq.alpha > 0.0 && uq.alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  if (!(uq.z >= 0.0) || !std::isfinite(uq.z)) throw ConfigError("z must be finite and >= 0");
  if (uq.passes < 2) throw ConfigError("passes (n_c) must be >= 2");
  if (!(uq.sigma_floor > 0.0)) throw ConfigError("sigma_floor must be > 0");
}

std::vector<std::string> preset_names() { return {"antiderivative", "heat1d", "proxy_field"}; }

PipelineConfig preset(const std::string& name) {
  PipelineConfig c;
  c.preset = name;
  c.split.fractions = {0.6, 0.2, 0.2};
  c.branch = BranchConfig{nn::CellKind::gru, 1, 32, 2, 0.1, true};
  c.trunk = TrunkConfig{{1, 64, 64, 32}, nn::Activation::tanh, 0.1};
  c.train.learning_rate = 1e-3;
  c.train.epochs = 100;
  c.train.batch_size = 32;
  if (name == "antiderivative") {
    c.task = TaskSpec::defaults(TaskKind::antiderivative);
    c.task.steps = 32;
  } else if (name == "heat1d") {
    c.task = TaskSpec::defaults(TaskKind::heat1d);
    c.task.steps = 32;
  } else if (name == "proxy_field") {
    c.task = TaskSpec::defaults(TaskKind::proxy_field);
    c.branch.input_channels = 12;
    c.trunk.widths = {2, 64, 64, 32};
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected antiderivative, heat1d or proxy_field)");
  }
  c.finalize();
  return c;
}

json to_json(const PipelineConfig& c) {
  return {{"preset", c.preset},
          {"seed", c.seed},
          {"paths",
           {{"data", c.paths.data.string()},
            {"checkpoint", c.paths.checkpoint.string()},
            {"calibration", c.paths.calibration.string()},
            {"report", c.paths.report.string()}}},
          {"task", to_json(c.task)},
          {"split", to_json(c.split)},
          {"branch", to_json(c.branch)},
          {"trunk", to_json(c.trunk)},
          {"train", to_json(c.train)},
          {"uq", uq_to_json(c.uq)}};
}

PipelineConfig pipeline_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("pipeline config must be a JSON object");
  PipelineConfig c = preset(j.value("preset", std::string("antiderivative")));
  try {
    c.seed = j.value("seed", c.seed);
    if (j.contains("paths")) {
      const json& p = j.at("paths");
      c.paths.data = p.value("data", c.paths.data.string());
      c.paths.checkpoint = p.value("checkpoint", c.paths.checkpoint.string());
      c.paths.calibration = p.value("calibration", c.paths.calibration.string());
      c.paths.report = p.value("report", c.paths.report.string());
    }
    if (j.contains("task")) c.task = task_spec_from_json(merged(to_json(c.task), j.at("task")));
    if (j.contains("split")) {
      const json& s = j.at("split");
      if (!s.contains("fractions") && !s.contains("counts")) throw ConfigError("split needs fractions or counts");
      c.split = split_spec_from_json(s);
    }
    if (j.contains("branch")) c.branch = branch_config_from_json(merged(to_json(c.branch), j.at("branch")));
    if (j.contains("trunk")) c.trunk = trunk_config_from_json(merged(to_json(c.trunk), j.at("trunk")));
    if (j.contains("train")) c.train = train_config_from_json(merged(to_json(c.train), j.at("train")));
    if (j.contains("uq")) apply_uq(c.uq, j.at("uq"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("pipeline config: ") + e.what());
  }
  c.finalize();
  return c;
}

std::uint64_t init_seed(const PipelineConfig& cfg) {
  return nn::RngStream::compose({cfg.seed, kInitDomain});
}

std::uint64_t ensemble_seed(const PipelineConfig& cfg) {
  return nn::RngStream::compose({cfg.seed, kEnsembleDomain});
}

void cmd_gen(const PipelineConfig& cfg, std::ostream& log) {
  cfg.validate();
  const Dataset all = generate(cfg.task);
  const Splits s = split_dataset(all, cfg.split, cfg.seed);
  const Dataset* parts[3] = {&s.train, &s.calibration, &s.test};
  for (std::size_t k = 0; k < 3; ++k) save_dataset(cfg.paths.data / kSplitNames[k], *parts[k]);
  log << "gen: " << to_string(cfg.task.kind) << " N=" << all.size() << " split " << s.train.size() << '/'
      << s.calibration.size() << '/' << s.test.size() << " -> " << cfg.paths.data.string() << '\n';
}

TrainOutcome cmd_train(const PipelineConfig& cfg, std::ostream& log) {
  cfg.validate();
  const Dataset train = load_dataset(cfg.paths.data / "train");
  require_role(train, Role::train, "train");

  nn::RngStream init(init_seed(cfg), 0);
  DeepONetModel model = build_model(cfg.branch, cfg.trunk, init);
  std::vector<std::string> warnings;
  model.norm = compute_norm_stats(train, &warnings);
  for (const auto& w : warnings) log << "warning: " << w << '\n';

  TrainConfig tc = cfg.train;
  if (tc.threads > 1) log << "train: " << tc.threads << " threads (reproducible to 1e-10, not bitwise)\n";
  TrainOutcome out;
  out.history = fit(model, train, tc);
  out.train_relative_l2 = relative_l2(predict_deterministic(model, train), train);

  save_checkpoint(cfg.paths.checkpoint, model);
  write_loss_csv(cfg.paths.checkpoint / "loss_history.csv", out.history);
  io::write_json(cfg.paths.checkpoint / "train_summary.json",
                 {{"format", "cmco-train-summary"},
                  {"format_version", 1},
                  {"epochs", out.history.size()},
                  {"final_train_loss", out.history.empty() ? 0.0 : out.history.back().train_loss},
                  {"train_relative_l2", out.train_relative_l2},
                  {"parameter_count", parameter_count(model)},
                  {"train_config", to_json(cfg.train)}});
  log << "train: " << parameter_count(model) << " parameters, " << out.history.size() << " epochs";
  if (!out.history.empty()) log << ", final loss " << out.history.back().train_loss;
  log << ", train relative L2 " << out.train_relative_l2 << " -> " << cfg.paths.checkpoint.string() << '\n';
  return out;
}

ConformalCalibration cmd_calibrate(const PipelineConfig& cfg, std::ostream& log) {
  cfg.validate();
  const DeepONetModel model = load_checkpoint(cfg.paths.checkpoint);
  const Dataset cal = load_dataset(cfg.paths.data / "calibration");
  require_role(cal, Role::calibration, "calibrate");
  const std::size_t k = conformal_rank(cal.size(), cfg.uq.alpha);
  if (k > cal.size()) throw InfeasibleCalibration(cal.size(), minimum_calibration_size(cfg.uq.alpha), cfg.uq.alpha);

  const auto stats = mc_predict_dataset(model, cal, cfg.uq.passes, ensemble_seed(cfg));
  ConformalCalibration c = calibrate(stats, field_matrix(cal), cfg.uq.alpha, cfg.uq.z, cfg.uq.sigma_floor);
  c.checkpoint_checksum = checkpoint_checksum(cfg.paths.checkpoint);
  save_calibration(cfg.paths.calibration, c);
  if (c.floor_hits > 0) {
    log << "warning: " << c.floor_hits << " of " << cal.size() * cal.points()
        << " calibration scores used the sigma floor " << cfg.uq.sigma_floor << '\n';
  }
  const auto [qmin, qmax] = std::minmax_element(c.q.begin(), c.q.end());
  log << "calibrate: n_cal=" << c.n_cal << " n_c=" << c.passes << " alpha=" << c.alpha << " z=" << c.z
      << " q in [" << *qmin << ", " << *qmax << "] -> " << cfg.paths.calibration.string() << '\n';
  return c;
}

json cmd_evaluate(const PipelineConfig& cfg, std::ostream& log) {
  cfg.validate();
  const DeepONetModel model = load_checkpoint(cfg.paths.checkpoint);
  const ConformalCalibration calib = load_calibration(cfg.paths.calibration);
  auto mismatch = [](const std::string& what, const std::string& stored, const std::string& requested) {
    throw ProvenanceMismatch("calibration artifact was built with " + what + " = " + stored +
                             " but evaluation requests " + requested);
  };
  if (calib.alpha != cfg.uq.alpha) mismatch("alpha", io::format_double(calib.alpha), io::format_double(cfg.uq.alpha));
  if (calib.z != cfg.uq.z) mismatch("z", io::format_double(calib.z), io::format_double(cfg.uq.z));
  if (calib.passes != cfg.uq.passes) mismatch("n_c", std::to_string(calib.passes), std::to_string(cfg.uq.passes));
  if (calib.sigma_floor != cfg.uq.sigma_floor) {
    mismatch("sigma_floor", io::format_double(calib.sigma_floor), io::format_double(cfg.uq.sigma_floor));
  }
  const std::string checksum = checkpoint_checksum(cfg.paths.checkpoint);
  if (calib.checkpoint_checksum != checksum) mismatch("checkpoint", calib.checkpoint_checksum, checksum);

  const Dataset test = load_dataset(cfg.paths.data / "test");
  require_role(test, Role::test, "evaluate");
  if (test.points() != calib.q.size()) {
    throw ConfigError("calibration has " + std::to_string(calib.q.size()) + " locations, test split has " +
                      std::to_string(test.points()));
  }
  const std::size_t n = test.size(), P = test.points();
  const auto stats = mc_predict_dataset(model, test, cfg.uq.passes, ensemble_seed(cfg));

  std::vector<SampleReport> rows;
  std::vector<double> raw_coverage(n), stacked;
  stacked.reserve(n * 3 * P);
  double abs_sum = 0.0, sq_sum = 0.0, mc_rel = 0.0;
  double y_min = test.fields.front(), y_max = y_min;
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = test.field(i);
    const Interval iv = build_intervals(stats[i], calib);
    rows.push_back(assess_sample(i, y, stats[i].mean, iv, cfg.uq.thresholds));
    const Interval raw = build_raw_intervals(stats[i], cfg.uq.z, cfg.uq.sigma_floor);
    raw_coverage[i] = empirical_coverage(y, raw.lower, raw.upper);
    stacked.insert(stacked.end(), stats[i].mean.begin(), stats[i].mean.end());
    stacked.insert(stacked.end(), iv.lower.begin(), iv.lower.end());
    stacked.insert(stacked.end(), iv.upper.begin(), iv.upper.end());
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < P; ++j) {
      const double r = stats[i].mean[j] - y[j];
      num += r * r;
      den += y[j] * y[j];
      y_min = std::min(y_min, y[j]);
      y_max = std::max(y_max, y[j]);
    }
    mc_rel += std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
  }

  const Matrix pred = predict_deterministic(model, test);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < P; ++j) {
      const double r = pred(i, j) - test.field(i)[j];
      abs_sum += std::abs(r);
      sq_sum += r * r;
    }
  }
  const double count = static_cast<double>(n * P);
  const double mse = sq_sum / count;
  const double range = y_max - y_min;

  const fs::path& out = cfg.paths.report;
  io::ensure_directory(out);
  write_report_csv(out / "report.csv", rows);
  {
    std::ostringstream raw;
    raw << "sample_id,coverage\n";
    for (std::size_t i = 0; i < n; ++i) raw << i << ',' << io::format_double(raw_coverage[i]) << '\n';
    io::write_text(out / "raw_coverage.csv", raw.str());
  }
  io::write_f32(out / "intervals.bin", stacked);

  const double nominal = 100.0 - 100.0 * cfg.uq.alpha;
  const CoverageSummary cs = summarize(rows, nominal);
  double raw_avg = 0.0;
  for (double c : raw_coverage) raw_avg += 100.0 * c;
  raw_avg /= static_cast<double>(n);
  double mre = 0.0;
  for (const auto& r : rows) mre += r.mean_rel_err_pct;
  mre /= static_cast<double>(n);

  json summary = {{"format", "cmco-evaluation"},
                  {"format_version", kEvaluationFormatVersion},
                  {"task", to_string(cfg.task.kind)},
                  {"n_test", n},
                  {"p", P},
                  {"alpha", cfg.uq.alpha},
                  {"z", cfg.uq.z},
                  {"n_c", cfg.uq.passes},
                  {"coverage", to_json(cs)},
                  {"raw_mc_average_coverage_pct", raw_avg},
                  {"mean_rel_err_pct", mre},
                  {"relative_l2", relative_l2(pred, test)},
                  {"mc_mean_relative_l2", mc_rel / static_cast<double>(n)},
                  {"mae", abs_sum / count},
                  {"rmse", std::sqrt(mse)},
                  {"psnr_db", mse > 0.0 && range > 0.0 ? 10.0 * std::log10(range * range / mse) : 0.0},
                  {"intervals",
                   {{"file", "intervals.bin"},
                    {"dtype", "float32"},
                    {"endianness", "little"},
                    {"layout", "[n_test][mean, lower, upper][p]"}}}};
  io::write_json(out / "summary.json", summary);

  if (cfg.dump_bounds) {
    io::ensure_directory(out / "bounds");
    const Dataset& t = test;
    for (std::size_t i = 0; i < n; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "sample_%05zu.csv", i);
      write_field_dump(out / "bounds" / name, t, i, stacked);
    }
  }
  log << "evaluate: n_test=" << n << " average coverage " << cs.average_pct << "% (min " << cs.min_pct
      << ", max " << cs.max_pct << "), " << cs.count_below << " below nominal, relative L2 "
      << summary["relative_l2"].get<double>() << " -> " << out.string() << '\n';
  return summary;
}

std::size_t best_sample(const std::vector<SampleReport>& rows) {
  if (rows.empty()) throw ConfigError("best_sample of an empty report");
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& a = rows[i];
    const auto& b = rows[best];
    if (a.coverage > b.coverage || (a.coverage == b.coverage && a.mean_rel_err_pct < b.mean_rel_err_pct)) best = i;
  }
  return best;
}

std::size_t worst_sample(const std::vector<SampleReport>& rows) {
  if (rows.empty()) throw ConfigError("worst_sample of an empty report");
  std::size_t worst = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& a = rows[i];
    const auto& b = rows[worst];
    if (a.coverage < b.coverage || (a.coverage == b.coverage && a.mean_rel_err_pct < b.mean_rel_err_pct)) worst = i;
  }
  return worst;
}

std::vector<std::size_t> coverage_histogram(const std::vector<double>& coverage, std::size_t bins) {
  std::vector<std::size_t> counts(bins, 0);
  for (double c : coverage) {
    auto b = static_cast<std::size_t>(std::floor(c * static_cast<double>(bins)));
    counts[std::min(b, bins - 1)] += 1;
  }
  return counts;
}

json cmd_report(const PipelineConfig& cfg, std::ostream& log) {
  const fs::path& dir = cfg.paths.report;
  const std::vector<SampleReport> rows = read_report_csv(dir / "report.csv");
  const std::vector<double> raw = read_coverage_csv(dir / "raw_coverage.csv");
  const Dataset test = load_dataset(cfg.paths.data / "test");
  if (rows.size() != test.size() || raw.size() != test.size()) {
    throw ConfigError("evaluate outputs in " + dir.string() + " do not match the test split");
  }
  const std::vector<double> stacked = io::read_f32(dir / "intervals.bin", test.size() * 3 * test.points());

  constexpr std::size_t kBins = 20;
  std::vector<double> calibrated;
  for (const auto& r : rows) calibrated.push_back(r.coverage);
  const auto cal_counts = coverage_histogram(calibrated, kBins);
  const auto raw_counts = coverage_histogram(raw, kBins);
  std::ostringstream hist;
  hist << "bin_lower,bin_upper,calibrated_count,raw_mc_count\n";
  for (std::size_t b = 0; b < kBins; ++b) {
    hist << io::format_double(static_cast<double>(b) / kBins) << ','
         << io::format_double(static_cast<double>(b + 1) / kBins) << ',' << cal_counts[b] << ',' << raw_counts[b]
         << '\n';
  }
  io::write_text(dir / "coverage_histogram.csv", hist.str());

  const double nominal = 1.0 - cfg.uq.alpha;
  std::ostringstream scatter;
  scatter << "sample_id,failure_rate_pct,mean_rel_err_pct,coverage,below_nominal,outlier_flag\n";
  for (const auto& r : rows) {
    scatter << r.sample_id << ',' << io::format_double(r.failure_rate_pct) << ','
            << io::format_double(r.mean_rel_err_pct) << ',' << io::format_double(r.coverage) << ','
            << (r.coverage < nominal - 1e-12 ? 1 : 0) << ',' << (r.outlier ? 1 : 0) << '\n';
  }
  io::write_text(dir / "failure_vs_error.csv", scatter.str());

  const std::size_t best = best_sample(rows), worst = worst_sample(rows);
  write_field_dump(dir / "best_sample.csv", test, rows[best].sample_id, stacked);
  write_field_dump(dir / "worst_sample.csv", test, rows[worst].sample_id, stacked);

  const json summary = {{"format", "cmco-report"},
                        {"format_version", 1},
                        {"best_sample", rows[best].sample_id},
                        {"best_coverage", rows[best].coverage},
                        {"worst_sample", rows[worst].sample_id},
                        {"worst_coverage", rows[worst].coverage},
                        {"histogram_bins", kBins},
                        {"files",
                         {"coverage_histogram.csv", "failure_vs_error.csv", "best_sample.csv",
                          "worst_sample.csv"}}};
  io::write_json(dir / "report.json", summary);
  log << "report: best sample " << rows[best].sample_id << " (coverage " << rows[best].coverage
      << "), worst sample " << rows[worst].sample_id << " (coverage " << rows[worst].coverage << ") -> "
      << dir.string() << '\n';
  return summary;
}

}  // namespace cmco
