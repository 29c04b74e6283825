#include "cmco/uq.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cmco/error.hpp"

namespace cmco {

using io::json;
using nn::Matrix;
using nn::RngStream;

namespace {

constexpr double kRankSlack = 1e-9;
// Coverage compared against the nominal level with this slack, so that
// 19/20 counts as reaching 95% despite rounding in 1 - alpha.
constexpr double kNominalSlack = 1e-12;

void require_passes(std::size_t passes) {
  if (passes < 2) throw ConfigError("MC dropout needs n_c >= 2 passes, got " + std::to_string(passes));
}

void require_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
}

void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": length " + std::to_string(a) + " vs " + std::to_string(b));
  }
}

}  // namespace

EnsembleStats ensemble_stats(const Matrix& samples, bool keep_samples) {
  const std::size_t n_c = samples.rows(), P = samples.cols();
  require_passes(n_c);
  EnsembleStats s;
  s.passes = n_c;
  s.mean.assign(P, 0.0);
  s.std.assign(P, 0.0);
  // Mean shifted by the first pass: identical passes give sigma = 0 exactly.
  for (std::size_t k = 1; k < n_c; ++k)
    for (std::size_t j = 0; j < P; ++j) s.mean[j] += samples(k, j) - samples(0, j);
  for (std::size_t j = 0; j < P; ++j) s.mean[j] = samples(0, j) + s.mean[j] / static_cast<double>(n_c);
  for (std::size_t k = 0; k < n_c; ++k) {
    for (std::size_t j = 0; j < P; ++j) {
      const double d = s.mean[j] - samples(k, j);
      s.std[j] += d * d;
    }
  }
  for (double& v : s.std) v = std::sqrt(v / static_cast<double>(n_c));
  if (keep_samples) s.samples = samples;
  return s;
}

EnsembleStats mc_predict(const DeepONetModel& model, const Matrix& u, const Matrix& grid,
                         std::size_t passes, std::uint64_t base_seed, bool keep_samples) {
  require_passes(passes);
  Matrix samples(passes, grid.rows());
  for (std::size_t k = 0; k < passes; ++k) {
    RngStream rng(base_seed, k);
    const FieldPrediction y = forward(model, u, grid, true, rng);
    std::copy(y.begin(), y.end(), samples.row(k).begin());
  }
  return ensemble_stats(samples, keep_samples);
}

std::vector<EnsembleStats> mc_predict_dataset(const DeepONetModel& model, const Dataset& data,
                                              std::size_t passes, std::uint64_t base_seed,
                                              bool keep_samples, std::size_t batch_size) {
  require_passes(passes);
  if (data.channels != model.branch.input_channels || data.query_dim() != model.trunk.query_dim()) {
    throw DimensionError("dataset does not match the model's input channels or query dimension");
  }
  const std::size_t n = data.size(), P = data.points();
  const Matrix coords = model.norm.normalize_coords(data.grid);
  std::vector<Matrix> inputs;
  inputs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) inputs.push_back(model.norm.normalize_input(data.input(i)));

  std::vector<Matrix> samples(n, Matrix(passes, P));
  for (std::size_t k = 0; k < passes; ++k) {
    // Same split order as forward(): trunk child first, then branch child.
    RngStream rng(base_seed, k);
    RngStream trunk_stream = rng.split();
    const RngStream branch_stream = rng.split();
    const Matrix phi = trunk_forward(model, coords, &trunk_stream);
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::size_t rows = std::min(batch_size, n - start);
      RngStream shared = branch_stream;
      const Matrix psi = branch_forward(
          model, to_sequence(std::span<const Matrix>(inputs.data() + start, rows)),
          std::span<RngStream>(&shared, 1));
      const Matrix z = combine(model, psi, phi);
      for (std::size_t b = 0; b < rows; ++b) {
        for (std::size_t j = 0; j < P; ++j) {
          const double y = model.norm.denormalize_output(z(b, j));
          if (!std::isfinite(y)) {
            throw NumericError("non-finite MC prediction for sample " + std::to_string(start + b) +
                               " in pass " + std::to_string(k));
          }
          samples[start + b](k, j) = y;
        }
      }
    }
  }
  std::vector<EnsembleStats> out;
  out.reserve(n);
  for (auto& s : samples) out.push_back(ensemble_stats(s, keep_samples));
  return out;
}

Matrix nonconformity_scores(std::span<const EnsembleStats> stats, const Matrix& truths,
                            double sigma_floor, std::size_t* floor_hits) {
  require_same_size(stats.size(), truths.rows(), "nonconformity_scores samples");
  Matrix e(truths.rows(), truths.cols());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < stats.size(); ++i) {
    require_same_size(stats[i].mean.size(), truths.cols(), "nonconformity_scores locations");
    for (std::size_t j = 0; j < truths.cols(); ++j) {
      const double s = stats[i].std[j];
      if (s < sigma_floor) ++hits;
      e(i, j) = std::abs(truths(i, j) - stats[i].mean[j]) / std::max(s, sigma_floor);
    }
  }
  if (floor_hits) *floor_hits = hits;
  return e;
}

std::size_t conformal_rank(std::size_t n, double alpha) {
  require_alpha(alpha);
  const double x = (1.0 - alpha) * static_cast<double>(n + 1);
  return static_cast<std::size_t>(std::ceil(x - kRankSlack));
}

std::size_t minimum_calibration_size(double alpha) {
  require_alpha(alpha);
  std::size_t n = 1;
  while (conformal_rank(n, alpha) > n) ++n;
  return n;
}

double conformal_quantile(std::span<const double> scores, double alpha) {
  const std::size_t n = scores.size();
  const std::size_t k = conformal_rank(n, alpha);
  if (k > n || k == 0) throw InfeasibleCalibration(n, minimum_calibration_size(alpha), alpha);
  std::vector<double> v(scores.begin(), scores.end());
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k - 1), v.end());
  return v[k - 1];
}

ConformalCalibration calibrate(std::span<const EnsembleStats> stats, const Matrix& truths,
                               double alpha, double z, double sigma_floor) {
  require_alpha(alpha);
  if (!(sigma_floor > 0.0)) throw ConfigError("sigma_floor must be > 0");
  if (!(z >= 0.0) || !std::isfinite(z)) throw ConfigError("z must be finite and >= 0");
  const std::size_t n = stats.size();
  if (conformal_rank(n, alpha) > n) throw InfeasibleCalibration(n, minimum_calibration_size(alpha), alpha);
  for (const auto& s : stats) {
    if (s.passes != stats.front().passes) throw ConfigError("calibration ensembles use different n_c");
  }

  ConformalCalibration c;
  c.alpha = alpha;
  c.z = z;
  c.passes = stats.front().passes;
  c.n_cal = n;
  c.sigma_floor = sigma_floor;
  const Matrix e = nonconformity_scores(stats, truths, sigma_floor, &c.floor_hits);
  c.q.resize(truths.cols());
  std::vector<double> column(n);
  for (std::size_t j = 0; j < truths.cols(); ++j) {
    for (std::size_t i = 0; i < n; ++i) column[i] = e(i, j);
    c.q[j] = conformal_quantile(column, alpha);
  }
  return c;
}

Interval build_intervals(const EnsembleStats& stats, const ConformalCalibration& calib) {
  require_same_size(stats.mean.size(), calib.q.size(), "build_intervals locations");
  Interval iv{std::vector<double>(calib.q.size()), std::vector<double>(calib.q.size())};
  for (std::size_t j = 0; j < calib.q.size(); ++j) {
    const double half = calib.z * calib.q[j] * std::max(stats.std[j], calib.sigma_floor);
    iv.lower[j] = stats.mean[j] - half;
    iv.upper[j] = stats.mean[j] + half;
  }
  return iv;
}

Interval build_raw_intervals(const EnsembleStats& stats, double z, double sigma_floor) {
  ConformalCalibration unit;
  unit.q.assign(stats.mean.size(), 1.0);
  unit.z = z;
  unit.sigma_floor = sigma_floor;
  return build_intervals(stats, unit);
}

double empirical_coverage(std::span<const double> y, std::span<const double> lower,
                          std::span<const double> upper) {
  require_same_size(y.size(), lower.size(), "coverage lower");
  require_same_size(y.size(), upper.size(), "coverage upper");
  if (y.empty()) throw DimensionError("coverage of an empty field");
  std::size_t inside = 0;
  for (std::size_t j = 0; j < y.size(); ++j) inside += (lower[j] <= y[j] && y[j] <= upper[j]) ? 1 : 0;
  return static_cast<double>(inside) / static_cast<double>(y.size());
}

double mean_relative_error(std::span<const double> mu, std::span<const double> y, double eps) {
  require_same_size(mu.size(), y.size(), "mean_relative_error");
  if (y.empty()) throw DimensionError("relative error of an empty field");
  double s = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) s += std::abs((mu[j] - y[j]) / (y[j] + eps));
  return s / static_cast<double>(y.size()) * 100.0;
}

double failure_rate(std::span<const double> y, std::span<const double> lower,
                    std::span<const double> upper) {
  return 100.0 - 100.0 * empirical_coverage(y, lower, upper);
}

bool flag_outlier(double failure_pct, double error_pct, const OutlierThresholds& t) {
  return failure_pct > t.failure_pct && error_pct > t.error_pct;
}

SampleReport assess_sample(std::size_t id, std::span<const double> y, const std::vector<double>& mu,
                           const Interval& interval, const OutlierThresholds& t) {
  SampleReport r;
  r.sample_id = id;
  r.coverage = empirical_coverage(y, interval.lower, interval.upper);
  r.failure_rate_pct = 100.0 - 100.0 * r.coverage;
  r.mean_rel_err_pct = mean_relative_error(mu, y);
  r.outlier = flag_outlier(r.failure_rate_pct, r.mean_rel_err_pct, t);
  return r;
}

CoverageSummary summarize(std::span<const SampleReport> rows, double nominal_pct) {
  if (rows.empty()) throw ConfigError("coverage summary of an empty report");
  CoverageSummary s;
  s.nominal_pct = nominal_pct;
  s.min_pct = s.max_pct = 100.0 * rows.front().coverage;
  double total = 0.0;
  for (const auto& r : rows) {
    const double pct = 100.0 * r.coverage;
    total += pct;
    s.min_pct = std::min(s.min_pct, pct);
    s.max_pct = std::max(s.max_pct, pct);
    if (r.coverage < nominal_pct / 100.0 - kNominalSlack) {
      ++s.count_below;
    } else {
      ++s.count_at_or_above;
    }
    s.outliers += r.outlier ? 1 : 0;
  }
  s.average_pct = total / static_cast<double>(rows.size());
  return s;
}

json to_json(const CoverageSummary& s) {
  return {{"nominal_pct", s.nominal_pct},           {"average_coverage_pct", s.average_pct},
          {"min_coverage_pct", s.min_pct},          {"max_coverage_pct", s.max_pct},
          {"count_at_or_above_nominal", s.count_at_or_above},
          {"count_below_nominal", s.count_below},   {"outliers", s.outliers}};
}

void write_report_csv(const std::filesystem::path& path, std::span<const SampleReport> rows) {
  std::ostringstream out;
  out << "sample_id,coverage,mean_rel_err_pct,failure_rate_pct,outlier_flag\n";
  for (const auto& r : rows) {
    out << r.sample_id << ',' << io::format_double(r.coverage) << ','
        << io::format_double(r.mean_rel_err_pct) << ',' << io::format_double(r.failure_rate_pct)
        << ',' << (r.outlier ? 1 : 0) << '\n';
  }
  io::write_text(path, out.str());
}

std::vector<SampleReport> read_report_csv(const std::filesystem::path& path) {
  io::require_file(path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  if (line != "sample_id,coverage,mean_rel_err_pct,failure_rate_pct,outlier_flag") {
    throw ConfigError("unexpected report header in " + path.string());
  }
  std::vector<SampleReport> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 5) throw ConfigError("malformed report row '" + line + "'");
    auto number = [&](const std::string& s) {
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || ptr != s.data() + s.size()) throw ConfigError("bad number '" + s + "' in report");
      return v;
    };
    SampleReport r;
    r.sample_id = static_cast<std::size_t>(number(cells[0]));
    r.coverage = number(cells[1]);
    r.mean_rel_err_pct = number(cells[2]);
    r.failure_rate_pct = number(cells[3]);
    r.outlier = cells[4] == "1";
    rows.push_back(r);
  }
  return rows;
}

void save_calibration(const std::filesystem::path& dir, const ConformalCalibration& c) {
  io::ensure_directory(dir);
  io::write_f32(dir / "q.bin", c.q);
  const json manifest = {{"format", "cmco-calibration"},
                         {"format_version", kCalibrationFormatVersion},
                         {"alpha", c.alpha},
                         {"z", c.z},
                         {"n_c", c.passes},
                         {"n_cal", c.n_cal},
                         {"p", c.q.size()},
                         {"sigma_floor", c.sigma_floor},
                         {"floor_hits", c.floor_hits},
                         {"checkpoint_checksum", c.checkpoint_checksum},
                         {"dtype", "float32"},
                         {"endianness", "little"},
                         {"data_file", "q.bin"}};
  io::write_json(dir / "manifest.json", manifest);
}

ConformalCalibration load_calibration(const std::filesystem::path& dir) {
  const json m = io::read_json(dir / "manifest.json");
  io::check_format(m, "cmco-calibration", kCalibrationFormatVersion, dir / "manifest.json");
  ConformalCalibration c;
  std::size_t p = 0;
  try {
    c.alpha = m.at("alpha").get<double>();
    c.z = m.at("z").get<double>();
    c.passes = m.at("n_c").get<std::size_t>();
    c.n_cal = m.at("n_cal").get<std::size_t>();
    c.sigma_floor = m.at("sigma_floor").get<double>();
    c.floor_hits = m.value("floor_hits", std::size_t{0});
    c.checkpoint_checksum = m.value("checkpoint_checksum", std::string());
    p = m.at("p").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ConfigError("calibration manifest " + dir.string() + ": " + e.what());
  }
  c.q = io::read_f32(dir / "q.bin", p);
  return c;
}

}  // namespace cmco
