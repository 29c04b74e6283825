#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cmco/dataset.hpp"
#include "cmco/deeponet.hpp"

namespace cmco {

inline constexpr double kDefaultAlpha = 0.05;
inline constexpr double kDefaultZ = 1.96;
inline constexpr double kDefaultSigmaFloor = 1e-8;
inline constexpr double kRelativeErrorEps = 1e-8;
inline constexpr int kCalibrationFormatVersion = 1;

// Ensemble of n_c stochastic predictions at P locations. sigma uses the
// population divisor 1/n_c.
struct EnsembleStats {
  nn::Matrix samples;  // [n_c x P], empty unless retained
  std::vector<double> mean;
  std::vector<double> std;
  std::size_t passes = 0;
};

EnsembleStats ensemble_stats(const nn::Matrix& samples, bool keep_samples = true);

// n_c dropout-active passes for one input; pass k draws its masks from
// RngStream(base_seed, k). Throws ConfigError if n_c < 2.
EnsembleStats mc_predict(const DeepONetModel& model, const nn::Matrix& u, const nn::Matrix& grid,
                         std::size_t passes, std::uint64_t base_seed, bool keep_samples = true);

// mc_predict for every sample of `data`, batched. Pass k applies the same
// dropout realization to every sample, so results equal per-sample
// mc_predict calls with the same base seed.
std::vector<EnsembleStats> mc_predict_dataset(const DeepONetModel& model, const Dataset& data,
                                              std::size_t passes, std::uint64_t base_seed,
                                              bool keep_samples = false, std::size_t batch_size = 128);

// e_ij = |y_ij - mu_j(u_i)| / max(sigma_j(u_i), sigma_floor), [n x P].
// `floor_hits` counts entries where sigma fell below the floor.
nn::Matrix nonconformity_scores(std::span<const EnsembleStats> stats, const nn::Matrix& truths,
                                double sigma_floor, std::size_t* floor_hits = nullptr);

// k = ceil((1 - alpha)(n + 1)).
std::size_t conformal_rank(std::size_t n, double alpha);
// Smallest n with conformal_rank(n, alpha) <= n.
std::size_t minimum_calibration_size(double alpha);

// k-th smallest score. Throws InfeasibleCalibration if k > n.
double conformal_quantile(std::span<const double> scores, double alpha);

struct ConformalCalibration {
  std::vector<double> q;  // per location
  double alpha = kDefaultAlpha;
  double z = kDefaultZ;
  std::size_t passes = 0;
  std::size_t n_cal = 0;
  double sigma_floor = kDefaultSigmaFloor;
  std::size_t floor_hits = 0;
  std::string checkpoint_checksum;
};

ConformalCalibration calibrate(std::span<const EnsembleStats> stats, const nn::Matrix& truths,
                               double alpha, double z, double sigma_floor);

struct Interval {
  std::vector<double> lower;
  std::vector<double> upper;
};

// mu -+ z q max(sigma, floor) elementwise.
Interval build_intervals(const EnsembleStats& stats, const ConformalCalibration& calib);
// Raw MC-dropout baseline: q = 1 everywhere.
Interval build_raw_intervals(const EnsembleStats& stats, double z, double sigma_floor);

// Fraction of locations with lower <= y <= upper.
double empirical_coverage(std::span<const double> y, std::span<const double> lower,
                          std::span<const double> upper);
// (1/P) sum |(mu - y) / (y + eps)| * 100
double mean_relative_error(std::span<const double> mu, std::span<const double> y,
                           double eps = kRelativeErrorEps);
// 100 - 100 C, so F + 100 C = 100 holds exactly.
double failure_rate(std::span<const double> y, std::span<const double> lower,
                    std::span<const double> upper);

struct OutlierThresholds {
  double failure_pct = 10.0;
  double error_pct = 20.0;
};

bool flag_outlier(double failure_pct, double error_pct, const OutlierThresholds& t = {});

struct SampleReport {
  std::size_t sample_id = 0;
  double coverage = 0.0;
  double mean_rel_err_pct = 0.0;
  double failure_rate_pct = 0.0;
  bool outlier = false;
};

SampleReport assess_sample(std::size_t id, std::span<const double> y, const std::vector<double>& mu,
                           const Interval& interval, const OutlierThresholds& t = {});

// Aggregate over test samples of the per-sample coverage in percent.
struct CoverageSummary {
  double nominal_pct = 95.0;
  double average_pct = 0.0;
  double min_pct = 0.0;
  double max_pct = 0.0;
  std::size_t count_at_or_above = 0;
  std::size_t count_below = 0;
  std::size_t outliers = 0;
};

CoverageSummary summarize(std::span<const SampleReport> rows, double nominal_pct);
io::json to_json(const CoverageSummary& s);

// Columns: sample_id, coverage, mean_rel_err_pct, failure_rate_pct, outlier_flag.
void write_report_csv(const std::filesystem::path& path, std::span<const SampleReport> rows);
std::vector<SampleReport> read_report_csv(const std::filesystem::path& path);

// manifest.json plus float32 q.bin.
void save_calibration(const std::filesystem::path& dir, const ConformalCalibration& calib);
ConformalCalibration load_calibration(const std::filesystem::path& dir);

}  // namespace cmco
