#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cmco/error.hpp"
#include "cmco/uq.hpp"
#include "test_util.hpp"

using namespace cmco;
using nn::Matrix;
using nn::RngStream;

namespace {

DeepONetModel toy_model(double dropout, std::uint64_t seed) {
  BranchConfig b{nn::CellKind::lstm, 2, 6, 2, dropout, true};
  TrunkConfig t{{2, 10, 6}, nn::Activation::relu, dropout};
  RngStream rng(seed, 0);
  DeepONetModel m = build_model(b, t, rng);
  m.norm = NormStats::identity(2, 2);
  return m;
}

Dataset toy_data(std::size_t n, std::uint64_t seed) {
  RngStream rng(seed, 1);
  Dataset d;
  d.steps = 5;
  d.channels = 2;
  d.grid = cmco::testing::random_matrix(9, 2, rng);
  for (std::size_t i = 0; i < n * 5 * 2; ++i) d.branch_inputs.push_back(rng.uniform(-1, 1));
  d.fields.assign(n * 9, 0.0);
  d.role = Role::test;
  return d;
}

EnsembleStats make_stats(std::vector<double> mean, std::vector<double> sd) {
  EnsembleStats s;
  s.mean = std::move(mean);
  s.std = std::move(sd);
  s.passes = 10;
  return s;
}

// Exact rank for alpha = a / 100: k = ceil((100 - a)(n + 1) / 100).
std::size_t exact_rank(std::size_t n, std::size_t a_percent) {
  const std::size_t num = (100 - a_percent) * (n + 1);
  return (num + 99) / 100;
}

}  // namespace

TEST_CASE("ensemble statistics use the population divisor") {
  const EnsembleStats s = ensemble_stats(Matrix(2, 1, {1.0, 3.0}));
  CHECK(s.mean[0] == 2.0);
  CHECK(s.std[0] == 1.0);
  CHECK(s.passes == 2);
  CHECK_THROWS_AS(ensemble_stats(Matrix(1, 3)), ConfigError);
}

TEST_CASE("mc_predict without dropout has zero spread") {
  const DeepONetModel m = toy_model(0.0, 1);
  const Dataset d = toy_data(1, 2);
  const EnsembleStats s = mc_predict(m, d.input(0), d.grid, 5, 99);
  for (std::size_t k = 1; k < 5; ++k) {
    for (std::size_t j = 0; j < 9; ++j) CHECK(s.samples(k, j) == s.samples(0, j));
  }
  for (double v : s.std) CHECK(v == 0.0);
  CHECK_THROWS_AS(mc_predict(m, d.input(0), d.grid, 1, 99), ConfigError);
}

TEST_CASE("mc_predict statistics match recomputation from retained samples") {
  const DeepONetModel m = toy_model(0.3, 3);
  const Dataset d = toy_data(1, 4);
  const EnsembleStats s = mc_predict(m, d.input(0), d.grid, 10, 7);
  REQUIRE(s.samples.rows() == 10);
  bool spread = false;
  for (std::size_t j = 0; j < 9; ++j) {
    std::vector<double> col(10);
    for (std::size_t k = 0; k < 10; ++k) col[k] = s.samples(k, j);
    const double mu = std::accumulate(col.begin(), col.end(), 0.0) / 10.0;
    double ss = 0.0;
    for (double v : col) ss += (v - mu) * (v - mu);
    CHECK(std::abs(s.mean[j] - mu) <= 1e-12);
    CHECK(std::abs(s.std[j] - std::sqrt(ss / 10.0)) <= 1e-12);
    spread = spread || s.std[j] > 0.0;
  }
  CHECK(spread);

  const EnsembleStats again = mc_predict(m, d.input(0), d.grid, 10, 7);
  CHECK(again.mean == s.mean);
  const EnsembleStats other = mc_predict(m, d.input(0), d.grid, 10, 8);
  CHECK(other.mean != s.mean);
}

TEST_CASE("batched MC prediction equals per-sample mc_predict") {
  const DeepONetModel m = toy_model(0.25, 5);
  const Dataset d = toy_data(7, 6);
  const auto batched = mc_predict_dataset(m, d, 4, 21, true, 3);
  REQUIRE(batched.size() == 7);
  for (std::size_t i = 0; i < 7; ++i) {
    const EnsembleStats single = mc_predict(m, d.input(i), d.grid, 4, 21);
    for (std::size_t j = 0; j < 9; ++j) {
      CHECK(std::abs(batched[i].mean[j] - single.mean[j]) <= 1e-12);
      CHECK(std::abs(batched[i].std[j] - single.std[j]) <= 1e-12);
    }
  }
  CHECK(batched[0].samples.rows() == 4);
  CHECK(mc_predict_dataset(m, d, 4, 21).front().samples.size() == 0);
}

TEST_CASE("nonconformity scores") {
  const std::vector<EnsembleStats> stats{make_stats({1.0, 2.0, 5.0}, {0.3, 0.5, 0.0})};
  std::size_t hits = 0;
  const Matrix e = nonconformity_scores(stats, Matrix(1, 3, {1.0, 4.0, 6.0}), 1e-8, &hits);
  CHECK(e(0, 0) == 0.0);
  CHECK(e(0, 1) == 4.0);
  CHECK(e(0, 2) == doctest::Approx(1e8).epsilon(1e-12));
  CHECK(std::isfinite(e(0, 2)));
  CHECK(hits == 1);
}

TEST_CASE("conformal quantile: rank rule and feasibility") {
  CHECK(conformal_rank(19, 0.05) == 19);
  CHECK(conformal_rank(99, 0.05) == 95);
  CHECK(minimum_calibration_size(0.05) == 19);
  CHECK(minimum_calibration_size(0.1) == 9);
  CHECK(minimum_calibration_size(0.01) == 99);

  std::vector<double> nineteen(19);
  RngStream rng(4, 4);
  for (double& v : nineteen) v = rng.uniform();
  CHECK(conformal_quantile(nineteen, 0.05) == *std::max_element(nineteen.begin(), nineteen.end()));

  std::vector<double> scores(99);
  std::iota(scores.begin(), scores.end(), 1.0);
  std::reverse(scores.begin(), scores.end());
  CHECK(conformal_quantile(scores, 0.05) == 95.0);

  try {
    conformal_quantile(std::vector<double>(10, 1.0), 0.05);
    FAIL("expected InfeasibleCalibration");
  } catch (const InfeasibleCalibration& e) {
    CHECK(e.n() == 10);
    CHECK(e.minimum_n() == 19);
    CHECK(std::string(e.what()).find("19") != std::string::npos);
  }
}

TEST_CASE("conformal quantile agrees with a full-sort oracle") {
  RngStream rng(77, 0);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t a = std::array<std::size_t, 3>{1, 5, 10}[rng.uniform_index(3)];
    const std::size_t n = 99 + rng.uniform_index(300);
    std::vector<double> s(n);
    for (double& v : s) v = std::floor(rng.uniform() * 50.0);  // ties included
    std::vector<double> sorted = s;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t k = exact_rank(n, a);
    REQUIRE(k <= n);
    CHECK(conformal_rank(n, static_cast<double>(a) / 100.0) == k);
    CHECK(conformal_quantile(s, static_cast<double>(a) / 100.0) == sorted[k - 1]);
  }
}

TEST_CASE("interval construction") {
  ConformalCalibration c;
  c.q = {2.0, 3.0};
  c.z = 1.96;
  const EnsembleStats s = make_stats({1.0, 4.0}, {0.5, 0.0});
  const Interval iv = build_intervals(s, c);
  CHECK(iv.lower[0] == doctest::Approx(-0.96).epsilon(1e-15));
  CHECK(iv.upper[0] == doctest::Approx(2.96).epsilon(1e-15));
  // sigma = 0 collapses to mu up to the floor.
  CHECK(std::abs(iv.lower[1] - 4.0) <= 1.96 * 3.0 * kDefaultSigmaFloor + 1e-15);
  c.sigma_floor = 0.0;
  const Interval exact = build_intervals(s, c);
  CHECK(exact.lower[1] == 4.0);
  CHECK(exact.upper[1] == 4.0);

  ConformalCalibration unit = c;
  unit.z = 1.0;
  const Interval narrow = build_intervals(s, unit);
  const Interval wide = build_intervals(s, c);
  CHECK((wide.upper[0] - 1.0) == doctest::Approx(1.96 * (narrow.upper[0] - 1.0)).epsilon(1e-15));
  CHECK(wide.lower[0] <= narrow.lower[0]);
  CHECK(wide.upper[0] >= narrow.upper[0]);

  const Interval raw = build_raw_intervals(s, 1.0, kDefaultSigmaFloor);
  CHECK(raw.lower[0] == 0.5);
  CHECK(raw.upper[0] == 1.5);
}

TEST_CASE("coverage, relative error and failure rate") {
  const std::vector<double> lo{0, 0, 0, 0}, hi{1, 1, 1, 1};
  CHECK(empirical_coverage(std::vector<double>{0.5, 0.1, 0.9, 0.2}, lo, hi) == 1.0);
  CHECK(empirical_coverage(std::vector<double>{2, -1, 3, 5}, lo, hi) == 0.0);
  const std::vector<double> three{0.0, 1.0, 0.5, 1.5};  // boundaries count as covered
  CHECK(empirical_coverage(three, lo, hi) == 0.75);
  CHECK(failure_rate(three, lo, hi) == 25.0);
  CHECK(failure_rate(std::vector<double>{0.5, 0.1, 0.9, 0.2}, lo, hi) == 0.0);
  CHECK(failure_rate(std::vector<double>{2, -1, 3, 5}, lo, hi) == 100.0);

  const std::vector<double> y{1.0, 2.0, 4.0};
  CHECK(mean_relative_error(y, y) == 0.0);
  CHECK(mean_relative_error(std::vector<double>{1.1, 2.2, 4.4}, y, 0.0) == doctest::Approx(10.0).epsilon(1e-12));
  const double hand = (std::abs(0.5 / 1e-8) + std::abs(-0.5 / (2.0 + 1e-8))) / 2.0 * 100.0;
  CHECK(mean_relative_error(std::vector<double>{0.5, 1.5}, std::vector<double>{0.0, 2.0}) ==
        doctest::Approx(hand).epsilon(1e-14));
}

TEST_CASE("F + 100 C = 100 exactly on random rows") {
  RngStream rng(5, 5);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t p = 1 + rng.uniform_index(500);
    std::vector<double> y(p), lo(p), hi(p);
    for (std::size_t j = 0; j < p; ++j) {
      y[j] = rng.normal();
      lo[j] = rng.normal() - 0.5;
      hi[j] = lo[j] + rng.uniform(0.0, 2.0);
    }
    const double c = empirical_coverage(y, lo, hi);
    const double f = failure_rate(y, lo, hi);
    CHECK(f + 100.0 * c == 100.0);
  }
}

TEST_CASE("outlier flag is a conjunction of configurable thresholds") {
  CHECK(flag_outlier(12.0, 25.0));
  CHECK_FALSE(flag_outlier(12.0, 5.0));
  CHECK_FALSE(flag_outlier(0.0, 1e6));
  CHECK_FALSE(flag_outlier(10.0, 25.0));
  CHECK(flag_outlier(6.0, 8.0, OutlierThresholds{5.0, 7.5}));
}

TEST_CASE("calibration properties on synthetic ensembles") {
  RngStream rng(31, 0);
  const std::size_t n = 200, P = 40;
  auto draw = [&](std::size_t count, std::vector<EnsembleStats>& stats, Matrix& truth) {
    truth = Matrix(count, P);
    for (std::size_t i = 0; i < count; ++i) {
      std::vector<double> mu(P), sd(P);
      for (std::size_t j = 0; j < P; ++j) {
        mu[j] = rng.normal();
        sd[j] = rng.uniform(0.1, 2.0);
        // Heavier tails than the ensemble spread suggests.
        truth(i, j) = mu[j] + sd[j] * 1.7 * rng.normal();
      }
      stats.push_back(make_stats(mu, sd));
    }
  };
  std::vector<EnsembleStats> cal, test;
  Matrix y_cal, y_test;
  draw(n, cal, y_cal);
  draw(n, test, y_test);

  const ConformalCalibration c1 = calibrate(cal, y_cal, 0.05, 1.0, 1e-12);
  CHECK(c1.n_cal == n);
  CHECK(c1.passes == 10);

  SUBCASE("calibration self-coverage holds at the order statistic") {
    const std::size_t k = conformal_rank(n, 0.05);
    for (std::size_t j = 0; j < P; ++j) {
      std::size_t covered = 0;
      for (std::size_t i = 0; i < n; ++i) {
        covered += std::abs(y_cal(i, j) - cal[i].mean[j]) / cal[i].std[j] <= c1.q[j] ? 1 : 0;
      }
      CHECK(covered >= k);
    }
  }
  SUBCASE("smaller alpha never lowers q") {
    const ConformalCalibration c2 = calibrate(cal, y_cal, 0.01, 1.0, 1e-12);
    const ConformalCalibration c3 = calibrate(cal, y_cal, 0.2, 1.0, 1e-12);
    for (std::size_t j = 0; j < P; ++j) {
      CHECK(c2.q[j] >= c1.q[j]);
      CHECK(c1.q[j] >= c3.q[j]);
    }
  }
  SUBCASE("marginal test coverage with z = 1") {
    double total = 0.0;
    for (std::size_t j = 0; j < P; ++j) {
      std::size_t covered = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const Interval iv = build_intervals(test[i], c1);
        covered += (iv.lower[j] <= y_test(i, j) && y_test(i, j) <= iv.upper[j]) ? 1 : 0;
      }
      total += static_cast<double>(covered) / static_cast<double>(n);
    }
    const double mean_cov = total / static_cast<double>(P);
    CHECK(mean_cov >= 0.95 - 2.0 * std::sqrt(0.05 * 0.95 / static_cast<double>(n)));
  }
  SUBCASE("infeasible and mismatched inputs") {
    std::vector<EnsembleStats> few(cal.begin(), cal.begin() + 10);
    Matrix y_few(10, P);
    CHECK_THROWS_AS(calibrate(few, y_few, 0.05, 1.96, 1e-8), InfeasibleCalibration);
    CHECK_THROWS_AS(calibrate(cal, y_cal, 1.5, 1.96, 1e-8), ConfigError);
    std::vector<EnsembleStats> mixed = cal;
    mixed[3].passes = 20;
    CHECK_THROWS_AS(calibrate(mixed, y_cal, 0.05, 1.96, 1e-8), ConfigError);
  }
}

TEST_CASE("zero-spread calibration set hits the floor everywhere") {
  std::vector<EnsembleStats> cal;
  Matrix y(25, 3);
  for (std::size_t i = 0; i < 25; ++i) {
    cal.push_back(make_stats({0.0, 0.0, 0.0}, {0.0, 0.0, 0.0}));
    for (std::size_t j = 0; j < 3; ++j) y(i, j) = 0.01 * static_cast<double>(i + j);
  }
  const ConformalCalibration c = calibrate(cal, y, 0.05, 1.96, 1e-8);
  CHECK(c.floor_hits == 75);
  for (double q : c.q) {
    CHECK(q >= 0.0);
    CHECK(std::isfinite(q));
  }
}

TEST_CASE("report rows, summary and CSV round trip") {
  const std::vector<double> y{1.0, 2.0, 3.0, 4.0};
  const std::vector<double> mu{1.0, 2.5, 3.0, 8.0};
  const Interval iv{{0.5, 1.0, 2.0, 7.0}, {1.5, 1.9, 4.0, 9.0}};
  const SampleReport r = assess_sample(3, y, mu, iv);
  CHECK(r.coverage == 0.5);
  CHECK(r.failure_rate_pct == 50.0);
  CHECK(r.mean_rel_err_pct == doctest::Approx((0.25 + 1.0) / 4.0 * 100.0).epsilon(1e-7));
  CHECK(r.outlier);

  const std::vector<SampleReport> rows{{0, 1.0, 2.0, 0.0, false}, {1, 0.95, 3.0, 5.0, false},
                                       {2, 0.9, 30.0, 10.0, false}, r};
  const CoverageSummary s = summarize(rows, 95.0);
  CHECK(s.average_pct == doctest::Approx((100.0 + 95.0 + 90.0 + 50.0) / 4.0).epsilon(1e-14));
  CHECK(s.min_pct == 50.0);
  CHECK(s.max_pct == 100.0);
  CHECK(s.count_at_or_above == 2);
  CHECK(s.count_below == 2);
  CHECK(s.outliers == 1);

  const auto dir = cmco::testing::scratch_dir("report_csv");
  write_report_csv(dir / "report.csv", rows);
  const auto back = read_report_csv(dir / "report.csv");
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].sample_id == rows[i].sample_id);
    CHECK(back[i].coverage == rows[i].coverage);
    CHECK(back[i].mean_rel_err_pct == rows[i].mean_rel_err_pct);
    CHECK(back[i].failure_rate_pct == rows[i].failure_rate_pct);
    CHECK(back[i].outlier == rows[i].outlier);
  }
}

TEST_CASE("calibration artifact round trip") {
  ConformalCalibration c;
  c.q = {0.5, 1.25, 3.0};
  c.alpha = 0.05;
  c.z = 1.96;
  c.passes = 10;
  c.n_cal = 200;
  c.floor_hits = 2;
  c.checkpoint_checksum = "00000000deadbeef";
  const auto dir = cmco::testing::scratch_dir("calib");
  save_calibration(dir, c);
  CHECK(std::filesystem::file_size(dir / "q.bin") == 12);
  const ConformalCalibration back = load_calibration(dir);
  CHECK(back.q == c.q);
  CHECK(back.alpha == 0.05);
  CHECK(back.z == 1.96);
  CHECK(back.passes == 10);
  CHECK(back.n_cal == 200);
  CHECK(back.floor_hits == 2);
  CHECK(back.checkpoint_checksum == c.checkpoint_checksum);
}
