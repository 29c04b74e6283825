// Runs the nine acceptance criteria and prints one PASS/FAIL line for each.
// Exit status is 0 only if every criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cmco/deeponet.hpp"
#include "cmco/error.hpp"
#include "cmco/nn/grad_check.hpp"
#include "cmco/nn/layers.hpp"
#include "cmco/pipeline.hpp"
#include "cmco/tasks.hpp"
#include "cmco/uq.hpp"

namespace fs = std::filesystem;
using namespace cmco;
using nn::Matrix;
using nn::RngStream;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradTol = 1e-4;
constexpr double kEnsembleTol = 1e-12;
constexpr double kCoverageZ1Low = 0.92;
constexpr double kCoverageZ1High = 0.99;
constexpr double kCoverageZ196Low = 0.97;
constexpr double kAntiderivativeL2 = 0.10;
constexpr double kHeatL2 = 0.15;
constexpr double kSteadyStateTol = 0.01;
constexpr double kAntiderivativeTol = 1e-6;
constexpr double kProxyTol = 1e-12;
constexpr std::size_t kDeterminismEpochs = 3;
const std::uint64_t kCoverageSeeds[] = {0, 1, 2};

struct Outcome {
  bool pass = false;
  std::string detail;
};

Matrix random_matrix(std::size_t r, std::size_t c, RngStream& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.values()) v = rng.uniform(-scale, scale);
  return m;
}

double mse(const Matrix& a, const Matrix& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

Matrix mse_grad(const Matrix& a, const Matrix& b) {
  Matrix g(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) g[i] = 2.0 * (a[i] - b[i]) / static_cast<double>(a.size());
  return g;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

Outcome parameter_counts() {
  const std::pair<const char*, std::size_t> expected[] = {
      {"lid-driven cavity", 2'502'913}, {"plastic deformation", 1'450'113}, {"cosmic dose", 1'590'273}};
  const Architecture archs[] = {lid_driven_cavity_architecture(), plastic_deformation_architecture(),
                                cosmic_dose_architecture()};
  Outcome o{true, ""};
  for (int k = 0; k < 3; ++k) {
    RngStream rng(k, 0);
    const auto model = build_model(archs[k].branch, archs[k].trunk, rng);
    const std::size_t built = parameter_count(model);
    o.pass = o.pass && built == expected[k].second;
    o.detail += std::string(k ? ", " : "") + expected[k].first + " " + std::to_string(built);
  }
  return o;
}

nn::GradCheckReport check_trunk() {
  RngStream rng(52, 0);
  Matrix w0 = random_matrix(2, 8, rng), b0 = random_matrix(1, 8, rng, 0.3);
  Matrix w1 = random_matrix(8, 1, rng), b1 = random_matrix(1, 1, rng, 0.3);
  const Matrix x = random_matrix(6, 2, rng), target = random_matrix(6, 1, rng);
  auto run = [&] {
    const Matrix h = nn::dense_forward(x, w0, b0, nn::Activation::tanh);
    return std::pair{h, nn::dense_forward(h, w1, b1, nn::Activation::none)};
  };
  const auto [h, y] = run();
  Matrix dw0(2, 8), db0(1, 8), dw1(8, 1), db1(1, 1);
  const Matrix dh = nn::dense_backward(h, y, w1, nn::Activation::none, mse_grad(y, target), dw1, db1);
  nn::dense_backward(x, h, w0, nn::Activation::tanh, dh, dw0, db0);
  return nn::grad_check({{"w0", &w0}, {"b0", &b0}, {"w1", &w1}, {"b1", &b1}}, {dw0, db0, dw1, db1},
                        [&] { return mse(run().second, target); }, kGradTol);
}

nn::GradCheckReport check_recurrent(nn::CellKind kind) {
  RngStream rng(kind == nn::CellKind::gru ? 53 : 54, 0);
  auto p = nn::RecurrentParams::zeros(kind, 2, 4);
  for (Matrix* m : {&p.w_ih, &p.w_hh, &p.b_ih, &p.b_hh}) *m = random_matrix(m->rows(), m->cols(), rng, 0.6);
  std::vector<Matrix> xs;
  for (int t = 0; t < 3; ++t) xs.push_back(random_matrix(3, 2, rng));
  const Matrix target = random_matrix(3, 4, rng);
  nn::RecurrentTrace trace;
  const auto hs = nn::recurrent_forward(p, xs, &trace);
  std::vector<Matrix> dh(3);
  dh.back() = mse_grad(hs.back(), target);
  auto g = nn::RecurrentParams::zeros(kind, 2, 4);
  nn::recurrent_backward(p, trace, dh, g);
  return nn::grad_check({{"w_ih", &p.w_ih}, {"w_hh", &p.w_hh}, {"b_ih", &p.b_ih}, {"b_hh", &p.b_hh}},
                        {g.w_ih, g.w_hh, g.b_ih, g.b_hh},
                        [&] { return mse(nn::recurrent_forward(p, xs).back(), target); }, kGradTol);
}

nn::GradCheckReport check_tiny_deeponet(std::size_t* count) {
  RngStream init(11, 0);
  auto model = build_model(BranchConfig{nn::CellKind::gru, 2, 4, 2, 0.2, true},
                           TrunkConfig{{2, 5, 4}, nn::Activation::tanh, 0.2}, init);
  model.params.output_bias[0] = 0.1;
  *count = parameter_count(model);
  RngStream data(13, 1);
  std::vector<Matrix> us;
  for (int b = 0; b < 3; ++b) us.push_back(random_matrix(4, 2, data));
  const Matrix coords = random_matrix(6, 2, data), target = random_matrix(3, 6, data);
  const auto seq = to_sequence(us);
  OperatorTrace trace;
  const Matrix y = forward_normalized(model, seq, coords, {}, nullptr, &trace);
  auto grads = model.params.zeros_like();
  backward_normalized(model, trace, mse_grad(y, target), grads);
  std::vector<Matrix> analytic;
  for (const auto& [name, m] : grads.named()) analytic.push_back(*m);
  return nn::grad_check(model.params.refs(), analytic,
                        [&] { return mse(forward_normalized(model, seq, coords, {}, nullptr), target); },
                        kGradTol);
}

Outcome gradients() {
  std::size_t count = 0;
  const std::pair<const char*, nn::GradCheckReport> reports[] = {
      {"trunk", check_trunk()},
      {"gru", check_recurrent(nn::CellKind::gru)},
      {"lstm", check_recurrent(nn::CellKind::lstm)},
      {"deeponet", check_tiny_deeponet(&count)}};
  Outcome o{count < 1000, ""};
  for (const auto& [name, r] : reports) {
    o.pass = o.pass && r.passed() && r.max_rel_error < kGradTol;
    o.detail += std::string(o.detail.empty() ? "" : ", ") + name + " " + fmt(r.max_rel_error);
  }
  o.detail += "; tiny model " + std::to_string(count) + " params";
  return o;
}

Outcome order_statistic() {
  RngStream rng(404, 0);
  const double alphas[] = {0.01, 0.05, 0.1};
  std::size_t checked = 0, mismatches = 0, skipped = 0;
  for (int trial = 0; trial < 10'000; ++trial) {
    const std::size_t n = 19 + rng.uniform_index(500 - 19 + 1);
    const double alpha = alphas[rng.uniform_index(3)];
    std::vector<double> s(n);
    for (double& v : s) v = std::abs(rng.normal()) * rng.uniform(0.1, 3.0);
    // Integer rank: (1 - alpha)(n + 1) with alpha = a/100.
    const std::size_t a = static_cast<std::size_t>(std::lround(alpha * 100));
    const std::size_t num = (100 - a) * (n + 1);
    const std::size_t k = (num + 99) / 100;
    if (k > n) {
      ++skipped;
      bool threw = false;
      try {
        conformal_quantile(s, alpha);
      } catch (const InfeasibleCalibration&) {
        threw = true;
      }
      mismatches += threw ? 0 : 1;
      continue;
    }
    std::vector<double> sorted = s;
    std::sort(sorted.begin(), sorted.end());
    mismatches += conformal_quantile(s, alpha) == sorted[k - 1] ? 0 : 1;
    ++checked;
  }
  return {mismatches == 0, std::to_string(checked) + " exact, " + std::to_string(skipped) +
                               " infeasible rejected, " + std::to_string(mismatches) + " mismatches"};
}

Outcome metric_identities() {
  RngStream rng(505, 0);
  std::size_t bad = 0;
  for (int r = 0; r < 1000; ++r) {
    const std::size_t P = 1 + rng.uniform_index(300);
    std::vector<double> y(P), lo(P), hi(P), mu(P);
    for (std::size_t j = 0; j < P; ++j) {
      y[j] = rng.normal();
      mu[j] = y[j] + 0.3 * rng.normal();
      const double w = std::abs(rng.normal()) * 0.4;
      lo[j] = mu[j] - w;
      hi[j] = mu[j] + w;
    }
    const Interval iv{lo, hi};
    const SampleReport row = assess_sample(r, y, mu, iv);
    if (row.failure_rate_pct + 100.0 * row.coverage != 100.0) ++bad;
  }
  const std::vector<double> y{1.0, -2.0, 3.5}, inside_lo{0.0, -3.0, 3.5}, inside_hi{1.0, -1.0, 4.0};
  const std::vector<double> out_lo{2.0, 0.0, 5.0}, out_hi{3.0, 1.0, 6.0};
  const bool trivial = empirical_coverage(y, inside_lo, inside_hi) == 1.0 &&
                       failure_rate(y, inside_lo, inside_hi) == 0.0 &&
                       empirical_coverage(y, out_lo, out_hi) == 0.0 &&
                       failure_rate(y, out_lo, out_hi) == 100.0 && mean_relative_error(y, y) == 0.0;
  return {bad == 0 && trivial, std::to_string(bad) + " identity violations in 1000 rows; trivial cases " +
                                   (trivial ? "exact" : "wrong")};
}

Outcome ensemble_fidelity() {
  const EnsembleStats pair = ensemble_stats(Matrix{{1.0}, {3.0}});
  const bool population = pair.mean[0] == 2.0 && pair.std[0] == 1.0;

  RngStream init(606, 0);
  const auto model = build_model(BranchConfig{nn::CellKind::gru, 2, 8, 2, 0.2, true},
                                 TrunkConfig{{1, 16, 8}, nn::Activation::tanh, 0.2}, init);
  RngStream data(606, 1);
  const Matrix u = random_matrix(10, 2, data);
  Matrix grid(25, 1);
  for (std::size_t j = 0; j < 25; ++j) grid(j, 0) = static_cast<double>(j) / 24.0;
  const auto stats = mc_predict(model, u, grid, 10, 99);
  double worst = 0.0;
  const double n = static_cast<double>(stats.passes);
  for (std::size_t j = 0; j < grid.rows(); ++j) {
    double m = 0.0;
    for (std::size_t k = 0; k < stats.passes; ++k) m += stats.samples(k, j);
    m /= n;
    double v = 0.0;
    for (std::size_t k = 0; k < stats.passes; ++k) v += (stats.samples(k, j) - m) * (stats.samples(k, j) - m);
    const double s = std::sqrt(v / n);
    worst = std::max({worst, std::abs(m - stats.mean[j]), std::abs(s - stats.std[j])});
  }
  return {population && worst < kEnsembleTol,
          std::string("{1,3} -> (") + fmt(pair.mean[0]) + ", " + fmt(pair.std[0]) + "); max deviation " +
              fmt(worst)};
}

PipelineConfig configured(const std::string& preset_name, std::uint64_t seed, const fs::path& root) {
  PipelineConfig cfg = preset(preset_name);
  cfg.seed = seed;
  cfg.paths = PipelinePaths::under(root);
  cfg.finalize();
  return cfg;
}

double average_coverage(const io::json& summary) {
  return summary.at("coverage").at("average_coverage_pct").get<double>() / 100.0;
}

struct CoverageRun {
  double z1 = 0.0;
  double z196 = 0.0;
  double relative_l2 = 0.0;
};

// Full gen/train/calibrate/evaluate, then a second calibrate/evaluate at z = 1
// on the same checkpoint.
CoverageRun coverage_run(const std::string& preset_name, std::uint64_t seed, const fs::path& root,
                         std::ostream& log) {
  PipelineConfig cfg = configured(preset_name, seed, root);
  cmd_gen(cfg, log);
  cmd_train(cfg, log);
  cmd_calibrate(cfg, log);
  const io::json s196 = cmd_evaluate(cfg, log);
  CoverageRun r{0.0, average_coverage(s196), s196.at("relative_l2").get<double>()};

  cfg.uq.z = 1.0;
  cfg.paths.calibration = root / "calibration_z1";
  cfg.paths.report = root / "report_z1";
  cmd_calibrate(cfg, log);
  r.z1 = average_coverage(cmd_evaluate(cfg, log));
  return r;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    files[fs::relative(e.path(), root).string()] = {std::istreambuf_iterator<char>(in), {}};
  }
  return files;
}

Outcome determinism(const fs::path& scratch, std::ostream& log) {
  std::map<std::string, std::string> runs[2];
  for (int k = 0; k < 2; ++k) {
    const fs::path root = scratch / ("determinism_" + std::to_string(k));
    fs::remove_all(root);
    PipelineConfig cfg = configured("antiderivative", 7, root);
    cfg.train.epochs = kDeterminismEpochs;
    cfg.train.threads = 1;
    cmd_gen(cfg, log);
    cmd_train(cfg, log);
    cmd_calibrate(cfg, log);
    cmd_evaluate(cfg, log);
    runs[k] = snapshot(root);
  }
  std::size_t differing = 0;
  for (const auto& [name, bytes] : runs[0]) {
    const auto it = runs[1].find(name);
    if (it == runs[1].end() || it->second != bytes) ++differing;
  }
  const bool same_set = runs[0].size() == runs[1].size();
  return {same_set && differing == 0 && !runs[0].empty(),
          std::to_string(runs[0].size()) + " files compared, " + std::to_string(differing) + " differ"};
}

Outcome task_oracles() {
  const double pi = std::acos(-1.0);

  // Constant boundary 1 run well past the diffusion time L^2 / kappa.
  HeatParams hp;
  hp.t_final = 50.0;
  std::vector<double> hx(64);
  for (std::size_t j = 0; j < hx.size(); ++j) hx[j] = hp.length * static_cast<double>(j) / 64.0;
  const auto heat = heat1d_solve([](double) { return 1.0; }, hp, hx);
  double heat_err = 0.0;
  for (std::size_t j = 0; j < hx.size(); ++j) {
    heat_err = std::max(heat_err, std::abs(heat[j] - (1.0 - hx[j] / hp.length)));
  }

  // cos(2 pi t) integrates to sin(2 pi x) / (2 pi); a constant input through
  // the full generator integrates to x.
  std::vector<double> ax(256);
  for (std::size_t j = 0; j < ax.size(); ++j) ax[j] = static_cast<double>(j + 1) / 256.0;
  const auto anti = antiderivative_field([pi](double t) { return std::cos(2.0 * pi * t); }, ax, 10'000);
  double anti_err = 0.0;
  for (std::size_t j = 0; j < ax.size(); ++j) {
    anti_err = std::max(anti_err, std::abs(anti[j] - std::sin(2.0 * pi * ax[j]) / (2.0 * pi)));
  }
  TaskSpec as = TaskSpec::defaults(TaskKind::antiderivative);
  as.n = 10;
  as.offset_lo = as.offset_hi = 1.0;
  as.mode_scale = 0.0;
  const Dataset ad = gen_antiderivative(as);
  for (std::size_t i = 0; i < ad.size(); ++i) {
    for (std::size_t j = 0; j < ad.points(); ++j) anti_err = std::max(anti_err, std::abs(ad.field(i)[j] - ad.grid(j, 0)));
  }

  TaskSpec ps = TaskSpec::defaults(TaskKind::proxy_field);
  ps.n = 25;
  ps.seed = 5;
  std::vector<double> latent;
  const Dataset pf = gen_proxy_field(ps, &latent);
  double proxy_err = 0.0;
  for (std::size_t i = 0; i < pf.size(); ++i) {
    for (std::size_t j = 0; j < pf.points(); ++j) {
      const double x = pf.grid(j, 0), y = pf.grid(j, 1), w = latent[i];
      const double f1 = 1.0 + 0.5 * std::cos(pi * x) * std::cos(pi * y / 2.0);
      const double f2 = std::exp(-((x - 0.3) * (x - 0.3) + (y + 0.2) * (y + 0.2)) / 0.18);
      proxy_err = std::max(proxy_err, std::abs(pf.field(i)[j] - ((1.5 + 0.5 * w) * f1 + (0.8 - 0.3 * w) * f2)));
    }
  }
  return {heat_err < kSteadyStateTol && anti_err < kAntiderivativeTol && proxy_err < kProxyTol,
          "heat steady state " + fmt(heat_err) + ", antiderivative " + fmt(anti_err) + ", proxy " +
              fmt(proxy_err)};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path scratch = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "cmco_acceptance";
  fs::create_directories(scratch);
  std::ofstream log(scratch / "acceptance.log");
  bool all = true;

  auto report = [&](int id, const char* name, const std::function<Outcome()>& body) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    all = all && o.pass;
    std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << "  " << name << ": " << o.detail
              << " [" << fmt(secs) << " s]" << std::endl;
  };

  report(1, "parameter counts", parameter_counts);
  report(2, "gradient checks", gradients);

  std::vector<CoverageRun> coverage;
  report(3, "conformal coverage, antiderivative, 3 seeds", [&] {
    Outcome o{true, ""};
    for (std::uint64_t seed : kCoverageSeeds) {
      const fs::path root = scratch / ("antiderivative_seed" + std::to_string(seed));
      fs::remove_all(root);
      const CoverageRun r = coverage_run("antiderivative", seed, root, log);
      coverage.push_back(r);
      const bool ok = r.z1 >= kCoverageZ1Low && r.z1 <= kCoverageZ1High && r.z196 >= kCoverageZ196Low;
      o.pass = o.pass && ok;
      o.detail += (o.detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + " z=1 " +
                  fmt(r.z1) + " z=1.96 " + fmt(r.z196);
    }
    return o;
  });
  report(4, "order-statistic oracle", order_statistic);
  report(5, "metric identities", metric_identities);
  report(6, "ensemble statistics", ensemble_fidelity);
  report(7, "determinism", [&] { return determinism(scratch, log); });
  report(8, "desk-scale accuracy", [&] {
    if (coverage.empty()) return Outcome{false, "antiderivative run unavailable"};
    const double anti = coverage.front().relative_l2;
    const fs::path root = scratch / "heat1d_seed0";
    fs::remove_all(root);
    PipelineConfig cfg = configured("heat1d", 0, root);
    cmd_gen(cfg, log);
    cmd_train(cfg, log);
    cmd_calibrate(cfg, log);
    const double heat = cmd_evaluate(cfg, log).at("relative_l2").get<double>();
    return Outcome{anti < kAntiderivativeL2 && heat < kHeatL2,
                   "antiderivative " + fmt(anti) + ", heat1d " + fmt(heat) + " (summary.json relative_l2)"};
  });
  report(9, "task oracles", task_oracles);

  std::cout << (all ? "ALL PASS" : "SOME CRITERIA FAILED") << std::endl;
  return all ? 0 : 1;
}
