#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cmco/checkpoint.hpp"
#include "cmco/deeponet.hpp"
#include "cmco/error.hpp"
#include "test_util.hpp"

using namespace cmco;
using nn::Matrix;
using nn::RngStream;
using cmco::testing::mse;
using cmco::testing::mse_grad;
using cmco::testing::random_matrix;

namespace {

DeepONetModel tiny_model(nn::CellKind kind, std::size_t layers, std::uint64_t seed,
                         nn::Activation act = nn::Activation::tanh) {
  BranchConfig b{kind, 2, 4, layers, 0.2, true};
  TrunkConfig t{{2, 5, 4}, act, 0.2};
  RngStream rng(seed, 0);
  return build_model(b, t, rng);
}

}  // namespace

TEST_CASE("appendix architectures have the published parameter totals") {
  CHECK(closed_form_parameter_count(lid_driven_cavity_architecture().branch,
                                    lid_driven_cavity_architecture().trunk) == 2'502'913);
  CHECK(closed_form_parameter_count(plastic_deformation_architecture().branch,
                                    plastic_deformation_architecture().trunk) == 1'450'113);
  CHECK(closed_form_parameter_count(cosmic_dose_architecture().branch,
                                    cosmic_dose_architecture().trunk) == 1'590'273);
  for (const auto& arch : {lid_driven_cavity_architecture(), plastic_deformation_architecture(),
                           cosmic_dose_architecture()}) {
    RngStream rng(1, 0);
    const auto model = build_model(arch.branch, arch.trunk, rng);
    CHECK(parameter_count(model) == closed_form_parameter_count(arch.branch, arch.trunk));
  }
}

TEST_CASE("hand-counted small configurations") {
  RngStream rng(2, 0);
  const auto a = build_model({nn::CellKind::gru, 1, 2, 1, 0.0, true},
                             {{2, 2}, nn::Activation::tanh, 0.0}, rng);
  CHECK(parameter_count(a) == 41);
  const auto b = build_model({nn::CellKind::gru, 1, 1, 1, 0.0, true},
                             {{2, 1}, nn::Activation::tanh, 0.0}, rng);
  CHECK(parameter_count(b) == 18);
}

TEST_CASE("embedding size mismatch is a config error") {
  RngStream rng(3, 0);
  CHECK_THROWS_AS(build_model({nn::CellKind::gru, 1, 8, 1, 0.0, true},
                              {{2, 16, 4}, nn::Activation::tanh, 0.0}, rng),
                  ConfigError);
  CHECK_THROWS_AS(build_model({nn::CellKind::gru, 1, 4, 1, 1.0, true},
                              {{2, 4}, nn::Activation::tanh, 0.0}, rng),
                  ConfigError);
}

TEST_CASE("zero parameters give the bias everywhere") {
  auto model = tiny_model(nn::CellKind::lstm, 2, 4);
  for (auto& r : model.params.refs()) r.value->fill(0.0);
  model.params.output_bias[0] = 0.75;
  RngStream rng(0, 0);
  RngStream data(4, 1);
  const auto out = forward(model, random_matrix(6, 2, data), random_matrix(9, 2, data), false, rng);
  for (double v : out) CHECK(v == 0.75);
}

TEST_CASE("query permutation equivariance") {
  const auto model = tiny_model(nn::CellKind::gru, 2, 5);
  RngStream data(5, 1);
  const Matrix u = random_matrix(7, 2, data);
  const Matrix grid = random_matrix(10, 2, data);
  std::vector<std::size_t> perm(10);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[1], perm[6]);
  Matrix permuted(10, 2);
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t k = 0; k < 2; ++k) permuted(i, k) = grid(perm[i], k);
  RngStream rng(0, 0);
  const auto a = forward(model, u, grid, false, rng);
  const auto b = forward(model, u, permuted, false, rng);
  for (std::size_t i = 0; i < 10; ++i) CHECK(b[i] == a[perm[i]]);
}

TEST_CASE("bilinearity in branch and trunk embeddings") {
  auto model = tiny_model(nn::CellKind::gru, 2, 6);
  model.params.output_bias[0] = -0.3;
  RngStream data(6, 1);
  const Matrix u = random_matrix(5, 2, data);
  const Matrix grid = random_matrix(8, 2, data);
  RngStream rng(0, 0);
  const auto base = forward(model, u, grid, false, rng);

  const double c = -2.5;
  auto branch_scaled = model;
  branch_scaled.params.norm_gain *= c;
  branch_scaled.params.norm_shift *= c;
  const auto bs = forward(branch_scaled, u, grid, false, rng);

  auto trunk_scaled = model;
  trunk_scaled.params.trunk_weight.back() *= c;
  trunk_scaled.params.trunk_bias.back() *= c;
  const auto ts = forward(trunk_scaled, u, grid, false, rng);

  for (std::size_t j = 0; j < base.size(); ++j) {
    const double expected = c * (base[j] - model.bias());
    CHECK(std::abs((bs[j] - model.bias()) - expected) < 1e-12);
    CHECK(std::abs((ts[j] - model.bias()) - expected) < 1e-12);
  }
}

TEST_CASE("determinism of forward") {
  const auto model = tiny_model(nn::CellKind::gru, 3, 7);
  RngStream data(7, 1);
  const Matrix u = random_matrix(5, 2, data);
  const Matrix grid = random_matrix(8, 2, data);

  RngStream r1(0, 0), r2(1, 1);
  CHECK(forward(model, u, grid, false, r1) == forward(model, u, grid, false, r2));

  RngStream a(42, 3), b(42, 3);
  const auto da = forward(model, u, grid, true, a);
  const auto db = forward(model, u, grid, true, b);
  CHECK(da == db);
  // Same stream object, next call: fresh masks.
  CHECK(forward(model, u, grid, true, a) != da);
  CHECK(da != forward(model, u, grid, false, r1));
}

TEST_CASE("forward rejects mismatched shapes") {
  const auto model = tiny_model(nn::CellKind::gru, 1, 8);
  RngStream rng(0, 0);
  CHECK_THROWS_AS(forward(model, Matrix(5, 3), Matrix(4, 2), false, rng), DimensionError);
  CHECK_THROWS_AS(forward(model, Matrix(5, 2), Matrix(4, 3), false, rng), DimensionError);
}

TEST_CASE("non-finite output raises a numeric error") {
  auto model = tiny_model(nn::CellKind::gru, 1, 9);
  model.params.output_bias[0] = std::numeric_limits<double>::infinity();
  RngStream rng(0, 0);
  CHECK_THROWS_AS(forward(model, Matrix(5, 2), Matrix(4, 2), false, rng), NumericError);
}

TEST_CASE("batched forward equals per-sample forward") {
  auto model = tiny_model(nn::CellKind::lstm, 2, 10);
  RngStream data(10, 1);
  std::vector<Matrix> us;
  for (int b = 0; b < 3; ++b) us.push_back(random_matrix(6, 2, data));
  const Matrix grid = random_matrix(5, 2, data);
  const auto seq = to_sequence(us);
  const Matrix batched = forward_normalized(model, seq, grid, {}, nullptr);
  RngStream rng(0, 0);
  for (int b = 0; b < 3; ++b) {
    const auto single = forward(model, us[b], grid, false, rng);
    for (std::size_t j = 0; j < 5; ++j) CHECK(std::abs(batched(b, j) - single[j]) < 1e-14);
  }
}

namespace {

nn::GradCheckReport check_full_model(nn::CellKind kind, bool with_masks, nn::Activation act) {
  auto model = tiny_model(kind, 2, kind == nn::CellKind::gru ? 11 : 12, act);
  model.params.output_bias[0] = 0.1;
  RngStream data(13, 1);
  std::vector<Matrix> us;
  for (int b = 0; b < 3; ++b) us.push_back(random_matrix(4, 2, data));
  const Matrix coords = random_matrix(6, 2, data);
  const Matrix target = random_matrix(3, 6, data);
  const auto seq = to_sequence(us);

  // Re-created streams replay identical masks on every evaluation.
  auto run = [&](OperatorTrace* trace) {
    if (!with_masks) return forward_normalized(model, seq, coords, {}, nullptr, trace);
    std::vector<RngStream> rows{RngStream(1, 1), RngStream(1, 2), RngStream(1, 3)};
    RngStream trunk(1, 0);
    return forward_normalized(model, seq, coords, rows, &trunk, trace);
  };

  OperatorTrace trace;
  const Matrix y = run(&trace);
  auto grads = model.params.zeros_like();
  backward_normalized(model, trace, mse_grad(y, target), grads);

  std::vector<Matrix> analytic;
  for (const auto& [name, m] : grads.named()) analytic.push_back(*m);
  return nn::grad_check(model.params.refs(), analytic, [&] { return mse(run(nullptr), target); },
                        1e-4);
}

}  // namespace

TEST_CASE("full tiny DeepONet gradients match central differences") {
  for (auto kind : {nn::CellKind::gru, nn::CellKind::lstm}) {
    const auto report = check_full_model(kind, false, nn::Activation::tanh);
    INFO(nn::to_string(kind) << ": " << report.summary());
    CHECK(report.checked < 1000);
    CHECK(report.passed());
  }
}

TEST_CASE("gradients with frozen dropout masks") {
  for (auto kind : {nn::CellKind::gru, nn::CellKind::lstm}) {
    const auto report = check_full_model(kind, true, nn::Activation::tanh);
    INFO(nn::to_string(kind) << ": " << report.summary());
    CHECK(report.passed());
  }
}

TEST_CASE("checkpoint round trip") {
  auto model = tiny_model(nn::CellKind::lstm, 2, 14);
  model.norm.input_mean = {0.5, -1.0};
  model.norm.input_std = {2.0, 0.25};
  model.norm.output_mean = 3.0;
  model.norm.output_std = 0.1;
  model.norm.coord_min = {0.0, -2.0};
  model.norm.coord_max = {1.0, 2.0};
  const auto dir = cmco::testing::scratch_dir("checkpoint");
  save_checkpoint(dir, model);

  const auto loaded = load_checkpoint(dir);
  const auto expected = round_trip_f32(model);
  CHECK(loaded.branch == model.branch);
  CHECK(loaded.trunk == model.trunk);
  CHECK(loaded.norm == model.norm);
  const auto a = loaded.params.named();
  const auto b = expected.params.named();
  REQUIRE(a.size() == b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(a[k].first == b[k].first);
    CHECK(*a[k].second == *b[k].second);
  }
  CHECK(std::filesystem::file_size(dir / "params.bin") == 4 * parameter_count(model));

  const auto manifest = io::read_json(dir / "manifest.json");
  CHECK(manifest["format_version"] == kCheckpointFormatVersion);
  CHECK(manifest["parameters"][0]["name"] == "branch.0.w_ih");
  CHECK(manifest["parameters"].back()["name"] == "output.bias");

  // A saved-then-loaded checkpoint saves to identical bytes.
  const auto dir2 = cmco::testing::scratch_dir("checkpoint2");
  save_checkpoint(dir2, loaded);
  CHECK(cmco::testing::read_bytes(dir / "params.bin") ==
        cmco::testing::read_bytes(dir2 / "params.bin"));
  CHECK(cmco::testing::read_bytes(dir / "manifest.json") ==
        cmco::testing::read_bytes(dir2 / "manifest.json"));
}

TEST_CASE("checkpoint rejects corrupted payloads") {
  const auto model = tiny_model(nn::CellKind::gru, 1, 15);
  const auto dir = cmco::testing::scratch_dir("checkpoint_bad");
  save_checkpoint(dir, model);
  std::filesystem::resize_file(dir / "params.bin", 12);
  CHECK_THROWS_AS(load_checkpoint(dir), ConfigError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing"), ConfigError);
}

TEST_CASE("appendix-scale plastic model runs a forward pass") {
  const auto arch = plastic_deformation_architecture();
  RngStream rng(16, 0);
  const auto model = build_model(arch.branch, arch.trunk, rng);
  RngStream data(16, 1);
  const auto out = forward(model, random_matrix(12, 1, data), random_matrix(20, 2, data), true, rng);
  CHECK(out.size() == 20);
  for (double v : out) CHECK(std::isfinite(v));
}
