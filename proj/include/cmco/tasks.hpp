#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmco/dataset.hpp"

namespace cmco {

enum class TaskKind { antiderivative, heat1d, proxy_field };

std::string to_string(TaskKind k);
TaskKind parse_task_kind(const std::string& s);

struct TaskSpec {
  TaskKind kind = TaskKind::antiderivative;
  std::size_t n = 1000;
  std::size_t steps = 64;
  std::size_t channels = 1;
  std::size_t points = 256;
  std::uint64_t seed = 0;

  // antiderivative: u(t) = a0 + sum_k a_k cos(2 pi k t) + b_k sin(2 pi k t)
  std::size_t fourier_modes = 4;
  double offset_lo = 0.5;
  double offset_hi = 1.5;
  double mode_scale = 0.3;  // a_k, b_k ~ N(0, (mode_scale / k)^2)
  std::size_t fine_steps = 10000;

  // heat1d: left boundary u(t), right boundary 0, zero initial condition
  double length = 1.0;
  double diffusivity = 0.1;
  double t_final = 1.0;
  std::size_t nx = 64;
  double dt = 0.0;  // 0 selects dt from target_ratio
  double target_ratio = 0.4;

  // proxy_field
  double noise = 0.02;

  // Defaults for `kind`; proxy_field uses T = 7, C = 12.
  static TaskSpec defaults(TaskKind kind);
  void validate() const;
};

io::json to_json(const TaskSpec& spec);
// Missing keys fall back to TaskSpec::defaults(kind).
TaskSpec task_spec_from_json(const io::json& j);

// y(x) = integral of u over [0, x] by trapezoid on `fine_steps` uniform
// intervals of [0, 1], with a partial trapezoid inside the last interval.
std::vector<double> antiderivative_field(const std::function<double(double)>& u,
                                         std::span<const double> xs, std::size_t fine_steps);

struct HeatParams {
  double length = 1.0;
  double diffusivity = 0.1;
  double t_final = 1.0;
  std::size_t nx = 64;  // intervals
  double dt = 0.0;      // 0 selects dt from target_ratio
  double target_ratio = 0.4;

  double dx() const { return length / static_cast<double>(nx); }
  // Time step actually used: t_final divided into a whole number of steps.
  double step() const;
  double ratio() const { return diffusivity * step() / (dx() * dx()); }
};

// Explicit FTCS solution of T_t = kappa T_xx with T(0,t) = u(t), T(L,t) = 0,
// T(x,0) = 0, linearly interpolated at xs. Throws ConfigError if r > 0.5.
std::vector<double> heat1d_solve(const std::function<double(double)>& boundary,
                                 const HeatParams& params, std::span<const double> xs);

// Closed-form pieces of the proxy task.
namespace proxy {
// Channel k reads offset(k) + gain(k) * s_t plus noise.
double channel_offset(std::size_t k);
double channel_gain(std::size_t k);
// Weights (t + 1) / sum over the T steps.
std::vector<double> latent_weights(std::size_t steps);
double a(double w);
double b(double w);
double f1(double x, double y);
double f2(double x, double y);
// a(w) f1(r) + b(w) f2(r)
double field(double w, double x, double y);
// First `points` terms of the R2 low-discrepancy sequence mapped to [-1, 1]^2.
nn::Matrix r2_grid(std::size_t points);
}  // namespace proxy

Dataset gen_antiderivative(const TaskSpec& spec);
Dataset gen_heat1d(const TaskSpec& spec);
// `latent`, when given, receives w for every sample.
Dataset gen_proxy_field(const TaskSpec& spec, std::vector<double>* latent = nullptr);
Dataset generate(const TaskSpec& spec);

// Either fractions summing to 1 or absolute counts summing to N.
struct SplitSpec {
  std::array<double, 3> fractions{0.8, 0.1, 0.1};
  std::optional<std::array<std::size_t, 3>> counts;
};

io::json to_json(const SplitSpec& s);
SplitSpec split_spec_from_json(const io::json& j);

// Train and calibration sizes are floor(f * N); test takes the remainder.
std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitSpec& spec);

struct Splits {
  Dataset train;
  Dataset calibration;
  Dataset test;
  std::array<std::vector<std::size_t>, 3> indices;  // source rows, ascending
};

// Seeded shuffle, then consecutive blocks; throws ConfigError on an empty split.
Splits split_dataset(const Dataset& data, const SplitSpec& spec, std::uint64_t seed);

}  // namespace cmco
