#include "cmco/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "cmco/error.hpp"
#include "cmco/nn/rng.hpp"

namespace cmco {

using io::json;
using nn::Matrix;
using nn::RngStream;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kFractionSlack = 1e-9;

RngStream sample_stream(const TaskSpec& spec, std::size_t i) {
  return RngStream(spec.seed, RngStream::compose({static_cast<std::uint64_t>(spec.kind) + 1, i}));
}

Matrix line_grid(std::vector<double> xs) {
  const std::size_t p = xs.size();
  return Matrix(p, 1, std::move(xs));
}

Dataset empty_dataset(const TaskSpec& spec, Matrix grid, double tolerance) {
  Dataset data;
  data.steps = spec.steps;
  data.channels = spec.channels;
  data.grid = std::move(grid);
  data.task = to_json(spec);
  data.oracle_tolerance = tolerance;
  data.branch_inputs.reserve(spec.n * spec.steps * spec.channels);
  data.fields.reserve(spec.n * spec.points);
  return data;
}

}  // namespace

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::antiderivative:
      return "antiderivative";
    case TaskKind::heat1d:
      return "heat1d";
    case TaskKind::proxy_field:
      return "proxy_field";
  }
  return "antiderivative";
}

TaskKind parse_task_kind(const std::string& s) {
  if (s == "antiderivative") return TaskKind::antiderivative;
  if (s == "heat1d") return TaskKind::heat1d;
  if (s == "proxy_field") return TaskKind::proxy_field;
  throw ConfigError("unknown task kind '" + s + "' (expected antiderivative, heat1d or proxy_field)");
}

TaskSpec TaskSpec::defaults(TaskKind kind) {
  TaskSpec s;
  s.kind = kind;
  if (kind == TaskKind::proxy_field) {
    s.steps = 7;
    s.channels = 12;
  }
  return s;
}

void TaskSpec::validate() const {
  if (n < 1 || steps < 1 || channels < 1 || points < 1) {
    throw ConfigError("task spec needs N, T, C, P >= 1");
  }
  switch (kind) {
    case TaskKind::antiderivative:
      if (channels != 1) throw ConfigError("antiderivative task has C = 1");
      if (steps < 2) throw ConfigError("antiderivative task needs T >= 2");
      if (fine_steps < 1) throw ConfigError("antiderivative fine_steps must be >= 1");
      if (!(offset_hi >= offset_lo)) throw ConfigError("antiderivative needs offset_hi >= offset_lo");
      break;
    case TaskKind::heat1d:
      if (channels != 1) throw ConfigError("heat1d task has C = 1");
      if (steps < 2) throw ConfigError("heat1d task needs T >= 2");
      if (!(length > 0) || !(diffusivity > 0) || !(t_final > 0) || nx < 2) {
        throw ConfigError("heat1d needs length, diffusivity, t_final > 0 and nx >= 2");
      }
      break;
    case TaskKind::proxy_field:
      if (!(noise >= 0)) throw ConfigError("proxy_field noise must be >= 0");
      break;
  }
}

json to_json(const TaskSpec& s) {
  json j = {{"kind", to_string(s.kind)}, {"n", s.n},         {"t", s.steps},
            {"c", s.channels},           {"p", s.points},    {"seed", s.seed}};
  switch (s.kind) {
    case TaskKind::antiderivative:
      j["fourier_modes"] = s.fourier_modes;
      j["offset_lo"] = s.offset_lo;
      j["offset_hi"] = s.offset_hi;
      j["mode_scale"] = s.mode_scale;
      j["fine_steps"] = s.fine_steps;
      break;
    case TaskKind::heat1d:
      j["length"] = s.length;
      j["diffusivity"] = s.diffusivity;
      j["t_final"] = s.t_final;
      j["nx"] = s.nx;
      j["dt"] = s.dt;
      j["target_ratio"] = s.target_ratio;
      break;
    case TaskKind::proxy_field:
      j["noise"] = s.noise;
      break;
  }
  return j;
}

TaskSpec task_spec_from_json(const json& j) {
  TaskSpec s;
  try {
    s = TaskSpec::defaults(parse_task_kind(j.value("kind", std::string("antiderivative"))));
    s.n = j.value("n", s.n);
    s.steps = j.value("t", s.steps);
    s.channels = j.value("c", s.channels);
    s.points = j.value("p", s.points);
    s.seed = j.value("seed", s.seed);
    s.fourier_modes = j.value("fourier_modes", s.fourier_modes);
    s.offset_lo = j.value("offset_lo", s.offset_lo);
    s.offset_hi = j.value("offset_hi", s.offset_hi);
    s.mode_scale = j.value("mode_scale", s.mode_scale);
    s.fine_steps = j.value("fine_steps", s.fine_steps);
    s.length = j.value("length", s.length);
    s.diffusivity = j.value("diffusivity", s.diffusivity);
    s.t_final = j.value("t_final", s.t_final);
    s.nx = j.value("nx", s.nx);
    s.dt = j.value("dt", s.dt);
    s.target_ratio = j.value("target_ratio", s.target_ratio);
    s.noise = j.value("noise", s.noise);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("task spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::vector<double> antiderivative_field(const std::function<double(double)>& u,
                                         std::span<const double> xs, std::size_t fine_steps) {
  if (fine_steps < 1) throw ConfigError("fine_steps must be >= 1");
  const double h = 1.0 / static_cast<double>(fine_steps);
  std::vector<double> node(fine_steps + 1), cum(fine_steps + 1, 0.0);
  for (std::size_t m = 0; m <= fine_steps; ++m) node[m] = u(static_cast<double>(m) * h);
  for (std::size_t m = 1; m <= fine_steps; ++m) cum[m] = cum[m - 1] + 0.5 * h * (node[m - 1] + node[m]);

  std::vector<double> out;
  out.reserve(xs.size());
  for (double x : xs) {
    if (x < 0.0 || x > 1.0) throw ConfigError("antiderivative query outside [0, 1]");
    auto m = static_cast<std::size_t>(std::floor(x / h));
    if (m >= fine_steps) m = fine_steps - 1;
    const double tm = static_cast<double>(m) * h;
    out.push_back(cum[m] + 0.5 * (x - tm) * (node[m] + u(x)));
  }
  return out;
}

double HeatParams::step() const {
  const double target = dt > 0.0 ? dt : target_ratio * dx() * dx() / diffusivity;
  const auto n = static_cast<std::size_t>(std::ceil(t_final / target - 1e-9));
  return t_final / static_cast<double>(std::max<std::size_t>(n, 1));
}

std::vector<double> heat1d_solve(const std::function<double(double)>& boundary,
                                 const HeatParams& params, std::span<const double> xs) {
  const double dt = params.step();
  const double r = params.ratio();
  if (r > 0.5) {
    std::ostringstream msg;
    msg << "FTCS scheme unstable: r = kappa*dt/dx^2 = " << r << " exceeds 0.5";
    throw ConfigError(msg.str());
  }
  const std::size_t nx = params.nx;
  const auto n_steps = static_cast<std::size_t>(std::llround(params.t_final / dt));

  std::vector<double> temp(nx + 1, 0.0), next(nx + 1, 0.0);
  temp[0] = boundary(0.0);
  for (std::size_t s = 0; s < n_steps; ++s) {
    for (std::size_t i = 1; i < nx; ++i) {
      next[i] = temp[i] + r * (temp[i + 1] - 2.0 * temp[i] + temp[i - 1]);
    }
    next[0] = boundary(static_cast<double>(s + 1) * dt);
    next[nx] = 0.0;
    std::swap(temp, next);
  }

  const double dx = params.dx();
  std::vector<double> out;
  out.reserve(xs.size());
  for (double x : xs) {
    if (x < 0.0 || x > params.length) throw ConfigError("heat1d query outside [0, L]");
    auto i = static_cast<std::size_t>(std::floor(x / dx));
    if (i >= nx) i = nx - 1;
    const double w = x / dx - static_cast<double>(i);
    out.push_back((1.0 - w) * temp[i] + w * temp[i + 1]);
  }
  return out;
}

namespace proxy {

double channel_offset(std::size_t k) { return 50.0 + 10.0 * static_cast<double>(k); }
double channel_gain(std::size_t k) { return 5.0 + static_cast<double>(k); }

std::vector<double> latent_weights(std::size_t steps) {
  const double total = static_cast<double>(steps * (steps + 1)) / 2.0;
  std::vector<double> w(steps);
  for (std::size_t t = 0; t < steps; ++t) w[t] = static_cast<double>(t + 1) / total;
  return w;
}

double a(double w) { return 1.5 + 0.5 * w; }
double b(double w) { return 0.8 - 0.3 * w; }

double f1(double x, double y) {
  return 1.0 + 0.5 * std::cos(std::numbers::pi * x) * std::cos(0.5 * std::numbers::pi * y);
}

double f2(double x, double y) {
  const double dx = x - 0.3, dy = y + 0.2;
  return std::exp(-(dx * dx + dy * dy) / 0.18);
}

double field(double w, double x, double y) { return a(w) * f1(x, y) + b(w) * f2(x, y); }

Matrix r2_grid(std::size_t points) {
  constexpr double g = 1.32471795724474602596;  // plastic number
  constexpr double a1 = 1.0 / g, a2 = 1.0 / (g * g);
  Matrix grid(points, 2);
  for (std::size_t n = 0; n < points; ++n) {
    const double k = static_cast<double>(n);
    grid(n, 0) = 2.0 * std::fmod(0.5 + a1 * k, 1.0) - 1.0;
    grid(n, 1) = 2.0 * std::fmod(0.5 + a2 * k, 1.0) - 1.0;
  }
  return grid;
}

}  // namespace proxy

Dataset gen_antiderivative(const TaskSpec& spec) {
  if (spec.kind != TaskKind::antiderivative) throw ConfigError("gen_antiderivative needs kind antiderivative");
  spec.validate();
  std::vector<double> xs(spec.points);
  for (std::size_t j = 0; j < spec.points; ++j) {
    xs[j] = static_cast<double>(j + 1) / static_cast<double>(spec.points);
  }
  Dataset data = empty_dataset(spec, line_grid(xs), 1e-6);

  const std::size_t modes = spec.fourier_modes;
  std::vector<double> ca(modes), cb(modes);
  for (std::size_t i = 0; i < spec.n; ++i) {
    RngStream rng = sample_stream(spec, i);
    const double a0 = rng.uniform(spec.offset_lo, spec.offset_hi);
    for (std::size_t k = 0; k < modes; ++k) {
      const double s = spec.mode_scale / static_cast<double>(k + 1);
      ca[k] = s * rng.normal();
      cb[k] = s * rng.normal();
    }
    auto u = [&](double t) {
      double v = a0;
      for (std::size_t k = 0; k < modes; ++k) {
        const double arg = kTwoPi * static_cast<double>(k + 1) * t;
        v += ca[k] * std::cos(arg) + cb[k] * std::sin(arg);
      }
      return v;
    };
    for (std::size_t t = 0; t < spec.steps; ++t) {
      data.branch_inputs.push_back(u(static_cast<double>(t) / static_cast<double>(spec.steps - 1)));
    }
    const auto y = antiderivative_field(u, xs, spec.fine_steps);
    data.fields.insert(data.fields.end(), y.begin(), y.end());
  }
  data.validate();
  return data;
}

Dataset gen_heat1d(const TaskSpec& spec) {
  if (spec.kind != TaskKind::heat1d) throw ConfigError("gen_heat1d needs kind heat1d");
  spec.validate();
  const HeatParams params{spec.length, spec.diffusivity, spec.t_final, spec.nx, spec.dt, spec.target_ratio};
  if (params.ratio() > 0.5) {
    std::ostringstream msg;
    msg << "FTCS scheme unstable: r = kappa*dt/dx^2 = " << params.ratio() << " exceeds 0.5";
    throw ConfigError(msg.str());
  }
  std::vector<double> xs(spec.points);
  for (std::size_t j = 0; j < spec.points; ++j) {
    xs[j] = static_cast<double>(j) * spec.length / static_cast<double>(spec.points);
  }
  Dataset data = empty_dataset(spec, line_grid(xs), 1e-3);

  constexpr std::size_t kModes = 3;
  for (std::size_t i = 0; i < spec.n; ++i) {
    RngStream rng = sample_stream(spec, i);
    const double c0 = rng.uniform(0.5, 1.5);
    std::array<double, kModes> amp{}, phase{};
    for (std::size_t k = 0; k < kModes; ++k) {
      amp[k] = 0.4 / static_cast<double>(k + 1) * rng.normal();
      phase[k] = rng.uniform(0.0, kTwoPi);
    }
    auto u = [&](double t) {
      double v = c0;
      for (std::size_t k = 0; k < kModes; ++k) {
        v += amp[k] * std::sin(std::numbers::pi * static_cast<double>(k + 1) * t / spec.t_final + phase[k]);
      }
      return v;
    };
    for (std::size_t t = 0; t < spec.steps; ++t) {
      data.branch_inputs.push_back(u(spec.t_final * static_cast<double>(t) / static_cast<double>(spec.steps - 1)));
    }
    const auto y = heat1d_solve(u, params, xs);
    data.fields.insert(data.fields.end(), y.begin(), y.end());
  }
  data.validate();
  return data;
}

Dataset gen_proxy_field(const TaskSpec& spec, std::vector<double>* latent) {
  if (spec.kind != TaskKind::proxy_field) throw ConfigError("gen_proxy_field needs kind proxy_field");
  spec.validate();
  Dataset data = empty_dataset(spec, proxy::r2_grid(spec.points), 1e-12);
  const auto weights = proxy::latent_weights(spec.steps);
  if (latent) latent->assign(spec.n, 0.0);

  std::vector<double> s(spec.steps);
  for (std::size_t i = 0; i < spec.n; ++i) {
    RngStream rng = sample_stream(spec, i);
    // Latent random walk s_t; the field depends on it only through w.
    s[0] = rng.uniform(-1.0, 1.0);
    for (std::size_t t = 1; t < spec.steps; ++t) s[t] = s[t - 1] + 0.25 * rng.normal();
    double w = 0.0;
    for (std::size_t t = 0; t < spec.steps; ++t) w += weights[t] * s[t];
    if (latent) (*latent)[i] = w;

    for (std::size_t t = 0; t < spec.steps; ++t) {
      for (std::size_t k = 0; k < spec.channels; ++k) {
        const double gain = proxy::channel_gain(k);
        data.branch_inputs.push_back(proxy::channel_offset(k) + gain * (s[t] + spec.noise * rng.normal()));
      }
    }
    for (std::size_t j = 0; j < spec.points; ++j) {
      data.fields.push_back(proxy::field(w, data.grid(j, 0), data.grid(j, 1)));
    }
  }
  data.validate();
  return data;
}

Dataset generate(const TaskSpec& spec) {
  switch (spec.kind) {
    case TaskKind::antiderivative:
      return gen_antiderivative(spec);
    case TaskKind::heat1d:
      return gen_heat1d(spec);
    case TaskKind::proxy_field:
      return gen_proxy_field(spec);
  }
  throw ConfigError("unknown task kind");
}

json to_json(const SplitSpec& s) {
  if (s.counts) return {{"counts", *s.counts}};
  return {{"fractions", s.fractions}};
}

SplitSpec split_spec_from_json(const json& j) {
  SplitSpec s;
  try {
    if (j.contains("counts")) s.counts = j.at("counts").get<std::array<std::size_t, 3>>();
    if (j.contains("fractions")) s.fractions = j.at("fractions").get<std::array<double, 3>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("split spec: ") + e.what());
  }
  return s;
}

std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitSpec& spec) {
  std::array<std::size_t, 3> sizes{};
  if (spec.counts) {
    sizes = *spec.counts;
    if (sizes[0] + sizes[1] + sizes[2] != n) {
      throw ConfigError("split counts sum to " + std::to_string(sizes[0] + sizes[1] + sizes[2]) +
                        ", dataset has " + std::to_string(n) + " samples");
    }
  } else {
    const auto& f = spec.fractions;
    for (double x : f) {
      if (!(x >= 0.0) || x > 1.0) throw ConfigError("split fractions must lie in [0, 1]");
    }
    if (std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-6) throw ConfigError("split fractions must sum to 1");
    const double dn = static_cast<double>(n);
    sizes[0] = static_cast<std::size_t>(std::floor(f[0] * dn + kFractionSlack));
    sizes[1] = static_cast<std::size_t>(std::floor(f[1] * dn + kFractionSlack));
    if (sizes[0] + sizes[1] > n) throw ConfigError("split fractions exceed dataset size");
    sizes[2] = n - sizes[0] - sizes[1];
  }
  static constexpr std::array<const char*, 3> kNames{"train", "calibration", "test"};
  for (std::size_t k = 0; k < 3; ++k) {
    if (sizes[k] == 0) throw ConfigError(std::string("empty ") + kNames[k] + " split");
  }
  return sizes;
}

Splits split_dataset(const Dataset& data, const SplitSpec& spec, std::uint64_t seed) {
  const std::size_t n = data.size();
  const auto sizes = split_sizes(n, spec);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  RngStream rng(seed, RngStream::compose({0x5350u}));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);

  Splits out;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    auto& idx = out.indices[k];
    idx.assign(order.begin() + static_cast<std::ptrdiff_t>(offset),
               order.begin() + static_cast<std::ptrdiff_t>(offset + sizes[k]));
    std::sort(idx.begin(), idx.end());
    offset += sizes[k];
  }
  out.train = data.subset(out.indices[0], Role::train);
  out.calibration = data.subset(out.indices[1], Role::calibration);
  out.test = data.subset(out.indices[2], Role::test);
  return out;
}

}  // namespace cmco
