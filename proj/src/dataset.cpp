#include "cmco/dataset.hpp"

#include <cmath>

#include "cmco/error.hpp"

namespace cmco {

namespace fs = std::filesystem;

std::string to_string(Role r) {
  switch (r) {
    case Role::train:
      return "train";
    case Role::calibration:
      return "calibration";
    case Role::test:
      return "test";
    case Role::unassigned:
      break;
  }
  return "unassigned";
}

Role parse_role(const std::string& s) {
  if (s == "train") return Role::train;
  if (s == "calibration") return Role::calibration;
  if (s == "test") return Role::test;
  if (s == "unassigned") return Role::unassigned;
  throw ConfigError("unknown dataset role '" + s + "'");
}

nn::Matrix Dataset::input(std::size_t i) const {
  const std::size_t stride = steps * channels;
  auto first = branch_inputs.begin() + static_cast<std::ptrdiff_t>(i * stride);
  return nn::Matrix(steps, channels, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(stride)));
}

std::span<const double> Dataset::field(std::size_t i) const {
  return {fields.data() + i * points(), points()};
}

std::span<double> Dataset::field(std::size_t i) { return {fields.data() + i * points(), points()}; }

Dataset Dataset::subset(std::span<const std::size_t> indices, Role new_role) const {
  Dataset out;
  out.steps = steps;
  out.channels = channels;
  out.grid = grid;
  out.role = new_role;
  out.task = task;
  out.oracle_tolerance = oracle_tolerance;
  const std::size_t stride = steps * channels;
  out.branch_inputs.reserve(indices.size() * stride);
  out.fields.reserve(indices.size() * points());
  for (std::size_t i : indices) {
    if (i >= size()) throw DimensionError("subset index " + std::to_string(i) + " out of range");
    auto in = branch_inputs.begin() + static_cast<std::ptrdiff_t>(i * stride);
    out.branch_inputs.insert(out.branch_inputs.end(), in, in + static_cast<std::ptrdiff_t>(stride));
    const auto f = field(i);
    out.fields.insert(out.fields.end(), f.begin(), f.end());
  }
  return out;
}

void Dataset::validate() const {
  if (steps == 0 || channels == 0) throw ConfigError("dataset needs T >= 1 and C >= 1");
  if (points() == 0) throw ConfigError("dataset needs at least one query point");
  if (branch_inputs.size() % (steps * channels) != 0) {
    throw DimensionError("branch input length is not a multiple of T*C");
  }
  if (fields.size() != size() * points()) {
    throw DimensionError("field array holds " + std::to_string(fields.size()) +
                         " values, expected N*P = " + std::to_string(size() * points()));
  }
  auto finite = [](std::span<const double> v) {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  };
  if (!finite(branch_inputs) || !finite(fields) || !finite(grid.values())) {
    throw NumericError("dataset contains non-finite values");
  }
}

void save_dataset(const fs::path& dir, const Dataset& data) {
  data.validate();
  io::ensure_directory(dir);
  io::write_f32(dir / "branch_inputs.bin", data.branch_inputs);
  io::write_f32(dir / "coords.bin", data.grid.values());
  io::write_f32(dir / "fields.bin", data.fields);
  const io::json manifest = {{"format", "cmco-dataset"},
                             {"format_version", kDatasetFormatVersion},
                             {"n", data.size()},
                             {"t", data.steps},
                             {"c", data.channels},
                             {"p", data.points()},
                             {"d", data.query_dim()},
                             {"dtype", "float32"},
                             {"endianness", "little"},
                             {"role", to_string(data.role)},
                             {"task", data.task},
                             {"oracle_tolerance", data.oracle_tolerance},
                             {"files",
                              {{"branch_inputs", "branch_inputs.bin"},
                               {"coords", "coords.bin"},
                               {"fields", "fields.bin"}}}};
  io::write_json(dir / "manifest.json", manifest);
}

Dataset load_dataset(const fs::path& dir) {
  const io::json m = io::read_json(dir / "manifest.json");
  io::check_format(m, "cmco-dataset", kDatasetFormatVersion, dir / "manifest.json");
  Dataset data;
  std::size_t n = 0, p = 0, d = 0;
  try {
    n = m.at("n").get<std::size_t>();
    data.steps = m.at("t").get<std::size_t>();
    data.channels = m.at("c").get<std::size_t>();
    p = m.at("p").get<std::size_t>();
    d = m.at("d").get<std::size_t>();
    data.role = parse_role(m.at("role").get<std::string>());
    data.task = m.value("task", io::json::object());
    data.oracle_tolerance = m.value("oracle_tolerance", 0.0);
  } catch (const io::json::exception& e) {
    throw ConfigError("dataset manifest " + dir.string() + ": " + e.what());
  }
  data.branch_inputs = io::read_f32(dir / "branch_inputs.bin", n * data.steps * data.channels);
  data.grid = nn::Matrix(p, d, io::read_f32(dir / "coords.bin", p * d));
  data.fields = io::read_f32(dir / "fields.bin", n * p);
  data.validate();
  return data;
}

void require_role(const Dataset& data, Role expected, const char* who) {
  if (data.role != expected) {
    throw ConfigError(std::string(who) + " requires the " + to_string(expected) +
                      " split, got " + to_string(data.role));
  }
}

}  // namespace cmco
