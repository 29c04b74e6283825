#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cmco/io.hpp"
#include "cmco/nn/matrix.hpp"

namespace cmco {

enum class Role { unassigned, train, calibration, test };

std::string to_string(Role r);
Role parse_role(const std::string& s);

// N input sequences [T x C] on a shared query grid [P x d] with their target
// fields [P]. Arrays are flat and row-major.
struct Dataset {
  std::size_t steps = 0;
  std::size_t channels = 0;
  std::vector<double> branch_inputs;  // N * T * C
  nn::Matrix grid;                    // P x d
  std::vector<double> fields;         // N * P
  Role role = Role::unassigned;
  io::json task = io::json::object();
  double oracle_tolerance = 0.0;

  std::size_t size() const { return steps * channels == 0 ? 0 : branch_inputs.size() / (steps * channels); }
  std::size_t points() const { return grid.rows(); }
  std::size_t query_dim() const { return grid.cols(); }

  nn::Matrix input(std::size_t i) const;  // [T x C]
  std::span<const double> field(std::size_t i) const;
  std::span<double> field(std::size_t i);

  Dataset subset(std::span<const std::size_t> indices, Role new_role) const;

  // Consistent array lengths, no NaNs.
  void validate() const;
};

inline constexpr int kDatasetFormatVersion = 1;

// Directory layout: manifest.json plus float32 little-endian
// branch_inputs.bin [N*T*C], coords.bin [P*d], fields.bin [N*P].
void save_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& dir);

// Throws ConfigError unless data.role == expected.
void require_role(const Dataset& data, Role expected, const char* who);

}  // namespace cmco
