#pragma once

#include <cstddef>
#include <vector>

#include "cmco/nn/matrix.hpp"

namespace cmco {

inline constexpr double kStdFloor = 1e-12;

// Z-score statistics for branch inputs (per channel) and outputs (scalar),
// plus the per-dimension coordinate range that maps query points to [-1, 1].
struct NormStats {
  std::vector<double> input_mean;
  std::vector<double> input_std;
  double output_mean = 0.0;
  double output_std = 1.0;
  std::vector<double> coord_min;
  std::vector<double> coord_max;

  // Statistics that leave inputs, outputs and [-1, 1] coordinates unchanged.
  static NormStats identity(std::size_t channels, std::size_t query_dim);

  void validate(std::size_t channels, std::size_t query_dim) const;

  // u [T x C] -> normalized copy
  nn::Matrix normalize_input(const nn::Matrix& u) const;
  // grid [P x d] -> coordinates in [-1, 1] per dimension
  nn::Matrix normalize_coords(const nn::Matrix& grid) const;
  double normalize_output(double y) const { return (y - output_mean) / output_std; }
  double denormalize_output(double z) const { return z * output_std + output_mean; }

  bool operator==(const NormStats&) const = default;
};

}  // namespace cmco
