#include "cmco/normalization.hpp"

#include "cmco/error.hpp"

namespace cmco {

NormStats NormStats::identity(std::size_t channels, std::size_t query_dim) {
  NormStats s;
  s.input_mean.assign(channels, 0.0);
  s.input_std.assign(channels, 1.0);
  s.coord_min.assign(query_dim, -1.0);
  s.coord_max.assign(query_dim, 1.0);
  return s;
}

void NormStats::validate(std::size_t channels, std::size_t query_dim) const {
  if (input_mean.size() != channels || input_std.size() != channels) {
    throw DimensionError("normalization stats cover " + std::to_string(input_mean.size()) +
                         " input channels, model has " + std::to_string(channels));
  }
  if (coord_min.size() != query_dim || coord_max.size() != query_dim) {
    throw DimensionError("normalization stats cover " + std::to_string(coord_min.size()) +
                         " coordinate dimensions, model has " + std::to_string(query_dim));
  }
  for (double s : input_std)
    if (!(s > 0.0)) throw ConfigError("input standard deviation must be positive");
  if (!(output_std > 0.0)) throw ConfigError("output standard deviation must be positive");
}

nn::Matrix NormStats::normalize_input(const nn::Matrix& u) const {
  if (u.cols() != input_mean.size()) {
    throw DimensionError("input function has " + std::to_string(u.cols()) +
                         " channels, expected " + std::to_string(input_mean.size()));
  }
  nn::Matrix out(u.rows(), u.cols());
  for (std::size_t t = 0; t < u.rows(); ++t)
    for (std::size_t c = 0; c < u.cols(); ++c)
      out(t, c) = (u(t, c) - input_mean[c]) / input_std[c];
  return out;
}

nn::Matrix NormStats::normalize_coords(const nn::Matrix& grid) const {
  if (grid.cols() != coord_min.size()) {
    throw DimensionError("query grid has dimension " + std::to_string(grid.cols()) +
                         ", expected " + std::to_string(coord_min.size()));
  }
  nn::Matrix out(grid.rows(), grid.cols());
  for (std::size_t k = 0; k < grid.cols(); ++k) {
    const double span = coord_max[k] - coord_min[k];
    for (std::size_t p = 0; p < grid.rows(); ++p) {
      out(p, k) = span > kStdFloor ? 2.0 * (grid(p, k) - coord_min[k]) / span - 1.0 : 0.0;
    }
  }
  return out;
}

}  // namespace cmco
