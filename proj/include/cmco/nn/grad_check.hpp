#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cmco/nn/matrix.hpp"

namespace cmco::nn {

struct ParameterRef {
  std::string name;
  Matrix* value;
};

struct GradCheckFailure {
  std::string name;
  std::size_t index;
  double analytic;
  double numeric;
  double rel_error;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t checked = 0;
  std::vector<GradCheckFailure> failures;

  bool passed() const { return failures.empty(); }
  std::string summary() const;
};

// Compares analytic gradients against central differences, entry by entry:
//   |analytic - numeric| / (|analytic| + 1e-8) <= tol.
// `loss` is re-evaluated after every perturbation, so it must read the
// parameters through the same storage that `params` points into and must be
// deterministic (dropout off). `analytic[k]` matches `params[k]` in shape.
GradCheckReport grad_check(const std::vector<ParameterRef>& params,
                           const std::vector<Matrix>& analytic,
                           const std::function<double()>& loss, double tol,
                           double step = 1e-5);

}  // namespace cmco::nn
