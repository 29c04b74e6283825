#include "cmco/nn/grad_check.hpp"

#include <cmath>
#include <sstream>

#include "cmco/error.hpp"

namespace cmco::nn {

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << "checked " << checked << " entries, max rel error " << max_rel_error;
  if (!worst_parameter.empty()) os << " (" << worst_parameter << ")";
  if (!failures.empty()) {
    os << "; " << failures.size() << " failures:";
    std::size_t shown = 0;
    for (const auto& f : failures) {
      if (shown++ == 8) {
        os << " ...";
        break;
      }
      os << " " << f.name << "[" << f.index << "] analytic=" << f.analytic
         << " numeric=" << f.numeric;
    }
  }
  return os.str();
}

GradCheckReport grad_check(const std::vector<ParameterRef>& params,
                           const std::vector<Matrix>& analytic,
                           const std::function<double()>& loss, double tol, double step) {
  if (params.size() != analytic.size()) {
    throw DimensionError("grad_check: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(analytic.size()) + " gradients");
  }
  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& theta = *params[k].value;
    const Matrix& grad = analytic[k];
    if (!theta.same_shape(grad)) {
      throw DimensionError("grad_check: gradient for " + params[k].name + " has shape " +
                           grad.shape_string() + ", parameter " + theta.shape_string());
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double saved = theta[i];
      theta[i] = saved + step;
      const double plus = loss();
      theta[i] = saved - step;
      const double minus = loss();
      theta[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double rel = std::abs(grad[i] - numeric) / (std::abs(grad[i]) + 1e-8);
      ++report.checked;
      if (rel > report.max_rel_error || !std::isfinite(rel)) {
        report.max_rel_error = rel;
        report.worst_parameter = params[k].name + "[" + std::to_string(i) + "]";
      }
      if (!(rel <= tol)) report.failures.push_back({params[k].name, i, grad[i], numeric, rel});
    }
  }
  return report;
}

}  // namespace cmco::nn
