#include "persa/grad_check.hpp"

#include <cmath>

#include "persa/errors.hpp"

namespace persa::ad {

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           Tensor point, double tol, double h) {
  GradCheckReport report;
  point.set_requires_grad(true);
  point.zero_grad();
  const Tensor out = f(point);
  if (out.numel() != 1) throw ContractError("grad_check: f must be scalar-valued");
  if (!std::isfinite(out.item())) {
    report.failure = "non-finite value at the unperturbed point";
    return report;
  }
  backward(out);
  std::vector<double> analytic(point.numel(), 0.0);
  if (point.has_grad()) {
    analytic.assign(point.grad().begin(), point.grad().end());
  }

  NoGradGuard no_grad;
  auto values = point.mutable_data();
  report.coordinates = values.size();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double up = f(point).item();
    values[i] = saved - h;
    const double down = f(point).item();
    values[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      report.failure = "non-finite value when perturbing coordinate " + std::to_string(i);
      report.worst_index = i;
      return report;
    }
    const double fd = (up - down) / (2.0 * h);
    const double rel = std::abs(analytic[i] - fd) / (std::abs(fd) + 1e-8);
    if (rel > report.max_rel_error || i == 0) {
      report.max_rel_error = rel;
      report.worst_index = i;
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace persa::ad
