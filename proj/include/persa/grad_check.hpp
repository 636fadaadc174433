#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>

#include "persa/tensor.hpp"

namespace persa::ad {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
  bool passed = false;
  // Set when f produced a non-finite value; names the offending coordinate.
  std::optional<std::string> failure;
};

// Compares backward() against central finite differences with step h.
// Relative error per coordinate is |g_analytic - g_fd| / (|g_fd| + 1e-8).
// `point` is perturbed in place and restored; f must rebuild its graph from it.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           Tensor point, double tol, double h = 1e-4);

}  // namespace persa::ad
