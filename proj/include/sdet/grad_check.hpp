#pragma once

#include <cstdint>
#include <functional>

#include "sdet/tensor.hpp"

namespace sdet {

// Central-finite-difference comparison against reverse-mode gradients.
// An element passes when its absolute error is < abs_tol or its relative
// error (against max(|autodiff|, |numeric|)) is < rel_tol.
struct GradCheckResult {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;  // over elements with magnitude above abs_tol
  size_t checked = 0;
  size_t failures = 0;

  bool ok() const { return failures == 0; }
};

// f maps the given inputs to a scalar loss; every input marked requires_grad
// is perturbed elementwise with step eps (64-bit path). When an input holds
// more than sample_limit elements, an evenly spaced subset of that size is
// perturbed instead (keeps whole-network spot checks tractable).
GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                           std::vector<Tensor> inputs, double eps = 1e-4,
                           double abs_tol = 1e-5, double rel_tol = 1e-4,
                           size_t sample_limit = SIZE_MAX);

}  // namespace sdet
