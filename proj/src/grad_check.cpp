#include "sdet/grad_check.hpp"

#include <cmath>

namespace sdet {

GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                           std::vector<Tensor> inputs, double eps, double abs_tol,
                           double rel_tol, size_t sample_limit) {
  if (eps <= 0) fail("bad_argument", "grad_check: eps must be positive");
  if (sample_limit == 0) fail("bad_argument", "grad_check: sample_limit must be positive");

  Tensor loss = f(inputs);
  if (loss.numel() != 1) fail("bad_shape", "grad_check: f must return a scalar");
  for (Tensor& in : inputs) in.zero_grad();
  backward(loss);

  GradCheckResult res;
  const std::vector<double> no_grad;  // inputs the loss never touched
  for (Tensor& in : inputs) {
    if (!in.requires_grad()) continue;
    const std::vector<double>& g = in.has_grad() ? in.grad() : no_grad;
    size_t n = in.numel();
    size_t samples = std::min(n, sample_limit);
    for (size_t si = 0; si < samples; ++si) {
      size_t i = si * n / samples;
      double saved = in.data()[i];
      in.data()[i] = saved + eps;
      double up;
      {
        NoGradGuard ng;
        up = f(inputs).item();
      }
      in.data()[i] = saved - eps;
      double down;
      {
        NoGradGuard ng;
        down = f(inputs).item();
      }
      in.data()[i] = saved;
      double numeric = (up - down) / (2.0 * eps);
      double gi = g.empty() ? 0.0 : g[i];
      double abs_err = std::abs(gi - numeric);
      double denom = std::max(std::abs(gi), std::abs(numeric));
      double rel_err = denom > 0 ? abs_err / denom : 0.0;
      res.checked++;
      res.max_abs_err = std::max(res.max_abs_err, abs_err);
      if (denom > abs_tol) res.max_rel_err = std::max(res.max_rel_err, rel_err);
      if (!(abs_err < abs_tol || rel_err < rel_tol)) res.failures++;
    }
  }
  return res;
}

}  // namespace sdet
