#pragma once

#include <functional>
#include <span>

#include "molalign/numerics/tensor.hpp"

namespace molalign::numerics {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares the reverse-mode gradient of a scalar function with central
// differences at step and step/2 combined by Richardson extrapolation, element
// by element. x must be 64-bit and require grad; its
// gradient field is reset by the call. The relative error of one element is
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
// The floor keeps near-zero entries, whose central difference is dominated by
// rounding of the loss, from reading as large relative errors.
GradCheckResult grad_check(const std::function<Tensor()>& f, Tensor& x, double step = 1e-5);

// Same check over several inputs at once; the result is the worst element.
GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> xs,
                           double step = 1e-5);

}  // namespace molalign::numerics
