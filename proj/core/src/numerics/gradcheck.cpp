#include "molalign/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace molalign::numerics {

GradCheckResult grad_check(const std::function<Tensor()>& f, Tensor& x, double step) {
  Tensor xs[] = {x};
  return grad_check(f, xs, step);
}

GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> xs, double step) {
  for (auto& x : xs) {
    if (x.precision() != Precision::kFloat64) {
      throw std::invalid_argument("grad_check requires 64-bit inputs ('" + x.name() + "')");
    }
    if (!x.requires_grad()) {
      throw std::invalid_argument("grad_check input '" + x.name() + "' does not require grad");
    }
    x.clear_grad();
  }
  Tensor loss = f();
  const bool connected = loss.tracks_grad();
  if (connected) backward(loss);

  GradCheckResult result;
  for (auto& x : xs) {
    std::vector<double> analytic(static_cast<std::size_t>(x.numel()), 0.0);
    if (x.has_grad()) {
      const auto g = x.grad();
      analytic.assign(g.begin(), g.end());
    }
    auto data = x.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      auto central = [&](double h) {
        NoGradGuard guard;
        data[i] = saved + h;
        const double plus = f().item();
        data[i] = saved - h;
        const double minus = f().item();
        data[i] = saved;
        return (plus - minus) / (2.0 * h);
      };
      // Richardson step: cancels the h^2 term of the central difference.
      const double coarse = central(step);
      const double fine = central(step / 2.0);
      const double numeric = (4.0 * fine - coarse) / 3.0;
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      if (rel > result.max_rel_error || result.worst_index < 0) {
        if (rel >= result.max_rel_error) {
          result.max_rel_error = rel;
          result.worst_index = static_cast<std::int64_t>(i);
          result.analytic = analytic[i];
          result.numeric = numeric;
        }
      }
    }
    x.clear_grad();
  }
  return result;
}

}  // namespace molalign::numerics
