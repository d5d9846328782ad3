// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>

#include "moelpr/errors.hpp"
#include "moelpr/tensor.hpp"

namespace moelpr {

/// Compares an analytic gradient against central finite differences,
/// coordinate by coordinate. `fn` must be a deterministic scalar function of
/// the parameter tensor; `analytic` is the gradient under test, evaluated at
/// `params`. Returns the max over coordinates of
///   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline double finite_diff_check(const std::function<double(const Tensor&)>& fn,
                                const Tensor& analytic, const Tensor& params,
                                double eps) {
  if (!analytic.same_shape(params))
    throw ShapeError("finite_diff_check: gradient " + analytic.shape_str() +
                     " vs params " + params.shape_str());
  Tensor probe = params;
  double worst = 0.0;
  for (int64_t i = 0; i < params.numel(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + eps;
    const double up = fn(probe);
    probe.data[i] = orig - eps;
    const double down = fn(probe);
    probe.data[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("finite_diff_check: non-finite function value at coordinate " +
                         std::to_string(i));
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic.data[i];
    const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
    worst = std::max(worst, std::fabs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace moelpr
