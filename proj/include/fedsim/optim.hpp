#pragma once

#include <fedsim/common.hpp>

#include <algorithm>
#include <cmath>

namespace fedsim {

template <typename Scalar>
struct MinimizeResult {
  VectorX<Scalar> x;
  Scalar value = 0;
  bool converged = false;
  int iterations = 0;
  Scalar relative_residual = 0;  // |grad(x)| / |grad(x0)|
};

/// Accelerated gradient descent with backtracking and function-value
/// restarts for a smooth function whose gradient is `smoothness`-Lipschitz.
/// `value_grad(x, g)` returns f(x) and writes grad f(x) into g. Stops once
/// |grad f(x)| <= tol * |grad f(x0)|.
///
/// Backtracking never shrinks the step below 1/smoothness, which is a
/// guaranteed descent step, so the search stays stable once objective
/// differences reach rounding level.
template <typename Scalar, typename ValueGrad>
MinimizeResult<Scalar> minimize_accelerated(ValueGrad&& value_grad, VectorX<Scalar> x0,
                                            Scalar smoothness, Scalar tol,
                                            int max_iterations) {
  MinimizeResult<Scalar> out;
  const Scalar min_step = Scalar(1) / smoothness;
  VectorX<Scalar> x = std::move(x0);
  VectorX<Scalar> gx(x.size());
  Scalar fx = value_grad(x, gx);
  const Scalar g0 = gx.norm();
  if (g0 == Scalar(0)) {
    out.x = std::move(x);
    out.value = fx;
    out.converged = true;
    return out;
  }
  VectorX<Scalar> y = x, gy = gx, x_next(x.size()), g_next(x.size());
  Scalar fy = fx;
  Scalar momentum_t = 1;
  Scalar step = 4 * min_step;
  for (int it = 1; it <= max_iterations; ++it) {
    Scalar f_next = 0;
    for (;;) {
      x_next = y - step * gy;
      f_next = value_grad(x_next, g_next);
      const Scalar model = fy - Scalar(0.5) * step * gy.squaredNorm();
      if (f_next <= model || step <= min_step) break;
      step = std::max(Scalar(0.5) * step, min_step);
    }
    out.iterations = it;
    if (f_next > fx && momentum_t > Scalar(1)) {
      momentum_t = 1;
      y = x;
      gy = gx;
      fy = fx;
      continue;
    }
    const Scalar t_next =
        Scalar(0.5) * (Scalar(1) + std::sqrt(Scalar(1) + 4 * momentum_t * momentum_t));
    const Scalar beta = (momentum_t - Scalar(1)) / t_next;
    y = x_next + beta * (x_next - x);
    x = x_next;
    gx = g_next;
    fx = f_next;
    momentum_t = t_next;
    if (gx.norm() <= tol * g0) break;
    if (beta != Scalar(0)) {
      fy = value_grad(y, gy);
    } else {
      gy = gx;
      fy = fx;
    }
    step = std::min(step * Scalar(1.25), 64 * min_step);
  }
  out.relative_residual = gx.norm() / g0;
  out.converged = out.relative_residual <= tol;
  out.value = fx;
  out.x = std::move(x);
  return out;
}

}  // namespace fedsim
