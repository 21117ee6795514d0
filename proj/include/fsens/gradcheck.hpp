#pragma once

#include <functional>
#include <span>

#include "fsens/autodiff.hpp"

namespace fsens {

using ScalarGraph = std::function<Var(Tape&, Var)>;
using ScalarFn = std::function<double(std::span<const double>)>;

// Maximum over coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|), where
// g_fd uses central differences with the given step (in [1e-7, 1e-3]).
// Throws NumericError if f is non-finite at any probe point.
double grad_check(const ScalarGraph& f, const Tensor& point, double step = 1e-5);

// Same comparison for functions whose gradient is computed elsewhere.
double grad_check(const ScalarFn& f, std::span<const double> analytic_grad,
                  std::span<const double> point, double step = 1e-5);

}  // namespace fsens
