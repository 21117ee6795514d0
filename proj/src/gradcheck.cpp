#include "fsens/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "fsens/errors.hpp"

namespace fsens {

namespace {

void check_step(double step) {
  if (!(step >= 1e-7 && step <= 1e-3)) {
    throw ParameterError("grad_check: step must be in [1e-7, 1e-3], got " + std::to_string(step));
  }
}

double finite_or_throw(double v, std::size_t coord) {
  if (!std::isfinite(v)) {
    throw NumericError("grad_check: non-finite function value near coordinate " + std::to_string(coord));
  }
  return v;
}

}  // namespace

double grad_check(const ScalarFn& f, std::span<const double> analytic_grad,
                  std::span<const double> point, double step) {
  check_step(step);
  if (analytic_grad.size() != point.size()) {
    throw DimensionError("grad_check: gradient has " + std::to_string(analytic_grad.size()) +
                         " entries for a point of " + std::to_string(point.size()));
  }
  std::vector<double> probe(point.begin(), point.end());
  finite_or_throw(f(probe), 0);
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double x0 = probe[i];
    probe[i] = x0 + step;
    const double fp = finite_or_throw(f(probe), i);
    probe[i] = x0 - step;
    const double fm = finite_or_throw(f(probe), i);
    probe[i] = x0;
    const double fd = (fp - fm) / (2.0 * step);
    const double ad = analytic_grad[i];
    const double err = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
    worst = std::max(worst, err);
  }
  return worst;
}

double grad_check(const ScalarGraph& f, const Tensor& point, double step) {
  check_step(step);
  Tape tape;
  Var x = tape.leaf(point);
  Var y = f(tape, x);
  if (!std::isfinite(y.value().item())) throw NumericError("grad_check: non-finite value at point");
  tape.backward(y);
  std::vector<double> analytic(point.numel(), 0.0);
  if (!x.grad().empty()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
  auto value_at = [&](std::span<const double> p) {
    Tape t;
    Tensor v = point;
    std::copy(p.begin(), p.end(), v.data.begin());
    return f(t, t.leaf(std::move(v))).value().item();
  };
  return grad_check(value_at, analytic, point.data, step);
}

}  // namespace fsens
