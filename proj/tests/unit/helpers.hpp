#pragma once

#include <cmath>
#include <vector>

#include "fsens/rng.hpp"
#include "fsens/tensor.hpp"

namespace fsens::test {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

inline std::vector<double> random_simplex(std::size_t d, Rng& rng) {
  std::vector<double> p(d);
  double s = 0.0;
  for (auto& v : p) s += v = -std::log(1.0 - rng.uniform());
  for (auto& v : p) v /= s;
  return p;
}

// Softmax by explicit exponential sums, no max shift.
inline std::vector<double> softmax_oracle(const std::vector<double>& z, double t = 1.0) {
  std::vector<double> e(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += e[i] = std::exp(z[i] / t);
  for (auto& v : e) v /= s;
  return e;
}

}  // namespace fsens::test
