#include "fsens/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "fsens/errors.hpp"

namespace fsens {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
void check_shape(const Shape& s) {
  if (s.empty()) throw DimensionError("tensor shape must have rank >= 1");
  for (auto d : s) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(s));
  }
}
}  // namespace

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)) {
  check_shape(shape);
  data.assign(shape_numel(shape), fill);
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  check_shape(shape);
  if (data.size() != shape_numel(shape)) {
    throw DimensionError("tensor payload of " + std::to_string(data.size()) +
                         " values does not match shape " + shape_string(shape));
  }
}

double Tensor::item() const {
  if (data.size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape));
  return data[0];
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.data.size() == b.data.size() &&
         (a.data.empty() ||
          std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0);
}

}  // namespace fsens
