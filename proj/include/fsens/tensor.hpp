#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace fsens {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles.
///
/// Every dimension is positive and `data.size() == shape_numel(shape)`; the
/// constructors enforce this. Gradients live on the Tape, not here.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  // Value of a single-element tensor.
  double item() const;
  bool all_finite() const;

  std::span<const double> view() const { return data; }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

// Byte-level equality of shape and payload (distinguishes -0.0 / NaN payloads).
bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace fsens
