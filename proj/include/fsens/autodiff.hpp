#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "fsens/tensor.hpp"

namespace fsens {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  // Accumulated gradient; empty if no gradient reached this node.
  std::span<const double> grad() const;
};

struct GradSeed {
  Var var;
  std::span<const double> grad;
};

/// Reverse-mode recording of primitive operations.
///
/// Nodes are appended in evaluation order, so ids are a topological order and
/// backward simply walks ids downwards. Gradients accumulate additively, which
/// handles fan-out. A tape is confined to one thread.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var record(Tensor value, std::vector<std::uint32_t> inputs, BackwardFn backward);

  const Tensor& value(std::uint32_t id) const { return nodes_[id].value; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  const std::vector<std::uint32_t>& inputs(std::uint32_t id) const { return nodes_[id].inputs; }
  std::span<const double> grad(std::uint32_t id) const { return nodes_[id].grad; }
  // Gradient accumulator for `id`, zero-initialised on first use.
  std::span<double> grad_buffer(std::uint32_t id);

  // Seeds d(root)/d(root) = 1; root must hold a single element.
  void backward(Var root);
  void backward(std::span<const GradSeed> seeds);
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

}  // namespace fsens
