#include "fsens/autodiff.hpp"

#include <algorithm>

#include "fsens/errors.hpp"

namespace fsens {

const Tensor& Var::value() const { return tape->value(id); }

std::span<const double> Var::grad() const { return tape->grad(id); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::vector<std::uint32_t> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](std::uint32_t i) { return nodes_[i].requires_grad; });
  if (n.requires_grad) n.backward = std::move(backward);
  n.inputs = std::move(inputs);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

std::span<double> Tape::grad_buffer(std::uint32_t id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape != this) throw ParameterError("backward: variable belongs to another tape");
  if (value(root.id).numel() != 1) {
    throw DimensionError("backward: root must be scalar, got " + shape_string(value(root.id).shape));
  }
  const double one = 1.0;
  const GradSeed seed{root, std::span<const double>(&one, 1)};
  backward(std::span<const GradSeed>(&seed, 1));
}

void Tape::backward(std::span<const GradSeed> seeds) {
  if (seeds.empty()) return;
  std::uint32_t top = 0;
  for (const auto& s : seeds) {
    if (s.var.tape != this) throw ParameterError("backward: seed belongs to another tape");
    if (s.grad.size() != value(s.var.id).numel()) {
      throw DimensionError("backward: seed gradient size " + std::to_string(s.grad.size()) +
                           " does not match " + shape_string(value(s.var.id).shape));
    }
    if (!nodes_[s.var.id].requires_grad) continue;
    auto g = grad_buffer(s.var.id);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i];
    top = std::max(top, s.var.id);
  }
  for (std::int64_t id = top; id >= 0; --id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, static_cast<std::uint32_t>(id));
  }
}

void Tape::zero_grad() {
  for (auto& n : nodes_) n.grad.clear();
}

}  // namespace fsens
