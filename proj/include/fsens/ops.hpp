#pragma once

#include <cstddef>
#include <span>

#include "fsens/autodiff.hpp"
#include "fsens/rng.hpp"

namespace fsens {

// Clamp applied to probabilities before any logarithm.
inline constexpr double kProbClamp = 1e-12;
// Floor on norms inside cosine similarities.
inline constexpr double kNormFloor = 1e-12;
// Floor on the non-ground-truth mass in condition_non_gt.
inline constexpr double kNonGtFloor = 1e-9;

// Elementwise; shapes must match exactly.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var relu(Var x);

// Reductions to a single-element tensor.
Var sum(Var x);
Var mean(Var x);
Var l2_norm_squared(Var x);

// [m x k] * [k x n] -> [m x n].
Var matmul(Var a, Var b);
// x[m x n] + b[n] broadcast over rows.
Var add_row_bias(Var x, Var bias);

// 3x3 cross-correlation, stride 1, zero padding 1. x is [c_in x h x w] or
// [batch x c_in x h x w]; kernels [c_out x c_in x 3 x 3]; bias [c_out].
Var conv2d(Var x, Var kernels);
Var conv2d(Var x, Var kernels, Var bias);

// 2x2 max pooling with stride 2 over the trailing two dims (must be even).
Var max_pool_2x2(Var x);
// Mean over the trailing two dims: [b x c x h x w] -> [b x c], [c x h x w] -> [c].
Var global_average_pool(Var x);
// Keeps the leading dimension: [b x ...] -> [b x rest].
Var flatten(Var x);
// Inverted dropout: kept activations are scaled by 1/(1-p_drop).
Var dropout(Var x, double p_drop, Rng& rng);

// Softmax of z/T along the last dimension (rank 1 or 2).
Var softmax_temp(Var z, double temperature);

// Row-wise measures. Inputs are [d] or [b x d]; outputs are [1] or [b].
Var cosine_similarity(Var u, Var v);
// Generalised KL, sum_i p log(p/q) - p + q, with p, q clamped to [clamp, 1].
// Equals KL(p||q) for normalised inputs and is non-negative termwise.
Var kl_divergence(Var p, Var q, double clamp = kProbClamp);
Var squared_distance(Var u, Var v);

// Cosine similarity between every row of a [m x d] and every row of b [n x d] -> [m x n].
Var pairwise_cosine(Var a, Var b);

// Mean over rows of -sum_i target_i log(clamp(pred_i)); scalar.
Var cross_entropy(Var target, Var pred, double clamp = kProbClamp);

// Zeroes the ground-truth entry of each row of p and renormalises the rest by
// their sum (floored at `floor`). p is [d] or [b x d]; labels has one entry per row.
Var condition_non_gt(Var p, std::span<const std::size_t> labels, double floor = kNonGtFloor);

// Row-wise one-hot target tensor [labels.size() x d].
Tensor one_hot(std::span<const std::size_t> labels, std::size_t d);

}  // namespace fsens
