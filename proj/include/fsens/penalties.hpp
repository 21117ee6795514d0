#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fsens/autodiff.hpp"
#include "fsens/ops.hpp"

namespace fsens {

/// Class-probability vector: non-negative entries summing to one.
struct ProbVector {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  // Throws ParameterError unless entries are >= 0 and sum to 1 within `tol`.
  void validate(double tol = 1e-9) const;
};

/// Probabilities conditioned on the label not being `gt_index`: that entry is
/// zero and the rest sum to one.
struct CondProbVector {
  std::vector<double> values;
  std::size_t gt_index = 0;

  std::size_t size() const { return values.size(); }
};

CondProbVector condition_non_gt(const ProbVector& p, std::size_t label, double floor = kNonGtFloor);

// Relationship functions on conditioned vectors.
double phi_cosine(const CondProbVector& a, const CondProbVector& b);
double phi_symkl(const CondProbVector& a, const CondProbVector& b, double clamp = kProbClamp);
double phi_l2(const CondProbVector& a, const CondProbVector& b);

enum class PenaltyKind {
  kNone,
  kCosineDiversity,    // +cos
  kSymKLCooperation,   // +symmetrised KL
  kL2Diversity,        // -squared distance
  kL2Cooperation,      // +squared distance
  kNegCosCooperation,  // -cos
};

std::string_view penalty_token(PenaltyKind kind);
// Throws ParameterError naming the accepted tokens.
PenaltyKind parse_penalty(std::string_view token);
// -1 or +1; the relation value enters the loss multiplied by this sign.
double penalty_sign(PenaltyKind kind);

struct PenaltyOptions {
  // When set, relations compare softmax(logits / T) over all classes instead
  // of the label-conditioned softmax.
  std::optional<double> temperature_probe;
  double kl_clamp = kProbClamp;
  double non_gt_floor = kNonGtFloor;
};

// Row-wise relation [b] between two probability batches [b x d].
Var relation(Var a, Var b, PenaltyKind kind, const PenaltyOptions& options = {});

// sign * sum over samples and ordered member pairs of the relation,
// divided by batch * (K - 1). All logits are [batch x d]; K >= 2.
Var pairwise_penalty(std::span<const Var> logits, std::span<const std::size_t> labels, PenaltyKind kind,
                     const PenaltyOptions& options = {});

// Value-only version on plain tensors.
double pairwise_penalty(std::span<const Tensor> logits, std::span<const std::size_t> labels, PenaltyKind kind,
                        const PenaltyOptions& options = {});

// Unsigned mean over samples and unordered pairs of the cosine (or sym-KL)
// between label-conditioned probabilities. Used to measure how similar the
// members' secondary predictions are on held-out data.
struct PairwiseSimilarity {
  double mean_cosine = 0.0;
  double mean_symkl = 0.0;
};
PairwiseSimilarity measure_pairwise(std::span<const Tensor> logits, std::span<const std::size_t> labels);

}  // namespace fsens
