#include "fsens/penalties.hpp"

#include <array>
#include <cmath>
#include <string>

#include "fsens/errors.hpp"

namespace fsens {

namespace {

struct KindToken {
  PenaltyKind kind;
  std::string_view token;
};

constexpr std::array<KindToken, 6> kTokens{{
    {PenaltyKind::kCosineDiversity, "cosine-diversity"},
    {PenaltyKind::kSymKLCooperation, "symkl-cooperation"},
    {PenaltyKind::kL2Diversity, "l2-diversity"},
    {PenaltyKind::kL2Cooperation, "l2-cooperation"},
    {PenaltyKind::kNegCosCooperation, "negcos-cooperation"},
    {PenaltyKind::kNone, "none"},
}};

void require_same(const char* op, const CondProbVector& a, const CondProbVector& b) {
  if (a.size() != b.size() || a.size() == 0) {
    throw DimensionError(std::string(op) + ": sizes " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  }
  if (a.gt_index != b.gt_index) {
    throw ParameterError(std::string(op) + ": vectors conditioned on different labels");
  }
}

template <typename F>
double evaluate_pair(const CondProbVector& a, const CondProbVector& b, F&& f) {
  Tape tape;
  Var va = tape.constant(Tensor({a.size()}, a.values));
  Var vb = tape.constant(Tensor({b.size()}, b.values));
  return f(va, vb).value().item();
}

Var symkl(Var a, Var b, double clamp) {
  return scale(add(kl_divergence(a, b, clamp), kl_divergence(b, a, clamp)), 0.5);
}

std::vector<Var> member_probabilities(std::span<const Var> logits, std::span<const std::size_t> labels,
                                      const PenaltyOptions& options) {
  std::vector<Var> probs;
  probs.reserve(logits.size());
  for (Var z : logits) {
    if (options.temperature_probe) {
      probs.push_back(softmax_temp(z, *options.temperature_probe));
    } else {
      probs.push_back(condition_non_gt(softmax_temp(z, 1.0), labels, options.non_gt_floor));
    }
  }
  return probs;
}

}  // namespace

void ProbVector::validate(double tol) const {
  if (values.empty()) throw DimensionError("probability vector is empty");
  double s = 0.0;
  for (double v : values) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ParameterError("probability vector has a negative or non-finite entry");
    s += v;
  }
  if (std::abs(s - 1.0) > tol) {
    throw ParameterError("probability vector sums to " + std::to_string(s) + ", not 1");
  }
}

CondProbVector condition_non_gt(const ProbVector& p, std::size_t label, double floor) {
  p.validate();
  Tape tape;
  const std::size_t labels[1] = {label};
  Var out = condition_non_gt(tape.constant(Tensor({p.size()}, p.values)), labels, floor);
  return {out.value().data, label};
}

double phi_cosine(const CondProbVector& a, const CondProbVector& b) {
  require_same("phi_cosine", a, b);
  return evaluate_pair(a, b, [](Var x, Var y) { return cosine_similarity(x, y); });
}

double phi_symkl(const CondProbVector& a, const CondProbVector& b, double clamp) {
  require_same("phi_symkl", a, b);
  return evaluate_pair(a, b, [clamp](Var x, Var y) { return symkl(x, y, clamp); });
}

double phi_l2(const CondProbVector& a, const CondProbVector& b) {
  require_same("phi_l2", a, b);
  return evaluate_pair(a, b, [](Var x, Var y) { return squared_distance(x, y); });
}

std::string_view penalty_token(PenaltyKind kind) {
  for (const auto& kt : kTokens)
    if (kt.kind == kind) return kt.token;
  return "none";
}

PenaltyKind parse_penalty(std::string_view token) {
  for (const auto& kt : kTokens)
    if (kt.token == token) return kt.kind;
  std::string accepted;
  for (const auto& kt : kTokens) accepted += (accepted.empty() ? "" : ", ") + std::string(kt.token);
  throw ParameterError("unknown penalty '" + std::string(token) + "' (expected one of " + accepted + ")");
}

double penalty_sign(PenaltyKind kind) {
  switch (kind) {
    case PenaltyKind::kL2Diversity:
    case PenaltyKind::kNegCosCooperation:
      return -1.0;
    default:
      return 1.0;
  }
}

Var relation(Var a, Var b, PenaltyKind kind, const PenaltyOptions& options) {
  switch (kind) {
    case PenaltyKind::kCosineDiversity:
    case PenaltyKind::kNegCosCooperation:
      return cosine_similarity(a, b);
    case PenaltyKind::kSymKLCooperation:
      return symkl(a, b, options.kl_clamp);
    case PenaltyKind::kL2Diversity:
    case PenaltyKind::kL2Cooperation:
      return squared_distance(a, b);
    case PenaltyKind::kNone:
      break;
  }
  throw ParameterError("relation: penalty kind 'none' has no relation function");
}

Var pairwise_penalty(std::span<const Var> logits, std::span<const std::size_t> labels, PenaltyKind kind,
                     const PenaltyOptions& options) {
  const std::size_t k = logits.size();
  if (k < 2) throw ParameterError("pairwise_penalty: need at least 2 members, got " + std::to_string(k));
  if (kind == PenaltyKind::kNone) throw ParameterError("pairwise_penalty: penalty kind is 'none'");
  if (options.temperature_probe && !(*options.temperature_probe > 0.0)) {
    throw ParameterError("pairwise_penalty: temperature probe must be positive");
  }
  const Shape shape = logits[0].shape();
  for (Var z : logits) {
    if (z.shape() != shape) {
      throw DimensionError("pairwise_penalty: member logits " + shape_string(z.shape()) + " vs " +
                           shape_string(shape));
    }
  }
  const std::vector<Var> probs = member_probabilities(logits, labels, options);
  std::optional<Var> total;
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t l = j + 1; l < k; ++l) {
      Var s = sum(relation(probs[j], probs[l], kind, options));
      total = total ? add(*total, s) : s;
    }
  }
  const double batch = shape.size() == 2 ? static_cast<double>(shape[0]) : 1.0;
  // Each unordered pair stands for two ordered pairs.
  return scale(*total, penalty_sign(kind) * 2.0 / (batch * static_cast<double>(k - 1)));
}

double pairwise_penalty(std::span<const Tensor> logits, std::span<const std::size_t> labels, PenaltyKind kind,
                        const PenaltyOptions& options) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& z : logits) vars.push_back(tape.constant(z));
  return pairwise_penalty(vars, labels, kind, options).value().item();
}

PairwiseSimilarity measure_pairwise(std::span<const Tensor> logits, std::span<const std::size_t> labels) {
  const std::size_t k = logits.size();
  if (k < 2) throw ParameterError("measure_pairwise: need at least 2 members");
  Tape tape;
  std::vector<Var> vars;
  for (const auto& z : logits) vars.push_back(tape.constant(z));
  const std::vector<Var> probs = member_probabilities(vars, labels, {});
  PairwiseSimilarity out;
  double pairs = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t l = j + 1; l < k; ++l) {
      out.mean_cosine += mean(cosine_similarity(probs[j], probs[l])).value().item();
      out.mean_symkl += mean(symkl(probs[j], probs[l], kProbClamp)).value().item();
      pairs += 1.0;
    }
  }
  out.mean_cosine /= pairs;
  out.mean_symkl /= pairs;
  return out;
}

}  // namespace fsens
