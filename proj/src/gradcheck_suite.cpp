#include "fsens/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>

#include "fsens/distill.hpp"
#include "fsens/gradcheck.hpp"
#include "fsens/models.hpp"
#include "fsens/ops.hpp"
#include "fsens/penalties.hpp"
#include "fsens/training.hpp"

namespace fsens {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Rows drawn away from zero so relu / max kinks stay outside the probe step.
Tensor away_from_zero(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) {
    const double m = rng.uniform(0.1, 1.0);
    v = rng.bernoulli(0.5) ? m : -m;
  }
  return t;
}

Tensor random_simplex(std::size_t rows, std::size_t d, Rng& rng) {
  Tensor t({rows, d});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += t[r * d + c] = rng.uniform(0.05, 1.0);
    for (std::size_t c = 0; c < d; ++c) t[r * d + c] /= s;
  }
  return t;
}

// Weighted sum with fixed random weights, so every output coordinate matters.
Var project(Tape& tape, Var y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w(y.shape());
  for (auto& v : w.data) v = rng.uniform(-1.0, 1.0);
  return sum(mul(y, tape.constant(std::move(w))));
}

// Squares its input but backpropagates g * x.
Var faulty_square(Var x) {
  Tensor out = x.value();
  for (auto& v : out.data) v *= v;
  return x.tape->record(std::move(out), {x.id}, [x = x.id](Tape& tp, std::uint32_t self) {
    auto g = tp.grad(self);
    const auto& xv = tp.value(x).data;
    auto gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * xv[i];
  });
}

struct Primitive {
  std::string name;
  std::function<Tensor(Rng&)> point;
  ScalarGraph f;
};

std::vector<Primitive> primitives(Rng& fixed) {
  const Tensor b34 = random_tensor({3, 4}, fixed);
  const Tensor b42 = random_tensor({4, 2}, fixed);
  const Tensor k_conv = random_tensor({3, 2, 3, 3}, fixed);
  const Tensor x_conv = random_tensor({2, 5, 5}, fixed);
  const Tensor bias3 = random_tensor({3}, fixed);
  const Tensor q23 = random_simplex(2, 3, fixed);
  const Tensor target23 = random_simplex(2, 3, fixed);
  const std::vector<std::size_t> labels2{2, 0};

  std::vector<Primitive> ps;
  auto add_prim = [&](std::string name, std::function<Tensor(Rng&)> point, ScalarGraph f) {
    ps.push_back({std::move(name), std::move(point), std::move(f)});
  };
  auto shape_point = [](Shape s) { return [s](Rng& r) { return random_tensor(s, r); }; };

  add_prim("add", shape_point({3, 4}), [b34](Tape& t, Var x) { return project(t, add(x, t.constant(b34)), 1); });
  add_prim("sub", shape_point({3, 4}), [b34](Tape& t, Var x) { return project(t, sub(t.constant(b34), x), 2); });
  add_prim("mul", shape_point({3, 4}), [](Tape& t, Var x) { return project(t, mul(x, x), 3); });
  add_prim("scale", shape_point({5}), [](Tape& t, Var x) { return project(t, scale(x, -2.5), 4); });
  add_prim("relu", [](Rng& r) { return away_from_zero({4, 3}, r); },
           [](Tape& t, Var x) { return project(t, relu(x), 5); });
  add_prim("sum", shape_point({2, 3}), [](Tape&, Var x) { return sum(x); });
  add_prim("mean", shape_point({2, 3}), [](Tape&, Var x) { return mean(mul(x, x)); });
  add_prim("l2_norm_squared", shape_point({7}), [](Tape&, Var x) { return l2_norm_squared(x); });
  add_prim("matmul_left", shape_point({3, 4}), [b42](Tape& t, Var x) { return project(t, matmul(x, t.constant(b42)), 6); });
  add_prim("matmul_right", shape_point({4, 2}), [b34](Tape& t, Var x) { return project(t, matmul(t.constant(b34), x), 7); });
  add_prim("add_row_bias", shape_point({4}), [b34](Tape& t, Var x) { return project(t, add_row_bias(t.constant(b34), x), 8); });
  add_prim("conv2d_input", shape_point({2, 5, 5}),
           [k_conv](Tape& t, Var x) { return project(t, conv2d(x, t.constant(k_conv)), 9); });
  add_prim("conv2d_kernels", shape_point({3, 2, 3, 3}),
           [x_conv](Tape& t, Var k) { return project(t, conv2d(t.constant(x_conv), k), 10); });
  add_prim("conv2d_bias", shape_point({3}), [x_conv, k_conv](Tape& t, Var b) {
    return project(t, conv2d(t.constant(x_conv), t.constant(k_conv), b), 11);
  });
  add_prim("conv2d_batched", shape_point({2, 2, 4, 4}),
           [k_conv, bias3](Tape& t, Var x) { return project(t, conv2d(x, t.constant(k_conv), t.constant(bias3)), 12); });
  add_prim("max_pool_2x2", [](Rng& r) {
    // Distinct values per window keep the argmax stable under the probe.
    Tensor t({2, 4, 4});
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>((i * 7) % 32) * 0.1 + r.uniform(0.0, 0.05);
    return t;
  }, [](Tape& t, Var x) { return project(t, max_pool_2x2(x), 13); });
  add_prim("global_average_pool", shape_point({2, 3, 4, 4}),
           [](Tape& t, Var x) { return project(t, global_average_pool(x), 14); });
  add_prim("flatten", shape_point({2, 3, 2, 2}), [](Tape& t, Var x) { return project(t, flatten(x), 15); });
  add_prim("dropout", shape_point({3, 5}), [](Tape& t, Var x) {
    Rng rng(99);
    return project(t, dropout(x, 0.3, rng), 16);
  });
  add_prim("softmax_temp", [](Rng& r) { return random_tensor({2, 4}, r, -3.0, 3.0); },
           [](Tape& t, Var x) { return project(t, softmax_temp(x, 0.7), 17); });
  add_prim("softmax_temp_hot", [](Rng& r) { return random_tensor({4}, r, -3.0, 3.0); },
           [](Tape& t, Var x) { return project(t, softmax_temp(x, 10.0), 18); });
  add_prim("cosine_similarity", shape_point({3, 4}),
           [b34](Tape& t, Var x) { return project(t, cosine_similarity(x, t.constant(b34)), 19); });
  add_prim("kl_divergence_p", [](Rng& r) { return random_simplex(2, 3, r); },
           [q23](Tape& t, Var p) { return project(t, kl_divergence(p, t.constant(q23)), 20); });
  add_prim("kl_divergence_q", [](Rng& r) { return random_simplex(2, 3, r); },
           [q23](Tape& t, Var q) { return project(t, kl_divergence(t.constant(q23), q), 21); });
  add_prim("squared_distance", shape_point({3, 4}),
           [b34](Tape& t, Var x) { return project(t, squared_distance(x, t.constant(b34)), 22); });
  add_prim("pairwise_cosine", shape_point({2, 4}),
           [b34](Tape& t, Var x) { return project(t, pairwise_cosine(x, t.constant(b34)), 23); });
  add_prim("cross_entropy_pred", [](Rng& r) { return random_simplex(2, 3, r); },
           [target23](Tape& t, Var p) { return cross_entropy(t.constant(target23), p); });
  add_prim("cross_entropy_target", [](Rng& r) { return random_simplex(2, 3, r); },
           [q23](Tape& t, Var target) { return cross_entropy(target, t.constant(q23)); });
  add_prim("condition_non_gt", [](Rng& r) { return random_simplex(2, 3, r); },
           [labels2](Tape& t, Var p) { return project(t, condition_non_gt(p, labels2), 24); });
  return ps;
}

// Flattened parameters of an ensemble.
std::vector<double> pack(const EnsembleParams& e) {
  std::vector<double> out;
  for (const auto& m : e.members)
    for (const auto* t : m.tensors()) out.insert(out.end(), t->data.begin(), t->data.end());
  return out;
}

void unpack(std::span<const double> flat, EnsembleParams& e) {
  std::size_t at = 0;
  for (auto& m : e.members)
    for (auto* t : m.tensors()) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(at), t->numel(), t->data.begin());
      at += t->numel();
    }
}

// Builds the loss on a tape for the given ensemble; returns the scalar and
// fills the parameter leaves.
using EnsembleLoss = std::function<Var(Tape&, std::vector<BackboneVars>&)>;

double check_ensemble_loss(const EnsembleParams& base, const EnsembleLoss& loss, double step) {
  Tape tape;
  std::vector<BackboneVars> vars;
  for (const auto& m : base.members) vars.push_back(bind_params(tape, m, true));
  tape.backward(loss(tape, vars));
  std::vector<double> analytic;
  for (const auto& v : vars)
    for (Var p : v.params) {
      const auto g = p.grad();
      if (g.empty()) {
        analytic.insert(analytic.end(), p.value().numel(), 0.0);
      } else {
        analytic.insert(analytic.end(), g.begin(), g.end());
      }
    }
  EnsembleParams scratch = base;
  auto value = [&](std::span<const double> flat) {
    unpack(flat, scratch);
    Tape t;
    std::vector<BackboneVars> vs;
    for (const auto& m : scratch.members) vs.push_back(bind_params(t, m, false));
    return loss(t, vs).value().item();
  };
  const std::vector<double> point = pack(base);
  return grad_check(value, analytic, point, step);
}

GradCheckResult make_result(std::string name, double err, double tol) {
  return {std::move(name), err, tol, err < tol};
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& options) {
  std::vector<GradCheckResult> results;
  Rng fixed = Rng::stream(options.seed, "gradcheck-fixed");
  for (const auto& prim : primitives(fixed)) {
    double worst = 0.0;
    for (std::size_t i = 0; i < options.points; ++i) {
      Rng rng = Rng::stream(options.seed, "gradcheck-point", {fnv1a64(prim.name), i});
      worst = std::max(worst, grad_check(prim.f, prim.point(rng), options.step));
    }
    results.push_back(make_result(prim.name, worst, options.tolerance));
  }

  if (options.inject_fault) {
    double worst = 0.0;
    for (std::size_t i = 0; i < options.points; ++i) {
      Rng rng = Rng::stream(options.seed, "gradcheck-fault", {i});
      worst = std::max(worst, grad_check([](Tape& t, Var x) { return project(t, faulty_square(x), 25); },
                                         random_tensor({3}, rng, 0.5, 2.0), options.step));
    }
    results.push_back(make_result("injected_fault", worst, options.tolerance));
  }

  if (!options.composites) return results;

  // Joint ensemble loss: 2 members, 3 classes, batch 2, 8x8 inputs.
  BackboneArch arch;
  arch.n_classes = 3;
  arch.dropout = 0.0;
  const EnsembleParams ens = init_ensemble({11, 12}, arch);
  Rng data = Rng::stream(options.seed, "gradcheck-batch");
  const Tensor view_a = random_tensor({2, 1, 8, 8}, data);
  const Tensor view_b = random_tensor({2, 1, 8, 8}, data);
  const std::vector<std::size_t> labels{1, 2};

  struct Variant {
    std::string name;
    PenaltyKind kind;
    double gamma;
    std::optional<double> probe;
    double dropout;
    bool two_views;
  };
  const std::vector<Variant> variants{
      {"joint_loss_single_member", PenaltyKind::kNone, 0.0, std::nullopt, 0.0, false},
      {"joint_loss_no_penalty", PenaltyKind::kNone, 0.0, std::nullopt, 0.0, false},
      {"joint_loss_cosine_diversity", PenaltyKind::kCosineDiversity, 1.0, std::nullopt, 0.0, false},
      {"joint_loss_symkl_cooperation", PenaltyKind::kSymKLCooperation, 10.0, std::nullopt, 0.0, false},
      {"joint_loss_l2_diversity", PenaltyKind::kL2Diversity, 1.0, std::nullopt, 0.0, false},
      {"joint_loss_l2_cooperation", PenaltyKind::kL2Cooperation, 1.0, std::nullopt, 0.0, false},
      {"joint_loss_negcos_cooperation", PenaltyKind::kNegCosCooperation, 1.0, std::nullopt, 0.0, false},
      {"joint_loss_temperature_probe", PenaltyKind::kSymKLCooperation, 10.0, 4.0, 0.0, false},
      {"joint_loss_robust_views_dropout", PenaltyKind::kSymKLCooperation, 10.0, std::nullopt, 0.1, true},
  };
  for (const auto& v : variants) {
    TrainConfig cfg;
    cfg.gamma = v.gamma;
    cfg.penalty = v.kind;
    cfg.penalty_options.temperature_probe = v.probe;
    EnsembleParams e = ens;
    if (v.name == "joint_loss_single_member") {
      e.members.resize(1);
      e.member_seeds.resize(1);
    }
    for (auto& m : e.members) m.arch.dropout = v.dropout;
    const Mode mode = v.dropout > 0.0 ? Mode::kTrain : Mode::kEval;
    auto loss = [&](Tape& t, std::vector<BackboneVars>& vars) {
      std::vector<Var> views;
      std::vector<Rng> streams;
      for (std::size_t j = 0; j < vars.size(); ++j) {
        views.push_back(t.constant(v.two_views && j == 1 ? view_b : view_a));
        streams.emplace_back(1000 + j);
      }
      std::vector<Rng*> ptrs;
      for (auto& s : streams) ptrs.push_back(&s);
      return joint_loss(vars, views, labels, cfg, mode, ptrs).total;
    };
    results.push_back(make_result(v.name, check_ensemble_loss(e, loss, options.step), options.tolerance));
  }

  // Distillation objective on logits and through a student backbone.
  Rng drng = Rng::stream(options.seed, "gradcheck-distill");
  const Tensor targets = random_simplex(3, 4, drng);
  const std::vector<std::optional<std::size_t>> dlabels{0, std::nullopt, 3};
  for (bool flipped : {false, true}) {
    DistillConfig dc;
    dc.flipped_soft_sign = flipped;
    double worst = 0.0;
    for (std::size_t i = 0; i < options.points; ++i) {
      Rng rng = Rng::stream(options.seed, "gradcheck-distill-point", {i});
      worst = std::max(worst, grad_check([&](Tape&, Var z) { return distill_loss(z, dlabels, &targets, dc); },
                                         random_tensor({3, 4}, rng, -3.0, 3.0), options.step));
    }
    results.push_back(make_result(flipped ? "distill_loss_flipped_sign" : "distill_loss", worst, options.tolerance));
  }
  {
    BackboneArch sarch;
    sarch.n_classes = 4;
    sarch.dropout = 0.0;
    const EnsembleParams student = init_ensemble({21}, sarch);
    const Tensor images = random_tensor({3, 1, 8, 8}, drng);
    DistillConfig dc;
    auto loss = [&](Tape& t, std::vector<BackboneVars>& vars) {
      const ForwardVars fw = forward(vars[0], t.constant(images), Mode::kEval, nullptr);
      Var l = distill_loss(fw.logits, dlabels, &targets, dc);
      std::optional<Var> norm;
      for (Var p : vars[0].params) norm = norm ? add(*norm, l2_norm_squared(p)) : l2_norm_squared(p);
      return add(l, scale(*norm, dc.weight_decay));
    };
    results.push_back(make_result("distill_student_backbone", check_ensemble_loss(student, loss, options.step),
                                  options.tolerance));
  }
  return results;
}

bool all_passed(const std::vector<GradCheckResult>& results) {
  return std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
}

}  // namespace fsens
