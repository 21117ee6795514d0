// Runs the acceptance criteria and prints one PASS/FAIL line per criterion.
// Usage: fsens_acceptance [criterion numbers...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fsens/distill.hpp"
#include "fsens/episodic.hpp"
#include "fsens/gradcheck_suite.hpp"
#include "fsens/ops.hpp"
#include "fsens/penalties.hpp"
#include "fsens/runtime.hpp"
#include "fsens/training.hpp"

using namespace fsens;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradSeconds = 120.0;
constexpr double kCondSumTolerance = 1e-9;
constexpr double kOracleTolerance = 1e-12;
constexpr double kStatsTolerance = 1e-12;
constexpr std::size_t kDirectionSeeds = 5;
constexpr std::size_t kDirectionNeeded = 4;
constexpr double kTrendSeconds = 7200.0;
constexpr double kDistillGap = 2.0;
constexpr double kUnlabeledSlack = 0.5;
constexpr std::size_t kEpisodes = 1000;
constexpr std::uint64_t kEvalSeed = 2024;

// Training recipe shared by the measured criteria.
constexpr double kRecipeLr = 3e-3;
constexpr std::size_t kRecipePatience = 10;
constexpr std::size_t kRecipeEpochs = 60;
constexpr std::size_t kDirectionPatience = 5;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void note(const std::string& s) { std::fprintf(stderr, "  %s\n", s.c_str()); }

std::string fmt(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---- shared corpora and models ------------------------------------------------

struct Lab {
  Dataset main;
  ClassSplit split;
  Dataset pool;
  std::map<std::size_t, EnsembleParams> robust;
  std::map<std::size_t, EvalReport> robust_reports;

  Lab() : main(synth_generate(1, 40, 50, 32)), split(default_split(40)), pool(synth_generate(1001, 10, 50, 32)) {}

  TrainConfig recipe() const {
    TrainConfig c;
    c.lr = kRecipeLr;
    c.patience = kRecipePatience;
    c.max_epochs = kRecipeEpochs;
    c.val_episodes = 200;
    c.master_seed = 1;
    return c;
  }

  EvalConfig eval_config() const {
    EvalConfig e;
    e.n_episodes = kEpisodes;
    e.seed = kEvalSeed;
    return e;
  }

  const EnsembleParams& robust_ensemble(std::size_t k) {
    auto it = robust.find(k);
    if (it != robust.end()) return it->second;
    TrainConfig c = strategy_preset("robust", recipe());
    c.k_members = k;
    const auto t0 = Clock::now();
    TrainResult r = train_ensemble(main, split, c);
    note("robust K=" + std::to_string(k) + ": " + std::to_string(r.log.epochs.size()) + " epochs, best " +
         std::to_string(r.log.best_epoch) + ", " + fmt(seconds_since(t0), 1) + " s");
    return robust.emplace(k, std::move(r.ensemble)).first->second;
  }

  const EvalReport& robust_report(std::size_t k) {
    auto it = robust_reports.find(k);
    if (it != robust_reports.end()) return it->second;
    EvalReport r = evaluate(robust_ensemble(k), main, split.test_classes, eval_config());
    return robust_reports.emplace(k, std::move(r)).first->second;
  }
};

Lab& lab() {
  static Lab l;
  return l;
}

// ---- 1 -------------------------------------------------------------------------

Outcome gradient_integrity() {
  const auto t0 = Clock::now();
  const auto results = run_gradcheck_suite(GradCheckOptions{});
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name;
  bool ok = !results.empty();
  std::set<std::string> names;
  for (const auto& r : results) {
    names.insert(r.name);
    ok = ok && r.passed && r.max_error < kGradTolerance;
    if (r.max_error >= worst) {
      worst = r.max_error;
      worst_name = r.name;
    }
  }
  for (const char* required : {"joint_loss_cosine_diversity", "joint_loss_symkl_cooperation",
                                "joint_loss_l2_diversity", "joint_loss_l2_cooperation",
                                "joint_loss_negcos_cooperation", "distill_loss"}) {
    const bool found = std::any_of(names.begin(), names.end(),
                                   [&](const std::string& n) { return n.find(required) != std::string::npos; });
    if (!found) {
      ok = false;
      note(std::string("missing composite check: ") + required);
    }
  }
  ok = ok && secs < kGradSeconds;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", worst);
  return {ok, std::to_string(results.size()) + " checks, max error " + buf + " (" + worst_name + "), " +
                  fmt(secs, 1) + " s"};
}

// ---- 2 -------------------------------------------------------------------------

// Plain single-network loop built from the model, loss and optimizer pieces.
BackboneParams train_single_reference(const Dataset& data, const ClassSplit& split, const TrainConfig& c) {
  const LabeledSubset subset = select_classes(data, split.train_classes);
  BackboneArch arch;
  arch.in_channels = data.channels;
  arch.n_classes = split.train_classes.size();
  arch.width = c.width;
  arch.dropout = c.dropout;
  const std::uint64_t seed = c.resolved_member_seeds().front();
  BackboneParams params = init_backbone(seed, arch);
  OptimizerState::Moments moments;
  for (const Tensor* t : params.tensors()) {
    moments.first.emplace_back(t->numel(), 0.0);
    moments.second.emplace_back(t->numel(), 0.0);
  }
  for (std::uint64_t epoch = 1; epoch <= c.max_epochs; ++epoch) {
    Rng order = Rng::stream(c.master_seed, "data-order", {epoch});
    auto plans = make_batches(subset.indices.size(), c.batch_size, order);
    if (c.max_steps_per_epoch > 0 && plans.size() > c.max_steps_per_epoch) plans.resize(c.max_steps_per_epoch);
    for (std::uint64_t s = 0; s < plans.size(); ++s) {
      Rng aug = Rng::stream(c.master_seed, "augment", {epoch, s});
      const Batch batch = materialize_batch(data, subset, plans[s], c.augment, aug);
      Tape tape;
      const BackboneVars vars = bind_params(tape, params, true);
      Rng drop = Rng::stream(seed, "dropout", {epoch, s});
      const ForwardVars fw = forward(vars, tape.constant(batch.images), Mode::kTrain, &drop);
      Var loss = cross_entropy(tape.constant(one_hot(batch.labels, arch.n_classes)), softmax_temp(fw.logits, 1.0));
      std::optional<Var> norm;
      for (Var p : vars.params) norm = norm ? add(*norm, l2_norm_squared(p)) : l2_norm_squared(p);
      loss = add(loss, scale(*norm, c.weight_decay));
      tape.backward(loss);
      adam_update(params, moments, vars, c.lr, 0.9, 0.999, 1e-8);
    }
  }
  return params;
}

bool params_bit_equal(const BackboneParams& a, const BackboneParams& b) {
  for (std::size_t i = 0; i < BackboneParams::kTensorCount; ++i)
    if (!bit_equal(*a.tensors()[i], *b.tensors()[i])) return false;
  return true;
}

Outcome degenerate_equivalence() {
  const Dataset data = synth_generate(7, 40, 30, 16);
  const ClassSplit split = default_split(40);
  TrainConfig c;
  c.lr = kRecipeLr;
  c.max_epochs = 3;
  c.val_episodes = 0;
  c.master_seed = 5;

  TrainConfig single = c;
  single.k_members = 1;
  const TrainResult joint1 = train_ensemble(data, split, single);
  const bool k1 = params_bit_equal(joint1.ensemble.members[0], train_single_reference(data, split, single));

  TrainConfig three = c;
  three.k_members = 3;
  three.val_episodes = 50;
  three.select_best = false;
  three.patience = 100;
  const TrainResult joint3 = train_ensemble(data, split, three);
  const auto seeds = three.resolved_member_seeds();
  std::size_t matched = 0;
  bool logs = true;
  for (std::size_t j = 0; j < 3; ++j) {
    TrainConfig one = three;
    one.k_members = 1;
    one.member_seeds = {seeds[j]};
    const TrainResult r = train_ensemble(data, split, one);
    const bool same = params_bit_equal(r.ensemble.members[0], joint3.ensemble.members[j]) &&
                      params_bit_equal(train_single_reference(data, split, one), joint3.ensemble.members[j]);
    matched += same;
    for (std::size_t e = 0; e < r.log.epochs.size(); ++e) {
      logs = logs && r.log.epochs[e].member_ce[0] == joint3.log.epochs[e].member_ce[j] &&
             r.log.epochs[e].val_accuracy == joint3.log.epochs[e].member_val_accuracy[j];
    }
  }
  return {k1 && matched == 3 && logs, std::string("K=1 ") + (k1 ? "bit-identical" : "differs") + ", K=3 " +
                                          std::to_string(matched) + "/3 members bit-identical, logs " +
                                          (logs ? "identical" : "differ")};
}

// ---- 3 -------------------------------------------------------------------------

std::vector<double> draw_simplex(std::size_t d, Rng& rng, double sharpness) {
  std::vector<double> z(d);
  double m = -1e300;
  for (auto& v : z) m = std::max(m, v = sharpness * rng.normal());
  double s = 0.0;
  for (auto& v : z) s += v = std::exp(v - m);
  for (auto& v : z) v /= s;
  return z;
}

Outcome probability_invariants() {
  Rng rng(303);
  std::size_t bad_cond = 0, bad_symkl = 0, bad_cos = 0;
  double worst_sum = 0.0, min_rest = 1.0;
  for (std::size_t i = 0; i < 10000; ++i) {
    const std::size_t d = 2 + rng.below(19);
    const double sharp = rng.uniform(0.1, 3.0);
    const ProbVector p{draw_simplex(d, rng, sharp)};
    const ProbVector q{draw_simplex(d, rng, sharp)};
    const std::size_t y = rng.below(d);
    min_rest = std::min(min_rest, 1.0 - p.values[y]);
    const CondProbVector a = condition_non_gt(p, y);
    const CondProbVector b = condition_non_gt(q, y);
    double s = 0.0;
    for (double v : a.values) s += v;
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    if (a.values[y] != 0.0 || std::abs(s - 1.0) > kCondSumTolerance) ++bad_cond;
    const double ab = phi_symkl(a, b), ba = phi_symkl(b, a);
    if (!(ab >= 0.0) || std::abs(ab - ba) > 1e-12 * std::max(1.0, ab)) ++bad_symkl;
    const double c = phi_cosine(a, b);
    if (!(c >= 0.0 && c <= 1.0)) ++bad_cos;
  }

  std::size_t bad_probs = 0;
  double worst_oracle = 0.0;
  for (std::size_t trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(9), d = 2 + rng.below(40), q = 1 + rng.below(10);
    CentroidClassifier clf{Tensor({n, d}), 10.0};
    Tensor queries({q, d});
    for (auto& v : clf.prototypes.data) v = rng.normal();
    for (auto& v : queries.data) v = rng.normal();
    const Tensor probs = classify_probs(clf, queries);
    for (std::size_t r = 0; r < q; ++r) {
      std::vector<double> e(n);
      double total = 0.0, qn = 0.0;
      for (std::size_t c = 0; c < d; ++c) qn += queries[r * d + c] * queries[r * d + c];
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0.0, pn = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          dot += queries[r * d + c] * clf.prototypes[j * d + c];
          pn += clf.prototypes[j * d + c] * clf.prototypes[j * d + c];
        }
        total += e[j] = std::exp(10.0 * dot / std::sqrt(qn * pn));
      }
      for (std::size_t j = 0; j < n; ++j) {
        const double err = std::abs(probs[r * n + j] - e[j] / total);
        worst_oracle = std::max(worst_oracle, err);
        if (err > kOracleTolerance) ++bad_probs;
      }
    }
  }
  char buf[200];
  std::snprintf(buf, sizeof buf,
                "condition_non_gt failures %zu (worst |sum-1| %.1e, min 1-p_y %.1e), symkl %zu, cosine %zu, classify_probs %zu "
                "(worst %.1e)",
                bad_cond, worst_sum, min_rest, bad_symkl, bad_cos, bad_probs, worst_oracle);
  return {bad_cond + bad_symkl + bad_cos + bad_probs == 0, buf};
}

// ---- 4 -------------------------------------------------------------------------

struct HeldOut {
  Dataset train;
  Tensor images;
  std::vector<std::size_t> labels;
};

// Splits every train class into the first `fit` samples and a held-out rest.
HeldOut hold_out(const Dataset& full, const ClassSplit& split, std::size_t fit) {
  HeldOut h;
  h.train = full;
  h.train.samples.clear();
  std::vector<std::size_t> seen(full.n_classes, 0), slot(full.n_classes, SIZE_MAX), held;
  for (std::size_t i = 0; i < split.train_classes.size(); ++i) slot[split.train_classes[i]] = i;
  for (std::size_t i = 0; i < full.size(); ++i) {
    const auto& s = full.samples[i];
    if (slot[s.label] != SIZE_MAX && seen[s.label]++ >= fit) {
      held.push_back(i);
      h.labels.push_back(slot[s.label]);
    } else {
      h.train.samples.push_back(s);
    }
  }
  h.images = stack_plain(full, held);
  return h;
}

PairwiseSimilarity held_out_similarity(const EnsembleParams& e, const HeldOut& h) {
  std::vector<Tensor> logits;
  for (const auto& m : e.members) logits.push_back(forward(m, h.images).logits);
  return measure_pairwise(logits, h.labels);
}

Outcome penalty_direction() {
  const Dataset full = synth_generate(2, 25, 60, 16);
  const ClassSplit split = default_split(25);
  const HeldOut h = hold_out(full, split, 40);
  std::size_t cos_wins = 0, kl_wins = 0;
  std::ostringstream per_seed;
  for (std::size_t s = 0; s < kDirectionSeeds; ++s) {
    TrainConfig base;
    base.lr = kRecipeLr;
    base.patience = kDirectionPatience;
    base.max_epochs = 12;
    base.val_episodes = 50;
    base.k_members = 5;
    base.master_seed = 100 + s;
    TrainConfig div = base, coop = base;
    div.penalty = PenaltyKind::kCosineDiversity;
    div.gamma = 1.0;
    coop.penalty = PenaltyKind::kSymKLCooperation;
    coop.gamma = 10.0;
    const auto b = held_out_similarity(train_ensemble(h.train, split, base).ensemble, h);
    const auto d = held_out_similarity(train_ensemble(h.train, split, div).ensemble, h);
    const auto c = held_out_similarity(train_ensemble(h.train, split, coop).ensemble, h);
    cos_wins += d.mean_cosine < b.mean_cosine;
    kl_wins += c.mean_symkl < b.mean_symkl;
    note("seed " + std::to_string(base.master_seed) + ": cosine " + fmt(b.mean_cosine, 4) + " -> " +
         fmt(d.mean_cosine, 4) + ", symkl " + fmt(b.mean_symkl, 4) + " -> " + fmt(c.mean_symkl, 4));
  }
  return {cos_wins >= kDirectionNeeded && kl_wins >= kDirectionNeeded,
          "cosine lower under diversity in " + std::to_string(cos_wins) + "/5 seeds, sym-KL lower under cooperation in " +
              std::to_string(kl_wins) + "/5 seeds"};
}

// ---- 5 -------------------------------------------------------------------------

Outcome ensemble_gain() {
  const auto t0 = Clock::now();
  const std::vector<std::size_t> ks{1, 2, 3, 5};
  std::vector<const EvalReport*> reports;
  for (auto k : ks) reports.push_back(&lab().robust_report(k));
  const double secs = seconds_since(t0);
  bool monotone = true, gain = true;
  std::ostringstream os;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    const EvalReport& r = *reports[i];
    double member_mean = 0.0;
    for (double a : r.member_mean_accuracies) member_mean += a;
    member_mean /= static_cast<double>(r.member_mean_accuracies.size());
    os << (i ? ", " : "") << "K=" << ks[i] << " " << fmt(r.mean_accuracy) << "+-" << fmt(r.half_ci_95);
    if (ks[i] >= 2) {
      os << " (members " << fmt(member_mean) << ")";
      gain = gain && r.mean_accuracy >= member_mean;
    }
    if (i > 0) monotone = monotone && r.mean_accuracy >= reports[i - 1]->mean_accuracy - reports[i - 1]->half_ci_95;
  }
  os << ", " << fmt(secs, 0) << " s";
  return {monotone && gain && secs < kTrendSeconds, os.str()};
}

// ---- 6 -------------------------------------------------------------------------

Outcome centroid_parity() {
  const EnsembleParams& model = lab().robust_ensemble(1);
  EvalConfig c = lab().eval_config();
  const EvalReport mean = evaluate(model, lab().main, lab().split.test_classes, c);
  c.prototypes = PrototypeMode::kLearned;
  const EvalReport learned = evaluate(model, lab().main, lab().split.test_classes, c);
  const double diff = learned.mean_accuracy - mean.mean_accuracy;
  return {std::abs(diff) <= mean.half_ci_95, "mean " + fmt(mean.mean_accuracy) + "+-" + fmt(mean.half_ci_95) +
                                                 ", learned " + fmt(learned.mean_accuracy) + " (diff " +
                                                 fmt(diff) + ")"};
}

// ---- 7 -------------------------------------------------------------------------

Outcome distillation_gap() {
  const EnsembleParams& teacher = lab().robust_ensemble(5);
  const EvalReport& ens = lab().robust_report(5);
  DistillConfig c;
  c.lr = kRecipeLr;
  c.patience = kRecipePatience;
  c.max_epochs = kRecipeEpochs;
  c.master_seed = 1;
  auto student_accuracy = [&](const Dataset* pool) {
    DistillConfig run = c;
    run.unlabeled_per_batch = pool ? 8 : 0;
    const auto t0 = Clock::now();
    const DistillResult r = distill_train(teacher, lab().main, lab().split, pool, run);
    note(std::string(pool ? "distill++" : "distill") + ": " + std::to_string(r.log.epochs.size()) + " epochs, best " +
         std::to_string(r.log.best_epoch) + ", " + fmt(seconds_since(t0), 1) + " s");
    return evaluate(r.student, lab().main, lab().split.test_classes, lab().eval_config()).mean_accuracy;
  };
  const double plain = student_accuracy(nullptr);
  const double plus = student_accuracy(&lab().pool);
  const double gap = ens.mean_accuracy - plain;
  return {std::abs(gap) <= kDistillGap && plus >= plain - kUnlabeledSlack,
          "ensemble " + fmt(ens.mean_accuracy) + ", student " + fmt(plain) + " (gap " + fmt(gap) + "), student++ " +
              fmt(plus)};
}

// ---- 8 -------------------------------------------------------------------------

bool closed_form_matches(const std::vector<double>& acc, double mean, double half_ci) {
  long double s = 0.0L;
  for (double v : acc) s += v;
  const long double m = s / acc.size();
  long double ss = 0.0L;
  for (double v : acc) ss += (v - m) * (v - m);
  const long double h = 1.96L * std::sqrt(ss / (acc.size() - 1)) / std::sqrt(static_cast<long double>(acc.size()));
  return std::abs(static_cast<double>(m) - mean) <= kStatsTolerance &&
         std::abs(static_cast<double>(h) - half_ci) <= kStatsTolerance;
}

Outcome statistics_correctness() {
  const std::vector<double> pinned{80.0, 73.33333333333333, 86.66666666666667, 60.0, 93.33333333333333,
                                   66.66666666666667, 100.0, 53.333333333333336, 76.0, 84.0};
  const MeanCi mc = mean_and_half_ci(pinned);
  const bool pinned_ok = closed_form_matches(pinned, mc.mean, mc.half_ci);

  const Dataset data = synth_generate(9, 25, 30, 16);
  const ClassSplit split = default_split(25);
  BackboneArch arch;
  arch.n_classes = split.train_classes.size();
  const EnsembleParams e = init_ensemble({1, 2, 3}, arch);
  EvalConfig c;
  c.n_episodes = 300;
  c.seed = kEvalSeed;
  const EvalReport serial = evaluate(e, data, split.test_classes, c);
  c.threads = 4;
  const EvalReport parallel = evaluate(e, data, split.test_classes, c);
  const bool report_ok = closed_form_matches(serial.episode_accuracies, serial.mean_accuracy, serial.half_ci_95);
  const bool same = serial == parallel;
  return {pinned_ok && report_ok && same, std::string("pinned list ") + (pinned_ok ? "matches" : "differs") +
                                              ", evaluate() " + (report_ok ? "matches" : "differs") +
                                              ", 4-thread report " + (same ? "identical" : "differs")};
}

// ---- 9 -------------------------------------------------------------------------

Outcome persistence() {
  const Dataset data = synth_generate(3, 25, 30, 16);
  const ClassSplit split = default_split(25);
  TrainConfig c = strategy_preset("robust");
  c.lr = kRecipeLr;
  c.k_members = 3;
  c.max_epochs = 1;
  c.val_episodes = 20;
  const EnsembleParams e = train_ensemble(data, split, c).ensemble;
  const fs::path path = fs::temp_directory_path() / "fsens_acceptance_roundtrip.fsen";
  save_checkpoint(e, path);
  const EnsembleParams back = load_checkpoint(path);
  bool bits = back.size() == e.size() && back.member_seeds == e.member_seeds && back.strategy == e.strategy;
  for (std::size_t j = 0; bits && j < e.size(); ++j) bits = params_bit_equal(back.members[j], e.members[j]);
  const bool bytes = encode_checkpoint(back) == encode_checkpoint(e);
  EvalConfig ec;
  ec.n_episodes = 200;
  ec.seed = kEvalSeed;
  const bool same_eval = evaluate(back, data, split.test_classes, ec) == evaluate(e, data, split.test_classes, ec);
  fs::remove(path);
  return {bits && bytes && same_eval, std::string("tensors ") + (bits ? "bit-exact" : "differ") + ", re-encoding " +
                                          (bytes ? "identical" : "differs") + ", evaluation " +
                                          (same_eval ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient integrity", gradient_integrity},
      {"degenerate-ensemble equivalence", degenerate_equivalence},
      {"probability-transform invariants", probability_invariants},
      {"penalty direction", penalty_direction},
      {"ensemble-gain trend", ensemble_gain},
      {"centroid parity", centroid_parity},
      {"distillation gap", distillation_gap},
      {"statistics correctness", statistics_correctness},
      {"persistence", persistence},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) {
    const long n = std::strtol(argv[i], nullptr, 10);
    if (n < 1 || n > static_cast<long>(criteria.size())) {
      std::fprintf(stderr, "unknown criterion '%s'\n", argv[i]);
      return 2;
    }
    selected.insert(static_cast<std::size_t>(n));
  }
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s criterion %zu (%s): %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
