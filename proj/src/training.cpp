#include "fsens/training.hpp"

#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>

#include "fsens/errors.hpp"
#include "fsens/keyvalue.hpp"
#include "fsens/ops.hpp"

namespace fsens {

namespace {

constexpr double kImprovement = 1e-6;

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string join(const std::vector<double>& values) {
  std::string s;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) s += ',';
    s += fmt(values[i]);
  }
  return s;
}

std::vector<double> split_doubles(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "nan") {
      out.push_back(std::numeric_limits<double>::quiet_NaN());
    } else if (!item.empty()) {
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (ec != std::errc() || ptr != item.data() + item.size()) {
        throw FormatError("training log: bad number '" + item + "'");
      }
      out.push_back(v);
    }
  }
  return out;
}

void check_finite(const EnsembleParams& ensemble, StepIndex index) {
  for (std::size_t m = 0; m < ensemble.size(); ++m) {
    if (!ensemble.members[m].all_finite()) {
      throw NumericError("non-finite parameters in member " + std::to_string(m) + " after epoch " +
                         std::to_string(index.epoch) + " step " + std::to_string(index.step));
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (k_members < 1) throw ParameterError("train: k_members must be >= 1");
  if (!member_seeds.empty() && member_seeds.size() != k_members) {
    throw ParameterError("train: " + std::to_string(member_seeds.size()) + " member seeds for k_members=" +
                         std::to_string(k_members));
  }
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ParameterError("train: lr must be positive");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ParameterError("train: weight_decay must be >= 0");
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ParameterError("train: gamma must be >= 0");
  if (batch_size < 1) throw ParameterError("train: batch_size must be >= 1");
  if (patience < 1) throw ParameterError("train: patience must be >= 1");
  if (!(lr_drop_factor >= 1.0)) throw ParameterError("train: lr_drop_factor must be >= 1");
  if (!(member_drop_prob >= 0.0 && member_drop_prob < 1.0)) {
    throw ParameterError("train: member_drop_prob must be in [0, 1)");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ParameterError("train: dropout must be in [0, 1)");
  if (width < 1) throw ParameterError("train: width must be >= 1");
  if (penalty_options.temperature_probe && !(*penalty_options.temperature_probe > 0.0)) {
    throw ParameterError("train: temperature probe must be positive");
  }
  augment.validate();
  if (val_episodes > 0 && (val_way < 2 || val_shot < 1 || val_query < 1)) {
    throw ParameterError("train: validation episodes need way >= 2, shot >= 1, query >= 1");
  }
}

std::vector<std::uint64_t> TrainConfig::resolved_member_seeds() const {
  if (!member_seeds.empty()) return member_seeds;
  std::vector<std::uint64_t> seeds;
  for (std::size_t j = 0; j < k_members; ++j) seeds.push_back(derive_seed(master_seed, "member", {j}));
  return seeds;
}

TrainConfig strategy_preset(const std::string& name, TrainConfig base) {
  base.strategy = name;
  base.member_drop_prob = 0.0;
  base.dropout = 0.0;
  base.per_member_augmentation = false;
  if (name == "independent") {
    base.penalty = PenaltyKind::kNone;
    base.gamma = 0.0;
  } else if (name == "diversity") {
    base.penalty = PenaltyKind::kCosineDiversity;
    base.gamma = 1.0;
  } else if (name == "cooperation") {
    base.penalty = PenaltyKind::kSymKLCooperation;
    base.gamma = 10.0;
  } else if (name == "robust") {
    base.penalty = PenaltyKind::kSymKLCooperation;
    base.gamma = 10.0;
    base.member_drop_prob = 0.2;
    base.dropout = 0.1;
    base.per_member_augmentation = true;
  } else {
    throw ParameterError("unknown strategy '" + name + "' (expected independent, diversity, cooperation or robust)");
  }
  return base;
}

OptimizerState OptimizerState::for_ensemble(const EnsembleParams& ensemble) {
  OptimizerState s;
  for (const auto& m : ensemble.members) {
    Moments mo;
    for (const auto* t : m.tensors()) {
      mo.first.emplace_back(t->numel(), 0.0);
      mo.second.emplace_back(t->numel(), 0.0);
    }
    s.members.push_back(std::move(mo));
  }
  return s;
}

LossTerms joint_loss(std::span<const BackboneVars> members, std::span<const Var> views,
                     std::span<const std::size_t> labels, const TrainConfig& config, Mode mode,
                     std::span<Rng*> dropout_rngs) {
  const std::size_t k = members.size();
  if (k < 1) throw ParameterError("joint_loss: no members");
  if (views.size() != k) {
    throw ParameterError("joint_loss: " + std::to_string(views.size()) + " views for " + std::to_string(k) +
                         " members");
  }
  if (!dropout_rngs.empty() && dropout_rngs.size() != k) {
    throw ParameterError("joint_loss: dropout stream count does not match members");
  }
  Tape& tape = *views[0].tape;
  LossTerms terms;
  std::vector<Var> logits;
  std::optional<Var> total;
  for (std::size_t j = 0; j < k; ++j) {
    Rng* rng = dropout_rngs.empty() ? nullptr : dropout_rngs[j];
    const ForwardVars fw = forward(members[j], views[j], mode, rng);
    const std::size_t d = members[j].arch.n_classes;
    Var target = tape.constant(one_hot(labels, d));
    Var ce = cross_entropy(target, softmax_temp(fw.logits, 1.0));
    Var member_loss = ce;
    if (config.weight_decay > 0.0) {
      std::optional<Var> norm;
      for (Var p : members[j].params) {
        Var sq = l2_norm_squared(p);
        norm = norm ? add(*norm, sq) : sq;
      }
      member_loss = add(ce, scale(*norm, config.weight_decay));
    }
    terms.member_ce.push_back(ce);
    logits.push_back(fw.logits);
    total = total ? add(*total, member_loss) : member_loss;
  }
  if (k >= 2 && config.gamma > 0.0 && config.penalty != PenaltyKind::kNone) {
    Var p = scale(pairwise_penalty(logits, labels, config.penalty, config.penalty_options), config.gamma);
    terms.penalty = p;
    total = add(*total, p);
  }
  terms.total = *total;
  return terms;
}

JointLossValue joint_loss(const EnsembleParams& ensemble, std::span<const Tensor> views,
                          std::span<const std::size_t> labels, const TrainConfig& config) {
  Tape tape;
  std::vector<BackboneVars> members;
  std::vector<Var> view_vars;
  for (std::size_t j = 0; j < ensemble.size(); ++j) {
    members.push_back(bind_params(tape, ensemble.members[j], false));
  }
  for (const auto& v : views) view_vars.push_back(tape.constant(v));
  const LossTerms t = joint_loss(members, view_vars, labels, config, Mode::kEval, {});
  JointLossValue out;
  out.total = t.total.value().item();
  for (Var ce : t.member_ce) out.member_ce.push_back(ce.value().item());
  if (t.penalty) out.penalty = t.penalty->value().item();
  return out;
}

void adam_update(BackboneParams& params, OptimizerState::Moments& moments, const BackboneVars& vars, double lr,
                 double beta1, double beta2, double epsilon) {
  ++moments.step;
  const double t = static_cast<double>(moments.step);
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  auto tensors = params.tensors();
  for (std::size_t i = 0; i < BackboneParams::kTensorCount; ++i) {
    const auto g = vars.params[i].grad();
    auto& m = moments.first[i];
    auto& v = moments.second[i];
    auto& w = tensors[i]->data;
    for (std::size_t e = 0; e < w.size(); ++e) {
      const double ge = g.empty() ? 0.0 : g[e];
      m[e] = beta1 * m[e] + (1.0 - beta1) * ge;
      v[e] = beta2 * v[e] + (1.0 - beta2) * ge * ge;
      const double mhat = m[e] / c1;
      const double vhat = v[e] / c2;
      w[e] -= lr * mhat / (std::sqrt(vhat) + epsilon);
    }
  }
}

std::vector<bool> sample_member_mask(std::size_t k, double drop_prob, Rng& rng) {
  std::vector<bool> mask(k, true);
  if (drop_prob <= 0.0) return mask;
  for (;;) {
    bool any = false;
    for (std::size_t j = 0; j < k; ++j) {
      mask[j] = !rng.bernoulli(drop_prob);
      any = any || mask[j];
    }
    if (any) return mask;
  }
}

StepMetrics train_step(EnsembleParams& ensemble, OptimizerState& state, const Dataset& dataset,
                       const LabeledSubset& subset, const BatchPlan& plan, const TrainConfig& config, StepIndex index,
                       double lr) {
  const std::size_t k = ensemble.size();
  const std::vector<std::uint64_t>& seeds = ensemble.member_seeds;
  StepMetrics metrics;
  if (config.member_drop_prob > 0.0) {
    Rng mask_rng = Rng::stream(config.master_seed, "member-drop", {index.epoch, index.step});
    metrics.included = sample_member_mask(k, config.member_drop_prob, mask_rng);
  } else {
    metrics.included.assign(k, true);
  }
  std::vector<std::size_t> active;
  for (std::size_t j = 0; j < k; ++j)
    if (metrics.included[j]) active.push_back(j);

  std::vector<Batch> views;
  if (config.per_member_augmentation) {
    for (auto j : active) {
      Rng aug = Rng::stream(seeds[j], "augment", {index.epoch, index.step});
      views.push_back(materialize_batch(dataset, subset, plan, config.augment, aug));
    }
  } else {
    Rng aug = Rng::stream(config.master_seed, "augment", {index.epoch, index.step});
    views.push_back(materialize_batch(dataset, subset, plan, config.augment, aug));
  }

  Tape tape;
  std::vector<BackboneVars> vars;
  std::vector<Var> view_vars;
  std::vector<Rng> dropout_streams;
  dropout_streams.reserve(active.size());
  std::vector<Rng*> dropout_ptrs;
  for (std::size_t a = 0; a < active.size(); ++a) {
    const std::size_t j = active[a];
    vars.push_back(bind_params(tape, ensemble.members[j], true));
    view_vars.push_back(tape.constant(views[config.per_member_augmentation ? a : 0].images));
    dropout_streams.push_back(Rng::stream(seeds[j], "dropout", {index.epoch, index.step}));
  }
  for (auto& r : dropout_streams) dropout_ptrs.push_back(&r);

  const LossTerms terms = joint_loss(vars, view_vars, views.front().labels, config, Mode::kTrain, dropout_ptrs);
  metrics.loss = terms.total.value().item();
  if (!std::isfinite(metrics.loss)) {
    throw NumericError("non-finite loss at epoch " + std::to_string(index.epoch) + " step " +
                       std::to_string(index.step));
  }
  metrics.penalty = terms.penalty ? terms.penalty->value().item() : 0.0;
  metrics.member_ce.assign(k, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t a = 0; a < active.size(); ++a) metrics.member_ce[active[a]] = terms.member_ce[a].value().item();

  tape.backward(terms.total);
  for (std::size_t a = 0; a < active.size(); ++a) {
    const std::size_t j = active[a];
    adam_update(ensemble.members[j], state.members[j], vars[a], lr, state.beta1, state.beta2, state.epsilon);
  }
  check_finite(ensemble, index);
  return metrics;
}

SchedulerAction plateau_scheduler(std::span<const double> history, std::size_t patience,
                                  std::optional<std::size_t> drop_epoch) {
  if (history.empty()) throw ParameterError("plateau_scheduler: empty history");
  if (patience < 1) throw ParameterError("plateau_scheduler: patience must be >= 1");
  std::size_t best_idx = 0;
  double best = history[0];
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i] > best + kImprovement) {
      best = history[i];
      best_idx = i;
    }
  }
  const std::size_t last = history.size() - 1;
  const std::size_t anchor = drop_epoch ? std::max(best_idx, *drop_epoch) : best_idx;
  if (last - anchor < patience) return SchedulerAction::kContinue;
  return drop_epoch ? SchedulerAction::kStop : SchedulerAction::kDropLr;
}

std::string format_log(const TrainingLog& log) {
  std::ostringstream os;
  os << "# epoch\tmember_ce\tpenalty\tval_acc\tmember_val_acc\tlr\n";
  for (const auto& e : log.epochs) {
    os << e.epoch << '\t' << join(e.member_ce) << '\t' << fmt(e.penalty) << '\t' << fmt(e.val_accuracy) << '\t'
       << join(e.member_val_accuracy) << '\t' << fmt(e.lr) << '\n';
  }
  return os.str();
}

TrainingLog parse_log(const std::string& text) {
  TrainingLog log;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() != 6) {
      throw FormatError("training log line " + std::to_string(lineno) + ": expected 6 columns, got " +
                        std::to_string(cols.size()));
    }
    EpochRecord r;
    r.epoch = parse_u64("epoch", cols[0]);
    r.member_ce = split_doubles(cols[1]);
    r.penalty = parse_double("penalty", cols[2]);
    r.val_accuracy = parse_double("val_acc", cols[3]);
    r.member_val_accuracy = split_doubles(cols[4]);
    r.lr = parse_double("lr", cols[5]);
    log.epochs.push_back(std::move(r));
  }
  return log;
}

Validation validate_on_episodes(const EnsembleParams& ensemble, const Dataset& dataset, const ClassPool& pool,
                                std::span<const Episode> episodes, std::size_t threads) {
  Validation v;
  v.member_accuracy.assign(ensemble.size(), 0.0);
  if (episodes.empty()) return v;
  const FeatureBank bank = compute_feature_bank(ensemble, dataset, pool, threads);
  const EvalConfig cfg;
  for (const auto& ep : episodes) {
    const EpisodeOutcome o = score_episode(bank, ep, cfg);
    v.ensemble_accuracy += o.accuracy;
    for (std::size_t m = 0; m < o.member_accuracy.size(); ++m) v.member_accuracy[m] += o.member_accuracy[m];
  }
  const double n = static_cast<double>(episodes.size());
  v.ensemble_accuracy /= n;
  for (auto& a : v.member_accuracy) a /= n;
  return v;
}

TrainResult train_ensemble(const Dataset& dataset, const ClassSplit& split, const TrainConfig& config) {
  config.validate();
  split.validate(dataset.n_classes);
  const LabeledSubset subset = select_classes(dataset, split.train_classes);
  if (subset.indices.empty()) throw StateError("train: no samples in the training classes");

  BackboneArch arch;
  arch.in_channels = dataset.channels;
  arch.n_classes = split.train_classes.size();
  arch.width = config.width;
  arch.dropout = config.dropout;

  TrainResult result;
  result.ensemble = init_ensemble(config.resolved_member_seeds(), arch, config.strategy);
  if (config.max_epochs == 0) return result;

  const bool validating = config.val_episodes > 0;
  const ClassPool val_pool = build_class_pool(dataset, split.val_classes);
  auto draw_episodes = [&](std::uint64_t epoch) {
    std::vector<Episode> eps;
    for (std::size_t i = 0; i < config.val_episodes; ++i) {
      Rng rng = config.resample_val_episodes ? Rng::stream(config.master_seed, "val-episode", {epoch, i})
                                             : Rng::stream(config.master_seed, "val-episode", {i});
      eps.push_back(sample_episode(val_pool, config.val_way, config.val_shot, config.val_query, rng));
    }
    return eps;
  };
  std::vector<Episode> bank;
  if (validating && !config.resample_val_episodes) bank = draw_episodes(0);

  EnsembleParams working = result.ensemble;
  OptimizerState state = OptimizerState::for_ensemble(working);
  const std::size_t k = working.size();
  double lr = config.lr;
  double best_acc = -std::numeric_limits<double>::infinity();
  std::vector<double> history;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    Rng order = Rng::stream(config.master_seed, "data-order", {epoch});
    std::vector<BatchPlan> plans = make_batches(subset.indices.size(), config.batch_size, order);
    if (config.max_steps_per_epoch > 0 && plans.size() > config.max_steps_per_epoch) {
      plans.resize(config.max_steps_per_epoch);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    std::vector<double> ce_sum(k, 0.0), ce_count(k, 0.0);
    double penalty_sum = 0.0;
    for (std::size_t s = 0; s < plans.size(); ++s) {
      const StepMetrics m = train_step(working, state, dataset, subset, plans[s], config, {epoch, s}, lr);
      for (std::size_t j = 0; j < k; ++j) {
        if (!m.included[j]) continue;
        ce_sum[j] += m.member_ce[j];
        ce_count[j] += 1.0;
      }
      penalty_sum += m.penalty;
    }
    for (std::size_t j = 0; j < k; ++j) {
      rec.member_ce.push_back(ce_count[j] > 0.0 ? ce_sum[j] / ce_count[j] : std::numeric_limits<double>::quiet_NaN());
    }
    rec.penalty = penalty_sum / static_cast<double>(plans.size());

    if (!validating) {
      rec.member_val_accuracy.assign(k, 0.0);
      result.log.epochs.push_back(rec);
      result.ensemble = working;
      result.log.best_epoch = epoch;
      continue;
    }
    if (config.resample_val_episodes) bank = draw_episodes(epoch);
    const Validation v = validate_on_episodes(working, dataset, val_pool, bank, config.threads);
    rec.val_accuracy = v.ensemble_accuracy;
    rec.member_val_accuracy = v.member_accuracy;
    result.log.epochs.push_back(rec);
    history.push_back(v.ensemble_accuracy);
    if (!config.select_best || v.ensemble_accuracy > best_acc + kImprovement) {
      if (v.ensemble_accuracy > best_acc + kImprovement) best_acc = v.ensemble_accuracy;
      result.ensemble = working;
      result.log.best_epoch = epoch;
    }
    const SchedulerAction action = plateau_scheduler(
        history, config.patience,
        result.log.lr_drop_epoch ? std::optional<std::size_t>(*result.log.lr_drop_epoch - 1) : std::nullopt);
    if (action == SchedulerAction::kDropLr) {
      lr /= config.lr_drop_factor;
      result.log.lr_drop_epoch = epoch;
    } else if (action == SchedulerAction::kStop) {
      result.log.stopped_early = true;
      break;
    }
  }
  return result;
}

}  // namespace fsens
