#include "fsens/distill.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "fsens/episodic.hpp"
#include "fsens/errors.hpp"
#include "fsens/ops.hpp"

namespace fsens {

void DistillConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ParameterError("distill: temperature must be positive");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("distill: alpha must be in [0, 1]");
  if (!(lr > 0.0)) throw ParameterError("distill: lr must be positive");
  if (!(weight_decay >= 0.0)) throw ParameterError("distill: weight_decay must be >= 0");
  if (batch_size < 1) throw ParameterError("distill: batch_size must be >= 1");
  if (patience < 1) throw ParameterError("distill: patience must be >= 1");
  if (!(lr_drop_factor >= 1.0)) throw ParameterError("distill: lr_drop_factor must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ParameterError("distill: dropout must be in [0, 1)");
  if (width < 1) throw ParameterError("distill: width must be >= 1");
  augment.validate();
}

Tensor teacher_soft_targets(const EnsembleParams& ensemble, const Tensor& images, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("teacher_soft_targets: temperature must be positive");
  ensemble.validate();
  Tensor out;
  for (const auto& member : ensemble.members) {
    Tape tape;
    const ForwardVars fw = forward(bind_params(tape, member, false), tape.constant(images), Mode::kEval, nullptr);
    const Tensor p = softmax_temp(fw.logits, temperature).value();
    if (out.numel() == 0) {
      out = p;
    } else {
      for (std::size_t i = 0; i < p.numel(); ++i) out[i] += p[i];
    }
  }
  const double k = static_cast<double>(ensemble.size());
  for (auto& v : out.data) v /= k;
  return out;
}

Var distill_loss(Var student_logits, std::span<const std::optional<std::size_t>> labels,
                 const Tensor* teacher_targets, const DistillConfig& config, DistillCounters* counters) {
  const Shape shape = student_logits.shape();
  if (shape.size() != 2) throw DimensionError("distill_loss: expected [b x d] logits, got " + shape_string(shape));
  const std::size_t b = shape[0], d = shape[1];
  if (labels.size() != b) {
    throw DimensionError("distill_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(b) + " rows");
  }
  if (teacher_targets != nullptr && teacher_targets->shape != shape) {
    throw DimensionError("distill_loss: teacher targets " + shape_string(teacher_targets->shape) + " vs logits " +
                         shape_string(shape));
  }
  Tape& tape = *student_logits.tape;
  Tensor hard_target({b, d});
  std::size_t labeled = 0;
  for (std::size_t i = 0; i < b; ++i) {
    if (!labels[i]) {
      if (teacher_targets == nullptr) {
        throw ParameterError("distill_loss: row " + std::to_string(i) + " has neither a label nor teacher targets");
      }
      continue;
    }
    if (*labels[i] >= d) throw ParameterError("distill_loss: label out of range");
    hard_target[i * d + *labels[i]] = 1.0;
    ++labeled;
  }
  if (counters != nullptr) {
    counters->hard_rows += labeled;
    for (std::size_t i = 0; i < b; ++i) {
      if (labels[i]) continue;
      for (std::size_t c = 0; c < d; ++c)
        if (hard_target[i * d + c] != 0.0) {
          ++counters->unlabeled_hard;
          break;
        }
    }
  }
  std::optional<Var> loss;
  if (config.alpha < 1.0 && labeled > 0) {
    // Unlabeled rows have all-zero targets and add nothing to the sum.
    Var hard = cross_entropy(tape.constant(std::move(hard_target)), softmax_temp(student_logits, 1.0));
    loss = scale(hard, 1.0 - config.alpha);
  }
  if (teacher_targets != nullptr && config.alpha > 0.0) {
    const double t = config.temperature;
    Var soft = cross_entropy(tape.constant(*teacher_targets), softmax_temp(student_logits, t));
    const double sign = config.flipped_soft_sign ? -1.0 : 1.0;
    Var weighted = scale(soft, sign * config.alpha * t * t);
    loss = loss ? add(*loss, weighted) : weighted;
    if (counters != nullptr) counters->soft_rows += b;
  }
  if (!loss) loss = scale(sum(student_logits), 0.0);
  return *loss;
}

DistillResult distill_train(const EnsembleParams& teacher, const Dataset& dataset, const ClassSplit& split,
                            const Dataset* unlabeled, const DistillConfig& config) {
  config.validate();
  teacher.validate();
  split.validate(dataset.n_classes);
  if (config.unlabeled_per_batch > 0 && (unlabeled == nullptr || unlabeled->empty())) {
    throw ParameterError("distill: unlabeled_per_batch > 0 requires an unlabeled pool");
  }
  if (unlabeled != nullptr && config.unlabeled_per_batch > 0 &&
      (unlabeled->height != dataset.height || unlabeled->width != dataset.width ||
       unlabeled->channels != dataset.channels)) {
    throw DimensionError("distill: unlabeled pool geometry differs from the dataset");
  }
  if (teacher.arch().n_classes != split.train_classes.size()) {
    throw ParameterError("distill: teacher predicts " + std::to_string(teacher.arch().n_classes) +
                         " classes, split has " + std::to_string(split.train_classes.size()) + " train classes");
  }
  const LabeledSubset subset = select_classes(dataset, split.train_classes);

  BackboneArch arch = teacher.arch();
  arch.width = config.width;
  arch.dropout = config.dropout;
  DistillResult result;
  result.student = init_ensemble({derive_seed(config.master_seed, "student")}, arch, "distilled");
  if (config.max_epochs == 0) return result;

  LabeledSubset pool_subset;
  if (config.unlabeled_per_batch > 0) {
    pool_subset.indices.resize(unlabeled->size());
    std::iota(pool_subset.indices.begin(), pool_subset.indices.end(), std::size_t{0});
    pool_subset.labels.assign(unlabeled->size(), 0);
  }

  const bool validating = config.val_episodes > 0;
  const ClassPool val_pool = build_class_pool(dataset, split.val_classes);
  std::vector<Episode> bank;
  for (std::size_t i = 0; validating && i < config.val_episodes; ++i) {
    Rng rng = Rng::stream(config.master_seed, "val-episode", {i});
    bank.push_back(sample_episode(val_pool, config.val_way, config.val_shot, config.val_query, rng));
  }

  EnsembleParams working = result.student;
  OptimizerState state = OptimizerState::for_ensemble(working);
  double lr = config.lr;
  double best_acc = -std::numeric_limits<double>::infinity();
  std::vector<double> history;
  const std::uint64_t student_seed = working.member_seeds.front();

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    Rng order = Rng::stream(config.master_seed, "distill-order", {epoch});
    std::vector<BatchPlan> plans = make_batches(subset.indices.size(), config.batch_size, order);
    if (config.max_steps_per_epoch > 0 && plans.size() > config.max_steps_per_epoch) {
      plans.resize(config.max_steps_per_epoch);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    double hard_sum = 0.0, soft_sum = 0.0;
    for (std::size_t s = 0; s < plans.size(); ++s) {
      Rng aug = Rng::stream(config.master_seed, "distill-augment", {epoch, s});
      Batch batch = materialize_batch(dataset, subset, plans[s], config.augment, aug);
      std::vector<std::optional<std::size_t>> labels(batch.labels.begin(), batch.labels.end());
      Tensor images = batch.images;
      if (config.unlabeled_per_batch > 0) {
        Rng pick = Rng::stream(config.master_seed, "unlabeled", {epoch, s});
        BatchPlan extra;
        for (std::size_t u = 0; u < config.unlabeled_per_batch; ++u) extra.positions.push_back(pick.below(unlabeled->size()));
        const Batch ub = materialize_batch(*unlabeled, pool_subset, extra, config.augment, aug);
        Shape shape = images.shape;
        shape[0] += ub.images.dim(0);
        std::vector<double> joined = std::move(images.data);
        joined.insert(joined.end(), ub.images.data.begin(), ub.images.data.end());
        images = Tensor(shape, std::move(joined));
        labels.resize(shape[0]);
      }
      const Tensor targets = teacher_soft_targets(teacher, images, config.temperature);

      Tape tape;
      const BackboneVars vars = bind_params(tape, working.members.front(), true);
      Rng drop = Rng::stream(student_seed, "dropout", {epoch, s});
      const ForwardVars fw = forward(vars, tape.constant(images), Mode::kTrain, &drop);
      Var loss = distill_loss(fw.logits, labels, &targets, config, &result.counters);
      if (config.weight_decay > 0.0) {
        std::optional<Var> norm;
        for (Var p : vars.params) norm = norm ? add(*norm, l2_norm_squared(p)) : l2_norm_squared(p);
        loss = add(loss, scale(*norm, config.weight_decay));
      }
      if (!std::isfinite(loss.value().item())) {
        throw NumericError("distill: non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(s));
      }
      tape.backward(loss);
      adam_update(working.members.front(), state.members.front(), vars, lr, state.beta1, state.beta2, state.epsilon);
      if (!working.members.front().all_finite()) {
        throw NumericError("distill: non-finite student parameters at epoch " + std::to_string(epoch));
      }

      // Monitoring only: the two terms evaluated separately on the labeled rows.
      Tape mon;
      Var z = mon.constant(fw.logits.value());
      const std::size_t b = batch.labels.size(), d = arch.n_classes;
      Tensor hard_t({images.dim(0), d});
      for (std::size_t i = 0; i < b; ++i) hard_t[i * d + batch.labels[i]] = 1.0;
      hard_sum += cross_entropy(mon.constant(hard_t), softmax_temp(z, 1.0)).value().item() *
                  static_cast<double>(images.dim(0)) / static_cast<double>(b);
      soft_sum += cross_entropy(mon.constant(targets), softmax_temp(z, config.temperature)).value().item();
    }
    const double steps = static_cast<double>(plans.size());
    rec.member_ce = {hard_sum / steps};
    rec.penalty = soft_sum / steps;
    if (!validating) {
      rec.member_val_accuracy = {0.0};
      result.log.epochs.push_back(rec);
      result.student = working;
      result.log.best_epoch = epoch;
      continue;
    }
    const Validation v = validate_on_episodes(working, dataset, val_pool, bank, config.threads);
    rec.val_accuracy = v.ensemble_accuracy;
    rec.member_val_accuracy = v.member_accuracy;
    result.log.epochs.push_back(rec);
    history.push_back(v.ensemble_accuracy);
    if (v.ensemble_accuracy > best_acc + 1e-6) {
      best_acc = v.ensemble_accuracy;
      result.student = working;
      result.log.best_epoch = epoch;
    }
    const SchedulerAction action = plateau_scheduler(
        history, config.effective_patience(),
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
