#pragma once

#include <cstdint>
#include <optional>
#include <span>

#include "fsens/autodiff.hpp"
#include "fsens/data.hpp"
#include "fsens/models.hpp"
#include "fsens/training.hpp"

namespace fsens {

struct DistillConfig {
  double temperature = 10.0;
  double alpha = 0.8;
  // Unlabeled samples appended to every labeled batch.
  std::size_t unlabeled_per_batch = 0;
  // Subtract the soft term instead of adding it. Only for demonstrating the
  // effect of the flipped sign; training with it pushes the student away
  // from the teacher.
  bool flipped_soft_sign = false;

  double lr = 1e-4;
  double weight_decay = 5e-4;
  std::size_t batch_size = 16;
  // Base patience; the distillation schedule waits twice as long.
  std::size_t patience = 10;
  double lr_drop_factor = 10.0;
  std::size_t max_epochs = 60;
  std::size_t max_steps_per_epoch = 0;
  AugmentPolicy augment;
  std::size_t width = 1;
  double dropout = 0.0;
  std::uint64_t master_seed = 1;

  std::size_t val_episodes = 200;
  std::size_t val_way = 5;
  std::size_t val_shot = 5;
  std::size_t val_query = 15;
  std::size_t threads = 1;

  void validate() const;
  std::size_t effective_patience() const { return 2 * patience; }
};

// Mean over members of softmax(logits / T), eval mode. [b x d].
Tensor teacher_soft_targets(const EnsembleParams& ensemble, const Tensor& images, double temperature);

struct DistillCounters {
  std::size_t hard_rows = 0;       // labeled rows that entered the hard term
  std::size_t soft_rows = 0;       // rows that entered the soft term
  std::size_t unlabeled_hard = 0;  // unlabeled rows with a non-zero hard target; stays 0
};

// Per-batch objective, averaged over all rows:
//   labeled:   (1 - alpha) * CE(one_hot(y), softmax(z)) + alpha * T^2 * CE(t, softmax(z / T))
//   unlabeled: alpha * T^2 * CE(t, softmax(z / T))
// `labels[i]` is empty for unlabeled rows. `teacher_targets` may be null, in
// which case every row must be labeled and only the hard term remains.
Var distill_loss(Var student_logits, std::span<const std::optional<std::size_t>> labels,
                 const Tensor* teacher_targets, const DistillConfig& config, DistillCounters* counters = nullptr);

struct DistillResult {
  EnsembleParams student;  // K = 1
  TrainingLog log;         // member_ce = hard CE, penalty column = soft CE
  DistillCounters counters;
};

// Trains a fresh backbone on the train classes against the ensemble's soft
// targets. `unlabeled` supplies the extra samples when unlabeled_per_batch > 0.
DistillResult distill_train(const EnsembleParams& teacher, const Dataset& dataset, const ClassSplit& split,
                            const Dataset* unlabeled, const DistillConfig& config);

}  // namespace fsens
