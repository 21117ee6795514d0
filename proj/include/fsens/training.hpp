#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fsens/autodiff.hpp"
#include "fsens/data.hpp"
#include "fsens/episodic.hpp"
#include "fsens/models.hpp"
#include "fsens/penalties.hpp"

namespace fsens {

struct TrainConfig {
  std::size_t k_members = 1;
  // Explicit member seeds; derived from master_seed when empty.
  std::vector<std::uint64_t> member_seeds;
  double lr = 1e-4;
  double weight_decay = 5e-4;
  double gamma = 0.0;
  PenaltyKind penalty = PenaltyKind::kNone;
  PenaltyOptions penalty_options;
  std::size_t batch_size = 16;
  std::size_t patience = 10;
  double lr_drop_factor = 10.0;
  std::size_t max_epochs = 60;
  // 0 means a full pass over the training classes.
  std::size_t max_steps_per_epoch = 0;
  // Robust-ensemble randomisation; the "robust" preset sets 0.2, 0.1, true.
  double member_drop_prob = 0.0;
  double dropout = 0.0;
  bool per_member_augmentation = false;
  AugmentPolicy augment;
  std::size_t width = 1;
  std::uint64_t master_seed = 1;
  std::string strategy = "independent";

  std::size_t val_episodes = 200;
  std::size_t val_way = 5;
  std::size_t val_shot = 5;
  std::size_t val_query = 15;
  // Draw fresh validation episodes every epoch instead of a fixed bank.
  bool resample_val_episodes = false;
  // Return the best-validation parameters; otherwise the last epoch's.
  bool select_best = true;
  std::size_t threads = 1;

  void validate() const;
  std::vector<std::uint64_t> resolved_member_seeds() const;
};

// Named presets: independent, diversity, cooperation, robust.
TrainConfig strategy_preset(const std::string& name, TrainConfig base = {});

/// Adam moments for one ensemble. Each member counts its own updates.
struct OptimizerState {
  struct Moments {
    std::vector<std::vector<double>> first;
    std::vector<std::vector<double>> second;
    std::uint64_t step = 0;
  };
  std::vector<Moments> members;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static OptimizerState for_ensemble(const EnsembleParams& ensemble);
};

struct LossTerms {
  Var total;
  std::vector<Var> member_ce;
  std::optional<Var> penalty;  // gamma-weighted, present when applied
};

// Joint objective on one tape: sum over members of (mean CE + weight_decay *
// squared parameter norm) plus gamma * pairwise_penalty over all given members.
// `views[j]` is member j's input batch.
LossTerms joint_loss(std::span<const BackboneVars> members, std::span<const Var> views,
                     std::span<const std::size_t> labels, const TrainConfig& config, Mode mode,
                     std::span<Rng*> dropout_rngs);

// Value-only convenience returning the loss and per-member CE values.
struct JointLossValue {
  double total = 0.0;
  std::vector<double> member_ce;
  double penalty = 0.0;
};
JointLossValue joint_loss(const EnsembleParams& ensemble, std::span<const Tensor> views,
                          std::span<const std::size_t> labels, const TrainConfig& config);

void adam_update(BackboneParams& params, OptimizerState::Moments& moments, const BackboneVars& vars, double lr,
                 double beta1, double beta2, double epsilon);

struct StepIndex {
  std::uint64_t epoch = 0;
  std::uint64_t step = 0;
};

struct StepMetrics {
  double loss = 0.0;
  double penalty = 0.0;
  std::vector<bool> included;
  std::vector<double> member_ce;  // NaN for members left out of the step
};

// Membership mask for one step: each member kept with probability
// 1 - drop_prob, redrawn until at least one member is kept.
std::vector<bool> sample_member_mask(std::size_t k, double drop_prob, Rng& rng);

StepMetrics train_step(EnsembleParams& ensemble, OptimizerState& state, const Dataset& dataset,
                       const LabeledSubset& subset, const BatchPlan& plan, const TrainConfig& config, StepIndex index,
                       double lr);

enum class SchedulerAction { kContinue, kDropLr, kStop };

// Decision after the last epoch of `history`. An epoch improves when it beats
// the running best by more than 1e-6. A run of `patience` epochs without
// improvement (counted from the last improvement or the drop, whichever is
// later) drops the rate the first time and stops the second time.
SchedulerAction plateau_scheduler(std::span<const double> history, std::size_t patience,
                                  std::optional<std::size_t> drop_epoch);

struct EpochRecord {
  std::size_t epoch = 0;
  std::vector<double> member_ce;
  double penalty = 0.0;
  double val_accuracy = 0.0;
  std::vector<double> member_val_accuracy;
  double lr = 0.0;
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  std::optional<std::size_t> lr_drop_epoch;
  bool stopped_early = false;
};

// Tab-separated, one header line starting with '#', then one line per epoch:
// epoch, member_ce (comma list), penalty, val_acc, member_val_acc (comma list), lr.
std::string format_log(const TrainingLog& log);
TrainingLog parse_log(const std::string& text);

struct TrainResult {
  EnsembleParams ensemble;
  TrainingLog log;
};

// Validation accuracy of every member and of the averaged ensemble on a set
// of episodes.
struct Validation {
  double ensemble_accuracy = 0.0;
  std::vector<double> member_accuracy;
};
Validation validate_on_episodes(const EnsembleParams& ensemble, const Dataset& dataset, const ClassPool& pool,
                                std::span<const Episode> episodes, std::size_t threads = 1);

// Trains on the train classes as a standard classification problem,
// validates every epoch on episodes from the validation classes, and returns
// the parameters of the best validation epoch.
TrainResult train_ensemble(const Dataset& dataset, const ClassSplit& split, const TrainConfig& config);

}  // namespace fsens
