#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fsens/data.hpp"
#include "fsens/models.hpp"
#include "fsens/rng.hpp"
#include "fsens/tensor.hpp"

namespace fsens {

/// One N-way k-shot task. Indices point into the dataset; labels are
/// episode-local (0..n_way-1, in the order of `classes`).
struct Episode {
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::size_t q_query = 0;
  std::vector<std::uint32_t> classes;
  std::vector<std::size_t> support;
  std::vector<std::size_t> support_labels;
  std::vector<std::size_t> query;
  std::vector<std::size_t> query_labels;
};

// Sample indices of each class in `classes`, in dataset order.
struct ClassPool {
  std::vector<std::uint32_t> classes;
  std::vector<std::vector<std::size_t>> members;
};

ClassPool build_class_pool(const Dataset& dataset, std::span<const std::uint32_t> classes);

// Uniform choice of n classes, then k + q distinct samples per class.
// Throws ParameterError if the pool cannot supply them.
Episode sample_episode(const ClassPool& pool, std::size_t n_way, std::size_t k_shot, std::size_t q_query,
                       Rng& rng);

/// Prototypes [n x d] compared to queries through scale * cosine.
struct CentroidClassifier {
  Tensor prototypes;
  double scale = 10.0;

  std::size_t n_way() const { return prototypes.dim(0); }
};

// Per-class mean of the support features [m x d].
CentroidClassifier prototypes_mean(const Tensor& support_features, std::span<const std::size_t> labels,
                                   std::size_t n_way);

struct LearnedPrototypeTrace {
  std::vector<double> objective;  // support log-likelihood after each accepted step, starting at step 0
  std::size_t rejected_steps = 0;
};

// Prototypes as weighted sums of all support features, weights initialised to
// the class means and refined by gradient ascent on the support
// log-likelihood. A step that lowers the objective is retried at half size.
CentroidClassifier prototypes_learned(const Tensor& support_features, std::span<const std::size_t> labels,
                                      std::size_t n_way, std::size_t steps = 100, double lr = 0.01,
                                      LearnedPrototypeTrace* trace = nullptr);

// Mean log-probability of the true class of every support sample.
double support_log_likelihood(const CentroidClassifier& classifier, const Tensor& support_features,
                              std::span<const std::size_t> labels);

// Softmax over scale * cos(query, prototype) -> [q x n].
Tensor classify_probs(const CentroidClassifier& classifier, const Tensor& query_features);

// Index of the largest entry of each row; ties go to the lowest index.
std::vector<std::size_t> argmax_rows(const Tensor& probs);

enum class AggregationMode { kAverage, kVote };
std::string_view aggregation_token(AggregationMode mode);
AggregationMode parse_aggregation(std::string_view token);

struct Aggregate {
  std::vector<std::size_t> labels;
  Tensor mean_probs;  // [q x n]
};

// Average mode: argmax of the mean probabilities. Vote mode: most frequent
// member argmax, ties broken by the mean probabilities, then the lowest index.
Aggregate aggregate_ensemble(std::span<const Tensor> member_probs, AggregationMode mode);

enum class PrototypeMode { kMean, kLearned };
std::string_view prototype_token(PrototypeMode mode);
PrototypeMode parse_prototype_mode(std::string_view token);

struct EvalConfig {
  std::size_t n_way = 5;
  std::size_t k_shot = 5;
  std::size_t q_query = 15;
  std::size_t n_episodes = 1000;
  AggregationMode mode = AggregationMode::kAverage;
  PrototypeMode prototypes = PrototypeMode::kMean;
  std::size_t learned_steps = 100;
  double learned_lr = 0.01;
  double cosine_scale = 10.0;
  std::uint64_t seed = 0;
  std::string stream_label = "episode";
  std::size_t threads = 1;

  void validate() const;
};

struct EvalReport {
  std::vector<double> episode_accuracies;  // percent
  double mean_accuracy = 0.0;
  double half_ci_95 = 0.0;
  std::size_t n_episodes = 0;
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::string mode = "average";
  std::string prototypes = "mean";
  std::uint64_t seed = 0;
  std::string checkpoint_hash;
  std::string strategy;
  std::size_t k_members = 0;
  // Mean accuracy of each member evaluated alone on the same episodes.
  std::vector<double> member_mean_accuracies;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

struct MeanCi {
  double mean = 0.0;
  double half_ci = 0.0;
};
// Mean and 1.96 * sample standard deviation / sqrt(N).
MeanCi mean_and_half_ci(std::span<const double> values);

// Features of every sample in `pool`, one [n_samples x d] tensor per member,
// indexed by dataset position through `row_of`.
struct FeatureBank {
  std::vector<Tensor> member_features;
  std::vector<std::int64_t> row_of;  // dataset index -> row, -1 if absent
  std::size_t dim = 0;
};

FeatureBank compute_feature_bank(const EnsembleParams& ensemble, const Dataset& dataset, const ClassPool& pool,
                                 std::size_t threads = 1);

struct EpisodeOutcome {
  double accuracy = 0.0;
  std::vector<double> member_accuracy;
};

// Scores one episode from precomputed features.
EpisodeOutcome score_episode(const FeatureBank& bank, const Episode& episode, const EvalConfig& config);

// Samples config.n_episodes episodes from `classes`, each from its own stream
// derived from (seed, stream_label, index), and scores the ensemble.
EvalReport evaluate(const EnsembleParams& ensemble, const Dataset& dataset, std::span<const std::uint32_t> classes,
                    const EvalConfig& config);

// Same protocol for an arbitrary predictor returning one label per query.
using EpisodePredictor = std::function<std::vector<std::size_t>(const Episode&, Rng&)>;
EvalReport evaluate_predictor(const Dataset& dataset, std::span<const std::uint32_t> classes,
                              const EvalConfig& config, const EpisodePredictor& predictor);

// Key=value text with the keys mean_accuracy, half_ci_95, n_episodes, n_way,
// k_shot, mode, prototypes, seed, checkpoint_hash, strategy, k_members,
// member_mean_accuracies, episode_accuracies. Reals round-trip exactly.
std::string format_report(const EvalReport& report);
EvalReport parse_report(const std::string& text, const std::string& origin = "report");

}  // namespace fsens
