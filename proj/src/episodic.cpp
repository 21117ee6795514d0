#include "fsens/episodic.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

#include "fsens/errors.hpp"
#include "fsens/keyvalue.hpp"
#include "fsens/ops.hpp"

namespace fsens {

namespace {

Tensor gather_rows(const Tensor& features, const std::vector<std::int64_t>& row_of,
                   const std::vector<std::size_t>& indices) {
  const std::size_t d = features.dim(1);
  Tensor out({indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto r = row_of.at(indices[i]);
    if (r < 0) throw ParameterError("feature bank has no row for sample " + std::to_string(indices[i]));
    std::copy_n(features.data.begin() + r * static_cast<std::int64_t>(d), d,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return out;
}

double accuracy_percent(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& truth) {
  if (predicted.size() != truth.size()) {
    throw DimensionError("accuracy: " + std::to_string(predicted.size()) + " predictions for " +
                         std::to_string(truth.size()) + " queries");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) correct += predicted[i] == truth[i] ? 1 : 0;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(truth.size());
}

void check_labels(const Tensor& features, std::span<const std::size_t> labels, std::size_t n_way) {
  if (features.rank() != 2 || features.dim(0) != labels.size()) {
    throw DimensionError("prototypes: " + std::to_string(labels.size()) + " labels for features " +
                         shape_string(features.shape));
  }
  std::vector<std::size_t> count(n_way, 0);
  for (auto y : labels) {
    if (y >= n_way) throw ParameterError("prototypes: label " + std::to_string(y) + " >= n_way");
    ++count[y];
  }
  for (std::size_t j = 0; j < n_way; ++j) {
    if (count[j] == 0) throw ParameterError("prototypes: class " + std::to_string(j) + " has no support sample");
  }
}

Tensor mean_weights(std::span<const std::size_t> labels, std::size_t n_way) {
  const std::size_t m = labels.size();
  std::vector<double> count(n_way, 0.0);
  for (auto y : labels) count[y] += 1.0;
  Tensor alpha({n_way, m});
  for (std::size_t i = 0; i < m; ++i) alpha[labels[i] * m + i] = 1.0 / count[labels[i]];
  return alpha;
}

// Objective and gradient of the support log-likelihood with respect to the weights.
double learned_objective(const Tensor& alpha, const Tensor& features, std::span<const std::size_t> labels,
                         double cos_scale, std::vector<double>* grad) {
  Tape tape;
  Var a = tape.leaf(alpha, grad != nullptr);
  Var f = tape.constant(features);
  Var protos = matmul(a, f);
  Var probs = softmax_temp(scale(pairwise_cosine(f, protos), cos_scale), 1.0);
  Var nll = cross_entropy(tape.constant(one_hot(labels, alpha.dim(0))), probs);
  if (grad != nullptr) {
    tape.backward(nll);
    const auto g = a.grad();
    grad->assign(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) (*grad)[i] = -g[i];
  }
  return -nll.value().item();
}

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string join(std::span<const double> values) {
  std::string s;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) s += ',';
    s += fmt(values[i]);
  }
  return s;
}

std::vector<double> split_doubles(const std::string& key, const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_double(key, item));
  }
  return out;
}

template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n && !failed; i = next++) {
        try {
          fn(i);
        } catch (...) {
          if (!failed.exchange(true)) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

EvalReport assemble(std::vector<EpisodeOutcome> outcomes, const EvalConfig& config) {
  EvalReport r;
  r.n_episodes = outcomes.size();
  r.n_way = config.n_way;
  r.k_shot = config.k_shot;
  r.mode = std::string(aggregation_token(config.mode));
  r.prototypes = std::string(prototype_token(config.prototypes));
  r.seed = config.seed;
  for (const auto& o : outcomes) r.episode_accuracies.push_back(o.accuracy);
  const MeanCi mc = mean_and_half_ci(r.episode_accuracies);
  r.mean_accuracy = mc.mean;
  r.half_ci_95 = mc.half_ci;
  if (!outcomes.empty()) {
    const std::size_t k = outcomes.front().member_accuracy.size();
    r.member_mean_accuracies.assign(k, 0.0);
    for (const auto& o : outcomes)
      for (std::size_t m = 0; m < k; ++m) r.member_mean_accuracies[m] += o.member_accuracy[m];
    for (auto& v : r.member_mean_accuracies) v /= static_cast<double>(outcomes.size());
  }
  return r;
}

}  // namespace

ClassPool build_class_pool(const Dataset& dataset, std::span<const std::uint32_t> classes) {
  ClassPool pool;
  pool.classes.assign(classes.begin(), classes.end());
  pool.members.resize(classes.size());
  std::vector<std::int64_t> slot(dataset.n_classes, -1);
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] >= dataset.n_classes) {
      throw ParameterError("class pool: class " + std::to_string(classes[i]) + " out of range");
    }
    slot[classes[i]] = static_cast<std::int64_t>(i);
  }
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto s = slot[dataset.samples[i].label];
    if (s >= 0) pool.members[static_cast<std::size_t>(s)].push_back(i);
  }
  return pool;
}

Episode sample_episode(const ClassPool& pool, std::size_t n_way, std::size_t k_shot, std::size_t q_query,
                       Rng& rng) {
  if (n_way < 1 || k_shot < 1) throw ParameterError("sample_episode: n_way and k_shot must be >= 1");
  if (pool.classes.size() < n_way) {
    throw ParameterError("sample_episode: " + std::to_string(n_way) + "-way episodes need " +
                         std::to_string(n_way) + " classes, pool has " + std::to_string(pool.classes.size()));
  }
  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.q_query = q_query;
  std::vector<std::size_t> order(pool.classes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < n_way; ++i) std::swap(order[i], order[i + rng.below(order.size() - i)]);
  const std::size_t need = k_shot + q_query;
  for (std::size_t c = 0; c < n_way; ++c) {
    const auto& members = pool.members[order[c]];
    if (members.size() < need) {
      throw ParameterError("sample_episode: class " + std::to_string(pool.classes[order[c]]) + " has " +
                           std::to_string(members.size()) + " samples, need " + std::to_string(need));
    }
    ep.classes.push_back(pool.classes[order[c]]);
    std::vector<std::size_t> pick(members);
    for (std::size_t i = 0; i < need; ++i) std::swap(pick[i], pick[i + rng.below(pick.size() - i)]);
    for (std::size_t i = 0; i < k_shot; ++i) {
      ep.support.push_back(pick[i]);
      ep.support_labels.push_back(c);
    }
    for (std::size_t i = k_shot; i < need; ++i) {
      ep.query.push_back(pick[i]);
      ep.query_labels.push_back(c);
    }
  }
  return ep;
}

CentroidClassifier prototypes_mean(const Tensor& support_features, std::span<const std::size_t> labels,
                                   std::size_t n_way) {
  check_labels(support_features, labels, n_way);
  const std::size_t d = support_features.dim(1);
  Tensor protos({n_way, d});
  std::vector<double> count(n_way, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    count[labels[i]] += 1.0;
    for (std::size_t c = 0; c < d; ++c) protos[labels[i] * d + c] += support_features[i * d + c];
  }
  for (std::size_t j = 0; j < n_way; ++j)
    for (std::size_t c = 0; c < d; ++c) protos[j * d + c] /= count[j];
  return {std::move(protos), 10.0};
}

CentroidClassifier prototypes_learned(const Tensor& support_features, std::span<const std::size_t> labels,
                                      std::size_t n_way, std::size_t steps, double lr,
                                      LearnedPrototypeTrace* trace) {
  check_labels(support_features, labels, n_way);
  if (!(lr > 0.0)) throw ParameterError("prototypes_learned: lr must be positive");
  if (steps == 0) return prototypes_mean(support_features, labels, n_way);
  const double cos_scale = 10.0;
  Tensor alpha = mean_weights(labels, n_way);
  std::vector<double> grad;
  double objective = learned_objective(alpha, support_features, labels, cos_scale, &grad);
  if (trace) trace->objective.push_back(objective);
  for (std::size_t step = 0; step < steps; ++step) {
    double size = lr;
    bool accepted = false;
    for (int attempt = 0; attempt < 30 && !accepted; ++attempt) {
      Tensor candidate = alpha;
      for (std::size_t i = 0; i < grad.size(); ++i) candidate[i] += size * grad[i];
      const double value = learned_objective(candidate, support_features, labels, cos_scale, nullptr);
      if (value >= objective) {
        alpha = std::move(candidate);
        objective = learned_objective(alpha, support_features, labels, cos_scale, &grad);
        accepted = true;
      } else {
        size *= 0.5;
        if (trace) ++trace->rejected_steps;
      }
    }
    if (!accepted) break;
    if (trace) trace->objective.push_back(objective);
  }
  Tape tape;
  Var protos = matmul(tape.constant(alpha), tape.constant(support_features));
  return {protos.value(), cos_scale};
}

double support_log_likelihood(const CentroidClassifier& classifier, const Tensor& support_features,
                              std::span<const std::size_t> labels) {
  const Tensor probs = classify_probs(classifier, support_features);
  const std::size_t n = classifier.n_way();
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) total += std::log(std::max(probs[i * n + labels[i]], kProbClamp));
  return total / static_cast<double>(labels.size());
}

Tensor classify_probs(const CentroidClassifier& classifier, const Tensor& query_features) {
  if (query_features.rank() != 2 || query_features.dim(1) != classifier.prototypes.dim(1)) {
    throw DimensionError("classify_probs: query features " + shape_string(query_features.shape) +
                         " vs prototypes " + shape_string(classifier.prototypes.shape));
  }
  Tape tape;
  Var cos = pairwise_cosine(tape.constant(query_features), tape.constant(classifier.prototypes));
  return softmax_temp(scale(cos, classifier.scale), 1.0).value();
}

std::vector<std::size_t> argmax_rows(const Tensor& probs) {
  const std::size_t rows = probs.dim(0), cols = probs.dim(1);
  std::vector<std::size_t> out(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 1; c < cols; ++c)
      if (probs[r * cols + c] > probs[r * cols + out[r]]) out[r] = c;
  }
  return out;
}

std::string_view aggregation_token(AggregationMode mode) {
  return mode == AggregationMode::kVote ? "vote" : "average";
}

AggregationMode parse_aggregation(std::string_view token) {
  if (token == "average") return AggregationMode::kAverage;
  if (token == "vote") return AggregationMode::kVote;
  throw ParameterError("unknown aggregation mode '" + std::string(token) + "' (expected average or vote)");
}

std::string_view prototype_token(PrototypeMode mode) { return mode == PrototypeMode::kLearned ? "learned" : "mean"; }

PrototypeMode parse_prototype_mode(std::string_view token) {
  if (token == "mean") return PrototypeMode::kMean;
  if (token == "learned") return PrototypeMode::kLearned;
  throw ParameterError("unknown prototype mode '" + std::string(token) + "' (expected mean or learned)");
}

Aggregate aggregate_ensemble(std::span<const Tensor> member_probs, AggregationMode mode) {
  if (member_probs.empty()) throw ParameterError("aggregate_ensemble: no members");
  const Shape& shape = member_probs.front().shape;
  if (shape.size() != 2) throw DimensionError("aggregate_ensemble: expected [q x n] probabilities");
  Aggregate out;
  out.mean_probs = Tensor(shape);
  for (const auto& p : member_probs) {
    if (p.shape != shape) throw DimensionError("aggregate_ensemble: member shapes differ");
    for (std::size_t i = 0; i < p.numel(); ++i) out.mean_probs[i] += p[i];
  }
  const double k = static_cast<double>(member_probs.size());
  for (auto& v : out.mean_probs.data) v /= k;
  if (mode == AggregationMode::kAverage) {
    out.labels = argmax_rows(out.mean_probs);
    return out;
  }
  const std::size_t rows = shape[0], cols = shape[1];
  std::vector<std::size_t> votes(rows * cols, 0);
  for (const auto& p : member_probs) {
    const auto picks = argmax_rows(p);
    for (std::size_t r = 0; r < rows; ++r) ++votes[r * cols + picks[r]];
  }
  out.labels.assign(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c) {
      const auto vc = votes[r * cols + c], vb = votes[r * cols + best];
      if (vc > vb || (vc == vb && out.mean_probs[r * cols + c] > out.mean_probs[r * cols + best])) best = c;
    }
    out.labels[r] = best;
  }
  return out;
}

void EvalConfig::validate() const {
  if (n_way < 2) throw ParameterError("eval: n_way must be >= 2");
  if (k_shot < 1) throw ParameterError("eval: k_shot must be >= 1");
  if (q_query < 1) throw ParameterError("eval: q_query must be >= 1");
  if (n_episodes < 1) throw ParameterError("eval: n_episodes must be >= 1");
  if (!(cosine_scale > 0.0)) throw ParameterError("eval: cosine_scale must be positive");
  if (!(learned_lr > 0.0)) throw ParameterError("eval: learned_lr must be positive");
}

MeanCi mean_and_half_ci(std::span<const double> values) {
  MeanCi out;
  if (values.empty()) return out;
  const double n = static_cast<double>(values.size());
  double s = 0.0;
  for (double v : values) s += v;
  out.mean = s / n;
  if (values.size() < 2) return out;
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  out.half_ci = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  return out;
}

FeatureBank compute_feature_bank(const EnsembleParams& ensemble, const Dataset& dataset, const ClassPool& pool,
                                 std::size_t threads) {
  FeatureBank bank;
  bank.row_of.assign(dataset.size(), -1);
  std::vector<std::size_t> indices;
  for (const auto& members : pool.members) indices.insert(indices.end(), members.begin(), members.end());
  std::sort(indices.begin(), indices.end());
  for (std::size_t r = 0; r < indices.size(); ++r) bank.row_of[indices[r]] = static_cast<std::int64_t>(r);
  bank.dim = ensemble.arch().feature_dim();
  bank.member_features.resize(ensemble.size());
  if (indices.empty()) return bank;
  const Tensor images = stack_plain(dataset, indices);
  parallel_for(ensemble.size(), threads, [&](std::size_t m) {
    bank.member_features[m] = extract_features(ensemble.members[m], images);
  });
  return bank;
}

EpisodeOutcome score_episode(const FeatureBank& bank, const Episode& episode, const EvalConfig& config) {
  EpisodeOutcome out;
  std::vector<Tensor> probs;
  probs.reserve(bank.member_features.size());
  for (const auto& features : bank.member_features) {
    const Tensor support = gather_rows(features, bank.row_of, episode.support);
    const Tensor query = gather_rows(features, bank.row_of, episode.query);
    CentroidClassifier clf =
        config.prototypes == PrototypeMode::kLearned
            ? prototypes_learned(support, episode.support_labels, episode.n_way, config.learned_steps,
                                 config.learned_lr)
            : prototypes_mean(support, episode.support_labels, episode.n_way);
    clf.scale = config.cosine_scale;
    probs.push_back(classify_probs(clf, query));
    out.member_accuracy.push_back(accuracy_percent(argmax_rows(probs.back()), episode.query_labels));
  }
  out.accuracy = accuracy_percent(aggregate_ensemble(probs, config.mode).labels, episode.query_labels);
  return out;
}

EvalReport evaluate(const EnsembleParams& ensemble, const Dataset& dataset, std::span<const std::uint32_t> classes,
                    const EvalConfig& config) {
  config.validate();
  ensemble.validate();
  const ClassPool pool = build_class_pool(dataset, classes);
  const FeatureBank bank = compute_feature_bank(ensemble, dataset, pool, config.threads);
  std::vector<EpisodeOutcome> outcomes(config.n_episodes);
  parallel_for(config.n_episodes, config.threads, [&](std::size_t i) {
    Rng rng = Rng::stream(config.seed, config.stream_label, {i});
    const Episode ep = sample_episode(pool, config.n_way, config.k_shot, config.q_query, rng);
    outcomes[i] = score_episode(bank, ep, config);
  });
  EvalReport r = assemble(std::move(outcomes), config);
  r.checkpoint_hash = checkpoint_hash(ensemble);
  r.strategy = ensemble.strategy;
  r.k_members = ensemble.size();
  return r;
}

EvalReport evaluate_predictor(const Dataset& dataset, std::span<const std::uint32_t> classes,
                              const EvalConfig& config, const EpisodePredictor& predictor) {
  config.validate();
  const ClassPool pool = build_class_pool(dataset, classes);
  std::vector<EpisodeOutcome> outcomes(config.n_episodes);
  parallel_for(config.n_episodes, config.threads, [&](std::size_t i) {
    Rng rng = Rng::stream(config.seed, config.stream_label, {i});
    const Episode ep = sample_episode(pool, config.n_way, config.k_shot, config.q_query, rng);
    Rng predictor_rng = Rng::stream(config.seed, "predictor", {i});
    outcomes[i].accuracy = accuracy_percent(predictor(ep, predictor_rng), ep.query_labels);
  });
  EvalReport r = assemble(std::move(outcomes), config);
  r.strategy = "predictor";
  r.k_members = 1;
  return r;
}

std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  os << "mean_accuracy=" << fmt(r.mean_accuracy) << '\n';
  os << "half_ci_95=" << fmt(r.half_ci_95) << '\n';
  os << "n_episodes=" << r.n_episodes << '\n';
  os << "n_way=" << r.n_way << '\n';
  os << "k_shot=" << r.k_shot << '\n';
  os << "mode=" << r.mode << '\n';
  os << "prototypes=" << r.prototypes << '\n';
  os << "seed=" << r.seed << '\n';
  os << "checkpoint_hash=" << r.checkpoint_hash << '\n';
  os << "strategy=" << r.strategy << '\n';
  os << "k_members=" << r.k_members << '\n';
  os << "member_mean_accuracies=" << join(r.member_mean_accuracies) << '\n';
  os << "episode_accuracies=" << join(r.episode_accuracies) << '\n';
  return os.str();
}

EvalReport parse_report(const std::string& text, const std::string& origin) {
  EvalReport r;
  bool has_mean = false, has_ci = false;
  for (const auto& [key, value] : parse_key_values(text, origin)) {
    if (key == "mean_accuracy") {
      r.mean_accuracy = parse_double(key, value);
      has_mean = true;
    } else if (key == "half_ci_95") {
      r.half_ci_95 = parse_double(key, value);
      has_ci = true;
    } else if (key == "n_episodes") {
      r.n_episodes = parse_u64(key, value);
    } else if (key == "n_way") {
      r.n_way = parse_u64(key, value);
    } else if (key == "k_shot") {
      r.k_shot = parse_u64(key, value);
    } else if (key == "mode") {
      r.mode = value;
    } else if (key == "prototypes") {
      r.prototypes = value;
    } else if (key == "seed") {
      r.seed = parse_u64(key, value);
    } else if (key == "checkpoint_hash") {
      r.checkpoint_hash = value;
    } else if (key == "strategy") {
      r.strategy = value;
    } else if (key == "k_members") {
      r.k_members = parse_u64(key, value);
    } else if (key == "member_mean_accuracies") {
      r.member_mean_accuracies = split_doubles(key, value);
    } else if (key == "episode_accuracies") {
      r.episode_accuracies = split_doubles(key, value);
    } else {
      throw FormatError(origin + ": unknown report key '" + key + "'");
    }
  }
  if (!has_mean || !has_ci) throw FormatError(origin + ": report lacks mean_accuracy or half_ci_95");
  return r;
}

}  // namespace fsens
