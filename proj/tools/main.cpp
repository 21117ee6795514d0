#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fsens/data.hpp"
#include "fsens/distill.hpp"
#include "fsens/episodic.hpp"
#include "fsens/errors.hpp"
#include "fsens/gradcheck_suite.hpp"
#include "fsens/keyvalue.hpp"
#include "fsens/models.hpp"
#include "fsens/runtime.hpp"
#include "fsens/training.hpp"

namespace fs = std::filesystem;
using namespace fsens;

namespace {

// Settings accepted by one command, each usable as a config-file key and as
// a long flag (underscores become dashes).
class Settings {
 public:
  using Apply = std::function<void(const std::string&)>;

  void value(const std::string& key, const std::string& help, Apply apply) {
    entries_.push_back({key, help, std::move(apply), false});
  }
  void flag(const std::string& key, const std::string& help, Apply apply) {
    entries_.push_back({key, help, std::move(apply), true});
  }

  void attach(CLI::App& cmd) {
    cmd.add_option("--config", config_path_, "key=value file; flags override its entries");
    for (const auto& e : entries_) {
      std::string name = "--" + e.key;
      std::replace(name.begin(), name.end(), '_', '-');
      auto& slot = from_flags_[e.key];
      if (e.is_flag) {
        cmd.add_flag_callback(name, [&slot] { slot = "true"; }, e.help);
      } else {
        cmd.add_option(name, slot, e.help);
      }
    }
  }

  // Config file first, then every flag given on the command line.
  void resolve(CLI::App& cmd) {
    std::map<std::string, std::string> merged;
    if (!config_path_.empty()) {
      std::ifstream in(config_path_);
      if (!in) throw ParameterError("--config: cannot open " + config_path_);
      std::stringstream ss;
      ss << in.rdbuf();
      std::vector<std::pair<std::string, std::string>> pairs;
      try {
        pairs = parse_key_values(ss.str(), config_path_);
      } catch (const FormatError& e) {
        throw ParameterError(e.what());
      }
      for (auto& [k, v] : pairs) {
        if (find(k) == nullptr) throw ParameterError(config_path_ + ": unknown key '" + k + "'");
        merged[k] = v;
      }
    }
    for (const auto& e : entries_) {
      std::string name = "--" + e.key;
      std::replace(name.begin(), name.end(), '_', '-');
      if (cmd.count(name) > 0) merged[e.key] = from_flags_[e.key];
    }
    // Presets first so that explicit keys refine them.
    for (const auto& e : entries_)
      if (e.key == "strategy" && merged.count(e.key)) e.apply(merged[e.key]);
    for (const auto& e : entries_)
      if (e.key != "strategy" && merged.count(e.key)) e.apply(merged[e.key]);
  }

 private:
  struct Entry {
    std::string key;
    std::string help;
    Apply apply;
    bool is_flag;
  };
  const Entry* find(const std::string& key) const {
    for (const auto& e : entries_)
      if (e.key == key) return &e;
    return nullptr;
  }
  std::vector<Entry> entries_;
  std::map<std::string, std::string> from_flags_;
  std::string config_path_;
};

std::size_t to_size(const std::string& key, const std::string& v) { return static_cast<std::size_t>(parse_u64(key, v)); }

std::vector<std::uint64_t> parse_u64_list(const std::string& key, const std::string& v) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_u64(key, item));
  return out;
}

void require_path(const std::string& value, const std::string& flag) {
  if (value.empty()) throw ParameterError(flag + " is required");
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

void write_file(const fs::path& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

void add_augment_keys(Settings& s, AugmentPolicy& a) {
  s.value("crop_lo", "smallest crop fraction", [&a](const std::string& v) { a.crop_lo = parse_double("crop_lo", v); });
  s.value("crop_hi", "largest crop fraction", [&a](const std::string& v) { a.crop_hi = parse_double("crop_hi", v); });
  s.value("color_jitter", "brightness/contrast jitter strength",
          [&a](const std::string& v) { a.color_jitter = parse_double("color_jitter", v); });
  s.value("noise_std", "pixel noise std", [&a](const std::string& v) { a.noise_std = parse_double("noise_std", v); });
  s.value("augment", "enable augmentation (true/false)",
          [&a](const std::string& v) { a.enabled = parse_bool("augment", v); });
}

// ---- synth-data -----------------------------------------------------------

struct SynthArgs {
  std::uint64_t seed = 1;
  std::size_t classes = 40;
  std::size_t per_class = 50;
  std::size_t image_size = 32;
  bool shifted = false;
  std::string out;
};

void setup_synth(Settings& s, SynthArgs& a) {
  s.value("seed", "generator seed", [&a](const std::string& v) { a.seed = parse_u64("seed", v); });
  s.value("classes", "number of classes (>= 10)", [&a](const std::string& v) { a.classes = to_size("classes", v); });
  s.value("per_class", "samples per class (>= 30)",
          [&a](const std::string& v) { a.per_class = to_size("per_class", v); });
  s.value("image_size", "image side in pixels, multiple of 4 in [16, 64]",
          [&a](const std::string& v) { a.image_size = to_size("image_size", v); });
  s.flag("shifted", "use the shifted generator (domain-shift corpus)",
         [&a](const std::string& v) { a.shifted = parse_bool("shifted", v); });
  s.value("out", "output directory", [&a](const std::string& v) { a.out = v; });
}

int run_synth(const SynthArgs& a) {
  require_path(a.out, "--out");
  if (a.classes < 10) throw ParameterError("--classes must be >= 10, got " + std::to_string(a.classes));
  if (a.per_class < 30) throw ParameterError("--per-class must be >= 30, got " + std::to_string(a.per_class));
  if (a.image_size < 16 || a.image_size > 64 || a.image_size % 4 != 0) {
    throw ParameterError("--image-size must be a multiple of 4 in [16, 64], got " + std::to_string(a.image_size));
  }
  const Dataset d = a.shifted ? synth_generate_shifted(a.seed, a.classes, a.per_class, a.image_size)
                              : synth_generate(a.seed, a.classes, a.per_class, a.image_size);
  save_corpus(d, default_split(a.classes), a.seed, a.out);
  std::printf("wrote %zu samples, %zu classes to %s\n", d.size(), d.n_classes, a.out.c_str());
  return 0;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  TrainConfig config;
  std::string data;
  std::string out;
  std::string log;
  bool grid = false;
};

void setup_train(Settings& s, TrainArgs& a) {
  TrainConfig& c = a.config;
  s.value("data", "corpus directory (manifest.txt)", [&a](const std::string& v) { a.data = v; });
  s.value("out", "checkpoint path, or output directory with --grid", [&a](const std::string& v) { a.out = v; });
  s.value("log", "training log path (default: <out>.log)", [&a](const std::string& v) { a.log = v; });
  s.flag("grid", "train K in {1,2,3,5} x the four strategies", [&a](const std::string& v) { a.grid = parse_bool("grid", v); });
  s.value("strategy", "independent, diversity, cooperation or robust",
          [&c](const std::string& v) { c = strategy_preset(v, c); });
  s.value("k", "ensemble size", [&c](const std::string& v) { c.k_members = to_size("k", v); });
  s.value("member_seeds", "comma-separated member seeds",
          [&c](const std::string& v) { c.member_seeds = parse_u64_list("member_seeds", v); });
  s.value("penalty", "none, cosine-diversity, symkl-cooperation, l2-diversity, l2-cooperation, negcos-cooperation",
          [&c](const std::string& v) { c.penalty = parse_penalty(v); });
  s.value("gamma", "penalty weight", [&c](const std::string& v) { c.gamma = parse_double("gamma", v); });
  s.value("temperature_probe", "compare softmax(z / T) instead of conditional probabilities",
          [&c](const std::string& v) { c.penalty_options.temperature_probe = parse_double("temperature_probe", v); });
  s.value("lr", "Adam learning rate", [&c](const std::string& v) { c.lr = parse_double("lr", v); });
  s.value("weight_decay", "L2 coefficient", [&c](const std::string& v) { c.weight_decay = parse_double("weight_decay", v); });
  s.value("batch_size", "mini-batch size", [&c](const std::string& v) { c.batch_size = to_size("batch_size", v); });
  s.value("patience", "plateau patience in epochs", [&c](const std::string& v) { c.patience = to_size("patience", v); });
  s.value("lr_drop_factor", "learning-rate divisor on the first plateau",
          [&c](const std::string& v) { c.lr_drop_factor = parse_double("lr_drop_factor", v); });
  s.value("max_epochs", "epoch limit", [&c](const std::string& v) { c.max_epochs = to_size("max_epochs", v); });
  s.value("max_steps_per_epoch", "step limit per epoch (0 = full pass)",
          [&c](const std::string& v) { c.max_steps_per_epoch = to_size("max_steps_per_epoch", v); });
  s.value("member_drop_prob", "probability of leaving a member out of a step",
          [&c](const std::string& v) { c.member_drop_prob = parse_double("member_drop_prob", v); });
  s.value("dropout", "dropout before the head", [&c](const std::string& v) { c.dropout = parse_double("dropout", v); });
  s.value("per_member_augmentation", "independent augmentation per member (true/false)",
          [&c](const std::string& v) { c.per_member_augmentation = parse_bool("per_member_augmentation", v); });
  s.value("width", "backbone channel multiplier", [&c](const std::string& v) { c.width = to_size("width", v); });
  s.value("seed", "master seed", [&c](const std::string& v) { c.master_seed = parse_u64("seed", v); });
  s.value("val_episodes", "validation episodes per epoch (0 disables validation)",
          [&c](const std::string& v) { c.val_episodes = to_size("val_episodes", v); });
  s.value("val_way", "validation episode way", [&c](const std::string& v) { c.val_way = to_size("val_way", v); });
  s.value("val_shot", "validation episode shot", [&c](const std::string& v) { c.val_shot = to_size("val_shot", v); });
  s.value("val_query", "validation queries per class", [&c](const std::string& v) { c.val_query = to_size("val_query", v); });
  s.value("resample_val_episodes", "fresh validation episodes each epoch (true/false)",
          [&c](const std::string& v) { c.resample_val_episodes = parse_bool("resample_val_episodes", v); });
  s.value("select_best", "keep the best validation epoch (true/false)",
          [&c](const std::string& v) { c.select_best = parse_bool("select_best", v); });
  s.value("threads", "worker threads for validation", [&c](const std::string& v) { c.threads = to_size("threads", v); });
  add_augment_keys(s, c.augment);
}

void train_one(const CorpusOnDisk& corpus, const TrainConfig& config, const fs::path& out, const fs::path& log) {
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult r = train_ensemble(corpus.dataset, corpus.split, config);
  ensure_parent(out);
  save_checkpoint(r.ensemble, out);
  write_file(log, format_log(r.log));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%s k=%zu epochs=%zu best=%zu hash=%s (%.1fs)\n", config.strategy.c_str(), config.k_members,
              r.log.epochs.size(), r.log.best_epoch, checkpoint_hash(r.ensemble).c_str(), secs);
}

int run_train(TrainArgs& a) {
  require_path(a.data, "--data");
  require_path(a.out, "--out");
  a.config.validate();
  const CorpusOnDisk corpus = load_corpus(a.data);
  if (!a.grid) {
    train_one(corpus, a.config, a.out, a.log.empty() ? a.out + ".log" : a.log);
    return 0;
  }
  for (const char* strategy : {"independent", "diversity", "cooperation", "robust"}) {
    for (std::size_t k : {1, 2, 3, 5}) {
      TrainConfig c = strategy_preset(strategy, a.config);
      c.k_members = k;
      c.member_seeds.clear();
      const std::string stem = std::string(strategy) + "-k" + std::to_string(k);
      const fs::path dir(a.out);
      train_one(corpus, c, dir / (stem + ".fsen"), dir / (stem + ".log"));
    }
  }
  return 0;
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
  EvalConfig config;
  std::string checkpoint;
  std::string data;
  std::string dataset_b;
  std::string out;
};

void setup_eval(Settings& s, EvalArgs& a) {
  EvalConfig& c = a.config;
  s.value("checkpoint", "ensemble checkpoint", [&a](const std::string& v) { a.checkpoint = v; });
  s.value("data", "corpus directory; episodes use its test classes", [&a](const std::string& v) { a.data = v; });
  s.value("dataset_b", "evaluate on this corpus's test classes instead (domain shift)",
          [&a](const std::string& v) { a.dataset_b = v; });
  s.value("out", "report path", [&a](const std::string& v) { a.out = v; });
  s.value("mode", "average or vote", [&c](const std::string& v) { c.mode = parse_aggregation(v); });
  s.value("prototypes", "mean or learned", [&c](const std::string& v) { c.prototypes = parse_prototype_mode(v); });
  s.value("episodes", "number of episodes", [&c](const std::string& v) { c.n_episodes = to_size("episodes", v); });
  s.value("way", "classes per episode", [&c](const std::string& v) { c.n_way = to_size("way", v); });
  s.value("shot", "support samples per class", [&c](const std::string& v) { c.k_shot = to_size("shot", v); });
  s.value("query", "query samples per class", [&c](const std::string& v) { c.q_query = to_size("query", v); });
  s.value("learned_steps", "ascent steps for learned prototypes",
          [&c](const std::string& v) { c.learned_steps = to_size("learned_steps", v); });
  s.value("learned_lr", "initial step for learned prototypes",
          [&c](const std::string& v) { c.learned_lr = parse_double("learned_lr", v); });
  s.value("seed", "episode seed", [&c](const std::string& v) { c.seed = parse_u64("seed", v); });
  s.value("threads", "worker threads", [&c](const std::string& v) { c.threads = to_size("threads", v); });
}

int run_eval(const EvalArgs& a) {
  require_path(a.checkpoint, "--checkpoint");
  if (a.data.empty() && a.dataset_b.empty()) throw ParameterError("--data or --dataset-b is required");
  a.config.validate();
  const EnsembleParams ensemble = load_checkpoint(a.checkpoint);
  const CorpusOnDisk corpus = load_corpus(a.dataset_b.empty() ? a.data : a.dataset_b);
  corpus.split.validate(corpus.dataset.n_classes, a.config.n_way);
  const EvalReport report = evaluate(ensemble, corpus.dataset, corpus.split.test_classes, a.config);
  if (!a.out.empty()) write_file(a.out, format_report(report));
  std::printf("%s k=%zu %s/%s: %.2f +- %.2f%% over %zu episodes\n", report.strategy.c_str(), report.k_members,
              report.mode.c_str(), report.prototypes.c_str(), report.mean_accuracy, report.half_ci_95,
              report.n_episodes);
  return 0;
}

// ---- distill --------------------------------------------------------------

struct DistillArgs {
  DistillConfig config;
  std::string teacher;
  std::string data;
  std::string unlabeled_pool;
  std::string out;
  std::string log;
  bool per_batch_set = false;
};

void setup_distill(Settings& s, DistillArgs& a) {
  DistillConfig& c = a.config;
  s.value("teacher", "ensemble checkpoint", [&a](const std::string& v) { a.teacher = v; });
  s.value("data", "corpus directory", [&a](const std::string& v) { a.data = v; });
  s.value("unlabeled_pool", "corpus directory of unlabeled images (enables the ++ regime)",
          [&a](const std::string& v) { a.unlabeled_pool = v; });
  s.value("unlabeled_per_batch", "unlabeled images per batch (default 8 with a pool)", [&a, &c](const std::string& v) {
    c.unlabeled_per_batch = to_size("unlabeled_per_batch", v);
    a.per_batch_set = true;
  });
  s.value("out", "student checkpoint path", [&a](const std::string& v) { a.out = v; });
  s.value("log", "training log path (default: <out>.log)", [&a](const std::string& v) { a.log = v; });
  s.value("temperature", "softening temperature", [&c](const std::string& v) { c.temperature = parse_double("temperature", v); });
  s.value("alpha", "soft-term weight", [&c](const std::string& v) { c.alpha = parse_double("alpha", v); });
  s.flag("flipped_soft_sign", "subtract the soft term (demonstration only)",
         [&c](const std::string& v) { c.flipped_soft_sign = parse_bool("flipped_soft_sign", v); });
  s.value("lr", "Adam learning rate", [&c](const std::string& v) { c.lr = parse_double("lr", v); });
  s.value("weight_decay", "L2 coefficient", [&c](const std::string& v) { c.weight_decay = parse_double("weight_decay", v); });
  s.value("batch_size", "labeled samples per batch", [&c](const std::string& v) { c.batch_size = to_size("batch_size", v); });
  s.value("patience", "base patience (doubled)", [&c](const std::string& v) { c.patience = to_size("patience", v); });
  s.value("lr_drop_factor", "learning-rate divisor on the first plateau",
          [&c](const std::string& v) { c.lr_drop_factor = parse_double("lr_drop_factor", v); });
  s.value("max_epochs", "epoch limit", [&c](const std::string& v) { c.max_epochs = to_size("max_epochs", v); });
  s.value("max_steps_per_epoch", "step limit per epoch (0 = full pass)",
          [&c](const std::string& v) { c.max_steps_per_epoch = to_size("max_steps_per_epoch", v); });
  s.value("width", "student channel multiplier", [&c](const std::string& v) { c.width = to_size("width", v); });
  s.value("dropout", "student dropout", [&c](const std::string& v) { c.dropout = parse_double("dropout", v); });
  s.value("seed", "master seed", [&c](const std::string& v) { c.master_seed = parse_u64("seed", v); });
  s.value("val_episodes", "validation episodes per epoch (0 disables validation)",
          [&c](const std::string& v) { c.val_episodes = to_size("val_episodes", v); });
  s.value("threads", "worker threads for validation", [&c](const std::string& v) { c.threads = to_size("threads", v); });
  add_augment_keys(s, c.augment);
}

int run_distill(DistillArgs& a) {
  require_path(a.teacher, "--teacher");
  require_path(a.data, "--data");
  require_path(a.out, "--out");
  if (!a.unlabeled_pool.empty() && !a.per_batch_set) a.config.unlabeled_per_batch = 8;
  if (a.config.unlabeled_per_batch > 0 && a.unlabeled_pool.empty()) {
    throw ParameterError("--unlabeled-per-batch > 0 requires --unlabeled-pool");
  }
  a.config.validate();
  const EnsembleParams teacher = load_checkpoint(a.teacher);
  const CorpusOnDisk corpus = load_corpus(a.data);
  Dataset pool;
  if (!a.unlabeled_pool.empty()) pool = load_corpus(a.unlabeled_pool).dataset;
  const DistillResult r =
      distill_train(teacher, corpus.dataset, corpus.split, a.unlabeled_pool.empty() ? nullptr : &pool, a.config);
  ensure_parent(a.out);
  save_checkpoint(r.student, a.out);
  write_file(a.log.empty() ? a.out + ".log" : a.log, format_log(r.log));
  std::printf("student epochs=%zu best=%zu hash=%s\n", r.log.epochs.size(), r.log.best_epoch,
              checkpoint_hash(r.student).c_str());
  return 0;
}

// ---- report ---------------------------------------------------------------

struct ReportArgs {
  std::string input;
  std::string out;
};

void setup_report(Settings& s, ReportArgs& a) {
  s.value("input", "directory of *.report files", [&a](const std::string& v) { a.input = v; });
  s.value("out", "table path (default: stdout)", [&a](const std::string& v) { a.out = v; });
}

int run_report(const ReportArgs& a) {
  require_path(a.input, "--input");
  if (!fs::is_directory(a.input)) throw ParameterError("--input: not a directory: " + a.input);
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(a.input))
    if (entry.is_regular_file() && entry.path().extension() == ".report") files.push_back(entry.path());
  struct Row {
    EvalReport report;
    std::string mean;
    std::string ci;
  };
  std::vector<Row> rows;
  for (const auto& f : files) {
    const std::string text = read_file(f);
    Row row{parse_report(text, f.string()), {}, {}};
    // Mean and CI are copied verbatim from the source report.
    for (const auto& [k, v] : parse_key_values(text, f.string())) {
      if (k == "mean_accuracy") row.mean = v;
      if (k == "half_ci_95") row.ci = v;
    }
    rows.push_back(std::move(row));
  }
  std::sort(rows.begin(), rows.end(), [](const Row& x, const Row& y) {
    return std::tie(x.report.strategy, x.report.k_members, x.report.mode, x.report.prototypes, x.report.checkpoint_hash) <
           std::tie(y.report.strategy, y.report.k_members, y.report.mode, y.report.prototypes, y.report.checkpoint_hash);
  });
  std::string table = "strategy\tk\tmode\tprototypes\tn_way\tk_shot\tn_episodes\tmean_accuracy\thalf_ci_95\tcheckpoint\n";
  for (const auto& [r, mean, ci] : rows) {
    table += r.strategy + "\t" + std::to_string(r.k_members) + "\t" + r.mode + "\t" + r.prototypes + "\t" +
             std::to_string(r.n_way) + "\t" + std::to_string(r.k_shot) + "\t" + std::to_string(r.n_episodes) + "\t" +
             mean + "\t" + ci + "\t" + r.checkpoint_hash + "\n";
  }
  if (a.out.empty()) {
    std::fputs(table.c_str(), stdout);
  } else {
    write_file(a.out, table);
  }
  return 0;
}

// ---- gradcheck ------------------------------------------------------------

void setup_gradcheck(Settings& s, GradCheckOptions& o) {
  s.value("seed", "point seed", [&o](const std::string& v) { o.seed = parse_u64("seed", v); });
  s.value("points", "random points per primitive", [&o](const std::string& v) { o.points = to_size("points", v); });
  s.value("step", "finite-difference step", [&o](const std::string& v) { o.step = parse_double("step", v); });
  s.value("tolerance", "maximum relative error", [&o](const std::string& v) { o.tolerance = parse_double("tolerance", v); });
  s.flag("inject_fault", "add an op with a wrong backward rule",
         [&o](const std::string& v) { o.inject_fault = parse_bool("inject_fault", v); });
}

int run_gradcheck(const GradCheckOptions& o) {
  if (o.step < 1e-7 || o.step > 1e-3) throw ParameterError("--step must be in [1e-7, 1e-3]");
  if (o.points == 0) throw ParameterError("--points must be >= 1");
  const auto results = run_gradcheck_suite(o);
  double worst = 0.0;
  for (const auto& r : results) {
    std::printf("%-34s %.3e  %s\n", r.name.c_str(), r.max_error, r.passed ? "ok" : "FAIL");
    worst = std::max(worst, r.max_error);
  }
  const bool ok = all_passed(results);
  std::printf("%zu checks, max error %.3e, %s\n", results.size(), worst, ok ? "all passed" : "FAILED");
  return ok ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Few-shot ensembles of small convolutional networks"};
  app.require_subcommand(1);

  SynthArgs synth;
  TrainArgs train;
  EvalArgs eval;
  DistillArgs distill;
  ReportArgs report;
  GradCheckOptions gradcheck;
  Settings s_synth, s_train, s_eval, s_distill, s_report, s_gradcheck;
  setup_synth(s_synth, synth);
  setup_train(s_train, train);
  setup_eval(s_eval, eval);
  setup_distill(s_distill, distill);
  setup_report(s_report, report);
  setup_gradcheck(s_gradcheck, gradcheck);

  struct Command {
    CLI::App* app;
    Settings* settings;
    std::function<int()> run;
  };
  std::vector<Command> commands{
      {app.add_subcommand("synth-data", "generate a synthetic corpus"), &s_synth, [&] { return run_synth(synth); }},
      {app.add_subcommand("train", "train an ensemble"), &s_train, [&] { return run_train(train); }},
      {app.add_subcommand("eval", "episodic evaluation of a checkpoint"), &s_eval, [&] { return run_eval(eval); }},
      {app.add_subcommand("distill", "distill an ensemble into one network"), &s_distill,
       [&] { return run_distill(distill); }},
      {app.add_subcommand("report", "tabulate evaluation reports"), &s_report, [&] { return run_report(report); }},
      {app.add_subcommand("gradcheck", "check every gradient against finite differences"), &s_gradcheck,
       [&] { return run_gradcheck(gradcheck); }},
  };
  for (auto& c : commands) c.settings->attach(*c.app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    for (auto& c : commands) {
      if (!c.app->parsed()) continue;
      c.settings->resolve(*c.app);
      return c.run();
    }
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 2;
}
