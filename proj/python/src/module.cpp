#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "fsens/data.hpp"
#include "fsens/distill.hpp"
#include "fsens/episodic.hpp"
#include "fsens/errors.hpp"
#include "fsens/gradcheck_suite.hpp"
#include "fsens/models.hpp"
#include "fsens/penalties.hpp"
#include "fsens/training.hpp"

namespace py = pybind11;
using namespace fsens;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const DoubleArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

DoubleArray to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  DoubleArray out(shape);
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

py::array_t<std::uint8_t> sample_pixels(const Dataset& d, std::size_t i) {
  const auto& px = d.samples.at(i).pixels;
  py::array_t<std::uint8_t> out({d.channels, d.height, d.width});
  std::copy(px.begin(), px.end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Few-shot ensembles with pairwise relation penalties";

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ParameterError>(m, "ParameterError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_RuntimeError);
  py::register_exception<StateError>(m, "StateError", PyExc_RuntimeError);

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("height", &Dataset::height)
      .def_readonly("width", &Dataset::width)
      .def_readonly("channels", &Dataset::channels)
      .def_readonly("n_classes", &Dataset::n_classes)
      .def("__len__", &Dataset::size)
      .def("image", &sample_pixels, py::arg("index"))
      .def("label", [](const Dataset& d, std::size_t i) { return d.samples.at(i).label; })
      .def_property_readonly("labels",
                             [](const Dataset& d) {
                               std::vector<std::uint32_t> out;
                               for (const auto& s : d.samples) out.push_back(s.label);
                               return out;
                             })
      .def("__eq__", [](const Dataset& a, const Dataset& b) { return a == b; });

  py::class_<ClassSplit>(m, "ClassSplit")
      .def(py::init<>())
      .def_readwrite("train_classes", &ClassSplit::train_classes)
      .def_readwrite("val_classes", &ClassSplit::val_classes)
      .def_readwrite("test_classes", &ClassSplit::test_classes);

  m.def("default_split", &default_split, py::arg("n_classes"));
  m.def("synth_generate", &synth_generate, py::arg("seed"), py::arg("n_classes"), py::arg("per_class"),
        py::arg("image_size"));
  m.def("synth_generate_shifted", &synth_generate_shifted, py::arg("seed"), py::arg("n_classes"),
        py::arg("per_class"), py::arg("image_size"));
  m.def("save_corpus", &save_corpus, py::arg("dataset"), py::arg("split"), py::arg("seed"), py::arg("dir"));
  m.def(
      "load_corpus",
      [](const std::filesystem::path& dir) {
        auto c = load_corpus(dir);
        return py::make_tuple(std::move(c.dataset), std::move(c.split));
      },
      py::arg("dir"));

  py::enum_<PenaltyKind>(m, "PenaltyKind")
      .value("none", PenaltyKind::kNone)
      .value("cosine_diversity", PenaltyKind::kCosineDiversity)
      .value("symkl_cooperation", PenaltyKind::kSymKLCooperation)
      .value("l2_diversity", PenaltyKind::kL2Diversity)
      .value("l2_cooperation", PenaltyKind::kL2Cooperation)
      .value("negcos_cooperation", PenaltyKind::kNegCosCooperation);
  m.def("parse_penalty", [](const std::string& s) { return parse_penalty(s); });
  m.def("penalty_token", [](PenaltyKind k) { return std::string(penalty_token(k)); });

  m.def(
      "condition_non_gt",
      [](const std::vector<double>& p, std::size_t label) { return condition_non_gt({p}, label).values; },
      py::arg("p"), py::arg("label"));
  auto cond_pair = [](double (*phi)(const CondProbVector&, const CondProbVector&)) {
    return [phi](const std::vector<double>& p, const std::vector<double>& q, std::size_t label) {
      return phi(condition_non_gt({p}, label), condition_non_gt({q}, label));
    };
  };
  m.def("phi_cosine", cond_pair(&phi_cosine), py::arg("p"), py::arg("q"), py::arg("label"));
  m.def("phi_l2", cond_pair(&phi_l2), py::arg("p"), py::arg("q"), py::arg("label"));
  m.def(
      "phi_symkl",
      [](const std::vector<double>& p, const std::vector<double>& q, std::size_t label) {
        return phi_symkl(condition_non_gt({p}, label), condition_non_gt({q}, label));
      },
      py::arg("p"), py::arg("q"), py::arg("label"));
  m.def(
      "pairwise_penalty",
      [](const std::vector<DoubleArray>& logits, const std::vector<std::size_t>& labels, PenaltyKind kind) {
        std::vector<Tensor> ts;
        for (const auto& a : logits) ts.push_back(to_tensor(a));
        return pairwise_penalty(std::span<const Tensor>(ts), labels, kind);
      },
      py::arg("logits"), py::arg("labels"), py::arg("kind"));

  py::class_<EnsembleParams>(m, "Ensemble")
      .def("__len__", &EnsembleParams::size)
      .def_readonly("member_seeds", &EnsembleParams::member_seeds)
      .def_readonly("strategy", &EnsembleParams::strategy)
      .def_property_readonly("arch", &EnsembleParams::arch_descriptor)
      .def_property_readonly("hash", [](const EnsembleParams& e) { return checkpoint_hash(e); })
      .def("encode", [](const EnsembleParams& e) { return py::bytes(encode_checkpoint(e)); })
      .def("__eq__", [](const EnsembleParams& a, const EnsembleParams& b) { return a == b; });
  m.def("decode_checkpoint", [](const py::bytes& b) { return decode_checkpoint(std::string(b)); });
  m.def("save_checkpoint", &save_checkpoint, py::arg("ensemble"), py::arg("path"));
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));
  m.def(
      "logits",
      [](const EnsembleParams& e, std::size_t member, const DoubleArray& images) {
        return to_array(forward(e.members.at(member), to_tensor(images)).logits);
      },
      py::arg("ensemble"), py::arg("member"), py::arg("images"));

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("k_members", &TrainConfig::k_members)
      .def_readwrite("member_seeds", &TrainConfig::member_seeds)
      .def_readwrite("lr", &TrainConfig::lr)
      .def_readwrite("weight_decay", &TrainConfig::weight_decay)
      .def_readwrite("gamma", &TrainConfig::gamma)
      .def_readwrite("penalty", &TrainConfig::penalty)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("patience", &TrainConfig::patience)
      .def_readwrite("lr_drop_factor", &TrainConfig::lr_drop_factor)
      .def_readwrite("max_epochs", &TrainConfig::max_epochs)
      .def_readwrite("max_steps_per_epoch", &TrainConfig::max_steps_per_epoch)
      .def_readwrite("member_drop_prob", &TrainConfig::member_drop_prob)
      .def_readwrite("dropout", &TrainConfig::dropout)
      .def_readwrite("per_member_augmentation", &TrainConfig::per_member_augmentation)
      .def_readwrite("width", &TrainConfig::width)
      .def_readwrite("master_seed", &TrainConfig::master_seed)
      .def_readwrite("strategy", &TrainConfig::strategy)
      .def_readwrite("val_episodes", &TrainConfig::val_episodes)
      .def_readwrite("select_best", &TrainConfig::select_best)
      .def_readwrite("threads", &TrainConfig::threads)
      .def("validate", &TrainConfig::validate);
  m.def(
      "strategy_preset", [](const std::string& name, const TrainConfig& base) { return strategy_preset(name, base); },
      py::arg("name"), py::arg("base") = TrainConfig{});
  m.def(
      "train_ensemble",
      [](const Dataset& d, const ClassSplit& s, const TrainConfig& c) {
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train_ensemble(d, s, c);
        }
        return py::make_tuple(std::move(r.ensemble), format_log(r.log));
      },
      py::arg("dataset"), py::arg("split"), py::arg("config"));

  py::class_<EvalConfig>(m, "EvalConfig")
      .def(py::init<>())
      .def_readwrite("n_way", &EvalConfig::n_way)
      .def_readwrite("k_shot", &EvalConfig::k_shot)
      .def_readwrite("q_query", &EvalConfig::q_query)
      .def_readwrite("n_episodes", &EvalConfig::n_episodes)
      .def_property(
          "mode", [](const EvalConfig& c) { return std::string(aggregation_token(c.mode)); },
          [](EvalConfig& c, const std::string& s) { c.mode = parse_aggregation(s); })
      .def_property(
          "prototypes", [](const EvalConfig& c) { return std::string(prototype_token(c.prototypes)); },
          [](EvalConfig& c, const std::string& s) { c.prototypes = parse_prototype_mode(s); })
      .def_readwrite("learned_steps", &EvalConfig::learned_steps)
      .def_readwrite("learned_lr", &EvalConfig::learned_lr)
      .def_readwrite("cosine_scale", &EvalConfig::cosine_scale)
      .def_readwrite("seed", &EvalConfig::seed)
      .def_readwrite("threads", &EvalConfig::threads);

  py::class_<EvalReport>(m, "EvalReport")
      .def_readonly("episode_accuracies", &EvalReport::episode_accuracies)
      .def_readonly("mean_accuracy", &EvalReport::mean_accuracy)
      .def_readonly("half_ci_95", &EvalReport::half_ci_95)
      .def_readonly("n_episodes", &EvalReport::n_episodes)
      .def_readonly("mode", &EvalReport::mode)
      .def_readonly("prototypes", &EvalReport::prototypes)
      .def_readonly("checkpoint_hash", &EvalReport::checkpoint_hash)
      .def_readonly("k_members", &EvalReport::k_members)
      .def_readonly("member_mean_accuracies", &EvalReport::member_mean_accuracies)
      .def("format", [](const EvalReport& r) { return format_report(r); })
      .def("__eq__", [](const EvalReport& a, const EvalReport& b) { return a == b; });
  m.def("parse_report", [](const std::string& text) { return parse_report(text); }, py::arg("text"));
  m.def(
      "evaluate",
      [](const EnsembleParams& e, const Dataset& d, const std::vector<std::uint32_t>& classes,
         const EvalConfig& c) {
        py::gil_scoped_release release;
        return evaluate(e, d, classes, c);
      },
      py::arg("ensemble"), py::arg("dataset"), py::arg("classes"), py::arg("config"));
  m.def(
      "mean_and_half_ci",
      [](const std::vector<double>& v) {
        auto r = mean_and_half_ci(v);
        return py::make_tuple(r.mean, r.half_ci);
      },
      py::arg("values"));
  m.def(
      "classify_probs",
      [](const DoubleArray& prototypes, const DoubleArray& queries, double scale) {
        return to_array(classify_probs({to_tensor(prototypes), scale}, to_tensor(queries)));
      },
      py::arg("prototypes"), py::arg("queries"), py::arg("scale") = 10.0);
  m.def(
      "aggregate_ensemble",
      [](const std::vector<DoubleArray>& probs, const std::string& mode) {
        std::vector<Tensor> ts;
        for (const auto& a : probs) ts.push_back(to_tensor(a));
        auto r = aggregate_ensemble(ts, parse_aggregation(mode));
        return py::make_tuple(r.labels, to_array(r.mean_probs));
      },
      py::arg("member_probs"), py::arg("mode") = "average");

  py::class_<DistillConfig>(m, "DistillConfig")
      .def(py::init<>())
      .def_readwrite("temperature", &DistillConfig::temperature)
      .def_readwrite("alpha", &DistillConfig::alpha)
      .def_readwrite("unlabeled_per_batch", &DistillConfig::unlabeled_per_batch)
      .def_readwrite("flipped_soft_sign", &DistillConfig::flipped_soft_sign)
      .def_readwrite("lr", &DistillConfig::lr)
      .def_readwrite("batch_size", &DistillConfig::batch_size)
      .def_readwrite("patience", &DistillConfig::patience)
      .def_readwrite("max_epochs", &DistillConfig::max_epochs)
      .def_readwrite("max_steps_per_epoch", &DistillConfig::max_steps_per_epoch)
      .def_readwrite("master_seed", &DistillConfig::master_seed)
      .def_readwrite("val_episodes", &DistillConfig::val_episodes)
      .def_readwrite("threads", &DistillConfig::threads);
  m.def(
      "teacher_soft_targets",
      [](const EnsembleParams& e, const DoubleArray& images, double temperature) {
        return to_array(teacher_soft_targets(e, to_tensor(images), temperature));
      },
      py::arg("teacher"), py::arg("images"), py::arg("temperature"));
  m.def(
      "distill",
      [](const EnsembleParams& teacher, const Dataset& d, const ClassSplit& s, const Dataset* unlabeled,
         const DistillConfig& c) {
        DistillResult r;
        {
          py::gil_scoped_release release;
          r = distill_train(teacher, d, s, unlabeled, c);
        }
        return py::make_tuple(std::move(r.student), format_log(r.log));
      },
      py::arg("teacher"), py::arg("dataset"), py::arg("split"), py::arg("unlabeled") = nullptr,
      py::arg("config") = DistillConfig{});

  m.def(
      "gradcheck",
      [](std::size_t points, bool composites, bool inject_fault) {
        GradCheckOptions o;
        o.points = points;
        o.composites = composites;
        o.inject_fault = inject_fault;
        std::vector<GradCheckResult> rs;
        {
          py::gil_scoped_release release;
          rs = run_gradcheck_suite(o);
        }
        py::list out;
        for (const auto& r : rs) out.append(py::make_tuple(r.name, r.max_error, r.passed));
        return out;
      },
      py::arg("points") = 10, py::arg("composites") = true, py::arg("inject_fault") = false);
}
