#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "poisonlab/constraint.hpp"
#include "poisonlab/dataset.hpp"
#include "poisonlab/dct.hpp"
#include "poisonlab/defense.hpp"
#include "poisonlab/metrics.hpp"
#include "poisonlab/pipeline.hpp"
#include "poisonlab/poison.hpp"
#include "poisonlab/synth.hpp"
#include "poisonlab/synthgen.hpp"
#include "poisonlab/train.hpp"

namespace py = pybind11;
using namespace poisonlab;

namespace {

Tensor tensor_from_numpy(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  std::vector<int64_t> shape;
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(a.shape(i));
  Tensor t(shape);
  std::copy_n(a.data(), t.size(), t.data());
  return t;
}

py::array_t<float> tensor_to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape;
  for (int i = 0; i < t.rank(); ++i) shape.push_back(static_cast<py::ssize_t>(t.dim(i)));
  py::array_t<float> a(shape);
  std::copy_n(t.data(), t.size(), a.mutable_data());
  return a;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "clean-label backdoor experiment toolkit (C++ core)";

  py::enum_<ConstraintKind>(m, "ConstraintKind")
      .value("linf", ConstraintKind::linf)
      .value("lowpass", ConstraintKind::lowpass)
      .value("patch", ConstraintKind::patch);

  py::class_<ConstraintSet>(m, "ConstraintSet")
      .def(py::init<>())
      .def_static("linf_ball", &ConstraintSet::linf_ball, py::arg("epsilon"))
      .def_static("lowpass_band", &ConstraintSet::lowpass_band, py::arg("cutoff"))
      .def_static("patch_region", &ConstraintSet::patch_region, py::arg("h"), py::arg("w"),
                  py::arg("row") = 0, py::arg("col") = 0)
      .def_readwrite("kind", &ConstraintSet::kind)
      .def_readwrite("epsilon", &ConstraintSet::epsilon)
      .def_readwrite("cutoff", &ConstraintSet::cutoff);

  m.def(
      "project",
      [](const ConstraintSet& c, const py::array_t<float>& pattern) {
        return tensor_to_numpy(project(c, tensor_from_numpy(pattern)));
      },
      py::arg("constraint"), py::arg("pattern"),
      "Project a (C,H,W) pattern onto the constraint set.");

  py::class_<LabeledDataset>(m, "LabeledDataset")
      .def(py::init<>())
      .def_property(
          "images", [](const LabeledDataset& d) { return tensor_to_numpy(d.images); },
          [](LabeledDataset& d, const py::array_t<float>& a) { d.images = tensor_from_numpy(a); })
      .def_readwrite("labels", &LabeledDataset::labels)
      .def_readwrite("class_names", &LabeledDataset::class_names)
      .def_readwrite("source_id", &LabeledDataset::source_id)
      .def("size", &LabeledDataset::size)
      .def("num_classes", &LabeledDataset::num_classes)
      .def("validate", &LabeledDataset::validate)
      .def("digest", &LabeledDataset::digest);

  m.def(
      "load_dataset",
      [](const std::string& path, const std::string& format) {
        return load_dataset(path, format == "class_dirs" ? DatasetFormat::class_dirs
                                                         : DatasetFormat::tensor_file);
      },
      py::arg("path"), py::arg("format") = "tensor_file");
  m.def("save_dataset", &save_dataset, py::arg("dataset"), py::arg("path"));
  m.def(
      "assert_class_disjoint",
      [](const LabeledDataset& a, const LabeledDataset& b, const std::vector<std::string>& ov) {
        assert_class_disjoint(a, b, ov);
      },
      py::arg("train"), py::arg("pood"), py::arg("declared_overlap"));

  py::class_<PoisonPlan>(m, "PoisonPlan")
      .def_readonly("target_class", &PoisonPlan::target_class)
      .def_readonly("poison_ratio", &PoisonPlan::poison_ratio)
      .def_readonly("target_class_ratio", &PoisonPlan::target_class_ratio)
      .def_readonly("indices", &PoisonPlan::indices)
      .def_readonly("seed", &PoisonPlan::seed)
      .def("to_json", &PoisonPlan::to_json);

  m.def("select_poison_indices", &select_poison_indices, py::arg("dataset"),
        py::arg("target_class"), py::arg("poison_ratio"), py::arg("seed"));

  py::class_<TriggerArtifact>(m, "TriggerArtifact")
      .def(py::init<>())
      .def_property(
          "pattern", [](const TriggerArtifact& t) { return tensor_to_numpy(t.pattern); },
          [](TriggerArtifact& t, const py::array_t<float>& a) { t.pattern = tensor_from_numpy(a); })
      .def_readwrite("constraint", &TriggerArtifact::constraint)
      .def_readwrite("target_class", &TriggerArtifact::target_class)
      .def_readwrite("surrogate_id", &TriggerArtifact::surrogate_id)
      .def_readonly("magnify_scale", &TriggerArtifact::magnify_scale)
      .def("validate", &TriggerArtifact::validate)
      .def("digest", &TriggerArtifact::digest);

  m.def("save_trigger", &save_trigger, py::arg("artifact"), py::arg("path_stem"));
  m.def("load_trigger", &load_trigger, py::arg("path_stem"));
  m.def(
      "apply_trigger",
      [](const py::array_t<float>& image, const TriggerArtifact& t) {
        return tensor_to_numpy(apply_trigger(tensor_from_numpy(image), t));
      },
      py::arg("image"), py::arg("trigger"));
  m.def("magnify", &magnify, py::arg("trigger"), py::arg("scale"));

  m.def("craft_clean_label_poison", &craft_clean_label_poison, py::arg("base"),
        py::arg("trigger"), py::arg("plan"));
  py::class_<PoisonedDataset>(m, "PoisonedDataset")
      .def_readonly("data", &PoisonedDataset::data)
      .def_readonly("plan", &PoisonedDataset::plan)
      .def_readonly("trigger_digest", &PoisonedDataset::trigger_digest);

  m.def(
      "verify_clean_label",
      [](const LabeledDataset& base, const LabeledDataset& poisoned) {
        auto r = verify_clean_label(base, poisoned);
        py::dict d;
        d["modified_indices"] = r.modified_indices;
        d["labels_identical"] = r.labels_identical;
        d["label_changed_indices"] = r.label_changed_indices;
        d["max_linf_deviation"] = r.max_linf_deviation;
        return d;
      },
      py::arg("base"), py::arg("poisoned"));

  m.def(
      "frequency_features",
      [](const py::array_t<float>& images) {
        return tensor_to_numpy(frequency_features(tensor_from_numpy(images)));
      },
      py::arg("images"), "Per-image orthonormal DCT-II magnitudes, (N, C*H*W).");
  m.def(
      "high_band_energy_fraction",
      [](const py::array_t<float>& image, int cutoff) {
        return high_band_energy_fraction(tensor_from_numpy(image), cutoff);
      },
      py::arg("image"), py::arg("cutoff"));

  py::class_<SynthCorpusSpec>(m, "SynthCorpusSpec")
      .def(py::init<>())
      .def_readwrite("corpus_seed", &SynthCorpusSpec::corpus_seed)
      .def_readwrite("name", &SynthCorpusSpec::name)
      .def_readwrite("num_classes", &SynthCorpusSpec::num_classes)
      .def_readwrite("height", &SynthCorpusSpec::height)
      .def_readwrite("width", &SynthCorpusSpec::width);
  m.def("generate_corpus", &generate_corpus, py::arg("spec"), py::arg("per_class"),
        py::arg("split_seed"), py::arg("split_name"));

  m.def(
      "run_pipeline",
      [](const std::string& config_path, const std::vector<std::string>& overrides) {
        auto cfg = ExperimentConfig::load(config_path, overrides);
        auto rec = run_pipeline(cfg);
        py::dict d;
        d["acc"] = rec.aggregate.acc;
        d["tar_acc"] = rec.aggregate.tar_acc;
        d["asr"] = rec.aggregate.asr;
        d["trigger_digest"] = rec.trigger_digest;
        d["record_json"] = rec.to_json();
        return d;
      },
      py::arg("config_path"), py::arg("overrides") = std::vector<std::string>{});
}
