#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "gfsseg/experiment.hpp"
#include "gfsseg/rng.hpp"

namespace py = pybind11;
using namespace gfsseg;

namespace {

py::array_t<double> tensor_to_numpy(const Tensor& t) {
  py::array_t<double> out({t.n, t.c, t.h, t.w});
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

Tensor numpy_to_tensor(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  py::buffer_info info = a.request();
  Tensor t;
  if (info.ndim == 4)
    t = Tensor(static_cast<int>(info.shape[0]), static_cast<int>(info.shape[1]),
               static_cast<int>(info.shape[2]), static_cast<int>(info.shape[3]));
  else if (info.ndim == 3)
    t = Tensor(1, static_cast<int>(info.shape[0]), static_cast<int>(info.shape[1]),
               static_cast<int>(info.shape[2]));
  else
    throw domain_error("expected a (c,h,w) or (n,c,h,w) array");
  const double* src = static_cast<const double*>(info.ptr);
  std::copy(src, src + t.size(), t.data.begin());
  return t;
}

py::array_t<std::int32_t> labels_to_numpy(const LabelGrid& g) {
  py::array_t<std::int32_t> out({g.h, g.w});
  std::copy(g.data.begin(), g.data.end(), out.mutable_data());
  return out;
}

LabelGrid numpy_to_labels(
    const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>& a) {
  py::buffer_info info = a.request();
  if (info.ndim != 2) throw domain_error("expected a (h,w) int array");
  LabelGrid g(static_cast<int>(info.shape[0]), static_cast<int>(info.shape[1]));
  const std::int32_t* src = static_cast<const std::int32_t*>(info.ptr);
  std::copy(src, src + g.data.size(), g.data.begin());
  return g;
}

EvalMode mode_from_string(const std::string& mode) {
  if (mode == "generalized") return EvalMode::generalized;
  if (mode == "novel_only") return EvalMode::novel_only;
  throw domain_error("eval mode must be 'generalized' or 'novel_only'");
}

FreezeVariant freeze_from_string(const std::string& name) {
  if (name == "none") return FreezeVariant::none;
  if (name == "freeze_backbone") return FreezeVariant::freeze_backbone;
  if (name == "freeze_all_but_last") return FreezeVariant::freeze_all_but_last;
  throw domain_error("freeze policy must be none, freeze_backbone or freeze_all_but_last");
}

py::dict report_to_dict(const EvalReport& r) {
  py::dict d;
  d["fold"] = r.fold_index;
  d["shots"] = r.shots;
  d["mode"] = r.mode == EvalMode::novel_only ? "novel_only" : "generalized";
  d["base_miou"] = r.base_miou;
  d["novel_miou"] = r.novel_miou;
  d["total_miou"] = r.total_miou;
  py::dict per_class;
  for (const auto& [cls, iou] : r.per_class_iou) per_class[py::int_(cls)] = iou;
  d["per_class_iou"] = per_class;
  return d;
}

}  // namespace

PYBIND11_MODULE(_gfsseg, m) {
  m.doc() = "generalized few-shot semantic segmentation core";

  py::register_exception<domain_error>(m, "DomainError", PyExc_ValueError);
  py::register_exception<config_error>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ingestion_error>(m, "IngestionError", PyExc_IOError);
  py::register_exception<numeric_error>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<eval_error>(m, "EvalError", PyExc_ValueError);

  py::class_<DatasetSpec>(m, "DatasetSpec")
      .def_readonly("name", &DatasetSpec::name)
      .def_readonly("num_classes", &DatasetSpec::num_classes)
      .def_readonly("ignore_value", &DatasetSpec::ignore_value)
      .def_readonly("num_folds", &DatasetSpec::num_folds);

  py::class_<FoldSpec>(m, "FoldSpec")
      .def_readonly("fold_index", &FoldSpec::fold_index)
      .def_readonly("base_classes", &FoldSpec::base_classes)
      .def_readonly("novel_classes", &FoldSpec::novel_classes)
      .def_readonly("ratio_shift", &FoldSpec::ratio_shift);

  py::class_<SegmentationSample>(m, "Sample")
      .def_readonly("id", &SegmentationSample::id)
      .def_property_readonly(
          "image", [](const SegmentationSample& s) { return tensor_to_numpy(s.image); })
      .def_property_readonly(
          "labels", [](const SegmentationSample& s) { return labels_to_numpy(s.labels); });

  py::class_<SyntheticDataset>(m, "Dataset")
      .def_readonly("train", &SyntheticDataset::train)
      .def_readonly("validation", &SyntheticDataset::validation)
      .def_readonly("spec", &SyntheticDataset::spec);

  py::class_<Episode>(m, "Episode")
      .def_readonly("shots", &Episode::shots)
      .def_readonly("support", &Episode::support)
      .def_readonly("eval_set", &Episode::eval_set);

  m.def("pascal_fold_classes", &pascal_fold_classes, py::arg("fold_index"));
  m.def("coco_fold_classes", &coco_fold_classes, py::arg("fold_index"));
  m.def(
      "make_fold",
      [](const SyntheticDataset& data, int fold_index, int ratio_shift) {
        return make_fold(data.spec, fold_index, ratio_shift);
      },
      py::arg("dataset"), py::arg("fold_index"), py::arg("ratio_shift") = 0);
  m.def("generate_synthetic_dataset", &generate_synthetic_dataset, py::arg("num_classes"),
        py::arg("train_images"), py::arg("val_images"), py::arg("height"), py::arg("width"),
        py::arg("seed"));
  m.def("load_dataset", &load_dataset, py::arg("root"));
  m.def("save_dataset", &save_dataset, py::arg("dataset"), py::arg("root"));
  m.def(
      "sample_episode",
      [](const SyntheticDataset& data, const FoldSpec& fold, int shots, std::uint64_t seed) {
        return sample_episode(data.train, data.validation, fold, shots, seed);
      },
      py::arg("dataset"), py::arg("fold"), py::arg("shots"), py::arg("seed"));

  py::class_<NetworkConfig>(m, "NetworkConfig")
      .def(py::init<>())
      .def_readwrite("backbone_channels", &NetworkConfig::backbone_channels)
      .def_readwrite("classifier_hidden", &NetworkConfig::classifier_hidden)
      .def_readwrite("num_outputs", &NetworkConfig::num_outputs)
      .def_readwrite("pooling_scales", &NetworkConfig::pooling_scales)
      .def_readwrite("aux_tap", &NetworkConfig::aux_tap);

  py::class_<Network>(m, "Network")
      .def_property_readonly("config", [](const Network& n) { return n.config; })
      .def_property_readonly("num_parameters",
                             [](const Network& n) { return count_parameters(n); });

  m.def("build_network", &build_network, py::arg("config"), py::arg("seed"));
  m.def(
      "forward",
      [](Network& net, const py::array_t<double, py::array::c_style | py::array::forcecast>& x) {
        ForwardResult out = forward(net, numpy_to_tensor(x), Mode::eval);
        return tensor_to_numpy(out.logits);
      },
      py::arg("net"), py::arg("images"), "eval-mode forward, returns logits (n,c,h,w)");
  m.def(
      "predict",
      [](Network& net, const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
         const std::vector<int>& output_classes) {
        ForwardResult out = forward(net, numpy_to_tensor(x), Mode::eval);
        return labels_to_numpy(predict_labels(out.logits, 0, output_classes));
      },
      py::arg("net"), py::arg("image"), py::arg("output_classes"));
  m.def("expand_classifier_outputs", &expand_classifier_outputs, py::arg("net"),
        py::arg("old_classes"), py::arg("new_classes"), py::arg("seed"));
  m.def("save_checkpoint", &save_checkpoint, py::arg("net"), py::arg("path"));
  m.def("load_checkpoint", [](const std::string& path) { return load_checkpoint(path); },
        py::arg("path"));
  m.def(
      "parameter_fraction",
      [](Network& net, const std::string& freeze) {
        return parameter_fraction(net, FreezePolicy{freeze_from_string(freeze)});
      },
      py::arg("net"), py::arg("freeze"));

  m.def(
      "masked_cross_entropy",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& logits,
         const std::vector<py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>>&
             labels,
         int ignore_value) {
        std::vector<LabelGrid> grids;
        grids.reserve(labels.size());
        for (const auto& l : labels) grids.push_back(numpy_to_labels(l));
        return masked_cross_entropy(numpy_to_tensor(logits), grids, ignore_value);
      },
      py::arg("logits"), py::arg("labels"), py::arg("ignore_value") = 255);
  m.def("triplet_distance", &triplet_distance, py::arg("x"), py::arg("y"));
  m.def("triplet_loss", &triplet_loss, py::arg("anchor"), py::arg("positive"),
        py::arg("negative"), py::arg("mu") = 1.0);

  py::class_<ConfusionAccumulator>(m, "Confusion")
      .def(py::init<>())
      .def(
          "add",
          [](ConfusionAccumulator& acc,
             const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>& pred,
             const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>& truth,
             int ignore_value) {
            accumulate(acc, numpy_to_labels(pred), numpy_to_labels(truth), ignore_value);
          },
          py::arg("pred"), py::arg("truth"), py::arg("ignore_value") = 255)
      .def(
          "finalize",
          [](const ConfusionAccumulator& acc, const FoldSpec& fold, const std::string& mode) {
            return report_to_dict(finalize(acc, fold, mode_from_string(mode)));
          },
          py::arg("fold"), py::arg("mode") = "generalized");

  m.def(
      "evaluate",
      [](Network& net, const std::vector<SegmentationSample>& samples, const FoldSpec& fold,
         const std::vector<int>& output_classes, const std::string& mode, int ignore_value) {
        return report_to_dict(evaluate_network(net, samples, fold, output_classes,
                                               mode_from_string(mode), ignore_value));
      },
      py::arg("net"), py::arg("samples"), py::arg("fold"), py::arg("output_classes"),
      py::arg("mode") = "generalized", py::arg("ignore_value") = 255);

  m.def("gfsseg_pascal_reference", [] {
    py::list rows;
    for (const auto& r : gfsseg_pascal_reference()) {
      py::dict d;
      d["shots"] = r.shots;
      d["base_miou"] = r.base_miou;
      d["novel_miou"] = r.novel_miou;
      d["total_miou"] = r.total_miou;
      d["source"] = "from paper";
      rows.append(d);
    }
    return rows;
  });

  m.def(
      "run_experiment_json",
      [](const std::string& text, const std::string& source_name) {
        ExperimentConfig cfg = parse_experiment_config(text, source_name);
        ExperimentResult result = run_experiment(cfg);
        py::dict d;
        d["summary_csv"] = result.summary_csv;
        d["cross_fold_csv"] = result.cross_fold_csv;
        py::list rows;
        for (const auto& r : result.rows) {
          py::dict row;
          row["method"] = r.method;
          row["fold"] = r.fold;
          row["shots"] = r.shots;
          row["seed"] = r.seed;
          row["base_miou"] = r.base_miou;
          row["novel_miou"] = r.novel_miou;
          row["total_miou"] = r.total_miou;
          rows.append(row);
        }
        d["rows"] = rows;
        return d;
      },
      py::arg("text"), py::arg("source_name") = "<inline>");
  m.def("run_experiment_file", [](const std::string& path) {
    ExperimentConfig cfg = load_experiment_config(path);
    ExperimentResult result = run_experiment(cfg);
    return result.summary_csv;
  });
  m.def("render_report", &render_report, py::arg("out_dir"));
}
