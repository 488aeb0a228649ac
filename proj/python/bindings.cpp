// Python bindings: configuration, training, manifests, evaluation and
// single-episode prediction on numpy arrays.

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <opencv2/core.hpp>

#include "tbtnet/harness.hpp"

namespace py = pybind11;
using namespace tbtnet;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<uint8_t, py::array::c_style | py::array::forcecast>;

std::string value_string(const py::handle& v) {
  if (py::isinstance<py::bool_>(v)) return v.cast<bool>() ? "true" : "false";
  return py::str(v).cast<std::string>();
}

RunConfig config_from(const py::dict& values, const RunConfig& base = {}) {
  RunConfig c = base;
  for (const auto& [k, v] : values) set_config_value(c, k.cast<std::string>(), value_string(v));
  return c;
}

py::dict config_dict(const RunConfig& c) {
  py::dict d;
  for (const auto& key : config_keys()) d[key.c_str()] = get_config_value(c, key);
  return d;
}

torch::Tensor to_tensor(const FloatArray& a) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<float*>(a.data()), shape, torch::kFloat32).clone();
}

FloatArray to_array(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat32).contiguous();
  FloatArray out(std::vector<py::ssize_t>(c.sizes().begin(), c.sizes().end()));
  std::memcpy(out.mutable_data(), c.data_ptr<float>(), static_cast<size_t>(c.numel()) * sizeof(float));
  return out;
}

ByteArray mask_array(const torch::Tensor& m) {
  auto c = m.detach().to(torch::kUInt8).contiguous();
  ByteArray out({c.size(0), c.size(1)});
  std::memcpy(out.mutable_data(), c.data_ptr<uint8_t>(), static_cast<size_t>(c.numel()));
  return out;
}

cv::Mat rgb_mat(const ByteArray& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw ShapeError("images must be HxWx3 uint8 RGB arrays");
  return cv::Mat(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), CV_8UC3,
                 const_cast<uint8_t*>(a.data()))
      .clone();
}

cv::Mat mask_mat(const ByteArray& a) {
  if (a.ndim() != 2) throw ShapeError("masks must be HxW arrays");
  return cv::Mat(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), CV_8UC1,
                 const_cast<uint8_t*>(a.data()))
      .clone();
}

py::dict report_dict(const MetricsReport& r) {
  py::dict d;
  d["mean_iou"] = r.mean_iou;
  d["fb_iou"] = r.fb_iou;
  d["foreground_iou"] = r.foreground_iou;
  d["background_iou"] = r.background_iou;
  d["episodes"] = r.episodes;
  d["shots"] = r.shots;
  d["class_iou"] = r.class_iou;
  return d;
}

class PyModel {
 public:
  PyModel(FewShotModel model, RunConfig config) : model_(std::move(model)), config_(std::move(config)) {}

  py::dict predict(const ByteArray& query, const std::vector<ByteArray>& supports,
                   const std::vector<ByteArray>& masks) {
    std::vector<cv::Mat> s, m;
    for (const auto& a : supports) s.push_back(rgb_mat(a));
    for (const auto& a : masks) m.push_back(mask_mat(a));
    auto q = rgb_mat(query);
    PredictResult r;
    {
      py::gil_scoped_release release;
      r = predict_images(model_, q, s, m, config_.image_size);
    }
    py::dict d;
    d["mask"] = mask_array(r.mask);
    d["layer4"] = mask_array(r.intermediates[0]);
    d["layer3"] = mask_array(r.intermediates[1]);
    d["layer2"] = mask_array(r.intermediates[2]);
    return d;
  }

  int64_t learnable_parameters() const { return count_learnable_params(model_); }
  py::dict config() const { return config_dict(config_); }

 private:
  FewShotModel model_;
  RunConfig config_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Few-shot segmentation core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<LoadError>(m, "LoadError", PyExc_OSError);
  py::register_exception<SamplingError>(m, "SamplingError", PyExc_RuntimeError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);

  m.def("config_keys", &config_keys);
  m.def("default_config", [] { return config_dict(RunConfig{}); });
  m.def(
      "resolve_config",
      [](const py::dict& values, const std::string& file) {
        RunConfig c;
        if (!file.empty()) apply_config_file(c, file);
        return config_dict(config_from(values, c));
      },
      py::arg("values") = py::dict(), py::arg("file") = "",
      "Defaults, then the optional key=value file, then `values`; every value comes back as a string.");
  m.def(
      "validate_config", [](const py::dict& values) { validate_config(config_from(values)); }, py::arg("values"));

  m.def(
      "cosine_affinity",
      [](const FloatArray& query, const FloatArray& support) {
        return to_array(cosine_affinity(to_tensor(query), to_tensor(support)));
      },
      py::arg("query"), py::arg("support"), "[C,Hq,Wq] x [C,Hs,Ws] -> [Hq*Wq, Hs*Ws]");
  m.def("combine_level_losses", &combine_level_losses, py::arg("losses"), py::arg("alpha") = kDefaultLossAlpha);
  m.def(
      "fold_classes",
      [](const std::string& dataset, int fold) {
        auto s = build_fold_split(parse_dataset_kind(dataset), fold);
        return std::make_pair(s.train_classes, s.test_classes);
      },
      py::arg("dataset"), py::arg("fold"), "(train classes, test classes)");
  m.def(
      "generate_synthetic",
      [](const std::filesystem::path& root, int classes, int images_per_class, int image_size, uint64_t seed) {
        SyntheticOptions o;
        o.classes = classes;
        o.images_per_class = images_per_class;
        o.image_size = image_size;
        o.seed = seed;
        generate_synthetic_dataset(root, o);
      },
      py::arg("root"), py::arg("classes") = 4, py::arg("images_per_class") = 12, py::arg("image_size") = 64,
      py::arg("seed") = 0);

  m.def(
      "param_count",
      [](const py::dict& values) {
        auto c = config_from(values);
        BackboneSpec spec;
        spec.variant = c.backbone;
        spec.toy_channels = c.toy_channels;
        spec.seed = c.seed;
        auto backbone = c.backbone == BackboneVariant::toy ? load_backbone(spec) : make_random_backbone(spec, c.seed);
        ModelOptions o;
        o.channels = c.channels;
        o.bi_transformer = c.bi_transformer;
        return count_learnable_params(FewShotModel(backbone, o));
      },
      py::arg("config"), "Learnable parameters of the configured network; resnet variants need no weights here.");

  m.def(
      "extract_features",
      [](const py::dict& values, const FloatArray& image) {
        auto c = config_from(values);
        BackboneSpec spec;
        spec.variant = c.backbone;
        spec.weights = c.weights;
        spec.toy_channels = c.toy_channels;
        spec.seed = c.seed;
        auto backbone = load_backbone(spec);
        auto input = to_tensor(image);
        FeaturePyramid pyramid;
        {
          py::gil_scoped_release release;
          torch::NoGradGuard guard;
          pyramid = backbone.extract(input);
        }
        std::vector<std::vector<FloatArray>> out;
        for (int l = 2; l <= 4; ++l) {
          out.emplace_back();
          for (const auto& f : pyramid.layer(l)) out.back().push_back(to_array(f));
        }
        return out;
      },
      py::arg("config"), py::arg("images"),
      "Block outputs of layers 2, 3 and 4 for [B,3,H,W] images in [0,1].");

  m.def(
      "train",
      [](const py::dict& values, const std::string& resume, const std::function<void(py::dict)>& on_epoch) {
        auto c = config_from(values);
        validate_config(c);
        Trainer trainer(c, build_model(c), make_sampler(c, Partition::train, 1),
                        c.val_episodes > 0 ? make_sampler(c, Partition::test, 1) : nullptr);
        if (!resume.empty()) trainer.load_checkpoint(resume);
        py::list epochs;
        trainer.on_epoch = [&](const EpochResult& e) {
          py::dict d;
          d["epoch"] = e.epoch;
          d["mean_loss"] = e.mean_loss;
          d["seconds"] = e.seconds;
          d["val_miou"] = e.val_miou ? py::cast(*e.val_miou) : py::none();
          epochs.append(d);
          if (on_epoch) on_epoch(d);
        };
        trainer.train();
        return epochs;
      },
      py::arg("config"), py::arg("resume") = "", py::arg("on_epoch") = nullptr,
      "Runs episodic training and returns one dict per epoch.");

  m.def(
      "write_test_manifest",
      [](const py::dict& values, const std::filesystem::path& out) {
        auto m = make_test_manifest(config_from(values));
        write_manifest(out, m);
        return m.entries.size();
      },
      py::arg("config"), py::arg("out"));

  m.def(
      "evaluate",
      [](const py::dict& values, const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
         const std::string& mask_dir) {
        const auto config = config_from(values);
        MetricsReport r;
        {
          py::gil_scoped_release release;
          r = evaluate_checkpoint(config, checkpoint, manifest, mask_dir);
        }
        return report_dict(r);
      },
      py::arg("config"), py::arg("checkpoint"), py::arg("manifest"), py::arg("mask_dir") = "");

  py::class_<PyModel>(m, "Model")
      .def_static(
          "from_checkpoint",
          [](const std::filesystem::path& path, const py::dict& overrides) {
            auto c = config_from(overrides, read_checkpoint_header(path).config);
            return PyModel(load_model_for_eval(path, c), c);
          },
          py::arg("path"), py::arg("overrides") = py::dict(),
          "Model from a training checkpoint; `overrides` may set weights or image_size.")
      .def_static(
          "create",
          [](const py::dict& values) {
            auto c = config_from(values);
            return PyModel(build_model(c), c);
          },
          py::arg("config"), "Freshly initialized model.")
      .def("predict", &PyModel::predict, py::arg("query"), py::arg("supports"), py::arg("masks"),
           "HxWx3 uint8 RGB query, lists of support images and HxW masks; returns 0/1 uint8 masks.")
      .def_property_readonly("learnable_parameters", &PyModel::learnable_parameters)
      .def_property_readonly("config", &PyModel::config);
}
