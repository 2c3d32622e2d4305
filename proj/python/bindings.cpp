// Python extension: configuration travels as JSON text, images and masks as
// numpy arrays.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "diffris/backbones.hpp"
#include "diffris/config.hpp"
#include "diffris/errors.hpp"
#include "diffris/gradcheck.hpp"
#include "diffris/metrics.hpp"
#include "diffris/model.hpp"
#include "diffris/synthdata.hpp"
#include "diffris/training.hpp"

namespace py = pybind11;
using namespace diffris;

namespace {

using MaskArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using FloatArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

RunConfig parse_config(const std::string& text) {
  return config_from_json(text.empty() ? nlohmann::json::object() : nlohmann::json::parse(text));
}

BinaryMask to_mask(const MaskArray& a) {
  if (a.ndim() != 2) throw ShapeError("mask must be a 2-D array");
  BinaryMask m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  const std::uint8_t* p = a.data();
  for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] = p[i] ? 1 : 0;
  return m;
}

MaskArray from_mask(const BinaryMask& m) {
  MaskArray out({m.height, m.width});
  std::copy(m.values.begin(), m.values.end(), out.mutable_data());
  return out;
}

Image to_image(const FloatArray& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw ShapeError("image must be an H x W x 3 array");
  Image img{static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), Matrix()};
  img.pixels = Eigen::Map<const Matrix>(a.data(), static_cast<Eigen::Index>(img.height) * img.width, 3);
  return img;
}

FloatArray from_image(const Image& img) {
  FloatArray out({img.height, img.width, 3});
  Eigen::Map<Matrix>(out.mutable_data(), img.pixels.rows(), 3) = img.pixels;
  return out;
}

std::vector<metrics::EvalRecord> to_records(const std::vector<std::uint64_t>& inter,
                                            const std::vector<std::uint64_t>& uni) {
  if (inter.size() != uni.size()) throw ShapeError("intersections and unions differ in length");
  std::vector<metrics::EvalRecord> out;
  for (std::size_t i = 0; i < inter.size(); ++i) out.push_back({inter[i], uni[i]});
  return out;
}

py::dict sample_dict(const synthdata::Sample& s) {
  py::dict d;
  d["id"] = s.id;
  d["split"] = s.split;
  d["text"] = synthdata::expression_text(s.scene.expression);
  d["tokens"] = s.triplet.expression.ids;
  d["image"] = from_image(s.triplet.image);
  d["mask"] = from_mask(s.triplet.mask);
  d["scene"] = synthdata::scene_to_json(s.scene).dump();
  return d;
}

backbones::TokenSequence tokens_for(const Model& model, const std::vector<int>& ids) {
  return backbones::TokenSequence::make(ids, model.config().backbones.max_tokens);
}

}  // namespace

PYBIND11_MODULE(_diffris, m) {
  m.doc() = "Referring segmentation core: adapter, decoder, metrics and synthetic data";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<ParameterError>(m, "ParameterError", base.ptr());
  py::register_exception<UsageError>(m, "UsageError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<ContractViolation>(m, "ContractViolation", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  m.def("default_config", [] { return config_to_json(config_from_json(nlohmann::json::object())).dump(); });
  m.def("validate_config", [](const std::string& text) { return config_to_json(parse_config(text)).dump(); },
        py::arg("config"));

  // ---- metrics
  m.def("mask_iou",
        [](const MaskArray& pred, const MaskArray& gt) {
          const auto r = metrics::mask_iou(to_mask(pred), to_mask(gt));
          return py::make_tuple(r.intersection, r.union_area);
        },
        py::arg("pred"), py::arg("gt"));
  m.def("summarize",
        [](const std::vector<std::uint64_t>& inter, const std::vector<std::uint64_t>& uni,
           const std::vector<double>& thresholds) {
          const auto recs = to_records(inter, uni);
          return metrics::summary_json(metrics::summarize(recs, thresholds), recs).dump();
        },
        py::arg("intersections"), py::arg("unions"), py::arg("thresholds") = metrics::kDefaultThresholds);
  m.def("emit_report",
        [](const std::vector<std::uint64_t>& inter, const std::vector<std::uint64_t>& uni,
           const std::vector<double>& thresholds) {
          return metrics::emit_report(metrics::summarize(to_records(inter, uni), thresholds));
        },
        py::arg("intersections"), py::arg("unions"), py::arg("thresholds") = metrics::kDefaultThresholds);

  // ---- synthetic data
  m.def("generate_samples",
        [](int n, std::uint64_t seed, const std::string& config) {
          const auto samples = synthdata::generate_samples(n, seed, parse_config(config).data);
          py::list out;
          for (const auto& s : samples) out.append(sample_dict(s));
          return out;
        },
        py::arg("n"), py::arg("seed"), py::arg("config") = "");
  m.def("generate_split",
        [](int n, std::uint64_t seed, const std::string& config, const std::filesystem::path& out) {
          return synthdata::generate_split(n, seed, parse_config(config).data, out);
        },
        py::arg("n"), py::arg("seed"), py::arg("config"), py::arg("out"));
  m.def("tokenize_words",
        [](const std::vector<std::string>& words) {
          std::vector<int> ids;
          for (const auto& w : words) ids.push_back(synthdata::word_id(w));
          return ids;
        },
        py::arg("words"));

  // ---- forward diffusion
  m.def("alpha_bars",
        [](int steps, double beta_start, double beta_end) {
          return backbones::make_schedule(steps, beta_start, beta_end).alpha_bars;
        },
        py::arg("steps"), py::arg("beta_start"), py::arg("beta_end"));
  m.def("forward_diffuse",
        [](const FloatArray& x0, int t, int steps, double beta_start, double beta_end, const FloatArray& noise) {
          if (x0.ndim() != 2 || noise.ndim() != 2) throw ShapeError("x0 and noise must be 2-D");
          const Eigen::Map<const Matrix> x(x0.data(), x0.shape(0), x0.shape(1));
          const Eigen::Map<const Matrix> e(noise.data(), noise.shape(0), noise.shape(1));
          const Matrix out =
              backbones::forward_diffuse(x, t, backbones::make_schedule(steps, beta_start, beta_end), e);
          FloatArray r({out.rows(), out.cols()});
          Eigen::Map<Matrix>(r.mutable_data(), out.rows(), out.cols()) = out;
          return r;
        },
        py::arg("x0"), py::arg("t"), py::arg("steps"), py::arg("beta_start"), py::arg("beta_end"),
        py::arg("noise"));

  // ---- model
  py::class_<Model>(m, "Model")
      .def(py::init([](const std::string& config) { return Model(parse_config(config).model); }),
           py::arg("config") = "")
      .def("parameter_names",
           [](const Model& model) {
             std::vector<std::string> names;
             for (const auto& [name, p] : model.params().tensors()) names.push_back(name);
             return names;
           })
      .def("parameter",
           [](const Model& model, const std::string& name) {
             const Matrix& v = model.params().at(name).value;
             FloatArray r({v.rows(), v.cols()});
             Eigen::Map<Matrix>(r.mutable_data(), v.rows(), v.cols()) = v;
             return r;
           },
           py::arg("name"))
      .def("load_checkpoint",
           [](Model& model, const std::filesystem::path& path) {
             training::restore_params(model, training::load_checkpoint(path));
           },
           py::arg("path"))
      .def("predict_logits",
           [](Model& model, const FloatArray& image, const std::vector<int>& tokens) {
             const Image img = to_image(image);
             const Matrix logits = model.predict_logits(img, tokens_for(model, tokens));
             FloatArray r({img.height, img.width});
             Eigen::Map<Matrix>(r.mutable_data(), logits.rows(), 1) = logits;
             return r;
           },
           py::arg("image"), py::arg("tokens"))
      .def("predict",
           [](Model& model, const FloatArray& image, const std::vector<int>& tokens, double threshold) {
             return from_mask(model.predict(to_image(image), tokens_for(model, tokens), threshold));
           },
           py::arg("image"), py::arg("tokens"), py::arg("threshold") = 0.0);

  // ---- training and evaluation
  m.def("train",
        [](const std::string& config, const std::filesystem::path& data, const std::filesystem::path& out) {
          const RunConfig cfg = parse_config(config);
          const auto train_set = synthdata::load_split(data, "train", cfg.model.backbones.max_tokens);
          const auto val_set = synthdata::load_split(data, "val", cfg.model.backbones.max_tokens);
          if (train_set.empty()) throw UsageError("dataset " + data.string() + " has no training samples");
          Model model(cfg.model);
          training::TrainOptions options;
          options.out_dir = out;
          options.thresholds = cfg.eval.thresholds;
          options.binarize_threshold = cfg.eval.binarize_threshold;
          py::gil_scoped_release release;
          const auto result = training::train(model, cfg.training, train_set, val_set, options);
          std::vector<std::string> epochs;
          for (const auto& e : result.epochs) epochs.push_back(training::epoch_json(e).dump());
          return epochs;
        },
        py::arg("config"), py::arg("data"), py::arg("out"));
  m.def("evaluate",
        [](const std::string& config, const std::filesystem::path& checkpoint, const std::filesystem::path& data,
           const std::string& split) {
          const RunConfig cfg = parse_config(config);
          Model model(cfg.model);
          training::restore_params(model, training::load_checkpoint(checkpoint));
          const auto samples = synthdata::load_split(data, split, cfg.model.backbones.max_tokens);
          if (samples.empty()) throw UsageError("split '" + split + "' of " + data.string() + " is empty");
          std::vector<metrics::EvalRecord> records;
          const auto s = training::evaluate(model, samples, cfg.eval.thresholds, cfg.eval.binarize_threshold,
                                            &records);
          return metrics::summary_json(s, records).dump();
        },
        py::arg("config"), py::arg("checkpoint"), py::arg("data"), py::arg("split") = "val");

  m.def("gradcheck",
        [](std::uint64_t seed) {
          gradcheck::Options opts;
          opts.seed = seed;
          py::list out;
          for (const auto& r : gradcheck::run_all(opts)) {
            py::dict d;
            d["component"] = r.component;
            d["max_error"] = r.max_error;
            d["tolerance"] = r.tolerance;
            d["worst_tensor"] = r.worst_tensor;
            d["entries"] = r.entries;
            d["pass"] = r.pass;
            out.append(d);
          }
          return out;
        },
        py::arg("seed") = 0);
}
