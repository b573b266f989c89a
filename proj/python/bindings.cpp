#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <random>

#include "waterseg/checkpoint.hpp"
#include "waterseg/errors.hpp"
#include "waterseg/experiment.hpp"
#include "waterseg/harness.hpp"
#include "waterseg/lora.hpp"
#include "waterseg/metrics.hpp"
#include "waterseg/overlay.hpp"
#include "waterseg/synth.hpp"

namespace py = pybind11;
using namespace waterseg;
using nlohmann::json;

// Structured results cross the boundary as JSON text; the Python package
// decodes them into dicts.

namespace {

using U8Array = py::array_t<uint8_t, py::array::c_style | py::array::forcecast>;

Image image_from_array(const U8Array& a) {
    if (a.ndim() != 3 || a.shape(2) != 3) throw ShapeError("image array must be H x W x 3 uint8");
    Image img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)), 3);
    std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
    return img;
}

Mask mask_from_array(const U8Array& a) {
    if (a.ndim() != 2) throw ShapeError("mask array must be H x W");
    Mask m(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
    std::copy(a.data(), a.data() + a.size(), m.labels.begin());
    return m;
}

U8Array to_array(const Image& img) {
    U8Array out({img.height, img.width, img.channels});
    std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
    return out;
}

U8Array to_array(const Mask& m) {
    U8Array out({m.height, m.width});
    std::copy(m.labels.begin(), m.labels.end(), out.mutable_data());
    return out;
}

} // namespace

PYBIND11_MODULE(_waterseg, m) {
    m.doc() = "SegFormer water segmentation core";

    // Translators are tried newest first, so the base goes in first.
    auto& base = py::register_exception<Error>(m, "WatersegError", PyExc_RuntimeError);
    py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<StateError>(m, "StateError", base.ptr());
    py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
    py::register_exception<IoError>(m, "IoError", base.ptr());
    py::register_exception<DivergenceError>(m, "DivergenceError", base.ptr());

    m.def(
        "synth",
        [](const std::string& out, int count, int image_size, uint64_t seed, double train_fraction,
           double val_fraction) {
            SynthOptions o{count, image_size, seed, train_fraction, val_fraction};
            return synth_generate(o, out).string();
        },
        py::arg("out"), py::arg("count") = 20, py::arg("image_size") = 64, py::arg("seed") = 0,
        py::arg("train_fraction") = 0.70, py::arg("val_fraction") = 0.15);

    m.def(
        "render_scene",
        [](int size, uint64_t seed) {
            const auto s = render_scene(size, seed);
            return py::make_tuple(to_array(s.image), to_array(s.mask));
        },
        py::arg("size"), py::arg("seed"));

    m.def(
        "prepare_manifest_json",
        [](const std::string& data_json) {
            RunConfig c = json{{"data", json::parse(data_json)}}.get<RunConfig>();
            return json(prepare_manifest(c.data)).dump();
        },
        py::arg("data_json"));

    m.def(
        "confusion",
        [](const U8Array& pred, const U8Array& gt) {
            ConfusionMatrix cm;
            confusion_accumulate(cm, mask_from_array(pred), mask_from_array(gt));
            return py::dict(py::arg("tp") = cm.tp, py::arg("fp") = cm.fp, py::arg("fn") = cm.fn, py::arg("tn") = cm.tn);
        },
        py::arg("pred"), py::arg("gt"));

    m.def(
        "metrics_json",
        [](uint64_t tp, uint64_t fp, uint64_t fn, uint64_t tn) {
            return json(compute_metrics(ConfusionMatrix{tp, fp, fn, tn})).dump();
        },
        py::arg("tp"), py::arg("fp"), py::arg("fn"), py::arg("tn"));

    m.def(
        "overlay",
        [](const U8Array& image, const U8Array& pred, const U8Array& gt, double alpha) {
            return to_array(render_overlay(image_from_array(image), mask_from_array(pred), mask_from_array(gt), alpha));
        },
        py::arg("image"), py::arg("pred"), py::arg("gt"), py::arg("alpha") = 0.5);

    m.def(
        "train_json",
        [](const std::string& config_json) {
            const auto config = json::parse(config_json).get<RunConfig>();
            py::gil_scoped_release release;
            return json(train(config)).dump();
        },
        py::arg("config_json"));

    m.def(
        "evaluate_json",
        [](const std::string& checkpoint, const std::string& data_json, const std::string& split, int image_size,
           double threshold, const std::string& averaging) {
            RunConfig c = json{{"data", json::parse(data_json)}}.get<RunConfig>();
            const auto manifest = prepare_manifest(c.data);
            py::gil_scoped_release release;
            return json(evaluate_checkpoint(checkpoint, manifest, split_from_string(split), image_size, threshold,
                                            averaging_from_string(averaging)))
                .dump();
        },
        py::arg("checkpoint"), py::arg("data_json"), py::arg("split") = "test", py::arg("image_size") = 64,
        py::arg("threshold") = 0.5, py::arg("averaging") = "micro");

    m.def(
        "predict",
        [](const std::string& checkpoint, const std::string& image, const std::string& out_png, int image_size,
           double threshold) { return to_array(predict_file(checkpoint, image, out_png, image_size, threshold)); },
        py::arg("checkpoint"), py::arg("image"), py::arg("out_png"), py::arg("image_size") = 64,
        py::arg("threshold") = 0.5);

    m.def(
        "experiment_json",
        [](const std::string& config_json) {
            const auto config = experiment_config_from_json(json::parse(config_json));
            py::gil_scoped_release release;
            return json(experiment_matrix(config)).dump();
        },
        py::arg("config_json"));

    m.def(
        "model_summary",
        [](const std::string& model, bool lora, uint64_t seed) {
            SegFormerModel<float> net(model_config_from_json(json::parse(model)), seed);
            if (lora) {
                std::mt19937_64 rng(seed);
                inject_lora(net, LoraSettings{}, rng);
            }
            const auto report = trainable_param_report(net);
            return py::dict(py::arg("total") = report.trainable + report.frozen, py::arg("trainable") = report.trainable,
                            py::arg("table") = format_summary(net.summary()));
        },
        py::arg("model") = "\"nano\"", py::arg("lora") = false, py::arg("seed") = 0);
}
