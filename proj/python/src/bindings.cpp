// Python module mmhdit._core. Configs and reports cross the boundary as JSON
// text; the pure-Python wrapper in mmhdit/__init__.py turns them into dicts.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "json.hpp"
#include "mmhdit/cli.hpp"
#include "mmhdit/datapipe.hpp"
#include "mmhdit/errors.hpp"
#include "mmhdit/flow.hpp"
#include "mmhdit/model.hpp"
#include "mmhdit/trainer.hpp"

namespace py = pybind11;
using json = nlohmann::json;
using namespace mmh;

namespace {

template <class T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <class T>
Tensor<T> to_tensor(const Array<T>& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor<T>::from_data(shape, std::vector<T>(a.data(), a.data() + a.size()));
}

template <class T>
Array<T> to_array(const Tensor<T>& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    Array<T> out(shape);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

std::vector<TextEmbedding<float>> encode(const DiT<float>& model, const std::vector<std::string>& prompts) {
    std::vector<TextEmbedding<float>> out;
    for (const auto& p : prompts) out.push_back(model.encode_prompt(p));
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Multi-multi-head diffusion transformer core";

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", base);
    py::register_exception<IntegrityError>(m, "IntegrityError", base);

    m.def("head_schedule_default", &head_schedule_default, py::arg("layers"));
    m.def("desk_config", [] { return TrainConfig::desk().to_json().dump(); });
    m.def("paper_scale_config", [] { return TrainConfig::paper_scale().to_json().dump(); });
    m.def("validate_config", [](const std::string& text) { return TrainConfig::from_json(json::parse(text)).to_json().dump(); });

    m.def("patchify", [](const Array<double>& x, std::int64_t p) { return to_array(patchify(to_tensor(x), p)); },
          py::arg("latent"), py::arg("patch"));
    m.def("unpatchify",
          [](const Array<double>& t, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t p) {
              return to_array(unpatchify(to_tensor(t), c, h, w, p));
          },
          py::arg("tokens"), py::arg("channels"), py::arg("height"), py::arg("width"), py::arg("patch"));
    m.def("interpolate",
          [](const Array<double>& x1, const Array<double>& x0, std::vector<double> t) {
              auto b = assemble_flow_batch(to_tensor(x1), to_tensor(x0), std::move(t), 0.0);
              return py::make_tuple(to_array(b.xt), to_array(b.target_u));
          },
          py::arg("x1"), py::arg("x0"), py::arg("t"));

    py::class_<DiT<float>>(m, "DiT")
        .def(py::init([](const std::string& config, std::uint64_t seed) {
                 return std::make_unique<DiT<float>>(ModelConfig::from_json(json::parse(config)), seed);
             }),
             py::arg("config_json"), py::arg("seed") = 0)
        .def_property_readonly("config_json", [](const DiT<float>& m) { return m.config().to_json().dump(); })
        .def_property_readonly("trainable_count", &DiT<float>::trainable_count)
        .def("velocity",
             [](const DiT<float>& m, const Array<float>& x, std::vector<double> t, const std::vector<std::string>& prompts) {
                 NoGradGuard guard;
                 return to_array(m.forward(to_tensor(x), t, encode(m, prompts)));
             },
             py::arg("x"), py::arg("t"), py::arg("prompts"))
        .def("sample",
             [](const DiT<float>& m, const std::vector<std::string>& prompts, std::vector<std::int64_t> latent_shape,
                std::int64_t steps, double cfg_scale, std::uint64_t seed) {
                 NoGradGuard guard;
                 py::gil_scoped_release release;
                 auto out = sample<float>(m, encode(m, prompts), {}, Shape(latent_shape.begin(), latent_shape.end()),
                                          SamplerConfig{steps, cfg_scale, seed});
                 py::gil_scoped_acquire acquire;
                 return to_array(out);
             },
             py::arg("prompts"), py::arg("latent_shape"), py::arg("steps") = 20, py::arg("cfg_scale") = 5.0,
             py::arg("seed") = 0);

    m.def("load_model", [](const std::filesystem::path& p) { return load_model(p); }, py::arg("path"));

    py::class_<Trainer>(m, "Trainer")
        .def(py::init([](const std::string& config) { return std::make_unique<Trainer>(TrainConfig::from_json(json::parse(config))); }),
             py::arg("config_json"))
        .def_static("resume",
                    [](const std::string& config, const std::filesystem::path& path) {
                        return std::make_unique<Trainer>(Trainer::resume(TrainConfig::from_json(json::parse(config)), path));
                    },
                    py::arg("config_json"), py::arg("checkpoint"))
        .def("train",
             [](Trainer& t, std::int64_t steps) {
                 auto data = make_training_source(t.config().data, t.config().model);
                 std::vector<std::string> records;
                 for (std::int64_t i = 0; i < steps && !t.finished(); ++i) records.push_back(t.step(*data).to_json().dump());
                 return records;
             },
             py::arg("steps"))
        .def_property_readonly("finished", &Trainer::finished)
        .def_property_readonly("state_json", [](const Trainer& t) { return t.state().to_json().dump(); })
        .def("save_checkpoint", &Trainer::save_checkpoint, py::arg("path"))
        .def("model", [](Trainer& t) -> const DiT<float>& { return t.model(); }, py::return_value_policy::reference_internal);

    m.def("score_bucket", [](double s) { return tag_name(score_bucket(s)); }, py::arg("score"));
    m.def("stage_resize",
          [](std::int64_t width, std::int64_t height, int stage, std::uint64_t seed) {
              Rng rng(seed);
              auto p = stage_resize(width, height, stage, rng);
              return json{{"skipped", p.skipped},
                          {"reason", p.reason},
                          {"scaled", {p.scaled_width, p.scaled_height}},
                          {"crop", {p.crop.x, p.crop.y, p.crop.width, p.crop.height}}}
                  .dump();
          },
          py::arg("width"), py::arg("height"), py::arg("stage"), py::arg("seed") = 0);
    m.def("dedup",
          [](const std::vector<std::string>& ids, const Array<float>& vectors, const std::string& config) {
              if (vectors.ndim() != 2 || static_cast<std::size_t>(vectors.shape(0)) != ids.size()) {
                  throw ContractError("embeddings must be [len(ids), dim]");
              }
              EmbeddingSet set;
              set.dim = vectors.shape(1);
              for (std::size_t i = 0; i < ids.size(); ++i) {
                  set.add(ids[i], std::span<const float>(vectors.data() + i * static_cast<std::size_t>(set.dim),
                                                         static_cast<std::size_t>(set.dim)));
              }
              set.validate();
              return dedup_converge(set, DedupConfig::from_json(json::parse(config))).to_json().dump();
          },
          py::arg("ids"), py::arg("embeddings"), py::arg("config_json") = "{}");

    m.def("cli_run",
          [](const std::vector<std::string>& args) {
              std::ostringstream out, err;
              int code;
              {
                  py::gil_scoped_release release;
                  code = cli::run(args, out, err);
              }
              return py::make_tuple(code, out.str(), err.str());
          },
          py::arg("args"));
}
