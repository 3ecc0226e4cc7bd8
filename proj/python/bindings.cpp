#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "lfm/diagnostics.hpp"
#include "lfm/experiment.hpp"
#include "lfm/forecast.hpp"
#include "lfm/pde.hpp"
#include "lfm/schedules.hpp"

namespace py = pybind11;
using namespace lfm;

namespace {

// dicts go through the json module in both directions
nlohmann::json to_nl(const py::object& o) {
  if (py::isinstance<py::str>(o)) return nlohmann::json::parse(o.cast<std::string>());
  auto dumps = py::module_::import("json").attr("dumps");
  return nlohmann::json::parse(dumps(o).cast<std::string>());
}

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

py::array_t<double> frames_array(const pde::Trajectory& t) {
  std::vector<py::ssize_t> shape{py::ssize_t(t.frames)};
  for (auto e : t.extents) shape.push_back(py::ssize_t(e));
  shape.push_back(py::ssize_t(t.channels));
  py::array_t<double> a(shape);
  std::copy(t.data.begin(), t.data.end(), a.mutable_data());
  return a;
}

// Array shaped (frames, extents..., channels) into a trajectory.
void set_frames(pde::Trajectory& t, const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() < 3) throw std::invalid_argument("data must be (frames, extents..., channels)");
  t.frames = std::size_t(a.shape(0));
  t.extents.clear();
  for (py::ssize_t i = 1; i + 1 < a.ndim(); ++i) t.extents.push_back(std::size_t(a.shape(i)));
  t.channels = std::size_t(a.shape(a.ndim() - 1));
  t.data.assign(a.data(), a.data() + a.size());
  t.domain.dim = t.extents.size();
}

py::dict rollout_dict(const forecast::RolloutResult& r) {
  std::vector<py::ssize_t> shape{py::ssize_t(r.members), py::ssize_t(r.horizon)};
  for (auto e : r.extents) shape.push_back(py::ssize_t(e));
  shape.push_back(py::ssize_t(r.channels));
  py::array_t<double> frames(shape);
  std::copy(r.frames.begin(), r.frames.end(), frames.mutable_data());
  py::dict d;
  d["frames"] = frames;
  d["mean"] = forecast::ensemble_mean(r);
  d["flagged"] = r.flagged;
  d["valid_steps"] = r.valid_steps;
  d["encode_calls"] = r.encode_calls;
  d["decode_calls"] = r.decode_calls;
  return d;
}

}  // namespace

PYBIND11_MODULE(lfm, m) {
  m.doc() = "Latent flow-matching forecasts of PDE trajectories";

  py::register_exception<forecast::DigestMismatch>(m, "DigestMismatch", PyExc_RuntimeError);
  py::register_exception<forecast::TrainingError>(m, "TrainingError", PyExc_RuntimeError);
  py::register_exception<pde::CflError>(m, "CflError", PyExc_RuntimeError);

  py::class_<DiffusionPath>(m, "DiffusionPath")
      .def_static("flow_linear", &DiffusionPath::flow_linear)
      .def_static("exponential", &DiffusionPath::exponential, py::arg("sigma_min"),
                  py::arg("variance_preserving") = true)
      .def_static("vpddpm", &DiffusionPath::vpddpm, py::arg("beta_min") = 1e-4, py::arg("beta_max") = 2e-2)
      .def_static("from_dict", [](const py::object& o) { return to_nl(o).get<DiffusionPath>(); })
      .def("to_dict", [](const DiffusionPath& p) { return to_py(nlohmann::json(p)); })
      .def_property_readonly("kind", [](const DiffusionPath& p) { return to_string(p.kind); })
      .def_readonly("sigma_min", &DiffusionPath::sigma_min)
      .def("alpha_sigma", [](const DiffusionPath& p, double t) {
        auto a = alpha_sigma(p, t);
        return py::make_tuple(a.alpha, a.sigma);
      })
      .def("lambda_", [](const DiffusionPath& p, double t) { return lambda_of(p, t); })
      .def(
          "grid",
          [](const DiffusionPath& p, std::size_t steps, const std::string& spacing) {
            return make_grid(p, steps, grid_spacing_from_string(spacing)).knots;
          },
          py::arg("steps"), py::arg("spacing") = "uniform-t");

  py::class_<pde::Trajectory>(m, "Trajectory")
      .def(py::init<>())
      .def_readonly("extents", &pde::Trajectory::extents)
      .def_readonly("channels", &pde::Trajectory::channels)
      .def_readonly("frames", &pde::Trajectory::frames)
      .def_readwrite("dt", &pde::Trajectory::dt)
      .def_readwrite("xi", &pde::Trajectory::xi)
      .def_property("data", &frames_array, &set_frames)
      .def("validate", &pde::Trajectory::validate, py::arg("min_frames") = 0);

  py::class_<pde::Dataset>(m, "Dataset")
      .def_readonly("problem", &pde::Dataset::problem)
      .def_readonly("trajectories", &pde::Dataset::trajectories)
      .def_readonly("mean", &pde::Dataset::mean)
      .def_readonly("stddev", &pde::Dataset::stddev)
      .def("__len__", [](const pde::Dataset& d) { return d.trajectories.size(); })
      .def("split", [](const pde::Dataset& d, const std::string& s) { return d.indices(pde::split_from_string(s)); })
      .def("save", [](const pde::Dataset& d, const std::filesystem::path& p) { pde::write_dataset(d, p); });

  m.def("generate_dataset", [](const py::object& cfg) {
    auto j = to_nl(cfg);
    auto g = pde::GenConfig::defaults(j.value("problem", std::string("heat2d")));
    nlohmann::json base = g;
    base.merge_patch(j);
    return pde::generate_dataset(base.get<pde::GenConfig>());
  }, py::arg("config"), "Dataset from a generation config (dict or JSON string); unset keys take problem defaults.");
  m.def("read_dataset", &pde::read_dataset);
  m.def("gen_heat2d", &pde::gen_heat2d, py::arg("nu"), py::arg("n"), py::arg("frames"), py::arg("dt"), py::arg("seed"));
  m.def("gen_burgers1d", &pde::gen_burgers1d, py::arg("nu"), py::arg("n"), py::arg("frames"), py::arg("dt"),
        py::arg("seed"), py::arg("substeps") = 1);
  m.def(
      "gen_vorticity2d",
      [](double re, std::size_t n, std::size_t frames, double dt, std::size_t mode, std::uint64_t seed) {
        return pde::gen_vorticity2d(re, n, frames, dt, mode, seed);
      },
      py::arg("re"), py::arg("n"), py::arg("frames"), py::arg("dt"), py::arg("forcing_mode"), py::arg("seed"));

  m.def(
      "nrmse",
      [](const pde::Trajectory& pred, const pde::Trajectory& ref, std::size_t begin, std::size_t end,
         std::size_t variable) { return diag::nrmse(pred, ref, {begin, end}, variable); },
      py::arg("pred"), py::arg("ref"), py::arg("begin"), py::arg("end"), py::arg("variable") = 0);
  m.def(
      "energy_spectrum",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& field) {
        std::vector<std::size_t> ext;
        for (py::ssize_t i = 0; i < field.ndim(); ++i) ext.push_back(std::size_t(field.shape(i)));
        auto s = diag::energy_spectrum({field.data(), std::size_t(field.size())}, ext);
        return py::make_tuple(s.energy, s.counts);
      },
      py::arg("field"), "Radially binned energy of a 1-D or square 2-D periodic field; returns (energy, counts).");
  m.def(
      "windowed_spectrum",
      [](const pde::Trajectory& t, std::size_t center, std::size_t half_width, std::size_t variable) {
        auto s = diag::windowed_spectrum(t, center, half_width, variable);
        return py::make_tuple(s.energy, s.counts);
      },
      py::arg("traj"), py::arg("center"), py::arg("half_width"), py::arg("variable") = 0);

  py::class_<experiment::ExperimentConfig>(m, "ExperimentConfig")
      .def(py::init<>())
      .def_static("from_dict", [](const py::object& o) { return to_nl(o).get<experiment::ExperimentConfig>(); })
      .def_static("load", &experiment::load_config)
      .def("to_dict", [](const experiment::ExperimentConfig& c) { return to_py(nlohmann::json(c)); })
      .def("digest", &experiment::ExperimentConfig::digest);

  py::class_<forecast::CodecCheckpoint>(m, "CodecCheckpoint")
      .def("digest", &forecast::CodecCheckpoint::digest)
      .def("save", [](const forecast::CodecCheckpoint& c, const std::filesystem::path& p) { save_checkpoint(c, p); })
      .def(
          "reconstruction_error",
          [](const forecast::CodecCheckpoint& c, const pde::Dataset& ds, const std::string& split,
             std::size_t max_traj) { return reconstruction_error(c, ds, pde::split_from_string(split), max_traj); },
          py::arg("dataset"), py::arg("split") = "test", py::arg("max_trajectories") = 0);

  py::class_<forecast::DynamicsCheckpoint>(m, "DynamicsCheckpoint")
      .def("digest", &forecast::DynamicsCheckpoint::digest)
      .def_property_readonly("is_flow", &forecast::DynamicsCheckpoint::is_flow)
      .def_readonly("codec_digest", &forecast::DynamicsCheckpoint::codec_digest)
      .def("save",
           [](const forecast::DynamicsCheckpoint& c, const std::filesystem::path& p) { save_checkpoint(c, p); });

  m.def("load_codec", &forecast::load_codec);
  m.def("load_dynamics", &forecast::load_dynamics);

  // Training releases the GIL; the C++ side never touches Python objects.
  m.def(
      "train_autoencoder",
      [](const experiment::ExperimentConfig& c, const pde::Dataset& ds) {
        py::gil_scoped_release nogil;
        return forecast::train_autoencoder(c.train_ae, c.codec, ds, c.observe);
      },
      py::arg("config"), py::arg("dataset"));
  m.def(
      "train_flow",
      [](const experiment::ExperimentConfig& c, const forecast::CodecCheckpoint& codec, const pde::Dataset& ds) {
        py::gil_scoped_release nogil;
        return forecast::train_flow(c.train_fm, c.denoiser, codec, ds);
      },
      py::arg("config"), py::arg("codec"), py::arg("dataset"));
  m.def(
      "train_ar_baseline",
      [](const experiment::ExperimentConfig& c, const forecast::CodecCheckpoint& codec, const pde::Dataset& ds) {
        py::gil_scoped_release nogil;
        return forecast::train_ar_baseline(c.train_ar, c.denoiser, codec, ds);
      },
      py::arg("config"), py::arg("codec"), py::arg("dataset"));

  m.def(
      "rollout",
      [](const forecast::CodecCheckpoint& codec, const forecast::DynamicsCheckpoint& dyn, const pde::Trajectory& init,
         std::size_t start, std::size_t horizon, std::size_t ensemble, const std::string& mode, std::uint64_t seed,
         std::size_t sample_steps) {
        forecast::RolloutOptions o;
        o.horizon = horizon;
        o.ensemble = ensemble;
        o.mode = forecast::rollout_mode_from_string(mode);
        o.seed = seed;
        o.sample_steps = sample_steps;
        forecast::RolloutResult r;
        {
          py::gil_scoped_release nogil;
          r = forecast::rollout(codec, dyn, init, start, o);
        }
        return rollout_dict(r);
      },
      py::arg("codec"), py::arg("dynamics"), py::arg("init"), py::arg("start") = 0, py::arg("horizon") = 10,
      py::arg("ensemble") = 1, py::arg("mode") = "flow-euler", py::arg("seed") = 0, py::arg("sample_steps") = 0,
      "Dict with frames (members, horizon, extents..., channels), the ensemble-mean trajectory and flags.");

  m.def(
      "cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "lfm");
        std::vector<char*> argv;
        for (auto& a : args) argv.push_back(a.data());
        py::gil_scoped_release nogil;
        return experiment::cli_main(int(argv.size()), argv.data());
      },
      py::arg("args"), "Runs the command-line tool in-process and returns its exit code.");
}
