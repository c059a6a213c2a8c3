#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "json.hpp"
#include "mattn/attention.hpp"
#include "mattn/experiment.hpp"
#include "mattn/measures.hpp"
#include "mattn/spectrum.hpp"
#include "mattn/verify.hpp"

namespace py = pybind11;
using nlohmann::json;

// Configs and results cross the boundary as JSON text; the Python package
// turns them into dicts.
namespace {

mattn::ExperimentConfig config_from(const std::string& text) {
  mattn::ExperimentConfig cfg;
  if (!text.empty()) mattn::from_json(json::parse(text), cfg);
  cfg.validate();
  return cfg;
}

std::string dump(const auto& value) {
  json j;
  to_json(j, value);
  return j.dump();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "C++ core of measure_attention";

  py::class_<mattn::MercerSpectrum>(m, "MercerSpectrum")
      .def(py::init<double, double, std::size_t, std::size_t>(), py::arg("alpha"), py::arg("c") = 1.0,
           py::arg("modes") = 16, py::arg("grid_size") = 32)
      .def_property_readonly("alpha", &mattn::MercerSpectrum::alpha)
      .def_property_readonly("scale", &mattn::MercerSpectrum::scale)
      .def_property_readonly("modes", &mattn::MercerSpectrum::modes)
      .def_property_readonly("grid", &mattn::MercerSpectrum::grid)
      .def("eigenvalue", [](const mattn::MercerSpectrum& s, std::size_t j) { return mattn::eigenvalue(s, j); })
      .def("basis", [](const mattn::MercerSpectrum& s, std::size_t j, double x) { return mattn::basis_eval(s, j, x); })
      .def("__repr__", [](const mattn::MercerSpectrum& s) {
        return "MercerSpectrum(alpha=" + std::to_string(s.alpha()) + ", modes=" + std::to_string(s.modes()) + ")";
      });

  m.def("midpoint_grid", &mattn::midpoint_grid, py::arg("size"));
  m.def(
      "synth_density",
      [](const mattn::MercerSpectrum& s, const std::vector<double>& z, double eps) {
        return mattn::synth_density(s, z, eps);
      },
      py::arg("spectrum"), py::arg("z"), py::arg("clamp_eps") = 1e-6);
  m.def(
      "gen_norm_sq",
      [](const mattn::MercerSpectrum& s, const std::vector<double>& b, double a) {
        return mattn::gen_norm_sq(s, {b}, a);
      },
      py::arg("spectrum"), py::arg("coeffs"), py::arg("a"));
  m.def(
      "isometry_map",
      [](const mattn::MercerSpectrum& s, const std::vector<double>& b, double ball, double source, double target) {
        return mattn::isometry_map(s, {b}, {ball, source, target}).coeffs;
      },
      py::arg("spectrum"), py::arg("coeffs"), py::arg("ball"), py::arg("source"), py::arg("target"));
  m.def("truncation_bound", &mattn::truncation_bound, py::arg("spectrum"), py::arg("D"), py::arg("gamma_f"),
        py::arg("gamma_b"));
  m.def(
      "tail_norm",
      [](const mattn::MercerSpectrum& s, const std::vector<double>& b, std::size_t D, double gamma_f) {
        return mattn::tail_norm(s, {b}, D, gamma_f);
      },
      py::arg("spectrum"), py::arg("coeffs"), py::arg("D"), py::arg("gamma_f"));

  py::class_<mattn::DiscreteMeasure>(m, "DiscreteMeasure")
      .def(py::init<Eigen::MatrixXd, Eigen::VectorXd>(), py::arg("support"), py::arg("weights"))
      .def_static("uniform", &mattn::DiscreteMeasure::uniform, py::arg("support"))
      .def_static("dirac", &mattn::DiscreteMeasure::dirac, py::arg("at"))
      .def_property_readonly("support", &mattn::DiscreteMeasure::support)
      .def_property_readonly("weights", &mattn::DiscreteMeasure::weights)
      .def_property_readonly("dim", &mattn::DiscreteMeasure::dim)
      .def("__len__", &mattn::DiscreteMeasure::size)
      .def("mean", &mattn::DiscreteMeasure::mean)
      .def("pushforward", [](const mattn::DiscreteMeasure& mu, const std::function<Eigen::VectorXd(Eigen::VectorXd)>& f) {
        return mattn::pushforward(mu, f);
      });
  m.def("product_embed", &mattn::product_embed, py::arg("mu0"), py::arg("tag"));
  m.def("wasserstein1_1d", &mattn::wasserstein1_1d, py::arg("mu"), py::arg("nu"));
  m.def(
      "mixture",
      [](std::vector<mattn::DiscreteMeasure> comps, std::vector<Eigen::VectorXd> tags, std::size_t star) {
        auto mq = mattn::build_mixture(std::move(comps), std::move(tags), star);
        return py::make_tuple(mattn::flatten(mq.context), mq.query);
      },
      py::arg("components"), py::arg("tags"), py::arg("star_index"),
      "Flattened uniform mixture of tagged components and the query (tag of the star component, zero content).");
  m.def(
      "sample_mixture_tokens",
      [](std::vector<mattn::DiscreteMeasure> comps, std::vector<Eigen::VectorXd> tags, std::size_t n,
         std::uint64_t seed) {
        auto mq = mattn::build_mixture(std::move(comps), std::move(tags), 0);
        return mattn::sample_tokens(mq.context, n, seed);
      },
      py::arg("components"), py::arg("tags"), py::arg("n_tokens"), py::arg("seed"));

  py::class_<mattn::AttnHead>(m, "AttnHead")
      .def(py::init([](Eigen::MatrixXd W, Eigen::MatrixXd Q, Eigen::MatrixXd K, Eigen::MatrixXd V) {
             return mattn::AttnHead{std::move(W), std::move(Q), std::move(K), std::move(V)};
           }),
           py::arg("W"), py::arg("Q"), py::arg("K"), py::arg("V"))
      .def_readwrite("W", &mattn::AttnHead::W)
      .def_readwrite("Q", &mattn::AttnHead::Q)
      .def_readwrite("K", &mattn::AttnHead::K)
      .def_readwrite("V", &mattn::AttnHead::V);
  py::class_<mattn::AttnParams>(m, "AttnParams")
      .def(py::init([](std::vector<mattn::AttnHead> heads, Eigen::MatrixXd skip) {
             mattn::AttnParams p{std::move(heads), std::move(skip)};
             p.validate();
             return p;
           }),
           py::arg("heads"), py::arg("skip"))
      .def_readonly("heads", &mattn::AttnParams::heads)
      .def_readonly("skip", &mattn::AttnParams::skip)
      .def_property_readonly("dim", &mattn::AttnParams::dim);

  m.def("softmax_weights", &mattn::softmax_weights, py::arg("head"), py::arg("mu"), py::arg("x"));
  m.def("measure_attention", &mattn::measure_attention, py::arg("params"), py::arg("mu"), py::arg("x"));
  m.def("build_recall_params", &mattn::build_recall_params, py::arg("d1"), py::arg("d2"), py::arg("D"),
        py::arg("c"));
  m.def("recall_temperature", &mattn::recall_temperature, py::arg("n_components"), py::arg("eps2"));
  m.def(
      "lipschitz_probe",
      [](std::size_t trials, std::uint64_t seed, double slack) {
        std::vector<mattn::LipschitzTrial> ts;
        ts.reserve(trials);
        for (std::size_t i = 0; i < trials; ++i) ts.push_back(mattn::random_lipschitz_trial(seed + i));
        const auto r = mattn::lipschitz_probe(ts, slack);
        py::dict d;
        d["trials"] = r.trials;
        d["skipped"] = r.skipped;
        d["flagged"] = r.flagged;
        d["violations"] = r.violations;
        d["max_ratio"] = r.max_ratio;
        d["max_ratio_over_bound"] = r.max_ratio_over_bound;
        return d;
      },
      py::arg("trials") = 1000, py::arg("seed") = 0, py::arg("slack") = 2.0);

  m.def(
      "default_config", [](bool reduced) { return dump(reduced ? mattn::ExperimentConfig::reduced() : mattn::ExperimentConfig{}); },
      py::arg("reduced") = false);
  m.def(
      "resolve_config", [](const std::string& text) { return dump(config_from(text)); }, py::arg("config_json"));
  m.def(
      "gen_example",
      [](double alpha, std::uint64_t seed, const std::string& cfg_text) {
        const auto cfg = config_from(cfg_text);
        const auto ex = mattn::gen_example(cfg.spectrum(alpha), cfg, seed);
        py::dict d;
        d["context"] = ex.context;
        d["query"] = ex.query;
        d["target"] = ex.target;
        d["tag"] = ex.hidden.tag;
        d["z1"] = ex.hidden.z1;
        d["z2"] = ex.hidden.z2;
        return d;
      },
      py::arg("alpha"), py::arg("seed"), py::arg("config_json") = "");
  m.def(
      "run_cell",
      [](double alpha, std::size_t n, std::size_t seed, const std::string& cfg_text) {
        const auto cfg = config_from(cfg_text);
        mattn::CellRun run = [&] {
          py::gil_scoped_release nogil;
          return mattn::run_cell(alpha, n, seed, cfg);
        }();
        return dump(run.result);
      },
      py::arg("alpha"), py::arg("n"), py::arg("seed"), py::arg("config_json") = "");
  m.def(
      "sweep",
      [](const std::string& cfg_text, const std::filesystem::path& out, std::size_t jobs) {
        const auto cfg = config_from(cfg_text);
        py::gil_scoped_release nogil;
        const auto b = mattn::sweep(cfg, out, {jobs, {}});
        return std::make_tuple(b.cells.size(), b.reused, b.failed);
      },
      py::arg("config_json"), py::arg("out_dir"), py::arg("jobs") = 1,
      "Runs the grid into out_dir; returns (cells, reused, failed).");

  m.def("transformed_axis", &mattn::transformed_axis, py::arg("n"), py::arg("alpha"));
  m.def(
      "fit_rate",
      [](const std::vector<std::size_t>& ns, const std::vector<double>& risks, double alpha) {
        if (ns.size() != risks.size()) throw std::invalid_argument("fit_rate: ns and risks differ in length");
        mattn::RiskCurve curve{alpha, {}};
        for (std::size_t i = 0; i < ns.size(); ++i) curve.points.push_back({ns[i], risks[i], 0.0, 1});
        const auto f = mattn::fit_rate(curve, alpha);
        return py::make_tuple(f.A, f.C, f.residual_rms);
      },
      py::arg("ns"), py::arg("risks"), py::arg("alpha"), "Returns (A, C, residual_rms) of log L = A - C t.");

  m.def(
      "verify",
      [](const std::string& suite, bool corrupt_basis) {
        mattn::verify::Options opts;
        opts.corrupt_basis = corrupt_basis;
        const auto r = mattn::verify::run_suite(suite, opts);
        py::list checks;
        for (const auto& c : r.checks) checks.append(py::make_tuple(c.name, c.passed, c.detail));
        return py::make_tuple(r.passed(), checks);
      },
      py::arg("suite"), py::arg("corrupt_basis") = false);
  m.def("suite_names", [] {
    std::vector<std::string> names;
    for (const auto& e : mattn::verify::registry()) names.push_back(e.name);
    return names;
  });
}
