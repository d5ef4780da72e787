#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "experiment.hpp"
#include "kk/control.hpp"
#include "kk/flow.hpp"
#include "kk/frozen.hpp"
#include "kk/montecarlo.hpp"
#include "kk/parametrix.hpp"

namespace py = pybind11;
using namespace kk;

namespace {

py::dict series_dict(const SeriesResult& r) {
  py::dict d;
  d["value"] = r.value;
  d["terms"] = r.terms;
  d["remainder_bound"] = r.remainder_bound;
  d["orders"] = r.orders;
  d["fitted_C"] = r.fitted_C;
  d["majorant"] = r.majorant;
  d["lambda"] = r.lambda;
  d["remainder_order_ok"] = r.remainder_order_ok;
  return d;
}

QuadratureSpec quad_from(const py::dict& q) {
  QuadratureSpec s;
  for (auto item : q) {
    const std::string k = py::str(item.first);
    if (k == "time_nodes") s.time_nodes = item.second.cast<int>();
    else if (k == "space_nodes") s.space_nodes = item.second.cast<int>();
    else if (k == "inner_time_nodes") s.inner_time_nodes = item.second.cast<int>();
    else if (k == "inner_space_nodes") s.inner_space_nodes = item.second.cast<int>();
    else if (k == "half_width") s.half_width = item.second.cast<double>();
    else if (k == "time_power") s.time_power = item.second.cast<double>();
    else if (k == "flow_tol") s.flow_tol = item.second.cast<double>();
    else throw DomainError("quadrature: unknown field '" + k + "'");
  }
  s.validate();
  return s;
}

SimConfig sim_from(long npaths, int nsteps, std::uint64_t seed, const std::string& scheme, int workers) {
  SimConfig c;
  c.npaths = npaths;
  c.nsteps = nsteps;
  c.seed = seed;
  c.scheme = parse_scheme(scheme);
  c.workers = workers;
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_pykk, m) {
  m.doc() = "Kinetic diffusion densities: frozen Gaussians, parametrix series, controls, Monte Carlo audits.";
  m.attr("__version__") = KK_VERSION;

  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_RuntimeError);

  py::class_<ModelSpec>(m, "Model")
      .def_readonly("name", &ModelSpec::name)
      .def_readonly("d", &ModelSpec::d)
      .def("drift", [](const ModelSpec& s, double t, const Vec& x) { return drift(s, t, x); })
      .def("__repr__", [](const ModelSpec& s) { return "<Model " + s.name + " d=" + std::to_string(s.d) + ">"; });

  m.def("kolmogorov_model", &kolmogorov_model, py::arg("d") = 1);
  m.def(
      "holder_model",
      [](int d, double gamma, double a, double b, double c) {
        HolderParams p;
        p.gamma = gamma;
        p.a = a;
        p.b = b;
        p.c = c;
        return holder_model(d, p);
      },
      py::arg("d") = 1, py::arg("gamma") = 0.5, py::arg("a") = 1.0, py::arg("b") = -0.5, py::arg("c") = 0.1);
  m.def("model_by_name", &model_by_name, py::arg("name"), py::arg("d") = 1,
        py::arg("params") = std::map<std::string, double>{});

  m.def("flow_point", [](const ModelSpec& mo, double s, double t, const Vec& x) { return flow_point(mo, s, t, x); },
        py::arg("model"), py::arg("s"), py::arg("t"), py::arg("x"));
  m.def("tilde_flow_point",
        [](const ModelSpec& mo, double s, double t, const Vec& x) { return tilde_flow(mo, s, t, x).end(); },
        py::arg("model"), py::arg("s"), py::arg("t"), py::arg("x"));
  m.def("flow_gap",
        [](const ModelSpec& mo, double s, double t, const Vec& x, double eps) { return flow_gap(mo, s, t, x, eps); },
        py::arg("model"), py::arg("s"), py::arg("t"), py::arg("x"), py::arg("eps"));

  m.def("gram", [](const ModelSpec& mo, double tau, const Vec& xi, double s, double t) { return gram(mo, tau, xi, s, t); },
        py::arg("model"), py::arg("tau"), py::arg("xi"), py::arg("s"), py::arg("t"));
  m.def("resolvent",
        [](const ModelSpec& mo, double tau, const Vec& xi, double s, double t) { return resolvent(mo, tau, xi, s, t); },
        py::arg("model"), py::arg("tau"), py::arg("xi"), py::arg("s"), py::arg("t"));
  m.def(
      "frozen_density",
      [](const ModelSpec& mo, double s, const Vec& x, double t, const Vec& y, bool forward) {
        return proxy_density(mo, forward ? Freezing::Forward : Freezing::Backward, s, x, t, y);
      },
      py::arg("model"), py::arg("s"), py::arg("x"), py::arg("t"), py::arg("y"), py::arg("forward") = false);

  m.def("kernel_H",
        [](const ModelSpec& mo, double r, const Vec& z, double t, const Vec& y) { return kernel_H(mo, r, z, t, y); },
        py::arg("model"), py::arg("r"), py::arg("z"), py::arg("t"), py::arg("y"));
  m.def(
      "density_series",
      [](const ModelSpec& mo, double s, const Vec& x, double t, const Vec& y, int N, const py::dict& q) {
        return series_dict(density_series(mo, s, x, t, y, N, quad_from(q)));
      },
      py::arg("model"), py::arg("s"), py::arg("x"), py::arg("t"), py::arg("y"), py::arg("N") = 3,
      py::arg("quadrature") = py::dict());
  m.def(
      "grad_density",
      [](const ModelSpec& mo, double s, const Vec& x, double t, const Vec& y, const std::string& dir,
         const std::string& scheme, int N, const py::dict& q) {
        if (dir != "x1" && dir != "x2") throw DomainError("direction must be 'x1' or 'x2'");
        if (scheme != "analytic" && scheme != "fd") throw DomainError("scheme must be 'analytic' or 'fd'");
        const GradientResult g =
            grad_density(mo, s, x, t, y, dir == "x1" ? GradDirection::X1 : GradDirection::X2,
                         scheme == "analytic" ? GradScheme::AnalyticLeading : GradScheme::FiniteDifference, N,
                         quad_from(q));
        py::dict d;
        d["value"] = g.value;
        d["warnings"] = g.warnings;
        return d;
      },
      py::arg("model"), py::arg("s"), py::arg("x"), py::arg("t"), py::arg("y"), py::arg("direction") = "x1",
      py::arg("scheme") = "fd", py::arg("N") = 2, py::arg("quadrature") = py::dict());

  m.def(
      "solve_control",
      [](const ModelSpec& mo, double s, const Vec& x, double t, const Vec& y) {
        const ControlSolution c = solve_control(mo, s, x, t, y);
        py::dict d;
        d["energy"] = c.energy;
        d["terminal_error"] = c.terminal_error;
        d["sup_control"] = c.sup_control;
        d["iterations"] = c.iterations;
        d["splits"] = c.splits;
        d["optimal"] = c.optimal;
        d["times"] = c.times;
        d["control"] = c.control;
        d["state"] = c.state;
        return d;
      },
      py::arg("model"), py::arg("s"), py::arg("x"), py::arg("t"), py::arg("y"));
  m.def("lq_energy", &lq_energy, py::arg("G"), py::arg("s"), py::arg("x"), py::arg("t"), py::arg("y"));

  m.def(
      "simulate",
      [](const ModelSpec& mo, double s, const Vec& x, double t, long npaths, int nsteps, std::uint64_t seed,
         const std::string& scheme, int workers) {
        const SampleBatch b = simulate(mo, s, x, t, sim_from(npaths, nsteps, seed, scheme, workers));
        // One row per kept path.
        return py::make_tuple(Mat(b.points.transpose()), b.excluded);
      },
      py::arg("model"), py::arg("s"), py::arg("x"), py::arg("t"), py::arg("npaths") = 10000,
      py::arg("nsteps") = 400, py::arg("seed") = 1, py::arg("scheme") = "euler", py::arg("workers") = 0);
  m.def(
      "kde",
      [](const Mat& samples, double span, const std::vector<Vec>& queries, double h, int bootstrap) {
        KdeOptions o;
        o.h = h;
        o.bootstrap = bootstrap;
        py::list out;
        for (const DensityEstimate& e : kde(samples.transpose(), span, queries, o)) {
          py::dict d;
          d["value"] = e.value;
          d["std_error"] = e.std_error;
          d["h1"] = e.h1;
          d["h2"] = e.h2;
          d["ess"] = e.ess;
          out.append(d);
        }
        return out;
      },
      py::arg("samples"), py::arg("span"), py::arg("queries"), py::arg("h") = 0.0, py::arg("bootstrap") = 100);
  m.def(
      "rate_fit",
      [](const std::vector<std::pair<double, double>>& pairs) {
        const RateFit f = rate_fit(pairs);
        return py::make_tuple(f.slope, f.intercept, f.r2);
      },
      py::arg("pairs"));
  m.def("sup_gradient_series", &sup_gradient_series, py::arg("model"), py::arg("s"), py::arg("x"),
        py::arg("spans"), py::arg("j1"), py::arg("j2"));

  m.def(
      "run_experiment",
      [](const std::string& task, const std::string& config, std::optional<std::uint64_t> seed,
         std::optional<std::string> out) {
        cli::RunRequest r;
        r.task = task;
        r.config_path = config;
        r.seed = seed;
        if (out) r.out_dir = *out;
        py::gil_scoped_release release;
        const cli::RunOutcome o = cli::run_experiment(r);
        py::gil_scoped_acquire acquire;
        return py::make_tuple(o.exit_code, o.message);
      },
      py::arg("task"), py::arg("config"), py::arg("seed") = py::none(), py::arg("out") = py::none());
}
