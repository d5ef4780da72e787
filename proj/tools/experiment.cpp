#include "experiment.hpp"

#include <chrono>
#include <fstream>
#include <map>
#include <sstream>

#include "kk/control.hpp"
#include "kk/csv.hpp"
#include "kk/flow.hpp"
#include "kk/frozen.hpp"
#include "kk/montecarlo.hpp"
#include "kk/parallel.hpp"
#include "kk/parametrix.hpp"

namespace kk::cli {

using nlohmann::json;
namespace fs = std::filesystem;

const std::vector<std::string>& task_names() {
  static const std::vector<std::string> names{"simulate",     "density",      "parametrix",
                                              "control",      "audit-bounds", "audit-rates",
                                              "audit-assumptions"};
  return names;
}

namespace {

// ---------------------------------------------------------------- config access

[[noreturn]] void invalid(const std::string& field, const std::string& why) {
  throw DomainError(field + ": " + why);
}

std::string join(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

const json* find(const json& obj, const std::string& key) {
  if (!obj.is_object()) return nullptr;
  auto it = obj.find(key);
  return it == obj.end() || it->is_null() ? nullptr : &*it;
}

const json& section(const json& cfg, const std::string& key) {
  static const json empty = json::object();
  const json* s = find(cfg, key);
  if (!s) return empty;
  if (!s->is_object()) invalid(key, "must be an object");
  return *s;
}

double number(const json& obj, const std::string& prefix, const std::string& key,
              std::optional<double> def = std::nullopt) {
  const json* v = find(obj, key);
  if (!v) {
    if (def) return *def;
    invalid(join(prefix, key), "required");
  }
  if (!v->is_number()) invalid(join(prefix, key), "must be a number");
  return v->get<double>();
}

long long integer(const json& obj, const std::string& prefix, const std::string& key,
                  std::optional<long long> def = std::nullopt) {
  const json* v = find(obj, key);
  if (!v) {
    if (def) return *def;
    invalid(join(prefix, key), "required");
  }
  if (!v->is_number_integer()) invalid(join(prefix, key), "must be an integer");
  return v->get<long long>();
}

std::string text(const json& obj, const std::string& prefix, const std::string& key,
                 std::optional<std::string> def = std::nullopt) {
  const json* v = find(obj, key);
  if (!v) {
    if (def) return *def;
    invalid(join(prefix, key), "required");
  }
  if (!v->is_string()) invalid(join(prefix, key), "must be a string");
  return v->get<std::string>();
}

std::vector<double> numbers(const json& obj, const std::string& prefix, const std::string& key,
                            std::optional<std::vector<double>> def = std::nullopt) {
  const json* v = find(obj, key);
  if (!v) {
    if (def) return *def;
    invalid(join(prefix, key), "required");
  }
  if (!v->is_array()) invalid(join(prefix, key), "must be an array of numbers");
  std::vector<double> out;
  for (const json& e : *v) {
    if (!e.is_number()) invalid(join(prefix, key), "must be an array of numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

PhasePoint point(const json& v, const std::string& field, int d) {
  if (!v.is_array() || static_cast<int>(v.size()) != 2 * d)
    invalid(field, "must be an array of " + std::to_string(2 * d) + " numbers");
  PhasePoint p(2 * d);
  for (int i = 0; i < 2 * d; ++i) {
    if (!v[i].is_number()) invalid(field, "must be an array of numbers");
    p(i) = v[i].get<double>();
  }
  if (!p.allFinite()) invalid(field, "must be finite");
  return p;
}

PhasePoint point(const json& obj, const std::string& prefix, const std::string& key, int d) {
  const json* v = find(obj, key);
  if (!v) invalid(join(prefix, key), "required");
  return point(*v, join(prefix, key), d);
}

std::vector<PhasePoint> points(const json& obj, const std::string& prefix, const std::string& key,
                               int d) {
  const json* v = find(obj, key);
  if (!v) invalid(join(prefix, key), "required");
  if (!v->is_array() || v->empty()) invalid(join(prefix, key), "must be a non-empty array");
  std::vector<PhasePoint> out;
  for (size_t i = 0; i < v->size(); ++i)
    out.push_back(point((*v)[i], join(prefix, key) + "[" + std::to_string(i) + "]", d));
  return out;
}

json to_json(const PhasePoint& p) { return std::vector<double>(p.data(), p.data() + p.size()); }

struct Setup {
  ModelSpec model;
  int d = 1;
  std::optional<std::uint64_t> seed;
};

Setup read_setup(const json& cfg) {
  const json& m = section(cfg, "model");
  Setup s;
  const std::string name = text(m, "model", "name");
  s.d = static_cast<int>(integer(m, "model", "d", 1));
  if (s.d < 1 || s.d > 3) invalid("model.d", "must be 1, 2 or 3");
  std::map<std::string, double> params;
  if (const json* p = find(m, "params")) {
    if (!p->is_object()) invalid("model.params", "must be an object");
    for (auto it = p->begin(); it != p->end(); ++it) {
      if (!it->is_number()) invalid("model.params." + it.key(), "must be a number");
      params[it.key()] = it->get<double>();
    }
  }
  s.model = model_by_name(name, s.d, params);
  validate_model(s.model);
  if (const json* v = find(cfg, "seed")) {
    if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0))
      invalid("seed", "must be a non-negative integer");
    s.seed = v->get<std::uint64_t>();
  }
  return s;
}

std::uint64_t require_seed(const Setup& s) {
  if (!s.seed) invalid("seed", "required for stochastic tasks");
  return *s.seed;
}

SimConfig read_sim(const json& cfg, std::uint64_t seed) {
  const json& j = section(cfg, "sim");
  SimConfig c;
  c.npaths = integer(j, "sim", "npaths", 10000);
  if (c.npaths < 1) invalid("sim.npaths", "must be at least 1");
  c.nsteps = static_cast<int>(integer(j, "sim", "nsteps", 400));
  if (c.nsteps < 1) invalid("sim.nsteps", "must be at least 1");
  try {
    c.scheme = parse_scheme(text(j, "sim", "scheme", "euler"));
  } catch (const DomainError& e) {
    invalid("sim.scheme", e.what());
  }
  c.workers = static_cast<int>(integer(j, "sim", "workers", 0));
  if (c.workers < 0) invalid("sim.workers", "must be non-negative");
  c.seed = seed;
  return c;
}

KdeOptions read_kde(const json& cfg) {
  const json& j = section(cfg, "kde");
  KdeOptions k;
  k.h = number(j, "kde", "h", 0.0);
  if (k.h < 0.0) invalid("kde.h", "must be non-negative (0 = default)");
  k.bootstrap = static_cast<int>(integer(j, "kde", "bootstrap", 100));
  if (k.bootstrap < 0) invalid("kde.bootstrap", "must be non-negative");
  return k;
}

QuadratureSpec read_quadrature(const json& cfg) {
  const json& j = section(cfg, "quadrature");
  QuadratureSpec q;
  q.time_nodes = static_cast<int>(integer(j, "quadrature", "time_nodes", q.time_nodes));
  q.space_nodes = static_cast<int>(integer(j, "quadrature", "space_nodes", q.space_nodes));
  q.inner_time_nodes = static_cast<int>(integer(j, "quadrature", "inner_time_nodes", q.inner_time_nodes));
  q.inner_space_nodes = static_cast<int>(integer(j, "quadrature", "inner_space_nodes", q.inner_space_nodes));
  q.half_width = number(j, "quadrature", "half_width", q.half_width);
  q.time_power = number(j, "quadrature", "time_power", q.time_power);
  q.flow_tol = number(j, "quadrature", "flow_tol", q.flow_tol);
  try {
    q.validate();
  } catch (const DomainError& e) {
    invalid("quadrature", e.what());
  }
  return q;
}

struct Query {
  double s = 0.0, t = 1.0;
  PhasePoint x, y;
};

std::vector<Query> read_queries(const json& cfg, int d) {
  const json* v = find(cfg, "queries");
  if (!v) invalid("queries", "required");
  if (!v->is_array() || v->empty()) invalid("queries", "must be a non-empty array");
  std::vector<Query> out;
  for (size_t i = 0; i < v->size(); ++i) {
    const std::string pre = "queries[" + std::to_string(i) + "]";
    const json& q = (*v)[i];
    if (!q.is_object()) invalid(pre, "must be an object");
    Query r;
    r.s = number(q, pre, "s", 0.0);
    r.t = number(q, pre, "t");
    if (!(r.t > r.s)) invalid(pre + ".t", "must exceed s");
    r.x = point(q, pre, "x", d);
    r.y = point(q, pre, "y", d);
    out.push_back(r);
  }
  return out;
}

json query_json(const Query& q) {
  return {{"s", q.s}, {"t", q.t}, {"x", to_json(q.x)}, {"y", to_json(q.y)}};
}

std::vector<std::string> point_header(const std::string& name, int d) {
  std::vector<std::string> h;
  for (int i = 1; i <= d; ++i) h.push_back(name + "1_" + std::to_string(i));
  for (int i = 1; i <= d; ++i) h.push_back(name + "2_" + std::to_string(i));
  return h;
}

void append(std::vector<std::string>& a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
}

void append(std::vector<CsvCell>& row, const PhasePoint& p) {
  for (Eigen::Index i = 0; i < p.size(); ++i) row.emplace_back(p(i));
}

std::ofstream open_out(const fs::path& p, bool binary = false) {
  std::ofstream f(p, binary ? std::ios::binary : std::ios::out);
  if (!f) invalid("output.dir", "cannot write " + p.string());
  return f;
}

struct Artifacts {
  fs::path dir;
  std::vector<std::string> names;
  fs::path add(const std::string& name) {
    names.push_back(name);
    return dir / name;
  }
};

void write_json(const fs::path& p, const json& j) {
  std::ofstream f = open_out(p);
  f << j.dump(2) << "\n";
}

// ---------------------------------------------------------------- tasks

json task_simulate(const json& cfg, const Setup& su, Artifacts& art) {
  const std::uint64_t seed = require_seed(su);
  const SimConfig sim = read_sim(cfg, seed);
  const json& st = section(cfg, "start");
  const double s = number(st, "start", "s", 0.0);
  const double t = number(st, "start", "t");
  if (!(t > s)) invalid("start.t", "must exceed s");
  const PhasePoint x = point(st, "start", "x", su.d);
  const SampleBatch b = simulate(su.model, s, x, t, sim);
  {
    std::ofstream f = open_out(art.add("samples.kkmc"), true);
    write_batch(f, b);
  }
  std::ofstream f = open_out(art.add("moments.csv"));
  CsvWriter w(f, {"component", "mean", "variance"});
  const auto names = point_header("x", su.d);
  for (Eigen::Index i = 0; i < b.points.rows(); ++i) {
    const double m = b.size() ? b.points.row(i).mean() : 0.0;
    const double v = b.size() > 1 ? (b.points.row(i).array() - m).square().sum() / (b.size() - 1.0) : 0.0;
    w.row({names[static_cast<size_t>(i)], m, v});
  }
  return {{"paths", sim.npaths}, {"kept", b.size()}, {"excluded", b.excluded},
          {"scheme", scheme_name(sim.scheme)}, {"nsteps", sim.nsteps}};
}

json task_density(const json& cfg, const Setup& su, Artifacts& art) {
  const std::vector<Query> qs = read_queries(cfg, su.d);
  const json& dj = section(cfg, "density");
  const std::string def = su.model.name == "kolmogorov" ? "closed-form" : "parametrix";
  const std::string method = text(dj, "density", "method", def);
  std::vector<DensityEstimate> est(qs.size());
  std::vector<std::vector<double>> terms(qs.size());
  std::vector<double> remainder(qs.size(), 0.0);
  json meta = json::object();
  if (method == "closed-form") {
    // The frozen Gaussian is the transition density exactly for this linear model.
    if (su.model.name != "kolmogorov") invalid("density.method", "closed-form needs the kolmogorov model");
    parallel_for(qs.size(), [&](size_t i) {
      const Query& q = qs[i];
      est[i].value = frozen_density(su.model, q.s, q.x, q.s, q.x, q.t, q.y)(0);
      est[i].provenance = Provenance::ClosedForm;
    });
  } else if (method == "parametrix") {
    const int N = static_cast<int>(integer(section(cfg, "parametrix"), "parametrix", "N", 3));
    if (N < 1) invalid("parametrix.N", "must be at least 1");
    const QuadratureSpec quad = read_quadrature(cfg);
    for (size_t i = 0; i < qs.size(); ++i) {
      const SeriesResult r = density_series(su.model, qs[i].s, qs[i].x, qs[i].t, qs[i].y, N, quad);
      est[i].value = r.value;
      est[i].provenance = Provenance::Parametrix;
      terms[i] = r.terms;
      remainder[i] = r.remainder_bound;
    }
    meta["N"] = N;
  } else if (method == "kde") {
    const std::uint64_t seed = require_seed(su);
    SimConfig sim = read_sim(cfg, seed);
    KdeOptions k = read_kde(cfg);
    for (size_t i = 0; i < qs.size(); ++i) {
      // Per-query streams so each estimate is independent of the others.
      sim.seed = mix64(seed ^ mix64(i));
      k.seed = mix64(sim.seed);
      const SampleBatch b = simulate(su.model, qs[i].s, qs[i].x, qs[i].t, sim);
      if (b.size() == 0) throw NumericError("density: every path went non-finite");
      est[i] = kde(b.points, qs[i].t - qs[i].s, {qs[i].y}, k)[0];
    }
    meta["npaths"] = sim.npaths;
    meta["scheme"] = scheme_name(sim.scheme);
  } else {
    invalid("density.method", "unknown method '" + method + "'");
  }

  std::ofstream f = open_out(art.add("density.csv"));
  std::vector<std::string> head{"query", "s", "t"};
  append(head, point_header("x", su.d));
  append(head, point_header("y", su.d));
  append(head, {"value", "std_error", "provenance", "h1", "h2"});
  CsvWriter w(f, head);
  json records = json::array();
  for (size_t i = 0; i < qs.size(); ++i) {
    std::vector<CsvCell> row{static_cast<long long>(i), qs[i].s, qs[i].t};
    append(row, qs[i].x);
    append(row, qs[i].y);
    row.insert(row.end(), {est[i].value, est[i].std_error, provenance_name(est[i].provenance),
                           est[i].h1, est[i].h2});
    w.row(row);
    json m = meta;
    m["provenance"] = provenance_name(est[i].provenance);
    m["std_error"] = est[i].std_error;
    records.push_back({{"query", query_json(qs[i])}, {"value", est[i].value}, {"terms", terms[i]},
                       {"remainder", remainder[i]}, {"meta", m}});
  }
  write_json(art.add("results.json"), records);
  return {{"queries", qs.size()}, {"method", method}};
}

json task_parametrix(const json& cfg, const Setup& su, Artifacts& art) {
  const std::vector<Query> qs = read_queries(cfg, su.d);
  const int N = static_cast<int>(integer(section(cfg, "parametrix"), "parametrix", "N", 3));
  if (N < 1) invalid("parametrix.N", "must be at least 1");
  const QuadratureSpec quad = read_quadrature(cfg);
  std::ofstream f = open_out(art.add("parametrix.csv"));
  std::vector<std::string> head{"query", "s", "t"};
  append(head, point_header("x", su.d));
  append(head, point_header("y", su.d));
  append(head, {"N", "value", "remainder_bound", "fitted_C", "majorant", "lambda", "remainder_order_ok"});
  const int nterms = std::max(N, 2);
  for (int j = 0; j < nterms; ++j) head.push_back("term_" + std::to_string(j));
  CsvWriter w(f, head);
  json records = json::array();
  bool order_ok = true;
  for (size_t i = 0; i < qs.size(); ++i) {
    const SeriesResult r = density_series(su.model, qs[i].s, qs[i].x, qs[i].t, qs[i].y, N, quad);
    std::vector<CsvCell> row{static_cast<long long>(i), qs[i].s, qs[i].t};
    append(row, qs[i].x);
    append(row, qs[i].y);
    row.insert(row.end(), {static_cast<long long>(N), r.value, r.remainder_bound, r.fitted_C, r.majorant,
                           r.lambda, static_cast<long long>(r.remainder_order_ok)});
    for (int j = 0; j < nterms; ++j)
      row.emplace_back(j < static_cast<int>(r.terms.size()) ? r.terms[j] : 0.0);
    w.row(row);
    order_ok = order_ok && r.remainder_order_ok;
    records.push_back({{"query", query_json(qs[i])},
                       {"value", r.value},
                       {"terms", r.terms},
                       {"remainder", r.remainder_bound},
                       {"meta",
                        {{"N", N},
                         {"fitted_C", r.fitted_C},
                         {"majorant", r.majorant},
                         {"lambda", r.lambda},
                         {"remainder_order_ok", r.remainder_order_ok},
                         {"provenance", "parametrix"}}}});
  }
  write_json(art.add("results.json"), records);
  return {{"queries", qs.size()}, {"N", N}, {"remainder_order_ok", order_ok}};
}

json task_control(const json& cfg, const Setup& su, Artifacts& art) {
  const std::vector<Query> qs = read_queries(cfg, su.d);
  const json& cj = section(cfg, "control");
  ControlOptions o;
  o.tol = number(cj, "control", "tol", o.tol);
  o.max_iterations = static_cast<int>(integer(cj, "control", "max_iterations", o.max_iterations));
  o.samples = static_cast<int>(integer(cj, "control", "samples", o.samples));
  o.max_split_depth = static_cast<int>(integer(cj, "control", "max_split_depth", o.max_split_depth));
  if (!(o.tol > 0.0)) invalid("control.tol", "must be positive");
  if (o.max_iterations < 1) invalid("control.max_iterations", "must be at least 1");
  if (o.samples < 2) invalid("control.samples", "must be at least 2");
  if (o.max_split_depth < 0) invalid("control.max_split_depth", "must be non-negative");

  std::vector<ControlSolution> sols(qs.size());
  parallel_for(qs.size(), [&](size_t i) {
    sols[i] = solve_control(su.model, qs[i].s, qs[i].x, qs[i].t, qs[i].y, o);
  });
  std::ofstream f = open_out(art.add("control.csv"));
  CsvWriter w(f, {"query", "s", "t", "energy", "distance", "ratio", "terminal_error", "sup_control",
                  "iterations", "polish_steps", "splits", "optimal"});
  double worst = 0.0;
  for (size_t i = 0; i < qs.size(); ++i) {
    const ControlSolution& c = sols[i];
    const double D = scale_map(qs[i].t - qs[i].s, flow_point(su.model, qs[i].s, qs[i].t, qs[i].x) - qs[i].y,
                               ScaleDirection::Inverse)
                         .norm();
    w.row({static_cast<long long>(i), qs[i].s, qs[i].t, c.energy, D, c.energy / (D + 1.0), c.terminal_error,
           c.sup_control, static_cast<long long>(c.iterations), static_cast<long long>(c.polish_steps),
           static_cast<long long>(c.splits), static_cast<long long>(c.optimal)});
    worst = std::max(worst, c.terminal_error);
    std::ofstream pf = open_out(art.add("control_path_" + std::to_string(i) + ".csv"));
    pf.precision(17);
    c.write_csv(pf);
  }
  return {{"queries", qs.size()}, {"max_terminal_error", worst}};
}

json task_audit_bounds(const json& cfg, const Setup& su, Artifacts& art) {
  const std::uint64_t seed = require_seed(su);
  const SimConfig sim = read_sim(cfg, seed);
  const json& g = section(cfg, "grid");
  const double s = number(g, "grid", "s", 0.0);
  const std::vector<PhasePoint> xs = points(g, "grid", "xs", su.d);
  const std::vector<double> spans = numbers(g, "grid", "spans");
  if (spans.empty()) invalid("grid.spans", "must be non-empty");
  std::vector<PhasePoint> offs = find(g, "offsets") ? points(g, "grid", "offsets", su.d)
                                                    : default_audit_offsets(su.d);
  const double max_offset = number(g, "grid", "max_offset", 4.0);
  const std::vector<AuditQuery> grid = audit_grid(su.model, s, xs, spans, offs, max_offset);

  const json& aj = section(cfg, "audit");
  AuditOptions o;
  try {
    o.flow = parse_flow_choice(text(aj, "audit", "flow", "tilde"));
  } catch (const DomainError& e) {
    invalid("audit.flow", e.what());
  }
  o.lambdas = numbers(aj, "audit", "lambdas", o.lambdas);
  o.c_max = number(aj, "audit", "c_max", o.c_max);
  o.z = number(aj, "audit", "z", o.z);
  o.min_ess = number(aj, "audit", "min_ess", o.min_ess);
  o.kde = read_kde(cfg);
  if (o.lambdas.empty()) invalid("audit.lambdas", "must be non-empty");
  for (double l : o.lambdas)
    if (!(l > 0.0)) invalid("audit.lambdas", "must be positive");
  if (!(o.c_max >= 1.0)) invalid("audit.c_max", "must be at least 1");

  const BoundReport r = bound_audit(su.model, grid, sim, o);
  std::ofstream f = open_out(art.add("audit_points.csv"));
  std::vector<std::string> head{"point", "s", "t"};
  append(head, point_header("x", su.d));
  append(head, point_header("y", su.d));
  append(head, point_header("c", su.d));
  append(head, {"density", "std_error", "ess", "flagged", "upper_ratio", "lower_ratio", "violation"});
  CsvWriter w(f, head);
  for (size_t i = 0; i < r.points.size(); ++i) {
    const AuditPoint& p = r.points[i];
    std::vector<CsvCell> row{static_cast<long long>(i), p.query.s, p.query.t};
    append(row, p.query.x);
    append(row, p.query.y);
    append(row, p.center);
    row.insert(row.end(), {p.density, p.std_error, p.ess, static_cast<long long>(p.flagged), p.upper_ratio,
                           p.lower_ratio, static_cast<long long>(p.violation)});
    w.row(row);
  }
  return {{"points", r.points.size()}, {"C0", r.C0},         {"lambda0", r.lambda0},
          {"violations", r.violations}, {"flagged", r.flagged}, {"capped", r.capped},
          {"flow", flow_choice_name(o.flow)}};
}

json task_audit_rates(const json& cfg, const Setup& su, Artifacts& art) {
  const json& rj = section(cfg, "rates");
  const double s = number(rj, "rates", "s", 0.0);
  const PhasePoint x = find(rj, "x") ? point(rj, "rates", "x", su.d) : PhasePoint(PhasePoint::Zero(2 * su.d));
  std::vector<double> spans;
  if (find(rj, "spans")) {
    spans = numbers(rj, "rates", "spans");
  } else {
    const long long levels = integer(rj, "rates", "levels", 6);
    if (levels < 4) invalid("rates.levels", "must be at least 4");
    for (long long k = 1; k <= levels; ++k) spans.push_back(std::ldexp(1.0, static_cast<int>(-k)));
  }
  for (double v : spans)
    if (!(v > 0.0)) invalid("rates.spans", "must be positive");
  struct Quantity {
    const char* name;
    int j1, j2;
    double expected;
  };
  const double dd = 2.0 * su.d;
  const Quantity qs[3] = {{"grad_x1", 1, 0, -dd - 0.5}, {"hess_x1", 2, 0, -dd - 1.0}, {"grad_x2", 0, 1, -dd - 1.5}};
  std::ofstream pf = open_out(art.add("rate_points.csv"));
  CsvWriter pw(pf, {"quantity", "span", "value"});
  std::ofstream f = open_out(art.add("rates.csv"));
  CsvWriter w(f, {"quantity", "j1", "j2", "slope", "expected", "intercept", "r2"});
  json summary = json::object();
  for (const Quantity& q : qs) {
    const auto series = sup_gradient_series(su.model, s, x, spans, q.j1, q.j2);
    for (const auto& [span, v] : series) pw.row({std::string(q.name), span, v});
    RateFit fit;
    try {
      fit = rate_fit(series);
    } catch (const DomainError& e) {
      invalid("rates.spans", e.what());
    }
    w.row({std::string(q.name), static_cast<long long>(q.j1), static_cast<long long>(q.j2), fit.slope,
           q.expected, fit.intercept, fit.r2});
    summary[q.name] = {{"slope", fit.slope}, {"expected", q.expected}, {"r2", fit.r2}};
  }
  return summary;
}

json task_audit_assumptions(const json& cfg, const Setup& su, Artifacts& art) {
  const json& aj = section(cfg, "assumptions");
  SamplingPlan plan;
  plan.seed = require_seed(su);
  plan.pairs = static_cast<int>(integer(aj, "assumptions", "pairs", plan.pairs));
  plan.box = number(aj, "assumptions", "box", plan.box);
  plan.times = numbers(aj, "assumptions", "times", plan.times);
  if (plan.pairs < 1) invalid("assumptions.pairs", "must be at least 1");
  if (!(plan.box > 0.0)) invalid("assumptions.box", "must be positive");
  if (plan.times.empty()) invalid("assumptions.times", "must be non-empty");
  const AuditReport r = audit_assumptions(su.model, plan);
  std::ofstream f = open_out(art.add("assumptions.csv"));
  CsvWriter w(f, {"metric", "value", "ok"});
  w.row({std::string("sigma_holder"), r.sigma_holder, static_cast<long long>(r.sigma_holder_ok)});
  w.row({std::string("f2_taylor"), r.f2_taylor, static_cast<long long>(r.f2_ok)});
  w.row({std::string("f1_growth"), r.f1_growth, static_cast<long long>(r.f1_ok)});
  w.row({std::string("f_at_zero"), r.f_at_zero, static_cast<long long>(r.f1_ok && r.f2_ok)});
  w.row({std::string("eig_min"), r.eig_min, static_cast<long long>(r.ellipticity_ok)});
  w.row({std::string("eig_max"), r.eig_max, static_cast<long long>(r.ellipticity_ok)});
  w.row({std::string("grad_sv_min"), r.grad_sv_min, static_cast<long long>(r.grad_ok)});
  return {{"pairs", r.pairs}, {"pass", r.pass}};
}

}  // namespace

json execute(const std::string& task, json config, const fs::path& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& names = task_names();
  if (std::find(names.begin(), names.end(), task) == names.end()) invalid("task", "unknown task '" + task + "'");
  if (!config.is_object()) invalid("config", "must be a JSON object");
  if (const json* t = find(config, "task")) {
    if (!t->is_string() || t->get<std::string>() != task)
      invalid("task", "config names a different task than the command");
  }
  config["task"] = task;
  const Setup su = read_setup(config);

  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) invalid("output.dir", "cannot create " + out.string());
  Artifacts art{out, {}};

  json summary;
  if (task == "simulate") summary = task_simulate(config, su, art);
  else if (task == "density") summary = task_density(config, su, art);
  else if (task == "parametrix") summary = task_parametrix(config, su, art);
  else if (task == "control") summary = task_control(config, su, art);
  else if (task == "audit-bounds") summary = task_audit_bounds(config, su, art);
  else if (task == "audit-rates") summary = task_audit_rates(config, su, art);
  else summary = task_audit_assumptions(config, su, art);

  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json manifest = {{"kk_manifest", 1},
                   {"task", task},
                   {"version", KK_VERSION},
                   {"config", config},
                   {"wall_time_s", wall},
                   {"workers", worker_count()},
                   {"summary", summary},
                   {"artifacts", art.names}};
  write_json(out / "manifest.json", manifest);
  return manifest;
}

RunOutcome run_experiment(const RunRequest& req) {
  RunOutcome res;
  try {
    std::ifstream in(req.config_path);
    if (!in) invalid("config", "cannot read " + req.config_path.string());
    json cfg;
    try {
      cfg = json::parse(in);
    } catch (const json::parse_error& e) {
      invalid("config", std::string("invalid JSON: ") + e.what());
    }
    // An emitted manifest re-runs its config echo.
    if (cfg.is_object() && cfg.contains("kk_manifest")) {
      if (!cfg.contains("config")) invalid("config", "manifest without a config echo");
      cfg = cfg["config"];
    }
    if (req.seed) cfg["seed"] = *req.seed;
    fs::path out = "kk_out";
    if (req.out_dir) {
      out = *req.out_dir;
    } else if (const json* o = find(section(cfg, "output"), "dir")) {
      if (!o->is_string()) invalid("output.dir", "must be a string");
      out = o->get<std::string>();
    }
    res.out_dir = out;
    res.manifest = execute(req.task, cfg, out);
  } catch (const DomainError& e) {
    res.exit_code = kValidation;
    res.message = e.what();
  } catch (const json::exception& e) {
    res.exit_code = kValidation;
    res.message = std::string("config: ") + e.what();
  } catch (const NumericError& e) {
    res.exit_code = kNumeric;
    res.message = e.what();
  } catch (const ModelError& e) {
    res.exit_code = kNumeric;
    res.message = e.what();
  } catch (const std::exception& e) {
    res.exit_code = kNumeric;
    res.message = e.what();
  }
  return res;
}

}  // namespace kk::cli
