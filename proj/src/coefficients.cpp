#include "kk/coefficients.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <limits>
#include <random>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include "kk/parallel.hpp"
#include "kk/quadrature.hpp"

namespace kk {

void RegularityBudget::validate() const {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw DomainError("budget.gamma must lie in (0, 1]");
  if (!(kappa0 > 0.0 && kappa1 > 0.0 && kappa2 > 0.0))
    throw DomainError("budget kappas must be positive");
  if (!(c0 > 0.0)) throw DomainError("budget.c0 must be positive");
  if (!(horizon > 0.0)) throw DomainError("budget.horizon must be positive");
}

void validate_model(const ModelSpec& model) {
  if (model.d < 1) throw DomainError("model dimension d must be >= 1");
  if (!model.F1 || !model.F2 || !model.sigma)
    throw DomainError("model '" + model.name + "' is missing a coefficient");
  model.meta.validate();
}

namespace {

void check_finite(const Vec& v, const char* what, double t, const PhasePoint& x) {
  if (!v.allFinite()) throw ModelError(std::string("non-finite ") + what, t, x);
}

void check_finite(const Mat& m, const char* what, double t, const PhasePoint& x) {
  if (!m.allFinite()) throw ModelError(std::string("non-finite ") + what, t, x);
}

Mat fd_grad_x1_F2(const ModelSpec& model, double t, const PhasePoint& x) {
  const int d = model.d;
  const double h = 1e-5 * (1.0 + block1(x).norm());
  Mat g(d, d);
  PhasePoint xp = x;
  PhasePoint xm = x;
  for (int j = 0; j < d; ++j) {
    xp(j) = x(j) + h;
    xm(j) = x(j) - h;
    g.col(j) = (model.F2(t, xp) - model.F2(t, xm)) / (2.0 * h);
    xp(j) = x(j);
    xm(j) = x(j);
  }
  return g;
}

double clipped_pow(double v, double p) { return std::min(std::pow(std::abs(v), p), 1.0); }

}  // namespace

Vec drift(const ModelSpec& model, double t, const PhasePoint& x) {
  Vec out(2 * model.d);
  out.head(model.d) = model.F1(t, x);
  out.tail(model.d) = model.F2(t, x);
  check_finite(out, "drift", t, x);
  return out;
}

Mat grad_x1_F2(const ModelSpec& model, double t, const PhasePoint& x) {
  Mat g = model.grad_x1_F2 ? model.grad_x1_F2(t, x) : fd_grad_x1_F2(model, t, x);
  check_finite(g, "grad_x1_F2", t, x);
  return g;
}

ModelEval evaluate_model(const ModelSpec& model, double t, const PhasePoint& x) {
  if (x.size() != 2 * model.d) throw DomainError("point dimension does not match model");
  ModelEval e;
  e.F1 = model.F1(t, x);
  e.F2 = model.F2(t, x);
  e.sigma = model.sigma(t, x);
  check_finite(e.F1, "F1", t, x);
  check_finite(e.F2, "F2", t, x);
  check_finite(e.sigma, "sigma", t, x);
  e.grad_x1_F2 = grad_x1_F2(model, t, x);
  return e;
}

DriftField drift_field(const ModelSpec& model) {
  return [&model](double t, const PhasePoint& x) { return drift(model, t, x); };
}

ModelSpec kolmogorov_model(int d) {
  ModelSpec m;
  m.name = "kolmogorov";
  m.d = d;
  m.F1 = [d](double, const PhasePoint&) { return Vec::Zero(d).eval(); };
  m.F2 = [d](double, const PhasePoint& x) { return Vec(x.head(d)); };
  m.sigma = [d](double, const PhasePoint&) { return Mat::Identity(d, d).eval(); };
  m.grad_x1_F2 = [d](double, const PhasePoint&) { return Mat::Identity(d, d).eval(); };
  return m;
}

ModelSpec zero_model(int d) {
  ModelSpec m = kolmogorov_model(d);
  m.name = "zero";
  m.F2 = [d](double, const PhasePoint&) { return Vec::Zero(d).eval(); };
  m.grad_x1_F2 = [d](double, const PhasePoint&) { return Mat::Zero(d, d).eval(); };
  return m;
}

ModelSpec constant_drift_model(const Vec& f1, const Vec& f2) {
  if (f1.size() != f2.size() || f1.size() == 0)
    throw DomainError("constant drift blocks must have equal positive size");
  const int d = static_cast<int>(f1.size());
  ModelSpec m = kolmogorov_model(d);
  m.name = "constant";
  m.F1 = [f1](double, const PhasePoint&) { return f1; };
  m.F2 = [f2](double, const PhasePoint&) { return f2; };
  m.grad_x1_F2 = [d](double, const PhasePoint&) { return Mat::Zero(d, d).eval(); };
  return m;
}

ModelSpec holder_model(int d, const HolderParams& p) {
  if (!(p.gamma > 0.0 && p.gamma <= 1.0)) throw DomainError("holder gamma must lie in (0, 1]");
  ModelSpec m;
  m.name = "holder";
  m.d = d;
  m.F1 = [d, p](double, const PhasePoint& x) {
    Vec out(d);
    for (int i = 0; i < d; ++i) {
      const double v = x(i);
      const double sgn = (v > 0.0) - (v < 0.0);
      out(i) = p.a * sgn * clipped_pow(v, p.gamma) + p.b * v;
    }
    return out;
  };
  m.F2 = [d, p](double, const PhasePoint& x) {
    Vec out(d);
    const double e = (1.0 + p.gamma) / 3.0;
    for (int i = 0; i < d; ++i) out(i) = x(i) + p.c * clipped_pow(x(d + i), e);
    return out;
  };
  m.sigma = [d, p](double, const PhasePoint& x) {
    const double n = block1(x).norm() + std::cbrt(block2(x).norm());
    return ((1.0 + 0.25 * std::sin(std::pow(n, p.gamma))) * Mat::Identity(d, d)).eval();
  };
  m.grad_x1_F2 = [d](double, const PhasePoint&) { return Mat::Identity(d, d).eval(); };
  m.meta.gamma = p.gamma;
  m.meta.kappa0 = 2.0;
  m.meta.kappa1 = std::max({2.0 * std::abs(p.a), std::abs(p.b), 1e-12});
  m.meta.kappa2 = std::max(1.0, std::abs(p.c));
  m.meta.c0 = 1.0;
  return m;
}

ModelSpec damped_hamiltonian_model(int d, const HamiltonianParams& p) {
  ModelSpec m = kolmogorov_model(d);
  m.name = "damped-hamiltonian";
  m.F1 = [d, p](double, const PhasePoint& x) {
    const Vec q = x.tail(d);
    return Vec(-(p.stiffness + p.quartic * q.squaredNorm()) * q - x.head(d));
  };
  m.meta.kappa1 = std::max(1.0, p.stiffness);
  return m;
}

ModelSpec with_sigma_scale(const ModelSpec& model, double c) {
  ModelSpec m = model;
  auto base = model.sigma;
  m.sigma = [base, c](double t, const PhasePoint& x) { return Mat(c * base(t, x)); };
  return m;
}

ModelSpec model_by_name(const std::string& name, int d, const std::map<std::string, double>& params) {
  auto get = [&params](const char* key, double fallback) {
    auto it = params.find(key);
    return it == params.end() ? fallback : it->second;
  };
  ModelSpec m;
  if (name == "kolmogorov") {
    m = kolmogorov_model(d);
  } else if (name == "zero") {
    m = zero_model(d);
  } else if (name == "constant") {
    m = constant_drift_model(Vec::Constant(d, get("f1", 1.0)), Vec::Constant(d, get("f2", 0.0)));
  } else if (name == "holder") {
    HolderParams p;
    p.gamma = get("gamma", p.gamma);
    p.a = get("a", p.a);
    p.b = get("b", p.b);
    p.c = get("c", p.c);
    m = holder_model(d, p);
  } else if (name == "damped-hamiltonian") {
    HamiltonianParams p;
    p.stiffness = get("stiffness", p.stiffness);
    p.quartic = get("quartic", p.quartic);
    m = damped_hamiltonian_model(d, p);
  } else {
    throw DomainError("model.name: unknown model '" + name + "'");
  }
  if (auto it = params.find("sigma_scale"); it != params.end()) m = with_sigma_scale(m, it->second);
  return m;
}

// ---------------------------------------------------------------- mollifier

namespace {

double bump(double r2) { return r2 < 1.0 ? std::exp(-1.0 / (1.0 - r2)) : 0.0; }

// Mass of the unnormalized bump over the unit ball of R^dim (radial integral).
double bump_mass(int dim) {
  using boost::math::quadrature::gauss_kronrod;
  auto radial = [dim](double r) { return std::pow(r, dim - 1) * bump(r * r); };
  // Shallow depth: deeper refinement only chases roundoff near r = 1 and costs seconds.
  const double I = gauss_kronrod<double, 61>::integrate(radial, 0.0, 1.0, 5, 1e-14);
  const double sphere = 2.0 * std::pow(M_PI, 0.5 * dim) / boost::math::tgamma(0.5 * dim);
  return sphere * I;
}

double cached_bump_mass(int dim) {
  static std::mutex mu;
  static std::map<int, double> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(dim);
  if (it == cache.end()) it = cache.emplace(dim, bump_mass(dim)).first;
  return it->second;
}

// Calls fn(z, w) for each node of the n^dim tensor Gauss-Legendre grid on [-1,1]^dim.
template <class Fn>
void tensor_grid(int dim, int n, Fn&& fn) {
  const GaussRule& rule = gauss_legendre(n);
  std::vector<int> idx(dim, 0);
  Vec z(dim);
  while (true) {
    double w = 1.0;
    for (int k = 0; k < dim; ++k) {
      z(k) = rule.nodes[idx[k]];
      w *= rule.weights[idx[k]];
    }
    fn(z, w);
    int k = 0;
    while (k < dim && ++idx[k] == n) idx[k++] = 0;
    if (k == dim) break;
  }
}

}  // namespace

int default_mollifier_nodes(int dim) { return dim <= 2 ? 32 : dim <= 4 ? 12 : 6; }

Mollifier::Mollifier(int dim, int nodes_per_dim) : dim_(dim), norm_const_(cached_bump_mass(dim)) {
  if (nodes_per_dim == 0 && dim >= 1) nodes_per_dim = default_mollifier_nodes(dim);
  if (dim < 1 || nodes_per_dim < 2) throw DomainError("mollifier: bad dimension or node count");
  double total = 0.0;
  tensor_grid(dim, nodes_per_dim, [&](const Vec& z, double w) {
    const double rho = profile(z);
    if (rho > 0.0) {
      nodes_.push_back(z);
      weights_.push_back(w * rho);
      total += w * rho;
    }
  });
  for (double& w : weights_) w /= total;
}

double Mollifier::profile(const Vec& z) const { return bump(z.squaredNorm()) / norm_const_; }

double Mollifier::mass(int nodes_per_dim) const {
  double total = 0.0;
  tensor_grid(dim_, nodes_per_dim, [&](const Vec& z, double w) { total += w * profile(z); });
  return total;
}

Vec Mollifier::convolve(const VecField& f, double t, const PhasePoint& x, double eps) const {
  Vec acc;
  for (size_t k = 0; k < nodes_.size(); ++k) {
    const Vec v = f(t, x - eps * nodes_[k]);
    if (k == 0)
      acc = weights_[k] * v;
    else
      acc += weights_[k] * v;
  }
  return acc;
}

Mat Mollifier::convolve(const MatField& f, double t, const PhasePoint& x, double eps) const {
  Mat acc;
  for (size_t k = 0; k < nodes_.size(); ++k) {
    const Mat v = f(t, x - eps * nodes_[k]);
    if (k == 0)
      acc = weights_[k] * v;
    else
      acc += weights_[k] * v;
  }
  return acc;
}

ModelSpec mollify_drift(const ModelSpec& model, double eps, bool mollify_sigma, int nodes_per_dim) {
  if (!(eps > 0.0 && eps < 1.0)) throw DomainError("mollify_drift: epsilon must lie in (0, 1)");
  auto rho = std::make_shared<const Mollifier>(2 * model.d, nodes_per_dim);
  ModelSpec m = model;
  m.name = model.name + "*rho";
  VecField f1 = model.F1;
  VecField f2 = model.F2;
  m.F1 = [rho, f1, eps](double t, const PhasePoint& x) { return rho->convolve(f1, t, x, eps); };
  m.F2 = [rho, f2, eps](double t, const PhasePoint& x) { return rho->convolve(f2, t, x, eps); };
  // grad (F2 * rho) = (grad F2) * rho
  MatField g = model.grad_x1_F2
                   ? model.grad_x1_F2
                   : MatField([model](double t, const PhasePoint& x) { return grad_x1_F2(model, t, x); });
  m.grad_x1_F2 = [rho, g, eps](double t, const PhasePoint& x) { return rho->convolve(g, t, x, eps); };
  if (mollify_sigma) {
    MatField sg = model.sigma;
    m.sigma = [rho, sg, eps](double t, const PhasePoint& x) { return rho->convolve(sg, t, x, eps); };
  }
  return m;
}

DriftField tilde_drift(const ModelSpec& model, double s, const TildeOptions& opts) {
  auto rho = std::make_shared<const Mollifier>(2 * model.d, opts.nodes_per_dim);
  VecField f1 = model.F1;
  VecField f2 = model.F2;
  const int d = model.d;
  return [rho, f1, f2, s, d, opts](double t, const PhasePoint& x) {
    Vec out(2 * d);
    out.head(d) = rho->convolve(f1, t, x, opts.macro_scale);
    const double span = std::abs(t - s);
    if (!opts.mollify_F2 || span == 0.0)
      out.tail(d) = f2(t, x);
    else
      out.tail(d) = rho->convolve(f2, t, x, span * std::sqrt(span));
    return out;
  };
}

// ---------------------------------------------------------------- audit

AuditReport audit_assumptions(const ModelSpec& model, const SamplingPlan& plan) {
  validate_model(model);
  if (plan.pairs < 1) throw DomainError("sampling plan needs at least one pair");
  if (plan.times.empty()) throw DomainError("sampling plan needs at least one time");
  const int d = model.d;
  const double g = model.meta.gamma;

  // Pairs are drawn sequentially so the plan is reproducible; evaluation is parallel.
  std::mt19937_64 rng(plan.seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> logscale(-4.0, 0.0);
  std::vector<PhasePoint> xs(plan.pairs), ys(plan.pairs);
  std::vector<double> ts(plan.pairs);
  for (int i = 0; i < plan.pairs; ++i) {
    PhasePoint x(2 * d), delta(2 * d);
    for (int k = 0; k < 2 * d; ++k) x(k) = plan.box * unit(rng);
    const double r = std::pow(10.0, logscale(rng));
    for (int k = 0; k < d; ++k) {
      delta(k) = r * unit(rng);
      delta(d + k) = r * r * r * unit(rng);
    }
    const double n = aniso_norm(delta);
    if (n > 1.0) delta = scale_map(1.0 / (n * n), delta, ScaleDirection::Forward);
    xs[i] = x;
    ys[i] = x + delta;
    ts[i] = plan.times[i % plan.times.size()];
  }

  struct Row {
    double sig, f2, f1, eig_lo, eig_hi, sv;
  };
  std::vector<Row> rows(plan.pairs);
  parallel_for(plan.pairs, [&](size_t i) {
    const ModelEval ex = evaluate_model(model, ts[i], xs[i]);
    const ModelEval ey = evaluate_model(model, ts[i], ys[i]);
    const PhasePoint diff = xs[i] - ys[i];
    const double dist = aniso_norm(diff);
    Row row{};
    if (dist > 0.0) {
      Eigen::JacobiSVD<Mat> sd(ex.sigma - ey.sigma);
      row.sig = sd.singularValues()(0) / std::pow(dist, g);
      const Vec taylor = ex.F2 - ey.F2 - ey.grad_x1_F2 * diff.head(d);
      row.f2 = taylor.norm() / std::pow(dist, 1.0 + g);
    }
    row.f1 = (ex.F1 - ey.F1).norm() / (1.0 + diff.norm());
    row.eig_lo = std::numeric_limits<double>::infinity();
    row.eig_hi = 0.0;
    for (const Mat* s : {&ex.sigma, &ey.sigma}) {
      Eigen::SelfAdjointEigenSolver<Mat> es((*s) * s->transpose(), Eigen::EigenvaluesOnly);
      row.eig_lo = std::min(row.eig_lo, es.eigenvalues().minCoeff());
      row.eig_hi = std::max(row.eig_hi, es.eigenvalues().maxCoeff());
    }
    Eigen::JacobiSVD<Mat> sg(ex.grad_x1_F2);
    row.sv = sg.singularValues().minCoeff();
    rows[i] = row;
  });

  AuditReport rep;
  rep.pairs = plan.pairs;
  rep.eig_min = std::numeric_limits<double>::infinity();
  rep.grad_sv_min = std::numeric_limits<double>::infinity();
  for (int i = 0; i < plan.pairs; ++i) {
    const Row& r = rows[i];
    if (r.sig > rep.sigma_holder) {
      rep.sigma_holder = r.sig;
      rep.sigma_witness = {ts[i], xs[i], ys[i]};
    }
    if (r.f2 > rep.f2_taylor) {
      rep.f2_taylor = r.f2;
      rep.f2_witness = {ts[i], xs[i], ys[i]};
    }
    rep.f1_growth = std::max(rep.f1_growth, r.f1);
    rep.eig_min = std::min(rep.eig_min, r.eig_lo);
    rep.eig_max = std::max(rep.eig_max, r.eig_hi);
    rep.grad_sv_min = std::min(rep.grad_sv_min, r.sv);
  }
  for (double t : plan.times) {
    const PhasePoint zero = PhasePoint::Zero(2 * d);
    rep.f_at_zero = std::max({rep.f_at_zero, model.F1(t, zero).norm(), model.F2(t, zero).norm()});
  }
  const RegularityBudget& b = model.meta;
  rep.ellipticity_ok = rep.eig_min >= 1.0 / b.kappa0 && rep.eig_max <= b.kappa0;
  rep.sigma_holder_ok = rep.sigma_holder <= b.kappa0;
  rep.f1_ok = rep.f1_growth <= b.kappa1 && rep.f_at_zero <= std::max(b.kappa1, b.kappa2);
  rep.f2_ok = rep.f2_taylor <= b.kappa2;
  rep.grad_ok = rep.grad_sv_min >= b.c0;
  rep.pass = rep.ellipticity_ok && rep.sigma_holder_ok && rep.f1_ok && rep.f2_ok && rep.grad_ok;
  return rep;
}

}  // namespace kk
