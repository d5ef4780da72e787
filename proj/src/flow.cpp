#include "kk/flow.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>

namespace kk {

DenseTrajectory::DenseTrajectory(std::vector<double> t, std::vector<Vec> y, std::vector<Vec> f)
    : t_(std::move(t)), y_(std::move(y)), f_(std::move(f)) {}

Vec DenseTrajectory::at(double r) const {
  const size_t n = t_.size();
  if (n == 1) return y_[0];
  const bool fwd = t_.back() > t_.front();
  const double lo = fwd ? t_.front() : t_.back();
  const double hi = fwd ? t_.back() : t_.front();
  const double slack = 1e-12 * std::max(1.0, std::abs(hi - lo));
  if (r < lo - slack || r > hi + slack) throw DomainError("dense output queried outside its span");
  // Index of the last node not past r in the direction of integration.
  size_t k;
  if (fwd)
    k = static_cast<size_t>(std::upper_bound(t_.begin(), t_.end(), r) - t_.begin());
  else
    k = static_cast<size_t>(std::upper_bound(t_.begin(), t_.end(), r, std::greater<double>()) -
                            t_.begin());
  if (k == 0) return y_[0];
  if (k >= n) return y_[n - 1];
  --k;
  if (r == t_[k]) return y_[k];
  const double h = t_[k + 1] - t_[k];
  const double s = (r - t_[k]) / h;
  const double s2 = s * s;
  const double s3 = s2 * s;
  return (2 * s3 - 3 * s2 + 1) * y_[k] + (s3 - 2 * s2 + s) * h * f_[k] +
         (-2 * s3 + 3 * s2) * y_[k + 1] + (s3 - s2) * h * f_[k + 1];
}

namespace {

// Dormand-Prince 5(4) tableau.
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                 a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                 b6 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                 e6 = 22.0 / 525, e7 = -1.0 / 40;

double scaled_norm(const Vec& v, const Vec& ref, const OdeOptions& o) {
  double m = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i)
    m = std::max(m, std::abs(v(i)) / (o.atol + o.rtol * std::abs(ref(i))));
  return m;
}

}  // namespace

DenseTrajectory integrate_ode(const OdeRhs& rhs, double t0, double t1, const Vec& y0,
                              const OdeOptions& opts) {
  if (!y0.allFinite()) throw DomainError("integrate_ode: non-finite initial state");
  std::vector<double> ts{t0};
  std::vector<Vec> ys{y0};
  const Eigen::Index n = y0.size();
  Vec k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), tmp(n), ynew(n), err(n);
  rhs(t0, y0, k1);
  std::vector<Vec> fs{k1};
  if (t1 == t0) return DenseTrajectory(ts, ys, fs);

  const double dir = t1 > t0 ? 1.0 : -1.0;
  const double span = std::abs(t1 - t0);
  double hmax = opts.max_step > 0 ? std::min(opts.max_step, span) : span;

  // Starting step (Hairer, Norsett and Wanner).
  double habs;
  {
    const double d0 = scaled_norm(y0, y0, opts);
    const double d1 = scaled_norm(k1, y0, opts);
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    h0 = std::min(h0, hmax);
    tmp = y0 + dir * h0 * k1;
    rhs(t0 + dir * h0, tmp, k2);
    const double d2 = scaled_norm(k2 - k1, y0, opts) / h0;
    const double dm = std::max(d1, d2);
    const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
    habs = std::min({100 * h0, h1, hmax});
  }

  double t = t0;
  Vec y = y0;
  long steps = 0;
  bool last_rejected = false;
  while (dir * (t1 - t) > 0) {
    if (++steps > opts.max_steps) throw IntegrationError("integrate_ode: too many steps", t, y);
    const double tiny = 1e-14 * std::max(1.0, std::abs(t));
    if (habs < tiny) throw IntegrationError("integrate_ode: step size underflow", t, y);
    bool final_step = false;
    if (habs >= std::abs(t1 - t)) {
      habs = std::abs(t1 - t);
      final_step = true;
    }
    const double h = dir * habs;
    tmp = y + h * a21 * k1;
    rhs(t + c2 * h, tmp, k2);
    tmp = y + h * (a31 * k1 + a32 * k2);
    rhs(t + c3 * h, tmp, k3);
    tmp = y + h * (a41 * k1 + a42 * k2 + a43 * k3);
    rhs(t + c4 * h, tmp, k4);
    tmp = y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4);
    rhs(t + c5 * h, tmp, k5);
    tmp = y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
    const double tn = final_step ? t1 : t + h;
    rhs(tn, tmp, k6);
    ynew = y + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
    rhs(tn, ynew, k7);
    err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
    Vec ref = y.cwiseAbs().cwiseMax(ynew.cwiseAbs());
    double en = scaled_norm(err, ref, opts);
    if (!std::isfinite(en) || !ynew.allFinite() || !k7.allFinite())
      en = std::numeric_limits<double>::infinity();
    if (en <= 1.0) {
      t = tn;
      y = ynew;
      k1 = k7;
      ts.push_back(t);
      ys.push_back(y);
      fs.push_back(k1);
      double fac = en == 0.0 ? 5.0 : std::min(5.0, std::max(0.2, 0.9 * std::pow(en, -0.2)));
      if (last_rejected) fac = std::min(fac, 1.0);
      habs = std::min(habs * fac, hmax);
      last_rejected = false;
    } else {
      const double fac = std::isfinite(en) ? std::max(0.1, 0.9 * std::pow(en, -0.2)) : 0.1;
      habs *= fac;
      last_rejected = true;
    }
  }
  return DenseTrajectory(std::move(ts), std::move(ys), std::move(fs));
}

FlowTrajectory::FlowTrajectory(double s, PhasePoint x, DenseTrajectory path)
    : s_(s), x_(std::move(x)), path_(std::move(path)) {}

void FlowTrajectory::write_csv(std::ostream& out) const {
  const int d = phase_dim(x_);
  out << "time";
  for (int i = 1; i <= d; ++i) out << ",x1_" << i;
  for (int i = 1; i <= d; ++i) out << ",x2_" << i;
  out << "\n";
  out << std::setprecision(17);
  for (size_t k = 0; k < path_.size(); ++k) {
    out << path_.times()[k];
    for (Eigen::Index i = 0; i < 2 * d; ++i) out << "," << path_.states()[k](i);
    out << "\n";
  }
}

FlowTrajectory integrate_drift(const DriftField& F, double s, double t, const PhasePoint& x,
                               const FlowOptions& opts) {
  require_phase_point(x, "flow start");
  OdeOptions o;
  o.rtol = o.atol = opts.tol;
  OdeRhs rhs = [&F](double r, const Vec& y, Vec& dy) { dy = F(r, y); };
  return FlowTrajectory(s, x, integrate_ode(rhs, s, t, x, o));
}

FlowTrajectory integrate_flow(const ModelSpec& model, double s, double t, const PhasePoint& x,
                              const FlowOptions& opts) {
  if (x.size() != 2 * model.d) throw DomainError("flow start dimension does not match model");
  return integrate_drift(drift_field(model), s, t, x, opts);
}

PhasePoint flow_point(const ModelSpec& model, double s, double t, const PhasePoint& x,
                      const FlowOptions& opts) {
  return integrate_flow(model, s, t, x, opts).end();
}

FlowMap flow_map(const ModelSpec& model, const FlowOptions& opts) {
  return [&model, opts](double from, double to, const PhasePoint& x) {
    return flow_point(model, from, to, x, opts);
  };
}

FlowTrajectory tilde_flow(const ModelSpec& model, double s, double t, const PhasePoint& x,
                          const FlowOptions& opts, const TildeOptions& topts) {
  if (t < s) throw DomainError("tilde_flow requires t >= s");
  return integrate_drift(tilde_drift(model, s, topts), s, t, x, opts);
}

double flow_gap(const ModelSpec& model, double s, double t, const PhasePoint& x, double eps,
                const FlowOptions& opts, const TildeOptions& topts) {
  if (!(t > s)) throw DomainError("flow_gap requires t > s");
  const double span = t - s;
  if (!(eps > 0.0) || eps > span * std::sqrt(span) * (1.0 + 1e-12))
    throw DomainError("flow_gap requires 0 < eps <= (t-s)^{3/2}");
  const ModelSpec moll = mollify_drift(model, eps, false, topts.nodes_per_dim);
  const PhasePoint a = flow_point(moll, s, t, x, opts);
  const PhasePoint b = tilde_flow(model, s, t, x, opts, topts).end();
  return scale_map(span, a - b, ScaleDirection::Inverse).norm();
}

double FlowEquivalence::kappa() const {
  double k = 1.0;
  if (rhs > 0) k = std::max(k, mid / rhs);
  if (lhs > 1.0) k = mid > 0 ? std::max(k, (lhs - 1.0) / mid) : std::numeric_limits<double>::infinity();
  return k;
}

FlowEquivalence flow_equivalence_ratio(const ModelSpec& model, double s, double r, double t,
                                       const PhasePoint& x, const PhasePoint& y,
                                       const FlowOptions& opts) {
  if (!(s <= r && r < t)) throw DomainError("flow_equivalence_ratio requires s <= r < t");
  const double span = t - s;
  FlowEquivalence q;
  q.lhs = scale_map(span, x - flow_point(model, t, r, y, opts), ScaleDirection::Inverse).norm();
  q.mid = scale_map(span, flow_point(model, r, t, x, opts) - y, ScaleDirection::Inverse).norm();
  q.rhs = q.lhs + 1.0;
  return q;
}

double gronwall_bound(double c1, double c2, double alpha, double f0, double t) {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw DomainError("gronwall_bound requires alpha in [0, 1)");
  const double e = std::exp(c2 * t);
  return e * f0 + std::pow(c1 * e * (1.0 - alpha) * t, 1.0 / (1.0 - alpha));
}

double bihari_bound(double c1, double c2, double alpha, double f0, double t) {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw DomainError("bihari_bound requires alpha in [0, 1)");
  const double q = 1.0 - alpha;
  return std::exp(c2 * t) * std::pow(std::pow(f0, q) + c1 * q * t, 1.0 / q);
}

double gronwall_solution(double c1, double c2, double alpha, double f0, double t,
                         const OdeOptions& opts) {
  if (f0 < 0.0) throw DomainError("gronwall_solution requires f0 >= 0");
  OdeRhs rhs = [=](double, const Vec& y, Vec& dy) {
    const double f = std::max(y(0), 0.0);
    dy(0) = c1 * std::pow(f, alpha) + c2 * f;
  };
  return integrate_ode(rhs, 0.0, t, Vec::Constant(1, f0), opts).end()(0);
}

}  // namespace kk
