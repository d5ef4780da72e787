#include "kk/control.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <memory>

#include "kk/parallel.hpp"
#include "kk/quadrature.hpp"

namespace kk {

void ControlSolution::write_csv(std::ostream& out) const {
  const int d = control.empty() ? 0 : static_cast<int>(control.front().size());
  out << "time";
  for (int i = 1; i <= d; ++i) out << ",phi_" << i;
  for (int i = 1; i <= d; ++i) out << ",x1_" << i;
  for (int i = 1; i <= d; ++i) out << ",x2_" << i;
  out << "\n" << std::setprecision(17);
  for (size_t k = 0; k < times.size(); ++k) {
    out << times[k];
    for (int i = 0; i < d; ++i) out << "," << control[k](i);
    for (int i = 0; i < 2 * d; ++i) out << "," << state[k](i);
    out << "\n";
  }
}

namespace {

// A trajectory iterate: a convex combination of integrated paths (damping mixes two).
struct Iterate {
  std::vector<std::pair<double, std::shared_ptr<const DenseTrajectory>>> parts;
  int n = 0;  // phase-space size; trailing components of each path are ignored

  PhasePoint at(double r) const {
    PhasePoint v = PhasePoint::Zero(n);
    for (const auto& [w, p] : parts) v += w * p->at(r).head(n);
    return v;
  }
};

Iterate mix(const Iterate& a, const Iterate& b, double wb) {
  Iterate out;
  out.n = a.n;
  for (const auto& [w, p] : a.parts) out.parts.emplace_back((1.0 - wb) * w, p);
  for (const auto& [w, p] : b.parts) out.parts.emplace_back(wb * w, p);
  return out;
}

// Linear system frozen along one iterate: running integral of the averaged
// gradient of F2 plus the moments that assemble K and the Duhamel forcing term.
struct Frozen {
  DenseTrajectory path;  // m (d*d) followed by the moments
  Mat Mt;
  Mat K;
  Vec forcing;  // int R_{t,r} F~(r, psi_r) dr
  bool linear = true;

  Mat m_at(double r, int d) const {
    const Vec v = path.at(r);
    return Eigen::Map<const Mat>(v.data(), d, d);
  }
};

class Solver {
 public:
  Solver(const ModelSpec& model, const ControlOptions& opts) : model_(model), opts_(opts) {
    d_ = model.d;
    const GaussRule& g = gauss_legendre(opts.u_nodes);
    for (int k = 0; k < opts.u_nodes; ++k) {
      un_.push_back(0.5 * (g.nodes[k] + 1.0));
      uw_.push_back(0.5 * g.weights[k]);
    }
  }

  ControlSolution solve(double s, const PhasePoint& x, double t, const PhasePoint& y,
                        int depth) const {
    const int n = 2 * d_;
    FlowOptions fo;
    fo.tol = opts_.ode_tol;
    const FlowTrajectory theta = integrate_flow(model_, s, t, x, fo);
    Iterate prev;
    prev.n = n;
    prev.parts.emplace_back(1.0, std::make_shared<DenseTrajectory>(theta.path()));

    const Vec scale = scale_diagonal(t - s, d_).cwiseInverse();
    double last_change = -1.0, contraction = 0.0;
    int slow = 0;
    Frozen fz;
    Vec lambda;
    std::shared_ptr<const DenseTrajectory> steered;
    int it = 0;
    bool converged = false;
    for (it = 1; it <= opts_.max_iterations; ++it) {
      fz = freeze(s, t, y, theta, prev);
      lambda = solve_gram(fz.K, scale, y - theta.end() - fz.forcing);
      steered = std::make_shared<DenseTrajectory>(steer(s, t, x, fz, lambda));

      double change = 0.0;
      for (int k = 0; k <= 64; ++k) {
        const double r = s + (t - s) * k / 64.0;
        change = std::max(change, (scale.asDiagonal() * (steered->at(r).head(n) - prev.at(r))).norm());
      }
      Iterate next;
      next.n = n;
      next.parts.emplace_back(1.0, steered);
      if (change < opts_.tol) {
        converged = true;
        prev = next;
        break;
      }
      if (last_change > 0.0) {
        contraction = change / last_change;
        slow = contraction > opts_.split_contraction ? slow + 1 : 0;
      }
      // Oscillation: halve the update while the combination stays small.
      if (last_change > 0.0 && change > last_change && prev.parts.size() < 8)
        prev = mix(prev, next, 0.5);
      else
        prev = next;
      last_change = change;
      if (slow >= 2 && depth < opts_.max_split_depth) return split(s, x, t, y, prev, depth);
    }

    ControlSolution sol = assemble(s, t, y, fz, lambda, *steered);
    sol.iterations = std::min(it, opts_.max_iterations);
    sol.contraction = contraction;
    if (!converged) {
      if (depth < opts_.max_split_depth) return split(s, x, t, y, prev, depth);
      throw ControlError("solve_control: no convergence within max_iterations", sol, contraction);
    }
    // Terminal polishing: the fixed point hits y only up to the integration error
    // of the last pass; chord corrections of the multiplier remove the residual.
    while (sol.terminal_error >= opts_.tol && sol.polish_steps < opts_.max_polish) {
      const Vec miss = y - steered->at(t).head(n);
      lambda += solve_gram(fz.K, scale, miss);
      steered = std::make_shared<DenseTrajectory>(steer(s, t, x, fz, lambda));
      const int p = sol.polish_steps + 1;
      sol = assemble(s, t, y, fz, lambda, *steered);
      sol.iterations = it;
      sol.contraction = contraction;
      sol.polish_steps = p;
    }
    if (sol.terminal_error >= opts_.tol)
      throw ControlError("solve_control: terminal constraint not met", sol, contraction);
    return sol;
  }

 private:
  Mat avg_grad(double r, const PhasePoint& th, const PhasePoint& psi) const {
    Mat A = Mat::Zero(d_, d_);
    PhasePoint z(2 * d_);
    z.tail(d_) = th.tail(d_) + psi.tail(d_);
    for (size_t k = 0; k < un_.size(); ++k) {
      z.head(d_) = th.head(d_) + un_[k] * psi.head(d_);
      A += uw_[k] * grad_x1_F2(model_, r, z);
    }
    return A;
  }

  Frozen freeze(double s, double t, const PhasePoint&, const FlowTrajectory& theta,
                const Iterate& prev) const {
    const int d = d_, dd = d * d;
    // Layout: m | I1 | I2 | IMF | IM | IMM.
    const int o1 = dd, o2 = o1 + d, o3 = o2 + d, o4 = o3 + d, o5 = o4 + dd, size = o5 + dd;
    bool linear = true;
    Mat A0;
    OdeRhs rhs = [&](double r, const Vec& st, Vec& ds) {
      const PhasePoint th = theta.at(r);
      const PhasePoint psi = prev.at(r) - th;
      const Mat A = avg_grad(r, th, psi);
      const Vec f1 = model_.F1(r, th + psi) - model_.F1(r, th);
      PhasePoint z2 = th;
      z2.tail(d) += psi.tail(d);
      const Vec f2 = model_.F2(r, z2) - model_.F2(r, th);
      if (!f1.allFinite() || !f2.allFinite() || !A.allFinite())
        throw ModelError("non-finite coefficient in control iteration", r, th + psi);
      if (A0.size() == 0) A0 = A;
      if (f1.cwiseAbs().maxCoeff() > 0.0 || f2.cwiseAbs().maxCoeff() > 0.0 || (A - A0).norm() > 0.0)
        linear = false;
      const Eigen::Map<const Mat> m(st.data(), d, d);
      Eigen::Map<Mat>(ds.data(), d, d) = A;
      ds.segment(o1, d) = f1;
      ds.segment(o2, d) = f2;
      ds.segment(o3, d) = m * f1;
      Eigen::Map<Mat>(ds.data() + o4, d, d) = m;
      Eigen::Map<Mat>(ds.data() + o5, d, d) = m * m.transpose();
    };
    OdeOptions oo;
    oo.rtol = oo.atol = opts_.ode_tol;
    Frozen fz;
    fz.path = integrate_ode(rhs, s, t, Vec::Zero(size), oo);
    fz.linear = linear;
    const Vec& e = fz.path.end();
    const double L = t - s;
    fz.Mt = Eigen::Map<const Mat>(e.data(), d, d);
    const Vec I1 = e.segment(o1, d), I2 = e.segment(o2, d), IMF = e.segment(o3, d);
    const Mat IM = Eigen::Map<const Mat>(e.data() + o4, d, d);
    const Mat IMM = Eigen::Map<const Mat>(e.data() + o5, d, d);
    const Mat& Mt = fz.Mt;
    fz.K = Mat(2 * d, 2 * d);
    const Mat off = L * Mt - IM;
    fz.K.topLeftCorner(d, d) = L * Mat::Identity(d, d);
    fz.K.bottomLeftCorner(d, d) = off;
    fz.K.topRightCorner(d, d) = off.transpose();
    fz.K.bottomRightCorner(d, d) = L * Mt * Mt.transpose() - Mt * IM.transpose() - IM * Mt.transpose() + IMM;
    fz.forcing = Vec(2 * d);
    fz.forcing.head(d) = I1;
    fz.forcing.tail(d) = I2 + Mt * I1 - IMF;
    return fz;
  }

  // K^{-1} c through the scaled matrix T^{-1} K T^{-1}.
  static Vec solve_gram(const Mat& K, const Vec& scale, const Vec& c) {
    const Mat Kh = scale.asDiagonal() * K * scale.asDiagonal();
    Eigen::LLT<Mat> llt(Kh);
    if (llt.info() != Eigen::Success) throw NumericError("control Gram matrix not positive definite");
    return scale.asDiagonal() * llt.solve(scale.asDiagonal() * c);
  }

  Vec control_at(const Frozen& fz, const Vec& lambda, double r) const {
    return lambda.head(d_) + (fz.Mt - fz.m_at(r, d_)).transpose() * lambda.tail(d_);
  }

  // phi' = F(r, phi) + B varphi_r together with the running energy.
  DenseTrajectory steer(double s, double t, const PhasePoint& x, const Frozen& fz,
                        const Vec& lambda) const {
    const int n = 2 * d_;
    OdeRhs rhs = [&](double r, const Vec& st, Vec& ds) {
      const Vec u = control_at(fz, lambda, r);
      const PhasePoint phi = st.head(n);
      ds.head(n) = drift(model_, r, phi);
      ds.head(d_) += u;
      ds(n) = u.squaredNorm();
    };
    OdeOptions oo;
    oo.rtol = oo.atol = opts_.ode_tol;
    Vec y0 = Vec::Zero(n + 1);
    y0.head(n) = x;
    return integrate_ode(rhs, s, t, y0, oo);
  }

  ControlSolution assemble(double s, double t, const PhasePoint& y, const Frozen& fz,
                           const Vec& lambda, const DenseTrajectory& path) const {
    const int n = 2 * d_;
    ControlSolution sol;
    sol.s = s;
    sol.t = t;
    const int m = std::max(2, opts_.samples);
    for (int k = 0; k < m; ++k) {
      const double r = k + 1 == m ? t : s + (t - s) * k / (m - 1.0);
      sol.times.push_back(r);
      sol.control.push_back(control_at(fz, lambda, r));
      sol.state.push_back(path.at(r).head(n));
      sol.sup_control = std::max(sol.sup_control, sol.control.back().norm());
    }
    for (double r : path.times())
      sol.sup_control = std::max(sol.sup_control, control_at(fz, lambda, r).norm());
    sol.energy = std::sqrt(std::max(0.0, path.end()(n)));
    sol.terminal_error =
        (scale_diagonal(t - s, d_).cwiseInverse().asDiagonal() * (path.end().head(n) - y)).norm();
    sol.optimal = fz.linear;
    return sol;
  }

  // Bisect at the midpoint through the current iterate and concatenate.
  ControlSolution split(double s, const PhasePoint& x, double t, const PhasePoint& y,
                        const Iterate& current, int depth) const {
    const double mid = 0.5 * (s + t);
    const PhasePoint z = current.at(mid);
    const ControlSolution a = solve(s, x, mid, z, depth + 1);
    const ControlSolution b = solve(mid, z, t, y, depth + 1);
    ControlSolution sol = a;
    sol.t = t;
    for (size_t k = 1; k < b.times.size(); ++k) {
      sol.times.push_back(b.times[k]);
      sol.control.push_back(b.control[k]);
      sol.state.push_back(b.state[k]);
    }
    sol.energy = std::hypot(a.energy, b.energy);
    sol.sup_control = std::max(a.sup_control, b.sup_control);
    sol.iterations = a.iterations + b.iterations;
    sol.polish_steps = a.polish_steps + b.polish_steps;
    sol.splits = a.splits + b.splits + 1;
    sol.contraction = std::max(a.contraction, b.contraction);
    sol.optimal = false;
    // Both halves end within tolerance in their own scaling, which is finer.
    const PhasePoint miss = b.state.back() - y;
    sol.terminal_error = (scale_diagonal(t - s, d_).cwiseInverse().asDiagonal() * miss).norm();
    return sol;
  }

  const ModelSpec& model_;
  ControlOptions opts_;
  int d_;
  std::vector<double> un_, uw_;
};

}  // namespace

ControlSolution solve_control(const ModelSpec& model, double s, const PhasePoint& x, double t,
                              const PhasePoint& y, const ControlOptions& opts) {
  validate_model(model);
  require_phase_point(x, "x");
  require_phase_point(y, "y");
  if (x.size() != 2 * model.d || y.size() != 2 * model.d)
    throw DomainError("control endpoints do not match the model dimension");
  if (!(s < t)) throw DomainError("solve_control requires s < t");
  if (!(opts.tol > 0.0) || opts.max_iterations < 1 || opts.samples < 2 || opts.u_nodes < 1)
    throw DomainError("invalid control options");
  return Solver(model, opts).solve(s, x, t, y, 0);
}

double lq_energy(const Mat& G, double s, const PhasePoint& x, double t, const PhasePoint& y) {
  const int d = static_cast<int>(G.rows());
  const double L = t - s;
  PhasePoint th = x;
  th.tail(d) += L * G * x.head(d);
  Mat K(2 * d, 2 * d);
  K.topLeftCorner(d, d) = L * Mat::Identity(d, d);
  K.bottomLeftCorner(d, d) = 0.5 * L * L * G;
  K.topRightCorner(d, d) = 0.5 * L * L * G.transpose();
  K.bottomRightCorner(d, d) = L * L * L / 3.0 * G * G.transpose();
  const Vec w = y - th;
  return std::sqrt(w.dot(K.ldlt().solve(w)));
}

EnergyEquivalence energy_equivalence(const ModelSpec& model, double s, const PhasePoint& x,
                                     double t, const PhasePoint& y, const ControlOptions& opts) {
  const ControlSolution sol = solve_control(model, s, x, t, y, opts);
  FlowOptions fo;
  fo.tol = opts.ode_tol;
  const PhasePoint th = flow_point(model, s, t, x, fo);
  EnergyEquivalence e;
  e.I = sol.energy;
  e.D = (scale_diagonal(t - s, model.d).cwiseInverse().asDiagonal() * (th - y)).norm();
  e.ratio = e.I / (e.D + 1.0);
  e.lower = e.I > 0.0 ? std::max(0.0, e.D - 1.0) / e.I : 0.0;
  e.control_bound = sol.sup_control * std::sqrt(t - s) / (e.D + 1.0);
  e.terminal_error = sol.terminal_error;
  return e;
}

EnergyBatch energy_batch(const ModelSpec& model, const std::vector<ControlCase>& cases,
                         const ControlOptions& opts) {
  EnergyBatch b;
  b.cases = static_cast<int>(cases.size());
  b.results.resize(cases.size());
  std::vector<char> failed(cases.size(), 0);
  parallel_for(cases.size(), [&](size_t i) {
    try {
      b.results[i] = energy_equivalence(model, cases[i].s, cases[i].x, cases[i].t, cases[i].y, opts);
    } catch (const NumericError&) {
      failed[i] = 1;
    }
  });
  for (size_t i = 0; i < cases.size(); ++i) {
    if (failed[i] || !(b.results[i].terminal_error < opts.tol)) {
      ++b.violations;
      continue;
    }
    const EnergyEquivalence& e = b.results[i];
    b.kappa5 = std::max({b.kappa5, e.ratio, e.lower});
    b.kappa6 = std::max(b.kappa6, e.control_bound);
  }
  return b;
}

}  // namespace kk
