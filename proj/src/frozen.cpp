#include "kk/frozen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kk/quadrature.hpp"

namespace kk {

// ---------------------------------------------------------------- FrozenGaussian

FrozenGaussian::FrozenGaussian(double s, double t, PhasePoint theta_s, PhasePoint theta_t, Mat R,
                               Mat K)
    : s_(s),
      t_(t),
      d_(phase_dim(theta_s)),
      theta_s_(std::move(theta_s)),
      theta_t_(std::move(theta_t)),
      R_(std::move(R)),
      K_(std::move(K)) {
  if (!(t_ > s_)) throw DomainError("frozen Gaussian requires t > s");
  scale_ = scale_diagonal(t_ - s_, d_);
  Khat_ = K_.array() / (scale_ * scale_.transpose()).array();
  Khat_ = 0.5 * (Khat_ + Khat_.transpose()).eval();
  llt_hat_.compute(Khat_);
  if (llt_hat_.info() != Eigen::Success)
    throw NumericError("Gram matrix is not positive definite");
  const Mat Lh = llt_hat_.matrixL();
  double ld = 0.0;
  for (int i = 0; i < 2 * d_; ++i) {
    if (!(Lh(i, i) > 0.0)) throw NumericError("Gram matrix is singular");
    ld += 2.0 * std::log(Lh(i, i)) + 2.0 * std::log(scale_(i));
  }
  logdet_ = ld;
  log_norm_ = -d_ * std::log(2.0 * M_PI) - 0.5 * logdet_;
  const Mat Khat_inv = llt_hat_.solve(Mat::Identity(2 * d_, 2 * d_));
  const Vec inv_scale = scale_.cwiseInverse();
  Kinv_ = inv_scale.asDiagonal() * Khat_inv * inv_scale.asDiagonal();
  P_ = R_.transpose() * Kinv_ * R_;
}

PhasePoint FrozenGaussian::mean(const PhasePoint& x) const { return theta_t_ + R_ * (x - theta_s_); }

PhasePoint FrozenGaussian::mean_preimage(const PhasePoint& y) const {
  // R is unit lower block-triangular: R^{-1} flips the sign of the off-diagonal block.
  Mat Rinv = R_;
  Rinv.bottomLeftCorner(d_, d_) *= -1.0;
  return theta_s_ + Rinv * (y - theta_t_);
}

double FrozenGaussian::density(const PhasePoint& x, const PhasePoint& y) const {
  const Vec vh = (mean(x) - y).cwiseQuotient(scale_);
  const double q = llt_hat_.matrixL().solve(vh).squaredNorm();
  return std::exp(log_norm_ - 0.5 * q);
}

Vec FrozenGaussian::derivative(const PhasePoint& x, const PhasePoint& y, int j1, int j2) const {
  if (j1 < 0 || j1 > 2 || j2 < 0 || j2 > 1) throw DomainError("derivative order out of range");
  const Vec v = mean(x) - y;
  const Vec w = Kinv_ * v;
  const Vec g = R_.transpose() * w;
  const double p = density(x, y);
  const int k = j1 + j2;
  int count = 1;
  for (int i = 0; i < k; ++i) count *= d_;
  Vec out(count);
  int idx[3];
  for (int flat = 0; flat < count; ++flat) {
    int rem = flat;
    for (int pos = k - 1; pos >= 0; --pos) {
      const int digit = rem % d_;
      rem /= d_;
      idx[pos] = pos < j1 ? digit : d_ + digit;
    }
    double h;
    switch (k) {
      case 0:
        h = 1.0;
        break;
      case 1:
        h = -g(idx[0]);
        break;
      case 2:
        h = g(idx[0]) * g(idx[1]) - P_(idx[0], idx[1]);
        break;
      default: {
        const int a = idx[0], b = idx[1], c = idx[2];
        h = -g(a) * g(b) * g(c) + g(a) * P_(b, c) + g(b) * P_(a, c) + g(c) * P_(a, b);
      }
    }
    out(flat) = h * p;
  }
  return out;
}

double FrozenGaussian::sup_derivative(int j1, int j2) const {
  // With v = L u (K = L L^T) the density is c exp(-|u|^2/2) and the x-gradient
  // of the exponent is -M u, M = R^T L^{-T}.
  const int k = j1 + j2;
  if (k < 1 || k > 2 || j2 > 1) throw DomainError("sup_derivative supports total order 1 or 2");
  const Mat Lh = llt_hat_.matrixL();
  const Mat LinvT = Lh.transpose().triangularView<Eigen::Upper>().solve(Mat::Identity(2 * d_, 2 * d_));
  const Mat M = R_.transpose() * scale_.cwiseInverse().asDiagonal() * LinvT;
  const double c = std::exp(log_norm_);
  const Mat M1 = M.topRows(d_);
  const Mat M2 = M.bottomRows(d_);
  if (k == 1) {
    const Mat& A = j1 == 1 ? M1 : M2;
    Eigen::JacobiSVD<Mat> svd(A);
    return c * svd.singularValues()(0) * std::exp(-0.5);
  }
  const Mat& A = M1;
  const Mat& B = j1 == 2 ? M1 : M2;
  auto f = [&](const Vec& u) {
    return (A * u * u.transpose() * B.transpose() - A * B.transpose()).norm() *
           std::exp(-0.5 * u.squaredNorm());
  };
  double best = f(Vec::Zero(2 * d_));
  std::vector<Vec> dirs;
  for (const Mat* m : {&A, &B}) {
    Eigen::JacobiSVD<Mat> svd(*m, Eigen::ComputeFullV);
    for (int i = 0; i < svd.matrixV().cols(); ++i) dirs.push_back(svd.matrixV().col(i));
  }
  const size_t base = dirs.size();
  for (size_t i = 0; i < base; ++i)
    for (size_t j = i + 1; j < base; ++j) {
      dirs.push_back((dirs[i] + dirs[j]).normalized());
      dirs.push_back((dirs[i] - dirs[j]).normalized());
    }
  for (const Vec& e : dirs)
    for (int step = 1; step <= 400; ++step) best = std::max(best, f(0.01 * step * e));
  return c * best;
}

// ---------------------------------------------------------------- FrozenFlow

FrozenFlow::FrozenFlow(const ModelSpec& model, double tau, const PhasePoint& xi, double a, double b,
                       const FrozenOptions& opts)
    : model_(&model), opts_(opts), tau_(tau), xi_(xi), d_(model.d) {
  if (xi.size() != 2 * model.d) throw DomainError("freezing point dimension does not match model");
  require_phase_point(xi, "freezing point");
  const int d = d_;
  OdeRhs rhs = [&model, d](double r, const Vec& y, Vec& dy) {
    const PhasePoint th = y.head(2 * d);
    dy.head(2 * d) = drift(model, r, th);
    const Mat g = grad_x1_F2(model, r, th);
    dy.tail(d * d) = Eigen::Map<const Vec>(g.data(), d * d);
  };
  Vec y0 = Vec::Zero(2 * d + d * d);
  y0.head(2 * d) = xi;
  OdeOptions o;
  o.rtol = o.atol = opts.tol;
  const double lo = std::min({tau, a, b});
  const double hi = std::max({tau, a, b});
  down_ = integrate_ode(rhs, tau, lo, y0, o);
  up_ = integrate_ode(rhs, tau, hi, y0, o);
}

Vec FrozenFlow::state_at(double r) const { return r < tau_ ? down_.at(r) : up_.at(r); }

PhasePoint FrozenFlow::theta(double r) const { return state_at(r).head(2 * d_); }

Mat FrozenFlow::integrated_grad(double r) const {
  const Vec st = state_at(r);
  return Eigen::Map<const Mat>(st.data() + 2 * d_, d_, d_);
}

Mat FrozenFlow::resolvent(double t, double s) const {
  Mat R = Mat::Identity(2 * d_, 2 * d_);
  if (t != s) R.bottomLeftCorner(d_, d_) = integrated_grad(t) - integrated_grad(s);
  return R;
}

Mat FrozenFlow::gram(double s, double t) const {
  if (!(t > s)) throw DomainError("gram requires t > s");
  const int d = d_;
  const int panels = std::max(1, static_cast<int>(std::ceil(t - s - 1e-12)));
  std::vector<double> rs, ws;
  composite_gauss(s, t, panels, opts_.gl_nodes_per_unit, rs, ws);
  const Mat Mt = integrated_grad(t);
  Mat K11 = Mat::Zero(d, d), K21 = Mat::Zero(d, d), K22 = Mat::Zero(d, d);
  for (size_t k = 0; k < rs.size(); ++k) {
    const Vec st = state_at(rs[k]);
    const PhasePoint th = st.head(2 * d);
    const Mat N = Mt - Eigen::Map<const Mat>(st.data() + 2 * d, d, d);
    const Mat sg = model_->sigma(rs[k], th);
    if (!sg.allFinite()) throw ModelError("non-finite sigma", rs[k], th);
    const Mat a = sg * sg.transpose();
    const Mat Na = N * a;
    K11 += ws[k] * a;
    K21 += ws[k] * Na;
    K22 += ws[k] * Na * N.transpose();
  }
  Mat K(2 * d, 2 * d);
  K << K11, K21.transpose(), K21, K22;
  return 0.5 * (K + K.transpose());
}

FrozenGaussian FrozenFlow::gaussian(double s, double t) const {
  return FrozenGaussian(s, t, theta(s), theta(t), resolvent(t, s), gram(s, t));
}

// ---------------------------------------------------------------- free functions

Mat resolvent(const ModelSpec& model, double tau, const PhasePoint& xi, double s, double t,
              const FrozenOptions& opts) {
  return FrozenFlow(model, tau, xi, s, t, opts).resolvent(t, s);
}

PhasePoint frozen_mean(const ModelSpec& model, double tau, const PhasePoint& xi, double s,
                       double t, const PhasePoint& x, const FrozenOptions& opts) {
  require_phase_point(x);
  if (x.size() != 2 * model.d) throw DomainError("frozen_mean: point dimension does not match model");
  const int d = model.d;
  // One flow anchored at the freezing point: for non-Lipschitz drifts a
  // backward-then-forward re-integration need not return to xi.
  const FrozenFlow flow(model, tau, xi, s, t, opts);
  const PhasePoint theta_s = flow.theta(s);
  if (t == s) return x;
  // The deviation v - theta obeys delta' = (0, grad_x1 F2(r, theta_r) delta_1).
  OdeRhs rhs = [&model, &flow, d](double r, const Vec& y, Vec& dy) {
    dy.head(d).setZero();
    dy.tail(d) = grad_x1_F2(model, r, flow.theta(r)) * y.head(d);
  };
  OdeOptions o;
  o.rtol = o.atol = opts.tol;
  return flow.theta(t) + integrate_ode(rhs, s, t, x - theta_s, o).end();
}

Mat gram(const ModelSpec& model, double tau, const PhasePoint& xi, double s, double t,
         const FrozenOptions& opts) {
  return FrozenFlow(model, tau, xi, s, t, opts).gram(s, t);
}

Vec frozen_density(const ModelSpec& model, double tau, const PhasePoint& xi, double s,
                   const PhasePoint& x, double t, const PhasePoint& y, int j1, int j2,
                   const FrozenOptions& opts) {
  if (!(t > s)) throw DomainError("frozen_density requires t > s");
  require_phase_point(x);
  require_phase_point(y);
  return FrozenFlow(model, tau, xi, s, t, opts).gaussian(s, t).derivative(x, y, j1, j2);
}

double proxy_density(const ModelSpec& model, Freezing which, double s, const PhasePoint& x,
                     double t, const PhasePoint& y, const FrozenOptions& opts) {
  if (which == Freezing::Backward) return frozen_density(model, s, x, s, x, t, y, 0, 0, opts)(0);
  return frozen_density(model, t, y, s, x, t, y, 0, 0, opts)(0);
}

GramBounds gram_equivalence(const ModelSpec& model, double tau, const PhasePoint& xi, double s,
                            double t, const std::vector<PhasePoint>& probes,
                            const FrozenOptions& opts) {
  if (probes.empty()) throw DomainError("gram_equivalence needs probes");
  const FrozenGaussian g = FrozenFlow(model, tau, xi, s, t, opts).gaussian(s, t);
  GramBounds b{std::numeric_limits<double>::infinity(), 0.0};
  for (const PhasePoint& p : probes) {
    const double n2 = scale_map(t - s, p, ScaleDirection::Inverse).squaredNorm();
    if (!(n2 > 0.0)) throw DomainError("gram_equivalence probes must be non-zero");
    const double q = p.dot(g.gram_inverse() * p) / n2;
    b.c_low = std::min(b.c_low, q);
    b.c_high = std::max(b.c_high, q);
  }
  return b;
}

GramBounds gram_equivalence(const ModelSpec& model, double tau, const PhasePoint& xi, double s,
                            double t, const FrozenOptions& opts) {
  const FrozenGaussian g = FrozenFlow(model, tau, xi, s, t, opts).gaussian(s, t);
  Eigen::SelfAdjointEigenSolver<Mat> es(g.scaled_gram(), Eigen::EigenvaluesOnly);
  return {1.0 / es.eigenvalues().maxCoeff(), 1.0 / es.eigenvalues().minCoeff()};
}

double sensitivity_gap(const ModelSpec& model, double s, const PhasePoint& x, double t,
                       const PhasePoint& y, int j1, int j2, double lambda,
                       const FrozenOptions& opts) {
  if (!(t > s)) throw DomainError("sensitivity_gap requires t > s");
  const FrozenGaussian fwd = FrozenFlow(model, t, y, s, t, opts).gaussian(s, t);
  const FrozenGaussian bwd = FrozenFlow(model, s, x, s, t, opts).gaussian(s, t);
  if (lambda <= 0.0) {
    Eigen::SelfAdjointEigenSolver<Mat> es(bwd.scaled_gram(), Eigen::EigenvaluesOnly);
    lambda = 2.0 * es.eigenvalues().maxCoeff();
  }
  const double gap = (fwd.derivative(x, y, j1, j2) - bwd.derivative(x, y, j1, j2)).norm();
  const double span = t - s;
  const double norm = std::pow(span, 0.5 * (model.meta.gamma - j1 - 3.0 * j2)) *
                      gauss_g(lambda, span, bwd.theta_t() - y);
  return gap / norm;
}

}  // namespace kk
