#include "kk/parametrix.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include <Eigen/Eigenvalues>

#include "kk/parallel.hpp"
#include "kk/quadrature.hpp"

namespace kk {

void QuadratureSpec::validate() const {
  if (time_nodes < 4) throw DomainError("quad.time_nodes must be >= 4");
  if (space_nodes < 4) throw DomainError("quad.space_nodes must be >= 4");
  if (inner_time_nodes < 4) throw DomainError("quad.inner_time_nodes must be >= 4");
  if (inner_space_nodes < 4) throw DomainError("quad.inner_space_nodes must be >= 4");
  if (!(half_width >= 4.0)) throw DomainError("quad.half_width must be >= 4");
  if (!(time_power >= 0.0)) throw DomainError("quad.time_power must be >= 0");
  if (!(flow_tol > 0.0)) throw DomainError("quad.flow_tol must be positive");
  if (!(rel_tol >= 0.0)) throw DomainError("quad.rel_tol must be >= 0");
  if (max_refinements < 0) throw DomainError("quad.max_refinements must be >= 0");
}

namespace {

// Inverse of an SPD matrix after Jacobi scaling; the two envelopes of a
// product can differ in scale by many orders of magnitude.
Mat spd_inverse(const Mat& A) {
  const Vec s = A.diagonal().cwiseSqrt().cwiseInverse();
  const Mat B = s.asDiagonal() * A * s.asDiagonal();
  Eigen::LLT<Mat> llt(B);
  if (llt.info() != Eigen::Success) throw NumericError("envelope covariance not positive definite");
  const Mat Binv = llt.solve(Mat::Identity(A.rows(), A.cols()));
  return s.asDiagonal() * Binv * s.asDiagonal();
}

GaussEnvelope backward_envelope(const FrozenGaussian& g, const PhasePoint& x) {
  return {g.mean(x), g.gram()};
}

GaussEnvelope forward_envelope(const FrozenGaussian& g, const PhasePoint& y) {
  const Mat Rinv = g.resolvent().inverse();
  return {g.mean_preimage(y), Rinv * g.gram() * Rinv.transpose()};
}

FrozenOptions frozen_opts(const QuadratureSpec& q) {
  FrozenOptions o;
  o.tol = q.flow_tol;
  return o;
}

double right_power(const ModelSpec& model, const QuadratureSpec& q) {
  return q.time_power > 0.0 ? q.time_power : 2.0 / model.meta.gamma;
}

// Split (s, t) at the midpoint; each half absorbs the singularity at its own end.
void split_rule(double s, double t, int nodes, double p_left, double p_right,
                std::vector<double>& r, std::vector<double>& w) {
  const double m = 0.5 * (s + t);
  std::vector<double> r2, w2;
  power_rule(s, m, nodes, p_left, true, r, w);
  power_rule(m, t, nodes, p_right, false, r2, w2);
  r.insert(r.end(), r2.begin(), r2.end());
  w.insert(w.end(), w2.begin(), w2.end());
}

}  // namespace

void power_rule(double a, double b, int nodes, double p, bool anchored_at_a,
                std::vector<double>& r, std::vector<double>& w) {
  if (!(b > a)) throw DomainError("power_rule requires a < b");
  if (!(p >= 1.0)) throw DomainError("power_rule requires p >= 1");
  const GaussRule& g = gauss_legendre(nodes);
  r.resize(nodes);
  w.resize(nodes);
  const double L = b - a;
  for (int k = 0; k < nodes; ++k) {
    const double u = 0.5 * (g.nodes[k] + 1.0);
    const double du = 0.5 * g.weights[k];
    const double off = L * std::pow(u, p);
    r[k] = anchored_at_a ? a + off : b - off;
    w[k] = L * p * std::pow(u, p - 1.0) * du;
  }
}

SpaceGrid product_grid(const GaussEnvelope& a, const GaussEnvelope& b, int nodes_per_axis,
                       double half_width) {
  const int n = static_cast<int>(a.mean.size());
  const Mat Pa = spd_inverse(a.cov), Pb = spd_inverse(b.cov);
  const Mat C = spd_inverse(Pa + Pb);
  const Vec m = C * (Pa * a.mean + Pb * b.mean);
  const Vec sc = C.diagonal().cwiseSqrt();
  Eigen::LLT<Mat> llt(sc.cwiseInverse().asDiagonal() * C * sc.cwiseInverse().asDiagonal());
  if (llt.info() != Eigen::Success) throw NumericError("product envelope not positive definite");
  const Mat L = sc.asDiagonal() * Mat(llt.matrixL());
  double jac = std::pow(half_width, n);
  for (int i = 0; i < n; ++i) jac *= L(i, i);

  const GaussRule& g = gauss_legendre(nodes_per_axis);
  size_t total = 1;
  for (int i = 0; i < n; ++i) total *= static_cast<size_t>(nodes_per_axis);
  SpaceGrid grid;
  grid.nodes.reserve(total);
  grid.weights.reserve(total);
  std::vector<int> idx(n, 0);
  Vec u(n);
  for (size_t flat = 0; flat < total; ++flat) {
    double w = jac;
    for (int i = 0; i < n; ++i) {
      u(i) = half_width * g.nodes[idx[i]];
      w *= g.weights[idx[i]];
    }
    grid.nodes.push_back(m + L * u);
    grid.weights.push_back(w);
    for (int i = 0; i < n; ++i) {
      if (++idx[i] < nodes_per_axis) break;
      idx[i] = 0;
    }
  }
  return grid;
}

// ---------------------------------------------------------------- kernel H

ParametrixKernel::ParametrixKernel(const ModelSpec& model, double t, const PhasePoint& y,
                                   double lower, const FrozenOptions& opts)
    : model_(&model), t_(t), y_(y), flow_(model, t, y, lower, t, opts) {}

ParametrixKernel::Slice ParametrixKernel::slice(double r) const {
  if (!(r < t_)) throw DomainError("kernel H requires r < t");
  const PhasePoint th = flow_.theta(r);
  const ModelEval e = evaluate_model(*model_, r, th);
  return Slice{r, flow_.gaussian(r, t_), th, 0.5 * e.sigma * e.sigma.transpose(), e.F1, e.F2,
               e.grad_x1_F2};
}

double ParametrixKernel::value(const Slice& sl, const PhasePoint& z) const {
  const int d = model_->d;
  const Vec F1 = model_->F1(sl.r, z);
  const Vec F2 = model_->F2(sl.r, z);
  const Mat sg = model_->sigma(sl.r, z);
  if (!F1.allFinite() || !F2.allFinite() || !sg.allFinite())
    throw ModelError("non-finite coefficient in kernel H", sl.r, z);

  // Gaussian derivatives in z share the density and the score g = R^T K^{-1}(mean - y).
  const FrozenGaussian& G = sl.gauss;
  const double p = G.density(z, y_);
  if (p == 0.0) return 0.0;
  const Vec g = G.resolvent().transpose() * (G.gram_inverse() * (G.mean(z) - y_));
  const Mat P = G.resolvent().transpose() * G.gram_inverse() * G.resolvent();

  const Mat da = 0.5 * sg * sg.transpose() - sl.a_theta;
  const Vec dF1 = F1 - sl.F1_theta;
  const Vec taylor = F2 - sl.F2_theta - sl.grad_theta * (block1(z) - block1(sl.theta));

  double h = 0.0;
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) h += da(i, j) * (g(i) * g(j) - P(i, j));
    h -= dF1(i) * g(i);
    h -= taylor(i) * g(d + i);
  }
  return h * p;
}

GaussEnvelope ParametrixKernel::envelope(const Slice& sl) {
  return forward_envelope(sl.gauss, sl.gauss.theta_t());
}

double kernel_H(const ModelSpec& model, double r, const PhasePoint& z, double t,
                const PhasePoint& y, const FrozenOptions& opts) {
  require_phase_point(z, "z");
  require_phase_point(y, "y");
  if (!(r < t)) throw DomainError("kernel_H requires r < t");
  const ParametrixKernel k(model, t, y, r, opts);
  return k.value(r, z);
}

// ---------------------------------------------------------------- convolve

ConvolutionShape frozen_shape(const ModelSpec& model, double s, const PhasePoint& x, double t,
                              const PhasePoint& y, double alpha, double beta,
                              const FrozenOptions& opts) {
  auto bwd = std::make_shared<FrozenFlow>(model, s, x, s, t, opts);
  auto fwd = std::make_shared<FrozenFlow>(model, t, y, s, t, opts);
  ConvolutionShape shape;
  shape.left = [bwd, s, x](double r) { return backward_envelope(bwd->gaussian(s, r), x); };
  shape.right = [fwd, t, y](double r) { return forward_envelope(fwd->gaussian(r, t), y); };
  shape.alpha = alpha;
  shape.beta = beta;
  return shape;
}

namespace {

double convolve_once(const SpaceTimeKernel& A, const SpaceTimeKernel& B, double s,
                     const PhasePoint& x, double t, const PhasePoint& y,
                     const ConvolutionShape& shape, int nt, int nz, double hw) {
  std::vector<double> rs, ws;
  split_rule(s, t, nt, std::max(1.0, 1.0 / shape.alpha), std::max(1.0, 1.0 / shape.beta), rs, ws);
  std::vector<double> partial(rs.size(), 0.0);
  parallel_for(rs.size(), [&](size_t k) {
    const double r = rs[k];
    const SpaceGrid grid = product_grid(shape.left(r), shape.right(r), nz, hw);
    double acc = 0.0;
    for (size_t i = 0; i < grid.nodes.size(); ++i) {
      const double b = B(r, grid.nodes[i], t, y);
      if (b == 0.0) continue;
      acc += grid.weights[i] * A(s, x, r, grid.nodes[i]) * b;
    }
    partial[k] = ws[k] * acc;
  });
  double sum = 0.0;
  for (double v : partial) sum += v;
  return sum;
}

}  // namespace

double convolve(const SpaceTimeKernel& A, const SpaceTimeKernel& B, double s, const PhasePoint& x,
                double t, const PhasePoint& y, const ConvolutionShape& shape,
                const QuadratureSpec& quad) {
  quad.validate();
  if (!(s < t)) throw DomainError("convolve requires s < t");
  if (!(shape.alpha > 0.0 && shape.beta > 0.0)) throw DomainError("endpoint exponents must be positive");
  if (!shape.left || !shape.right) throw DomainError("convolve needs both envelopes");
  int nt = quad.time_nodes, nz = quad.space_nodes;
  double v = convolve_once(A, B, s, x, t, y, shape, nt, nz, quad.half_width);
  if (quad.rel_tol <= 0.0) return v;
  for (int k = 0; k < quad.max_refinements; ++k) {
    nt += 4;
    nz += 4;
    const double w = convolve_once(A, B, s, x, t, y, shape, nt, nz, quad.half_width);
    if (std::abs(w - v) <= quad.rel_tol * std::abs(w)) return w;
    v = w;
  }
  throw NumericError("convolve: tolerance not met after refinement", v);
}

double spatial_integral(const std::function<double(const PhasePoint&)>& A,
                        const std::function<double(const PhasePoint&)>& B,
                        const GaussEnvelope& left, const GaussEnvelope& right, int nodes_per_axis,
                        double half_width) {
  const SpaceGrid grid = product_grid(left, right, nodes_per_axis, half_width);
  double acc = 0.0;
  for (size_t i = 0; i < grid.nodes.size(); ++i) {
    const double a = A(grid.nodes[i]);
    if (a == 0.0) continue;
    acc += grid.weights[i] * a * B(grid.nodes[i]);
  }
  return acc;
}

// ---------------------------------------------------------------- series

namespace {

enum class Leading { Density, Gradient, Kernel };

// Substitution power at s: the leading kernel behaves like (r-s)^{alpha-1}.
double left_power(double gamma, Leading lead, int j1, int j2) {
  switch (lead) {
    case Leading::Density:
      return 1.0;
    case Leading::Kernel:
      return 2.0 / gamma;
    case Leading::Gradient: {
      // d p~ ~ (r-s)^{-(j1+3j2)/2}; the convolution with H gains gamma/2.
      const double alpha = std::max(gamma / 2.0, 1.0 + (gamma - j1 - 3.0 * j2) / 2.0);
      return std::max(1.0, 1.0 / alpha);
    }
  }
  return 1.0;
}

// Terms Phi_j(s, x; t, y), j = 0..depth, with Phi_0 the leading kernel and
// Phi_{j+1} = Phi_j (x) H. One recursion produces every order: each outer node
// (r, z) contributes H(r, z; t, y) times all inner orders at (r, z). Inner
// orders are skipped where H vanishes, which keeps zero-kernel models exact.
class SeriesEngine {
 public:
  SeriesEngine(const ModelSpec& model, double s, const PhasePoint& x, const PhasePoint& anchor_x,
               double t_top, const QuadratureSpec& q, Leading lead, int j1 = 0, int j2 = 0,
               double p_left = 0.0)
      : model_(model),
        s_(s),
        x_(x),
        anchor_x_(anchor_x),
        q_(q),
        fo_(frozen_opts(q)),
        anchor_(model, s, anchor_x, s, t_top, fo_),
        lead_(lead),
        j1_(j1),
        j2_(j2) {
    p_right_ = right_power(model, q);
    p_left_ = p_left > 0.0 ? p_left : left_power(model.meta.gamma, lead, j1, j2);
    width_ = lead == Leading::Gradient ? model.d : 1;
  }

  int width() const { return width_; }

  std::vector<Vec> terms(double t, const PhasePoint& y, int depth, int level) const {
    const ParametrixKernel pk(model_, t, y, s_, fo_);
    std::vector<Vec> out(depth + 1, Vec::Zero(width_));
    out[0] = leading(pk, t, y);
    if (depth == 0) return out;

    const int nt = level == 0 ? q_.time_nodes : q_.inner_time_nodes;
    const int nz = level == 0 ? q_.space_nodes : q_.inner_space_nodes;
    std::vector<double> rs, ws;
    split_rule(s_, t, nt, p_left_, p_right_, rs, ws);

    struct Node {
      double r;
      PhasePoint z;
      double wh;  // time weight x space weight x H
    };
    std::vector<Node> nodes;
    for (size_t k = 0; k < rs.size(); ++k) {
      const auto sl = pk.slice(rs[k]);
      const GaussEnvelope left = backward_envelope(anchor_.gaussian(s_, rs[k]), anchor_x_);
      const SpaceGrid grid = product_grid(left, ParametrixKernel::envelope(sl), nz, q_.half_width);
      for (size_t i = 0; i < grid.nodes.size(); ++i) {
        const double h = pk.value(sl, grid.nodes[i]);
        if (h == 0.0) continue;
        nodes.push_back({rs[k], grid.nodes[i], ws[k] * grid.weights[i] * h});
      }
    }
    if (nodes.empty()) return out;

    std::vector<std::vector<Vec>> inner(nodes.size());
    auto body = [&](size_t i) { inner[i] = terms(nodes[i].r, nodes[i].z, depth - 1, level + 1); };
    if (level == 0)
      parallel_for(nodes.size(), body);
    else
      for (size_t i = 0; i < nodes.size(); ++i) body(i);
    // Fixed summation order: the result does not depend on the worker count.
    for (size_t i = 0; i < nodes.size(); ++i)
      for (int j = 0; j < depth; ++j) out[j + 1] += nodes[i].wh * inner[i][j];
    return out;
  }

 private:
  Vec leading(const ParametrixKernel& pk, double t, const PhasePoint& y) const {
    switch (lead_) {
      case Leading::Density:
        return Vec::Constant(1, pk.flow().gaussian(s_, t).density(x_, y));
      case Leading::Gradient:
        return pk.flow().gaussian(s_, t).derivative(x_, y, j1_, j2_);
      case Leading::Kernel:
        return Vec::Constant(1, pk.value(s_, x_));
    }
    return Vec();
  }

  const ModelSpec& model_;
  double s_;
  PhasePoint x_, anchor_x_;
  QuadratureSpec q_;
  FrozenOptions fo_;
  FrozenFlow anchor_;  // envelope of the innermost kernels in z
  Leading lead_;
  int j1_, j2_;
  double p_left_ = 1.0, p_right_ = 1.0;
  int width_ = 1;
};

void check_query(const ModelSpec& model, double s, const PhasePoint& x, double t,
                 const PhasePoint& y, const QuadratureSpec& q) {
  validate_model(model);
  q.validate();
  require_phase_point(x, "x");
  require_phase_point(y, "y");
  if (x.size() != 2 * model.d || y.size() != 2 * model.d)
    throw DomainError("query point dimension does not match the model");
  if (!(s < t)) throw DomainError("series requires s < t");
}

std::vector<double> density_terms(const ModelSpec& model, double s, const PhasePoint& x, double t,
                                  const PhasePoint& y, int depth, const QuadratureSpec& q) {
  const SeriesEngine eng(model, s, x, x, t, q, Leading::Density);
  std::vector<double> out;
  for (const Vec& v : eng.terms(t, y, depth, 0)) out.push_back(v(0));
  return out;
}

// log of Gamma(g/2)^k / Gamma(1 + k g / 2)
double log_gamma_factor(double gamma, int k) {
  return k * std::lgamma(gamma / 2.0) - std::lgamma(1.0 + k * gamma / 2.0);
}

}  // namespace

double default_lambda(const ModelSpec& model, double s, const PhasePoint& x, double t,
                      const FrozenOptions& opts) {
  const FrozenFlow bwd(model, s, x, s, t, opts);
  Eigen::SelfAdjointEigenSolver<Mat> es(bwd.gaussian(s, t).scaled_gram());
  return 2.0 * es.eigenvalues().maxCoeff();
}

double p_hat(const ModelSpec& model, double lambda, double s, const PhasePoint& x, double t,
             const PhasePoint& y, const FlowOptions& opts) {
  if (!(lambda > 0.0)) throw DomainError("p_hat requires lambda > 0");
  return gauss_g(lambda, t - s, flow_point(model, s, t, x, opts) - y);
}

SeriesResult density_series(const ModelSpec& model, double s, const PhasePoint& x, double t,
                            const PhasePoint& y, int N, const QuadratureSpec& quad) {
  check_query(model, s, x, t, y, quad);
  if (N < 1) throw DomainError("density_series requires N >= 1");
  const std::vector<double> all = density_terms(model, s, x, t, y, std::max(N - 1, 1), quad);

  SeriesResult res;
  res.orders = N;
  res.terms.assign(all.begin(), all.begin() + N);
  for (double v : res.terms) res.value += v;

  const double gamma = model.meta.gamma, span = t - s;
  FlowOptions fo;
  fo.tol = quad.flow_tol;
  res.lambda = default_lambda(model, s, x, t, frozen_opts(quad));
  res.majorant = p_hat(model, res.lambda, s, x, t, y, fo);
  res.remainder_order_ok = -1.0 + N * gamma / 2.0 > 2.0 * model.d;

  // Fit C from |term_j| <= C^j G_j span^{j gamma/2} p^ and sum the tail k >= N.
  double C = 0.0;
  if (res.majorant > 0.0) {
    for (size_t j = 1; j < all.size(); ++j) {
      if (all[j] == 0.0) continue;
      const double lg = std::log(std::abs(all[j]) / res.majorant) - log_gamma_factor(gamma, j) -
                        j * gamma / 2.0 * std::log(span);
      C = std::max(C, std::exp(lg / j));
    }
  }
  res.fitted_C = C;
  if (C > 0.0) {
    const double logc = std::log(C) + gamma / 2.0 * std::log(span);
    double tail = 0.0;
    for (int k = N; k < N + 2000; ++k) {
      const double term = std::exp(k * logc + log_gamma_factor(gamma, k));
      tail += term;
      if (term < 1e-17 * tail) break;
    }
    res.remainder_bound = tail * res.majorant;
  }
  return res;
}

double iterated_kernel(const ModelSpec& model, double s, const PhasePoint& x, double t,
                       const PhasePoint& y, int N, const QuadratureSpec& quad) {
  check_query(model, s, x, t, y, quad);
  if (N < 1) throw DomainError("iterated_kernel requires N >= 1");
  const SeriesEngine eng(model, s, x, x, t, quad, Leading::Kernel);
  return eng.terms(t, y, N - 1, 0).back()(0);
}

GradientResult grad_density(const ModelSpec& model, double s, const PhasePoint& x, double t,
                            const PhasePoint& y, GradDirection dir, GradScheme scheme, int N,
                            const QuadratureSpec& quad, double fd_factor) {
  check_query(model, s, x, t, y, quad);
  if (N < 1) throw DomainError("grad_density requires N >= 1");
  const int d = model.d;
  const bool in_x1 = dir == GradDirection::X1;
  GradientResult res;

  if (scheme == GradScheme::AnalyticLeading) {
    const SeriesEngine eng(model, s, x, x, t, quad, Leading::Gradient, in_x1 ? 1 : 0,
                           in_x1 ? 0 : 1);
    res.terms = eng.terms(t, y, N - 1, 0);
    res.value = Vec::Zero(d);
    for (const Vec& v : res.terms) res.value += v;
    if (!in_x1 && N > 1)
      res.warnings.push_back(
          "x2 gradient: the first correction is integrable only through cancellation in z; "
          "expect slow quadrature convergence");
    return res;
  }

  if (!(fd_factor > 0.0)) throw DomainError("fd_factor must be positive");
  const double span = t - s;
  const double h = fd_factor * (in_x1 ? std::sqrt(span) : std::pow(span, 1.5));
  res.value = Vec::Zero(d);
  // The quadrature grid stays anchored at x and the time rule is the one of the
  // analytic scheme, so both evaluations share one discretization and the
  // difference quotient sees only the x-dependence.
  const double p_left = left_power(model.meta.gamma, Leading::Gradient, in_x1 ? 1 : 0, in_x1 ? 0 : 1);
  for (int i = 0; i < d; ++i) {
    PhasePoint xp = x, xm = x;
    const int c = in_x1 ? i : d + i;
    xp(c) += h;
    xm(c) -= h;
    const SeriesEngine ep(model, s, xp, x, t, quad, Leading::Density, 0, 0, p_left);
    const SeriesEngine em(model, s, xm, x, t, quad, Leading::Density, 0, 0, p_left);
    double vp = 0.0, vm = 0.0;
    for (const Vec& v : ep.terms(t, y, N - 1, 0)) vp += v(0);
    for (const Vec& v : em.terms(t, y, N - 1, 0)) vm += v(0);
    res.value(i) = (vp - vm) / (2.0 * h);
    const double scale = std::max(std::abs(vp), std::abs(vm));
    if (scale > 0.0 && std::abs(vp - vm) < 1e-9 * scale)
      res.warnings.push_back("finite-difference increment below quadrature resolution in component " +
                             std::to_string(c));
  }
  return res;
}

// ---------------------------------------------------------------- diagnostics

double ck_residual(const ModelSpec& model, double s, double r, double t, const QueryGrid& grid,
                   const CkOptions& opts) {
  if (!(s < r && r < t)) throw DomainError("ck_residual requires s < r < t");
  if (opts.N < 1) throw DomainError("ck_residual requires N >= 1");
  if (grid.xs.empty() || grid.ys.empty()) throw DomainError("ck_residual needs a non-empty grid");
  opts.series.validate();
  const FrozenOptions fo = frozen_opts(opts.series);
  FlowOptions flo;
  flo.tol = opts.series.flow_tol;

  auto series_value = [&](double a, const PhasePoint& u, double b, const PhasePoint& v) {
    const std::vector<double> ts = density_terms(model, a, u, b, v, opts.N - 1, opts.series);
    double sum = 0.0;
    for (double w : ts) sum += w;
    return sum;
  };

  const size_t nx = grid.xs.size(), ny = grid.ys.size();
  std::vector<double> res(nx * ny, 0.0);
  parallel_for(nx * ny, [&](size_t k) {
    const PhasePoint& x = grid.xs[k / ny];
    const PhasePoint& y = grid.ys[k % ny];
    const FrozenFlow bwd(model, s, x, s, r, fo);
    const FrozenFlow fwd(model, t, y, r, t, fo);
    const GaussEnvelope left = backward_envelope(bwd.gaussian(s, r), x);
    const GaussEnvelope right = forward_envelope(fwd.gaussian(r, t), y);
    const double conv = spatial_integral(
        [&](const PhasePoint& z) { return series_value(s, x, r, z); },
        [&](const PhasePoint& z) { return series_value(r, z, t, y); }, left, right,
        opts.space_nodes, opts.half_width);
    const double direct = series_value(s, x, t, y);
    const double lam = opts.lambda > 0.0 ? opts.lambda : default_lambda(model, s, x, t, fo);
    res[k] = std::abs(conv - direct) / p_hat(model, lam, s, x, t, y, flo);
  });
  return *std::max_element(res.begin(), res.end());
}

ReproductionReport reproduction_bounds(const ModelSpec& model, double lambda, double s, double t,
                                       const QueryGrid& grid, const std::vector<double>& rs,
                                       int space_nodes, double half_width) {
  if (!(lambda > 0.0)) throw DomainError("reproduction_bounds requires lambda > 0");
  if (!(s < t)) throw DomainError("reproduction_bounds requires s < t");
  if (grid.xs.empty() || grid.ys.empty() || rs.empty())
    throw DomainError("reproduction_bounds needs a non-empty grid");
  for (double r : rs)
    if (!(s < r && r < t)) throw DomainError("intermediate times must lie in (s, t)");
  if (space_nodes < 4 || half_width < 4.0) throw DomainError("spatial rule too coarse");
  const int d = model.d;

  struct Point {
    size_t ix, iy;
    double r;
  };
  std::vector<Point> pts;
  for (size_t ix = 0; ix < grid.xs.size(); ++ix)
    for (size_t iy = 0; iy < grid.ys.size(); ++iy)
      for (double r : rs) pts.push_back({ix, iy, r});

  std::vector<FlowTrajectory> xflows;
  for (const PhasePoint& x : grid.xs) xflows.push_back(integrate_flow(model, s, t, x));

  std::vector<double> conv(pts.size());
  parallel_for(pts.size(), [&](size_t k) {
    const Point& p = pts[k];
    const PhasePoint& y = grid.ys[p.iy];
    const double r = p.r;
    const Vec T1 = scale_diagonal(r - s, d), T2 = scale_diagonal(t - r, d);
    const GaussEnvelope left{xflows[p.ix].at(r), lambda * Mat(T1.cwiseAbs2().asDiagonal())};
    const GaussEnvelope right{flow_point(model, t, r, y), lambda * Mat(T2.cwiseAbs2().asDiagonal())};
    conv[k] = spatial_integral(
        [&](const PhasePoint& z) { return gauss_g(lambda, r - s, left.mean - z); },
        [&](const PhasePoint& z) { return gauss_g(lambda, t - r, flow_point(model, r, t, z) - y); },
        left, right, space_nodes, half_width);
  });

  ReproductionReport rep;
  rep.lambda = lambda;
  rep.points = static_cast<int>(pts.size());
  rep.C = std::numeric_limits<double>::infinity();
  for (double kappa : {1.0, 1.25, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0}) {
    double C = 0.0;
    for (size_t k = 0; k < pts.size(); ++k) {
      const PhasePoint diff = xflows[pts[k].ix].end() - grid.ys[pts[k].iy];
      const double up = gauss_g(kappa * lambda, t - s, diff);
      const double lo = gauss_g(lambda / kappa, t - s, diff);
      C = std::max({C, conv[k] / up, lo / conv[k]});
    }
    if (C < rep.C) {
      rep.C = C;
      rep.kappa = kappa;
    }
  }
  rep.ratios.resize(pts.size());
  for (size_t k = 0; k < pts.size(); ++k)
    rep.ratios[k] =
        conv[k] / gauss_g(lambda, t - s, xflows[pts[k].ix].end() - grid.ys[pts[k].iy]);
  return rep;
}

}  // namespace kk
