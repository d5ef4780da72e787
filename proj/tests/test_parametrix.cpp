#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdlib>
#include <random>

#include "kk/parametrix.hpp"
#include "kk/quadrature.hpp"

using namespace kk;

namespace {

QuadratureSpec coarse() {
  QuadratureSpec q;
  q.time_nodes = 6;
  q.space_nodes = 12;
  q.inner_time_nodes = 4;
  q.inner_space_nodes = 6;
  return q;
}

// Constant sigma and F1, F2 affine in x1 with constant slope: H vanishes.
ModelSpec affine_model() {
  ModelSpec m = kolmogorov_model(1);
  m.name = "affine";
  m.F1 = [](double, const PhasePoint&) { return Vec::Constant(1, 0.4); };
  m.F2 = [](double, const PhasePoint& x) { return Vec::Constant(1, 2.0 * x(0) - 0.3); };
  m.sigma = [](double, const PhasePoint&) { return Mat::Constant(1, 1, 1.3); };
  m.grad_x1_F2 = [](double, const PhasePoint&) { return Mat::Constant(1, 1, 2.0); };
  return m;
}

}  // namespace

TEST_CASE("QuadratureSpec validation") {
  QuadratureSpec q;
  CHECK_NOTHROW(q.validate());
  q.space_nodes = 3;
  CHECK_THROWS_AS(q.validate(), DomainError);
  q = QuadratureSpec{};
  q.half_width = 3.0;
  CHECK_THROWS_AS(q.validate(), DomainError);
}

TEST_CASE("power_rule integrates endpoint singularities") {
  std::vector<double> r, w;
  // int_0^1 r^{-3/4} dr = 4 with p = 4 makes the integrand smooth.
  power_rule(0.0, 1.0, 8, 4.0, true, r, w);
  double acc = 0.0;
  for (size_t k = 0; k < r.size(); ++k) acc += w[k] * std::pow(r[k], -0.75);
  CHECK(acc == doctest::Approx(4.0).epsilon(1e-10));
  power_rule(0.0, 2.0, 8, 4.0, false, r, w);
  acc = 0.0;
  for (size_t k = 0; k < r.size(); ++k) acc += w[k] * std::pow(2.0 - r[k], -0.75);
  CHECK(acc == doctest::Approx(4.0 * std::pow(2.0, 0.25)).epsilon(1e-10));
}

TEST_CASE("product_grid integrates a product of Gaussians") {
  GaussEnvelope a{make_point(0.0, 0.0), Mat::Identity(2, 2)};
  GaussEnvelope b{make_point(1.0, -1.0), Mat(Eigen::Vector2d(0.25, 4.0).asDiagonal())};
  auto gauss = [](const GaussEnvelope& e, const PhasePoint& z) {
    const Vec v = z - e.mean;
    return std::exp(-0.5 * v.dot(e.cov.ldlt().solve(v))) /
           (2.0 * M_PI * std::sqrt(e.cov.determinant()));
  };
  const SpaceGrid g = product_grid(a, b, 32, 8.0);
  double acc = 0.0;
  for (size_t i = 0; i < g.nodes.size(); ++i) acc += g.weights[i] * gauss(a, g.nodes[i]) * gauss(b, g.nodes[i]);
  // Closed form: N(m_a - m_b; 0, C_a + C_b).
  const GaussEnvelope sum{a.mean - b.mean, a.cov + b.cov};
  CHECK(acc == doctest::Approx(gauss(sum, PhasePoint::Zero(2))).epsilon(1e-10));
}

TEST_CASE("kernel_H examples") {
  const ModelSpec k = kolmogorov_model(1);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  for (int i = 0; i < 20; ++i) {
    const PhasePoint z = make_point(n(rng), n(rng)), y = make_point(n(rng), n(rng));
    CHECK(kernel_H(k, 0.2, z, 0.9, y) == 0.0);
  }

  // At the frozen point all three differences vanish.
  const ModelSpec h = holder_model(1);
  const PhasePoint y = make_point(0.2, 0.1);
  const ParametrixKernel pk(h, 1.0, y, 0.0);
  for (double r : {0.0, 0.3, 0.9}) CHECK(std::abs(pk.value(r, pk.flow().theta(r))) <= 1e-12);

  CHECK_THROWS_AS(kernel_H(h, 1.0, y, 1.0, y), DomainError);
}

TEST_CASE("kernel_H matches a re-assembly from finite-difference Gaussian derivatives") {
  const ModelSpec h = holder_model(1);
  const double r = 0.35, t = 0.8;
  const PhasePoint y = make_point(0.4, -0.3);
  const FrozenFlow flow(h, t, y, r, t);
  const FrozenGaussian G = flow.gaussian(r, t);
  const PhasePoint th = flow.theta(r);
  for (const PhasePoint& z : {PhasePoint(th + make_point(0.3, 0.05)), PhasePoint(th + make_point(-0.2, 0.1))}) {
    // Central differences of the density in z.
    const double e1 = 1e-4, e2 = 1e-4;
    auto p = [&](double d1, double d2) { return G.density(z + make_point(d1, d2), y); };
    const double p1 = (p(e1, 0) - p(-e1, 0)) / (2 * e1);
    const double p11 = (p(e1, 0) - 2 * p(0, 0) + p(-e1, 0)) / (e1 * e1);
    const double p2 = (p(0, e2) - p(0, -e2)) / (2 * e2);

    const double sz = h.sigma(r, z)(0, 0), st = h.sigma(r, th)(0, 0);
    const double da = 0.5 * (sz * sz - st * st);
    const double dF1 = h.F1(r, z)(0) - h.F1(r, th)(0);
    const double tay = h.F2(r, z)(0) - h.F2(r, th)(0) - (z(0) - th(0));
    const double oracle = da * p11 + dF1 * p1 + tay * p2;
    CHECK(kernel_H(h, r, z, t, y) == doctest::Approx(oracle).epsilon(1e-5));
  }
}

TEST_CASE("convolve examples") {
  const ModelSpec k = kolmogorov_model(1);
  const PhasePoint x = make_point(0.2, -0.1), y = make_point(0.5, 0.4);
  const double s = 0.0, t = 1.0;
  const ConvolutionShape shape = frozen_shape(k, s, x, t, y);
  auto p = [&](double a, const PhasePoint& u, double b, const PhasePoint& v) {
    return frozen_density(k, b, v, a, u, b, v)(0);
  };
  auto zero = [](double, const PhasePoint&, double, const PhasePoint&) { return 0.0; };
  CHECK(convolve(p, zero, s, x, t, y, shape) == 0.0);

  // The exact kernel reproduces itself at every r, so the space-time integral is (t-s) p.
  QuadratureSpec q;
  q.space_nodes = 24;
  q.half_width = 7.0;
  CHECK(convolve(p, p, s, x, t, y, shape, q) == doctest::Approx((t - s) * p(s, x, t, y)).epsilon(1e-7));

  QuadratureSpec bad;
  bad.time_nodes = 2;
  CHECK_THROWS_AS(convolve(p, p, s, x, t, y, shape, bad), DomainError);
}

TEST_CASE("convolve reports unmet tolerance with the estimate") {
  const ModelSpec k = kolmogorov_model(1);
  const PhasePoint x = make_point(0.0, 0.0), y = make_point(0.3, 0.1);
  const ConvolutionShape shape = frozen_shape(k, 0.0, x, 1.0, y);
  // A kink in r that the rule cannot resolve to 1e-14.
  auto a = [](double, const PhasePoint&, double r, const PhasePoint&) { return std::abs(r - 0.3); };
  auto b = [&](double r, const PhasePoint& z, double t, const PhasePoint& v) {
    return frozen_density(k, t, v, r, z, t, v)(0);
  };
  QuadratureSpec q;
  q.rel_tol = 1e-14;
  q.max_refinements = 1;
  try {
    convolve(a, b, 0.0, x, 1.0, y, shape, q);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::isfinite(e.estimate()));
    CHECK(e.estimate() > 0.0);
  }
}

TEST_CASE("density_series: zero-kernel exactness") {
  const PhasePoint x = make_point(0.0, 0.0);
  const SeriesResult k1 = density_series(kolmogorov_model(1), 0.0, x, 1.0, x, 1);
  CHECK(k1.value == doctest::Approx(std::sqrt(3.0) / M_PI).epsilon(1e-10));
  for (int N = 1; N <= 5; ++N) {
    const SeriesResult r = density_series(kolmogorov_model(1), 0.0, x, 1.0, x, N);
    CHECK(r.value == k1.value);
    CHECK(r.terms.size() == static_cast<size_t>(N));
    CHECK(r.remainder_bound == 0.0);
  }
  const ModelSpec m = affine_model();
  const PhasePoint u = make_point(0.3, -0.4), v = make_point(0.9, 0.2);
  const double exact = frozen_density(m, 0.7, v, 0.1, u, 0.7, v)(0);
  const double one = density_series(m, 0.1, u, 0.7, v, 1).value;
  CHECK(density_series(m, 0.1, u, 0.7, v, 3).value == one);
  CHECK(one == doctest::Approx(exact).epsilon(1e-8));
}

TEST_CASE("density_series: symmetry on the Kolmogorov model") {
  const ModelSpec k = kolmogorov_model(1);
  std::mt19937_64 rng(17);
  std::normal_distribution<double> n;
  for (int i = 0; i < 10; ++i) {
    const PhasePoint x = make_point(n(rng), n(rng)), y = make_point(n(rng), n(rng));
    const double a = density_series(k, 0.0, x, 0.6, y, 2).value;
    const double b = density_series(k, 0.0, -x, 0.6, -y, 2).value;
    CHECK(std::abs(a - b) <= 1e-10 * std::abs(a));
  }
}

TEST_CASE("density_series: result invariants on the Holder model") {
  const ModelSpec h = holder_model(1);
  const PhasePoint x = make_point(0.3, -0.2);
  const PhasePoint y = flow_point(h, 0.0, 0.5, x) + make_point(0.2, 0.05);
  const SeriesResult r = density_series(h, 0.0, x, 0.5, y, 2, coarse());
  double sum = 0.0;
  for (double v : r.terms) sum += v;
  CHECK(r.value == sum);
  CHECK(r.remainder_bound >= 0.0);
  CHECK(std::isfinite(r.fitted_C));
  CHECK(r.majorant > 0.0);
  // -1 + N gamma / 2 > 2d needs N > 12 for gamma = 1/2, d = 1.
  CHECK_FALSE(r.remainder_order_ok);
  // Kolmogorov budget has gamma = 1: the flag switches on between N = 6 and N = 7.
  const ModelSpec k = kolmogorov_model(1);
  CHECK_FALSE(density_series(k, 0.0, x, 0.5, y, 6).remainder_order_ok);
  CHECK(density_series(k, 0.0, x, 0.5, y, 7).remainder_order_ok);
  CHECK_THROWS_AS(density_series(h, 0.5, x, 0.5, y, 2), DomainError);
  CHECK_THROWS_AS(density_series(h, 0.0, x, 0.5, y, 0), DomainError);
}

TEST_CASE("density_series: first correction within the Gamma-law majorant") {
  const ModelSpec h = holder_model(1);
  const PhasePoint x = make_point(0.0, 0.0);
  for (double span : {0.5, 0.25}) {
    const PhasePoint y = flow_point(h, 0.0, span, x);
    const SeriesResult r = density_series(h, 0.0, x, span, y, 2, coarse());
    const double scaled = std::abs(r.terms[1]) / (std::pow(span, 0.25) * r.majorant);
    CHECK(scaled < 1.0);
  }
}

TEST_CASE("density_series: nonnegative and normalized over y") {
  const ModelSpec h = holder_model(1);
  const PhasePoint x = make_point(0.3, -0.2);
  const FrozenGaussian g0 = FrozenFlow(h, 0.0, x, 0.0, 0.5).gaussian(0.0, 0.5);
  const Eigen::LLT<Mat> llt(g0.gram());
  const Mat L = llt.matrixL();
  const PhasePoint m = g0.mean(x);
  const GaussRule& gr = gauss_legendre(12);
  double mass = 0.0, lowest = 1.0;
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 12; ++j) {
      const PhasePoint y = m + L * make_point(6.0 * gr.nodes[i], 6.0 * gr.nodes[j]);
      const double v = density_series(h, 0.0, x, 0.5, y, 2, coarse()).value;
      lowest = std::min(lowest, v);
      mass += 36.0 * gr.weights[i] * gr.weights[j] * L.determinant() * v;
    }
  CHECK(lowest >= 0.0);
  CHECK(mass == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("property: iterated kernels obey the truncation slope law") {
  const ModelSpec h = holder_model(1);
  const double gamma = 0.5;
  for (int N : {1, 2}) {
    std::vector<double> lx, ly;
    for (double span : {0.5, 0.25, 0.125}) {
      const PhasePoint x = make_point(0.0, 0.0);
      const PhasePoint y =
          flow_point(h, 0.0, span, x) + make_point(std::sqrt(span), 0.5 * std::pow(span, 1.5));
      const double v = iterated_kernel(h, 0.0, x, span, y, N, coarse());
      const double lam = default_lambda(h, 0.0, x, span);
      lx.push_back(std::log(span));
      ly.push_back(std::log(std::abs(v) / p_hat(h, lam, 0.0, x, span, y)));
    }
    const double slope = (ly.back() - ly.front()) / (lx.back() - lx.front());
    CHECK(slope >= -1.0 + N * gamma / 2.0 - 0.1);
  }
}

TEST_CASE("grad_density examples") {
  const ModelSpec k = kolmogorov_model(1);
  const PhasePoint x = make_point(0.4, -0.3);
  const PhasePoint y = flow_point(k, 0.0, 0.7, x);
  for (auto dir : {GradDirection::X1, GradDirection::X2}) {
    CHECK(std::abs(grad_density(k, 0.0, x, 0.7, y, dir, GradScheme::AnalyticLeading).value(0)) <= 1e-12);
    CHECK(std::abs(grad_density(k, 0.0, x, 0.7, y, dir, GradScheme::FiniteDifference).value(0)) <= 1e-9);
  }
  // Off-centre, the finite-difference scheme reproduces the exact Gaussian gradient.
  const PhasePoint y2 = y + make_point(0.3, 0.2);
  const Vec exact = frozen_density(k, 0.7, y2, 0.0, x, 0.7, y2, 1, 0);
  const Vec fd = grad_density(k, 0.0, x, 0.7, y2, GradDirection::X1, GradScheme::FiniteDifference).value;
  CHECK(fd(0) == doctest::Approx(exact(0)).epsilon(5e-4));
}

TEST_CASE("grad_density: schemes agree on the Holder model") {
  const ModelSpec h = holder_model(1);
  const PhasePoint x = make_point(0.3, -0.2);
  const PhasePoint y = flow_point(h, 0.0, 0.5, x) + make_point(0.2, 0.05);
  const GradientResult a =
      grad_density(h, 0.0, x, 0.5, y, GradDirection::X1, GradScheme::AnalyticLeading, 2, coarse());
  const GradientResult f =
      grad_density(h, 0.0, x, 0.5, y, GradDirection::X1, GradScheme::FiniteDifference, 2, coarse());
  CHECK(std::abs(a.value(0) - f.value(0)) < 1e-3 * std::abs(a.value(0)));
  CHECK(a.terms.size() == 2);
  CHECK(a.warnings.empty());
  const GradientResult a2 =
      grad_density(h, 0.0, x, 0.5, y, GradDirection::X2, GradScheme::AnalyticLeading, 2, coarse());
  CHECK_FALSE(a2.warnings.empty());
}

TEST_CASE("ck_residual examples") {
  const ModelSpec k = kolmogorov_model(1);
  QueryGrid g;
  g.xs = {make_point(0.0, 0.0), make_point(1.0, -0.5)};
  g.ys = {make_point(0.0, 0.0), make_point(0.5, 1.0)};
  CHECK(ck_residual(k, 0.0, 0.4, 1.0, g) < 1e-6);

  // One point at the flow image: finite and small, no failure.
  const ModelSpec h = holder_model(1);
  QueryGrid one;
  one.xs = {make_point(0.1, 0.0)};
  one.ys = {flow_point(h, 0.0, 0.5, one.xs[0])};
  CkOptions co;
  co.series = coarse();
  co.space_nodes = 12;
  const double res = ck_residual(h, 0.0, 0.25, 0.5, one, co);
  CHECK(std::isfinite(res));
  CHECK(res < 0.1);
  CHECK_THROWS_AS(ck_residual(h, 0.0, 0.5, 0.5, one, co), DomainError);
}

TEST_CASE("ck_residual: truncation order improves the semigroup defect") {
  const ModelSpec h = holder_model(1);
  QueryGrid one;
  one.xs = {make_point(0.1, 0.0)};
  one.ys = {flow_point(h, 0.0, 0.5, one.xs[0])};
  CkOptions co;
  co.series = coarse();
  co.series.inner_space_nodes = 8;
  co.space_nodes = 12;
  co.N = 1;
  const double r1 = ck_residual(h, 0.0, 0.25, 0.5, one, co);
  co.N = 2;
  const double r2 = ck_residual(h, 0.0, 0.25, 0.5, one, co);
  CHECK(r2 < r1);
}

TEST_CASE("reproduction_bounds: finite sandwich constants") {
  QueryGrid g;
  for (double a : {-1.0, 0.0, 1.0}) g.xs.push_back(make_point(a, 0.5 * a));
  for (double a : {-0.5, 0.5}) g.ys.push_back(make_point(a, -a));
  for (const ModelSpec& m : {kolmogorov_model(1), holder_model(1)}) {
    const ReproductionReport rep = reproduction_bounds(m, 1.0, 0.0, 1.0, g, {0.25, 0.5, 0.75}, 16);
    CHECK(rep.points == 18);
    CHECK(std::isfinite(rep.C));
    CHECK(rep.C >= 1.0);
    CHECK(rep.kappa >= 1.0);
    for (double v : rep.ratios) CHECK(v > 0.0);
  }
}

TEST_CASE("series results do not depend on the worker count") {
  const ModelSpec h = holder_model(1);
  const PhasePoint x = make_point(0.1, 0.2), y = flow_point(h, 0.0, 0.4, x);
  setenv("KK_THREADS", "1", 1);
  const SeriesResult one = density_series(h, 0.0, x, 0.4, y, 2, coarse());
  setenv("KK_THREADS", "3", 1);
  const SeriesResult three = density_series(h, 0.0, x, 0.4, y, 2, coarse());
  unsetenv("KK_THREADS");
  CHECK(one.value == three.value);
  CHECK(one.remainder_bound == three.remainder_bound);
}
