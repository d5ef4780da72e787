#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "kk/flow.hpp"
#include "kk/montecarlo.hpp"

using namespace kk;

namespace {

// Kolmogorov transition density in d = 1 with the spatial covariance inflated by
// diag(b1^2, b2^2): the expectation of the product-kernel estimator.
double kolmogorov_smoothed(double t, const PhasePoint& x, const PhasePoint& y, double b1 = 0.0,
                           double b2 = 0.0) {
  Eigen::Matrix2d K;
  K << t + b1 * b1, t * t / 2, t * t / 2, t * t * t / 3 + b2 * b2;
  const Eigen::Vector2d w(y(0) - x(0), y(1) - x(1) - t * x(0));
  return std::exp(-0.5 * w.dot(K.inverse() * w)) / (2 * std::numbers::pi * std::sqrt(K.determinant()));
}

double kolmogorov_origin(double t) { return std::sqrt(3.0) / (std::numbers::pi * t * t); }

SimConfig exact_cfg(long n, std::uint64_t seed = 11, int steps = 1) {
  SimConfig c;
  c.npaths = n;
  c.seed = seed;
  c.nsteps = steps;
  c.scheme = SimScheme::ExactLinearSubstep;
  return c;
}

std::vector<AuditQuery> audit_grid(const ModelSpec& m, const std::vector<PhasePoint>& xs,
                                   const std::vector<double>& ts) {
  return kk::audit_grid(m, 0.0, xs, ts, default_audit_offsets(m.d));
}

}  // namespace

TEST_CASE("counter generator is a pure function of its key") {
  CounterRng a(1, 2, 3), b(1, 2, 3), c(1, 2, 4), e(1, 3, 3);
  const auto va = a(), vc = c(), ve = e();
  CHECK(va == b());
  CHECK(va != vc);
  CHECK(va != ve);
  double m = 0, m2 = 0;
  const int n = 200000;
  CounterRng r(5, 0, 0);
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    m += z;
    m2 += z * z;
  }
  m /= n;
  CHECK(std::abs(m) < 4.0 / std::sqrt(n));
  CHECK(std::abs(m2 / n - 1.0) < 4.0 * std::sqrt(2.0 / n));
  CounterRng u(9, 9, 9);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    CHECK((v > 0.0 && v < 1.0));
  }
}

TEST_CASE("SimConfig validation names the field") {
  SimConfig c;
  c.npaths = 0;
  try {
    c.validate();
    FAIL("expected an error");
  } catch (const DomainError& e) {
    CHECK(std::string(e.what()).find("npaths") != std::string::npos);
  }
  c.npaths = 1;
  c.nsteps = 0;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("nsteps"), DomainError);
  CHECK_THROWS_AS(simulate(kolmogorov_model(1), 1.0, make_point(0, 0), 1.0, SimConfig{}), DomainError);
  CHECK_THROWS_AS(parse_scheme("milstein"), DomainError);
}

TEST_CASE("exact substep reproduces the Kolmogorov law in one step") {
  const long n = 100000;
  const SampleBatch b = simulate(kolmogorov_model(1), 0.0, make_point(0, 0), 1.0, exact_cfg(n));
  REQUIRE(b.size() == n);
  CHECK(b.excluded == 0);
  const Eigen::Vector2d mean = b.points.rowwise().mean();
  const Mat c = b.points.colwise() - mean;
  const Eigen::Matrix2d cov = c * c.transpose() / (n - 1.0);
  Eigen::Matrix2d K;
  K << 1.0, 0.5, 0.5, 1.0 / 3.0;
  for (int i = 0; i < 2; ++i) {
    CHECK(std::abs(mean(i)) < 3.0 * std::sqrt(K(i, i) / n));
    for (int j = 0; j < 2; ++j) {
      const double se = std::sqrt((K(i, i) * K(j, j) + K(i, j) * K(i, j)) / n);
      CHECK(std::abs(cov(i, j) - K(i, j)) < 3.0 * se);
    }
  }
}

TEST_CASE("noiseless paths follow the drift flow") {
  const ModelSpec m = with_sigma_scale(holder_model(1), 0.0);
  const PhasePoint x = make_point(0.7, -0.3);
  const PhasePoint ref = flow_point(m, 0.0, 1.0, x);
  for (SimScheme sch : {SimScheme::Euler, SimScheme::ExactLinearSubstep}) {
    SimConfig c;
    c.npaths = 3;
    c.nsteps = 4000;
    c.scheme = sch;
    const SampleBatch b = simulate(m, 0.0, x, 1.0, c);
    // First-order schemes: the error is O(step).
    for (int k = 0; k < 3; ++k) CHECK((b.points.col(k) - ref).norm() < 2e-3);
    CHECK(b.points.col(0) == b.points.col(2));
  }
}

TEST_CASE("free noise leaves the second block untouched") {
  const PhasePoint x = make_point(0.4, -1.2);
  SimConfig c;
  c.npaths = 50000;
  c.nsteps = 10;
  const SampleBatch b = simulate(zero_model(1), 0.0, x, 2.0, c);
  for (long k = 0; k < b.size(); ++k) CHECK(b.points(1, k) == x(1));
  const double m = b.points.row(0).mean();
  const double v = (b.points.row(0).array() - m).square().sum() / (b.size() - 1.0);
  CHECK(std::abs(m - x(0)) < 4.0 * std::sqrt(2.0 / b.size()));
  CHECK(std::abs(v - 2.0) < 4.0 * 2.0 * std::sqrt(2.0 / b.size()));
}

TEST_CASE("property: batches are identical across worker counts") {
  for (SimScheme sch : {SimScheme::Euler, SimScheme::ExactLinearSubstep}) {
    SimConfig c;
    c.npaths = 2000;
    c.nsteps = 20;
    c.scheme = sch;
    c.seed = 42;
    c.workers = 1;
    const SampleBatch one = simulate(holder_model(1), 0.0, make_point(0.2, 0.1), 0.5, c);
    for (int w : {2, 8}) {
      c.workers = w;
      const SampleBatch other = simulate(holder_model(1), 0.0, make_point(0.2, 0.1), 0.5, c);
      CHECK(other.points.cwiseEqual(one.points).all());
    }
    c.seed = 43;
    CHECK_FALSE(simulate(holder_model(1), 0.0, make_point(0.2, 0.1), 0.5, c).points.cwiseEqual(one.points).all());
  }
}

TEST_CASE("non-finite paths are excluded and counted") {
  ModelSpec m = kolmogorov_model(1);
  m.name = "blowup";
  m.F1 = [](double, const PhasePoint& x) {
    Vec f(1);
    f(0) = x(0) > 1.0 ? std::numeric_limits<double>::infinity() : 0.0;
    return f;
  };
  SimConfig c;
  c.npaths = 1000;
  c.nsteps = 20;
  const SampleBatch b = simulate(m, 0.0, make_point(0, 0), 1.0, c);
  CHECK(b.excluded > 0);
  CHECK(b.excluded + b.size() == c.npaths);
  CHECK(static_cast<long>(b.excluded_paths.size()) == b.excluded);
  CHECK(b.points.allFinite());
}

TEST_CASE("binary sample file round trip") {
  SimConfig c;
  c.npaths = 17;
  c.nsteps = 3;
  c.seed = 99;
  const SampleBatch b = simulate(holder_model(2), 0.0, PhasePoint::Constant(4, 0.3), 1.0, c);
  std::stringstream ss;
  write_batch(ss, b);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 5) == "KKMC1");
  CHECK(bytes.size() == 5 + 4 + 8 * 3 + 8 * 17 * 4);
  CHECK(static_cast<unsigned char>(bytes[5]) == 2);  // little-endian d
  const SampleBatch r = read_batch(ss);
  CHECK(r.d == 2);
  CHECK(r.seed == 99);
  CHECK(r.nsteps == 3);
  CHECK(r.points.cwiseEqual(b.points).all());
  std::stringstream bad("KKMC2");
  CHECK_THROWS_AS(read_batch(bad), DomainError);
}

TEST_CASE("kde examples") {
  CHECK_THROWS_AS(kde(Mat(2, 0), 1.0, {make_point(0, 0)}), DomainError);

  // Degenerate sample: the kernel peak at the atom, nothing far away.
  const Mat atoms = make_point(0.5, -0.5).replicate(1, 10);
  KdeOptions o;
  o.h = 0.2;
  const auto e = kde(atoms, 1.0, {make_point(0.5, -0.5), make_point(40, 40)}, o);
  CHECK(e[0].value == doctest::Approx(1.0 / (2 * std::numbers::pi * 0.2 * 0.2)).epsilon(1e-14));
  CHECK(e[1].value == 0.0);
  CHECK(e[0].std_error == doctest::Approx(0.0).epsilon(1e-12));

  // 10^6 exact samples at h = 0.1: the estimator matches the smoothed closed form;
  // the smoothing bias itself is several percent at this bandwidth.
  const SampleBatch b = simulate(kolmogorov_model(1), 0.0, make_point(0, 0), 1.0, exact_cfg(1000000));
  o.h = 0.1;
  const DensityEstimate est = kde(b.points, 1.0, {make_point(0, 0)}, o)[0];
  const double smooth = kolmogorov_smoothed(1.0, make_point(0, 0), make_point(0, 0), 0.1, 0.1);
  CHECK(est.std_error > 0.0);
  CHECK(std::abs(est.value - smooth) < 3.0 * est.std_error);
  CHECK(std::abs(smooth / kolmogorov_origin(1.0) - 1.0) > 0.05);
  CHECK(est.h1 == doctest::Approx(0.1));
  CHECK(est.h2 == doctest::Approx(0.1));
  // Default bandwidth: within 3% of the unsmoothed value.
  const DensityEstimate def = kde(b.points, 1.0, {make_point(0, 0)})[0];
  CHECK(std::abs(def.value / kolmogorov_origin(1.0) - 1.0) < 0.03);
}

TEST_CASE("kde on g_lambda samples has O(h^2) bias") {
  // Samples from the normalized g_lambda (covariance lambda T^2) for t = 0.5.
  const double lam = 1.5, t = 0.5;
  const long n = 2000000;
  Mat s(2, n);
  CounterRng rng(3, 0, 0);
  const Vec sd = scale_diagonal(t, 1) * std::sqrt(lam);
  for (long i = 0; i < n; ++i) s.col(i) = Vec(sd.cwiseProduct(Eigen::Vector2d(rng.normal(), rng.normal())));
  const PhasePoint q = scale_map(t, make_point(0.4, -0.3), ScaleDirection::Forward);
  const double exact = gauss_g(lam, t, q) / std::pow(2 * std::numbers::pi * lam, 1);
  double err[2];
  int k = 0;
  for (double h : {0.2, 0.1}) {
    KdeOptions o;
    o.h = h;
    const DensityEstimate e = kde(s, t, {q}, o)[0];
    // Smoothing inflates each scaled variance from lambda to lambda + h^2.
    const double smooth = gauss_g(lam + h * h, t, q) / (2 * std::numbers::pi * (lam + h * h));
    CHECK(std::abs(e.value - smooth) < 4.0 * e.std_error);
    err[k++] = std::abs(e.value - exact) / exact;
  }
  // Halving h cuts the bias by roughly four.
  CHECK(err[0] < 0.04);
  CHECK(err[0] > 2.0 * err[1]);
}

TEST_CASE("property: halving h on a 4x sample moves the estimate toward the truth") {
  const SampleBatch big = simulate(kolmogorov_model(1), 0.0, make_point(0, 0), 1.0, exact_cfg(400000, 5));
  const Mat small = big.points.leftCols(100000);
  KdeOptions o;
  o.h = 0.2;
  const double e1 = kde(small, 1.0, {make_point(0, 0)}, o)[0].value;
  o.h = 0.1;
  const double e2 = kde(big.points, 1.0, {make_point(0, 0)}, o)[0].value;
  const double truth = kolmogorov_origin(1.0);
  CHECK(std::abs(e2 - truth) < std::abs(e1 - truth));
}

TEST_CASE("common-random-number gradient on the Kolmogorov model") {
  const PhasePoint x = make_point(0.1, -0.2), y = make_point(0.3, 0.1);
  SimConfig c = exact_cfg(200000, 17);
  KdeOptions o;
  o.h = 0.05;
  const double t = 1.0, b = 0.05;
  for (bool first : {true, false}) {
    const Vec g = mc_grad_density(kolmogorov_model(1), 0.0, x, t, y, first, c, o, 0.05);
    // Oracle: central difference of the smoothed closed form over x.
    const double step = 1e-5;
    PhasePoint xp = x, xm = x;
    xp(first ? 0 : 1) += step;
    xm(first ? 0 : 1) -= step;
    const double ref = (kolmogorov_smoothed(t, xp, y, b, b) - kolmogorov_smoothed(t, xm, y, b, b)) / (2 * step);
    CHECK(g(0) == doctest::Approx(ref).epsilon(0.05));
  }
}

TEST_CASE("fit_bounds on synthetic points") {
  // Points drawn exactly from C g_lambda at various offsets.
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::vector<AuditPoint> pts;
  for (int i = 0; i < 40; ++i) {
    AuditPoint p;
    p.query.s = 0.0;
    p.query.t = 0.5;
    p.query.x = make_point(0, 0);
    p.center = make_point(0, 0);
    p.query.y = scale_map(0.5, make_point(u(rng), u(rng)), ScaleDirection::Forward);
    p.density = 0.5 * gauss_g(2.0, 0.5, p.center - p.query.y);
    p.ess = 1000;
    pts.push_back(p);
  }
  AuditOptions o;
  const BoundReport r = fit_bounds(pts, o);
  CHECK(r.violations == 0);
  CHECK_FALSE(r.capped);
  CHECK(std::isfinite(r.C0));
  CHECK(r.C0 >= 1.0);
  for (const AuditPoint& p : r.points) {
    CHECK(p.upper_ratio <= r.C0 * (1 + 1e-12));
    CHECK(p.lower_ratio <= r.C0 * (1 + 1e-12));
  }

  // Enlarging the point set never decreases C0.
  std::vector<AuditPoint> sub;
  for (size_t k = 0; k < pts.size(); ++k) {
    sub.push_back(pts[k]);
    const double c = fit_bounds(sub, o).C0;
    if (k > 0) CHECK(c >= fit_bounds(std::vector<AuditPoint>(sub.begin(), sub.end() - 1), o).C0);
  }

  // A far-off density forces the cap and a reported violation.
  pts[0].density = 1e6;
  pts[0].std_error = 1.0;
  const BoundReport bad = fit_bounds(pts, o);
  CHECK(bad.capped);
  CHECK(bad.C0 == o.c_max);
  CHECK(bad.violations >= 1);
  CHECK(bad.points[0].violation);

  // Flagged points do not enter the fit.
  pts[0].flagged = true;
  CHECK(fit_bounds(pts, o).C0 == doctest::Approx(r.C0));
  CHECK(fit_bounds(pts, o).flagged == 1);
}

TEST_CASE("bound_audit on Kolmogorov agrees with the closed form") {
  const ModelSpec k = kolmogorov_model(1);
  const auto grid = audit_grid(k, {make_point(0, 0), make_point(1, -0.5)}, {0.5, 1.0});
  const SimConfig c = exact_cfg(40000, 8);
  const BoundReport r = bound_audit(k, grid, c);
  CHECK(r.violations == 0);
  CHECK(r.flagged == 0);
  CHECK(std::isfinite(r.C0));
  for (const AuditPoint& p : r.points) {
    const double tau = p.query.t - p.query.s;
    const double b = default_bandwidth(c.npaths);
    const double ref = kolmogorov_smoothed(tau, p.query.x, p.query.y, b * std::sqrt(tau), b * std::pow(tau, 1.5));
    CHECK(std::abs(p.density - ref) < 4.5 * p.std_error);
    // The center is the exact flow for this linear drift.
    CHECK((p.center - flow_point(k, 0.0, tau, p.query.x)).norm() < 1e-8);
  }

  // Each point's estimate does not depend on the rest of the grid.
  const std::vector<AuditQuery> part(grid.begin(), grid.begin() + 5);
  const BoundReport rp = bound_audit(k, part, c);
  for (size_t i = 0; i < part.size(); ++i) CHECK(rp.points[i].density == r.points[i].density);
  CHECK(rp.C0 <= r.C0);
}

TEST_CASE("bound_audit: Holder model passes and a raw center fails under strong drift") {
  SimConfig c = exact_cfg(20000, 3, 50);
  const std::vector<PhasePoint> xs{make_point(-1.0, 0.5), make_point(1.0, -0.5)};
  const ModelSpec h = holder_model(1);
  const BoundReport ok = bound_audit(h, audit_grid(h, xs, {0.25, 1.0}), c);
  CHECK(ok.violations == 0);
  CHECK_FALSE(ok.capped);

  HolderParams strong;
  strong.a = 30.0;
  const ModelSpec hs = holder_model(1, strong);
  const auto grid = audit_grid(hs, xs, {0.25, 0.5, 1.0});
  AuditOptions raw;
  raw.flow = FlowChoice::Raw;
  const BoundReport bad = bound_audit(hs, grid, c, raw);
  CHECK(bad.violations >= 1);
  const BoundReport good = bound_audit(hs, grid, c);
  CHECK(good.violations == 0);
}

TEST_CASE("rate_fit") {
  std::vector<std::pair<double, double>> p;
  for (int k = 1; k <= 6; ++k) p.emplace_back(std::ldexp(1.0, -k), 3.0 * std::pow(std::ldexp(1.0, -k), -2.5));
  const RateFit f = rate_fit(p);
  CHECK(std::abs(f.slope + 2.5) < 1e-12);
  CHECK(f.intercept == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(f.r2 == doctest::Approx(1.0));

  CHECK_THROWS_AS(rate_fit({p.begin(), p.begin() + 3}), DomainError);
  CHECK_THROWS_AS(rate_fit({{0.5, 1}, {0.5, 2}, {0.25, 1}, {0.25, 3}}), DomainError);
  CHECK_THROWS_AS(rate_fit({{0.5, 1}, {0.25, -2}, {0.125, 1}, {0.0625, 3}}), DomainError);
}

TEST_CASE("sup-gradient rates on the Kolmogorov model match a brute-force oracle") {
  std::vector<double> spans;
  for (int k = 1; k <= 6; ++k) spans.push_back(std::ldexp(1.0, -k));
  const ModelSpec m = kolmogorov_model(1);
  const PhasePoint x = make_point(0.3, -0.1);
  // Oracle: maximize the closed-form derivative over a grid of scaled offsets.
  auto brute = [&](double t, int j1, int j2) {
    Eigen::Matrix2d K;
    K << t, t * t / 2, t * t / 2, t * t * t / 3;
    const Eigen::Matrix2d P = K.inverse();
    const double c = 1.0 / (2 * std::numbers::pi * std::sqrt(K.determinant()));
    // d mean / d x1 = (1, t), d mean / d x2 = (0, 1).
    const Eigen::Vector2d a1(1, t), a2(0, 1);
    double best = 0;
    for (int i = -200; i <= 200; ++i)
      for (int j = -200; j <= 200; ++j) {
        const Eigen::Vector2d w(i * 0.02 * std::sqrt(t), j * 0.02 * std::pow(t, 1.5));
        const double p = c * std::exp(-0.5 * w.dot(P * w));
        const Eigen::Vector2d g = P * w;
        double v;
        if (j1 == 1 && j2 == 0) v = p * std::abs(a1.dot(g));
        else if (j1 == 0) v = p * std::abs(a2.dot(g));
        else v = p * std::abs(a1.dot(g) * a1.dot(g) - a1.dot(P * a1));
        best = std::max(best, v);
      }
    return best;
  };
  const int orders[3][2] = {{1, 0}, {2, 0}, {0, 1}};
  const double slopes[3] = {-2.5, -3.0, -3.5};
  for (int o = 0; o < 3; ++o) {
    const auto series = sup_gradient_series(m, 0.0, x, spans, orders[o][0], orders[o][1]);
    std::vector<std::pair<double, double>> oracle;
    for (size_t k = 0; k < spans.size(); ++k) {
      const double b = brute(spans[k], orders[o][0], orders[o][1]);
      oracle.emplace_back(spans[k], b);
      CHECK(series[k].second == doctest::Approx(b).epsilon(1e-3));
    }
    CHECK(rate_fit(oracle).slope == doctest::Approx(slopes[o]).epsilon(0.05 / 3.5));
    CHECK(std::abs(rate_fit(series).slope - slopes[o]) < 0.05);
  }
}
