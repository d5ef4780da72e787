#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "kk/coefficients.hpp"

using namespace kk;

namespace {

double bump(double r2) { return r2 < 1.0 ? std::exp(-1.0 / (1.0 - r2)) : 0.0; }

// Polar midpoint rule for int f(x - eps z) rho(z) dz over the unit disc (d = 1).
template <class F>
double polar_mollify(F f, const PhasePoint& x, double eps) {
  const int nr = 2000, nphi = 720;
  double num = 0.0, den = 0.0;
  for (int i = 0; i < nr; ++i) {
    const double r = (i + 0.5) / nr;
    const double w = bump(r * r) * r;
    for (int j = 0; j < nphi; ++j) {
      const double phi = 2 * M_PI * (j + 0.5) / nphi;
      const PhasePoint z = make_point(r * std::cos(phi), r * std::sin(phi));
      num += w * f(x - eps * z);
      den += w;
    }
  }
  return num / den;
}

}  // namespace

TEST_CASE("evaluate_model on built-ins") {
  const ModelSpec k = kolmogorov_model(1);
  const PhasePoint x = make_point(0.7, -1.1);
  const ModelEval e = evaluate_model(k, 0.3, x);
  CHECK(e.F1(0) == 0.0);
  CHECK(e.F2(0) == 0.7);
  CHECK(e.sigma(0, 0) == 1.0);
  CHECK(e.grad_x1_F2(0, 0) == 1.0);

  const ModelEval z = evaluate_model(zero_model(2), 0.0, Vec::Ones(4));
  CHECK(z.F1.norm() == 0.0);
  CHECK(z.F2.norm() == 0.0);

  HolderParams p;  // gamma 0.5, a 1, b -0.5, c 0.1
  const ModelSpec h = holder_model(1, p);
  const PhasePoint q = make_point(0.25, -0.008);
  const ModelEval eh = evaluate_model(h, 0.0, q);
  CHECK(eh.F1(0) == doctest::Approx(0.5 - 0.125));
  CHECK(eh.F2(0) == doctest::Approx(0.25 + 0.1 * std::pow(0.008, 0.5)));
  const double n = 0.25 + 0.2;
  CHECK(eh.sigma(0, 0) == doctest::Approx(1.0 + 0.25 * std::sin(std::sqrt(n))));
  const ModelEval e10 = evaluate_model(h, 0.0, make_point(1.0, 0.0));
  CHECK(e10.F2(0) == doctest::Approx(1.0));
}

TEST_CASE("evaluate_model is deterministic and flags non-finite output") {
  const ModelSpec h = holder_model(2);
  const PhasePoint x = (Vec(4) << 0.1, -0.3, 0.2, 0.05).finished();
  const ModelEval a = evaluate_model(h, 0.1, x);
  const ModelEval b = evaluate_model(h, 0.1, x);
  CHECK((a.F1.array() == b.F1.array()).all());
  CHECK((a.sigma.array() == b.sigma.array()).all());

  ModelSpec bad = kolmogorov_model(1);
  bad.F1 = [](double, const PhasePoint&) { return Vec::Constant(1, NAN); };
  CHECK_THROWS_AS(evaluate_model(bad, 0.0, make_point(0, 0)), ModelError);
}

TEST_CASE("finite-difference gradient fallback") {
  ModelSpec m = kolmogorov_model(1);
  m.F2 = [](double, const PhasePoint& x) { return Vec::Constant(1, std::sin(x(0)) + x(1)); };
  m.grad_x1_F2 = nullptr;
  CHECK(grad_x1_F2(m, 0.0, make_point(0.4, 2.0))(0, 0) == doctest::Approx(std::cos(0.4)).epsilon(1e-9));
}

TEST_CASE("model registry") {
  CHECK(model_by_name("holder", 1).name == "holder");
  CHECK(model_by_name("damped-hamiltonian", 2).d == 2);
  CHECK_THROWS_WITH_AS(model_by_name("nope", 1), doctest::Contains("nope"), DomainError);
  const ModelSpec s2 = model_by_name("kolmogorov", 1, {{"sigma_scale", 2.0}});
  CHECK(s2.sigma(0.0, make_point(0, 0))(0, 0) == 2.0);
}

TEST_CASE("mollifier mass, support and symmetry") {
  for (int dim : {2, 4}) {
    Mollifier rho(dim);
    CHECK(rho.mass(64) == doctest::Approx(1.0).epsilon(1e-8));
    double sum = 0.0;
    for (double w : rho.weights()) sum += w;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));
  }
  Mollifier rho(2);
  const PhasePoint z = make_point(0.3, -0.45);
  CHECK(rho.profile(z) == rho.profile(-z));
  CHECK(rho.profile(make_point(0.8, 0.7)) == 0.0);
  CHECK(rho.profile(make_point(0.0, 0.0)) > 0.0);
  for (const Vec& n : rho.nodes()) CHECK(n.norm() < 1.0);
}

TEST_CASE("mollify_drift examples") {
  const ModelSpec c = constant_drift_model(Vec::Constant(1, 1.5), Vec::Constant(1, -2.0));
  const ModelSpec cm = mollify_drift(c, 0.3);
  const PhasePoint x = make_point(0.2, 0.9);
  CHECK(cm.F1(0.0, x)(0) == doctest::Approx(1.5).epsilon(1e-14));
  CHECK(cm.F2(0.0, x)(0) == doctest::Approx(-2.0).epsilon(1e-14));

  const ModelSpec k = mollify_drift(kolmogorov_model(1), 0.5);
  CHECK(k.F2(0.0, x)(0) == doctest::Approx(0.2).epsilon(1e-13));

  ModelSpec a = kolmogorov_model(1);
  a.F1 = [](double, const PhasePoint& y) { return Vec::Constant(1, std::abs(y(0))); };
  const double v = mollify_drift(a, 0.1).F1(0.0, make_point(0.0, 0.0))(0);
  const double oracle = polar_mollify([](const PhasePoint& y) { return std::abs(y(0)); },
                                      make_point(0.0, 0.0), 0.1);
  CHECK(v > 0.0);
  CHECK(v <= 0.1);
  CHECK(v == doctest::Approx(oracle).epsilon(2e-2));
  CHECK_THROWS_AS(mollify_drift(a, 1.0), DomainError);
  CHECK_THROWS_AS(mollify_drift(a, 0.0), DomainError);
}

TEST_CASE("property: mollification error is at most Lip * eps") {
  ModelSpec m = kolmogorov_model(1);
  // Lipschitz constant 3 (in the Euclidean norm of R^2).
  m.F1 = [](double, const PhasePoint& y) { return Vec::Constant(1, 2.0 * std::sin(y(0)) + std::abs(y(1))); };
  for (double eps : {0.1, 0.01}) {
    const ModelSpec me = mollify_drift(m, eps);
    double worst = 0.0;
    for (double a = -2.0; a <= 2.0; a += 0.25)
      for (double b = -2.0; b <= 2.0; b += 0.25) {
        const PhasePoint x = make_point(a, b);
        worst = std::max(worst, std::abs(me.F1(0.0, x)(0) - m.F1(0.0, x)(0)));
      }
    CHECK(worst <= 3.0 * eps);
  }
}

TEST_CASE("tilde_drift examples") {
  const ModelSpec k = kolmogorov_model(1);
  const DriftField fk = tilde_drift(k, 0.0);
  const PhasePoint x = make_point(0.4, -0.3);
  CHECK((fk(0.5, x) - drift(k, 0.5, x)).norm() <= 1e-13);

  const ModelSpec h = holder_model(1);
  const DriftField fh = tilde_drift(h, 0.0);
  CHECK(fh(0.0, x)(1) == h.F2(0.0, x)(0));

  // Second component at t - s = 0.25 is mollified at scale 0.125.
  const PhasePoint q = make_point(0.1, 0.02);
  const double oracle = polar_mollify([&](const PhasePoint& y) { return h.F2(0.0, y)(0); }, q, 0.125);
  CHECK(fh(0.25, q)(1) == doctest::Approx(oracle).epsilon(1e-3));
  // F1 has a square-root kink inside the unit ball, so the tensor rule is only
  // good to about a percent there.
  const double f1_oracle = polar_mollify([&](const PhasePoint& y) { return h.F1(0.0, y)(0); }, q, 1.0);
  CHECK(fh(0.25, q)(0) == doctest::Approx(f1_oracle).epsilon(1.5e-2));
  TildeOptions fine;
  fine.nodes_per_dim = 128;
  CHECK(tilde_drift(h, 0.0, fine)(0.25, q)(0) == doctest::Approx(f1_oracle).epsilon(3e-3));
}

TEST_CASE("audit_assumptions examples") {
  SamplingPlan plan;
  plan.pairs = 2000;
  const AuditReport k = audit_assumptions(kolmogorov_model(1), plan);
  CHECK(k.pass);
  CHECK(k.sigma_holder == 0.0);
  CHECK(k.f2_taylor == 0.0);
  CHECK(k.f1_growth == 0.0);
  CHECK(k.eig_min == doctest::Approx(1.0));
  CHECK(k.eig_max == doctest::Approx(1.0));
  CHECK(k.grad_sv_min == doctest::Approx(1.0));

  ModelSpec two = with_sigma_scale(kolmogorov_model(1), 2.0);
  two.meta.kappa0 = 3.9;
  AuditReport r = audit_assumptions(two, plan);
  CHECK(r.eig_max == doctest::Approx(4.0));
  CHECK_FALSE(r.pass);
  two.meta.kappa0 = 4.0;
  r = audit_assumptions(two, plan);
  CHECK(r.pass);
}

TEST_CASE("property: holder model satisfies its budget on 1e4 pairs") {
  SamplingPlan plan;
  plan.pairs = 10000;
  plan.times = {0.0, 0.5, 1.0};
  const ModelSpec h = holder_model(1);
  const AuditReport r = audit_assumptions(h, plan);
  CHECK(r.pass);
  // Analytic ceilings: 0.25 for sigma, c = 0.1 for the F2 remainder.
  CHECK(r.sigma_holder <= 0.25 + 1e-12);
  CHECK(r.sigma_holder > 0.05);
  CHECK(r.f2_taylor <= 0.1 + 1e-12);
  CHECK(r.eig_min >= 0.5625 - 1e-12);
  CHECK(r.eig_max <= 1.5625 + 1e-12);
  // Brute force over the witness pair reproduces the reported quotient.
  const auto& w = r.sigma_witness;
  const double q = std::abs(h.sigma(w.t, w.x)(0, 0) - h.sigma(w.t, w.y)(0, 0)) /
                   std::pow(aniso_norm(w.x - w.y), 0.5);
  CHECK(q == doctest::Approx(r.sigma_holder).epsilon(1e-12));
}
