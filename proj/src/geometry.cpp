#include "kk/geometry.hpp"

#include <cmath>
#include <string>

namespace kk {

int phase_dim(const PhasePoint& x) {
  if (x.size() < 2 || x.size() % 2 != 0)
    throw DomainError("phase point must have even size >= 2, got " + std::to_string(x.size()));
  return static_cast<int>(x.size() / 2);
}

PhasePoint make_point(const Vec& x1, const Vec& x2) {
  if (x1.size() != x2.size() || x1.size() == 0)
    throw DomainError("phase point blocks must have equal positive dimension");
  PhasePoint z(x1.size() * 2);
  z << x1, x2;
  return z;
}

PhasePoint make_point(double x1, double x2) { return PhasePoint{{x1, x2}}; }

void require_phase_point(const PhasePoint& x, const char* what) {
  phase_dim(x);
  if (!x.allFinite()) throw DomainError(std::string(what) + " has non-finite entries");
}

double aniso_norm(const PhasePoint& x) {
  require_phase_point(x);
  return block1(x).norm() + std::cbrt(block2(x).norm());
}

Vec scale_diagonal(double t, int d) {
  if (!(t > 0.0) || !std::isfinite(t)) throw DomainError("scale span must be positive and finite");
  Vec diag(2 * d);
  diag.head(d).setConstant(std::sqrt(t));
  diag.tail(d).setConstant(t * std::sqrt(t));
  return diag;
}

PhasePoint scale_map(double t, const PhasePoint& x, ScaleDirection dir) {
  const int d = phase_dim(x);
  const Vec diag = scale_diagonal(t, d);
  if (dir == ScaleDirection::Forward) return diag.cwiseProduct(x);
  return x.cwiseQuotient(diag);
}

double gauss_g(double lambda, double t, const PhasePoint& x) {
  if (!(lambda > 0.0)) throw DomainError("gauss_g: lambda must be positive");
  require_phase_point(x);
  const int d = phase_dim(x);
  const double q = scale_map(t, x, ScaleDirection::Inverse).squaredNorm();
  return std::pow(t, -2.0 * d) * std::exp(-q / (2.0 * lambda));
}

double proxy_p_hat(double lambda, double s, double t, const PhasePoint& x,
                   const PhasePoint& y, const FlowMap& flow) {
  if (!(s < t)) throw DomainError("proxy_p_hat requires s < t");
  return gauss_g(lambda, t - s, flow(s, t, x) - y);
}

}  // namespace kk
