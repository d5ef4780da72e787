#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "kk/geometry.hpp"

namespace kk {

/// Regularity constants the coefficients are audited against.
struct RegularityBudget {
  double gamma = 1.0;   // Hoelder exponent in (0, 1]
  double kappa0 = 1.0;  // ellipticity and Hoelder bound of sigma
  double kappa1 = 1.0;  // growth bound of F1
  double kappa2 = 1.0;  // C^{1+gamma} bound of F2
  double c0 = 1.0;      // floor on the smallest singular value of grad_x1 F2
  double horizon = 1.0;

  void validate() const;
};

/// R^d-valued coefficient of (t, x).
using VecField = std::function<Vec(double t, const PhasePoint& x)>;
/// d x d matrix-valued coefficient of (t, x).
using MatField = std::function<Mat(double t, const PhasePoint& x)>;
/// Full R^{2d}-valued drift (F1, F2).
using DriftField = std::function<Vec(double t, const PhasePoint& x)>;

/// Coefficients of dX1 = F1 dt + sigma dW, dX2 = F2 dt.
/// Immutable after construction; evaluation must be pure.
struct ModelSpec {
  std::string name = "custom";
  int d = 1;
  VecField F1;
  VecField F2;
  MatField sigma;
  MatField grad_x1_F2;  // optional; central differences when empty
  RegularityBudget meta;
};

struct ModelEval {
  Vec F1;
  Vec F2;
  Mat sigma;
  Mat grad_x1_F2;
};

/// Throws DomainError on missing fields or bad budget.
void validate_model(const ModelSpec& model);

/// All coefficients at (t, x). Non-finite output raises ModelError.
ModelEval evaluate_model(const ModelSpec& model, double t, const PhasePoint& x);

/// Stacked drift (F1, F2) of size 2d.
Vec drift(const ModelSpec& model, double t, const PhasePoint& x);

/// Analytic gradient if supplied, else central differences with
/// step 1e-5 * (1 + |x1|).
Mat grad_x1_F2(const ModelSpec& model, double t, const PhasePoint& x);

/// Stacked drift as a callable.
DriftField drift_field(const ModelSpec& model);

// Built-in models.

ModelSpec kolmogorov_model(int d = 1);
ModelSpec zero_model(int d = 1);
ModelSpec constant_drift_model(const Vec& f1, const Vec& f2);

struct HolderParams {
  double gamma = 0.5;
  double a = 1.0;   // bounded rough part of F1
  double b = -0.5;  // Lipschitz part of F1
  double c = 0.1;   // rough part of F2
};

/// F1 = a sign(x1) min(|x1|^g, 1) + b x1, F2 = x1 + c min(|x2|^{(1+g)/3}, 1),
/// sigma = (1 + 0.25 sin(|x|_d^g)) I. Nonlinearities act entrywise.
ModelSpec holder_model(int d = 1, const HolderParams& p = {});

struct HamiltonianParams {
  double stiffness = 1.0;  // V(q) = k |q|^2 / 2 + m |q|^4 / 4
  double quartic = 0.1;
};

/// F = (-grad V(x2) - x1, x1), sigma = I.
ModelSpec damped_hamiltonian_model(int d = 1, const HamiltonianParams& p = {});

/// Same model with sigma replaced by c * sigma. c = 0 gives the noiseless hook
/// (the budget is left as is; audits will report the failure).
ModelSpec with_sigma_scale(const ModelSpec& model, double c);

/// Builds a model from its registry name: kolmogorov, zero, constant, holder,
/// damped-hamiltonian. Unknown names raise DomainError naming the model.
ModelSpec model_by_name(const std::string& name, int d,
                        const std::map<std::string, double>& params = {});

/// Default nodes per axis for the tensor rule: 32 in 2D, 12 in 4D, 6 above.
/// Kinked drifts converge slowly (roughly 1% at 32 nodes in 2D).
int default_mollifier_nodes(int dim);

/// Radial bump c exp(-1/(1-|z|^2)) on the unit ball of R^dim, unit mass.
class Mollifier {
 public:
  /// nodes_per_dim = 0 picks default_mollifier_nodes(dim).
  explicit Mollifier(int dim, int nodes_per_dim = 0);

  int dim() const { return dim_; }
  /// Normalized profile rho(z).
  double profile(const Vec& z) const;
  /// Tensor Gauss-Legendre estimate of the mass of rho (should be 1).
  double mass(int nodes_per_dim) const;
  /// (f * rho_eps)(t, x) = sum_k w_k f(t, x - eps z_k); weights sum to 1.
  Vec convolve(const VecField& f, double t, const PhasePoint& x, double eps) const;
  Mat convolve(const MatField& f, double t, const PhasePoint& x, double eps) const;

  const std::vector<Vec>& nodes() const { return nodes_; }
  const std::vector<double>& weights() const { return weights_; }

 private:
  int dim_;
  double norm_const_;
  std::vector<Vec> nodes_;
  std::vector<double> weights_;
};

/// F replaced by F * rho_eps. Requires eps in (0, 1).
ModelSpec mollify_drift(const ModelSpec& model, double eps, bool mollify_sigma = false,
                        int nodes_per_dim = 0);

struct TildeOptions {
  int nodes_per_dim = 0;     // 0 = default_mollifier_nodes
  double macro_scale = 1.0;  // scale for F1
  bool mollify_F2 = true;    // false gives the flow with F2 left raw
};

/// F~(t, x) = ((F1 * rho_1)(t, x), (F2 * rho_{|t-s|^{3/2}})(t, x)); raw F2 at t = s.
DriftField tilde_drift(const ModelSpec& model, double s, const TildeOptions& opts = {});

struct SamplingPlan {
  int pairs = 10000;
  double box = 2.0;  // x sampled uniformly in [-box, box]^{2d}
  std::vector<double> times{0.0};
  std::uint64_t seed = 1;
};

struct AuditWitness {
  double t = 0.0;
  PhasePoint x;
  PhasePoint y;
};

struct AuditReport {
  int pairs = 0;
  double sigma_holder = 0.0;  // max |sigma(x)-sigma(y)| / |x-y|_d^gamma
  double f2_taylor = 0.0;     // max |F2(x)-F2(y)-grad F2(y)(x-y)_1| / |x-y|_d^{1+gamma}
  double f1_growth = 0.0;     // max |F1(x)-F1(y)| / (1 + |x-y|)
  double f_at_zero = 0.0;     // max(|F1(t,0)|, |F2(t,0)|)
  double eig_min = 0.0;       // of sigma sigma^T
  double eig_max = 0.0;
  double grad_sv_min = 0.0;   // of grad_x1 F2
  bool ellipticity_ok = false;
  bool sigma_holder_ok = false;
  bool f1_ok = false;
  bool f2_ok = false;
  bool grad_ok = false;
  bool pass = false;
  AuditWitness sigma_witness;
  AuditWitness f2_witness;
};

/// Empirical check of the standing assumptions over pairs with |x-y|_d <= 1.
AuditReport audit_assumptions(const ModelSpec& model, const SamplingPlan& plan);

}  // namespace kk
