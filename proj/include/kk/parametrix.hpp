#pragma once

#include <functional>
#include <string>
#include <vector>

#include "kk/frozen.hpp"

namespace kk {

/// Quadrature for the space-time convolutions of the series.
/// The outer level uses (time_nodes, space_nodes); nested levels use the inner pair.
struct QuadratureSpec {
  int time_nodes = 8;          // Gauss-Legendre nodes on each half of (s, t)
  int space_nodes = 16;        // per phase-space axis
  int inner_time_nodes = 4;
  int inner_space_nodes = 8;
  double half_width = 6.0;     // spatial half-width in standard deviations of the envelope
  double time_power = 0.0;     // substitution power at the kernel end; 0 = 2/gamma
  double flow_tol = 1e-9;      // tolerance of the frozen flows built inside the series
  double rel_tol = 0.0;        // convolve only: > 0 enables refinement checks
  int max_refinements = 2;

  /// nodes >= 4, half_width >= 4, positive tolerances.
  void validate() const;
};

/// Gaussian location of a kernel's mass in its free spatial variable.
struct GaussEnvelope {
  PhasePoint mean;
  Mat cov;
};

struct SpaceGrid {
  std::vector<PhasePoint> nodes;
  std::vector<double> weights;
};

/// Tensor Gauss-Legendre grid on the ellipsoid of the normalized product of two
/// Gaussian envelopes, half-width in standard deviations of that product.
SpaceGrid product_grid(const GaussEnvelope& a, const GaussEnvelope& b, int nodes_per_axis,
                       double half_width);

/// Gauss-Legendre rule on (a, b) after the substitution r = a + (b - a) u^p
/// (anchored at a) or r = b - (b - a) u^p (anchored at b). Absorbs endpoint
/// singularities of order |r - anchor|^{1/p - 1}.
void power_rule(double a, double b, int nodes, double p, bool anchored_at_a,
                std::vector<double>& r, std::vector<double>& w);

/// The parametrix kernel
///   H(r, z; t, y) = (a(r,z) - a(r,th)) : d2_{x1} p~ + (F1(r,z) - F1(r,th)) . d_{x1} p~
///                   + T_{F2(r)}(z, th) . d_{x2} p~
/// with a = sigma sigma^T / 2, th = theta_{r,t}(y) and p~ the density frozen at (t, y).
/// Holds the frozen flow anchored at (t, y); the model must outlive the object.
class ParametrixKernel {
 public:
  ParametrixKernel(const ModelSpec& model, double t, const PhasePoint& y, double lower,
                   const FrozenOptions& opts = {});

  /// Frozen pieces at a fixed time r < t.
  struct Slice {
    double r = 0.0;
    FrozenGaussian gauss;
    PhasePoint theta;
    Mat a_theta;
    Vec F1_theta;
    Vec F2_theta;
    Mat grad_theta;
  };
  Slice slice(double r) const;

  double value(const Slice& sl, const PhasePoint& z) const;
  double value(double r, const PhasePoint& z) const { return value(slice(r), z); }

  /// Where H(r, . ; t, y) lives: N(theta_{r,t}(y), R^{-1} K R^{-T}).
  static GaussEnvelope envelope(const Slice& sl);

  const FrozenFlow& flow() const { return flow_; }
  double t() const { return t_; }
  const PhasePoint& y() const { return y_; }

 private:
  const ModelSpec* model_;
  double t_;
  PhasePoint y_;
  FrozenFlow flow_;
};

/// Single evaluation of H(r, z; t, y). Requires r < t.
double kernel_H(const ModelSpec& model, double r, const PhasePoint& z, double t,
                const PhasePoint& y, const FrozenOptions& opts = {});

/// k(s, x; t, y).
using SpaceTimeKernel =
    std::function<double(double s, const PhasePoint& x, double t, const PhasePoint& y)>;

/// Shape information for convolve: where each kernel lives at an intermediate
/// time, and the endpoint exponents of the time integrand (r-s)^{alpha-1}(t-r)^{beta-1}.
struct ConvolutionShape {
  std::function<GaussEnvelope(double r)> left;
  std::function<GaussEnvelope(double r)> right;
  double alpha = 1.0;
  double beta = 1.0;
};

/// Envelopes from the frozen Gaussians anchored at (s, x) and (t, y).
ConvolutionShape frozen_shape(const ModelSpec& model, double s, const PhasePoint& x, double t,
                              const PhasePoint& y, double alpha = 1.0, double beta = 1.0,
                              const FrozenOptions& opts = {});

/// int_s^t int A(s,x;r,z) B(r,z;t,y) dz dr. With quad.rel_tol > 0 the rule is
/// refined until two successive estimates agree; otherwise NumericError with the
/// last estimate.
double convolve(const SpaceTimeKernel& A, const SpaceTimeKernel& B, double s, const PhasePoint& x,
                double t, const PhasePoint& y, const ConvolutionShape& shape,
                const QuadratureSpec& quad = {});

/// Spatial part only: int A(z) B(z) dz over the product grid at one time.
double spatial_integral(const std::function<double(const PhasePoint&)>& A,
                        const std::function<double(const PhasePoint&)>& B,
                        const GaussEnvelope& left, const GaussEnvelope& right, int nodes_per_axis,
                        double half_width);

struct SeriesResult {
  double value = 0.0;
  std::vector<double> terms;     // terms[j] = (p~_1 (x) H^{(x) j})(s,x;t,y)
  double remainder_bound = 0.0;  // Gamma-law tail with the fitted constant
  int orders = 1;                // N
  double fitted_C = 0.0;
  double majorant = 0.0;         // p^_lambda(s,x;t,y) used by the fit
  double lambda = 0.0;
  /// Whether -1 + N gamma / 2 > 2d, the order the probabilistic remainder
  /// argument needs. Reported only.
  bool remainder_order_ok = false;
};

/// p~_1 + sum_{j=1}^{N-1} p~_1 (x) H^{(x) j} at (s, x; t, y). Requires s < t, N >= 1.
/// When N = 1 one correction is still computed to fit the remainder constant.
SeriesResult density_series(const ModelSpec& model, double s, const PhasePoint& x, double t,
                            const PhasePoint& y, int N = 3, const QuadratureSpec& quad = {});

/// H^{(x) N}(s, x; t, y) (N >= 1), the iterated kernel itself.
double iterated_kernel(const ModelSpec& model, double s, const PhasePoint& x, double t,
                       const PhasePoint& y, int N, const QuadratureSpec& quad = {});

enum class GradDirection { X1, X2 };
enum class GradScheme { AnalyticLeading, FiniteDifference };

struct GradientResult {
  Vec value;
  std::vector<Vec> terms;  // analytic scheme only
  std::vector<std::string> warnings;
};

/// Gradient of the truncated series in x1 or x2. The analytic scheme differentiates
/// the innermost frozen Gaussians; the finite-difference scheme takes central
/// differences with steps c sqrt(t-s) and c (t-s)^{3/2}.
GradientResult grad_density(const ModelSpec& model, double s, const PhasePoint& x, double t,
                            const PhasePoint& y, GradDirection dir, GradScheme scheme, int N = 3,
                            const QuadratureSpec& quad = {}, double fd_factor = 0.01);

/// 2 lambda_max of the scaled Gram matrix of the backward frozen Gaussian.
double default_lambda(const ModelSpec& model, double s, const PhasePoint& x, double t,
                      const FrozenOptions& opts = {});

/// p^_lambda(s, x; t, y) = g_lambda(t - s, theta_{t,s}(x) - y).
double p_hat(const ModelSpec& model, double lambda, double s, const PhasePoint& x, double t,
             const PhasePoint& y, const FlowOptions& opts = {});

struct QueryGrid {
  std::vector<PhasePoint> xs;
  std::vector<PhasePoint> ys;
};

struct CkOptions {
  int N = 1;
  QuadratureSpec series;      // quadrature inside density_series
  int space_nodes = 24;       // for the intermediate z integral
  double half_width = 7.0;
  double lambda = 0.0;        // <= 0: default_lambda per x
};

/// max over grid pairs of |int p(s,x;r,z) p(r,z;t,y) dz - p(s,x;t,y)| / p^_lambda(s,x;t,y)
/// with p from density_series. Requires s < r < t.
double ck_residual(const ModelSpec& model, double s, double r, double t, const QueryGrid& grid,
                   const CkOptions& opts = {});

struct ReproductionReport {
  double C = 0.0;       // C_3
  double kappa = 1.0;   // kappa_7
  double lambda = 1.0;
  int points = 0;
  std::vector<double> ratios;  // conv / p^_lambda(s,x;t,y) per point
};

/// Sandwich C^{-1} p^_{lambda/kappa} <= int p^_lambda p^_lambda dz <= C p^_{kappa lambda}
/// over all (x, y, r) in the grid; kappa chosen from a fixed ladder to minimize C.
ReproductionReport reproduction_bounds(const ModelSpec& model, double lambda, double s, double t,
                                       const QueryGrid& grid, const std::vector<double>& rs,
                                       int space_nodes = 24, double half_width = 8.0);

}  // namespace kk
