#pragma once

#include <functional>
#include <ostream>
#include <vector>

#include "kk/coefficients.hpp"

namespace kk {

struct OdeOptions {
  double rtol = 1e-10;
  double atol = 1e-10;
  double max_step = 0.0;  // 0 = unbounded
  long max_steps = 2'000'000;
};

/// dy = f(t, y). Writes the derivative into `dy` (already sized).
using OdeRhs = std::function<void(double t, const Vec& y, Vec& dy)>;

/// Accepted nodes of an adaptive integration with cubic Hermite dense output.
/// Times are strictly monotone in the direction of integration.
class DenseTrajectory {
 public:
  DenseTrajectory() = default;
  DenseTrajectory(std::vector<double> t, std::vector<Vec> y, std::vector<Vec> f);

  double start_time() const { return t_.front(); }
  double end_time() const { return t_.back(); }
  const Vec& start() const { return y_.front(); }
  const Vec& end() const { return y_.back(); }
  size_t size() const { return t_.size(); }
  const std::vector<double>& times() const { return t_; }
  const std::vector<Vec>& states() const { return y_; }
  const std::vector<Vec>& slopes() const { return f_; }

  /// Dense value at r inside the covered span; exact at nodes.
  Vec at(double r) const;

 private:
  std::vector<double> t_;
  std::vector<Vec> y_;
  std::vector<Vec> f_;
};

/// Dormand-Prince 5(4) with step control on max_i |err_i| / (atol + rtol |y_i|).
/// t1 < t0 integrates backward. Step underflow raises IntegrationError.
DenseTrajectory integrate_ode(const OdeRhs& rhs, double t0, double t1, const Vec& y0,
                              const OdeOptions& opts = {});

struct FlowOptions {
  double tol = 1e-10;
};

/// theta_{r,s}(x) for r between s and t.
class FlowTrajectory {
 public:
  FlowTrajectory() = default;
  FlowTrajectory(double s, PhasePoint x, DenseTrajectory path);

  double anchor_time() const { return s_; }
  const PhasePoint& anchor() const { return x_; }
  int interpolation_order() const { return 3; }
  const DenseTrajectory& path() const { return path_; }
  PhasePoint at(double r) const { return path_.at(r); }
  const PhasePoint& end() const { return path_.end(); }

  /// CSV with header time,x1_1..x1_d,x2_1..x2_d.
  void write_csv(std::ostream& out) const;

 private:
  double s_ = 0.0;
  PhasePoint x_;
  DenseTrajectory path_;
};

/// Flow of an arbitrary drift field from (s, x) to time t (t < s runs backward
/// on the time-reversed field).
FlowTrajectory integrate_drift(const DriftField& F, double s, double t, const PhasePoint& x,
                               const FlowOptions& opts = {});

/// theta_{t,s}(x) for the model drift, as a trajectory.
FlowTrajectory integrate_flow(const ModelSpec& model, double s, double t, const PhasePoint& x,
                              const FlowOptions& opts = {});

/// End point theta_{t,s}(x).
PhasePoint flow_point(const ModelSpec& model, double s, double t, const PhasePoint& x,
                      const FlowOptions& opts = {});

/// Flow map object for proxy_p_hat and friends.
FlowMap flow_map(const ModelSpec& model, const FlowOptions& opts = {});

/// Flow of the two-scale mollified drift anchored at s. Requires t >= s.
FlowTrajectory tilde_flow(const ModelSpec& model, double s, double t, const PhasePoint& x,
                          const FlowOptions& opts = {}, const TildeOptions& topts = {});

/// |T_{t-s}^{-1}(theta^{(eps)}_{t,s}(x) - theta~_{t,s}(x))|. Requires eps <= (t-s)^{3/2}.
double flow_gap(const ModelSpec& model, double s, double t, const PhasePoint& x, double eps,
                const FlowOptions& opts = {}, const TildeOptions& topts = {});

/// Quantities of the two-sided flow comparison:
///   lhs = |T_{t-s}^{-1}(x - theta_{r,t}(y))|, mid = |T_{t-s}^{-1}(theta_{t,r}(x) - y)|,
///   rhs = lhs + 1, so that kappa^{-1}(lhs - 1) <= mid <= kappa rhs.
struct FlowEquivalence {
  double lhs = 0.0;
  double mid = 0.0;
  double rhs = 0.0;
  /// Smallest kappa >= 1 consistent with this sample.
  double kappa() const;
};

FlowEquivalence flow_equivalence_ratio(const ModelSpec& model, double s, double r, double t,
                                       const PhasePoint& x, const PhasePoint& y,
                                       const FlowOptions& opts = {});

/// Closed-form sublinear Gronwall bound for f' <= c1 f^alpha + c2 f:
/// e^{c2 t} f0 + (c1 e^{c2 t} (1 - alpha) t)^{1/(1-alpha)}.
/// Valid for f0 = 0; with f0 > 0 and alpha > 0 it can undershoot the solution
/// and needs the factor 2^{alpha/(1-alpha)} (see bihari_bound).
double gronwall_bound(double c1, double c2, double alpha, double f0, double t);

/// Sharp bound e^{c2 t} (f0^{1-alpha} + c1 (1 - alpha) t)^{1/(1-alpha)}, attained
/// by the comparison ODE when c2 = 0.
double bihari_bound(double c1, double c2, double alpha, double f0, double t);

/// Numerical solution of f' = c1 f^alpha + c2 f, f(0) = f0 >= 0.
double gronwall_solution(double c1, double c2, double alpha, double f0, double t,
                         const OdeOptions& opts = {});

}  // namespace kk
