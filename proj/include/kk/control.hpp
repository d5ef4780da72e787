#pragma once

#include <ostream>
#include <vector>

#include "kk/flow.hpp"

namespace kk {

struct ControlOptions {
  double tol = 1e-8;          // on the scaled trajectory change and the terminal error
  int max_iterations = 60;
  double ode_tol = 1e-12;
  double split_contraction = 0.9;  // bisect the interval above this contraction estimate
  int max_split_depth = 6;
  int max_polish = 8;
  int samples = 257;          // points of the stored control and state paths
  int u_nodes = 8;            // Gauss-Legendre nodes for the averaged gradient of F2
};

/// Steering control of dphi = F(r, phi) dr + B varphi_r dr from (s, x) to (t, y),
/// B = (I, 0)^T. The energy is that of this control, an upper bound for the
/// minimal energy; optimality is not claimed for nonlinear drifts.
struct ControlSolution {
  double s = 0.0, t = 0.0;
  std::vector<double> times;
  std::vector<Vec> control;  // varphi_r, size d
  std::vector<Vec> state;    // phi_{r,s}, size 2d
  double energy = 0.0;       // (int |varphi|^2)^{1/2}
  double terminal_error = 0.0;  // |T^{-1}_{t-s}(phi_t - y)|
  double sup_control = 0.0;
  int iterations = 0;
  int polish_steps = 0;
  int splits = 0;
  double contraction = 0.0;  // last ratio of successive trajectory changes
  bool optimal = false;      // true only for drifts affine in x with constant coefficients

  /// time, varphi_1..varphi_d, x1_1..x1_d, x2_1..x2_d; 17 significant digits.
  void write_csv(std::ostream& out) const;
};

/// Raised when the iteration neither converges nor can split further.
class ControlError : public NumericError {
 public:
  ControlError(const std::string& what, ControlSolution last, double contraction)
      : NumericError(what, last.terminal_error), last_(std::move(last)), contraction_(contraction) {}
  const ControlSolution& last_iterate() const { return last_; }
  double contraction() const { return contraction_; }

 private:
  ControlSolution last_;
  double contraction_;
};

/// Fixed-point construction on psi = phi - theta, theta the free flow from (s, x):
/// each iterate freezes the averaged gradient of F2 and the nonlinear remainder
/// along the previous psi, and takes the Gramian control of that linear system.
ControlSolution solve_control(const ModelSpec& model, double s, const PhasePoint& x, double t,
                              const PhasePoint& y, const ControlOptions& opts = {});

/// Minimal energy <K^{-1} w, w>^{1/2} of the linear kinetic system with
/// F1 = 0, F2 = G x1 (G constant), w = y - theta_{t,s}(x).
double lq_energy(const Mat& G, double s, const PhasePoint& x, double t, const PhasePoint& y);

struct EnergyEquivalence {
  double I = 0.0;       // achieved energy
  double D = 0.0;       // |T^{-1}_{t-s}(theta_{t,s}(x) - y)|
  double ratio = 0.0;   // I / (D + 1)
  double lower = 0.0;   // (D - 1) / I, 0 when I = 0 and D <= 1
  double control_bound = 0.0;  // sup |varphi| sqrt(t-s) / (D + 1)
  double terminal_error = 0.0;
};

EnergyEquivalence energy_equivalence(const ModelSpec& model, double s, const PhasePoint& x,
                                     double t, const PhasePoint& y, const ControlOptions& opts = {});

struct ControlCase {
  double s = 0.0, t = 1.0;
  PhasePoint x, y;
};

struct EnergyBatch {
  double kappa5 = 1.0;  // max over cases of max(I/(D+1), (D-1)/I), at least 1
  double kappa6 = 1.0;  // max over cases of sup|varphi| sqrt(t-s)/(D+1), at least 1
  int cases = 0;
  int violations = 0;   // failures or terminal error above tolerance
  std::vector<EnergyEquivalence> results;
};

/// Parallel over cases; results are stored per case so the batch is deterministic.
EnergyBatch energy_batch(const ModelSpec& model, const std::vector<ControlCase>& cases,
                         const ControlOptions& opts = {});

}  // namespace kk
