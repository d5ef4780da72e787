#pragma once

#include <vector>

#include "kk/flow.hpp"

namespace kk {

struct FrozenOptions {
  double tol = 1e-11;          // flow integration tolerance
  int gl_nodes_per_unit = 16;  // Gauss-Legendre nodes per unit time for the Gram matrix
};

/// Gaussian density of the frozen linear dynamics over (s, t):
///   mean(x) = theta_t + R (x - theta_s), covariance K,
/// with theta the frozen flow and R its resolvent. Immutable; derivatives are
/// exact Gaussian derivatives in x with the freezing point held fixed.
class FrozenGaussian {
 public:
  FrozenGaussian(double s, double t, PhasePoint theta_s, PhasePoint theta_t, Mat R, Mat K);

  double s() const { return s_; }
  double t() const { return t_; }
  int dim() const { return d_; }
  const PhasePoint& theta_s() const { return theta_s_; }
  const PhasePoint& theta_t() const { return theta_t_; }
  const Mat& resolvent() const { return R_; }
  const Mat& gram() const { return K_; }
  /// T^{-1} K T^{-1} with T the scale matrix of t - s.
  const Mat& scaled_gram() const { return Khat_; }
  const Mat& gram_inverse() const { return Kinv_; }
  double log_det_gram() const { return logdet_; }

  PhasePoint mean(const PhasePoint& x) const;
  /// x in the pre-image of a mean, i.e. mean^{-1}(y) = theta_s + R^{-1}(y - theta_t).
  PhasePoint mean_preimage(const PhasePoint& y) const;

  double density(const PhasePoint& x, const PhasePoint& y) const;

  /// d^{j1}_{x1} d^{j2}_{x2} of the density, j1 <= 2, j2 <= 1, flattened row-major
  /// over the d^{j1 + j2} index tuples with x1 indices first.
  Vec derivative(const PhasePoint& x, const PhasePoint& y, int j1, int j2) const;

  /// sup over y of the Euclidean norm of derivative(x, y, j1, j2); independent of x.
  double sup_derivative(int j1, int j2) const;

 private:
  double s_, t_;
  int d_;
  PhasePoint theta_s_, theta_t_;
  Mat R_, K_, Khat_, Kinv_, P_;
  Eigen::LLT<Mat> llt_hat_;
  Vec scale_;
  double logdet_ = 0.0;
  double log_norm_ = 0.0;
};

/// Flow theta_{r,tau}(xi) over the hull of {tau, a, b} together with the running
/// integral M(r) = int_tau^r grad_x1 F2(u, theta_u) du. Keeps a pointer to the
/// model, which must outlive this object.
class FrozenFlow {
 public:
  FrozenFlow(const ModelSpec& model, double tau, const PhasePoint& xi, double a, double b,
             const FrozenOptions& opts = {});

  double tau() const { return tau_; }
  const PhasePoint& xi() const { return xi_; }
  PhasePoint theta(double r) const;
  Mat integrated_grad(double r) const;

  /// R_{t,s} = [[I, 0], [int_s^t grad_x1 F2, I]].
  Mat resolvent(double t, double s) const;
  /// K_{t,s} = int_s^t R_{t,r} B a_r B^T R_{t,r}^T dr, a = sigma sigma^T. Requires s < t.
  Mat gram(double s, double t) const;
  FrozenGaussian gaussian(double s, double t) const;

 private:
  Vec state_at(double r) const;

  const ModelSpec* model_;
  FrozenOptions opts_;
  double tau_;
  PhasePoint xi_;
  int d_;
  DenseTrajectory down_;  // tau -> lower end
  DenseTrajectory up_;    // tau -> upper end
};

Mat resolvent(const ModelSpec& model, double tau, const PhasePoint& xi, double s, double t,
              const FrozenOptions& opts = {});

/// Mean of the frozen dynamics started at (s, x), obtained by integrating the
/// linearized ODE  v' = F(r, theta_r) + A(r, theta_r)(v - theta_r) along the
/// flow theta anchored at (tau, xi).
PhasePoint frozen_mean(const ModelSpec& model, double tau, const PhasePoint& xi, double s,
                       double t, const PhasePoint& x, const FrozenOptions& opts = {});

Mat gram(const ModelSpec& model, double tau, const PhasePoint& xi, double s, double t,
         const FrozenOptions& opts = {});

/// Frozen density or derivative (see FrozenGaussian::derivative). Requires t > s.
Vec frozen_density(const ModelSpec& model, double tau, const PhasePoint& xi, double s,
                   const PhasePoint& x, double t, const PhasePoint& y, int j1 = 0, int j2 = 0,
                   const FrozenOptions& opts = {});

enum class Freezing {
  Backward,  // freeze at (s, x)
  Forward,   // freeze at (t, y)
};

double proxy_density(const ModelSpec& model, Freezing which, double s, const PhasePoint& x,
                     double t, const PhasePoint& y, const FrozenOptions& opts = {});

struct GramBounds {
  double c_low = 0.0;
  double c_high = 0.0;
};

/// min / max over probes of <K^{-1} p, p> / |T_{t-s}^{-1} p|^2.
GramBounds gram_equivalence(const ModelSpec& model, double tau, const PhasePoint& xi, double s,
                            double t, const std::vector<PhasePoint>& probes,
                            const FrozenOptions& opts = {});

/// Same bounds over all of R^{2d} (extreme eigenvalues of T K^{-1} T).
GramBounds gram_equivalence(const ModelSpec& model, double tau, const PhasePoint& xi, double s,
                            double t, const FrozenOptions& opts = {});

/// |d^{j}(p~_forward - p~_backward)(s,x;t,y)| / ((t-s)^{(gamma - j1 - 3 j2)/2} p^_lambda).
/// lambda <= 0 picks 2 lambda_max of the scaled backward Gram matrix.
double sensitivity_gap(const ModelSpec& model, double s, const PhasePoint& x, double t,
                       const PhasePoint& y, int j1 = 0, int j2 = 0, double lambda = 0.0,
                       const FrozenOptions& opts = {});

}  // namespace kk
