#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "kk/coefficients.hpp"

namespace kk {

/// Counter-based generator: output k of stream (seed, path, step) is a pure
/// function of those four numbers, so batches do not depend on scheduling.
class CounterRng {
 public:
  using result_type = std::uint64_t;
  CounterRng(std::uint64_t seed, std::uint64_t path, std::uint64_t step = 0);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }
  result_type operator()();

  /// Uniform on the open interval (0, 1).
  double uniform();
  /// Standard normal by Box-Muller; consumes two outputs per pair.
  double normal();

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t z);

enum class SimScheme {
  Euler,
  /// Coefficients frozen at the start of each step; the increment is the exact
  /// Gaussian of that linear system (exact for constant-coefficient models).
  ExactLinearSubstep,
};

SimScheme parse_scheme(const std::string& name);
std::string scheme_name(SimScheme s);

struct SimConfig {
  int nsteps = 400;
  long npaths = 10000;
  std::uint64_t seed = 1;
  SimScheme scheme = SimScheme::Euler;
  int workers = 0;  // 0 = worker_count()

  /// nsteps >= 1, npaths >= 1; DomainError names the field.
  void validate() const;
};

/// Terminal points of the finite paths, one column per path in path order.
struct SampleBatch {
  int d = 1;
  std::uint64_t seed = 0;
  int nsteps = 0;
  double span = 0.0;            // t - s
  Mat points;                   // 2d x kept
  long excluded = 0;            // paths that went non-finite
  std::vector<long> excluded_paths;

  long size() const { return static_cast<long>(points.cols()); }
};

/// Paths of the model SDE from (s, x) to t, noise on the first block only.
SampleBatch simulate(const ModelSpec& model, double s, const PhasePoint& x, double t,
                     const SimConfig& cfg);

/// Binary format: "KKMC1", u32 d, u64 npaths, u64 seed, u64 steps, then
/// little-endian f64 path-major (x1 then x2 per path).
void write_batch(std::ostream& out, const SampleBatch& batch);
SampleBatch read_batch(std::istream& in);

enum class Provenance { Kde, Parametrix, ClosedForm };
std::string provenance_name(Provenance p);

struct DensityEstimate {
  double value = 0.0;
  double std_error = 0.0;
  double h1 = 0.0, h2 = 0.0;  // bandwidths of the two blocks
  Provenance provenance = Provenance::Kde;
  double ess = 0.0;            // (sum k)^2 / sum k^2 of the kernel weights
};

struct KdeOptions {
  double h = 0.0;       // bandwidth factor; 0 picks 0.3 n^{-1/6}
  int bootstrap = 100;  // resamples for the standard error; 0 skips it
  std::uint64_t seed = 7;
};

double default_bandwidth(long npaths);

/// Gaussian product-kernel estimate with bandwidths h sqrt(span) on x1 and
/// h span^{3/2} on x2. DomainError on an empty sample or h < 0.
std::vector<DensityEstimate> kde(const Mat& samples, double span,
                                 const std::vector<PhasePoint>& queries,
                                 const KdeOptions& opts = {});

/// Central finite difference of the KDE over the initial point with common
/// random numbers, steps c sqrt(t-s) (x1) and c (t-s)^{3/2} (x2).
/// Returns the gradient in the block selected by `x1_block`.
Vec mc_grad_density(const ModelSpec& model, double s, const PhasePoint& x, double t,
                    const PhasePoint& y, bool x1_block, const SimConfig& cfg,
                    const KdeOptions& kopts = {}, double fd_factor = 0.1);

enum class FlowChoice {
  Tilde,      // two-scale mollified flow
  Mollified,  // flow of F * rho_eps with eps = (t-s)^{3/2}
  Raw,        // the starting point itself (negative control)
};

FlowChoice parse_flow_choice(const std::string& name);
std::string flow_choice_name(FlowChoice c);

struct AuditQuery {
  double s = 0.0, t = 1.0;
  PhasePoint x, y;
};

struct AuditOptions {
  FlowChoice flow = FlowChoice::Tilde;
  std::vector<double> lambdas{1, 1.5, 2, 3, 4, 6, 8, 12, 16, 24, 32};
  double c_max = 100.0;
  double z = 4.0;          // significance in standard errors
  double min_ess = 10.0;   // below this a query is flagged and skipped
  KdeOptions kde;
};

struct AuditPoint {
  AuditQuery query;
  PhasePoint center;        // the reference flow at t
  double density = 0.0;
  double std_error = 0.0;
  double ess = 0.0;
  bool flagged = false;     // insufficient effective sample size
  double upper_ratio = 0.0; // density / g_lambda0
  double lower_ratio = 0.0; // g_{1/lambda0} / density
  bool violation = false;
};

struct BoundReport {
  double C0 = 0.0;
  double lambda0 = 0.0;
  int violations = 0;
  int flagged = 0;
  bool capped = false;      // no lambda in the ladder met c_max
  std::vector<AuditPoint> points;
};

/// Smallest (C, lambda) over the ladder with C^{-1} g_{1/lambda} <= p <= C g_lambda
/// up to z standard errors at the unflagged points; C is capped at c_max and
/// points beyond the capped bounds count as violations. Pure in the points.
BoundReport fit_bounds(std::vector<AuditPoint> points, const AuditOptions& opts);

/// Simulates once per distinct (s, x, t), estimates the density at each y and
/// fits the bounds. Each group's seed is derived from sim.seed and the group
/// data, so a point's estimate does not depend on the rest of the grid.
BoundReport bound_audit(const ModelSpec& model, const std::vector<AuditQuery>& grid,
                        const SimConfig& sim, const AuditOptions& opts = {});

/// Center of the audit for the given flow choice.
PhasePoint audit_center(const ModelSpec& model, double s, const PhasePoint& x, double t,
                        FlowChoice choice);

/// Five scaled offsets v (|v| <= 4) along and across the elongated direction
/// of the Kolmogorov Gram matrix, each block filled with the same value.
std::vector<PhasePoint> default_audit_offsets(int d);

/// Queries y = theta~_{s+tau,s}(x) + T_tau v for every x, span tau and offset v.
/// Offsets with |v| > max_offset raise DomainError.
std::vector<AuditQuery> audit_grid(const ModelSpec& model, double s,
                                   const std::vector<PhasePoint>& xs,
                                   const std::vector<double>& spans,
                                   const std::vector<PhasePoint>& offsets, double max_offset = 4.0);

struct RateFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

/// OLS of log(value) on log(span). Needs >= 4 pairs over >= 3 dyadic levels
/// (DomainError); a zero spread of log spans raises NumericError.
RateFit rate_fit(const std::vector<std::pair<double, double>>& pairs);

/// sup over y of |d^{j} p~| for the frozen Gaussian from (s, x) over each span.
std::vector<std::pair<double, double>> sup_gradient_series(const ModelSpec& model, double s,
                                                           const PhasePoint& x,
                                                           const std::vector<double>& spans,
                                                           int j1, int j2);

}  // namespace kk
