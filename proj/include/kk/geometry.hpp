#pragma once

#include <functional>

#include <Eigen/Dense>

#include "kk/errors.hpp"

namespace kk {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// A point (x1, x2) of R^d x R^d stored stacked as a vector of size 2d.
/// x1 is the component driven by noise, x2 the degenerate one.
using PhasePoint = Eigen::VectorXd;

/// Component dimension d of a phase point. Throws if the size is odd or zero.
int phase_dim(const PhasePoint& x);

PhasePoint make_point(const Vec& x1, const Vec& x2);
PhasePoint make_point(double x1, double x2);

inline auto block1(const PhasePoint& x) { return x.head(x.size() / 2); }
inline auto block2(const PhasePoint& x) { return x.tail(x.size() / 2); }

/// Throws DomainError if x has odd size or non-finite entries.
void require_phase_point(const PhasePoint& x, const char* what = "phase point");

/// |x1| + |x2|^{1/3} with Euclidean norms per block.
double aniso_norm(const PhasePoint& x);

enum class ScaleDirection { Forward, Inverse };

/// Forward: (t^{1/2} x1, t^{3/2} x2). Inverse undoes it. Requires t > 0.
PhasePoint scale_map(double t, const PhasePoint& x, ScaleDirection dir);

/// Diagonal of the scale matrix for span t, size 2d.
Vec scale_diagonal(double t, int d);

/// t^{-2d} exp(-|T_t^{-1} x|^2 / (2 lambda)).
double gauss_g(double lambda, double t, const PhasePoint& x);

/// theta_{to,from}(x): image at time `to` of the flow started at (from, x).
using FlowMap = std::function<PhasePoint(double from, double to, const PhasePoint& x)>;

/// g_lambda(t - s, theta_{t,s}(x) - y).
double proxy_p_hat(double lambda, double s, double t, const PhasePoint& x,
                   const PhasePoint& y, const FlowMap& flow);

}  // namespace kk
