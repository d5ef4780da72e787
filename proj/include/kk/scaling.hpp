#pragma once

#include <functional>

#include "kk/coefficients.hpp"

namespace kk {

/// Intrinsic rescaling around time s:
///   F^{l,s}(t, x) = l T_l^{-1} F(s + l t, T_l x),  sigma^{l,s}(t, x) = sigma(s + l t, T_l x).
/// If X solves the model then T_l^{-1} X_{s + l t} solves the rescaled one.
ModelSpec rescale_model(const ModelSpec& model, double lambda, double s);

/// Transition density p(s, x; t, y).
using DensityFn =
    std::function<double(double s, const PhasePoint& x, double t, const PhasePoint& y)>;

/// Change of variables back from the rescaled density:
///   p(s, x; t, y) = l^{-2d} p^{l,s}(0, T_l^{-1} x; (t - s)/l, T_l^{-1} y).
double density_from_rescaled(const DensityFn& rescaled, double lambda, double s,
                             const PhasePoint& x, double t, const PhasePoint& y);

}  // namespace kk
