#include "kk/scaling.hpp"

#include <cmath>

namespace kk {

ModelSpec rescale_model(const ModelSpec& model, double lambda, double s) {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw DomainError("rescale_model: lambda must be positive");
  validate_model(model);
  ModelSpec m = model;
  m.name = model.name + "^rescaled";
  const double l = lambda;
  const double rl = std::sqrt(l);
  auto up = [l](const PhasePoint& x) { return scale_map(l, x, ScaleDirection::Forward); };
  VecField f1 = model.F1, f2 = model.F2;
  MatField sg = model.sigma;
  m.F1 = [=](double t, const PhasePoint& x) { return Vec(rl * f1(s + l * t, up(x))); };
  m.F2 = [=](double t, const PhasePoint& x) { return Vec(f2(s + l * t, up(x)) / rl); };
  m.sigma = [=](double t, const PhasePoint& x) { return sg(s + l * t, up(x)); };
  if (model.grad_x1_F2) {
    MatField g = model.grad_x1_F2;
    m.grad_x1_F2 = [=](double t, const PhasePoint& x) { return g(s + l * t, up(x)); };
  } else {
    m.grad_x1_F2 = nullptr;
  }
  m.meta.horizon = model.meta.horizon / l;
  return m;
}

double density_from_rescaled(const DensityFn& rescaled, double lambda, double s,
                             const PhasePoint& x, double t, const PhasePoint& y) {
  const int d = phase_dim(x);
  const PhasePoint xs = scale_map(lambda, x, ScaleDirection::Inverse);
  const PhasePoint ys = scale_map(lambda, y, ScaleDirection::Inverse);
  return std::pow(lambda, -2.0 * d) * rescaled(0.0, xs, (t - s) / lambda, ys);
}

}  // namespace kk
