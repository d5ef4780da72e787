"""Kinetic diffusion densities: frozen Gaussians, parametrix series, steering
controls and Monte Carlo audits. Thin wrapper over the compiled core."""

from ._pykk import (  # noqa: F401
    DomainError,
    Model,
    NumericError,
    __version__,
    density_series,
    flow_gap,
    flow_point,
    frozen_density,
    grad_density,
    gram,
    holder_model,
    kde,
    kernel_H,
    kolmogorov_model,
    lq_energy,
    model_by_name,
    rate_fit,
    resolvent,
    run_experiment,
    simulate,
    solve_control,
    sup_gradient_series,
    tilde_flow_point,
)
