"""Dirichlet-process-mixture regression engine."""

from __future__ import annotations

from .model import (
    DpmFit,
    DpPrior,
    Mcmc,
    McmcConfigError,
    fit_normal_dpm,
    fit_poisson_dpm,
    load_fit,
    posterior_predictive,
    save_fit,
)

__all__ = [
    "DpmFit", "DpPrior", "Mcmc", "McmcConfigError", "fit_normal_dpm", "fit_poisson_dpm",
    "load_fit", "posterior_predictive", "save_fit",
]
