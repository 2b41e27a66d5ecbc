"""Small builders shared by several test modules."""

from __future__ import annotations

import numpy as np

from medchain.dgp import DgpConfig
from medchain.panel import Panel


def linear_gaussian_cfg(n=2000, T=1, bz_m=-0.8, g_m=0.6, g_z=-0.4, **extra) -> DgpConfig:
    """One-step linear-Gaussian reduction: identity outcome, no interactions, no older lags."""
    coefs = {
        "W": {"intercept": 0.0, "V": [0.5, -0.3], "lags": {"M": 0.3, "Z": -0.3, "W": 0.5}},
        "M": {"intercept": 0.5, "V": [0.4, 0.2], "lags": {"M": 0.5, "Z": bz_m, "W": 0.3}},
        "Y": {"intercept": 1.0, "V": [0.2, -0.1], "lags": {"M": g_m, "Z": g_z, "Y": 0.2, "W": 0.1},
              "MZ": 0.0, "MW": 0.0},
        "Z": {"intercepts": [0.0, -0.3, -0.3, -0.3], "V": [0.3, -0.2], "lags": {"Z": 1.0, "W": 0.2}},
    }
    kw = dict(n=n, T=T, case="none", lag_decay=0.0, outcome_family="gaussian", outcome_sd=1.0,
              skew_shape=0.0, coefficients=coefs)
    kw.update(extra)
    return DgpConfig.default(**kw)


def make_panel(Z, W, M, Y, offset=None, V=None, Y0=None, M0=None, W0=None, outcome="count") -> Panel:
    Z = np.asarray(Z)
    n, T = Z.shape
    return Panel(
        unit_id=np.array([f"u{i}" for i in range(n)], dtype=object),
        Z=Z, W=np.asarray(W, float), M=np.asarray(M, float), Y=np.asarray(Y),
        offset=np.ones((n, T)) if offset is None else np.asarray(offset, float),
        V=np.zeros((n, 1)) if V is None else np.asarray(V, float),
        Y0=np.zeros(n, dtype=np.int64) if Y0 is None else np.asarray(Y0),
        M0=np.zeros(n) if M0 is None else np.asarray(M0, float),
        W0=np.zeros(n) if W0 is None else np.asarray(W0, float),
        outcome=outcome,
    )


def raw_cluster_mean(fit, col: int) -> np.ndarray:
    """Per-draw count-weighted mean of one raw-scale cluster coefficient."""
    R = fit.to_raw
    out = np.empty(fit.n_draws)
    for r in range(fit.n_draws):
        beta, _, counts = fit.clusters(r)
        out[r] = (beta @ R.T)[:, col] @ counts / counts.sum()
    return out
