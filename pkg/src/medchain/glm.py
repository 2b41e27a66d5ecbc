"""Least squares and Poisson IRLS fits shared by the priors and the baselines."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class GlmResult:
    coef: np.ndarray
    cov: np.ndarray
    sigma2: float  # residual variance (normal) or 1.0 (Poisson)
    df_resid: int
    ridge: float = 0.0
    iterations: int = 0


def _ridge_for(xtx: np.ndarray) -> float:
    p = xtx.shape[0]
    if np.linalg.matrix_rank(xtx) == p and np.linalg.cond(xtx) < 1e12:
        return 0.0
    return 1e-6 * max(np.trace(xtx) / p, 1e-12)


def ols(X: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None) -> GlmResult:
    """Ordinary (optionally weighted) least squares with a ridge fallback on singular designs."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, float)
    n, p = X.shape
    xtx = X.T @ (w[:, None] * X)
    ridge = _ridge_for(xtx)
    if ridge:
        warnings.warn(f"singular design ({n}x{p}); using ridge {ridge:.3g}", RuntimeWarning, stacklevel=2)
    A = xtx + ridge * np.eye(p)
    coef = np.linalg.solve(A, X.T @ (w * y))
    resid = y - X @ coef
    df = max(n - p, 1)
    sigma2 = float(np.sum(w * resid**2) / df)
    cov = sigma2 * np.linalg.inv(A)
    return GlmResult(coef=coef, cov=0.5 * (cov + cov.T), sigma2=sigma2, df_resid=df, ridge=ridge)


def poisson_irls(
    X: np.ndarray,
    y: np.ndarray,
    offset: np.ndarray | None = None,
    max_iter: int = 100,
    tol: float = 1e-10,
    penalty: np.ndarray | None = None,
) -> GlmResult:
    """Poisson log-linear MLE with ``log(offset)`` entering the linear predictor.

    ``penalty`` is an optional ``(p, p)`` quadratic penalty added to the
    information matrix (used by the penalized spline baseline).
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    n, p = X.shape
    logoff = np.zeros(n) if offset is None else np.log(np.asarray(offset, float))
    P = np.zeros((p, p)) if penalty is None else np.asarray(penalty, float)
    rate = (y.sum() + 0.5) / np.exp(logoff).sum()
    coef = np.zeros(p)
    const = np.flatnonzero(np.all(X == X[:1], axis=0) & (X[0] != 0))
    if const.size:
        coef[const[0]] = np.log(rate) / X[0, const[0]]
    ridge = None
    for it in range(1, max_iter + 1):
        eta = np.clip(X @ coef + logoff, -50, 50)
        mu = np.exp(eta)
        info = X.T @ (mu[:, None] * X) + P
        if ridge is None:
            ridge = _ridge_for(info)
            if ridge:
                warnings.warn(f"singular Poisson design ({n}x{p}); using ridge {ridge:.3g}", RuntimeWarning, stacklevel=2)
        grad = X.T @ (y - mu) - P @ coef
        step = np.linalg.solve(info + ridge * np.eye(p), grad)
        # step halving keeps the deviance from increasing on awkward starts
        ll_old = float(y @ eta - mu.sum() - 0.5 * coef @ P @ coef)
        t = 1.0
        for _ in range(30):
            cand = coef + t * step
            eta_c = np.clip(X @ cand + logoff, -50, 50)
            ll_new = float(y @ eta_c - np.exp(eta_c).sum() - 0.5 * cand @ P @ cand)
            if ll_new >= ll_old - 1e-12 * abs(ll_old):
                break
            t *= 0.5
        coef = cand
        if np.max(np.abs(t * step)) < tol * (1.0 + np.max(np.abs(coef))):
            mu = np.exp(np.clip(X @ coef + logoff, -50, 50))
            info = X.T @ (mu[:, None] * X) + P + ridge * np.eye(p)
            cov = np.linalg.inv(info)
            return GlmResult(coef=coef, cov=0.5 * (cov + cov.T), sigma2=1.0, df_resid=max(n - p, 1),
                             ridge=ridge, iterations=it)
    raise ConvergenceError(f"Poisson IRLS did not converge in {max_iter} iterations (n={n}, p={p})")
