"""Comparator estimators: full-history and one-step regressions, a penalized
additive-spline model, and DPM fits without dynamic prior propagation.

All of them produce a :class:`~medchain.conditionals.FittedSystem`, so the
same forward-simulation effect computation applies to every estimator.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.interpolate import BSpline

from . import design as dz
from . import glm
from .conditionals import FittedSystem, ParametricConditional
from .dpm.model import DpPrior, Mcmc
from .dynamics import MODEL_CODES, _cells, cell_data, check_arms, sequential_fit
from .estimands import Contrast, EffectEstimate, effects
from .panel import Panel

log = logging.getLogger(__name__)

KINDS = {"reg1": dz.FULL, "reg2": dz.ONE_STEP, "gam": dz.ONE_STEP}
LAMBDA_GRID = tuple(np.logspace(-2, 4, 7))
N_INTERIOR = 4


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """Linear terms plus linear-orthogonalized cubic B-splines for selected columns.

    Interior knots sit at the training quintiles; inputs are clipped to the
    training range before evaluation.
    """

    p_raw: int
    cols: np.ndarray
    knots: np.ndarray  # (len(cols), n_knots) full knot vectors
    lo: np.ndarray
    hi: np.ndarray
    proj: np.ndarray  # (len(cols), 2, n_basis) coefficients of each basis on [1, x]

    @classmethod
    def fit(cls, X: np.ndarray, cols: Sequence[int]) -> "SplineBasis":
        cols = np.asarray(cols, int)
        knots, projs = [], []
        lo = X[:, cols].min(axis=0)
        hi = X[:, cols].max(axis=0)
        for j, c in enumerate(cols):
            x = X[:, c]
            interior = np.quantile(x, np.linspace(0, 1, N_INTERIOR + 2)[1:-1])
            span = max(hi[j] - lo[j], 1e-12)
            interior = np.clip(interior, lo[j] + 1e-6 * span, hi[j] - 1e-6 * span)
            t = np.concatenate([[lo[j]] * 4, np.sort(interior), [hi[j] + 1e-9 * span] * 4])
            knots.append(t)
            B = _bspline(x, t)
            L = np.column_stack([np.ones_like(x), x])
            projs.append(np.linalg.lstsq(L, B, rcond=None)[0])
        return cls(p_raw=X.shape[1], cols=cols, knots=np.array(knots), lo=lo, hi=hi, proj=np.array(projs))

    @property
    def n_spline(self) -> int:
        return len(self.cols) * (self.knots.shape[1] - 4)

    def transform(self, X: np.ndarray) -> np.ndarray:
        lead = X.shape[:-1]
        flat = X.reshape(-1, X.shape[-1])
        out = [flat]
        for j, c in enumerate(self.cols):
            x = np.clip(flat[:, c], self.lo[j], self.hi[j])
            B = _bspline(x, self.knots[j])
            out.append(B - np.column_stack([np.ones_like(x), x]) @ self.proj[j])
        res = np.concatenate(out, axis=1)
        return res.reshape(lead + (res.shape[1],))

    def penalty(self, lam: float) -> np.ndarray:
        d = self.p_raw + self.n_spline
        P = np.zeros((d, d))
        idx = np.arange(self.p_raw, d)
        P[idx, idx] = lam
        return P

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"p_raw": np.array(self.p_raw), "cols": self.cols, "knots": self.knots, "lo": self.lo,
                "hi": self.hi, "proj": self.proj}

    @classmethod
    def from_arrays(cls, a: dict[str, np.ndarray]) -> "SplineBasis":
        return cls(p_raw=int(a["p_raw"]), cols=np.asarray(a["cols"], int), knots=a["knots"], lo=a["lo"],
                   hi=a["hi"], proj=a["proj"])


def _bspline(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    x = np.clip(x, t[0], np.nextafter(t[-1], -np.inf))
    nb = len(t) - 4
    return BSpline(t, np.eye(nb), 3, extrapolate=False)(x)


@dataclass(frozen=True, eq=False)
class ParametricFit:
    kind: str
    model: str
    t: int
    arm: int
    family: str
    coef: np.ndarray
    cov: np.ndarray
    sigma2: float
    df_resid: int
    columns: tuple[str, ...]
    basis: SplineBasis | None = None
    lam_ridge: float = 0.0
    n: int = 0


def _penalized_normal(X, y, P):
    n, p = X.shape
    A = X.T @ X + P
    ridge = glm._ridge_for(A)
    if ridge:
        warnings.warn(f"singular design ({n}x{p}); using ridge {ridge:.3g}", RuntimeWarning, stacklevel=3)
    A = A + ridge * np.eye(p)
    Ainv = np.linalg.inv(A)
    coef = Ainv @ (X.T @ y)
    rss = float(np.sum((y - X @ coef) ** 2))
    edf = float(np.trace(Ainv @ (X.T @ X)))
    return coef, Ainv, rss, edf


def _gcv(n, dev, edf):
    return np.inf if n - edf <= 0.5 else n * dev / (n - edf) ** 2


def _fit_gam(X, y, off, family, cols, grid):
    basis = SplineBasis.fit(X, cols)
    Xb = basis.transform(X)
    n = len(y)
    best = None
    for lam in grid:
        P = basis.penalty(lam)
        if family == "normal":
            coef, Ainv, rss, edf = _penalized_normal(Xb, y, P)
            score = _gcv(n, rss, edf)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = glm.poisson_irls(Xb, y, off, penalty=P)
            mu = off * np.exp(np.clip(Xb @ res.coef, -50, 50))
            edf = float(np.trace(res.cov @ (Xb.T @ (mu[:, None] * Xb))))
            score = _gcv(n, poisson_deviance(y, mu), edf)
        if best is None or score < best[0]:
            best = (score, lam)
    lam = best[1]
    P = basis.penalty(lam)
    if family == "normal":
        coef, Ainv, rss, edf = _penalized_normal(Xb, y, P)
        df = max(int(round(n - edf)), 1)
        s2 = rss / df
        return basis, lam, coef, s2 * Ainv, s2, df
    res = glm.poisson_irls(Xb, y, off, penalty=P)
    return basis, lam, res.coef, res.cov, 1.0, res.df_resid


def poisson_deviance(y: np.ndarray, mu: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(y > 0, y * np.log(y / mu), 0.0)
    return float(2.0 * np.sum(term - (y - mu)))


def fit_baseline(
    panel: Panel,
    kind: str,
    t: int,
    arm: int,
    model: str = "Y",
    prefix: Sequence[int] | None = None,
    c: float = 0.1,
    lam_grid: Sequence[float] = LAMBDA_GRID,
) -> ParametricFit:
    """Fit one comparator conditional on the regime subset of (t, arm).

    ``kind`` is ``reg1`` (all past predictors), ``reg2`` (one-step lags) or
    ``gam`` (one-step lags with penalized splines of the time-varying inputs).
    """
    if kind not in KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}; known: {sorted(KINDS)}")
    prefix = tuple(prefix) if prefix is not None else (0,) * panel.T
    X, y, off, mask = cell_data(panel, model, t, arm, prefix, KINDS[kind], c)
    if mask.sum() == 0:
        raise ValueError(f"empty subset for model={model} t={t} arm={arm} under prefix {prefix}")
    family = "poisson" if (model == "Y" and panel.outcome == "count") else "normal"
    cols = tuple(dz.columns(model, t, KINDS[kind], panel.v_names))
    if kind == "gam":
        tv = dz.time_varying(model, t, dz.ONE_STEP, panel.V.shape[1])
        basis, lam, coef, cov, s2, df = _fit_gam(X, y, off, family, tv, lam_grid)
        return ParametricFit(kind, model, t, arm, family, coef, cov, s2, df, cols, basis, lam, len(y))
    if family == "normal":
        res = glm.ols(X, y)
    else:
        res = glm.poisson_irls(X, y, off)
    return ParametricFit(kind, model, t, arm, family, res.coef, res.cov, res.sigma2, res.df_resid, cols, None,
                         res.ridge, len(y))


def draw_conditional(fit: ParametricFit, n_draws: int, rng: np.random.Generator) -> ParametricConditional:
    """Normal-theory posterior draws: ``sigma^2 = RSS / chi2_df`` and ``beta ~ N(hat, cov * sigma^2 / s^2)``."""
    p = len(fit.coef)
    w, v = np.linalg.eigh(0.5 * (fit.cov + fit.cov.T))
    root = v * np.sqrt(np.clip(w, 0.0, None))
    z = rng.standard_normal((n_draws, p))
    if fit.family == "normal":
        sig2 = fit.sigma2 * fit.df_resid / rng.chisquare(fit.df_resid, n_draws)
        beta = fit.coef + np.sqrt(sig2 / fit.sigma2)[:, None] * (z @ root.T)
    else:
        sig2 = np.ones(n_draws)
        beta = fit.coef + z @ root.T
    return ParametricConditional(fit.family, fit.coef, fit.cov, beta, sig2, fit.basis)


def fit_parametric(
    panel: Panel,
    kind: str,
    prefix: Sequence[int] | None = None,
    T: int | None = None,
    n_draws: int = 200,
    seed: int = 0,
    c: float = 0.1,
) -> FittedSystem:
    """Fit every comparator conditional needed for final-time-switch contrasts."""
    T = panel.T if T is None else T
    prefix = tuple(prefix) if prefix is not None else (0,) * T
    check_arms(panel, prefix, T)
    cells = {}
    for model, t, arm in _cells(T):
        f = fit_baseline(panel, kind, t, arm, model, prefix, c)
        rng = np.random.default_rng([int(seed), t, MODEL_CODES[model], arm + 1, 99])
        cells[(model, t, arm)] = draw_conditional(f, n_draws, rng)
    family = "poisson" if panel.outcome == "count" else "gaussian"
    return FittedSystem(label=kind, kind=KINDS[kind], family=family, T=T, prefix=prefix, cells=cells, c=c,
                        meta={"seed": seed, "n_draws": n_draws})


def effects_parametric(system: FittedSystem, contrast: Contrast, panel: Panel, n_mc: int = 1000,
                       seed: int = 0) -> EffectEstimate:
    """Plug-in effects for a comparator system (same computation as the DPM estimators)."""
    return effects(system, panel, contrast, n_mc, seed)


def bnp_static(panel: Panel, prior: DpPrior | None = None, mcmc: Mcmc | None = None, seed: int = 0,
               prefix: Sequence[int] | None = None, T: int | None = None, c: float = 0.1) -> FittedSystem:
    """Independent DPM fits at every (model, t, arm) with the static prior."""
    return sequential_fit(panel, prefix, prior, mcmc, seed, T, dynamic=False, c=c)


def fit_model(label: str, panel: Panel, seed: int = 0, mcmc: Mcmc | None = None, prior: DpPrior | None = None,
              prefix: Sequence[int] | None = None, T: int | None = None, n_draws: int = 200) -> FittedSystem:
    """Dispatch by estimator label: reg1, reg2, gam, bnp, bnp_bdm."""
    if label in KINDS:
        return fit_parametric(panel, label, prefix, T, n_draws, seed)
    if label == "bnp":
        return bnp_static(panel, prior, mcmc, seed, prefix, T)
    if label == "bnp_bdm":
        return sequential_fit(panel, prefix, prior, mcmc, seed, T, dynamic=True)
    raise ValueError(f"unknown model {label!r}; known: reg1, reg2, gam, bnp, bnp_bdm")


__all__ = [
    "SplineBasis", "ParametricFit", "fit_baseline", "fit_parametric", "effects_parametric", "bnp_static",
    "fit_model", "draw_conditional", "poisson_deviance",
]
