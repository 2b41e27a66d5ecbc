"""Sequential propagation of base-measure means between time points.

Each (model, arm) cell keeps a Monte Carlo summary of the posterior of its
base-measure mean: the retained draws ``theta`` plus the evolution
covariance. Moving to the next time point perturbs every draw with
``N(0, Sigma)``, moment-matches a multivariate normal to the perturbed set
and uses it as the prior of the next DPM fit.
"""

from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import design as dz
from .conditionals import W_ARM, DpmConditional, FittedSystem
from .dpm.model import DpmFit, DpPrior, Mcmc, fit_normal_dpm, fit_poisson_dpm, load_fit, save_fit
from .panel import Panel

log = logging.getLogger(__name__)

MODEL_CODES = {"W": 0, "M": 1, "Y": 2}
CHECKPOINT_ENV = "MEDCHAIN_CHECKPOINT_DIR"


class EmptyArmError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class StateSummary:
    """Monte Carlo summary of the base-measure mean posterior at one cell."""

    t: int
    model: str
    arm: int
    theta: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.theta.ndim != 2 or self.theta.shape[0] < 1:
            raise ValueError("theta must be a nonempty (n_t, d) array")
        d = self.theta.shape[1]
        if self.sigma.shape != (d, d):
            raise ValueError(f"sigma shape {self.sigma.shape} does not match dimension {d}")

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    @property
    def dim(self) -> int:
        return self.theta.shape[1]

    @classmethod
    def from_fit(cls, fit: DpmFit, t: int, model: str, arm: int) -> "StateSummary":
        theta = np.array(fit.A_raw, dtype=float)
        sigma = np.cov(theta, rowvar=False).reshape(theta.shape[1], theta.shape[1]) if len(theta) > 1 \
            else np.zeros((theta.shape[1],) * 2)
        return cls(t=t, model=model, arm=arm, theta=theta, sigma=0.5 * (sigma + sigma.T))

    def save(self, path: str | Path) -> None:
        np.savez(path, theta=self.theta, sigma=self.sigma,
                 header=np.array(json.dumps({"t": self.t, "model": self.model, "arm": self.arm})))

    @classmethod
    def load(cls, path: str | Path) -> "StateSummary":
        with np.load(path, allow_pickle=False) as z:
            h = json.loads(str(z["header"]))
            return cls(t=h["t"], model=h["model"], arm=h["arm"], theta=z["theta"], sigma=z["sigma"])


def _psd_repair(sigma: np.ndarray) -> np.ndarray:
    sigma = 0.5 * (sigma + sigma.T)
    w, v = np.linalg.eigh(sigma)
    if w.min() < -1e-12 * max(1.0, abs(w).max()):
        warnings.warn(f"evolution covariance not PSD (min eigenvalue {w.min():.3g}); clipping at 0",
                      RuntimeWarning, stacklevel=3)
    return w.clip(min=0.0), v


def evolve(prev: StateSummary, sigma: np.ndarray | None = None, seed=0) -> StateSummary:
    """Draw ``theta_i + N(0, sigma)`` for every stored draw; ``n_t`` is preserved."""
    sigma = prev.sigma if sigma is None else np.asarray(sigma, float)
    if sigma.shape != (prev.dim, prev.dim):
        raise ValueError(f"sigma shape {sigma.shape} does not match state dimension {prev.dim}")
    w, v = _psd_repair(sigma)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(prev.theta.shape)
    theta0 = prev.theta + (z * np.sqrt(w)) @ v.T
    return StateSummary(t=prev.t + 1, model=prev.model, arm=prev.arm, theta=theta0, sigma=sigma)


def fit_base_mvn(state: StateSummary) -> tuple[np.ndarray, np.ndarray]:
    """Moment-matched normal for the evolved draws, covariance regularized by eps*I."""
    theta = state.theta
    d = state.dim
    mean = theta.mean(axis=0)
    if state.n < d + 1:
        warnings.warn(f"only {state.n} draws for a {d}-dimensional normal", RuntimeWarning, stacklevel=2)
    if np.all(theta == theta[0]):
        warnings.warn("degenerate draws (all identical); base measure is a point mass", RuntimeWarning, stacklevel=2)
        return theta[0].copy(), np.zeros((d, d))
    cov = np.cov(theta, rowvar=False).reshape(d, d)
    cov = 0.5 * (cov + cov.T)
    eps = 1e-8 * np.trace(cov) / d
    return mean, cov + eps * np.eye(d)


def fit_seed(seed: int, t: int, model: str, arm: int) -> list[int]:
    return [int(seed), int(t), MODEL_CODES[model], int(arm) + 1]


def cell_data(panel: Panel, model: str, t: int, arm: int, prefix: Sequence[int], kind: str = dz.ONE_STEP,
              c: float = 0.1):
    """Design, response and offset for one cell, restricted to its regime subset."""
    mask = panel.regime_mask(t, prefix, None if arm == W_ARM else arm)
    family = "poisson" if panel.outcome == "count" else "gaussian"
    hist = {k: v[mask] for k, v in panel.history().items()}
    X = dz.design(model, t, hist, kind, family, c)
    y = dz.response(model, t, hist)
    return X, y, hist["offset"][:, t], mask


def check_arms(panel: Panel, prefix: Sequence[int], T: int, minimum: int = 2) -> None:
    problems = []
    for t in range(1, T + 1):
        counts = {arm: int(panel.regime_mask(t, prefix, arm).sum()) for arm in (0, 1)}
        if min(counts.values()) < minimum:
            problems.append(f"t={t}: arm sizes {counts}")
    if problems:
        raise EmptyArmError(
            f"regime prefix {tuple(prefix)} leaves fewer than {minimum} units in an arm: " + "; ".join(problems)
        )


def _fit_cell(panel, model, t, arm, prefix, prior, mcmc, seed, c):
    X, y, off, _ = cell_data(panel, model, t, arm, prefix, dz.ONE_STEP, c)
    s = fit_seed(seed, t, model, arm)
    if model == "Y" and panel.outcome == "count":
        return fit_poisson_dpm(X, y, off, prior=prior, mcmc=mcmc, seed=s)
    return fit_normal_dpm(X, y, prior=prior, mcmc=mcmc, seed=s)


def update_step(prev: StateSummary, panel: Panel, prefix: Sequence[int], prior: DpPrior | None = None,
                mcmc: Mcmc | None = None, seed: int = 0, c: float = 0.1) -> tuple[DpmFit, StateSummary]:
    """One evolution + updating step: uses only ``prev`` and the time ``prev.t + 1`` data."""
    prior = prior or DpPrior()
    mcmc = mcmc or Mcmc()
    t = prev.t + 1
    evolved = evolve(prev, prev.sigma, seed=fit_seed(seed, t, prev.model, prev.arm) + [1])
    mean, cov = fit_base_mvn(evolved)
    # a zero covariance pins the base mean exactly (the sampler's update is in Kalman form)
    fit = _fit_cell(panel, prev.model, t, prev.arm, prefix, prior.with_base(mean, cov), mcmc, seed, c)
    return fit, StateSummary.from_fit(fit, t, prev.model, prev.arm)


def _cells(T: int) -> Iterable[tuple[str, int, int]]:
    for t in range(1, T + 1):
        yield ("W", t, W_ARM)
        for arm in (0, 1):
            yield ("M", t, arm)
            yield ("Y", t, arm)


def _checkpoint_path(directory: Path, model: str, t: int, arm: int) -> tuple[Path, Path]:
    return directory / f"fit_{model}_t{t}_arm{arm}.npz", directory / f"state_{model}_t{t}_arm{arm}.npz"


def sequential_fit(
    panel: Panel,
    prefix: Sequence[int] | None = None,
    prior: DpPrior | None = None,
    mcmc: Mcmc | None = None,
    seed: int = 0,
    T: int | None = None,
    dynamic: bool = True,
    c: float = 0.1,
    checkpoint_dir: str | Path | None = None,
) -> FittedSystem:
    """Fit every (model, t, arm) DPM needed for final-time-switch contrasts.

    With ``dynamic`` the prior for each cell at ``t > 1`` comes from the
    evolved state of the same cell at ``t - 1``; otherwise every fit uses
    the static data-centred prior.
    """
    prior = prior or DpPrior()
    mcmc = mcmc or Mcmc()
    T = panel.T if T is None else T
    prefix = tuple(prefix) if prefix is not None else (0,) * T
    if len(prefix) < T - 1:
        raise ValueError(f"prefix {prefix} shorter than T-1={T - 1}")
    check_arms(panel, prefix, T)
    if checkpoint_dir is None and os.environ.get(CHECKPOINT_ENV):
        checkpoint_dir = os.environ[CHECKPOINT_ENV]
    ckpt = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt:
        ckpt.mkdir(parents=True, exist_ok=True)
        tag = {"seed": seed, "mcmc": [mcmc.n_iter, mcmc.burn, mcmc.thin], "dynamic": dynamic, "prefix": list(prefix)}
        tag_file = ckpt / "checkpoint.json"
        if tag_file.exists() and json.loads(tag_file.read_text()) != tag:
            raise ValueError(f"checkpoint directory {ckpt} belongs to a different run configuration")
        tag_file.write_text(json.dumps(tag))

    cells: dict = {}
    states: dict = {}
    for model, t, arm in _cells(T):
        if ckpt:
            fpath, spath = _checkpoint_path(ckpt, model, t, arm)
            if fpath.exists() and spath.exists():
                cells[(model, t, arm)] = DpmConditional(load_fit(fpath))
                states[(model, t, arm)] = StateSummary.load(spath)
                continue
        if dynamic and t > 1:
            fit, state = update_step(states[(model, t - 1, arm)], panel, prefix, prior, mcmc, seed, c)
        else:
            fit = _fit_cell(panel, model, t, arm, prefix, prior, mcmc, seed, c)
            state = StateSummary.from_fit(fit, t, model, arm)
        log.debug("fitted %s t=%d arm=%d: mean clusters %.2f", model, t, arm, fit.n_clusters.mean())
        cells[(model, t, arm)] = DpmConditional(fit)
        states[(model, t, arm)] = state
        if ckpt:
            fpath, spath = _checkpoint_path(ckpt, model, t, arm)
            save_fit(fit, fpath)
            state.save(spath)
    family = "poisson" if panel.outcome == "count" else "gaussian"
    return FittedSystem(
        label="bnp_bdm" if dynamic else "bnp", kind=dz.ONE_STEP, family=family, T=T, prefix=prefix,
        cells=cells, c=c, states=states,
        meta={"seed": seed, "mcmc": [mcmc.n_iter, mcmc.burn, mcmc.thin], "dynamic": dynamic},
    )
