"""Dirichlet-process-mixture regression fits: priors, samplers, predictive draws, storage."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .. import glm
from . import _kernels

log = logging.getLogger(__name__)

FORMAT_VERSION = "medchain-dpm/1"
MCMC_PROFILES = {"long": (15000, 5000, 10), "desk": (2000, 500, 5)}


class McmcConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Mcmc:
    n_iter: int = 2000
    burn: int = 500
    thin: int = 5

    def __post_init__(self):
        if self.n_iter <= self.burn:
            raise McmcConfigError(f"iterations ({self.n_iter}) must exceed burn-in ({self.burn})")
        if self.thin < 1 or self.burn < 0:
            raise McmcConfigError("thin must be >= 1 and burn >= 0")

    @classmethod
    def profile(cls, name: str) -> "Mcmc":
        try:
            return cls(*MCMC_PROFILES[name])
        except KeyError:
            raise McmcConfigError(f"unknown MCMC profile {name!r}; known: {sorted(MCMC_PROFILES)}") from None

    @property
    def n_keep(self) -> int:
        return len(range(self.burn, self.n_iter, self.thin))


@dataclass(frozen=True)
class DpPrior:
    """Hyperparameters of the DP mixture.

    Mass ``lambda ~ Gamma(lam_shape, lam_rate)``; coefficient base measure
    ``N(A, diag(1/tau))`` with ``tau_h ~ Gamma(tau_shape, tau_rate)``;
    kernel variance ``InvGamma(a, b)``. The base mean ``A ~ N(mean, cov)``;
    when ``mean`` is None a static, data-centred prior is built at fit time.
    The ``fixed_*`` fields pin a parameter instead of sampling it.
    """

    lam_shape: float = 1.0
    lam_rate: float = 1.0
    tau_shape: float = 2.0
    tau_rate: float = 1.0
    a: float = 5.0
    b: float = 1.0
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None
    m_aux: int = 3
    fixed_mass: float | None = None
    fixed_tau: np.ndarray | float | None = None
    fixed_base_mean: bool = False

    def __post_init__(self):
        for name in ("lam_shape", "lam_rate", "tau_shape", "tau_rate", "a", "b"):
            if not getattr(self, name) > 0:
                raise ValueError(f"prior hyperparameter {name} must be positive")
        if self.m_aux < 1:
            raise ValueError("m_aux must be >= 1")
        if (self.mean is None) != (self.cov is None):
            raise ValueError("base-measure mean and covariance must be given together")

    def with_base(self, mean: np.ndarray, cov: np.ndarray) -> "DpPrior":
        return replace(self, mean=np.asarray(mean, float), cov=np.asarray(cov, float))


@dataclass(frozen=True, eq=False)
class DpmFit:
    """Retained posterior draws of one DP mixture regression.

    Cluster-level arrays are stored flat; draw ``r`` owns rows
    ``offsets[r]:offsets[r + 1]``.
    """

    kernel: str
    labels: np.ndarray
    n_clusters: np.ndarray
    beta: np.ndarray
    sig2: np.ndarray
    counts: np.ndarray
    lam: np.ndarray
    A: np.ndarray
    tau: np.ndarray
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    a: float
    b: float
    mcmc: Mcmc
    seed: int
    trace_k: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, int))
    meta: dict[str, Any] = field(default_factory=dict)
    # coefficients live on the standardized design (x - center) / scale
    center: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        p = self.A.shape[1]
        for name, fill in (("center", 0.0), ("scale", 1.0)):
            if getattr(self, name) is None:
                object.__setattr__(self, name, np.full(p, fill))

    @property
    def n_draws(self) -> int:
        return len(self.n_clusters)

    @property
    def n_obs(self) -> int:
        return self.labels.shape[1]

    @property
    def p(self) -> int:
        return self.A.shape[1]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.n_clusters)])

    def expand(self, X: np.ndarray) -> np.ndarray:
        """Map raw design rows onto the scale the coefficients were fitted on."""
        return (X - self.center) / self.scale

    @property
    def to_raw(self) -> np.ndarray:
        """Matrix mapping standardized coefficients to raw-design coefficients."""
        return np.linalg.inv(_std_map(self.center, self.scale))

    @property
    def A_raw(self) -> np.ndarray:
        return self.A @ self.to_raw.T

    def clusters(self, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        o = self.offsets
        sl = slice(o[r], o[r + 1])
        return self.beta[sl], self.sig2[sl], self.counts[sl]

    def summary(self) -> dict[str, np.ndarray]:
        """Posterior means of the base-measure parameters and cluster counts."""
        return {
            "A_mean": self.A_raw.mean(axis=0),
            "A_sd": self.A_raw.std(axis=0, ddof=1) if self.n_draws > 1 else np.zeros(self.p),
            "tau_mean": self.tau.mean(axis=0),
            "lam_mean": np.array(self.lam.mean()),
            "k_mean": np.array(self.n_clusters.mean()),
        }

    def draw_params(self, draws: np.ndarray, n_rows: int, rng: np.random.Generator, include_new: bool = True):
        """Sample a mixture component per row for each posterior draw in ``draws``.

        Existing clusters are picked with weight ``n_k / (n + lambda)`` and a
        fresh base-measure component with weight ``lambda / (n + lambda)``;
        with ``include_new=False`` only occupied clusters are used (weights
        ``n_k / n``). Returns ``beta`` of shape ``(len(draws), n_rows, p)`` and
        ``sig2`` of shape ``(len(draws), n_rows)``.
        """
        draws = np.asarray(draws)
        o = self.offsets
        out_b = np.empty((len(draws), n_rows, self.p))
        out_s = np.empty((len(draws), n_rows))
        n = self.n_obs
        for j, r in enumerate(draws):
            lo, hi = o[r], o[r + 1]
            K = hi - lo
            cum = np.cumsum(self.counts[lo:hi]).astype(float)
            total = float(n)
            if include_new:
                cum = np.append(cum, n + self.lam[r])
                total = n + self.lam[r]
            idx = np.minimum(np.searchsorted(cum, rng.random(n_rows) * total, side="right"), len(cum) - 1)
            fresh = idx == K
            k = np.minimum(idx, K - 1) + lo
            out_b[j] = self.beta[k]
            out_s[j] = self.sig2[k]
            nf = int(fresh.sum())
            if nf:
                out_b[j, fresh] = self.A[r] + rng.standard_normal((nf, self.p)) / np.sqrt(self.tau[r])
                out_s[j, fresh] = 1.0 / rng.gamma(self.a, 1.0 / self.b, nf)
        return out_b, out_s


def _as_design(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.ascontiguousarray(np.asarray(X, float))
    y = np.ascontiguousarray(np.asarray(y, float))
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"design rows {X.shape} do not match response length {y.shape}")
    if X.shape[0] < 2:
        raise ValueError("at least two observations are required")
    if not np.any(np.all(X == 1.0, axis=0)):
        raise ValueError("design must include an intercept column of ones")
    return X, y


def standardization(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column centres and scales; the intercept and constant columns are left alone."""
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    flat = scale < 1e-12 * np.maximum(1.0, np.abs(center))
    center[flat] = 0.0
    scale[flat] = 1.0
    return center, scale


def _std_map(center: np.ndarray, scale: np.ndarray) -> np.ndarray:
    # beta_std = S @ beta_raw for the intercept-carrying design
    p = len(center)
    icpt = int(np.argmax((center == 0.0) & (scale == 1.0)))
    S = np.diag(scale.astype(float))
    S[icpt, :] += center
    S[icpt, icpt] = 1.0
    return S


def static_prior_normal(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Least-squares centred base mean with unit-information covariance."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = glm.ols(X, y)
    return res.coef, len(y) * res.cov, res.sigma2


def static_prior_poisson(X: np.ndarray, y: np.ndarray, offset: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Poisson-MLE centred base mean, unit-information covariance, and average information."""
    n, p = X.shape
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = glm.poisson_irls(X, y, offset)
        coef = res.coef
    except glm.ConvergenceError:
        coef = np.zeros(p)
        coef[np.argmax(np.all(X == 1.0, axis=0))] = np.log((y.sum() + 0.5) / offset.sum())
    mu = offset * np.exp(np.clip(X @ coef, -50, 50))
    H = X.T @ (mu[:, None] * X) / n
    H += 1e-8 * max(np.trace(H) / p, 1e-12) * np.eye(p)
    return coef, np.linalg.inv(H), H


def _seed32(seed) -> int:
    return int(np.random.SeedSequence(seed).generate_state(1)[0])


def _fixed_tau(prior: DpPrior, p: int) -> tuple[np.ndarray, bool]:
    if prior.fixed_tau is None:
        return np.full(p, prior.tau_shape / prior.tau_rate), False
    return np.broadcast_to(np.asarray(prior.fixed_tau, float), (p,)).copy(), True


def _run(kernel, y, X, logoff, H, mean, cov, prior, mcmc, seed, init_beta, init_sig2):
    tau0, fix_tau = _fixed_tau(prior, X.shape[1])
    fixed_lam = -1.0 if prior.fixed_mass is None else float(prior.fixed_mass)
    p = X.shape[1]
    out = _kernels.run_sampler(
        kernel, y, X, logoff, np.ascontiguousarray(H), np.asarray(mean, float).copy(),
        np.ascontiguousarray(cov, dtype=float), prior.a, prior.b, prior.tau_shape, prior.tau_rate,
        prior.lam_shape, prior.lam_rate, 1.0, fixed_lam, tau0, fix_tau, bool(prior.fixed_base_mean),
        np.asarray(init_beta, float).copy(), float(init_sig2), mcmc.n_iter, mcmc.burn, mcmc.thin,
        prior.m_aux, 2.38 / np.sqrt(p), 0.3, _seed32(seed),
    )
    return out


def _package(kernel_name, out, mean, cov, prior, mcmc, seed, scaling) -> DpmFit:
    labels, K, beta, sig2, counts, lam, A, tau, trace_k, acc, step = out
    center, scale = scaling
    meta = {"n_clusters_mean": float(K.mean())}
    if kernel_name == "poisson":
        meta["acceptance"] = float(acc)
        meta["step_scale"] = float(step)
        if not 0.1 <= acc <= 0.6:
            meta["warning"] = f"post-burn-in Metropolis acceptance {acc:.3f} outside [0.1, 0.6]"
            log.warning(meta["warning"])
    return DpmFit(
        kernel=kernel_name, labels=labels, n_clusters=K, beta=beta, sig2=sig2, counts=counts,
        lam=lam, A=A, tau=tau, prior_mean=np.asarray(mean, float), prior_cov=np.asarray(cov, float),
        a=prior.a, b=prior.b, mcmc=mcmc, seed=_seed32(seed), trace_k=trace_k, meta=meta,
        center=center, scale=scale,
    )


def _prepare(X, prior, standardize):
    if standardize:
        center, scale = standardization(X)
    else:
        center, scale = np.zeros(X.shape[1]), np.ones(X.shape[1])
    Xs = np.ascontiguousarray((X - center) / scale)
    S = _std_map(center, scale)
    base = None
    if prior.mean is not None:
        _check_dim(prior.mean, X)
        base = (S @ prior.mean, S @ prior.cov @ S.T)
    return Xs, base, (center, scale)


def fit_normal_dpm(X, y, prior: DpPrior | None = None, mcmc: Mcmc | None = None, seed=0,
                   standardize: bool = True) -> DpmFit:
    """DP mixture of normal linear regressions.

    Within each cluster the coefficients and variance have semi-conjugate
    Gibbs updates; labels use auxiliary components drawn from the base measure.
    ``prior.mean``/``prior.cov`` refer to the raw design; with ``standardize``
    the sampler works on centred and scaled columns (the base-measure
    precisions then apply per standardized unit).
    """
    prior = prior or DpPrior()
    mcmc = mcmc or Mcmc()
    X, y = _as_design(X, y)
    Xs, base, scaling = _prepare(X, prior, standardize)
    ls_mean, ls_cov, s2 = static_prior_normal(Xs, y)
    mean, cov = base if base is not None else (ls_mean, ls_cov)
    out = _run(_kernels.NORMAL, y, Xs, np.zeros(len(y)), np.eye(X.shape[1]), mean, cov, prior, mcmc, seed,
               mean, max(s2, 1e-8))
    return _package("normal", out, mean, cov, prior, mcmc, seed, scaling)


def fit_poisson_dpm(X, y, offset=None, prior: DpPrior | None = None, mcmc: Mcmc | None = None, seed=0,
                    standardize: bool = True) -> DpmFit:
    """DP mixture of Poisson log-linear regressions with ``log(offset)`` in the predictor.

    Labels use auxiliary components; cluster coefficients move by random-walk
    Metropolis whose scale adapts toward 30% acceptance during burn-in only.
    """
    prior = prior or DpPrior()
    mcmc = mcmc or Mcmc()
    X, y = _as_design(X, y)
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise ValueError("Poisson responses must be nonnegative integers")
    offset = np.ones(len(y)) if offset is None else np.asarray(offset, float)
    if offset.shape != y.shape or np.any(offset <= 0):
        raise ValueError("offsets must be positive and match the response length")
    Xs, base, scaling = _prepare(X, prior, standardize)
    ml_mean, ml_cov, H = static_prior_poisson(Xs, y, offset)
    mean, cov = base if base is not None else (ml_mean, ml_cov)
    out = _run(_kernels.POISSON, y, Xs, np.log(offset), H, mean, cov, prior, mcmc, seed, mean, 1.0)
    return _package("poisson", out, mean, cov, prior, mcmc, seed, scaling)


def _check_dim(mean, X):
    if np.asarray(mean).shape != (X.shape[1],):
        raise ValueError(f"prior mean has shape {np.asarray(mean).shape}, design has {X.shape[1]} columns")


def linear_predictor(beta: np.ndarray, X: np.ndarray) -> np.ndarray:
    return np.einsum("...k,...k->...", beta, X)


def posterior_predictive(
    fit: DpmFit,
    Xnew,
    offset=None,
    seed=0,
    draws: np.ndarray | None = None,
    mean_only: bool = False,
) -> np.ndarray:
    """Predictive draws of the response for each retained iteration and new row.

    Returns an ``(n_draws, n_rows)`` array. With ``mean_only`` the kernel mean
    of the sampled component is returned instead of a response draw.
    """
    Xnew = np.atleast_2d(np.asarray(Xnew, float))
    if Xnew.shape[1] != fit.p:
        raise ValueError(f"new design has {Xnew.shape[1]} columns, fit has {fit.p}")
    rng = np.random.default_rng(seed)
    draws = np.arange(fit.n_draws) if draws is None else np.asarray(draws)
    beta, sig2 = fit.draw_params(draws, Xnew.shape[0], rng)
    eta = linear_predictor(beta, fit.expand(Xnew)[None, :, :])
    if fit.kernel == "normal":
        if mean_only:
            return eta
        return eta + np.sqrt(sig2) * rng.standard_normal(eta.shape)
    off = np.ones(Xnew.shape[0]) if offset is None else np.asarray(offset, float)
    mu = off * np.exp(np.minimum(eta, 50.0))
    return mu if mean_only else rng.poisson(mu).astype(float)


# ---------------------------------------------------------------------------
# storage

_ARRAYS = ("labels", "n_clusters", "beta", "sig2", "counts", "lam", "A", "tau", "prior_mean", "prior_cov", "trace_k",
           "center", "scale")


def fit_to_arrays(fit: DpmFit) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    arrays = {k: getattr(fit, k) for k in _ARRAYS}
    header = {
        "version": FORMAT_VERSION, "kernel": fit.kernel, "a": fit.a, "b": fit.b, "seed": fit.seed,
        "mcmc": [fit.mcmc.n_iter, fit.mcmc.burn, fit.mcmc.thin], "meta": fit.meta,
    }
    return arrays, header


def fit_from_arrays(arrays: dict[str, np.ndarray], header: dict[str, Any]) -> DpmFit:
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported fit format {header.get('version')!r}; expected {FORMAT_VERSION}")
    return DpmFit(
        kernel=header["kernel"], a=header["a"], b=header["b"], seed=header["seed"],
        mcmc=Mcmc(*header["mcmc"]), meta=dict(header["meta"]), **{k: np.asarray(arrays[k]) for k in _ARRAYS},
    )


def save_fit(fit: DpmFit, path: str | Path) -> None:
    arrays, header = fit_to_arrays(fit)
    np.savez_compressed(path, header=np.array(json.dumps(header)), **arrays)


def load_fit(path: str | Path) -> DpmFit:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        return fit_from_arrays({k: z[k] for k in _ARRAYS}, header)
