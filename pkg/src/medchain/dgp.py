"""Synthetic longitudinal exposure/mediator/outcome generator and ground-truth effects.

Every observation model depends on the full history of its predictors. The
coefficients of the most recent ("one-time preceding") term of each lagged
variable follow an attenuation schedule across time, while older lags decay
geometrically (by ``lag_decay`` per step back).
"""

from __future__ import annotations

import copy
import dataclasses
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml
from scipy.special import expit

from .panel import Panel

SCHEDULES: dict[str, tuple[float, ...]] = {
    "case1": (0.85,),
    "case2": (0.70,),
    "case3": (0.70, 1.15, 0.80),
    "none": (1.0,),
}

# (first h, last h relative to t) of every lagged term, per model
TERMS: dict[str, dict[str, tuple[int, int]]] = {
    "W": {"M": (0, -1), "Z": (1, -1), "W": (0, -1)},
    "M": {"M": (0, -1), "Z": (1, 0), "W": (1, 0)},
    "Y": {"M": (1, 0), "Z": (1, 0), "Y": (0, -1), "W": (1, 0)},
    "Z": {"Z": (1, -1), "W": (1, 0)},
}
SCHEDULED_MODELS = ("W", "M", "Y")


class DgpError(RuntimeError):
    pass


def _default_dict() -> dict[str, Any]:
    text = resources.files("medchain").joinpath("data/dgp_default.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text)


@dataclass
class DgpConfig:
    n: int = 500
    T: int = 4
    case: int | str = 1
    seed: int = 0
    skew_scale: float = 1.0
    skew_shape: float = 2.0
    c: float = 0.1
    lag_decay: float = 0.1
    outcome_family: str = "poisson"
    outcome_sd: float = 1.0
    w_mix_shift: float = 1.0
    w_var: float = 0.5
    baseline: dict[str, float] = field(default_factory=dict)
    coefficients: dict[str, dict[str, Any]] = field(default_factory=dict)

    def __post_init__(self):
        defaults = _default_dict()
        if not self.baseline:
            self.baseline = dict(defaults["baseline"])
        if not self.coefficients:
            self.coefficients = copy.deepcopy(defaults["coefficients"])
        if not self.skew_scale > 0:
            raise ValueError("skew_scale must be positive")
        if not self.c > 0:
            raise ValueError("c must be positive")
        if self.outcome_family not in ("poisson", "gaussian"):
            raise ValueError(f"unknown outcome_family {self.outcome_family!r}")
        schedule_factors(self.case, self.T)

    @classmethod
    def default(cls, **overrides) -> "DgpConfig":
        d = _default_dict()
        d.update(overrides)
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "DgpConfig":
        d = _default_dict()
        with open(path, encoding="utf-8") as fh:
            user = yaml.safe_load(fh) or {}
        for key in ("baseline", "coefficients"):
            if key in user:
                merged = copy.deepcopy(d[key])
                for k, v in user.pop(key).items():
                    if isinstance(v, dict) and isinstance(merged.get(k), dict):
                        merged[k].update(v)
                    else:
                        merged[k] = v
                d[key] = merged
        d.update(user)
        d.update(overrides)
        return cls(**d)

    def replace(self, **changes) -> "DgpConfig":
        return dataclasses.replace(self, **changes)

    @property
    def lag_transform(self):
        if self.outcome_family == "poisson":
            return lambda y: np.log(y + self.c)
        return lambda y: y


def schedule_factors(case: int | str | Sequence[float], T: int) -> np.ndarray:
    """Cumulative multipliers S_1..S_T for the one-time preceding coefficients."""
    if isinstance(case, (list, tuple, np.ndarray)):
        steps = tuple(float(f) for f in case)
    else:
        label = f"case{case}" if isinstance(case, int) or str(case).isdigit() else str(case).lower()
        if label not in SCHEDULES:
            raise ValueError(f"unknown attenuation schedule {case!r}; known: {sorted(SCHEDULES)}")
        steps = SCHEDULES[label]
    factors = [1.0]
    for t in range(2, T + 1):
        factors.append(factors[-1] * steps[min(t - 2, len(steps) - 1)])
    return np.asarray(factors)


def attenuate(
    base_coeffs: Mapping[str, float],
    schedule: int | str | Sequence[float],
    T: int = 4,
    lag_decay: float = 0.1,
) -> list[dict[str, np.ndarray]]:
    """Per-time lag coefficients from time-1 values.

    Returns a list indexed by ``t - 1``; entry ``[var][l]`` is the coefficient
    on the term ``l`` steps older than the most recent one. The most recent
    coefficient is ``base * S_t``; lag ``l`` carries ``base * S_(t-l) * lag_decay**l``.
    """
    S = schedule_factors(schedule, T)
    out = []
    for t in range(1, T + 1):
        block = {}
        for var, b in base_coeffs.items():
            lags = np.arange(t)
            block[var] = np.array([b * S[max(t - l, 1) - 1] * lag_decay**l for l in lags])
        out.append(block)
    return out


@dataclass
class _State:
    M: np.ndarray
    W: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    V: np.ndarray
    offset: np.ndarray

    def copy(self) -> "_State":
        return _State(*(a.copy() for a in dataclasses.astuple(self)))


class _Generator:
    """Forward sampler shared by panel simulation and the truth oracle."""

    def __init__(self, cfg: DgpConfig):
        self.cfg = cfg
        co = cfg.coefficients
        self.lags = {}
        for m in SCHEDULED_MODELS:
            self.lags[m] = attenuate(co[m]["lags"], cfg.case, cfg.T, cfg.lag_decay)
        self.lags["Z"] = attenuate(co["Z"]["lags"], "none", cfg.T, cfg.lag_decay)
        ints = list(co["Z"]["intercepts"])
        self.z_intercepts = [ints[min(t, len(ints) - 1)] for t in range(cfg.T)]
        shape = cfg.skew_shape
        self.sn_delta = shape / np.sqrt(1.0 + shape**2)
        self.ylag = cfg.lag_transform

    def baseline(self, n: int, rng: np.random.Generator) -> _State:
        b, T = self.cfg.baseline, self.cfg.T
        vdim = int(b["v_dim"])
        V = np.empty((n, vdim))
        V[:, 0] = rng.random(n)
        if vdim > 1:
            V[:, 1:] = rng.standard_normal((n, vdim - 1))
        base_off = np.exp(b["offset_logmean"] + b["offset_logsd"] * rng.standard_normal(n))
        offset = np.empty((n, T + 1))
        offset[:, 1:] = base_off[:, None] * np.exp(b["offset_jitter"] * rng.standard_normal((n, T)))
        offset[:, 0] = offset[:, 1]
        M = np.zeros((n, T + 1))
        W = np.zeros((n, T + 1))
        Y = np.zeros((n, T + 1))
        Z = np.zeros((n, T + 1), dtype=np.int8)
        M[:, 0] = b["m0_mean"] + b["m0_sd"] * rng.standard_normal(n)
        W[:, 0] = b["w0_sd"] * rng.standard_normal(n)
        if self.cfg.outcome_family == "poisson":
            Y[:, 0] = rng.poisson(offset[:, 0] * b["y0_rate"])
        else:
            Y[:, 0] = b["y0_rate"] + self.cfg.outcome_sd * rng.standard_normal(n)
        if self.cfg.outcome_family != "poisson":
            offset = np.ones_like(offset)
        return _State(M=M, W=W, Y=Y, Z=Z, V=V, offset=offset)

    def _lagsum(self, model: str, t: int, st: _State) -> np.ndarray:
        total = np.zeros(st.V.shape[0])
        coefs = self.lags[model][t - 1]
        for var, (h0, off) in TERMS[model].items():
            h1 = t + off
            series = getattr(st, var)
            if var == "Y":
                series = self.ylag(series)
            for h in range(h0, h1 + 1):
                total = total + coefs[var][h1 - h] * series[:, h]
        return total

    def draw_w(self, t: int, st: _State, rng) -> np.ndarray:
        co = self.cfg.coefficients["W"]
        n = st.V.shape[0]
        eta = co["intercept"] + st.V @ np.asarray(co["V"], float) + self._lagsum("W", t, st)
        side = np.where(rng.random(n) < 0.5, 1.0, -1.0)
        return eta + side * self.cfg.w_mix_shift + np.sqrt(self.cfg.w_var) * rng.standard_normal(n)

    def w_mean(self, t: int, st: _State) -> np.ndarray:
        co = self.cfg.coefficients["W"]
        return co["intercept"] + st.V @ np.asarray(co["V"], float) + self._lagsum("W", t, st)

    def draw_z(self, t: int, st: _State, rng) -> np.ndarray:
        co = self.cfg.coefficients["Z"]
        eta = self.z_intercepts[t - 1] + st.V @ np.asarray(co["V"], float) + self._lagsum("Z", t, st)
        return (rng.random(st.V.shape[0]) < expit(eta)).astype(np.int8)

    def m_location(self, t: int, st: _State) -> np.ndarray:
        co = self.cfg.coefficients["M"]
        return co["intercept"] + st.V @ np.asarray(co["V"], float) + self._lagsum("M", t, st)

    def draw_m(self, t: int, st: _State, rng) -> np.ndarray:
        n = st.V.shape[0]
        d = self.sn_delta
        u0 = np.abs(rng.standard_normal(n))
        u1 = rng.standard_normal(n)
        return self.m_location(t, st) + self.cfg.skew_scale * (d * u0 + np.sqrt(1.0 - d * d) * u1)

    def y_eta(self, t: int, st: _State) -> np.ndarray:
        co = self.cfg.coefficients["Y"]
        eta = co["intercept"] + st.V @ np.asarray(co["V"], float) + self._lagsum("Y", t, st)
        return eta + co.get("MZ", 0.0) * st.M[:, t] * st.Z[:, t] + co.get("MW", 0.0) * st.M[:, t] * st.W[:, t]

    def y_mean(self, t: int, st: _State) -> np.ndarray:
        eta = self.y_eta(t, st)
        if self.cfg.outcome_family == "gaussian":
            return eta
        mu = st.offset[:, t] * np.exp(np.minimum(eta, 700.0))
        bad = ~np.isfinite(mu) | (mu > 1e8)
        if np.any(bad):
            i = int(np.nonzero(bad)[0][0])
            raise DgpError(
                f"Poisson mean overflow at unit {i}, t={t}: eta={eta[i]:.3g}; "
                f"outcome coefficients {self.cfg.coefficients['Y']}"
            )
        return mu

    def draw_y(self, t: int, st: _State, rng) -> np.ndarray:
        mu = self.y_mean(t, st)
        if self.cfg.outcome_family == "gaussian":
            return mu + self.cfg.outcome_sd * rng.standard_normal(mu.shape[0])
        return rng.poisson(mu).astype(float)


def simulate_panel(cfg: DgpConfig, seed: int | None = None) -> Panel:
    """Draw one panel of ``cfg.n`` units from the full-history generator."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    gen = _Generator(cfg)
    st = gen.baseline(cfg.n, rng)
    for t in range(1, cfg.T + 1):
        st.W[:, t] = gen.draw_w(t, st, rng)
        st.Z[:, t] = gen.draw_z(t, st, rng)
        st.M[:, t] = gen.draw_m(t, st, rng)
        st.Y[:, t] = gen.draw_y(t, st, rng)
    count = cfg.outcome_family == "poisson"
    return Panel(
        unit_id=np.array([f"u{i:05d}" for i in range(cfg.n)], dtype=object),
        Z=st.Z[:, 1:].copy(), W=st.W[:, 1:].copy(), M=st.M[:, 1:].copy(),
        Y=(st.Y[:, 1:].astype(np.int64) if count else st.Y[:, 1:].copy()),
        offset=st.offset[:, 1:].copy(), V=st.V.copy(),
        Y0=(st.Y[:, 0].astype(np.int64) if count else st.Y[:, 0].copy()),
        M0=st.M[:, 0].copy(), W0=st.W[:, 0].copy(),
        outcome="count" if count else "continuous",
    )


@dataclass(frozen=True)
class TruthOracle:
    """Monte Carlo ground truth of the natural effects for one contrast."""

    t: int
    z: tuple[int, ...]
    z_prime: tuple[int, ...]
    mu_zz: float
    mu_zzp: float
    mu_zpzp: float
    nde: float
    nie: float
    te: float
    nde_se: float
    nie_se: float
    te_se: float
    n_mc: int
    reliable: bool = True

    def as_dict(self) -> dict[str, float]:
        return {"NDE": self.nde, "NIE": self.nie, "TE": self.te}

    def se_dict(self) -> dict[str, float]:
        return {"NDE": self.nde_se, "NIE": self.nie_se, "TE": self.te_se}


def true_effects(cfg: DgpConfig, contrast, n_mc: int = 100_000, seed: int = 0) -> TruthOracle:
    """Ground-truth NDE/NIE/TE by forward simulation with forced treatments.

    ``contrast`` is any object with ``z`` and ``z_prime`` histories (or a
    pair of sequences) that differ at most in their final entry.
    """
    z, zp = _histories(contrast)
    t = len(z)
    if t > cfg.T:
        raise ValueError(f"contrast length {t} exceeds T={cfg.T}")
    reliable = n_mc >= 1000
    if not reliable:
        warnings.warn(f"n_mc={n_mc} < 1000: Monte Carlo standard errors are unreliable", stacklevel=2)
    rng = np.random.default_rng(np.random.SeedSequence([seed, t, 7919]))
    gen = _Generator(cfg)
    st = gen.baseline(n_mc, rng)
    for s in range(1, t):
        st.W[:, s] = gen.draw_w(s, st, rng)
        st.Z[:, s] = z[s - 1]
        st.M[:, s] = gen.draw_m(s, st, rng)
        st.Y[:, s] = gen.draw_y(s, st, rng)
    st.W[:, t] = gen.draw_w(t, st, rng)
    a, b = z[-1], zp[-1]
    st.Z[:, t] = a
    m_a = gen.draw_m(t, st, rng)
    if a == b:
        m_b = m_a
    else:
        st.Z[:, t] = b
        m_b = gen.draw_m(t, st, rng)

    def outcome(arm, m):
        s2 = st.copy()
        s2.Z[:, t] = arm
        s2.M[:, t] = m
        return gen.y_mean(t, s2)

    y_zz = outcome(a, m_a)
    y_zzp = outcome(a, m_b)
    y_zpzp = outcome(b, m_b)
    se = lambda x: float(np.std(x, ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else float("nan")
    mu_zz, mu_zzp, mu_zpzp = float(np.mean(y_zz)), float(np.mean(y_zzp)), float(np.mean(y_zpzp))
    return TruthOracle(
        t=t, z=tuple(z), z_prime=tuple(zp),
        mu_zz=mu_zz, mu_zzp=mu_zzp, mu_zpzp=mu_zpzp,
        nde=mu_zzp - mu_zpzp, nie=mu_zz - mu_zzp, te=mu_zz - mu_zpzp,
        nde_se=se(y_zzp - y_zpzp), nie_se=se(y_zz - y_zzp), te_se=se(y_zz - y_zpzp),
        n_mc=n_mc, reliable=reliable,
    )


def _histories(contrast) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if hasattr(contrast, "z") and hasattr(contrast, "z_prime"):
        z, zp = tuple(contrast.z), tuple(contrast.z_prime)
    else:
        z, zp = (tuple(x) for x in contrast)
    if len(z) != len(zp) or z[:-1] != zp[:-1]:
        raise ValueError(f"histories {z} and {zp} must differ only in their final entry")
    return tuple(int(v) for v in z), tuple(int(v) for v in zp)
