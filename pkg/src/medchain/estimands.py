"""Counterfactual means and natural direct/indirect/total effects by forward simulation.

For each posterior draw the fitted conditionals are chained forward from
resampled baselines: confounder, mediator and outcome under the shared
treatment prefix, then at the final time the mediator under both arms and
the outcome mean (mixture components integrated exactly) under the three
(outcome arm, mediator arm) pairings.
Every stochastic step has its own random stream keyed by
``(seed, chunk, time, step)``, so quantities that share a path are computed
from identical numbers regardless of what else is requested.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import design as dz
from .assumptions import AssumptionLedger, LedgerError, default_ledger
from .conditionals import W_ARM, FittedSystem
from .panel import Panel

log = logging.getLogger(__name__)

CHUNK = 50
MIN_NMC = 1000
_STEP = {"W": 1, "M": 2, "Y": 3, "Mb": 4}


@dataclass(frozen=True)
class Contrast:
    """Two treatment histories that agree before ``t`` and differ at ``t``."""

    z: tuple[int, ...]
    z_prime: tuple[int, ...]

    def __post_init__(self):
        z, zp = tuple(int(v) for v in self.z), tuple(int(v) for v in self.z_prime)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "z_prime", zp)
        if not z or len(z) != len(zp):
            raise ValueError(f"histories {z} and {zp} must be nonempty and of equal length")
        if any(v not in (0, 1) for v in z + zp):
            raise ValueError("treatment histories must be binary")
        if z[:-1] != zp[:-1] or z[-1] == zp[-1]:
            raise ValueError(f"histories {z} and {zp} must differ at exactly the final index")

    @property
    def t(self) -> int:
        return len(self.z)

    @property
    def label(self) -> str:
        return "".join(map(str, self.z)) + "v" + "".join(map(str, self.z_prime))

    @classmethod
    def parse(cls, text: str) -> "Contrast":
        try:
            a, b = text.strip().split("v")
            return cls(tuple(int(ch) for ch in a), tuple(int(ch) for ch in b))
        except ValueError as exc:
            raise ValueError(f"cannot parse contrast {text!r} (expected e.g. 0001v0000): {exc}") from None

    @classmethod
    def final_switch(cls, t: int, prefix: Sequence[int] | None = None, arm: int = 1) -> "Contrast":
        head = tuple(prefix[: t - 1]) if prefix is not None else (0,) * (t - 1)
        if len(head) != t - 1:
            raise ValueError(f"prefix too short for t={t}")
        return cls(head + (arm,), head + (1 - arm,))


@dataclass(frozen=True)
class SensitivitySpec:
    chi: float = 1.0
    kappa: float = 0.5

    def __post_init__(self):
        if not self.chi > 0:
            raise ValueError("chi must be positive")
        if not self.kappa >= 0:
            raise ValueError("kappa must be nonnegative")


@dataclass(frozen=True, eq=False)
class EffectEstimate:
    """Posterior draws of the three counterfactual means and the derived effects."""

    t: int
    contrast: Contrast
    label: str
    draws: dict[str, np.ndarray]
    mc_se: dict[str, float]
    n_mc: int
    chi: float = 1.0
    kappa: float = 0.5
    ess_min: float = float("nan")
    rate_per: float | None = None
    assumptions: AssumptionLedger | None = None

    EFFECTS = ("NDE", "NIE", "TE")
    MEANS = ("mu_zz", "mu_zzp", "mu_zpzp")

    def interval(self, name: str, level: float = 0.95) -> tuple[float, float, float]:
        x = self.draws[name]
        q = (1 - level) / 2
        return float(np.mean(x)), float(np.quantile(x, q)), float(np.quantile(x, 1 - q))

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for name in self.EFFECTS + self.MEANS:
            m, lo, hi = self.interval(name)
            out[name] = {"mean": m, "median": float(np.median(self.draws[name])), "lo95": lo, "hi95": hi,
                         "sd": float(np.std(self.draws[name], ddof=1))}
        return out

    def point(self, name: str, how: str = "median") -> float:
        """Posterior median (default) or mean of one quantity.

        Under a log link the posterior of a counterfactual mean can have an
        undefined mean, so the median is the default point summary.
        """
        if how not in ("median", "mean"):
            raise ValueError("how must be 'median' or 'mean'")
        x = self.draws[name]
        return float(np.median(x) if how == "median" else np.mean(x))

    def to_dict(self, draws_ref: str | None = None) -> dict[str, Any]:
        if self.assumptions is None:
            raise LedgerError("refusing to serialize an effect estimate without an assumption ledger")
        s = self.summary()
        return {
            "t": self.t, "contrast": self.contrast.label, "model": self.label, "n_mc": self.n_mc,
            "n_draws": int(len(self.draws["TE"])), "chi": self.chi, "kappa": self.kappa,
            "rate_per": self.rate_per, "ess_min": None if np.isnan(self.ess_min) else self.ess_min,
            **{k.lower(): {**s[k], "draws": draws_ref} for k in self.EFFECTS},
            "means": {k: s[k] for k in self.MEANS},
            "mc_se": self.mc_se,
            "assumptions": self.assumptions.as_list(),
        }


def format_interval(mean: float, lo: float, hi: float, digits: int = 2) -> str:
    """``mean (lo, hi)`` in fixed notation."""
    return f"{mean:.{digits}f} ({lo:.{digits}f}, {hi:.{digits}f})"


def write_effects(estimates: Sequence[EffectEstimate], path: str | Path, write_draws: bool = True) -> Path:
    """Write effect summaries (and optionally draws) as JSON; every estimate must carry a ledger."""
    path = Path(path)
    items = []
    for est in estimates:
        ref = None
        if write_draws:
            ref = path.with_name(f"{path.stem}_draws_t{est.t}.npz").name
            np.savez(path.with_name(ref), **est.draws)
        items.append(est.to_dict(ref))
    path.write_text(json.dumps({"effects": items}, indent=2), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# forward simulation


@dataclass
class _Paths:
    y_zz: np.ndarray
    y_zzp: np.ndarray | None
    y_zpzp: np.ndarray | None
    d: np.ndarray | None
    off: np.ndarray


def _rng(seed, chunk, t, step):
    return np.random.default_rng([int(seed), int(chunk), int(t), _STEP[step]])


def _family(system: FittedSystem) -> str:
    return "poisson" if system.family == "poisson" else "gaussian"


def _simulate_chunk(system, panel, z, arm_b, draws, n_mc, seed, chunk) -> _Paths:
    t = len(z)
    a = z[-1]
    fam = _family(system)
    H = panel.history()
    idx = np.random.default_rng([int(seed), int(chunk), 0, 0]).integers(0, panel.n, n_mc)
    P = len(draws)
    shape = (P, n_mc, t + 1)
    hist = {k: np.broadcast_to(H[k][idx, : t + 1], shape).copy() for k in ("M", "W", "Y")}
    hist["V"] = H["V"][idx]
    off = H["offset"][idx, : t + 1]

    def X(model, s):
        return dz.design(model, s, hist, system.kind, fam, system.c)

    for s in range(1, t):
        if s > 1:
            hist["W"][..., s] = system.cell("W", s, W_ARM).sample(draws, X("W", s), None, _rng(seed, chunk, s, "W"))
        hist["M"][..., s] = system.cell("M", s, z[s - 1]).sample(draws, X("M", s), None, _rng(seed, chunk, s, "M"))
        hist["Y"][..., s] = system.cell("Y", s, z[s - 1]).sample(draws, X("Y", s), off[:, s], _rng(seed, chunk, s, "Y"))
    if t > 1:
        hist["W"][..., t] = system.cell("W", t, W_ARM).sample(draws, X("W", t), None, _rng(seed, chunk, t, "W"))
    m_a = system.cell("M", t, a).sample(draws, X("M", t), None, _rng(seed, chunk, t, "M"))
    hist["M"][..., t] = m_a
    y_cell = system.cell("Y", t, a)
    offt = off[:, t]
    y_zz = y_cell.mixture_mean(draws, X("Y", t), offt)
    if arm_b is None:
        return _Paths(y_zz, None, None, None, offt)
    if arm_b == a:
        m_b = m_a
    else:
        m_b = system.cell("M", t, arm_b).sample(draws, X("M", t), None, _rng(seed, chunk, t, "Mb"))
    hist["M"][..., t] = m_b
    Xb = X("Y", t)
    y_zzp = y_cell.mixture_mean(draws, Xb, offt)
    y_zpzp = system.cell("Y", t, arm_b).mixture_mean(draws, Xb, offt)
    return _Paths(y_zz, y_zzp, y_zpzp, m_b - m_a, offt)


def _draw_index(system: FittedSystem, max_draws: int | None) -> np.ndarray:
    R = system.n_draws
    if max_draws is None or max_draws >= R:
        return np.arange(R)
    return np.unique(np.linspace(0, R - 1, max_draws).round().astype(int))


def _check_nmc(n_mc: int) -> None:
    if n_mc < MIN_NMC:
        raise ValueError(f"n_mc={n_mc} is below the minimum of {MIN_NMC} forward paths")


def _tilt_weights(y_zz, y_zzp, d, off, chi, kappa):
    # per draw: reweight paths whose mediator shift exceeds kappa * SD(d)
    if chi == 1.0:
        return np.ones_like(y_zzp)
    thr = kappa * np.std(d, axis=1, ddof=1, keepdims=True)
    med = np.median(y_zz / off, axis=1, keepdims=True)
    expo = np.sign(y_zzp / off - med) * np.sign(d)
    return np.where(np.abs(d) > thr, chi**expo, 1.0)


def _run(system, panel, z, arm_b, n_mc, seed, max_draws, chi=1.0, kappa=0.5, rate_per=None, keep_paths=False):
    _check_nmc(n_mc)
    z = tuple(int(v) for v in z)
    if len(z) > system.T:
        raise ValueError(f"history length {len(z)} exceeds fitted horizon T={system.T}")
    draws = _draw_index(system, max_draws)
    cols: dict[str, list] = {k: [] for k in ("mu_zz", "mu_zzp", "mu_zpzp", "se_zz", "se_zzp", "se_zpzp",
                                              "se_nie", "se_nde", "se_te", "ess")}
    paths = []
    for chunk, start in enumerate(range(0, len(draws), CHUNK)):
        dr = draws[start:start + CHUNK]
        p = _simulate_chunk(system, panel, z, arm_b, dr, n_mc, seed, chunk)
        scale = (rate_per / p.off) if rate_per else 1.0
        y_zz = p.y_zz * scale
        cols["mu_zz"].append(y_zz.mean(axis=1))
        cols["se_zz"].append(y_zz.std(axis=1, ddof=1) / np.sqrt(n_mc))
        if arm_b is not None:
            y_zzp = p.y_zzp * scale
            y_zpzp = p.y_zpzp * scale
            w = _tilt_weights(p.y_zz, p.y_zzp, p.d, p.off, chi, kappa)
            sw = w.sum(axis=1)
            mu_zzp = (w * y_zzp).sum(axis=1) / sw
            cols["mu_zzp"].append(mu_zzp)
            cols["mu_zpzp"].append(y_zpzp.mean(axis=1))
            cols["ess"].append(sw**2 / (w**2).sum(axis=1))
            sq = np.sqrt(n_mc)
            cols["se_zzp"].append(y_zzp.std(axis=1, ddof=1) / sq)
            cols["se_zpzp"].append(y_zpzp.std(axis=1, ddof=1) / sq)
            cols["se_nie"].append((y_zz - y_zzp).std(axis=1, ddof=1) / sq)
            cols["se_nde"].append((y_zzp - y_zpzp).std(axis=1, ddof=1) / sq)
            cols["se_te"].append((y_zz - y_zpzp).std(axis=1, ddof=1) / sq)
            if keep_paths:
                paths.append({"y_zz": y_zz, "y_zzp": y_zzp, "y_zpzp": y_zpzp, "d": p.d, "off": p.off, "w": w})
    out = {k: np.concatenate(v) for k, v in cols.items() if v}
    return out, paths


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def counterfactual_mean(
    system: FittedSystem,
    panel: Panel,
    z: Sequence[int],
    mediator_arm: int | None = None,
    n_mc: int = 1000,
    seed: int = 0,
    max_draws: int | None = None,
    rate_per: float | None = None,
) -> tuple[np.ndarray, float]:
    """Posterior draws of the mean outcome under history ``z`` with the final
    mediator drawn under ``mediator_arm`` (default: the final entry of ``z``).

    Returns the per-draw means and the root-mean-square Monte Carlo SE.
    """
    z = tuple(int(v) for v in z)
    arm = z[-1] if mediator_arm is None else int(mediator_arm)
    if arm == z[-1]:
        out, _ = _run(system, panel, z, None, n_mc, seed, max_draws, rate_per=rate_per)
        return out["mu_zz"], _rms(out["se_zz"])
    out, _ = _run(system, panel, z, arm, n_mc, seed, max_draws, rate_per=rate_per)
    return out["mu_zzp"], _rms(out["se_zzp"])


def tilted_effects(
    system: FittedSystem,
    panel: Panel,
    contrast: Contrast,
    spec: SensitivitySpec | None = None,
    n_mc: int = 1000,
    seed: int = 0,
    max_draws: int | None = None,
    rate_per: float | None = None,
    return_paths: bool = False,
):
    """Effects with the cross-world outcome law exponentially tilted by ``spec.chi``.

    Only the mean under (outcome arm z, mediator arm z') is reweighted, so
    the total effect is unchanged for every ``chi``.
    """
    spec = spec or SensitivitySpec()
    out, paths = _run(system, panel, contrast.z, contrast.z_prime[-1], n_mc, seed, max_draws,
                      spec.chi, spec.kappa, rate_per, return_paths)
    ess_min = float(out["ess"].min())
    if ess_min < 0.1 * n_mc:
        warnings.warn(f"tilt weights: effective sample size {ess_min:.0f} < 10% of n_mc={n_mc}",
                      RuntimeWarning, stacklevel=2)
    mu_zz, mu_zzp, mu_zpzp = out["mu_zz"], out["mu_zzp"], out["mu_zpzp"]
    draws = {
        "mu_zz": mu_zz, "mu_zzp": mu_zzp, "mu_zpzp": mu_zpzp,
        "NDE": mu_zzp - mu_zpzp, "NIE": mu_zz - mu_zzp, "TE": mu_zz - mu_zpzp,
    }
    mc_se = {"mu_zz": _rms(out["se_zz"]), "mu_zzp": _rms(out["se_zzp"]), "mu_zpzp": _rms(out["se_zpzp"]),
             "NDE": _rms(out["se_nde"]), "NIE": _rms(out["se_nie"]), "TE": _rms(out["se_te"])}
    est = EffectEstimate(
        t=contrast.t, contrast=contrast, label=system.label, draws=draws, mc_se=mc_se, n_mc=n_mc,
        chi=spec.chi, kappa=spec.kappa, ess_min=ess_min, rate_per=rate_per,
        assumptions=default_ledger(spec.chi),
    )
    return (est, paths) if return_paths else est


def effects(
    system: FittedSystem,
    panel: Panel,
    contrast: Contrast,
    n_mc: int = 1000,
    seed: int = 0,
    max_draws: int | None = None,
    rate_per: float | None = None,
) -> EffectEstimate:
    """Natural direct, indirect and total effects for one contrast."""
    return tilted_effects(system, panel, contrast, SensitivitySpec(1.0), n_mc, seed, max_draws, rate_per)


def effects_all(
    system: FittedSystem,
    panel: Panel,
    n_mc: int = 1000,
    seed: int = 0,
    times: Sequence[int] | None = None,
    max_draws: int | None = None,
    arm: int = 1,
) -> dict[int, EffectEstimate]:
    """Final-time-switch effects at every time point, sharing the system's prefix."""
    times = range(1, system.T + 1) if times is None else times
    return {
        t: effects(system, panel, Contrast.final_switch(t, system.prefix, arm), n_mc, seed, max_draws)
        for t in times
    }
