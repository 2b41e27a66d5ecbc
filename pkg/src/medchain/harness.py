"""Replication benchmark, posterior-predictive checks and report emission.

Each replication simulates a panel with its own seed stream, fits every
requested estimator, and records final-time-switch effect estimates. The
ground truth is computed once per case. Replications run in a process pool
with BLAS limited to one thread per worker, and results are reduced in
replication order, so the output does not depend on the worker count.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .baselines import fit_model
from .conditionals import FittedSystem
from .design import design, response
from .dgp import DgpConfig, simulate_panel, true_effects
from .dpm.model import Mcmc
from .estimands import Contrast, effects
from .panel import Panel

log = logging.getLogger(__name__)

ESTIMATORS = ("reg1", "reg2", "gam", "bnp", "bnp_bdm")
ORACLE = "oracle"
EFFECTS = ("NDE", "NIE", "TE")
MAX_FAILURE_RATE = 0.05
_MODEL_SEED = {"reg1": 1, "reg2": 2, "gam": 3, "bnp": 4, "bnp_bdm": 5, ORACLE: 6}


class BenchmarkError(RuntimeError):
    """Raised when too many replications fail."""

    def __init__(self, message: str, failures: list[dict[str, Any]]):
        super().__init__(message)
        self.failures = failures


@dataclass
class BenchResult:
    """Bias and MSE of point estimates against the Monte Carlo truth.

    ``rows`` holds one record per (model, effect, t). ``estimates`` keeps the
    per-replication point estimates the rows were computed from. ``runtime``
    is excluded from :meth:`to_json` so identical runs serialize identically.
    """

    case: int | str
    models: tuple[str, ...]
    n: int
    T: int
    seed: int
    reps: int
    reps_ok: int
    mcmc: tuple[int, int, int]
    n_mc: int
    truth_n_mc: int
    point: str
    truth: dict[int, dict[str, tuple[float, float]]]
    estimates: dict[str, dict[int, dict[str, list[float]]]]
    rows: list[dict[str, Any]]
    failures: list[dict[str, Any]] = field(default_factory=list)
    runtime: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.reps_ok <= 0:
            raise ValueError("a benchmark result needs at least one successful replication")
        for r in self.rows:
            if r["mse"] < r["bias"] ** 2 * (1 - 1e-12) - 1e-300:
                raise ValueError(f"MSE below squared bias in row {r}")

    def row(self, model: str, effect: str, t: int) -> dict[str, Any]:
        for r in self.rows:
            if r["model"] == model and r["effect"] == effect and r["t"] == t:
                return r
        raise KeyError((model, effect, t))

    def to_dict(self, include_runtime: bool = False) -> dict[str, Any]:
        d = {
            "case": self.case, "models": list(self.models), "n": self.n, "T": self.T, "seed": self.seed,
            "reps": self.reps, "reps_ok": self.reps_ok, "mcmc": list(self.mcmc), "n_mc": self.n_mc,
            "truth_n_mc": self.truth_n_mc, "point": self.point,
            "truth": {str(t): {k: list(v) for k, v in eff.items()} for t, eff in self.truth.items()},
            "estimates": {m: {str(t): dict(e) for t, e in by_t.items()} for m, by_t in self.estimates.items()},
            "rows": self.rows, "failures": self.failures,
        }
        if include_runtime:
            d["runtime"] = self.runtime
        return d

    def to_json(self, include_runtime: bool = False) -> str:
        return json.dumps(self.to_dict(include_runtime), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BenchResult":
        return cls(
            case=d["case"], models=tuple(d["models"]), n=d["n"], T=d["T"], seed=d["seed"], reps=d["reps"],
            reps_ok=d["reps_ok"], mcmc=tuple(d["mcmc"]), n_mc=d["n_mc"], truth_n_mc=d["truth_n_mc"],
            point=d["point"],
            truth={int(t): {k: tuple(v) for k, v in e.items()} for t, e in d["truth"].items()},
            estimates={m: {int(t): {k: list(v) for k, v in e.items()} for t, e in by_t.items()}
                       for m, by_t in d["estimates"].items()},
            rows=d["rows"], failures=d.get("failures", []), runtime=d.get("runtime", {}),
        )


class _Moments:
    """One-pass accumulator for the error and squared error."""

    def __init__(self):
        self.k = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.sq_mean = 0.0
        self.sq_m2 = 0.0

    def push(self, err: float) -> None:
        self.k += 1
        d = err - self.mean
        self.mean += d / self.k
        self.m2 += d * (err - self.mean)
        s = err * err
        d2 = s - self.sq_mean
        self.sq_mean += d2 / self.k
        self.sq_m2 += d2 * (s - self.sq_mean)

    def se(self, m2: float) -> float:
        return math.sqrt(m2 / (self.k - 1) / self.k) if self.k > 1 else float("nan")


def summarize(estimates, truth, models, T) -> list[dict[str, Any]]:
    """Bias, MSE and their replication SEs per (model, effect, t)."""
    rows = []
    for model in models:
        for t in range(1, T + 1):
            for eff in EFFECTS:
                value, tse = truth[t][eff]
                acc = _Moments()
                for x in estimates[model][t][eff]:
                    acc.push(x - value)
                rows.append({
                    "model": model, "effect": eff, "t": t, "truth": value, "truth_se": tse,
                    "bias": acc.mean, "bias_se": acc.se(acc.m2), "mse": acc.sq_mean, "mse_se": acc.se(acc.sq_m2),
                    "n_reps": acc.k,
                })
    return rows


def _rep_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(rep)]).generate_state(1)[0])


def _init_worker():
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=1)
    warnings.simplefilter("ignore", RuntimeWarning)


def _replicate(task: dict[str, Any]) -> dict[str, Any]:
    rep, cfg, models = task["rep"], task["cfg"], task["models"]
    rseed = _rep_seed(task["seed"], rep)
    out: dict[str, Any] = {"rep": rep, "estimates": {}, "timing": {}, "errors": []}
    try:
        panel = simulate_panel(cfg, seed=rseed)
    except Exception as exc:  # recorded, the replication is excluded
        out["errors"].append({"rep": rep, "model": "simulate", "error": f"{type(exc).__name__}: {exc}"})
        return out
    mcmc = Mcmc(*task["mcmc"])
    for model in models:
        t0 = time.perf_counter()
        mseed = [rseed, _MODEL_SEED[model]]
        try:
            by_t = {}
            if model == ORACLE:
                for t in range(1, cfg.T + 1):
                    tr = true_effects(cfg, Contrast.final_switch(t), task["oracle_n_mc"], seed=_rep_seed(rseed, t))
                    by_t[t] = tr.as_dict()
            else:
                fseed = int(np.random.SeedSequence(mseed).generate_state(1)[0])
                system = fit_model(model, panel, seed=fseed, mcmc=mcmc, n_draws=task["n_draws"])
                for t in range(1, cfg.T + 1):
                    est = effects(system, panel, Contrast.final_switch(t, system.prefix), task["n_mc"],
                                  seed=fseed + t, max_draws=task["max_draws"])
                    by_t[t] = {eff: est.point(eff, task["point"]) for eff in EFFECTS}
            bad = [k for v in by_t.values() for k, x in v.items() if not np.isfinite(x)]
            if bad:
                raise FloatingPointError(f"non-finite estimates for {sorted(set(bad))}")
            out["estimates"][model] = by_t
        except Exception as exc:  # recorded, the replication is excluded
            log.debug("replication %d model %s failed:\n%s", rep, model, traceback.format_exc())
            out["errors"].append({"rep": rep, "model": model, "error": f"{type(exc).__name__}: {exc}"})
        out["timing"][model] = time.perf_counter() - t0
    return out


def case_truth(cfg: DgpConfig, n_mc: int = 100_000, seed: int = 0) -> dict[int, dict[str, tuple[float, float]]]:
    """Monte Carlo truth ``{t: {effect: (value, se)}}`` for final-time switches."""
    out = {}
    for t in range(1, cfg.T + 1):
        tr = true_effects(cfg, Contrast.final_switch(t), n_mc, seed=seed)
        out[t] = {k: (tr.as_dict()[k], tr.se_dict()[k]) for k in EFFECTS}
    return out


def run_benchmark(
    case: int | str = 1,
    models: Sequence[str] = ESTIMATORS,
    reps: int = 50,
    n: int = 500,
    mcmc: Mcmc | str = "desk",
    seed: int = 0,
    workers: int = 1,
    n_mc: int = 1000,
    truth_n_mc: int = 100_000,
    T: int = 4,
    cfg: DgpConfig | None = None,
    n_draws: int = 200,
    max_draws: int | None = None,
    oracle_n_mc: int = 20_000,
    point: str = "median",
) -> BenchResult:
    """Simulate ``reps`` panels, fit ``models`` and tabulate bias/MSE against the truth.

    ``models`` may include ``"oracle"``, which reports the truth recomputed
    with ``oracle_n_mc`` paths and a replication-specific seed. ``point``
    selects the posterior median (default) or mean as the point estimate.
    """
    if reps < 2:
        raise ValueError("reps must be at least 2")
    unknown = [m for m in models if m not in ESTIMATORS + (ORACLE,)]
    if unknown:
        raise ValueError(f"unknown models {unknown}; known: {ESTIMATORS + (ORACLE,)}")
    if point not in ("mean", "median"):
        raise ValueError("point must be 'mean' or 'median'")
    if isinstance(mcmc, str):
        mcmc = Mcmc.profile(mcmc)
    cfg = (cfg or DgpConfig.default()).replace(case=case, n=n, T=T)
    models = tuple(models)
    t_start = time.perf_counter()
    truth = case_truth(cfg, truth_n_mc, seed)
    t_truth = time.perf_counter() - t_start
    tasks = [{"rep": r, "cfg": cfg, "models": models, "seed": seed, "mcmc": (mcmc.n_iter, mcmc.burn, mcmc.thin),
              "n_mc": n_mc, "n_draws": n_draws, "max_draws": max_draws, "oracle_n_mc": oracle_n_mc,
              "point": point} for r in range(reps)]
    with ProcessPoolExecutor(max_workers=max(1, int(workers)), initializer=_init_worker) as pool:
        results = list(pool.map(_replicate, tasks, chunksize=1))

    failures = [e for r in results for e in r["errors"]]
    failed_reps = sorted({e["rep"] for e in failures})
    if len(failed_reps) > MAX_FAILURE_RATE * reps:
        raise BenchmarkError(
            f"{len(failed_reps)} of {reps} replications failed (limit {MAX_FAILURE_RATE:.0%}): "
            + "; ".join(f"rep {e['rep']} {e['model']}: {e['error']}" for e in failures[:5]),
            failures,
        )
    if failed_reps:
        log.warning("excluding %d failed replications: %s", len(failed_reps), failed_reps)
    ok = [r for r in results if r["rep"] not in failed_reps]
    estimates = {m: {t: {eff: [r["estimates"][m][t][eff] for r in ok] for eff in EFFECTS}
                     for t in range(1, T + 1)} for m in models}
    timing = {m: [r["timing"][m] for r in results if m in r["timing"]] for m in models}
    runtime = {
        "wall_seconds": time.perf_counter() - t_start, "truth_seconds": t_truth, "workers": int(workers),
        "per_model_seconds": {m: {"mean": float(np.mean(v)), "max": float(np.max(v))} for m, v in timing.items() if v},
    }
    return BenchResult(
        case=case, models=models, n=n, T=T, seed=seed, reps=reps, reps_ok=len(ok),
        mcmc=(mcmc.n_iter, mcmc.burn, mcmc.thin), n_mc=n_mc, truth_n_mc=truth_n_mc, point=point,
        truth=truth, estimates=estimates, rows=summarize(estimates, truth, models, T), failures=failures,
        runtime=runtime,
    )


# ---------------------------------------------------------------------------
# reports

REPORT_COLUMNS = ("case", "model", "effect", "t", "truth", "truth_se", "bias", "bias_se", "mse", "mse_se", "n_reps")


def emit_report(result: BenchResult, out_dir: str | Path, formats: Sequence[str] = ("csv", "json")) -> list[Path]:
    """Write the long-format table (CSV) and the full result (JSON) to ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out_dir}: {exc}") from exc
    written = []
    for fmt in formats:
        if fmt == "csv":
            path = out_dir / "benchmark.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
                w.writeheader()
                for r in result.rows:
                    w.writerow({"case": result.case, **{k: r[k] for k in REPORT_COLUMNS[1:]}})
        elif fmt == "json":
            path = out_dir / "benchmark.json"
            path.write_text(json.dumps(result.to_dict(include_runtime=True), indent=2, sort_keys=True),
                            encoding="utf-8")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        written.append(path)
    return written


def read_report(path: str | Path) -> BenchResult:
    return BenchResult.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# posterior-predictive checks


@dataclass
class PpcResult:
    """Replicated outcomes under one treatment regime, compared with the data per time."""

    label: str
    regime: tuple[int, ...]
    stats: list[dict[str, float]]
    replicates: dict[int, np.ndarray]
    observed: dict[int, np.ndarray]
    histograms: dict[int, dict[str, list[float]]]

    def differences(self) -> list[float]:
        return [s["abs_diff"] for s in self.stats]

    def to_dict(self) -> dict[str, Any]:
        return {"label": self.label, "regime": list(self.regime), "stats": self.stats,
                "histograms": {str(t): h for t, h in self.histograms.items()}}


def ppc(
    system: FittedSystem,
    panel: Panel,
    regime: Sequence[int] | None = None,
    seed: int = 0,
    n_rep: int = 1,
    bins: int = 20,
) -> PpcResult:
    """Posterior-predictive replicates of the outcome at each time under ``regime``.

    At each ``t`` the units that followed ``regime`` through ``t`` keep their
    observed predictors; their outcome is redrawn ``n_rep`` times, each time
    from a randomly chosen posterior draw of the fitted outcome model.
    """
    T = system.T
    regime = tuple(int(z) for z in (regime if regime is not None else (0,) * T))
    if len(regime) != T:
        raise ValueError(f"regime {regime} has length {len(regime)}, system horizon is {T}")
    if regime[: T - 1] != tuple(system.prefix[: T - 1]):
        raise ValueError(f"regime {regime} does not follow the fitted treatment prefix {system.prefix}; "
                         "only the final arm may differ")
    if n_rep < 1:
        raise ValueError("n_rep must be positive")
    rng = np.random.default_rng(seed)
    fam = "poisson" if system.family == "poisson" else "gaussian"
    H = panel.history()
    stats, reps, obs, hists = [], {}, {}, {}
    for t in range(1, T + 1):
        arm = regime[t - 1]
        mask = panel.regime_mask(t, regime[: t - 1], arm)
        if not mask.any():
            raise ValueError(f"no units follow regime {regime[:t]} at t={t}")
        hist = {k: v[mask] for k, v in H.items()}
        X = design("Y", t, hist, system.kind, fam, system.c)
        y = response("Y", t, hist)
        cell = system.cell("Y", t, arm)
        draws = rng.integers(0, cell.n_draws, n_rep)
        yrep = cell.sample(draws, X, hist["offset"][:, t], rng)
        means = yrep.mean(axis=1)
        diff = float(means.mean() - y.mean())
        if n_rep > 1:
            se = float(means.std(ddof=1) / math.sqrt(n_rep))
        else:
            se = float(yrep.std(ddof=1) / math.sqrt(yrep.shape[1]))
        edges = np.histogram_bin_edges(np.concatenate([y, yrep.ravel()]), bins=bins)
        hists[t] = {"edges": edges.tolist(), "observed": np.histogram(y, edges)[0].tolist(),
                    "replicated": (np.histogram(yrep.ravel(), edges)[0] / n_rep).tolist()}
        stats.append({"t": t, "n": int(mask.sum()), "mean_obs": float(y.mean()), "mean_rep": float(means.mean()),
                      "diff": diff, "abs_diff": abs(diff), "mc_se": se})
        reps[t], obs[t] = yrep, y
    return PpcResult(system.label, regime, stats, reps, obs, hists)


def format_ppc(primary: PpcResult, other: PpcResult | None = None, digits: int = 2) -> str:
    """Per-time absolute mean differences, ``a (b)`` when a second model is given."""
    a = primary.differences()
    if other is None:
        return ", ".join(f"{x:.{digits}f}" for x in a)
    b = other.differences()
    if len(a) != len(b):
        raise ValueError("PPC results cover different horizons")
    return ", ".join(f"{x:.{digits}f} ({y:.{digits}f})" for x, y in zip(a, b))


__all__ = [
    "BenchResult", "BenchmarkError", "run_benchmark", "case_truth", "summarize", "emit_report", "read_report",
    "ppc", "PpcResult", "format_ppc", "ESTIMATORS", "ORACLE",
]
