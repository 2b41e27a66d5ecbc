from __future__ import annotations

import csv
import json
import re

import jsonschema
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from medchain import harness
from medchain.baselines import fit_parametric
from medchain.conditionals import FittedSystem, ParametricConditional
from medchain.dgp import DgpConfig, simulate_panel
from medchain.dpm.model import Mcmc
from medchain.harness import (
    BenchmarkError,
    BenchResult,
    emit_report,
    format_ppc,
    ppc,
    read_report,
    run_benchmark,
    summarize,
)

from helpers import linear_gaussian_cfg

TINY = dict(n=250, T=2, n_mc=1000, truth_n_mc=20_000, max_draws=20, n_draws=50)


@pytest.fixture(scope="module")
def tiny_result():
    return run_benchmark(case=1, models=("reg2", "oracle"), reps=2, seed=3, mcmc=Mcmc(200, 50, 2),
                         oracle_n_mc=5000, **TINY)


def test_tiny_benchmark_is_finite(tiny_result):
    res = tiny_result
    assert res.reps_ok == 2 and len(res.rows) == 2 * 2 * 3
    for r in res.rows:
        for k in ("truth", "truth_se", "bias", "mse", "bias_se", "mse_se"):
            assert np.isfinite(r[k]), (k, r)
        assert r["mse"] >= r["bias"] ** 2
    assert res.runtime["wall_seconds"] > 0 and "reg2" in res.runtime["per_model_seconds"]


def test_result_invariants():
    with pytest.raises(ValueError):
        BenchResult(case=1, models=(), n=1, T=1, seed=0, reps=2, reps_ok=0, mcmc=(2, 1, 1), n_mc=1, truth_n_mc=1,
                    point="median", truth={}, estimates={}, rows=[])


def test_oracle_as_estimator():
    res = run_benchmark(case=1, models=("oracle",), reps=12, n=100, T=2, seed=1, truth_n_mc=100_000,
                        oracle_n_mc=20_000)
    for r in res.rows:
        combined = np.hypot(r["bias_se"], r["truth_se"])
        assert abs(r["bias"]) <= 3 * combined, r
        # replicate estimates use 5x fewer paths than the truth
        ratio = r["mse"] / (5 * r["truth_se"] ** 2 + r["truth_se"] ** 2)
        assert 0.2 <= ratio <= 4.0, r


def _naive(errors):
    e = np.asarray(errors, float)
    k = len(e)
    return e.mean(), np.mean(e**2), e.std(ddof=1) / np.sqrt(k), np.std(e**2, ddof=1) / np.sqrt(k)


@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=60), st.floats(-50, 50))
def test_accumulators_match_two_pass(values, truth):
    est = {"m": {1: {e: list(values) for e in harness.EFFECTS}}}
    rows = summarize(est, {1: {e: (truth, 0.1) for e in harness.EFFECTS}}, ["m"], 1)
    bias, mse, bse, mse_se = _naive(np.asarray(values) - truth)
    scale = 1.0 + mse
    for r in rows:
        assert abs(r["bias"] - bias) <= 1e-10 * scale
        assert abs(r["mse"] - mse) <= 1e-10 * scale
        assert abs(r["bias_se"] - bse) <= 1e-10 * scale
        assert abs(r["mse_se"] - mse_se) <= 1e-10 * scale * (1.0 + mse)
        assert r["mse"] >= r["bias"] ** 2 - 1e-12 * scale


REPORT_SCHEMA = {
    "type": "object",
    "required": ["case", "models", "reps", "reps_ok", "rows", "truth", "runtime"],
    "properties": {
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["model", "effect", "t", "bias", "mse", "bias_se", "mse_se", "truth", "truth_se"],
                "properties": {
                    "effect": {"enum": ["NDE", "NIE", "TE"]},
                    "t": {"type": "integer", "minimum": 1},
                    "mse": {"type": "number", "minimum": 0},
                },
            },
        },
        "reps_ok": {"type": "integer", "minimum": 1},
    },
}


def test_report_round_trip(tmp_path, tiny_result):
    paths = emit_report(tiny_result, tmp_path / "out")
    assert [p.name for p in paths] == ["benchmark.csv", "benchmark.json"]
    back = read_report(tmp_path / "out" / "benchmark.json")
    assert back.to_json() == tiny_result.to_json()
    doc = json.loads((tmp_path / "out" / "benchmark.json").read_text())
    jsonschema.validate(doc, REPORT_SCHEMA)
    with open(tmp_path / "out" / "benchmark.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == harness.REPORT_COLUMNS
    assert {(r["model"], r["effect"], int(r["t"])) for r in rows} == \
        {(r["model"], r["effect"], r["t"]) for r in tiny_result.rows}
    for col in ("bias", "mse", "truth"):
        assert abs(sum(float(r[col]) for r in rows) - sum(r[col] for r in tiny_result.rows)) <= 1e-12


def test_unwritable_report_path(tmp_path, tiny_result):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(tiny_result, blocker / "sub")
    with pytest.raises(ValueError):
        emit_report(tiny_result, tmp_path / "ok", formats=("xml",))


def test_determinism_across_workers():
    kw = dict(case=2, models=("reg2", "bnp_bdm"), reps=3, seed=17, mcmc=Mcmc(200, 50, 2), **TINY)
    assert run_benchmark(workers=1, **kw).to_json() == run_benchmark(workers=2, **kw).to_json()


def test_too_many_failures_abort():
    with pytest.raises(BenchmarkError) as exc:
        run_benchmark(models=("reg2",), reps=3, n=6, T=2, truth_n_mc=2000)
    assert len(exc.value.failures) == 3 and "EmptyArmError" in exc.value.failures[0]["error"]


def _fail_rep_one(task):
    out = harness._REAL_REPLICATE(task)
    if task["rep"] == 1:
        out["errors"].append({"rep": 1, "model": "reg2", "error": "RuntimeError: injected"})
    return out


def test_failed_replications_are_excluded(monkeypatch):
    harness._REAL_REPLICATE = harness._replicate
    monkeypatch.setattr(harness, "_replicate", _fail_rep_one)
    res = run_benchmark(models=("reg2",), reps=20, seed=2, **{**TINY, "n_mc": 1000, "max_draws": 5})
    assert res.reps_ok == 19 and res.failures[0]["rep"] == 1
    assert all(r["n_reps"] == 19 for r in res.rows)


def test_argument_checks():
    with pytest.raises(ValueError, match="reps"):
        run_benchmark(reps=1)
    with pytest.raises(ValueError, match="unknown models"):
        run_benchmark(models=("svm",), reps=2)


# ---------------------------------------------------------------------------
# posterior-predictive checks


def _intercept_only(system: FittedSystem, panel) -> FittedSystem:
    """Outcome cells replaced by one intercept per time, pooled over both arms."""
    cells = dict(system.cells)
    for t in range(1, system.T + 1):
        mask = panel.regime_mask(t, system.prefix[: t - 1])
        y = panel.Y[mask, t - 1]
        p = len(system.cells[("Y", t, 0)].coef)
        coef = np.zeros(p)
        coef[0] = y.mean()
        R = system.cells[("Y", t, 0)].n_draws
        cond = ParametricConditional("normal", coef, np.zeros((p, p)), np.tile(coef, (R, 1)), np.full(R, y.var()))
        cells[("Y", t, 0)] = cells[("Y", t, 1)] = cond
    return FittedSystem(**{**system.__dict__, "cells": cells, "label": "intercept"})


def test_ppc_self_consistency():
    panel = simulate_panel(linear_gaussian_cfg(n=2000, T=2), seed=4)
    system = fit_parametric(panel, "reg2", n_draws=200, seed=1)
    for regime in ((0, 0), (0, 1)):
        res = ppc(system, panel, regime, seed=3)
        for s in res.stats:
            assert s["abs_diff"] <= 3 * np.sqrt(2) * s["mc_se"], s


def test_ppc_detects_misspecification():
    wins = 0
    for seed in range(20):
        panel = simulate_panel(linear_gaussian_cfg(n=600, T=2, bz_m=-1.5, g_m=1.0), seed=100 + seed)
        good = fit_parametric(panel, "reg2", n_draws=100, seed=seed)
        bad = _intercept_only(good, panel)
        g = ppc(good, panel, (0, 0), seed=seed, n_rep=20)
        b = ppc(bad, panel, (0, 0), seed=seed, n_rep=20)
        wins += max(b.differences()) > max(g.differences())
    assert wins >= 18


def test_ppc_outputs_and_format(reg2_system, small_panel):
    res = ppc(reg2_system, small_panel, (0, 1), seed=0, n_rep=3, bins=10)
    assert [s["t"] for s in res.stats] == [1, 2]
    h = res.histograms[2]
    assert len(h["edges"]) == 11 and sum(h["observed"]) == res.stats[1]["n"]
    assert sum(h["replicated"]) == pytest.approx(res.stats[1]["n"])
    assert res.replicates[1].shape == (3, res.stats[0]["n"])
    assert re.fullmatch(r"\d+\.\d\d \(\d+\.\d\d\), \d+\.\d\d \(\d+\.\d\d\)", format_ppc(res, res))
    assert re.fullmatch(r"\d+\.\d\d, \d+\.\d\d", format_ppc(res))
    json.dumps(res.to_dict())


def test_ppc_regime_errors(reg2_system, small_panel):
    with pytest.raises(ValueError, match="prefix"):
        ppc(reg2_system, small_panel, (1, 0))
    with pytest.raises(ValueError, match="length"):
        ppc(reg2_system, small_panel, (0, 0, 0))
