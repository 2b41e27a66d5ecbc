"""Command-line entry point: ``medchain <command> [options]``.

Exit status is 0 on success, 1 for invalid input or configuration and 2
for numerical failures (non-convergence, overflow, too many failed
replications).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from .baselines import fit_model
from .conditionals import load_system, save_system
from .dgp import DgpConfig, DgpError, simulate_panel, true_effects
from .dpm.model import MCMC_PROFILES, DpPrior, Mcmc
from .dynamics import CHECKPOINT_ENV, sequential_fit
from .estimands import Contrast, SensitivitySpec, tilted_effects, write_effects
from .glm import ConvergenceError
from .harness import ESTIMATORS, ORACLE, BenchmarkError, emit_report, format_ppc, ppc, run_benchmark
from .panel import compute_exposure, dichotomize, load_panel, read_emissions, read_links, save_panel

log = logging.getLogger("medchain")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2
MODEL_ALIASES = {"bnpbdm": "bnp_bdm", "bnp-bdm": "bnp_bdm"}


def _load_config(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must be a mapping")
    if not {"dgp", "mcmc", "prior"} & set(data):
        data = {"dgp": data}
    return data


def _dgp_config(cfg: dict[str, Any], **overrides) -> DgpConfig:
    overrides = {k: v for k, v in overrides.items() if v is not None}
    base = DgpConfig.default()
    dgp = dict(cfg.get("dgp", {}))
    for key in ("baseline", "coefficients"):
        if key in dgp:
            merged = dict(getattr(base, key))
            for k, v in dgp.pop(key).items():
                merged[k] = {**merged[k], **v} if isinstance(v, dict) and isinstance(merged.get(k), dict) else v
            dgp[key] = merged
    return DgpConfig.default(**{**dgp, **overrides})


def _mcmc(args, cfg: dict[str, Any]) -> Mcmc:
    n_iter, burn, thin = MCMC_PROFILES[args.profile]
    m = cfg.get("mcmc", {})
    n_iter, burn, thin = m.get("n_iter", n_iter), m.get("burn", burn), m.get("thin", thin)
    return Mcmc(args.n_iter or n_iter, burn if args.burn is None else args.burn, args.thin or thin)


def _prior(cfg: dict[str, Any]) -> DpPrior:
    return DpPrior(**cfg.get("prior", {}))


def _history(text: str | None) -> tuple[int, ...] | None:
    if text is None:
        return None
    if not set(text) <= {"0", "1"}:
        raise ValueError(f"treatment history {text!r} must be a string of 0/1")
    return tuple(int(ch) for ch in text)


def _months(items: Sequence[str]) -> list[int]:
    out: list[int] = []
    for item in items:
        if "-" in item:
            a, b = item.split("-")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(item))
    return out


def _write_json(path: str | None, payload: Any) -> None:
    text = json.dumps(payload, indent=2)
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        print(text)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfg) -> int:
    dgp = _dgp_config(cfg, case=args.case, n=args.n, T=args.T)
    panel = simulate_panel(dgp, seed=args.seed)
    save_panel(panel, args.out)
    log.info("wrote %d units x %d periods to %s", panel.n, panel.T, args.out)
    if args.truth:
        truth = []
        for t in range(1, dgp.T + 1):
            tr = true_effects(dgp, Contrast.final_switch(t), args.truth_nmc, seed=args.seed)
            truth.append({"t": t, "contrast": Contrast.final_switch(t).label, **tr.as_dict(),
                          "se": tr.se_dict(), "n_mc": tr.n_mc})
        _write_json(args.truth, {"case": dgp.case, "truth": truth})
    return EXIT_OK


def cmd_fit(args, cfg) -> int:
    panel = load_panel(args.panel)
    model = MODEL_ALIASES.get(args.model, args.model)
    if args.dynamic and model == "bnp":
        model = "bnp_bdm"
    prefix = _history(args.prefix)
    mcmc, prior = _mcmc(args, cfg), _prior(cfg)
    if model in ("bnp", "bnp_bdm"):
        system = sequential_fit(panel, prefix, prior, mcmc, args.seed, dynamic=model == "bnp_bdm",
                                checkpoint_dir=args.checkpoint_dir)
    else:
        system = fit_model(model, panel, seed=args.seed, mcmc=mcmc, prior=prior, prefix=prefix,
                           n_draws=args.n_draws)
    save_system(system, args.out)
    log.info("wrote %s fit (%d cells, %d draws) to %s", system.label, len(system.cells), system.n_draws, args.out)
    return EXIT_OK


def _contrasts(args, system) -> list[Contrast]:
    if args.contrast:
        return [Contrast.parse(c) for c in args.contrast]
    return [Contrast.final_switch(t, system.prefix) for t in range(1, system.T + 1)]


def cmd_effects(args, cfg) -> int:
    panel = load_panel(args.panel)
    system = load_system(args.fit)
    ests = [tilted_effects(system, panel, c, SensitivitySpec(1.0, args.kappa), args.nmc, args.seed,
                           args.max_draws, args.rate_per) for c in _contrasts(args, system)]
    write_effects(ests, args.out, write_draws=not args.no_draws)
    for e in ests:
        s = e.summary()
        log.info("t=%d %s: TE %.3f NDE %.3f NIE %.3f", e.t, e.contrast.label, s["TE"]["mean"], s["NDE"]["mean"],
                 s["NIE"]["mean"])
    return EXIT_OK


def cmd_sensitivity(args, cfg) -> int:
    panel = load_panel(args.panel)
    system = load_system(args.fit)
    out = []
    for chi in args.chi:
        ests = [tilted_effects(system, panel, c, SensitivitySpec(chi, args.kappa), args.nmc, args.seed,
                               args.max_draws, args.rate_per) for c in _contrasts(args, system)]
        out.extend(e.to_dict() for e in ests)
    _write_json(args.out, {"sensitivity": out})
    return EXIT_OK


def cmd_benchmark(args, cfg) -> int:
    models = [MODEL_ALIASES.get(m, m) for m in args.models]
    dgp = _dgp_config(cfg)
    workers = args.workers or args.threads or 1
    res = run_benchmark(case=args.case, models=models, reps=args.reps, n=args.n, mcmc=_mcmc(args, cfg),
                        seed=args.seed, workers=workers, n_mc=args.nmc, truth_n_mc=args.truth_nmc, T=args.T,
                        cfg=dgp, max_draws=args.max_draws, point=args.point)
    paths = emit_report(res, args.out)
    for r in res.rows:
        if r["effect"] == "TE":
            log.info("%-8s t=%d bias %+.3f mse %.3f", r["model"], r["t"], r["bias"], r["mse"])
    log.info("wrote %s", ", ".join(map(str, paths)))
    return EXIT_OK


def cmd_ppc(args, cfg) -> int:
    panel = load_panel(args.panel)
    systems = [load_system(p) for p in args.fit]
    regime = _history(args.regime)
    results = [ppc(s, panel, regime, args.seed, args.nrep, args.bins) for s in systems]
    payload = {"results": [r.to_dict() for r in results],
               "summary": format_ppc(results[0], results[1] if len(results) > 1 else None)}
    _write_json(args.out, payload)
    return EXIT_OK


def cmd_exposure(args, cfg) -> int:
    levels = compute_exposure(read_emissions(args.emissions), read_links(args.links), _months(args.months),
                              use_log=not args.linear)
    if args.cutoff is not None:
        cutoff = args.cutoff
    else:
        cutoff = float(np.median(list(levels.values()))) if levels else 0.0
    z = dichotomize(levels, cutoff)
    lines = ["zip_id,level,Z"] + [f"{k},{levels[k]!r},{z[k]}" for k in sorted(levels)]
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("cutoff %.6g: %d low-exposure (Z=1), %d high-exposure (Z=0)", cutoff, sum(z.values()),
             len(z) - sum(z.values()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_mcmc(p):
    p.add_argument("--profile", choices=sorted(MCMC_PROFILES), default="desk", help="MCMC length preset")
    p.add_argument("--n-iter", type=int, default=None)
    p.add_argument("--burn", type=int, default=None)
    p.add_argument("--thin", type=int, default=None)


def _add_effect_opts(p):
    p.add_argument("--panel", required=True)
    p.add_argument("--fit", required=True, help="directory written by 'medchain fit'")
    p.add_argument("--contrast", action="append", help="e.g. 0001v0000; repeatable (default: final switches)")
    p.add_argument("--nmc", type=int, default=5000, help="forward paths per posterior draw")
    p.add_argument("--kappa", type=float, default=0.5)
    p.add_argument("--max-draws", type=int, default=None)
    p.add_argument("--rate-per", type=float, default=None, help="report outcomes per this many offset units")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medchain", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"medchain {__version__}")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=None, help="BLAS threads (and default benchmark workers)")
    parser.add_argument("--config", default=None, help="YAML file with dgp/mcmc/prior sections")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a synthetic panel")
    p.add_argument("--case", default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", default=None, help="also write Monte Carlo true effects to this JSON file")
    p.add_argument("--truth-nmc", type=int, default=100_000)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit an estimator and save its conditionals")
    p.add_argument("--panel", required=True)
    p.add_argument("--model", default="bnp_bdm", choices=sorted(set(ESTIMATORS) | set(MODEL_ALIASES)))
    p.add_argument("--dynamic", action="store_true", help="propagate base-measure means over time (bnp)")
    p.add_argument("--prefix", default=None, help="shared treatment history before the final time")
    p.add_argument("--checkpoint-dir", default=None, help=f"resume directory (env {CHECKPOINT_ENV})")
    p.add_argument("--n-draws", type=int, default=200, help="coefficient draws for regression baselines")
    p.add_argument("--out", required=True)
    _add_mcmc(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("effects", help="natural direct, indirect and total effects")
    _add_effect_opts(p)
    p.add_argument("--out", required=True)
    p.add_argument("--no-draws", action="store_true", help="do not write per-draw npz files")
    p.set_defaults(func=cmd_effects)

    p = sub.add_parser("sensitivity", help="effects under exponential tilts of the outcome law")
    _add_effect_opts(p)
    p.add_argument("--chi", type=float, nargs="+", default=[0.6, 0.8, 1.0, 1.2])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("benchmark", help="replication study of bias and MSE")
    p.add_argument("--case", default=1)
    p.add_argument("--models", nargs="+", default=list(ESTIMATORS),
                   choices=sorted(set(ESTIMATORS) | set(MODEL_ALIASES) | {ORACLE}))
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--T", type=int, default=4)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--nmc", type=int, default=1000)
    p.add_argument("--truth-nmc", type=int, default=100_000)
    p.add_argument("--max-draws", type=int, default=None)
    p.add_argument("--point", choices=("median", "mean"), default="median")
    p.add_argument("--out", required=True, help="report directory")
    _add_mcmc(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("ppc", help="posterior-predictive check of the outcome model")
    p.add_argument("--panel", required=True)
    p.add_argument("--fit", required=True, nargs="+", help="one or two fit directories")
    p.add_argument("--regime", default=None, help="treatment sequence, e.g. 0000")
    p.add_argument("--nrep", type=int, default=1)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ppc)

    p = sub.add_parser("exposure", help="zip-level exposure from emissions and trajectory links")
    p.add_argument("--emissions", required=True)
    p.add_argument("--links", required=True)
    p.add_argument("--months", nargs="+", required=True, help="month numbers or ranges like 1-12")
    p.add_argument("--linear", action="store_true", help="use raw emissions instead of their log")
    p.add_argument("--cutoff", type=float, default=None, help="dichotomization cutoff (default: median)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_exposure)
    return parser


def _coerce_case(value):
    try:
        return int(value)
    except (TypeError, ValueError):
        return value


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if hasattr(args, "case"):
        args.case = _coerce_case(args.case)
    limiter = None
    if args.threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    try:
        cfg = _load_config(args.config)
        return args.func(args, cfg)
    except (ConvergenceError, DgpError, BenchmarkError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, OSError, yaml.YAMLError, TypeError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
