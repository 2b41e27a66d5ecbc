"""Fitted conditional models and the per-(model, time, arm) system they form.

A cell keyed ``(model, t, arm)`` holds the posterior of one observation
model. Confounder cells use ``arm = -1``: they condition on the treatment
history through ``t - 1`` only.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from .dpm.model import DpmFit, fit_from_arrays, fit_to_arrays

log = logging.getLogger(__name__)

SYSTEM_VERSION = "medchain-system/1"
W_ARM = -1
ETA_CAP = 30.0


class MissingFitError(KeyError):
    def __init__(self, cell):
        self.cell = cell
        model, t, arm = cell
        super().__init__(f"no fitted conditional for model={model} t={t} arm={arm}")

    def __str__(self):
        return self.args[0]


class Basis(Protocol):
    def transform(self, X: np.ndarray) -> np.ndarray: ...
    def to_arrays(self) -> dict[str, np.ndarray]: ...


class Conditional:
    """Posterior of one observation model, indexed by retained draw."""

    family: str
    n_draws: int

    def params(self, draws: np.ndarray, n_rows: int, rng: np.random.Generator):
        """Coefficients ``(P, n_rows|1, p)`` and variances ``(P, n_rows|1)``."""
        raise NotImplementedError

    def expand(self, X: np.ndarray) -> np.ndarray:
        return X

    def linear(self, draws, X, rng):
        beta, sig2 = self.params(draws, X.shape[-2], rng)
        return np.sum(beta * self.expand(X), axis=-1), sig2

    def mean(self, draws, X, offset, rng) -> np.ndarray:
        """Kernel mean of one sampled component per row."""
        eta, _ = self.linear(draws, X, rng)
        return self._link(eta, offset)

    def mixture_mean(self, draws, X, offset) -> np.ndarray:
        """Conditional mean with the mixture integrated exactly, shape ``(P, n)``."""
        raise NotImplementedError

    def _link(self, eta, offset):
        if self.family == "normal":
            return eta
        return offset * np.exp(np.minimum(eta, ETA_CAP))

    def sample(self, draws, X, offset, rng) -> np.ndarray:
        eta, sig2 = self.linear(draws, X, rng)
        if self.family == "normal":
            return eta + np.sqrt(sig2) * rng.standard_normal(eta.shape)
        return rng.poisson(offset * np.exp(np.minimum(eta, ETA_CAP))).astype(float)


@dataclass(eq=False)
class DpmConditional(Conditional):
    fit: DpmFit

    @property
    def family(self) -> str:
        return self.fit.kernel

    @property
    def n_draws(self) -> int:
        return self.fit.n_draws

    def params(self, draws, n_rows, rng):
        # occupied clusters only: under a log link the fresh-component term
        # has a predictive mean with infinite expectation
        return self.fit.draw_params(draws, n_rows, rng, include_new=False)

    def expand(self, X):
        return self.fit.expand(X)

    def mixture_mean(self, draws, X, offset):
        Xe = np.broadcast_to(self.expand(X), (len(draws),) + X.shape[-2:])
        off = 1.0 if offset is None else np.asarray(offset, float)[:, None]
        out = np.empty(Xe.shape[:2])
        for j, r in enumerate(draws):
            beta, _, counts = self.fit.clusters(int(r))
            comp = self._link(Xe[j] @ beta.T, off)
            out[j] = comp @ (counts / counts.sum())
        return out

    def to_arrays(self):
        arrays, header = fit_to_arrays(self.fit)
        return arrays, {"type": "dpm", **header}


@dataclass(eq=False)
class ParametricConditional(Conditional):
    """Normal-theory draws around a point estimate (optionally on a spline basis)."""

    family: str
    coef: np.ndarray
    cov: np.ndarray
    coef_draws: np.ndarray
    sig2_draws: np.ndarray
    basis: Any = None

    @property
    def n_draws(self) -> int:
        return self.coef_draws.shape[0]

    def params(self, draws, n_rows, rng):
        return self.coef_draws[draws][:, None, :], self.sig2_draws[draws][:, None]

    def expand(self, X):
        return X if self.basis is None else self.basis.transform(X)

    def mixture_mean(self, draws, X, offset):
        eta = np.sum(self.expand(X) * self.coef_draws[draws][:, None, :], axis=-1)
        return self._link(eta, offset)

    def to_arrays(self):
        arrays = {"coef": self.coef, "cov": self.cov, "coef_draws": self.coef_draws, "sig2_draws": self.sig2_draws}
        header = {"type": "parametric", "family": self.family, "basis": None}
        if self.basis is not None:
            for k, v in self.basis.to_arrays().items():
                arrays[f"basis_{k}"] = v
            header["basis"] = type(self.basis).__name__
        return arrays, header


@dataclass(eq=False)
class FittedSystem:
    """All fitted conditionals needed to evaluate counterfactual means."""

    label: str
    kind: str
    family: str
    T: int
    prefix: tuple[int, ...]
    cells: dict[tuple[str, int, int], Conditional]
    c: float = 0.1
    states: dict[tuple[str, int, int], Any] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def cell(self, model: str, t: int, arm: int) -> Conditional:
        try:
            return self.cells[(model, t, arm)]
        except KeyError:
            raise MissingFitError((model, t, arm)) from None

    @property
    def n_draws(self) -> int:
        return min(c.n_draws for c in self.cells.values())


def save_system(system: FittedSystem, path: str | Path) -> Path:
    """Write a system to a directory: ``manifest.json`` plus one ``.npz`` per cell."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cells = []
    for (model, t, arm), cond in sorted(system.cells.items()):
        arrays, header = cond.to_arrays()
        name = f"{model}_t{t}_arm{arm}.npz"
        np.savez_compressed(path / name, header=np.array(json.dumps(header)), **arrays)
        cells.append({"model": model, "t": t, "arm": arm, "file": name})
    states = []
    for (model, t, arm), st in sorted(system.states.items()):
        name = f"state_{model}_t{t}_arm{arm}.npz"
        st.save(path / name)
        states.append({"model": model, "t": t, "arm": arm, "file": name})
    manifest = {
        "version": SYSTEM_VERSION, "label": system.label, "kind": system.kind, "family": system.family,
        "T": system.T, "prefix": list(system.prefix), "c": system.c, "cells": cells, "states": states,
        "meta": system.meta,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def load_system(path: str | Path) -> FittedSystem:
    from .baselines import SplineBasis
    from .dynamics import StateSummary

    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("version") != SYSTEM_VERSION:
        raise ValueError(f"unsupported system format {manifest.get('version')!r}")
    cells: dict = {}
    for entry in manifest["cells"]:
        with np.load(path / entry["file"], allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            arrays = {k: z[k] for k in z.files if k != "header"}
        if header["type"] == "dpm":
            cond: Conditional = DpmConditional(fit_from_arrays(arrays, header))
        else:
            basis = None
            if header["basis"]:
                basis = SplineBasis.from_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("basis_")})
            cond = ParametricConditional(header["family"], arrays["coef"], arrays["cov"], arrays["coef_draws"],
                                         arrays["sig2_draws"], basis)
        cells[(entry["model"], entry["t"], entry["arm"])] = cond
    states = {(e["model"], e["t"], e["arm"]): StateSummary.load(path / e["file"]) for e in manifest["states"]}
    return FittedSystem(
        label=manifest["label"], kind=manifest["kind"], family=manifest["family"], T=manifest["T"],
        prefix=tuple(manifest["prefix"]), cells=cells, c=manifest["c"], states=states, meta=manifest["meta"],
    )
