"""Regressor construction for the confounder, mediator and outcome models.

Histories are dicts of arrays whose last axis runs over time ``0..T``
(index 0 is the baseline) and whose leading axes are arbitrary, so the same
builders serve observed panels ``(n, T+1)`` and simulated paths
``(draws, paths, T+1)``. ``V`` is ``(n, k)`` and broadcasts over extra
leading axes.
"""

from __future__ import annotations

import numpy as np

MODELS = ("W", "M", "Y")
ONE_STEP = "onestep"
FULL = "full"


def lag_transform(y: np.ndarray, family: str, c: float = 0.1) -> np.ndarray:
    """``log(y + c)`` for count outcomes, identity for continuous ones."""
    return np.log(y + c) if family == "poisson" else y


def columns(model: str, t: int, kind: str, v_names: tuple[str, ...]) -> list[str]:
    """Column labels matching :func:`design`."""
    if model == "W":
        lags = [f"M{t - 1}", f"W{t - 1}"] if kind == ONE_STEP else [f"M{h}" for h in range(t)] + [f"W{h}" for h in range(t)]
    elif model == "M":
        lags = [f"M{t - 1}", f"W{t}"] if kind == ONE_STEP else [f"M{h}" for h in range(t)] + [f"W{h}" for h in range(1, t + 1)]
    elif model == "Y":
        if kind == ONE_STEP:
            lags = [f"M{t}", f"W{t}", f"gY{t - 1}"]
        else:
            lags = [f"M{h}" for h in range(1, t + 1)] + [f"W{h}" for h in range(1, t + 1)] + [f"gY{h}" for h in range(t)]
    else:
        raise ValueError(f"unknown model {model!r}")
    return ["1", *lags, *v_names]


def time_varying(model: str, t: int, kind: str, v_dim: int) -> np.ndarray:
    """Indices of the non-intercept, non-baseline-covariate columns."""
    p = len(columns(model, t, kind, ("",) * v_dim))
    return np.arange(1, p - v_dim)


def design(model: str, t: int, hist: dict[str, np.ndarray], kind: str = ONE_STEP,
           family: str = "poisson", c: float = 0.1) -> np.ndarray:
    """Design matrix for ``model`` at time ``t`` (1-based)."""
    if t < 1:
        raise ValueError("t must be >= 1")
    M, W, Y, V = hist["M"], hist["W"], hist["Y"], hist["V"]
    lead = M.shape[:-1]

    def sl(a, lo, hi):
        return a[..., lo:hi]

    if model == "W":
        parts = [sl(M, t - 1, t), sl(W, t - 1, t)] if kind == ONE_STEP else [sl(M, 0, t), sl(W, 0, t)]
    elif model == "M":
        parts = [sl(M, t - 1, t), sl(W, t, t + 1)] if kind == ONE_STEP else [sl(M, 0, t), sl(W, 1, t + 1)]
    elif model == "Y":
        gY = lag_transform(sl(Y, 0, t), family, c)
        if kind == ONE_STEP:
            parts = [sl(M, t, t + 1), sl(W, t, t + 1), gY[..., t - 1:t]]
        else:
            parts = [sl(M, 1, t + 1), sl(W, 1, t + 1), gY]
    else:
        raise ValueError(f"unknown model {model!r}")
    if kind not in (ONE_STEP, FULL):
        raise ValueError(f"unknown design kind {kind!r}")
    Vb = np.broadcast_to(V, lead + V.shape[-1:])
    return np.concatenate([np.ones(lead + (1,)), *parts, Vb], axis=-1)


def response(model: str, t: int, hist: dict[str, np.ndarray]) -> np.ndarray:
    return hist[model][..., t]
