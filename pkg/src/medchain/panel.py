"""Longitudinal panel data model, validation, CSV I/O and exposure construction."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

BASE_COLUMNS = ["unit_id", "t", "Z", "W", "M", "Y", "offset"]
BASELINE_COLUMNS = ["Y0", "M0", "W0"]


class PanelValidationError(ValueError):
    """Raised when a panel violates its invariants.

    ``violations`` holds ``(unit, t, field, message)`` tuples; ``t`` is None
    for unit-level (baseline) problems.
    """

    def __init__(self, violations: list[tuple]):
        self.violations = list(violations)
        head = "; ".join(f"unit={u} t={t} field={f}: {m}" for u, t, f, m in self.violations[:10])
        more = "" if len(self.violations) <= 10 else f" (+{len(self.violations) - 10} more)"
        super().__init__(f"{len(self.violations)} panel violation(s): {head}{more}")


class SchemaError(ValueError):
    pass


class ExposureError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Panel:
    """Complete longitudinal record for ``n`` units over ``T`` time points.

    Time-varying arrays are ``(n, T)`` with column ``j`` holding time ``j + 1``.
    ``V`` is ``(n, k)``; ``Y0``, ``M0``, ``W0`` are the t=0 baseline values.
    """

    unit_id: np.ndarray
    Z: np.ndarray
    W: np.ndarray
    M: np.ndarray
    Y: np.ndarray
    offset: np.ndarray
    V: np.ndarray
    Y0: np.ndarray
    M0: np.ndarray
    W0: np.ndarray
    v_names: tuple[str, ...] = field(default=())
    # "count" panels carry Poisson counts; "continuous" is used for
    # Gaussian-outcome reductions and skips the integer checks.
    outcome: str = "count"

    def __post_init__(self):
        for name in ("Z", "W", "M", "Y", "offset", "V", "Y0", "M0", "W0"):
            arr = getattr(self, name)
            arr.setflags(write=False)
        if not self.v_names:
            object.__setattr__(self, "v_names", tuple(f"V{j + 1}" for j in range(self.V.shape[1])))

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def T(self) -> int:
        return self.Z.shape[1]

    def subset(self, mask: np.ndarray) -> "Panel":
        mask = np.asarray(mask)
        return Panel(
            unit_id=self.unit_id[mask], Z=self.Z[mask], W=self.W[mask], M=self.M[mask],
            Y=self.Y[mask], offset=self.offset[mask], V=self.V[mask], Y0=self.Y0[mask],
            M0=self.M0[mask], W0=self.W0[mask], v_names=self.v_names, outcome=self.outcome,
        )

    def history(self) -> dict[str, np.ndarray]:
        """Series indexed 0..T along the last axis (index 0 is the baseline)."""
        return {
            "M": np.column_stack([self.M0, self.M]),
            "W": np.column_stack([self.W0, self.W]),
            "Y": np.column_stack([self.Y0, self.Y]).astype(float),
            "offset": np.column_stack([self.offset[:, :1], self.offset]),
            "V": self.V,
        }

    def regime_mask(self, t: int, prefix: Iterable[int], arm: int | None = None) -> np.ndarray:
        """Units whose treatment history follows ``prefix`` through ``t - 1``.

        With ``arm`` given, additionally require ``Z(t) == arm``.
        """
        prefix = np.asarray(list(prefix), dtype=int)[: t - 1]
        mask = np.all(self.Z[:, : t - 1] == prefix, axis=1) if t > 1 else np.ones(self.n, bool)
        if arm is not None:
            mask &= self.Z[:, t - 1] == arm
        return mask


def validate_panel(panel: Panel) -> list[tuple]:
    """Return every invariant violation as ``(unit, t, field, message)``."""
    out: list[tuple] = []
    n, T = panel.Z.shape
    for name in ("W", "M", "Y", "offset"):
        if getattr(panel, name).shape != (n, T):
            out.append((None, None, name, f"shape {getattr(panel, name).shape} != {(n, T)}"))
    if out:
        return out
    ids = panel.unit_id

    def scan(arr, bad, fld, msg):
        for i, j in zip(*np.nonzero(bad)):
            out.append((ids[i], int(j) + 1, fld, msg))

    for name in ("Z", "W", "M", "Y", "offset"):
        arr = np.asarray(getattr(panel, name), dtype=float)
        scan(arr, ~np.isfinite(arr), name, "missing or non-finite")
    Z = np.asarray(panel.Z, dtype=float)
    scan(Z, np.isfinite(Z) & (Z != 0) & (Z != 1), "Z", "must be 0 or 1")
    Y = np.asarray(panel.Y, dtype=float)
    if panel.outcome == "count":
        scan(Y, np.isfinite(Y) & ((Y < 0) | (Y != np.round(Y))), "Y", "must be a nonnegative integer")
    off = np.asarray(panel.offset, dtype=float)
    scan(off, np.isfinite(off) & (off <= 0), "offset", "must be positive")
    for name in ("Y0", "M0", "W0"):
        arr = np.asarray(getattr(panel, name), dtype=float)
        for i in np.nonzero(~np.isfinite(arr))[0]:
            out.append((ids[i], None, name, "missing or non-finite"))
    y0 = np.asarray(panel.Y0, dtype=float)
    if panel.outcome == "count":
        for i in np.nonzero(np.isfinite(y0) & ((y0 < 0) | (y0 != np.round(y0))))[0]:
            out.append((ids[i], None, "Y0", "must be a nonnegative integer"))
    V = np.asarray(panel.V, dtype=float)
    for i, j in zip(*np.nonzero(~np.isfinite(V))):
        out.append((ids[i], None, panel.v_names[j], "missing or non-finite"))
    if len(set(ids.tolist())) != n:
        out.append((None, None, "unit_id", "duplicate unit ids"))
    return out


def load_panel(path: str | Path) -> Panel:
    """Read a long-format panel CSV (one row per unit and time)."""
    try:
        df = pd.read_csv(path, dtype={"unit_id": str}, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise SchemaError(f"cannot parse panel file {path}: {exc}") from exc
    return panel_from_frame(df)


def panel_from_frame(df: pd.DataFrame) -> Panel:
    v_cols = sorted((c for c in df.columns if c.startswith("V") and c[1:].isdigit()), key=lambda c: int(c[1:]))
    required = BASE_COLUMNS + BASELINE_COLUMNS
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise SchemaError(
            f"missing required column(s) {missing}; required: {','.join(BASE_COLUMNS)},V1..Vk,{','.join(BASELINE_COLUMNS)}"
        )
    df = df.copy()
    df["unit_id"] = df["unit_id"].astype(str)
    violations: list[tuple] = []

    times = pd.to_numeric(df["t"], errors="coerce")
    if times.isna().any():
        raise SchemaError("column t must be integer")
    df["t"] = times.astype(int)
    T = int(df["t"].max())
    units = list(dict.fromkeys(df["unit_id"]))
    counts = df.groupby("unit_id", sort=False)["t"].apply(lambda s: sorted(s.tolist()))
    for u in units:
        if counts[u] != list(range(1, T + 1)):
            violations.append((u, None, "t", f"expected times 1..{T}, got {counts[u]}"))
    for c in ["Z", "W", "M", "Y", "offset", *BASELINE_COLUMNS, *v_cols]:
        df[c] = pd.to_numeric(df[c], errors="coerce")
    for c in BASELINE_COLUMNS + v_cols:
        spread = df.groupby("unit_id", sort=False)[c].nunique(dropna=False)
        for u in spread.index[spread > 1]:
            violations.append((u, None, c, "baseline value not constant within unit"))
    if violations:
        raise PanelValidationError(violations)

    df = df.set_index(["unit_id", "t"]).loc[[(u, t) for u in units for t in range(1, T + 1)]]

    def wide(c):
        return df[c].to_numpy(dtype=float).reshape(len(units), T)

    first = df.xs(1, level="t").loc[units]
    Zw, Yw = wide("Z"), wide("Y")
    panel = Panel(
        unit_id=np.asarray(units, dtype=object),
        Z=Zw, W=wide("W"), M=wide("M"), Y=Yw, offset=wide("offset"),
        V=first[v_cols].to_numpy(dtype=float).reshape(len(units), len(v_cols)),
        Y0=first["Y0"].to_numpy(dtype=float), M0=first["M0"].to_numpy(dtype=float),
        W0=first["W0"].to_numpy(dtype=float), v_names=tuple(v_cols),
    )
    violations = validate_panel(panel)
    if violations:
        raise PanelValidationError(violations)
    return Panel(
        unit_id=panel.unit_id, Z=Zw.astype(np.int8), W=panel.W, M=panel.M, Y=Yw.astype(np.int64),
        offset=panel.offset, V=panel.V, Y0=panel.Y0.astype(np.int64), M0=panel.M0, W0=panel.W0,
        v_names=panel.v_names,
    )


def panel_to_frame(panel: Panel) -> pd.DataFrame:
    n, T = panel.n, panel.T
    data = {
        "unit_id": np.repeat(panel.unit_id, T),
        "t": np.tile(np.arange(1, T + 1), n),
        "Z": panel.Z.reshape(-1),
        "W": panel.W.reshape(-1),
        "M": panel.M.reshape(-1),
        "Y": panel.Y.reshape(-1),
        "offset": panel.offset.reshape(-1),
    }
    for j, name in enumerate(panel.v_names):
        data[name] = np.repeat(panel.V[:, j], T)
    data["Y0"] = np.repeat(panel.Y0, T)
    data["M0"] = np.repeat(panel.M0, T)
    data["W0"] = np.repeat(panel.W0, T)
    return pd.DataFrame(data)


def save_panel(panel: Panel, path: str | Path) -> None:
    # repr-precision floats so that a reload is bit-exact
    panel_to_frame(panel).to_csv(path, index=False, float_format="%.17g", encoding="utf-8")


# ---------------------------------------------------------------------------
# exposure construction


@dataclass(frozen=True)
class EmissionRecord:
    plant_id: str
    month: int
    E: float

    def __post_init__(self):
        if not (self.E > 0):
            raise ExposureError(f"emission for plant {self.plant_id} month {self.month} must be positive, got {self.E}")


@dataclass(frozen=True)
class LinkWeight:
    plant_id: str
    zip_id: str
    month: int
    W_link: float

    def __post_init__(self):
        if not (0.0 <= self.W_link <= 1.0):
            raise ExposureError(
                f"link weight for plant {self.plant_id} zip {self.zip_id} month {self.month} must lie in [0, 1]"
            )


def compute_exposure(
    emissions: Iterable[EmissionRecord],
    links: Iterable[LinkWeight],
    months: Iterable[int],
    use_log: bool = True,
) -> dict[str, float]:
    """Trajectory-weighted emission exposure per zip code.

    Sums ``f(E[plant, month]) * W_link`` over every link whose month is in
    ``months``; ``f`` is ``log`` when ``use_log`` else identity. Zips that
    have no link in the selected months are absent from the result.
    """
    months = set(months)
    if not months:
        raise ExposureError("months must be nonempty")
    table: dict[tuple[str, int], float] = {}
    for rec in emissions:
        table[(rec.plant_id, rec.month)] = rec.E
    out: dict[str, float] = defaultdict(float)
    for link in links:
        if link.month not in months:
            continue
        key = (link.plant_id, link.month)
        if key not in table:
            raise ExposureError(
                f"link for zip {link.zip_id} references plant {link.plant_id} month {link.month} with no emission record"
            )
        E = table[key]
        out[link.zip_id] += (math.log(E) if use_log else E) * link.W_link
    return dict(out)


def dichotomize(levels: Mapping[str, float], cutoff: float) -> dict[str, int]:
    """1 (low-exposure arm) iff level < cutoff; ties go to the high arm (0)."""
    if not math.isfinite(cutoff):
        raise ExposureError(f"cutoff must be finite, got {cutoff}")
    out = {}
    for key, level in levels.items():
        if level is None or math.isnan(level):
            raise ExposureError(f"exposure level for {key} is NaN")
        out[key] = 1 if level < cutoff else 0
    return out


def read_emissions(path: str | Path) -> list[EmissionRecord]:
    df = pd.read_csv(path, dtype={"plant_id": str})
    _require(df, ["plant_id", "month", "E"], path)
    return [EmissionRecord(p, int(m), float(e)) for p, m, e in zip(df["plant_id"], df["month"], df["E"])]


def read_links(path: str | Path) -> list[LinkWeight]:
    df = pd.read_csv(path, dtype={"plant_id": str, "zip_id": str})
    _require(df, ["plant_id", "zip_id", "month", "W_link"], path)
    return [
        LinkWeight(p, z, int(m), float(w))
        for p, z, m, w in zip(df["plant_id"], df["zip_id"], df["month"], df["W_link"])
    ]


def _require(df: pd.DataFrame, cols: list[str], path) -> None:
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}; required: {','.join(cols)}")
