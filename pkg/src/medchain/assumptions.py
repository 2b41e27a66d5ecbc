"""Identification assumptions carried as metadata on every effect output.

These conditions concern counterfactual laws and cannot be checked from
observed data. They are recorded, never tested; the homogeneity condition
is linked to the tilt parameter of the sensitivity analysis.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Mapping

REQUIRED = ("ignorability", "homogeneity-A2", "sutva-no-interference", "sutva-no-versions", "consistency")

_STATEMENTS = {
    "ignorability": (
        "Given past treatments, mediators, outcomes, confounders and baseline covariates, current treatment "
        "is independent of the potential mediators and outcomes."
    ),
    "homogeneity-A2": (
        "The outcome law given history depends on the mediator value, not on which treatment regime "
        "produced it (probed by the exponential tilt; chi = 1 is exact homogeneity)."
    ),
    "sutva-no-interference": "A unit's potential mediators and outcomes do not depend on other units' treatments.",
    "sutva-no-versions": "There is a single version of each treatment and mediator history.",
    "consistency": "Observed mediators and outcomes equal the potential values under the observed history.",
}


class LedgerError(ValueError):
    pass


@dataclass(frozen=True)
class Assumption:
    id: str
    statement: str
    justification: str = ""
    sensitivity: dict[str, Any] = field(default_factory=dict)

    def as_dict(self) -> dict[str, Any]:
        return {"id": self.id, "statement": self.statement, "justification": self.justification,
                "sensitivity": dict(self.sensitivity)}


@dataclass(frozen=True)
class AssumptionLedger:
    entries: tuple[Assumption, ...]

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        missing = [r for r in REQUIRED if r not in ids]
        if missing:
            raise LedgerError(f"assumption ledger missing entries: {missing}")
        a2 = self.get("homogeneity-A2")
        if "chi" not in a2.sensitivity:
            raise LedgerError("homogeneity-A2 entry must record the tilt parameter chi")

    def get(self, id: str) -> Assumption:
        for e in self.entries:
            if e.id == id:
                return e
        raise LedgerError(f"no assumption {id!r}")

    @property
    def chi(self) -> float:
        return float(self.get("homogeneity-A2").sensitivity["chi"])

    def with_chi(self, chi: float) -> "AssumptionLedger":
        entries = tuple(
            replace(e, sensitivity={**e.sensitivity, "chi": float(chi)}) if e.id == "homogeneity-A2" else e
            for e in self.entries
        )
        return AssumptionLedger(entries)

    def as_list(self) -> list[dict[str, Any]]:
        return [e.as_dict() for e in self.entries]

    @classmethod
    def from_list(cls, items) -> "AssumptionLedger":
        return cls(tuple(Assumption(d["id"], d["statement"], d.get("justification", ""),
                                    dict(d.get("sensitivity", {}))) for d in items))


def default_ledger(chi: float = 1.0, justifications: Mapping[str, str] | None = None) -> AssumptionLedger:
    justifications = dict(justifications or {})
    unknown = set(justifications) - set(REQUIRED)
    if unknown:
        raise LedgerError(f"unknown assumption ids {sorted(unknown)}")
    entries = []
    for key in REQUIRED:
        sens = {"chi": float(chi), "analysis": "exponential tilt"} if key == "homogeneity-A2" else {}
        entries.append(Assumption(key, _STATEMENTS[key], justifications.get(key, ""), sens))
    return AssumptionLedger(tuple(entries))


def attach_ledger(estimate, ledger: AssumptionLedger | None):
    """Return a copy of ``estimate`` annotated with ``ledger`` (chi must agree)."""
    if ledger is None:
        raise LedgerError("an assumption ledger is required")
    if abs(ledger.chi - estimate.chi) > 0:
        raise LedgerError(f"ledger records chi={ledger.chi} but the estimate used chi={estimate.chi}")
    return replace(estimate, assumptions=ledger)
