from __future__ import annotations

import json

import jsonschema
import pytest

from medchain.assumptions import REQUIRED, Assumption, AssumptionLedger, LedgerError, attach_ledger, default_ledger
from medchain.estimands import Contrast, SensitivitySpec, effects, tilted_effects, write_effects

LEDGER_SCHEMA = {
    "type": "array",
    "minItems": len(REQUIRED),
    "items": {
        "type": "object",
        "required": ["id", "statement", "justification", "sensitivity"],
        "properties": {
            "id": {"type": "string"},
            "statement": {"type": "string", "minLength": 10},
            "justification": {"type": "string"},
            "sensitivity": {"type": "object"},
        },
        "additionalProperties": False,
    },
}


def test_default_ledger_has_every_entry():
    led = default_ledger()
    assert [e.id for e in led.entries] == list(REQUIRED)
    assert led.chi == 1.0
    jsonschema.validate(led.as_list(), LEDGER_SCHEMA)
    assert AssumptionLedger.from_list(json.loads(json.dumps(led.as_list()))) == led


def test_with_chi_only_touches_homogeneity():
    led = default_ledger(justifications={"consistency": "exposure measured at the zip level"})
    led2 = led.with_chi(0.8)
    assert led2.chi == 0.8 and led.chi == 1.0
    assert led2.get("consistency").justification == "exposure measured at the zip level"
    for e, e2 in zip(led.entries, led2.entries):
        if e.id != "homogeneity-A2":
            assert e == e2


def test_missing_entries_rejected():
    entries = tuple(e for e in default_ledger().entries if e.id != "consistency")
    with pytest.raises(LedgerError, match="consistency"):
        AssumptionLedger(entries)
    bad = tuple(Assumption(e.id, e.statement) for e in default_ledger().entries)
    with pytest.raises(LedgerError, match="chi"):
        AssumptionLedger(bad)
    with pytest.raises(LedgerError, match="unknown"):
        default_ledger(justifications={"positivity": "?"})
    with pytest.raises(LedgerError):
        default_ledger().get("positivity")


def test_every_estimate_carries_its_chi(reg2_system, small_panel):
    c = Contrast.final_switch(1)
    for chi in (0.6, 1.0, 1.2):
        est = tilted_effects(reg2_system, small_panel, c, SensitivitySpec(chi), n_mc=1000, max_draws=10)
        assert est.assumptions.chi == chi
        assert est.to_dict()["assumptions"][1]["sensitivity"]["chi"] == chi
        jsonschema.validate(est.to_dict()["assumptions"], LEDGER_SCHEMA)


def test_attach_ledger_checks_chi(reg2_system, small_panel, tmp_path):
    est = effects(reg2_system, small_panel, Contrast.final_switch(1), n_mc=1000, max_draws=10)
    with pytest.raises(LedgerError):
        attach_ledger(est, default_ledger(0.8))
    with pytest.raises(LedgerError):
        attach_ledger(est, None)
    custom = default_ledger(justifications={"ignorability": "rich confounder set"})
    assert attach_ledger(est, custom).assumptions.get("ignorability").justification == "rich confounder set"
    from dataclasses import replace
    bare = replace(est, assumptions=None)
    with pytest.raises(LedgerError):
        bare.to_dict()
    with pytest.raises(LedgerError):
        write_effects([bare], tmp_path / "e.json")
