import copy
import dataclasses

import numpy as np
import pytest

from memfail.celog import serialize
from memfail.simgen import (
    FaultModel,
    FleetConfig,
    FleetConfigError,
    generate,
    validate_manifest,
)

SMALL = FleetConfig(n_normal=120, n_failing=8, seed=11)


@pytest.fixture(scope="module")
def small():
    return generate(SMALL)


def test_deterministic_bytes(small):
    again = generate(SMALL)
    assert serialize(again.records) == serialize(small.records)
    assert again.manifest_json() == small.manifest_json()
    assert serialize(generate(dataclasses.replace(SMALL, seed=12)).records) != serialize(small.records)


def test_jobs_do_not_change_output(small):
    assert serialize(generate(SMALL, jobs=4).records) == serialize(small.records)


def test_default_class_balance():
    cfg = FleetConfig(duration_hours=800.0)
    fleet = generate(cfg)
    roles = [e["role"] for e in fleet.manifest["dimms"].values()]
    assert roles.count("failing") == 60 and roles.count("normal") == 2000
    assert len(fleet.failures) == 60
    assert round(60 / 2060, 3) == 0.029


def test_untampered_fleet_validates(small):
    rep = validate_manifest(small.records, small.manifest, small.failures)
    assert rep.ok, rep.problems
    assert rep.checked_dimms == 128


def test_deleted_record_is_reported(small):
    victim = next(r for r in small.records if r.dimm in {f.dimm for f in small.failures})
    recs = [r for r in small.records if r is not victim]
    rep = validate_manifest(recs, small.manifest, small.failures)
    assert not rep.ok
    assert any(p.startswith(victim.dimm) and "manifest says" in p for p in rep.problems)


def test_modified_record_is_reported(small):
    recs = list(small.records)
    i = len(recs) // 2
    recs[i] = dataclasses.replace(recs[i], error_type="ce.scrub" if recs[i].error_type == "ce.read" else "ce.read")
    rep = validate_manifest(recs, small.manifest)
    assert any(recs[i].dimm in p and "digest" in p for p in rep.problems)


def test_tampered_failure_list(small):
    rep = validate_manifest(small.records, small.manifest, small.failures[1:])
    assert not rep.ok


def test_manifest_edit_is_reported(small):
    man = copy.deepcopy(small.manifest)
    d = next(iter(man["dimms"]))
    man["dimms"][d]["counts"]["total"] += 1
    assert not validate_manifest(small.records, man).ok


def test_equal_rates_rejected():
    bad = FleetConfig(failing=FaultModel(precursor_rate=0.5, burst_rate=0.5))
    with pytest.raises(FleetConfigError):
        generate(bad)
    with pytest.raises(FleetConfigError):
        FleetConfig(mixture={"stuck_cell": 0.5}).validate()
    with pytest.raises(FleetConfigError):
        FleetConfig(duration_hours=100.0).validate()
    with pytest.raises(FleetConfigError):
        FleetConfig.from_dict({"n_normal": 3, "bogus": 1})


def test_single_stuck_cell_dimm():
    cfg = FleetConfig(n_normal=0, n_failing=1, mixture={"stuck_cell": 1.0}, corrupt_fraction=0.0, seed=3)
    fleet = generate(cfg)
    entry = next(iter(fleet.manifest["dimms"].values()))
    loc = entry["locus"]
    at = sum(1 for r in fleet.records if (r.bank, r.row, r.col) == (loc["bank"], loc["row"], loc["col"]))
    near = sum(1 for r in fleet.records
               if r.bank == loc["bank"] and abs(r.row - loc["row"]) <= 1 and abs(r.col - loc["col"]) <= 1)
    assert near == len(fleet.records) > 0
    # leakage to neighbours happens with probability p_adj = 0.1
    assert at / len(fleet.records) > 0.75


def test_no_failing_dimms_gives_uniform_addresses():
    cfg = FleetConfig(n_normal=400, n_failing=0, transient_fraction=0.0, corrupt_fraction=0.0, seed=4)
    fleet = generate(cfg)
    assert fleet.failures == []
    n = len(fleet.records)
    banks = np.bincount([r.bank for r in fleet.records], minlength=16)
    assert np.all(np.abs(banks / n - 1 / 16) < 0.2 / 16)
    rows = np.bincount([r.row * 8 // 131072 for r in fleet.records], minlength=8)
    assert np.all(np.abs(rows / n - 1 / 8) < 0.2 / 8)
    # ~86 uniform draws per DIMM from 2^31 addresses almost never repeat a cell
    repeats = n - len({(r.dimm, r.bank, r.row, r.col) for r in fleet.records})
    assert repeats <= 2


def test_failing_signature(small):
    for d, e in small.manifest["dimms"].items():
        if e["role"] != "failing":
            continue
        (p0, p1), (b0, b1) = e["phases"]["precursor"], e["phases"]["burst"]
        assert p1 == b0 and b1 == e["failure_time"]
        assert e["counts"]["burst"] / ((b1 - b0) / 3600) > e["counts"]["precursor"] / ((p1 - p0) / 3600)
        ts = [r.ts for r in small.records if r.dimm == d]
        assert max(ts) < e["failure_time"]


def test_long_range_signal_exists():
    m = FaultModel()
    # precursor CEs that lie more than 168h before the failure
    assert m.precursor_rate * (m.precursor_hours + m.burst_hours - 168) > 0
