"""Seeded synthetic DIMM fleet: CE logs, failure records and a ground-truth manifest.

Normal DIMMs emit background CEs (homogeneous Poisson, uniform addresses).
A fraction of them are instead ``transient`` DIMMs: they live through one
benign episode, an optional sparse precursor and a burst concentrated on one
locus, with no failure at the end, over a (by default silent) background.
Failing DIMMs draw a fault kind and a locus, then emit a sparse precursor
phase followed by a dense burst that ends at the failure time. Every DIMM has its
own generator seeded from ``(seed, dimm index)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from memfail.celog import CeRecord, FailureRecord, Geometry

FAULT_KINDS = ("transient", "stuck_cell", "faulty_row", "faulty_column", "faulty_bank")
FAILING_KINDS = FAULT_KINDS[1:]
DEFAULT_MIXTURE = {"stuck_cell": 0.40, "faulty_row": 0.25, "faulty_column": 0.25, "faulty_bank": 0.10}
DEFAULT_START_TS = 1604188800  # 2020-11-01T00:00:00Z
MANIFEST_FORMAT = "memfail-fleet/1"


class FleetConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FaultModel:
    """Two-phase CE schedule. Rates are CEs per hour, durations are hours."""

    kind: str = "stuck_cell"
    precursor_rate: float = 0.01
    precursor_hours: float = 500.0
    burst_rate: float = 1.0
    burst_hours: float = 48.0
    p_adj: float = 0.1


@dataclass(frozen=True)
class FleetConfig:
    n_normal: int = 2000
    n_failing: int = 60
    duration_hours: float = 180 * 24.0
    geometry: Geometry = field(default_factory=Geometry)
    normal_rate: float = 0.02
    failing: FaultModel = field(default_factory=FaultModel)
    mixture: dict = field(default_factory=lambda: dict(DEFAULT_MIXTURE))
    transient_fraction: float = 0.15
    transient_background_rate: float = 0.0
    transient: FaultModel = field(
        default_factory=lambda: FaultModel("transient", 0.0, 0.0, 1.0, 48.0, 0.1)
    )
    p_read: float = 0.8
    corrupt_fraction: float = 0.01
    start_ts: int = DEFAULT_START_TS
    seed: int = 7

    def validate(self) -> None:
        if self.n_normal < 0 or self.n_failing < 0:
            raise FleetConfigError("DIMM counts must be >= 0")
        if not self.duration_hours > 0:
            raise FleetConfigError("duration must be > 0 hours")
        if self.normal_rate < 0 or self.transient_background_rate < 0:
            raise FleetConfigError("background CE rates must be >= 0")
        if self.start_ts < 0:
            raise FleetConfigError("start_ts must be >= 0")
        for name in ("transient_fraction", "p_read", "corrupt_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise FleetConfigError(f"{name} must lie in [0, 1], got {v}")
        f = self.failing
        _check_model(f, self.duration_hours, "failing")
        if not f.burst_rate > f.precursor_rate:
            raise FleetConfigError(
                f"failing burst rate {f.burst_rate} must exceed precursor rate {f.precursor_rate}"
            )
        _check_model(self.transient, self.duration_hours, "transient")
        if not self.mixture:
            raise FleetConfigError("fault mixture is empty")
        for kind, p in self.mixture.items():
            if kind not in FAILING_KINDS:
                raise FleetConfigError(f"unknown failing fault kind {kind!r}")
            if p < 0:
                raise FleetConfigError(f"negative mixture weight for {kind}")
        if not math.isclose(sum(self.mixture.values()), 1.0, abs_tol=1e-9):
            raise FleetConfigError(f"mixture weights must sum to 1, got {sum(self.mixture.values())}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "FleetConfig":
        obj = dict(obj)
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise FleetConfigError(f"unknown fleet config keys: {sorted(unknown)}")
        if "geometry" in obj:
            obj["geometry"] = Geometry(**obj["geometry"])
        for key in ("failing", "transient"):
            if key in obj:
                obj[key] = FaultModel(**obj[key])
        cfg = cls(**obj)
        cfg.validate()
        return cfg


def _check_model(m: FaultModel, duration: float, label: str) -> None:
    for name in ("precursor_rate", "precursor_hours", "burst_rate", "burst_hours"):
        if getattr(m, name) < 0:
            raise FleetConfigError(f"{label}.{name} must be >= 0")
    if not 0.0 <= m.p_adj <= 1.0:
        raise FleetConfigError(f"{label}.p_adj must lie in [0, 1]")
    if m.precursor_hours + m.burst_hours > duration:
        raise FleetConfigError(
            f"{label}: precursor ({m.precursor_hours}h) + burst ({m.burst_hours}h) exceed the duration ({duration}h)"
        )


def _poisson_times(rng: np.random.Generator, rate: float, start: int, end: int) -> np.ndarray:
    """Arrival times (integer seconds) of a Poisson process on [start, end)."""
    hours = (end - start) / 3600.0
    if rate <= 0 or hours <= 0:
        return np.zeros(0, dtype=np.int64)
    n = rng.poisson(rate * hours)
    return np.sort(rng.integers(start, end, size=n)).astype(np.int64)


def _shift(v: int, limit: int, step: int) -> int:
    nv = v + step
    if nv < 0 or nv >= limit:
        nv = v - step
    return min(max(nv, 0), limit - 1)


def _draw_locus(rng: np.random.Generator, kind: str, g: Geometry) -> dict:
    b = int(rng.integers(g.banks))
    r = int(rng.integers(g.rows))
    c = int(rng.integers(g.columns))
    if kind in ("stuck_cell", "transient"):
        return {"bank": b, "row": r, "col": c}
    if kind == "faulty_row":
        return {"bank": b, "row": r}
    if kind == "faulty_column":
        return {"bank": b, "col": c}
    return {"bank": b}


def _locus_addresses(rng: np.random.Generator, locus: dict, n: int, p_adj: float, g: Geometry) -> np.ndarray:
    """(n, 3) bank/row/col array concentrated on ``locus``."""
    out = np.empty((n, 3), dtype=np.int64)
    out[:, 0] = locus["bank"]
    out[:, 1] = locus["row"] if "row" in locus else rng.integers(g.rows, size=n)
    out[:, 2] = locus["col"] if "col" in locus else rng.integers(g.columns, size=n)
    leak = rng.random(n) < p_adj
    for i in np.nonzero(leak)[0]:
        if "row" in locus and "col" in locus:
            dr, dc = 0, 0
            while dr == 0 and dc == 0:
                dr, dc = (int(x) for x in rng.integers(-1, 2, size=2))
            out[i, 1] = _shift(int(out[i, 1]), g.rows, dr) if dr else out[i, 1]
            out[i, 2] = _shift(int(out[i, 2]), g.columns, dc) if dc else out[i, 2]
        elif "row" in locus:
            out[i, 1] = _shift(int(out[i, 1]), g.rows, int(rng.choice((-1, 1))))
        elif "col" in locus:
            out[i, 2] = _shift(int(out[i, 2]), g.columns, int(rng.choice((-1, 1))))
    return out


def _uniform_addresses(rng: np.random.Generator, n: int, g: Geometry) -> np.ndarray:
    out = np.empty((n, 3), dtype=np.int64)
    out[:, 0] = rng.integers(g.banks, size=n)
    out[:, 1] = rng.integers(g.rows, size=n)
    out[:, 2] = rng.integers(g.columns, size=n)
    return out


@dataclass
class DimmTrace:
    dimm: str
    index: int
    records: list[CeRecord]
    entry: dict
    failure_time: int | None


def _emit(rng, dimm, ts, addr, cfg: FleetConfig) -> tuple[list[CeRecord], int]:
    n = len(ts)
    read = rng.random(n) < cfg.p_read
    corrupt = rng.random(n) < cfg.corrupt_fraction
    how = rng.random(n) < 0.5
    which = rng.integers(3, size=n)
    recs = []
    for i in range(n):
        etype = "ce.read" if read[i] else "ce.scrub"
        b, r, c = (int(v) for v in addr[i])
        if corrupt[i]:
            if how[i]:
                etype = "uce.read"
            elif which[i] == 0:
                b = None
            elif which[i] == 1:
                r = None
            else:
                c = None
        recs.append(CeRecord(int(ts[i]), dimm, etype, bank=b, row=r, col=c))
    return recs, int(corrupt.sum())


def _generate_dimm(cfg: FleetConfig, index: int, failing: bool) -> DimmTrace:
    rng = np.random.default_rng([cfg.seed, index])
    g = cfg.geometry
    dimm = f"DIMM{index:05d}"
    t_start = cfg.start_ts
    t_end = cfg.start_ts + int(round(cfg.duration_hours * 3600))
    parts: list[tuple[str, np.ndarray, np.ndarray]] = []
    entry: dict = {"role": "failing" if failing else "normal", "kind": None, "locus": None, "phases": {}}
    failure_time = None

    if failing:
        m = cfg.failing
        kinds = sorted(cfg.mixture)
        kind = str(kinds[rng.choice(len(kinds), p=[cfg.mixture[k] for k in kinds])])
        locus = _draw_locus(rng, kind, g)
        tp = int(round(m.precursor_hours * 3600))
        tb = int(round(m.burst_hours * 3600))
        failure_time = int(rng.integers(t_start + tp + tb, t_end + 1))
        burst_start = failure_time - tb
        pre_start = burst_start - tp
        pre_ts = _poisson_times(rng, m.precursor_rate, pre_start, burst_start)
        burst_ts = _poisson_times(rng, m.burst_rate, burst_start, failure_time)
        parts.append(("precursor", pre_ts, _locus_addresses(rng, locus, len(pre_ts), m.p_adj, g)))
        parts.append(("burst", burst_ts, _locus_addresses(rng, locus, len(burst_ts), m.p_adj, g)))
        entry.update(kind=kind, locus=locus, failure_time=failure_time,
                     phases={"precursor": [pre_start, burst_start], "burst": [burst_start, failure_time]})
    else:
        transient = rng.random() < cfg.transient_fraction
        rate = cfg.transient_background_rate if transient else cfg.normal_rate
        bg = _poisson_times(rng, rate, t_start, t_end)
        parts.append(("background", bg, _uniform_addresses(rng, len(bg), g)))
        if transient:
            m = cfg.transient
            kinds = sorted(cfg.mixture)
            shape = str(kinds[rng.choice(len(kinds), p=[cfg.mixture[k] for k in kinds])])
            locus = _draw_locus(rng, shape, g)
            tp = int(round(m.precursor_hours * 3600))
            tb = int(round(m.burst_hours * 3600))
            start = int(rng.integers(t_start + tp, t_end - tb + 1))
            pre_ts = _poisson_times(rng, m.precursor_rate, start - tp, start)
            ep_ts = _poisson_times(rng, m.burst_rate, start, start + tb)
            parts.append(("precursor", pre_ts, _locus_addresses(rng, locus, len(pre_ts), m.p_adj, g)))
            parts.append(("burst", ep_ts, _locus_addresses(rng, locus, len(ep_ts), m.p_adj, g)))
            entry.update(kind="transient", shape=shape, locus=locus,
                         phases={"precursor": [start - tp, start], "burst": [start, start + tb]})

    records: list[tuple[int, int, CeRecord]] = []
    counts = {"total": 0, "corrupted": 0}
    seq = 0
    for phase, ts, addr in parts:
        recs, n_bad = _emit(rng, dimm, ts, addr, cfg)
        counts[phase] = len(recs)
        counts["total"] += len(recs)
        counts["corrupted"] += n_bad
        for rec in recs:
            records.append((rec.ts, seq, rec))
            seq += 1
    records.sort(key=lambda x: (x[0], x[1]))
    ordered = [r for _, _, r in records]
    for name, (a, b) in entry["phases"].items():
        counts[f"in_{name}"] = sum(1 for r in ordered if a <= r.ts < b)
    entry["counts"] = counts
    entry["digest"] = dimm_digest(ordered)
    return DimmTrace(dimm, index, ordered, entry, failure_time)


def dimm_digest(records: Iterable[CeRecord]) -> str:
    """SHA-256 over the serialized CEs of one DIMM, in stream order."""
    h = hashlib.sha256()
    for r in records:
        h.update(r.to_json().encode())
        h.update(b"\n")
    return h.hexdigest()


@dataclass
class Fleet:
    records: list[CeRecord]
    failures: list[FailureRecord]
    manifest: dict

    def manifest_json(self) -> str:
        return json.dumps(self.manifest, indent=1, sort_keys=True)


def generate(cfg: FleetConfig = FleetConfig(), jobs: int = 1) -> Fleet:
    """Build the fleet. Output depends only on ``cfg`` (not on ``jobs``)."""
    cfg.validate()
    n_total = cfg.n_normal + cfg.n_failing
    role_rng = np.random.default_rng([cfg.seed])
    failing_idx = set(int(i) for i in role_rng.permutation(n_total)[: cfg.n_failing])
    tasks = [(i, i in failing_idx) for i in range(n_total)]

    def one(task):
        return _generate_dimm(cfg, *task)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            traces = list(pool.map(one, tasks))
    else:
        traces = [one(t) for t in tasks]

    merged = sorted(
        ((rec.ts, tr.index, k, rec) for tr in traces for k, rec in enumerate(tr.records)),
        key=lambda x: (x[0], x[1], x[2]),
    )
    records = [x[3] for x in merged]
    failures = [FailureRecord(tr.dimm, tr.failure_time) for tr in traces if tr.failure_time is not None]
    manifest = {
        "format": MANIFEST_FORMAT,
        "config": cfg.to_dict(),
        "dimms": {tr.dimm: tr.entry for tr in traces},
    }
    return Fleet(records, failures, manifest)


@dataclass
class ValidationReport:
    problems: list[str] = field(default_factory=list)
    checked_dimms: int = 0

    @property
    def ok(self) -> bool:
        return not self.problems


def _near_locus(rec: CeRecord, locus: dict) -> bool:
    if rec.bank != locus["bank"]:
        return False
    if "row" in locus and abs(rec.row - locus["row"]) > 1:
        return False
    if "col" in locus and abs(rec.col - locus["col"]) > 1:
        return False
    return True


def validate_manifest(
    records: Sequence[CeRecord],
    manifest: dict,
    failures: Iterable[FailureRecord] | None = None,
) -> ValidationReport:
    """Recount the stream against the manifest and check the fault signatures."""
    report = ValidationReport()
    entries = manifest.get("dimms", {})
    by_dimm: dict[str, list[CeRecord]] = {}
    prev_ts = None
    for i, rec in enumerate(records):
        if prev_ts is not None and rec.ts < prev_ts:
            report.problems.append(f"stream not time-sorted at record {i}")
            prev_ts = rec.ts
            continue
        prev_ts = rec.ts
        by_dimm.setdefault(rec.dimm, []).append(rec)

    for dimm in sorted(set(by_dimm) - set(entries)):
        report.problems.append(f"{dimm}: present in stream but not in manifest")

    for dimm, entry in sorted(entries.items()):
        report.checked_dimms += 1
        recs = by_dimm.get(dimm, [])
        counts = entry.get("counts", {})
        if len(recs) != counts.get("total"):
            report.problems.append(f"{dimm}: {len(recs)} CEs in stream, manifest says {counts.get('total')}")
        if "digest" in entry and dimm_digest(recs) != entry["digest"]:
            report.problems.append(f"{dimm}: record digest mismatch")
        phases = entry.get("phases", {})
        in_phase = {}
        for name, (a, b) in phases.items():
            in_phase[name] = [r for r in recs if a <= r.ts < b]
            if len(in_phase[name]) != counts.get(f"in_{name}"):
                report.problems.append(
                    f"{dimm}: {len(in_phase[name])} CEs in {name} interval, manifest says {counts.get(f'in_{name}')}"
                )
        if entry.get("role") == "failing":
            stray = sum(1 for r in recs if r.ts >= entry["failure_time"])
            if stray:
                report.problems.append(f"{dimm}: {stray} CEs at or after the failure time")
        if entry.get("locus") is None:
            continue
        pre, burst = in_phase["precursor"], in_phase["burst"]
        # background CEs may fall inside the fault intervals; nothing else may miss the locus
        allowed = len(pre) + len(burst) - counts.get("precursor", 0) - counts.get("burst", 0)
        off = sum(1 for r in pre + burst if r.has_address() and not _near_locus(r, entry["locus"]))
        if off > max(allowed, 0):
            report.problems.append(f"{dimm}: {off} fault-phase CEs away from locus {entry['locus']}")
        if entry.get("role") != "failing":
            continue
        (p0, p1), (b0, b1) = phases["precursor"], phases["burst"]
        pre_rate = len(pre) / ((p1 - p0) / 3600.0) if p1 > p0 else 0.0
        burst_rate = len(burst) / ((b1 - b0) / 3600.0) if b1 > b0 else 0.0
        if not burst_rate > pre_rate:
            report.problems.append(f"{dimm}: burst rate {burst_rate:.4g}/h not above precursor rate {pre_rate:.4g}/h")
        if len(pre) >= 2 and len(burst) >= 2:
            gap_pre = (pre[-1].ts - pre[0].ts) / (len(pre) - 1)
            gap_burst = (burst[-1].ts - burst[0].ts) / (len(burst) - 1)
            if not gap_burst < gap_pre:
                report.problems.append(f"{dimm}: burst inter-arrival {gap_burst:.1f}s not below precursor {gap_pre:.1f}s")

    if failures is not None:
        listed = {f.dimm: f.failure_time for f in failures}
        expected = {d: e["failure_time"] for d, e in entries.items() if e.get("role") == "failing"}
        if listed != expected:
            diff = sorted(set(listed.items()) ^ set(expected.items()))
            report.problems.append(f"failure list disagrees with manifest: {diff[:5]}")
    return report


def with_overrides(cfg: FleetConfig, **kw) -> FleetConfig:
    kw = {k: v for k, v in kw.items() if v is not None}
    return replace(cfg, **kw)
