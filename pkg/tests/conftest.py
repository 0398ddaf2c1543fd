import numpy as np
import pytest

from memfail.celog import CeRecord

H = 3600


def ce(t_hours, bank=0, row=0, col=0, dimm="D1", etype="ce.read"):
    return CeRecord(int(round(t_hours * H)), dimm, etype, bank=bank, row=row, col=col)


def random_stream(rng, n, span_hours=2000.0, banks=4, rows=8, cols=8, dimm="D1"):
    """Small address space so repeats, neighbours and multibank keys actually occur."""
    ts = np.sort(rng.integers(0, int(span_hours * H), size=n))
    # sprinkle exact ties
    if n > 3:
        k = rng.integers(1, n)
        ts[k] = ts[k - 1]
    types = np.where(rng.random(n) < 0.7, "ce.read", "ce.scrub")
    return [
        CeRecord(int(ts[i]), dimm, str(types[i]), bank=int(rng.integers(banks)),
                 row=int(rng.integers(rows)), col=int(rng.integers(cols)))
        for i in range(n)
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fleet_streams(fleet):
    """Filtered, time-ordered per-DIMM streams plus the failure map of a simulated fleet."""
    from memfail.celog import filter_records, group_by_dimm, iter_sorted
    groups = group_by_dimm(filter_records(fleet.records))
    streams = {d: list(iter_sorted(recs)) for d, recs in groups.items()}
    return streams, {f.dimm: f.failure_time for f in fleet.failures}


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record a one-line verdict for an acceptance criterion; FAIL unless the test reaches ``ok``."""

    class Verdict:
        def __init__(self, number, title):
            self.number, self.title, self.detail = number, title, ""
            _CRITERIA[number] = f"criterion {number} FAIL: {title}"

        def ok(self, detail=""):
            _CRITERIA[self.number] = f"criterion {self.number} PASS: {self.title}" + (f" ({detail})" if detail else "")

        def fail(self, detail):
            _CRITERIA[self.number] = f"criterion {self.number} FAIL: {self.title} ({detail})"

    return Verdict


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
