"""Per-DIMM incremental state over the window W and the history H.

Every ingested CE sits either in the window buffer or in the history
aggregates, and always in the lifetime aggregates. Expiry moves a buffered
event into history exactly once, so a stream of n events costs O(n) aggregate
updates in total. Window-side structure (max counts, repeat counts, adjacent
pairs, multi-bank indices, keys absent from H) is maintained under both
insertion and removal so a snapshot costs O(d).
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Hashable, Iterable

import numpy as np

from memfail.celog import CeRecord
from memfail.fengine.catalog import EPSILON, N_FEATURES, WINDOW_MASK

log = logging.getLogger(__name__)

MODES = ("overall", "fixed")
DEFAULT_KEY_CAP = 65536

_NON_WINDOW = np.array([not m for m in WINDOW_MASK])


class OrderingError(ValueError):
    """An event arrived with a timestamp older than the previous one for its DIMM."""


@dataclass(frozen=True)
class WindowConfig:
    """Observation window length ``w`` (hours) and feature mode."""

    w: float = 168.0
    mode: str = "overall"
    repeat_min: int = 2
    radius: int = 1
    key_cap: int = DEFAULT_KEY_CAP

    def __post_init__(self) -> None:
        if not self.w > 0:
            raise ValueError(f"window length must be > 0 hours, got {self.w!r}")
        if self.window_seconds < 1:
            raise ValueError(f"window length {self.w!r}h is shorter than one second")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.repeat_min < 1:
            raise ValueError("repeat_min must be >= 1")
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if self.key_cap < 1:
            raise ValueError("key_cap must be >= 1")

    @property
    def window_seconds(self) -> int:
        return int(round(self.w * 3600))


def rate(count: int, span_hours: float) -> float:
    if count <= 0 or span_hours <= 0:
        return 0.0
    return count / span_hours


def rel_change(window_value: float, history_value: float) -> float:
    return (window_value - history_value) / max(history_value, EPSILON)


def line_neighbours(radius: int) -> Callable[[tuple], list[tuple]]:
    offsets = [d for d in range(-radius, radius + 1) if d]

    def nbrs(key: tuple) -> list[tuple]:
        b, x = key
        return [(b, x + d) for d in offsets]

    return nbrs


def cell_neighbours(radius: int) -> Callable[[tuple], list[tuple]]:
    offsets = [(dr, dc) for dr in range(-radius, radius + 1) for dc in range(-radius, radius + 1) if dr or dc]

    def nbrs(key: tuple) -> list[tuple]:
        b, r, c = key
        return [(b, r + dr, c + dc) for dr, dc in offsets]

    return nbrs


def apply_mode(values: np.ndarray, mode: str) -> np.ndarray:
    """Zero every non-window slot for ``fixed`` mode (works on vectors and row matrices)."""
    if mode == "overall":
        return values
    if mode != "fixed":
        raise ValueError(f"unknown mode {mode!r}")
    out = np.array(values, dtype=float, copy=True)
    out[..., _NON_WINDOW] = 0.0
    return out


class _WindowKeys:
    """Multiset of address keys currently inside W."""

    __slots__ = ("counts", "freq", "max", "n_repeat", "n_pairs", "n_new", "banks_of", "n_multibank",
                 "r_min", "nbrs")

    def __init__(self, r_min: int, nbrs: Callable | None = None, bank_agnostic: bool = False):
        self.counts: dict[Hashable, int] = {}
        self.freq: dict[int, int] = {}
        self.max = 0
        self.n_repeat = 0
        self.n_pairs = 0
        self.n_new = 0
        self.banks_of: dict[Hashable, set] | None = {} if bank_agnostic else None
        self.n_multibank = 0
        self.r_min = r_min
        self.nbrs = nbrs

    def add(self, key, agn, bank, history: dict) -> None:
        counts, freq = self.counts, self.freq
        c = counts.get(key, 0) + 1
        counts[key] = c
        if c > 1:
            freq[c - 1] -= 1
        freq[c] = freq.get(c, 0) + 1
        if c > self.max:
            self.max = c
        if c == self.r_min:
            self.n_repeat += 1
        if c == 1:
            if key not in history:
                self.n_new += 1
            if self.nbrs is not None:
                self.n_pairs += sum(1 for k in self.nbrs(key) if k in counts)
            if self.banks_of is not None:
                banks = self.banks_of.setdefault(agn, set())
                banks.add(bank)
                if len(banks) == 2:
                    self.n_multibank += 1

    def remove(self, key, agn, bank, history: dict) -> None:
        counts, freq = self.counts, self.freq
        c = counts[key] - 1
        freq[c + 1] -= 1
        if c:
            freq[c] = freq.get(c, 0) + 1
            counts[key] = c
        if c + 1 == self.max and freq[c + 1] == 0:
            self.max = c
        if c == self.r_min - 1:
            self.n_repeat -= 1
        if c == 0:
            del counts[key]
            if key not in history:
                self.n_new -= 1
            if self.nbrs is not None:
                self.n_pairs -= sum(1 for k in self.nbrs(key) if k in counts)
            if self.banks_of is not None:
                banks = self.banks_of[agn]
                banks.discard(bank)
                if len(banks) == 1:
                    self.n_multibank -= 1
                elif not banks:
                    del self.banks_of[agn]

    def history_gained(self, key) -> None:
        if key in self.counts:
            self.n_new -= 1


class _HistoryKeys:
    """Append-only, capped key counts for H or the lifetime."""

    __slots__ = ("name", "counts", "cap", "saturated", "n_repeat", "r_min", "nbrs", "with_nbr",
                 "banks_of", "n_multibank")

    def __init__(self, name: str, r_min: int, cap: int, nbrs: Callable | None = None, bank_agnostic: bool = False):
        self.name = name
        self.counts: dict[Hashable, int] = {}
        self.cap = cap
        self.saturated = False
        self.n_repeat = 0
        self.r_min = r_min
        self.nbrs = nbrs
        self.with_nbr: set | None = set() if nbrs is not None else None
        self.banks_of: dict[Hashable, set] | None = {} if bank_agnostic else None
        self.n_multibank = 0

    def _saturate(self) -> None:
        if not self.saturated:
            self.saturated = True
            log.warning("key set %s reached its cap of %d keys; cardinality features frozen", self.name, self.cap)

    def add(self, key, agn, bank) -> bool:
        """Count one CE on ``key``; True when the key is new to this set."""
        counts = self.counts
        c = counts.get(key)
        new = c is None
        if new:
            if len(counts) >= self.cap:
                self._saturate()
                return False
            c = 0
            if self.with_nbr is not None:
                present = [k for k in self.nbrs(key) if k in counts]
                if present:
                    self.with_nbr.add(key)
                    self.with_nbr.update(present)
        counts[key] = c + 1
        if c + 1 == self.r_min:
            self.n_repeat += 1
        if new and self.banks_of is not None:
            banks = self.banks_of.get(agn)
            if banks is None:
                if len(self.banks_of) >= self.cap:
                    self._saturate()
                    return True
                banks = self.banks_of[agn] = set()
            if bank not in banks:
                banks.add(bank)
                if len(banks) == 2:
                    self.n_multibank += 1
        return new

    @property
    def n_with_neighbour(self) -> int:
        return len(self.with_nbr) if self.with_nbr is not None else 0


class IntervalAggregates:
    """Counters and key sets for an append-only interval (H or lifetime)."""

    def __init__(self, name: str, config: WindowConfig):
        r, cap = config.repeat_min, config.key_cap
        self.ce_count = 0
        self.type_counts: dict[str, int] = {}
        self.first_ts: int | None = None
        self.last_ts: int | None = None
        self.banks = _HistoryKeys(f"{name}.banks", r, cap)
        self.rows = _HistoryKeys(f"{name}.rows", r, cap, line_neighbours(config.radius), bank_agnostic=True)
        self.cols = _HistoryKeys(f"{name}.columns", r, cap, line_neighbours(config.radius), bank_agnostic=True)
        self.cells = _HistoryKeys(f"{name}.cells", r, cap, cell_neighbours(config.radius), bank_agnostic=True)

    @property
    def saturated(self) -> bool:
        return any(g.saturated for g in (self.banks, self.rows, self.cols, self.cells))

    def fold(self, rec: CeRecord) -> tuple[bool, bool, bool, bool]:
        self.ce_count += 1
        self.type_counts[rec.error_type] = self.type_counts.get(rec.error_type, 0) + 1
        if self.first_ts is None:
            self.first_ts = rec.ts
        self.last_ts = rec.ts
        b, r, c = rec.bank, rec.row, rec.col
        return (
            self.banks.add(b, None, b),
            self.rows.add((b, r), r, b),
            self.cols.add((b, c), c, b),
            self.cells.add((b, r, c), (r, c), b),
        )


class WindowAggregates:
    def __init__(self, config: WindowConfig):
        r = config.repeat_min
        self.ce_count = 0
        self.type_counts: dict[str, int] = {}
        self.banks = _WindowKeys(r)
        self.rows = _WindowKeys(r, line_neighbours(config.radius), bank_agnostic=True)
        self.cols = _WindowKeys(r, line_neighbours(config.radius), bank_agnostic=True)
        self.cells = _WindowKeys(r, cell_neighbours(config.radius), bank_agnostic=True)

    def add(self, rec: CeRecord, history: IntervalAggregates) -> None:
        self.ce_count += 1
        self.type_counts[rec.error_type] = self.type_counts.get(rec.error_type, 0) + 1
        b, r, c = rec.bank, rec.row, rec.col
        self.banks.add(b, None, b, history.banks.counts)
        self.rows.add((b, r), r, b, history.rows.counts)
        self.cols.add((b, c), c, b, history.cols.counts)
        self.cells.add((b, r, c), (r, c), b, history.cells.counts)

    def remove(self, rec: CeRecord, history: IntervalAggregates) -> None:
        self.ce_count -= 1
        self.type_counts[rec.error_type] -= 1
        b, r, c = rec.bank, rec.row, rec.col
        self.banks.remove(b, None, b, history.banks.counts)
        self.rows.remove((b, r), r, b, history.rows.counts)
        self.cols.remove((b, c), c, b, history.cols.counts)
        self.cells.remove((b, r, c), (r, c), b, history.cells.counts)


class DimmState:
    """Incremental feature state for one DIMM.

    Feed time-ordered, filtered records through :meth:`ingest`; read the
    feature vector at the latest event with :meth:`snapshot`.
    """

    def __init__(self, dimm: str, config: WindowConfig | None = None):
        self.dimm = dimm
        self.config = config or WindowConfig()
        self.buffer: deque[CeRecord] = deque()
        self.history = IntervalAggregates("history", self.config)
        self.lifetime = IntervalAggregates("lifetime", self.config)
        self.window = WindowAggregates(self.config)
        self.t_first: int | None = None
        self.t_prev: int | None = None
        self.t_before_prev: int | None = None
        self.t0: int | None = None
        self.n_events = 0
        self._w_sec = self.config.window_seconds

    def _expire(self, t0: int) -> None:
        cutoff = t0 - self._w_sec
        buf, hist, win = self.buffer, self.history, self.window
        while buf and buf[0].ts <= cutoff:
            rec = buf.popleft()
            win.remove(rec, hist)
            new_bank, new_row, new_col, new_cell = hist.fold(rec)
            b, r, c = rec.bank, rec.row, rec.col
            if new_bank:
                win.banks.history_gained(b)
            if new_row:
                win.rows.history_gained((b, r))
            if new_col:
                win.cols.history_gained((b, c))
            if new_cell:
                win.cells.history_gained((b, r, c))

    def ingest(self, event: CeRecord) -> "DimmState":
        if event.dimm != self.dimm:
            raise ValueError(f"event for DIMM {event.dimm!r} fed to state of {self.dimm!r}")
        if self.t_prev is not None and event.ts < self.t_prev:
            raise OrderingError(
                f"out-of-order CE for DIMM {self.dimm}: ts={event.ts} < previous ts={self.t_prev}"
            )
        if event.bank is None or event.row is None or event.col is None:
            raise ValueError(f"CE for DIMM {self.dimm} at ts={event.ts} lacks a full address")
        self.t0 = event.ts
        self._expire(event.ts)
        self.buffer.append(event)
        self.window.add(event, self.history)
        self.lifetime.fold(event)
        if self.t_first is None:
            self.t_first = event.ts
        self.t_before_prev = self.t_prev
        self.t_prev = event.ts
        self.n_events += 1
        return self

    def advance_to(self, t: int) -> "DimmState":
        """Move the observation moment to ``t`` without a new CE (expires old window events)."""
        if self.t0 is None:
            raise ValueError(f"DIMM {self.dimm} has no events")
        if t < self.t0:
            raise OrderingError(f"cannot move DIMM {self.dimm} back from t0={self.t0} to {t}")
        self.t0 = t
        self._expire(t)
        return self

    @property
    def saturated(self) -> bool:
        return self.history.saturated or self.lifetime.saturated

    def snapshot(self) -> np.ndarray:
        if self.t0 is None:
            raise ValueError(f"snapshot of DIMM {self.dimm} before any event: t0 undefined")
        values = self._features()
        return apply_mode(values, self.config.mode)

    def _features(self) -> np.ndarray:
        t0, w_sec = self.t0, self._w_sec
        win, hist, life = self.window, self.history, self.lifetime
        w_hours = w_sec / 3600.0
        h_span = (t0 - w_sec - hist.first_ts) / 3600.0 if hist.ce_count else 0.0

        rate_w = rate(win.ce_count, w_hours)
        rate_h = rate(hist.ce_count, h_span)
        read_w = win.type_counts.get("ce.read", 0)
        scrub_w = win.type_counts.get("ce.scrub", 0)
        read_h = hist.type_counts.get("ce.read", 0)
        scrub_h = hist.type_counts.get("ce.scrub", 0)
        prev_gap = (self.t_prev - self.t_before_prev) / 3600.0 if self.t_before_prev is not None else 0.0
        n_banks_w = len(win.banks.counts)

        out = [
            win.ce_count,
            hist.ce_count,
            rate_w,
            rate_h,
            rel_change(rate_w, rate_h),
            read_w,
            scrub_w,
            read_h,
            scrub_h,
            rel_change(rate(read_w, w_hours), rate(read_h, h_span)),
            rel_change(rate(scrub_w, w_hours), rate(scrub_h, h_span)),
            (t0 - self.t_first) / 3600.0,
            prev_gap,
            n_banks_w,
            len(hist.banks.counts),
            len(life.banks.counts),
            win.banks.n_new,
            win.banks.max,
            win.ce_count / n_banks_w if n_banks_w else 0.0,
        ]
        for wg, lg in ((win.rows, life.rows), (win.cols, life.cols), (win.cells, life.cells)):
            out += [
                len(wg.counts),
                wg.n_repeat,
                lg.n_repeat,
                wg.max,
                wg.n_new,
                wg.n_pairs,
                lg.n_with_neighbour,
                wg.n_multibank,
                lg.n_multibank,
            ]
        assert len(out) == N_FEATURES
        return np.array(out, dtype=float)


def extract_stream(records: Iterable[CeRecord], config: WindowConfig, dimm: str | None = None) -> np.ndarray:
    """Feature matrix (one row per record) for one DIMM's time-ordered records."""
    records = list(records)
    if not records:
        return np.zeros((0, N_FEATURES))
    state = DimmState(dimm or records[0].dimm, config)
    rows = []
    for rec in records:
        state.ingest(rec)
        rows.append(state._features())
    return apply_mode(np.vstack(rows), config.mode)
