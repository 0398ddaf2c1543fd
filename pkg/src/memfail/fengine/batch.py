"""From-scratch recomputation of the catalog; the oracle for the incremental engine.

Partitions the events into W and H by timestamp and aggregates each interval
naively (quadratic pair scans, no incremental bookkeeping). Used by tests only.
"""

from __future__ import annotations

from collections import Counter
from itertools import combinations
from typing import Sequence

import numpy as np
from numba import njit

from memfail.celog import CeRecord
from memfail.fengine.catalog import N_FEATURES
from memfail.fengine.state import WindowConfig, apply_mode, rate, rel_change


def _row_key(e):
    return (e.bank, e.row)


def _col_key(e):
    return (e.bank, e.col)


def _cell_key(e):
    return (e.bank, e.row, e.col)


def _line_adjacent(a, b, radius):
    return a[0] == b[0] and a != b and abs(a[1] - b[1]) <= radius


def _cell_adjacent(a, b, radius):
    return a[0] == b[0] and a != b and max(abs(a[1] - b[1]), abs(a[2] - b[2])) <= radius


def _multibank(keys, drop_bank):
    banks_per_index: dict = {}
    for k in keys:
        banks_per_index.setdefault(drop_bank(k), set()).add(k[0])
    return sum(1 for banks in banks_per_index.values() if len(banks) >= 2)


def _group(window, history, lifetime, key_fn, adjacent, drop_bank, cfg):
    cw = Counter(key_fn(e) for e in window)
    ch = Counter(key_fn(e) for e in history)
    cl = Counter(key_fn(e) for e in lifetime)
    keys_w = list(cw)
    keys_l = list(cl)
    pairs = sum(1 for a, b in combinations(keys_w, 2) if adjacent(a, b, cfg.radius))
    with_nbr = sum(1 for a in keys_l if any(adjacent(a, b, cfg.radius) for b in keys_l))
    return [
        len(cw),
        sum(1 for v in cw.values() if v >= cfg.repeat_min),
        sum(1 for v in cl.values() if v >= cfg.repeat_min),
        max(cw.values(), default=0),
        sum(1 for k in cw if k not in ch),
        pairs,
        with_nbr,
        _multibank(keys_w, drop_bank),
        _multibank(keys_l, drop_bank),
    ]


def batch_recompute(events: Sequence[CeRecord], config: WindowConfig, t0: int | None = None) -> np.ndarray:
    """Feature vector at ``t0`` (default: the last event's timestamp)."""
    if not events:
        raise ValueError("batch_recompute needs at least one event")
    if t0 is None:
        t0 = events[-1].ts
    w_sec = config.window_seconds
    cutoff = t0 - w_sec
    window = [e for e in events if e.ts > cutoff]
    history = [e for e in events if e.ts <= cutoff]
    lifetime = list(events)

    w_hours = w_sec / 3600.0
    h_span = (cutoff - history[0].ts) / 3600.0 if history else 0.0
    types_w = Counter(e.error_type for e in window)
    types_h = Counter(e.error_type for e in history)

    rate_w = rate(len(window), w_hours)
    rate_h = rate(len(history), h_span)
    banks_w = Counter(e.bank for e in window)
    banks_h = {e.bank for e in history}
    banks_l = {e.bank for e in lifetime}
    prev_gap = (events[-1].ts - events[-2].ts) / 3600.0 if len(events) > 1 else 0.0

    out = [
        len(window),
        len(history),
        rate_w,
        rate_h,
        rel_change(rate_w, rate_h),
        types_w["ce.read"],
        types_w["ce.scrub"],
        types_h["ce.read"],
        types_h["ce.scrub"],
        rel_change(rate(types_w["ce.read"], w_hours), rate(types_h["ce.read"], h_span)),
        rel_change(rate(types_w["ce.scrub"], w_hours), rate(types_h["ce.scrub"], h_span)),
        (t0 - events[0].ts) / 3600.0,
        prev_gap,
        len(banks_w),
        len(banks_h),
        len(banks_l),
        sum(1 for b in banks_w if b not in banks_h),
        max(banks_w.values(), default=0),
        len(window) / len(banks_w) if banks_w else 0.0,
    ]
    out += _group(window, history, lifetime, _row_key, _line_adjacent, lambda k: k[1], config)
    out += _group(window, history, lifetime, _col_key, _line_adjacent, lambda k: k[1], config)
    out += _group(window, history, lifetime, _cell_key, _cell_adjacent, lambda k: (k[1], k[2]), config)
    return apply_mode(np.array(out, dtype=float), config.mode)


# Sort-based recomputation compiled with numba, for checking every prefix of
# long streams. Keys are packed into int64 codes with ``radius`` padding on
# the row/column axes so neighbour searches never cross a bank boundary.

@njit(cache=True)
def _runs(sorted_codes):
    # unique values and their multiplicities
    n = sorted_codes.shape[0]
    uniq = np.empty(n, dtype=np.int64)
    cnt = np.empty(n, dtype=np.int64)
    m = 0
    for i in range(n):
        if m > 0 and uniq[m - 1] == sorted_codes[i]:
            cnt[m - 1] += 1
        else:
            uniq[m] = sorted_codes[i]
            cnt[m] = 1
            m += 1
    return uniq[:m], cnt[:m]


@njit(cache=True)
def _n_in(sorted_uniq, lo, hi):
    # number of codes in [lo, hi]
    return np.searchsorted(sorted_uniq, hi, side="right") - np.searchsorted(sorted_uniq, lo, side="left")


@njit(cache=True)
def _multibank_count(uniq_keys, span):
    # keys are bank * span + index; count indices present in >= 2 banks
    idx = np.sort(uniq_keys % span)
    _, cnt = _runs(idx)
    return np.sum(cnt >= 2)


@njit(cache=True)
def _line_pairs(uniq, radius):
    total = 0
    for k in uniq:
        total += _n_in(uniq, k + 1, k + radius)
    return total


@njit(cache=True)
def _line_with_nbr(uniq, radius):
    total = 0
    for k in uniq:
        if _n_in(uniq, k - radius, k + radius) > 1:
            total += 1
    return total


@njit(cache=True)
def _cell_pairs(uniq, radius, colspan):
    total = 0
    for k in uniq:
        total += _n_in(uniq, k + 1, k + radius)
        for dr in range(1, radius + 1):
            base = k + dr * colspan
            total += _n_in(uniq, base - radius, base + radius)
    return total


@njit(cache=True)
def _cell_with_nbr(uniq, radius, colspan):
    total = 0
    for k in uniq:
        n = 0
        for dr in range(-radius, radius + 1):
            base = k + dr * colspan
            n += _n_in(uniq, base - radius, base + radius)
        if n > 1:
            total += 1
    return total


@njit(cache=True)
def _group_features(kw, kh, kl, r_min, radius, is_cell, colspan, agn_span, out, o):
    uw, cw = _runs(np.sort(kw))
    uh, _ = _runs(np.sort(kh))
    ul, cl = _runs(np.sort(kl))
    out[o] = uw.shape[0]
    out[o + 1] = np.sum(cw >= r_min)
    out[o + 2] = np.sum(cl >= r_min)
    out[o + 3] = cw.max() if cw.shape[0] else 0
    new = 0
    for k in uw:
        if _n_in(uh, k, k) == 0:
            new += 1
    out[o + 4] = new
    if is_cell:
        out[o + 5] = _cell_pairs(uw, radius, colspan)
        out[o + 6] = _cell_with_nbr(ul, radius, colspan)
    else:
        out[o + 5] = _line_pairs(uw, radius)
        out[o + 6] = _line_with_nbr(ul, radius)
    out[o + 7] = _multibank_count(uw, agn_span)
    out[o + 8] = _multibank_count(ul, agn_span)


@njit(cache=True)
def _rate(count, span):
    if count <= 0 or span <= 0:
        return 0.0
    return count / span


@njit(cache=True)
def _rel(a, b):
    return (a - b) / max(b, 1e-9)


@njit(cache=True)
def _prefix_features(ts, types, banks, rowk, colk, cellk, j, t0, w_sec, r_min, radius,
                     rowspan, colspan, n_features):
    out = np.zeros(n_features)
    cutoff = t0 - w_sec
    n = j + 1
    in_w = ts[:n] > cutoff
    nw = np.sum(in_w)
    nh = n - nw
    w_hours = w_sec / 3600.0
    h_first = -1
    for i in range(n):
        if not in_w[i]:
            h_first = ts[i]
            break
    h_span = (cutoff - h_first) / 3600.0 if nh > 0 else 0.0
    read_w = np.sum(in_w & (types[:n] == 0))
    scrub_w = np.sum(in_w & (types[:n] == 1))
    read_h = np.sum(~in_w & (types[:n] == 0))
    scrub_h = np.sum(~in_w & (types[:n] == 1))
    rate_w = _rate(nw, w_hours)
    rate_h = _rate(nh, h_span)
    out[0] = nw
    out[1] = nh
    out[2] = rate_w
    out[3] = rate_h
    out[4] = _rel(rate_w, rate_h)
    out[5] = read_w
    out[6] = scrub_w
    out[7] = read_h
    out[8] = scrub_h
    out[9] = _rel(_rate(read_w, w_hours), _rate(read_h, h_span))
    out[10] = _rel(_rate(scrub_w, w_hours), _rate(scrub_h, h_span))
    out[11] = (t0 - ts[0]) / 3600.0
    out[12] = (ts[j] - ts[j - 1]) / 3600.0 if j > 0 else 0.0

    bw, cbw = _runs(np.sort(banks[:n][in_w]))
    bh, _ = _runs(np.sort(banks[:n][~in_w]))
    bl, _ = _runs(np.sort(banks[:n]))
    out[13] = bw.shape[0]
    out[14] = bh.shape[0]
    out[15] = bl.shape[0]
    new = 0
    for b in bw:
        if _n_in(bh, b, b) == 0:
            new += 1
    out[16] = new
    out[17] = cbw.max() if cbw.shape[0] else 0
    out[18] = nw / bw.shape[0] if bw.shape[0] else 0.0

    _group_features(rowk[:n][in_w], rowk[:n][~in_w], rowk[:n], r_min, radius, False, colspan, rowspan,
                    out, 19)
    _group_features(colk[:n][in_w], colk[:n][~in_w], colk[:n], r_min, radius, False, colspan, colspan,
                    out, 28)
    _group_features(cellk[:n][in_w], cellk[:n][~in_w], cellk[:n], r_min, radius, True, colspan,
                    rowspan * colspan, out, 37)
    return out


@njit(cache=True)
def _all_prefixes(ts, types, banks, rowk, colk, cellk, w_sec, r_min, radius, rowspan, colspan, n_features):
    n = ts.shape[0]
    out = np.zeros((n, n_features))
    for j in range(n):
        out[j] = _prefix_features(ts, types, banks, rowk, colk, cellk, j, ts[j], w_sec, r_min, radius,
                                  rowspan, colspan, n_features)
    return out


def batch_prefixes(events: Sequence[CeRecord], config: WindowConfig) -> np.ndarray:
    """Recompute the catalog at every prefix ``events[:j+1]`` (t0 = that event's ts)."""
    if not events:
        return np.zeros((0, N_FEATURES))
    pad = config.radius
    ts = np.array([e.ts for e in events], dtype=np.int64)
    types = np.array([0 if e.error_type == "ce.read" else 1 if e.error_type == "ce.scrub" else 2
                      for e in events], dtype=np.int64)
    banks = np.array([e.bank for e in events], dtype=np.int64)
    rows = np.array([e.row for e in events], dtype=np.int64) + pad
    cols = np.array([e.col for e in events], dtype=np.int64) + pad
    rowspan = int(rows.max()) + 2 * pad + 1
    colspan = int(cols.max()) + 2 * pad + 1
    # agn(cell) = cell % (rowspan * colspan) is the (row, col) pair
    rowk = banks * rowspan + rows
    colk = banks * colspan + cols
    cellk = (banks * rowspan + rows) * colspan + cols
    out = _all_prefixes(ts, types, banks, rowk, colk, cellk, config.window_seconds, config.repeat_min,
                        config.radius, rowspan, colspan, N_FEATURES)
    return apply_mode(out, config.mode)
