"""DIMM-level verdicts from per-CE degradation probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DimmVerdict:
    fail: bool
    first_alarm_ts: int | None
    max_proba: float


def first_alarm(probas, ts, threshold: float = 0.5) -> DimmVerdict:
    """Alarm at the first CE whose probability reaches ``threshold`` (``>=``)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    probas = np.asarray(probas, dtype=float)
    if len(probas) == 0:
        return DimmVerdict(False, None, 0.0)
    hits = np.nonzero(probas >= threshold)[0]
    max_p = float(probas.max())
    if len(hits) == 0:
        return DimmVerdict(False, None, max_p)
    return DimmVerdict(True, int(ts[hits[0]]), max_p)


def predict_dimm(forest, features, ts, threshold: float = 0.5) -> DimmVerdict:
    """Score one DIMM's chronologically ordered feature vectors."""
    features = np.asarray(features, dtype=float)
    if features.size == 0:
        return first_alarm([], [], threshold)
    return first_alarm(forest.predict_proba(features), ts, threshold)
