"""Degradation labels, lead-time exclusion and train/test dataset assembly.

Failed DIMMs are labeled with the largest-gap heuristic: the CE sequence is
cut at its largest inter-arrival gap, CEs before the cut are 0 and CEs from
the cut on are 1. Normal DIMMs are all 0. CEs inside the lead window
``(failure_time - m, failure_time]`` still update the feature state but are
never emitted as samples.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from memfail.celog import CeRecord
from memfail.fengine import N_FEATURES, WindowConfig, apply_mode, extract_stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabeledSample:
    dimm: str
    ts: int
    features: np.ndarray
    label: int


def largest_gap_split(timestamps: Sequence[int]) -> int:
    """Index of the first degraded CE.

    For a single CE the answer is 0. Equal maximal gaps resolve to the earliest.
    """
    n = len(timestamps)
    if n == 0:
        raise ValueError("largest_gap_split needs at least one timestamp")
    if n == 1:
        return 0
    gaps = np.diff(np.asarray(timestamps, dtype=np.int64))
    if np.any(gaps < 0):
        raise ValueError("timestamps must be non-decreasing")
    return int(np.argmax(gaps)) + 1  # argmax returns the first maximum


def gap_labels(timestamps: Sequence[int]) -> np.ndarray:
    k = largest_gap_split(timestamps)
    labels = np.zeros(len(timestamps), dtype=np.int8)
    labels[k:] = 1
    return labels


def lead_time_mask(ts: np.ndarray, failure_time: int, lead_hours: float) -> np.ndarray:
    """True for samples that stay in training (``ts <= failure_time - m``)."""
    if lead_hours < 0:
        raise ValueError(f"lead time must be >= 0, got {lead_hours}")
    if lead_hours == 0:
        return np.ones(len(ts), dtype=bool)
    return np.asarray(ts) <= failure_time - lead_hours * 3600


def exclude_lead_time(samples: Sequence, failure_time: int, lead_hours: float) -> list:
    keep = lead_time_mask(np.array([s.ts for s in samples], dtype=np.int64), failure_time, lead_hours)
    out = [s for s, k in zip(samples, keep) if k]
    if samples and not out:
        log.warning("all %d samples of DIMM %s fall within %sh of its failure; none kept",
                    len(samples), getattr(samples[0], "dimm", "?"), lead_hours)
    return out


@dataclass
class DimmSamples:
    """Features for every CE of one DIMM plus the training labels and keep-mask."""

    dimm: str
    failed: bool
    ts: np.ndarray
    X: np.ndarray
    labels: np.ndarray
    keep: np.ndarray
    failure_time: int | None = None

    @property
    def n_kept(self) -> int:
        return int(self.keep.sum())

    def kept(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.ts[self.keep], self.X[self.keep], self.labels[self.keep]

    def with_mode(self, mode: str) -> "DimmSamples":
        return DimmSamples(self.dimm, self.failed, self.ts, apply_mode(self.X, mode), self.labels, self.keep,
                           self.failure_time)

    def samples(self) -> Iterator[LabeledSample]:
        ts, X, y = self.kept()
        for i in range(len(ts)):
            yield LabeledSample(self.dimm, int(ts[i]), X[i], int(y[i]))


def label_dimm(
    dimm: str,
    records: Sequence[CeRecord],
    config: WindowConfig,
    failure_time: int | None = None,
    lead_hours: float = 3.0,
    X: np.ndarray | None = None,
) -> DimmSamples:
    """Run the feature engine over one DIMM and attach labels.

    ``records`` must be filtered and time-ordered. Pass ``X`` to reuse an
    already-computed feature matrix.
    """
    ts = np.array([r.ts for r in records], dtype=np.int64)
    if X is None:
        X = extract_stream(records, config, dimm)
    if failure_time is None:
        labels = np.zeros(len(ts), dtype=np.int8)
        keep = np.ones(len(ts), dtype=bool)
    else:
        labels = gap_labels(ts) if len(ts) else np.zeros(0, dtype=np.int8)
        keep = lead_time_mask(ts, failure_time, lead_hours)
        if len(ts) and not keep.any():
            log.warning("all %d CEs of failed DIMM %s fall within %sh of its failure; no samples kept",
                        len(ts), dimm, lead_hours)
    return DimmSamples(dimm, failure_time is not None, ts, X, labels, keep, failure_time)


def build_samples(
    streams: Mapping[str, Sequence[CeRecord]],
    failures: Mapping[str, int],
    config: WindowConfig,
    lead_hours: float = 3.0,
) -> dict[str, DimmSamples]:
    return {
        dimm: label_dimm(dimm, recs, config, failures.get(dimm), lead_hours)
        for dimm, recs in streams.items()
    }


@dataclass
class SampleSet:
    dimms: np.ndarray
    ts: np.ndarray
    X: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self.y)):
            yield LabeledSample(str(self.dimms[i]), int(self.ts[i]), self.X[i], int(self.y[i]))

    @classmethod
    def concat(cls, parts: Iterable[DimmSamples]) -> "SampleSet":
        dimms, ts, X, y = [], [], [], []
        for p in parts:
            pts, pX, py = p.kept()
            dimms.append(np.full(len(pts), p.dimm, dtype=object))
            ts.append(pts)
            X.append(pX)
            y.append(py)
        if not ts:
            return cls(np.zeros(0, dtype=object), np.zeros(0, dtype=np.int64), np.zeros((0, N_FEATURES)),
                       np.zeros(0, dtype=np.int8))
        return cls(np.concatenate(dimms), np.concatenate(ts), np.vstack(X), np.concatenate(y))


@dataclass
class DatasetSplit:
    """One sampling repeat: the DIMMs used for cross-validation and the held-out normals."""

    repeat: int
    seed: int
    failed_dimms: list[str]
    normal_train_dimms: list[str]
    normal_test_dimms: list[str]
    metadata: dict = field(default_factory=dict)

    @property
    def train_dimms(self) -> list[str]:
        return self.failed_dimms + self.normal_train_dimms

    def train(self, samples: Mapping[str, DimmSamples]) -> SampleSet:
        return SampleSet.concat(samples[d] for d in self.train_dimms)

    def to_dict(self) -> dict:
        return {
            "repeat": self.repeat,
            "seed": self.seed,
            "failed_dimms": self.failed_dimms,
            "normal_train_dimms": self.normal_train_dimms,
            "normal_test_dimms": self.normal_test_dimms,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DatasetSplit":
        return cls(int(obj["repeat"]), int(obj["seed"]), list(obj["failed_dimms"]),
                   list(obj["normal_train_dimms"]), list(obj["normal_test_dimms"]), dict(obj.get("metadata", {})))


def repeat_seeds(seed: int, repeats: int) -> list[int]:
    return [seed + r for r in range(repeats)]


def sample_splits(
    failed_dimms: Iterable[str],
    normal_dimms: Iterable[str],
    n_normal: int,
    seeds: Sequence[int],
    metadata: dict | None = None,
) -> list[DatasetSplit]:
    """Draw ``n_normal`` normal DIMMs per seed; the rest become the normal test set."""
    failed = sorted(failed_dimms)
    normals = sorted(normal_dimms)
    if n_normal > len(normals):
        raise ValueError(f"n_normal={n_normal} exceeds the {len(normals)} available normal DIMMs")
    if n_normal < 0:
        raise ValueError("n_normal must be >= 0")
    if n_normal == len(normals):
        log.warning("n_normal equals the normal population (%d); the normal test set is empty", n_normal)
    splits = []
    for r, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        chosen = np.sort(rng.choice(len(normals), size=n_normal, replace=False))
        mask = np.zeros(len(normals), dtype=bool)
        mask[chosen] = True
        train = [normals[i] for i in chosen]
        test = [d for d, m in zip(normals, mask) if not m]
        splits.append(DatasetSplit(r, int(s), failed, train, test, dict(metadata or {})))
    return splits


def assemble(
    failed_streams: Mapping[str, Sequence[CeRecord]],
    normal_streams: Mapping[str, Sequence[CeRecord]],
    failures: Mapping[str, int],
    w: float = 168.0,
    mode: str = "overall",
    lead_hours: float = 3.0,
    n_normal: int = 5000,
    repeats: int = 5,
    seed: int = 0,
    seeds: Sequence[int] | None = None,
) -> tuple[dict[str, DimmSamples], list[DatasetSplit]]:
    """Label every DIMM once and draw the per-repeat splits.

    Returns the per-DIMM samples (shared by all splits) and one
    :class:`DatasetSplit` per repeat.
    """
    overlap = set(failed_streams) & set(normal_streams)
    if overlap:
        raise ValueError(f"DIMMs listed as both failed and normal: {sorted(overlap)[:5]}")
    missing = [d for d in failed_streams if d not in failures]
    if missing:
        raise ValueError(f"failed DIMMs without a failure time: {missing[:5]}")
    config = WindowConfig(w=w, mode=mode)
    streams = {**failed_streams, **normal_streams}
    samples = build_samples(streams, failures, config, lead_hours)
    if seeds is None:
        seeds = repeat_seeds(seed, repeats)
    meta = {"w": w, "mode": mode, "lead_hours": lead_hours, "n_normal": n_normal}
    splits = sample_splits(failed_streams, normal_streams, n_normal, seeds, meta)
    return samples, splits
