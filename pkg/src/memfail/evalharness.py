"""Experimental protocol: repeated normal-DIMM subsampling, grouped k-fold CV,
normal-test scoring and the CE-rate threshold baseline.

All scoring is per DIMM. A DIMM is flagged when any of its scoreable CEs
reaches the alarm threshold; for failed DIMMs only CEs at least ``m`` hours
before the failure are scoreable.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from memfail.celog import CeRecord
from memfail.fengine import CATALOG_VERSION, FEATURE_NAMES, WindowConfig
from memfail.forest import ForestParams, TrainedForest, feature_importance, first_alarm, fit
from memfail.labeling import DatasetSplit, DimmSamples, SampleSet, build_samples, repeat_seeds, sample_splits

log = logging.getLogger(__name__)

REPORT_FORMAT = "memfail-report/1"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @classmethod
    def from_flags(cls, flagged: Iterable[bool], failed: Iterable[bool]) -> "ConfusionCounts":
        tp = fp = fn = tn = 0
        for f, y in zip(flagged, failed):
            if y:
                tp, fn = (tp + 1, fn) if f else (tp, fn + 1)
            else:
                fp, tn = (fp + 1, tn) if f else (fp, tn + 1)
        return cls(tp, fp, fn, tn)


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    precision_undefined: bool = False
    recall_undefined: bool = False


def metrics(counts: ConfusionCounts) -> Metrics:
    """Precision and recall; an empty denominator gives 0 with its flag set."""
    pd = counts.tp + counts.fp
    rd = counts.tp + counts.fn
    return Metrics(
        counts.tp / pd if pd else 0.0,
        counts.tp / rd if rd else 0.0,
        pd == 0,
        rd == 0,
    )


def error_rate_normal(flags: Sequence[bool]) -> float:
    """Fraction of held-out normal DIMMs predicted to fail."""
    if len(flags) == 0:
        raise ValueError("error rate needs at least one normal test DIMM")
    return sum(bool(f) for f in flags) / len(flags)


def relative_improvement(a: float, b: float) -> float:
    if b == 0:
        raise ZeroDivisionError("relative improvement over a zero baseline is undefined")
    return (a - b) / b


def fold_assignment(failed: Iterable[str], normal: Iterable[str], k: int, seed: int) -> dict[str, int]:
    """Stratified, DIMM-grouped fold ids."""
    failed = sorted(failed)
    normal = sorted(normal)
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if len(failed) < k:
        raise ValueError(f"only {len(failed)} failed DIMMs for {k} folds; some fold would hold none, use a smaller k")
    rng = np.random.default_rng(seed)
    out = {}
    for i, j in enumerate(rng.permutation(len(failed))):
        out[failed[j]] = i % k
    offset = len(failed) % k
    for i, j in enumerate(rng.permutation(len(normal))):
        out[normal[j]] = (i + offset) % k
    return out


def score_dimms(model, samples: Mapping[str, DimmSamples], dimms: Sequence[str], threshold: float) -> list[bool]:
    """Flag each DIMM from one batched prediction over all its scoreable CEs."""
    parts = [samples[d] for d in dimms]
    sizes = [p.n_kept for p in parts]
    if sum(sizes) == 0:
        return [False] * len(parts)
    X = np.vstack([p.X[p.keep] for p in parts if p.n_kept])
    probas = model.predict_proba(X)
    flags = []
    pos = 0
    for p, n in zip(parts, sizes):
        flags.append(first_alarm(probas[pos:pos + n], p.ts[p.keep], threshold).fail if n else False)
        pos += n
    return flags


@dataclass
class FoldResult:
    fold: int
    counts: ConfusionCounts
    metrics: Metrics
    error_rate_normal_test: float | None
    n_train_samples: int
    importance: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "counts": asdict(self.counts),
            "precision": self.metrics.precision,
            "recall": self.metrics.recall,
            "error_rate_normal_test": self.error_rate_normal_test,
            "n_train_samples": self.n_train_samples,
        }


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def cross_validate(
    split: DatasetSplit,
    samples: Mapping[str, DimmSamples],
    k: int = 10,
    params: ForestParams = ForestParams(),
    seed: int = 0,
    threshold: float = 0.5,
    jobs: int = 1,
    score_normal_test: bool = True,
) -> list[FoldResult]:
    """Grouped, stratified k-fold CV over the split's training DIMMs.

    Each fold's model also scores the split's held-out normal DIMMs.
    """
    assign = fold_assignment(split.failed_dimms, split.normal_train_dimms, k, seed)
    train_dimms = split.train_dimms
    results = []
    for f in range(k):
        fit_on = [d for d in train_dimms if assign[d] != f]
        held = [d for d in train_dimms if assign[d] == f]
        ss = SampleSet.concat(samples[d] for d in fit_on)
        fold_params = replace(params, seed=_derived_seed(params.seed, split.repeat, f))
        model = fit(ss.X, ss.y, fold_params, jobs=jobs)
        flags = score_dimms(model, samples, held, threshold)
        counts = ConfusionCounts.from_flags(flags, [samples[d].failed for d in held])
        err = None
        if score_normal_test and split.normal_test_dimms:
            err = error_rate_normal(score_dimms(model, samples, split.normal_test_dimms, threshold))
        results.append(FoldResult(f, counts, metrics(counts), err, len(ss), feature_importance(model)))
    return results


def max_window_rate(ts: np.ndarray, w_hours: float) -> float:
    """Largest CE count in any window ``(t - w, t]`` ending at a CE, per hour."""
    ts = np.asarray(ts, dtype=np.int64)
    if len(ts) == 0:
        return 0.0
    w_sec = int(round(w_hours * 3600))
    starts = np.searchsorted(ts, ts - w_sec, side="right")
    return float((np.arange(len(ts)) - starts + 1).max()) / (w_sec / 3600.0)


@dataclass(frozen=True)
class BaselineRow:
    threshold: float
    precision: float
    recall: float
    error_rate: float
    precision_undefined: bool = False


@dataclass
class BaselineSweep:
    rows: list[BaselineRow]
    best_precision: BaselineRow | None
    best_recall: BaselineRow | None
    n_failed: int
    n_normal: int

    def to_dict(self) -> dict:
        return {
            "n_thresholds": len(self.rows),
            "n_failed": self.n_failed,
            "n_normal": self.n_normal,
            "best_precision": asdict(self.best_precision) if self.best_precision else None,
            "best_recall": asdict(self.best_recall) if self.best_recall else None,
        }

    def to_csv(self) -> str:
        lines = ["threshold,precision,recall,error_rate"]
        for r in self.rows:
            lines.append(f"{r.threshold!r},{r.precision!r},{r.recall!r},{r.error_rate!r}")
        return "\n".join(lines) + "\n"


def _max_rates(streams: Mapping[str, np.ndarray], failed: Iterable[str], w: float):
    failed = set(failed)
    dimms = sorted(streams)
    rates = np.array([max_window_rate(streams[d], w) for d in dimms])
    return rates, np.array([d in failed for d in dimms], dtype=bool)


def _baseline_row(rates: np.ndarray, is_failed: np.ndarray, thr: float) -> BaselineRow:
    flagged = rates >= thr
    c = ConfusionCounts(
        int((flagged & is_failed).sum()),
        int((flagged & ~is_failed).sum()),
        int((~flagged & is_failed).sum()),
        int((~flagged & ~is_failed).sum()),
    )
    m = metrics(c)
    n_normal = c.fp + c.tn
    return BaselineRow(float(thr), m.precision, m.recall, c.fp / n_normal if n_normal else 0.0,
                       m.precision_undefined)


def baseline_at(streams: Mapping[str, np.ndarray], failed: Iterable[str], w: float, threshold: float) -> BaselineRow:
    """The baseline's operating point at one CE-rate threshold (CEs per hour)."""
    return _baseline_row(*_max_rates(streams, failed, w), threshold)


def threshold_baseline(
    streams: Mapping[str, np.ndarray],
    failed: Iterable[str],
    w: float,
) -> BaselineSweep:
    """Sweep every distinct per-DIMM max CE rate as a flagging threshold.

    ``streams`` maps each DIMM to the sorted timestamps it may be judged on.
    A DIMM is flagged when its max rate is ``>=`` the threshold.
    """
    rates, is_failed = _max_rates(streams, failed, w)
    rows = [_baseline_row(rates, is_failed, thr) for thr in np.unique(rates[rates > 0])]
    best_p = max(rows, key=lambda r: (r.precision, r.recall), default=None)
    best_r = max(rows, key=lambda r: (r.recall, r.precision), default=None)
    n_failed = int(is_failed.sum())
    return BaselineSweep(rows, best_p, best_r, n_failed, len(rates) - n_failed)


@dataclass(frozen=True)
class ExperimentConfig:
    w: float = 168.0
    modes: tuple[str, ...] = ("overall", "fixed")
    lead_hours: float = 3.0
    n_normal: int = 5000
    repeats: int = 5
    folds: int = 10
    seed: int = 0
    threshold: float = 0.5
    forest: ForestParams = field(default_factory=ForestParams)
    jobs: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modes"] = list(self.modes)
        d.pop("jobs")
        return d


def _summary(values: list[float]) -> dict:
    arr = np.array(values, dtype=float)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "min": float(arr.min()), "max": float(arr.max())}


@dataclass
class EvalReport:
    config: ExperimentConfig
    rows: list[dict]
    baseline: BaselineSweep
    relative_improvement: dict | None
    catalog_version: str = CATALOG_VERSION

    def row(self, strategy: str) -> dict:
        for r in self.rows:
            if r["strategy"] == strategy:
                return r
        raise KeyError(strategy)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "catalog_version": self.catalog_version,
            "config": self.config.to_dict(),
            "rows": self.rows,
            "baseline": self.baseline.to_dict(),
            "relative_improvement": self.relative_improvement,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def render_table(self) -> str:
        head = ("strategy", "w[h]", "#normal", "precision", "recall", "err(normal test)")
        lines = []
        fmt = "{:<10} {:>6} {:>8} {:>14} {:>14} {:>17}"
        lines.append(fmt.format(*head))
        for r in self.rows:
            def ms(key):
                s = r[key]
                return f"{s['mean']:.3f}±{s['std']:.3f}" if s else "n/a"
            lines.append(fmt.format(r["strategy"], f"{r['w']:g}", r["n_normal"], ms("precision"), ms("recall"),
                                    ms("error_rate_normal_test")))
        bp, br = self.baseline.best_precision, self.baseline.best_recall
        if bp is not None:
            lines.append("")
            lines.append(f"threshold baseline (w={self.config.w:g}h, {len(self.baseline.rows)} thresholds)")
            lines.append(f"  best precision: thr={bp.threshold:.4g}/h precision={bp.precision:.3f} "
                         f"recall={bp.recall:.3f} err={bp.error_rate:.3f}")
            lines.append(f"  best recall:    thr={br.threshold:.4g}/h precision={br.precision:.3f} "
                         f"recall={br.recall:.3f} err={br.error_rate:.3f}")
        if self.relative_improvement:
            ri = self.relative_improvement
            lines.append("")
            lines.append("overall vs fixed: " + ", ".join(
                f"{k} {v * 100:+.1f}%" if v is not None else f"{k} n/a" for k, v in ri.items()))
        return "\n".join(lines) + "\n"


def _relative(a: dict | None, b: dict | None) -> float | None:
    if not a or not b or b["mean"] == 0:
        return None
    return relative_improvement(a["mean"], b["mean"])


def run_experiment(
    streams: Mapping[str, Sequence[CeRecord]],
    failures: Mapping[str, int],
    cfg: ExperimentConfig = ExperimentConfig(),
    samples: Mapping[str, DimmSamples] | None = None,
) -> EvalReport:
    """Run the full protocol for every mode in ``cfg.modes``.

    ``streams`` holds the filtered, time-ordered CEs of every DIMM with at
    least one CE; ``failures`` maps failed DIMMs to their failure time.
    Features are computed once in ``overall`` mode; ``fixed`` mode reuses
    them with every non-window slot zeroed. All modes see the same normal
    subsamples and folds.
    """
    if samples is None:
        samples = build_samples(streams, failures, WindowConfig(w=cfg.w, mode="overall"), cfg.lead_hours)
    failed = [d for d in streams if d in failures]
    normal = [d for d in streams if d not in failures]
    seeds = repeat_seeds(cfg.seed, cfg.repeats)
    splits = sample_splits(failed, normal, cfg.n_normal, seeds,
                           {"w": cfg.w, "lead_hours": cfg.lead_hours, "n_normal": cfg.n_normal})
    rows = []
    for mode in cfg.modes:
        mode_samples = samples if mode == "overall" else {d: s.with_mode(mode) for d, s in samples.items()}
        per_repeat = []
        importances = []
        for split in splits:
            log.info("mode=%s repeat=%d: %d failed, %d normal train, %d normal test", mode, split.repeat,
                     len(split.failed_dimms), len(split.normal_train_dimms), len(split.normal_test_dimms))
            folds = cross_validate(split, mode_samples, cfg.folds, cfg.forest,
                                   _derived_seed(cfg.seed, split.repeat), cfg.threshold, cfg.jobs)
            total = sum((f.counts for f in folds), ConfusionCounts())
            m = metrics(total)
            errs = [f.error_rate_normal_test for f in folds if f.error_rate_normal_test is not None]
            importances += [f.importance for f in folds]
            per_repeat.append({
                "repeat": split.repeat,
                "seed": split.seed,
                "counts": asdict(total),
                "precision": m.precision,
                "recall": m.recall,
                "precision_undefined": m.precision_undefined,
                "error_rate_normal_test": float(np.mean(errs)) if errs else None,
                "folds": [f.to_dict() for f in folds],
            })
        imp = np.mean(importances, axis=0)
        top = np.argsort(-imp, kind="stable")[:10]
        err_values = [r["error_rate_normal_test"] for r in per_repeat if r["error_rate_normal_test"] is not None]
        rows.append({
            "strategy": mode,
            "w": cfg.w,
            "n_normal": cfg.n_normal,
            "precision": _summary([r["precision"] for r in per_repeat]),
            "recall": _summary([r["recall"] for r in per_repeat]),
            "error_rate_normal_test": _summary(err_values) if err_values else None,
            "top_features": [{"name": FEATURE_NAMES[i], "importance": float(imp[i])} for i in top],
            "repeats": per_repeat,
        })

    baseline_streams = {d: s.ts[s.keep] for d, s in samples.items()}
    baseline = threshold_baseline(baseline_streams, failed, cfg.w)

    rel = None
    modes = [r["strategy"] for r in rows]
    if "overall" in modes and "fixed" in modes:
        a, b = rows[modes.index("overall")], rows[modes.index("fixed")]
        rel = {
            "precision": _relative(a["precision"], b["precision"]),
            "recall": _relative(a["recall"], b["recall"]),
        }
    return EvalReport(cfg, rows, baseline, rel)
