"""Random forest of CART trees with a JSON model format."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np

from memfail.fengine.catalog import CATALOG_VERSION
from memfail.forest._cart import build_tree, predict_tree

MODEL_FORMAT = "memfail-forest/1"


class ModelVersionError(ValueError):
    pass


class Classifier(Protocol):
    """What the evaluation harness needs from a trained model."""

    n_features: int
    catalog_version: str

    def predict_proba(self, X: np.ndarray) -> np.ndarray: ...

    def to_dict(self) -> dict: ...


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_split: int = 2
    max_features: int | None = None  # None: floor(sqrt(d))
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.max_features is not None and self.max_features < 1:
            raise ValueError("max_features must be >= 1 or None")

    def features_per_split(self, d: int) -> int:
        if self.max_features is not None:
            return min(self.max_features, d)
        return max(1, math.isqrt(d))


def gini(counts: Sequence[float]) -> float:
    """Gini impurity ``1 - sum(p_c ** 2)`` of a class-count vector."""
    total = float(sum(counts))
    if total <= 0:
        return 0.0
    return 1.0 - sum((c / total) ** 2 for c in counts)


@dataclass
class DecisionTree:
    """Flat node arrays; ``left[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    count0: np.ndarray
    count1: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.left < 0

    def leaf_value(self) -> np.ndarray:
        total = self.count0 + self.count1
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(total > 0, self.count1 / np.where(total > 0, total, 1), 0.0)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return predict_tree(X, self.feature, self.threshold, self.left, self.right, self.leaf_value())

    def impurity_decrease(self, n_features: int) -> np.ndarray:
        """Weighted Gini decrease per feature, summed over this tree's splits."""
        out = np.zeros(n_features)
        n = self.count0 + self.count1
        imp = 1.0 - np.where(n > 0, (self.count0 ** 2 + self.count1 ** 2) / np.where(n > 0, n, 1) ** 2, 1.0)
        for node in np.nonzero(self.left >= 0)[0]:
            lc, rc = self.left[node], self.right[node]
            out[self.feature[node]] += n[node] * imp[node] - n[lc] * imp[lc] - n[rc] * imp[rc]
        return out

    def validate(self, n_features: int) -> None:
        k = self.n_nodes
        arrays = (self.threshold, self.left, self.right, self.count0, self.count1)
        if k == 0 or any(len(a) != k for a in arrays):
            raise ValueError("tree arrays are empty or of unequal length")
        internal = self.left >= 0
        if np.any(internal != (self.right >= 0)):
            raise ValueError("node with exactly one child")
        if np.any(self.left[internal] >= k) or np.any(self.right[internal] >= k):
            raise ValueError("child index out of range")
        if np.any(self.feature[internal] < 0) or np.any(self.feature[internal] >= n_features):
            raise ValueError("split feature index out of range")
        if np.any((self.count0 + self.count1)[~internal] <= 0):
            raise ValueError("leaf with no samples")

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [float(v) for v in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "count0": [int(v) for v in self.count0],
            "count1": [int(v) for v in self.count1],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DecisionTree":
        return cls(
            np.asarray(obj["feature"], dtype=np.int64),
            np.asarray(obj["threshold"], dtype=float),
            np.asarray(obj["left"], dtype=np.int64),
            np.asarray(obj["right"], dtype=np.int64),
            np.asarray(obj["count0"], dtype=float),
            np.asarray(obj["count1"], dtype=float),
        )


@dataclass
class TrainedForest:
    trees: list[DecisionTree]
    n_features: int
    params: ForestParams
    catalog_version: str = CATALOG_VERSION

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = _as_matrix(X, self.n_features)
        if X.shape[0] == 0:
            return np.zeros(0)
        total = np.zeros(X.shape[0])
        for tree in self.trees:
            total += tree.predict_proba(X)
        return total / len(self.trees)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "catalog_version": self.catalog_version,
            "n_features": self.n_features,
            "params": asdict(self.params),
            "trees": [t.to_dict() for t in self.trees],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, obj: dict, expect_version: str | None = None) -> "TrainedForest":
        if obj.get("format") != MODEL_FORMAT:
            raise ModelVersionError(f"unsupported model format {obj.get('format')!r}, expected {MODEL_FORMAT!r}")
        version = obj["catalog_version"]
        if expect_version is not None and version != expect_version:
            raise ModelVersionError(
                f"model catalog version {version!r} does not match features {expect_version!r}"
            )
        n_features = int(obj["n_features"])
        trees = [DecisionTree.from_dict(t) for t in obj["trees"]]
        for t in trees:
            t.validate(n_features)
        return cls(trees, n_features, ForestParams(**obj["params"]), version)

    @classmethod
    def loads(cls, text: str, expect_version: str | None = None) -> "TrainedForest":
        return cls.from_dict(json.loads(text), expect_version)


def _as_matrix(X, d: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {X.shape}")
    if d is not None and X.shape[1] != d:
        raise ValueError(f"feature length {X.shape[1]} does not match the model's {d}")
    return np.ascontiguousarray(X)


def tree_seeds(seed: int, n_trees: int) -> list[np.random.SeedSequence]:
    return [np.random.SeedSequence([seed, t]) for t in range(n_trees)]


def _fit_tree(Xt, y, order, col_const, ss: np.random.SeedSequence, max_depth, min_split, mtry) -> DecisionTree:
    n = Xt.shape[1]
    rng = np.random.default_rng(ss)
    weights = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(float)
    rows = np.nonzero(weights)[0].astype(np.int64)
    kernel_seed = int(ss.generate_state(1)[0])
    return DecisionTree(*build_tree(Xt, y, weights, rows, order, col_const, max_depth, min_split, mtry, kernel_seed))


def fit(
    X,
    y,
    params: ForestParams = ForestParams(),
    catalog_version: str = CATALOG_VERSION,
    jobs: int = 1,
    sample_ids: Sequence[str] | None = None,
) -> TrainedForest:
    """Train a forest on a feature matrix and 0/1 labels.

    Tree ``t`` draws its bootstrap and split candidates from a seed derived
    from ``(params.seed, t)``, so the result does not depend on ``jobs``.
    """
    X = _as_matrix(X)
    y = np.asarray(y)
    n, d = X.shape
    if len(y) != n:
        raise ValueError(f"{n} feature rows but {len(y)} labels")
    if n == 0:
        raise ValueError("cannot train on an empty sample set")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if not (np.any(y == 0) and np.any(y == 1)):
        raise ValueError("training data must contain both classes")
    bad = ~np.isfinite(X)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        who = sample_ids[i] if sample_ids is not None else f"row {i}"
        raise ValueError(f"non-finite feature value at sample {who}, feature {j}")
    Xt = np.ascontiguousarray(X.T)
    yb = y.astype(np.int8)
    max_depth = -1 if params.max_depth is None else params.max_depth
    mtry = params.features_per_split(d)
    seeds = tree_seeds(params.seed, params.n_trees)
    order = np.argsort(Xt, axis=1, kind="stable").astype(np.int32)
    col_const = Xt.min(axis=1) == Xt.max(axis=1)

    def one(ss):
        return _fit_tree(Xt, yb, order, col_const, ss, max_depth, params.min_samples_split, mtry)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trees = list(pool.map(one, seeds))
    else:
        trees = [one(ss) for ss in seeds]
    return TrainedForest(trees, d, params, catalog_version)


def train(samples, params: ForestParams = ForestParams(), catalog_version: str = CATALOG_VERSION,
          jobs: int = 1) -> TrainedForest:
    """Train from a :class:`~memfail.labeling.SampleSet` or a list of labeled samples."""
    if hasattr(samples, "X") and hasattr(samples, "y"):
        X, y, ids = samples.X, samples.y, [f"{d}@{t}" for d, t in zip(samples.dimms, samples.ts)]
    else:
        samples = list(samples)
        if not samples:
            raise ValueError("cannot train on an empty sample set")
        X = np.vstack([s.features for s in samples])
        y = np.array([s.label for s in samples])
        ids = [f"{s.dimm}@{s.ts}" for s in samples]
    return fit(X, y, params, catalog_version, jobs, ids)


def predict_proba(forest: Classifier, features) -> float | np.ndarray:
    """Mean positive-leaf fraction over trees; a float for a single vector."""
    arr = np.asarray(features, dtype=float)
    out = forest.predict_proba(arr)
    return float(out[0]) if arr.ndim == 1 else out


def feature_importance(forest: TrainedForest) -> np.ndarray:
    """Mean decrease in Gini impurity, normalized to sum to 1 (uniform if no splits)."""
    d = forest.n_features
    acc = np.zeros(d)
    for tree in forest.trees:
        dec = tree.impurity_decrease(d)
        s = dec.sum()
        if s > 0:
            acc += dec / s
    total = acc.sum()
    if total <= 0:
        return np.full(d, 1.0 / d)
    return acc / total
