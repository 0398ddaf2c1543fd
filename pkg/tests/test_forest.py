import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memfail.forest import (
    DecisionTree,
    ForestParams,
    ModelVersionError,
    TrainedForest,
    feature_importance,
    first_alarm,
    fit,
    gini,
    predict_dimm,
    predict_proba,
    train,
)
from memfail.labeling import LabeledSample


def toy(n=200, seed=0, margin=0.2):
    """Two uniform features split by the diagonal, with an empty band of ``margin``."""
    rng = np.random.default_rng(seed)
    X = np.empty((0, 2))
    while len(X) < n:
        Z = rng.uniform(-1, 1, size=(n, 2))
        X = np.vstack([X, Z[np.abs(Z.sum(axis=1)) > margin]])
    X = X[:n]
    return X, (X.sum(axis=1) > 0).astype(int)


def stub(count0, count1):
    return DecisionTree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]),
                        np.array([float(count0)]), np.array([float(count1)]))


def test_gini_closed_form():
    assert gini([5, 5]) == pytest.approx(0.5)
    assert gini([10, 0]) == 0.0
    assert gini([1, 2, 3]) == pytest.approx(1 - (1 + 4 + 9) / 36)
    assert gini([0, 0]) == 0.0


def test_separable_training_accuracy():
    rng = np.random.default_rng(3)
    X = np.vstack([rng.normal(-2, 0.3, (10, 2)), rng.normal(2, 0.3, (10, 2))])
    y = np.r_[np.zeros(10), np.ones(10)]
    f = fit(X, y, ForestParams(n_trees=15, seed=1))
    assert np.mean((f.predict_proba(X) >= 0.5) == y) == 1.0


def test_holdout_accuracy_floor():
    X, y = toy(400)
    f = fit(X[:200], y[:200], ForestParams(n_trees=50, seed=0))
    assert np.mean((f.predict_proba(X[200:]) >= 0.5) == y[200:]) >= 0.95


def test_identical_features_give_single_leaf_majority():
    X = np.ones((10, 3))
    y = np.array([1, 1, 1, 0, 0, 0, 0, 0, 0, 0])
    f = fit(X, y, ForestParams(n_trees=5))
    assert all(t.n_nodes == 1 for t in f.trees)
    assert predict_proba(f, np.ones(3)) < 0.5


def test_determinism_and_jobs():
    X, y = toy()
    a = fit(X, y, ForestParams(n_trees=12, seed=9)).dumps()
    b = fit(X, y, ForestParams(n_trees=12, seed=9), jobs=4).dumps()
    c = fit(X, y, ForestParams(n_trees=12, seed=10)).dumps()
    assert a == b and a != c


def test_serialization_roundtrip_and_version_check():
    X, y = toy()
    f = fit(X, y, ForestParams(n_trees=5))
    g = TrainedForest.loads(f.dumps())
    assert np.array_equal(f.predict_proba(X), g.predict_proba(X))
    obj = json.loads(f.dumps())
    obj["catalog_version"] = "memfail-catalog/0"
    with pytest.raises(ModelVersionError) as exc:
        TrainedForest.from_dict(obj, expect_version="memfail-catalog/1")
    assert "memfail-catalog/0" in str(exc.value) and "memfail-catalog/1" in str(exc.value)
    obj["format"] = "other"
    with pytest.raises(ModelVersionError):
        TrainedForest.from_dict(obj)


def test_input_errors():
    X, y = toy(20)
    with pytest.raises(ValueError):
        fit(X, np.zeros(20))
    bad = X.copy()
    bad[4, 1] = np.nan
    with pytest.raises(ValueError) as exc:
        fit(bad, y, sample_ids=[f"s{i}" for i in range(20)])
    assert "s4" in str(exc.value) and "feature 1" in str(exc.value)
    f = fit(X, y, ForestParams(n_trees=2))
    with pytest.raises(ValueError):
        f.predict_proba(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        ForestParams(n_trees=0)


def test_stub_proba():
    f = TrainedForest([stub(1, 3)], 2, ForestParams(n_trees=1))
    assert predict_proba(f, [0.0, 0.0]) == 0.75


def test_pure_leaves_on_training_points():
    X, y = toy(60)
    f = fit(X, y, ForestParams(n_trees=1, seed=2))
    t = f.trees[0]
    assert np.all((t.count0[t.is_leaf] == 0) | (t.count1[t.is_leaf] == 0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_proba_range_on_fuzzed_input(seed):
    X, y = toy(50, seed % 7)
    f = fit(X, y, ForestParams(n_trees=3, seed=seed))
    Z = np.random.default_rng(seed).normal(0, 100, size=(40, 2))
    p = f.predict_proba(Z)
    assert np.all((p >= 0) & (p <= 1))


def test_adding_certain_tree_never_lowers_proba():
    X, y = toy(80)
    f = fit(X, y, ForestParams(n_trees=4))
    g = TrainedForest(f.trees + [stub(0, 5)], 2, f.params)
    assert np.all(g.predict_proba(X) >= f.predict_proba(X) - 1e-15)


def test_importance_contracts():
    X, y = toy()
    f = fit(X, y, ForestParams(n_trees=10))
    imp = feature_importance(f)
    assert abs(imp.sum() - 1) <= 1e-9 and np.all(imp >= 0)
    single = DecisionTree(np.array([3, -1, -1]), np.array([0.5, 0, 0]), np.array([1, -1, -1]),
                          np.array([2, -1, -1]), np.array([5.0, 5, 0]), np.array([5.0, 0, 5]))
    g = TrainedForest([single], 5, ForestParams(n_trees=1))
    assert list(feature_importance(g)) == [0, 0, 0, 1.0, 0]
    h = TrainedForest([stub(1, 1)], 4, ForestParams(n_trees=1))
    assert list(feature_importance(h)) == [0.25] * 4


def test_train_from_labeled_samples():
    X, y = toy(40)
    samples = [LabeledSample("D", i, X[i], int(y[i])) for i in range(40)]
    f = train(samples, ForestParams(n_trees=3))
    assert f.n_features == 2
    with pytest.raises(ValueError):
        train([], ForestParams(n_trees=3))


def test_first_alarm_rules():
    v = first_alarm([0.1, 0.2, 0.7, 0.1], [10, 20, 30, 40])
    assert v.fail and v.first_alarm_ts == 30
    assert not first_alarm([0.1, 0.4], [1, 2]).fail
    assert first_alarm([0.5], [7]).first_alarm_ts == 7
    assert not first_alarm([], []).fail
    with pytest.raises(ValueError):
        first_alarm([0.2], [1], threshold=1.0)


def test_predict_dimm():
    f = TrainedForest([stub(1, 3)], 2, ForestParams(n_trees=1))
    v = predict_dimm(f, np.zeros((3, 2)), [5, 6, 7])
    assert v.fail and v.first_alarm_ts == 5


def _grow(Xt, y, weights, seed):
    from memfail.forest._cart import build_tree
    order = np.argsort(Xt, axis=1, kind="stable").astype(np.int32)
    col_const = Xt.min(axis=1) == Xt.max(axis=1)
    rows = np.nonzero(weights)[0].astype(np.int64)
    return build_tree(Xt, y, weights, rows, order, col_const, -1, 2, 2, seed)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_presorted_scan_matches_per_node_sort(seed):
    rng = np.random.default_rng(seed)
    n, d = 120, 5
    X = np.round(rng.normal(size=(n, d)), 1)
    y = (X[:, 0] + rng.normal(0, 0.5, n) > 0).astype(np.int8)
    w = np.bincount(rng.integers(0, n, n), minlength=n).astype(float)
    direct = _grow(np.ascontiguousarray(X.T), y, w, seed)
    # zero-weight padding rows push every node below the presort size cutoff
    pad = 20 * n
    Xp = np.vstack([X, rng.normal(size=(pad, d))])
    yp = np.r_[y, np.zeros(pad, dtype=np.int8)]
    wp = np.r_[w, np.zeros(pad)]
    padded = _grow(np.ascontiguousarray(Xp.T), yp, wp, seed)
    for a, b in zip(direct, padded):
        assert np.array_equal(a, b)
