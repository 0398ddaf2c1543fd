import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import H, ce, random_stream
from memfail.fengine import WindowConfig, extract_stream
from memfail.labeling import (
    LabeledSample,
    SampleSet,
    assemble,
    exclude_lead_time,
    gap_labels,
    label_dimm,
    largest_gap_split,
    lead_time_mask,
    repeat_seeds,
    sample_splits,
)


def test_gap_example():
    ts = np.array([0, 1, 2, 500, 501]) * H
    assert largest_gap_split(ts) == 3
    assert list(gap_labels(ts)) == [0, 0, 0, 1, 1]


def test_single_timestamp():
    assert largest_gap_split([42 * H]) == 0
    assert list(gap_labels([42 * H])) == [1]


def test_tie_takes_earliest():
    assert largest_gap_split([0, 10 * H, 20 * H]) == 1


def test_gap_errors():
    with pytest.raises(ValueError):
        largest_gap_split([])
    with pytest.raises(ValueError):
        largest_gap_split([5, 3])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 10**7), min_size=2, max_size=60))
def test_gap_is_maximal_and_labels_monotone(values):
    ts = np.sort(np.array(values))
    k = largest_gap_split(ts)
    gaps = np.diff(ts)
    assert gaps[k - 1] == gaps.max()
    assert all(gaps[i] < gaps[k - 1] for i in range(k - 1))
    lab = gap_labels(ts)
    assert np.all(np.diff(lab) >= 0) and lab[-1] == 1


def _samples(hours):
    return [LabeledSample("D", int(h * H), np.zeros(1), 0) for h in hours]


def test_lead_time_example():
    kept = exclude_lead_time(_samples([90, 98, 99.5]), 100 * H, 3)
    assert [s.ts for s in kept] == [90 * H]


def test_lead_time_zero_is_identity():
    s = _samples([90, 98, 99.5, 100])
    assert exclude_lead_time(s, 100 * H, 0) == s


def test_lead_time_all_excluded_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert exclude_lead_time(_samples([98, 99]), 100 * H, 3) == []
    assert caplog.records
    with pytest.raises(ValueError):
        lead_time_mask(np.array([1]), 10, -1)


def test_lead_time_boundary_inclusive():
    assert lead_time_mask(np.array([97 * H]), 100 * H, 3)[0]


def test_label_dimm_gap_first_then_exclusion():
    ev = [ce(0), ce(1), ce(2), ce(500), ce(501), ce(502)]
    d = label_dimm("D1", ev, WindowConfig(), failure_time=503 * H, lead_hours=1.5)
    assert list(d.labels) == [0, 0, 0, 1, 1, 1]
    assert list(d.keep) == [True, True, True, True, True, False]
    ts, X, y = d.kept()
    assert list(y) == [0, 0, 0, 1, 1]
    # excluded CE still fed the state: features equal the full-stream extraction
    assert np.array_equal(d.X, extract_stream(ev, WindowConfig()))


def test_normal_dimm_all_zero(rng):
    ev = random_stream(rng, 30)
    d = label_dimm("D1", ev, WindowConfig())
    assert not d.failed and np.all(d.labels == 0) and np.all(d.keep)


def _population(rng, n_failed=5, n_normal=40):
    failed = {f"F{i}": random_stream(rng, 10, dimm=f"F{i}") for i in range(n_failed)}
    normal = {f"N{i}": random_stream(rng, 8, dimm=f"N{i}") for i in range(n_normal)}
    failures = {d: ev[-1].ts + 10 * H for d, ev in failed.items()}
    return failed, normal, failures


def test_assemble_and_splits(rng):
    failed, normal, failures = _population(rng)
    samples, splits = assemble(failed, normal, failures, n_normal=25, repeats=3, seed=4)
    assert len(splits) == 3
    for sp in splits:
        assert len(sp.normal_train_dimms) == 25 and len(sp.normal_test_dimms) == 15
        assert not set(sp.train_dimms) & set(sp.normal_test_dimms)
        assert sp.failed_dimms == sorted(failed)
        ss = sp.train(samples)
        assert set(ss.y) == {0, 1}
    assert [s.seed for s in splits] == repeat_seeds(4, 3) == [4, 5, 6]
    assert splits[0].normal_train_dimms != splits[1].normal_train_dimms
    _, again = assemble(failed, normal, failures, n_normal=25, repeats=3, seed=4)
    assert [s.to_dict() for s in again] == [s.to_dict() for s in splits]


def test_split_errors_and_boundaries(caplog):
    with pytest.raises(ValueError) as exc:
        sample_splits(["F"], ["a", "b"], 3, [0])
    assert "3" in str(exc.value) and "2" in str(exc.value)
    with caplog.at_level(logging.WARNING):
        sp = sample_splits(["F"], ["a", "b"], 2, [0])
    assert sp[0].normal_test_dimms == [] and caplog.records


def test_split_roundtrip(rng):
    failed, normal, failures = _population(rng)
    _, splits = assemble(failed, normal, failures, n_normal=10, repeats=1)
    from memfail.labeling import DatasetSplit
    assert DatasetSplit.from_dict(splits[0].to_dict()) == splits[0]


def test_sample_set_concat_empty():
    s = SampleSet.concat([])
    assert len(s) == 0 and s.X.shape[1] == 46
