import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from contcrm.data import (
    DataValidationError,
    LoggedDataset,
    ParseError,
    header_for,
    kfold_indices,
    load_csv,
    save_csv,
    split,
)

from conftest import make_dataset

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
positive = st.floats(1e-8, 1e6, allow_nan=False, allow_infinity=False)


def test_dataset_is_read_only(small_ds):
    with pytest.raises(ValueError):
        small_ds.actions[0] = 3.0
    assert small_ds.n == 200 and small_ds.d == 2


def test_dataset_copies_inputs():
    X = np.zeros((3, 1))
    a = np.ones(3)
    ds = LoggedDataset(X, a, np.ones(3), np.zeros(3))
    a[0] = 99.0
    assert ds.actions[0] == 1.0


@pytest.mark.parametrize(
    "kwargs, message",
    [
        ({"propensities": np.array([1.0, 0.0, 1.0])}, "propensit"),
        ({"propensities": np.array([1.0, -2.0, 1.0])}, "propensit"),
        ({"costs": np.array([0.0, np.nan, 1.0])}, "finite"),
        ({"actions": np.array([0.0, 1.0])}, "length"),
    ],
)
def test_dataset_validation(kwargs, message):
    base = dict(contexts=np.zeros((3, 2)), actions=np.ones(3), propensities=np.ones(3), costs=np.zeros(3))
    base.update(kwargs)
    with pytest.raises(DataValidationError, match=message):
        LoggedDataset(**base)


@settings(max_examples=40, deadline=None)
@given(
    xs=st.integers(1, 4).flatmap(
        lambda d: st.tuples(
            arrays(np.float64, st.tuples(st.integers(1, 12), st.just(d)), elements=finite),
            st.just(d),
        )
    ),
    data=st.data(),
)
def test_csv_roundtrip_is_exact(xs, data, tmp_path_factory):
    X, d = xs
    n = X.shape[0]
    a = data.draw(arrays(np.float64, n, elements=finite))
    p = data.draw(arrays(np.float64, n, elements=positive))
    y = data.draw(arrays(np.float64, n, elements=finite))
    ds = LoggedDataset(X, a, p, y)
    path = tmp_path_factory.mktemp("csv") / "d.csv"
    save_csv(ds, path)
    back = load_csv(path)
    for name in ("contexts", "actions", "propensities", "costs"):
        np.testing.assert_array_equal(getattr(back, name), getattr(ds, name))


def test_gzip_roundtrip(tmp_path, small_ds):
    path = tmp_path / "d.csv.gz"
    save_csv(small_ds, path)
    with gzip.open(path, "rt") as fh:
        assert fh.readline().strip() == ",".join(header_for(2))
    np.testing.assert_array_equal(load_csv(path).costs, small_ds.costs)


def test_bad_header_reports_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c,d\n1,2,3,4\n")
    with pytest.raises(ParseError) as info:
        load_csv(path)
    assert info.value.line == 1


def test_bad_number_reports_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x0,action,propensity,cost\n1,2,3,4\n1,oops,3,4\n")
    with pytest.raises(ParseError) as info:
        load_csv(path)
    assert info.value.line == 3


def test_nonpositive_propensity_in_file(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x0,action,propensity,cost\n1,2,0,4\n")
    with pytest.raises(DataValidationError, match="line 2"):
        load_csv(path)


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 500), st.integers(0, 2**31 - 1))
def test_split_partitions_rows(n, seed):
    ds = make_dataset(n=n, seed=1)
    parts = split(ds, (0.5, 0.25, 0.25), seed=seed)
    idx = np.concatenate(parts.indices)
    assert sorted(idx.tolist()) == list(range(n))
    sizes = [len(i) for i in parts.indices]
    # largest remainder: each size within one row of its exact share
    for s, f in zip(sizes, (0.5, 0.25, 0.25)):
        assert abs(s - f * n) < 1.0
    np.testing.assert_array_equal(parts.train.actions, ds.actions[parts.indices[0]])


def test_split_is_deterministic(small_ds):
    a = split(small_ds, seed=3)
    b = split(small_ds, seed=3)
    c = split(small_ds, seed=4)
    np.testing.assert_array_equal(a.indices[1], b.indices[1])
    assert not np.array_equal(a.indices[1], c.indices[1])


def test_split_too_small():
    with pytest.raises(ValueError):
        split(make_dataset(n=2), (0.5, 0.25, 0.25))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10).flatmap(lambda k: st.tuples(st.just(k), st.integers(k, 300))), st.integers(0, 1000))
def test_kfold_partition(kn, seed):
    k, n = kn
    folds = kfold_indices(n, k, seed)
    assert len(folds) == k
    allidx = np.concatenate(folds)
    assert sorted(allidx.tolist()) == list(range(n))
    sizes = [f.size for f in folds]
    assert max(sizes) - min(sizes) <= 1
