import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lestab.data import (Dataset, blob_centers, emit_csv, gen_blobs, gen_linear_gaussian,
                         gen_two_cluster, load_csv)
from lestab.errors import InvalidArgument, ParseError


def test_two_cluster_shapes_and_balance():
    ds = gen_two_cluster(3, 10, 0)
    assert (ds.m, ds.d) == (10, 3)
    assert ds.y.sum() == 0
    assert set(ds.classes) == {0, 1}
    pos = ds.X[ds.y > 0]
    neg = ds.X[ds.y < 0]
    assert pos.min() >= -0.5 and pos.max() <= 1.0
    assert neg.min() >= -1.0 and neg.max() <= 0.5


def test_two_cluster_deterministic():
    assert gen_two_cluster(4, 20, 7).equals(gen_two_cluster(4, 20, 7))
    assert not gen_two_cluster(4, 20, 7).equals(gen_two_cluster(4, 20, 8))


def test_two_cluster_rejects_odd_m():
    with pytest.raises(InvalidArgument):
        gen_two_cluster(2, 7, 0)


def test_blobs_centers_and_labels():
    ds = gen_blobs(10, 10, 5, 0.0, 0)
    assert ds.m == 50
    np.testing.assert_array_equal(ds.y, ds.class_tag)
    np.testing.assert_allclose(np.linalg.norm(blob_centers(10, 10), axis=1), 1.0)
    one_d = gen_blobs(1, 2, 3, 0.0, 0)
    assert sorted(set(one_d.X[:, 0])) == [-1.0, 1.0]


def test_blobs_many_classes_on_circle():
    C = blob_centers(2, 6)
    np.testing.assert_allclose(np.linalg.norm(C, axis=1), 1.0)
    assert len({tuple(np.round(c, 12)) for c in C}) == 6


def test_linear_gaussian_shared_truth():
    a = gen_linear_gaussian(3, 50, 1, noise=0.0)
    b = gen_linear_gaussian(3, 50, 99, noise=0.0, w_seed=1)
    wa = np.linalg.lstsq(a.X, a.y, rcond=None)[0]
    wb = np.linalg.lstsq(b.X, b.y, rcond=None)[0]
    np.testing.assert_allclose(wa, wb, atol=1e-10)


def test_bounds_and_overrides():
    ds = Dataset([[3.0, 4.0], [0.0, 1.0]], [2.0, -5.0])
    assert ds.norm_bound == 5.0 and ds.label_bound == 5.0
    assert Dataset([[1.0]], [1.0], norm_bound=2.0).norm_bound == 2.0
    with pytest.raises(InvalidArgument):
        Dataset([[3.0, 4.0]], [1.0], norm_bound=1.0)


def test_immutable():
    ds = gen_two_cluster(2, 4, 0)
    with pytest.raises(ValueError):
        ds.X[0, 0] = 9.0


def test_without_removes_one():
    ds = gen_two_cluster(2, 6, 3)
    w = ds.without(2)
    assert w.m == 5
    np.testing.assert_array_equal(w.X, np.delete(ds.X, 2, axis=0))
    with pytest.raises(InvalidArgument):
        ds.without(6)


def test_mismatched_lengths():
    with pytest.raises(InvalidArgument):
        Dataset(np.zeros((3, 2)), np.zeros(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 20), st.integers(0, 10 ** 6))
def test_csv_round_trip(tmp_path_factory, d, half, seed):
    ds = gen_two_cluster(d, 2 * half, seed)
    p = tmp_path_factory.mktemp("csv") / "ds.csv"
    assert load_csv(emit_csv(ds, p)).equals(ds)


def test_csv_round_trip_untagged(tmp_path):
    ds = gen_linear_gaussian(2, 5, 0)
    back = load_csv(emit_csv(ds, tmp_path / "a.csv"))
    assert back.equals(ds) and back.class_tag is None


@pytest.mark.parametrize("body, line", [
    ("", 1),
    ("a,b\n1,2\n", 1),
    ("x0,y\n1,2\n3\n", 3),
    ("x0,y\n1,2\nfoo,1\n", 3),
    ("x0,y\n1,nan\n", 2),
    ("x0,y,class\n1,2,a\n", 2),
    ("x0,y\n", 2),
])
def test_csv_parse_errors_name_line(tmp_path, body, line):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(ParseError) as ei:
        load_csv(p)
    assert ei.value.line == line
    assert str(ei.value).startswith(f"line {line}:")
