import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from treedgp.data import (
    DataError,
    Dataset,
    lgbb_like,
    lgbb_noise_sd,
    load_csv,
    load_motorcycle,
    step_data,
)


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_three_rows_rescaled(tmp_path):
    p = write(tmp_path, "a,b,y\n1,10,0.5\n3,20,1.5\n2,40,2.0\n")
    ds = load_csv(p, "y", n_min=3)
    np.testing.assert_allclose(ds.X, [[0, 0], [1, 1 / 3], [0.5, 1]])
    assert ds.columns == ["a", "b"] and ds.response == "y"
    assert ds.Z.mean() == pytest.approx(0, abs=1e-15)
    assert ds.Z.std(ddof=1) == pytest.approx(1)


def test_response_column_anywhere(tmp_path):
    p = write(tmp_path, "y,a\n1,0\n2,1\n4,2\n3,5\n")
    ds = load_csv(p, "y")
    assert ds.columns == ["a"]
    np.testing.assert_array_equal(ds.Z_raw, [1, 2, 4, 3])


def test_constant_column(tmp_path):
    p = write(tmp_path, "a,b,y\n1,7,0\n2,7,1\n3,7,2\n4,7,5\n5,7,1\n")
    with pytest.raises(DataError, match="degenerate.*b"):
        load_csv(p, "y")


@pytest.mark.parametrize("body,pattern", [
    ("a,y\n1,2\n2,\n3,4\n4,1\n", "missing value at row 3, column 'y'"),
    ("a,y\n1,2\nfoo,3\n3,4\n4,1\n", "non-numeric value 'foo' at row 3, column 'a'"),
    ("a,y\n1,2\n2,3,4\n", "row 3 has 3 fields"),
    ("a,y\n1,2\n2,3\n", "n_min=4"),
])
def test_rejections_name_location(tmp_path, body, pattern):
    with pytest.raises(DataError, match=pattern):
        load_csv(write(tmp_path, body), "y")


def test_missing_response_column(tmp_path):
    with pytest.raises(DataError, match="'z' not in header"):
        load_csv(write(tmp_path, "a,y\n1,2\n2,3\n3,1\n4,4\n"), "z")


def test_constant_response():
    with pytest.raises(DataError, match="constant"):
        Dataset.from_arrays(np.arange(5.0), np.ones(5))


def test_motorcycle():
    ds = load_motorcycle()
    assert (ds.n, ds.m_X) == (133, 1)
    assert ds.columns == ["times"] and ds.response == "accel"
    assert ds.x_min[0] == pytest.approx(2.4) and ds.x_max[0] == pytest.approx(57.6)
    assert ds.Z_raw.min() == pytest.approx(-134.0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (8, 3), elements=st.floats(-1e6, 1e6, allow_subnormal=False)),
       arrays(np.float64, 8, elements=st.floats(-1e3, 1e3, allow_subnormal=False)))
def test_scaling_round_trip(X, Z):
    try:
        ds = Dataset.from_arrays(X, Z)
    except DataError:
        return
    assert np.all(ds.X >= 0) and np.all(ds.X <= 1)
    scale = np.maximum(np.abs(X).max(axis=0), 1.0)
    assert np.all(np.abs(ds.unscale_x(ds.X) - X) <= 1e-12 * scale)
    assert np.all(np.abs(ds.unscale_z(ds.Z) - Z) <= 1e-12 * max(np.abs(Z).max(), 1.0))


def test_subset_scaling():
    ds = Dataset.from_arrays(np.arange(10.0), np.arange(10.0) ** 2)
    sub = ds.subset(np.arange(2, 8))
    assert sub.X.min() == 0 and sub.X.max() == 1
    kept = ds.subset(np.arange(2, 8), rescale=False)
    assert kept.x_min == ds.x_min and kept.z_sd == ds.z_sd


def test_step_data():
    ds = step_data(seed=3)
    assert ds.n == 60
    assert np.mean(ds.Z_raw[ds.X_raw[:, 0] > 0.5]) > 0.9
    assert step_data(seed=3).Z_raw.tolist() == ds.Z_raw.tolist()


def test_lgbb_like():
    ds = lgbb_like()
    assert ds.columns == ["mach", "alpha"] and ds.n == 98
    noisy = lgbb_noise_sd(ds.X_raw[:, 0], ds.X_raw[:, 1]) > 0.05
    assert noisy.any() and not noisy.all()
