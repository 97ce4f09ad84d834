import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xaudit.data import (
    Dataset, FeatureSchema, fit_scaler, load_csv, load_schema, make_two_group_toy, split, write_csv,
)
from xaudit.datasets import BUNDLED, load_bundled
from xaudit.errors import DataError, SchemaError


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_three_rows(tmp_path):
    p = _write(tmp_path, "a,b,label\n1.0,2.0,0\n3.0,4.0,1\n5.0,6.0,1\n")
    ds = load_csv(p, FeatureSchema.continuous(["a", "b"]), "label")
    assert (ds.n, ds.d) == (3, 2)
    assert ds.y.tolist() == [0, 1, 1]
    assert ds.X[2].tolist() == [5.0, 6.0]


def test_missing_label_column_names_it(tmp_path):
    p = _write(tmp_path, "a,b\n1,2\n3,4\n")
    with pytest.raises(SchemaError, match="outcome"):
        load_csv(p, FeatureSchema.continuous(["a", "b"]), "outcome")


def test_credit_format_file(tmp_path):
    ds = load_bundled("credit20")
    p = tmp_path / "credit.csv"
    write_csv(ds, p, group_column=None)
    back = load_csv(p, ds.schema, "label")
    assert back.d == 20
    assert set(np.unique(back.y)) == {0, 1}


def test_roundtrip_with_groups_and_categoricals(tmp_path):
    ds = load_bundled("adult12")
    p = tmp_path / "adult.csv"
    write_csv(ds, p)
    back = load_csv(p, ds.schema, "label", "group")
    np.testing.assert_allclose(back.X, ds.X, atol=1e-12)
    assert back.y.tolist() == ds.y.tolist()
    assert [str(g) for g in back.group] == [str(g) for g in ds.group]


def test_schema_file_roundtrip(tmp_path):
    schema = load_bundled("adult12").schema
    p = tmp_path / "schema.json"
    import json

    p.write_text(json.dumps(schema.to_json()))
    assert load_schema(p) == schema


def test_invalid_categorical_code():
    schema = FeatureSchema(("c",), (2,), (1.0,))
    with pytest.raises(DataError):
        Dataset(schema, np.array([[0.0], [2.0]]), np.array([0, 1]))


def test_non_binary_label(tmp_path):
    p = _write(tmp_path, "a,label\n1,0\n2,2\n")
    with pytest.raises(DataError):
        load_csv(p, FeatureSchema.continuous(["a"]), "label")


def _small(n, seed=0):
    r = np.random.default_rng(seed)
    return Dataset(FeatureSchema.continuous(["a", "b"]), r.normal(size=(n, 2)), r.integers(0, 2, n))


def test_split_sizes_and_repeat():
    ds = _small(10)
    tr, te = split(ds, 0.2, 7)
    assert (tr.n, te.n) == (8, 2)
    tr2, te2 = split(ds, 0.2, 7)
    assert np.array_equal(te.X, te2.X) and np.array_equal(tr.X, tr2.X)


def test_split_partition():
    ds = _small(4)
    tr, te = split(ds, 0.5, 0)
    assert tr.n == te.n == 2
    rows = {tuple(r) for r in tr.X} | {tuple(r) for r in te.X}
    assert rows == {tuple(r) for r in ds.X}


def test_split_ignores_input_order():
    ds = _small(50, seed=3)
    perm = np.random.default_rng(1).permutation(ds.n)
    _, te_a = split(ds, 0.3, 11)
    _, te_b = split(ds.subset(perm), 0.3, 11)
    key = lambda X: sorted(map(tuple, X))
    assert key(te_a.X) == key(te_b.X)


def test_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        split(_small(10), 1.0, 0)


def test_scaler_hand_values():
    ds = Dataset(FeatureSchema.continuous(["a", "c"]), np.array([[1.0, 5], [2, 5], [3, 5]]), np.array([0, 1, 1]))
    sc = fit_scaler(ds)
    assert sc.mean[0] == 2.0
    assert sc.std[0] == pytest.approx(np.sqrt(2 / 3))
    assert sc.median[0] == 2.0 and sc.mad[0] == 1.0
    assert sc.constant.tolist() == [False, True]
    # the constant feature passes through standardization unchanged
    assert sc.standardize(ds.X)[:, 1].tolist() == [5.0, 5.0, 5.0]


def test_scaler_on_normal_draws():
    X = np.random.default_rng(0).normal(size=(1000, 1))
    sc = fit_scaler(Dataset(FeatureSchema.continuous(["a"]), X, np.zeros(1000)))
    assert abs(sc.mean[0]) < 0.1 and abs(sc.std[0] - 1) < 0.1


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_standardize_roundtrip(seed):
    ds = _small(20, seed)
    sc = fit_scaler(ds)
    np.testing.assert_allclose(sc.unstandardize(sc.standardize(ds.X)), ds.X, atol=1e-12)


def test_toy_geometry():
    ds = make_two_group_toy(250, 0)
    g1 = ds.group == 1
    assert abs(ds.y.mean() - 0.75) <= 0.05
    assert ds.y[~g1].all()
    corr2 = np.corrcoef(ds.X[g1, 1], ds.y[g1])[0, 1]
    assert abs(corr2) <= 0.15
    corr1 = np.corrcoef(ds.X[g1, 0], ds.y[g1])[0, 1]
    assert corr1 > 0.5


def test_toy_deterministic():
    a, b = make_two_group_toy(100, 4), make_two_group_toy(100, 4)
    assert a.fingerprint() == b.fingerprint()


def test_toy_minimum_size():
    with pytest.raises(ValueError):
        make_two_group_toy(5, 0)


@pytest.mark.parametrize("name", sorted(BUNDLED))
def test_bundled_tasks_load(name):
    ds = load_bundled(name)
    assert ds.n > 0 and 0 < ds.y.mean() < 1
    assert load_bundled(name).fingerprint() == ds.fingerprint()


def test_bundled_dimensions():
    dims = {n: load_bundled(n).d for n in ("adult12", "credit20", "income8", "diabetes10", "cancer30", "planted8")}
    assert dims == {"adult12": 12, "credit20": 20, "income8": 8, "diabetes10": 10, "cancer30": 30, "planted8": 8}


def test_unknown_bundled_name():
    with pytest.raises(KeyError, match="adult12"):
        load_bundled("nope")
