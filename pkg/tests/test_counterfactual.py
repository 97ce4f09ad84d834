import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import change_frequencies
from xaudit.counterfactual import (
    Counterfactual, CounterfactualSet, FeatureSpace, closest_counterfactual, counterfactual_attribution,
    diverse_counterfactuals, single_feature_counterfactual, transfer_experiment, transfer_rate,
)
from xaudit.data import Dataset, FeatureSchema, split
from xaudit.datasets import load_bundled
from xaudit.models import ConstantModel, FunctionModel, TrainConfig, train


def _space_1d(lo=-5.0, hi=5.0, n=201, precision=0.01):
    X = np.linspace(lo, hi, n)[:, None]
    ds = Dataset(FeatureSchema.continuous(["a"], precision), X, (X[:, 0] > 0).astype(int))
    return FeatureSpace.from_dataset(ds)


def _set(x, points, label=0):
    x = np.asarray(x, dtype=float)
    items = [Counterfactual(np.asarray(p, dtype=float), x, 0.0, 1.0) for p in points]
    return CounterfactualSet(items, x, label)


def test_1d_logistic_boundary():
    space = _space_1d()
    f = FunctionModel(1, lambda X: 1 / (1 + np.exp(-4 * X[:, 0])))
    cf = closest_counterfactual(f, np.array([-2.0]), space)
    assert cf is not None
    assert 0 <= cf.point[0] <= 0.01 + 1e-12
    assert cf.distance == pytest.approx(2.0 / space.scaler.mad[0], rel=0.01)
    assert f.label(cf.point) == 1


def test_constant_has_no_counterfactual():
    space = _space_1d()
    assert closest_counterfactual(ConstantModel(1, 0.1), np.array([0.0]), space, budget=2000) is None


def _grid_optimum(f, x, space, step):
    # every precision-grid point in the box, plus x's own value on each axis
    axes = []
    for j in range(2):
        lo, hi = np.ceil(space.lower[j] / step), np.floor(space.upper[j] / step)
        axes.append(np.append(np.arange(lo, hi + 1) * step, x[j]))
    G = np.array(np.meshgrid(*axes)).reshape(2, -1).T
    flips = G[f.label(G) != f.label(x)]
    return space.distance(x, flips).min()


def test_search_near_grid_optimum_on_forest():
    r = np.random.default_rng(0)
    X = r.uniform(-1, 1, size=(300, 2))
    ds = Dataset(FeatureSchema.continuous(["a", "b"], 0.01), X, (X[:, 0] + X[:, 1] ** 2 > 0.3).astype(int))
    f = train(ds, TrainConfig("forest", n_trees=15, seed=0))
    space = FeatureSpace.from_dataset(ds)
    for i in range(10):
        x = X[i]
        cf = closest_counterfactual(f, x, space, seed=i)
        best = _grid_optimum(f, x, space, 0.01)
        assert cf.distance <= 1.05 * best + 1e-9


def test_k1_is_a_valid_flip():
    space = _space_1d()
    f = FunctionModel(1, lambda X: (X[:, 0] > 1).astype(float))
    cs = diverse_counterfactuals(f, np.array([0.0]), space, k=1, seed=0)
    assert len(cs) == 1 and f.label(cs.points[0]) == 1


def test_two_sided_boundary_gives_both_signs():
    space = _space_1d()
    f = FunctionModel(1, lambda X: (np.abs(X[:, 0]) > 1).astype(float))
    cs = diverse_counterfactuals(f, np.array([0.0]), space, k=2, seed=0)
    signs = sorted(np.sign(cs.points[:, 0]))
    assert signs == [-1.0, 1.0]


@pytest.fixture(scope="module")
def credit():
    tr, te = split(load_bundled("credit20"), 0.25, 0)
    return tr, te, train(tr, TrainConfig("gbt", seed=0)), FeatureSpace.from_dataset(tr)


def test_diverse_sets_valid_and_distinct(credit):
    tr, te, f, space = credit
    cs = diverse_counterfactuals(f, te.X[0], space, k=30, seed=0)
    assert (f.label(cs.points) != f.label(te.X[0])).all()
    P = cs.points
    prec = space.precision
    for a in range(len(P)):
        for b in range(a + 1, len(P)):
            assert np.max(np.abs(P[a] - P[b]) / prec) >= 1.0 - 1e-9
    assert ((P >= space.lower - 1e-9) & (P <= space.upper + 1e-9)).all()


def test_diverse_deterministic(credit):
    tr, te, f, space = credit
    a = diverse_counterfactuals(f, te.X[1], space, k=10, seed=3)
    b = diverse_counterfactuals(f, te.X[1], space, k=10, seed=3)
    assert np.array_equal(a.points, b.points)


def test_budget_is_respected(credit):
    tr, te, f, space = credit
    f._count = 0
    cs = diverse_counterfactuals(f, te.X[2], space, k=50, budget=500, seed=0)
    assert cs.queries <= 500


def test_single_feature_linear_found():
    space = _space_1d()
    f = FunctionModel(1, lambda X: 1 / (1 + np.exp(-X[:, 0])))
    cf = single_feature_counterfactual(f, np.array([-1.0]), 0, space)
    assert cf is not None and f.label(cf.point) == 1


def test_single_feature_unused_is_none():
    X = np.random.default_rng(0).normal(size=(100, 2))
    ds = Dataset(FeatureSchema.continuous(["a", "b"]), X, (X[:, 0] > 0).astype(int))
    space = FeatureSpace.from_dataset(ds)
    f = FunctionModel(2, lambda X: (X[:, 0] > 0).astype(float))
    assert single_feature_counterfactual(f, np.array([-1.0, 0.0]), 1, space) is None


def test_transfer_identity_and_constant(credit):
    tr, te, f, space = credit
    cs = diverse_counterfactuals(f, te.X[0], space, k=10, seed=0)
    assert transfer_rate(cs, f) == 1.0
    const = ConstantModel(f.d, 1.0 if cs.original_label == 1 else 0.0)
    assert transfer_rate(cs, const) == 0.0


def test_transfer_rejects_label_mismatch(credit):
    tr, te, f, space = credit
    cs = diverse_counterfactuals(f, te.X[0], space, k=5, seed=0)
    other = ConstantModel(f.d, 0.0 if cs.original_label == 1 else 1.0)
    with pytest.raises(ValueError):
        transfer_rate(cs, other)
    rep = transfer_experiment([cs], other)
    assert rep["excluded_label_mismatch"] == [0] and rep["n_used"] == 0


def test_attribution_single_feature_changes():
    x = np.zeros(12)
    pts = []
    for v in (1.0, 2.0, 3.0):
        p = x.copy()
        p[8] = v
        pts.append(p)
    a = counterfactual_attribution(ConstantModel(12, 0.2), x, _set(x, pts))
    expect = np.zeros(12)
    expect[8] = 1.0
    assert np.array_equal(a.values, expect)


def test_attribution_disjoint_pair():
    x = np.zeros(3)
    a = counterfactual_attribution(ConstantModel(3, 0.2), x, _set(x, [[1, 0, 0], [0, 0, 1]]))
    assert a.values.tolist() == [0.5, 0.0, 0.5]


def test_attribution_matches_hand_count():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    pts = [[1, 5, 3, 4], [0, 5, 3, 4], [1, 2, 9, 9], [1, 5, 3, 0]]
    freq = np.array(change_frequencies(x, pts))
    a = counterfactual_attribution(ConstantModel(4, 0.2), x, _set(x, pts))
    np.testing.assert_allclose(a.values, freq / freq.sum())
    np.testing.assert_allclose(a.info["change_frequency"], freq)


@given(st.lists(st.lists(st.integers(-2, 2), min_size=4, max_size=4), min_size=1, max_size=8))
@settings(max_examples=40, deadline=None)
def test_attribution_is_a_distribution(points):
    x = np.zeros(4)
    pts = [p for p in points if any(points)] or [[1, 0, 0, 0]]
    a = counterfactual_attribution(ConstantModel(4, 0.2), x, _set(x, pts))
    assert (a.values >= 0).all()
    assert a.values.sum() == pytest.approx(1.0) or a.values.sum() == 0.0


def test_set_json_roundtrip(credit):
    tr, te, f, space = credit
    cs = diverse_counterfactuals(f, te.X[0], space, k=5, seed=0)
    back = CounterfactualSet.from_json(cs.to_json())
    assert np.array_equal(back.points, cs.points)
    assert back.original_label == cs.original_label
