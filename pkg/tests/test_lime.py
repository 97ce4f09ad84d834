import math

import numpy as np
import pytest

from xaudit.compare import disagreement, normalize_l1
from xaudit.data import Dataset, FeatureSchema, fit_scaler, split
from xaudit.datasets import load_bundled
from xaudit.lime import SurrogateConfig, explain_lime, kernel_weight, perturb
from xaudit.models import ConstantModel, FunctionModel, TrainConfig, train
from xaudit.sampling import draw


@pytest.fixture(scope="module")
def cont():
    r = np.random.default_rng(0)
    X = r.normal(size=(300, 4)) * np.array([1.0, 2.0, 0.5, 3.0]) + np.array([0, 10, -5, 1])
    return Dataset(FeatureSchema.continuous(["a", "b", "c", "d"]), X, (X[:, 0] > 0).astype(int))


def test_first_row_is_x(cont):
    sc = fit_scaler(cont)
    P = perturb(cont.X[0], sc, cont.schema, 1, 0)
    assert P.shape == (1, 4) and np.array_equal(P[0], cont.X[0])


def test_perturbation_means(cont):
    sc = fit_scaler(cont)
    x = cont.X[3]
    P = perturb(x, sc, cont.schema, 10_000, 1)
    assert (np.abs(P.mean(axis=0) - x) <= 0.05 * sc.std).all()


def test_categorical_kept_fraction():
    schema = FeatureSchema(("c", "v"), (2, 0), (1.0, 1e-3))
    r = np.random.default_rng(0)
    X = np.column_stack([(r.random(400) < 0.3).astype(float), r.normal(size=400)])
    ds = Dataset(schema, X, np.zeros(400))
    sc = fit_scaler(ds)
    p_orig = sc.category_freqs[0][1]
    P = perturb(np.array([1.0, 0.0]), sc, schema, 10_000, 2)
    kept = (P[1:, 0] == 1.0).mean()
    assert kept == pytest.approx(0.5 + 0.5 * p_orig, abs=0.02)


def test_kernel_weight_values(cont):
    sc = fit_scaler(cont)
    x = cont.X[0]
    assert kernel_weight(x, x, 1.0, sc) == 1.0
    z = x.copy()
    z[0] += 1.5 * sc.std[0]
    assert kernel_weight(x, z, 1.5, sc) == pytest.approx(math.exp(-1))
    assert kernel_weight(x, z, 0.75, sc) < kernel_weight(x, z, 1.5, sc)


def test_kernel_weight_rejects_zero_bandwidth(cont):
    sc = fit_scaler(cont)
    with pytest.raises(ValueError):
        kernel_weight(cont.X[0], cont.X[1], 0.0, sc)


def test_constant_model_degenerate(cont):
    a = explain_lime(ConstantModel(4, 0.4), cont.X[0], SurrogateConfig(n_perturbations=500), fit_scaler(cont), cont.schema)
    assert np.all(a.values == 0) and a.flags["degenerate"]


def test_linear_recovers_standardized_slope(cont):
    sc = fit_scaler(cont)
    w = np.array([0.02, -0.01, 0.04, 0.005])
    mu = sc.mean
    f = FunctionModel(4, lambda X: 0.5 + (X - mu) @ w)
    a = explain_lime(f, cont.X[5], SurrogateConfig(n_perturbations=5000, top_k=4), sc, cont.schema)
    target = w * sc.std
    cos = a.values @ target / (np.linalg.norm(a.values) * np.linalg.norm(target))
    assert cos > 0.99


def test_bandwidth_changes_attribution():
    tr, te = split(load_bundled("adult12"), 0.25, 0)
    f = train(tr, TrainConfig("gbt"))
    sc = fit_scaler(tr)
    d = tr.d
    a = explain_lime(f, te.X[0], SurrogateConfig(bandwidth=0.5 * math.sqrt(d)), sc, tr.schema)
    b = explain_lime(f, te.X[0], SurrogateConfig(bandwidth=5 * math.sqrt(d)), sc, tr.schema)
    assert disagreement(normalize_l1(a), normalize_l1(b)).l1_delta > 0


def test_deterministic(cont):
    sc = fit_scaler(cont)
    f = FunctionModel(4, lambda X: 1 / (1 + np.exp(-X[:, 0])))
    cfg = SurrogateConfig(n_perturbations=800, seed=9)
    a = explain_lime(f, cont.X[1], cfg, sc, cont.schema)
    b = explain_lime(f, cont.X[1], cfg, sc, cont.schema)
    assert np.array_equal(a.values, b.values)


def test_top_k_limits_nonzeros():
    tr, te = split(load_bundled("cancer30"), 0.25, 0)
    f = train(tr, TrainConfig("logistic"))
    a = explain_lime(f, te.X[0], SurrogateConfig(n_perturbations=1000), fit_scaler(tr), tr.schema)
    assert np.count_nonzero(a.values) == 10


def test_config_validation():
    with pytest.raises(ValueError):
        SurrogateConfig(n_perturbations=3).resolved(4)
    with pytest.raises(ValueError):
        SurrogateConfig(top_k=9).resolved(4)


def test_mixed_sampler_draws_both_kinds(cont):
    sc = fit_scaler(cont)
    P = draw("lime+shap", cont.X, sc, cont.schema, 100, np.random.default_rng(0))
    assert P.shape == (100, 4)
