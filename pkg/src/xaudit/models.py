"""Black-box decision functions, their training, and the scaffolding wrapper.

Every model is a :class:`DecisionFunction`: a query-only scorer with a fixed
0.5 decision threshold and a per-instance query counter. Tree learners are fit
with scikit-learn and then copied into a flat node table that this module
evaluates (and serializes) itself, so a saved model scores identically after
reloading.
"""

from __future__ import annotations

import logging
import threading
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numba
import numpy as np

from . import sampling
from .data import Dataset, FeatureSchema, fit_scaler
from .errors import TrainingError

log = logging.getLogger(__name__)

MODEL_FORMAT = "xaudit-model"
MODEL_VERSION = 1


class DecisionFunction:
    """Opaque scorer ``R^d -> [0, 1]`` with ``label(x) = score(x) >= threshold``."""

    kind = "abstract"

    def __init__(self, d: int, threshold: float = 0.5):
        self.d = d
        self.threshold = threshold
        self._count = 0
        self._lock = threading.Lock()

    @property
    def query_count(self) -> int:
        return self._count

    def score(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = X.reshape(1, -1) if single else X
        if X2.shape[1] != self.d:
            raise ValueError(f"expected {self.d} features, got {X2.shape[1]}")
        with self._lock:
            self._count += X2.shape[0]
        s = np.clip(self._score(X2), 0.0, 1.0)
        return float(s[0]) if single else s

    def label(self, X):
        s = self.score(X)
        if np.isscalar(s):
            return int(s >= self.threshold)
        return (s >= self.threshold).astype(int)

    def _score(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError(f"{type(self).__name__} is not serializable")


class ConstantModel(DecisionFunction):
    kind = "constant"

    def __init__(self, d: int, value: float = 0.5, threshold: float = 0.5):
        super().__init__(d, threshold)
        self.value = float(value)

    def _score(self, X):
        return np.full(X.shape[0], self.value)

    def to_json(self):
        return {"value": self.value}


class FunctionModel(DecisionFunction):
    """Wraps a vectorized callable; used for planted models in experiments."""

    kind = "function"

    def __init__(self, d: int, fn: Callable[[np.ndarray], np.ndarray], threshold: float = 0.5, name: str = "fn"):
        super().__init__(d, threshold)
        self.fn = fn
        self.name = name

    def _score(self, X):
        return np.asarray(self.fn(X), dtype=float).reshape(X.shape[0])


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


class Encoder:
    """Standardizes continuous columns and one-hot expands categoricals."""

    def __init__(self, schema: FeatureSchema, mean, std):
        self.schema = schema
        self.mean = np.asarray(mean, dtype=float)
        self.std = np.asarray(std, dtype=float)

    @classmethod
    def fit(cls, ds: Dataset) -> "Encoder":
        sc = fit_scaler(ds)
        return cls(ds.schema, np.where(sc.categorical, 0.0, sc.mean), sc.scale)

    @property
    def width(self) -> int:
        return sum(c if c else 1 for c in self.schema.cardinality)

    def transform(self, X: np.ndarray) -> np.ndarray:
        cols = []
        for j, card in enumerate(self.schema.cardinality):
            if card:
                codes = X[:, j].astype(int)
                cols.append((codes[:, None] == np.arange(card)[None, :]).astype(float))
            else:
                cols.append(((X[:, j] - self.mean[j]) / self.std[j])[:, None])
        return np.hstack(cols)

    def to_json(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


class LinearModel(DecisionFunction):
    """Logistic (``sigmoid(w.z + b)``) or clipped least-squares score on encoded features."""

    kind = "linear"

    def __init__(self, encoder: Encoder, w, b: float, link: str = "logistic", threshold: float = 0.5):
        super().__init__(encoder.schema.d, threshold)
        self.encoder = encoder
        self.w = np.asarray(w, dtype=float)
        self.b = float(b)
        self.link = link

    def decision(self, X):
        return self.encoder.transform(np.asarray(X, dtype=float).reshape(-1, self.d)) @ self.w + self.b

    def _score(self, X):
        z = self.decision(X)
        return sigmoid(z) if self.link == "logistic" else z

    def to_json(self):
        return {
            "link": self.link, "w": self.w.tolist(), "b": self.b,
            "encoder": self.encoder.to_json(), "schema": self.encoder.schema.to_json(),
        }


@numba.njit(cache=True)
def _tree_sums(X, feature, threshold, left, right, value, roots):
    n = X.shape[0]
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for r in roots:
            node = r
            while left[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            acc += value[node]
        out[i] = acc
    return out


class TreeEnsemble(DecisionFunction):
    """Sum of regression-tree outputs in one flat node table.

    ``aggregate == "mean"``: score = average leaf value (random forest).
    ``aggregate == "logit"``: score = sigmoid(init + sum of leaf values)
    (boosting; leaf values already carry the shrinkage factor).
    """

    kind = "trees"

    def __init__(self, d, feature, threshold, left, right, value, roots, aggregate, init=0.0, thr=0.5):
        super().__init__(d, thr)
        self.feature = np.ascontiguousarray(feature, dtype=np.int64)
        self.thresholds = np.ascontiguousarray(threshold, dtype=float)
        self.left = np.ascontiguousarray(left, dtype=np.int64)
        self.right = np.ascontiguousarray(right, dtype=np.int64)
        self.value = np.ascontiguousarray(value, dtype=float)
        self.roots = np.ascontiguousarray(roots, dtype=np.int64)
        self.aggregate = aggregate
        self.init = float(init)

    @property
    def n_trees(self) -> int:
        return len(self.roots)

    def used_features(self) -> set[int]:
        return set(int(f) for f in self.feature[self.left >= 0])

    def _score(self, X):
        X = np.ascontiguousarray(X, dtype=float)
        total = _tree_sums(X, self.feature, self.thresholds, self.left, self.right, self.value, self.roots)
        if self.aggregate == "mean":
            return total / self.n_trees
        return sigmoid(self.init + total)

    def _nested(self, node: int) -> dict:
        if self.left[node] < 0:
            return {"value": float(self.value[node])}
        return {
            "feature": int(self.feature[node]),
            "threshold": float(self.thresholds[node]),
            "left": self._nested(int(self.left[node])),
            "right": self._nested(int(self.right[node])),
        }

    def to_json(self):
        return {
            "aggregate": self.aggregate,
            "init": self.init,
            "trees": [self._nested(int(r)) for r in self.roots],
        }

    @classmethod
    def from_nested(cls, d, trees, aggregate, init=0.0, threshold=0.5):
        feature, thr, left, right, value, roots = [], [], [], [], [], []

        def add(node):
            idx = len(feature)
            feature.append(0)
            thr.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            if "value" in node:
                value[idx] = node["value"]
            else:
                feature[idx] = node["feature"]
                thr[idx] = node["threshold"]
                left[idx] = add(node["left"])
                right[idx] = add(node["right"])
            return idx

        for t in trees:
            roots.append(add(t))
        return cls(d, feature, thr, left, right, value, roots, aggregate, init, threshold)


class ScaffoldedFunction(DecisionFunction):
    """Routes in-distribution queries to ``inner_real`` and the rest to ``inner_decoy``.

    ``ood_detector`` scores the probability that a query is a perturbation; a
    query counts as off-distribution when that score reaches the detector's
    threshold.
    """

    kind = "scaffold"

    def __init__(self, inner_real, inner_decoy, ood_detector, threshold=0.5, detector_accuracy=None):
        super().__init__(inner_real.d, threshold)
        self.inner_real = inner_real
        self.inner_decoy = inner_decoy
        self.ood_detector = ood_detector
        self.detector_accuracy = detector_accuracy
        self.detector_warning = detector_accuracy is not None and detector_accuracy < 0.6

    def is_ood(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.d)
        return self.ood_detector.label(X).astype(bool)

    def _score(self, X):
        ood = self.is_ood(X)
        out = np.empty(X.shape[0])
        if (~ood).any():
            out[~ood] = self.inner_real.score(X[~ood])
        if ood.any():
            out[ood] = self.inner_decoy.score(X[ood])
        return out

    def to_json(self):
        return {
            "detector_accuracy": self.detector_accuracy,
            "inner_real": model_to_json(self.inner_real),
            "inner_decoy": model_to_json(self.inner_decoy),
            "ood_detector": model_to_json(self.ood_detector),
        }


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str = "gbt"
    seed: int = 0
    # logistic
    l2: float = 1e-4
    iterations: int = 500
    learning_rate: float = 1.0
    least_squares: bool = False
    # forest
    n_trees: int = 100
    max_depth: Optional[int] = None
    min_leaf: int = 2
    # gbt
    n_rounds: int = 100
    gbt_depth: int = 3
    shrinkage: float = 0.1

    def __post_init__(self):
        if self.model_kind not in ("logistic", "forest", "gbt"):
            raise ValueError(f"model_kind must be logistic, forest or gbt, not {self.model_kind!r}")
        if min(self.iterations, self.n_trees, self.min_leaf, self.n_rounds, self.gbt_depth) < 1:
            raise ValueError("counts must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0 < self.shrinkage <= 1:
            raise ValueError("shrinkage must lie in (0, 1]")
        if self.l2 < 0 or self.learning_rate <= 0:
            raise ValueError("l2 must be >= 0 and learning_rate > 0")

    def to_json(self):
        return asdict(self)


def accuracy(f: DecisionFunction, ds: Dataset) -> float:
    return float(np.mean(f.label(ds.X) == ds.y))


def train(ds: Dataset, cfg: TrainConfig = TrainConfig(), test: Optional[Dataset] = None) -> DecisionFunction:
    """Fit a model; the returned function carries ``training_report``."""
    if len(np.unique(ds.y)) < 2:
        raise TrainingError("training labels contain a single class")
    if cfg.model_kind == "logistic":
        f = _train_linear(ds, cfg)
    elif cfg.model_kind == "forest":
        f = _train_forest(ds, cfg)
    else:
        f = _train_gbt(ds, cfg)
    report = {"config": cfg.to_json(), "train_accuracy": accuracy(f, ds), "n_train": ds.n}
    if test is not None:
        report["test_accuracy"] = accuracy(f, test)
        report["n_test"] = test.n
    f.training_report = report
    f._count = 0
    return f


def _train_linear(ds: Dataset, cfg: TrainConfig) -> LinearModel:
    enc = Encoder.fit(ds)
    Z = enc.transform(ds.X)
    y = ds.y.astype(float)
    n, p = Z.shape
    if cfg.least_squares:
        A = np.hstack([Z, np.ones((n, 1))])
        reg = cfg.l2 * n * np.eye(p + 1)
        reg[-1, -1] = 0.0
        coef = np.linalg.solve(A.T @ A + reg, A.T @ y)
        return LinearModel(enc, coef[:-1], coef[-1], link="identity")

    # Nesterov-accelerated gradient descent with adaptive restart; step = learning_rate / L
    A = np.hstack([Z, np.ones((n, 1))])
    lip = 0.25 * np.linalg.eigvalsh(A.T @ A / n).max() + cfg.l2
    step = cfg.learning_rate / lip
    pen = np.ones(p + 1)
    pen[-1] = 0.0

    def loss_grad(theta):
        z = A @ theta
        loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * cfg.l2 * np.sum(pen * theta**2)
        grad = A.T @ (sigmoid(z) - y) / n + cfg.l2 * pen * theta
        return loss, grad

    theta = np.zeros(p + 1)
    prev = theta.copy()
    best, best_loss = theta.copy(), np.inf
    grad_norm = np.inf
    tol = 1e-4  # max-abs gradient, the usual library default
    momentum_age = 0
    for _ in range(cfg.iterations):
        momentum_age += 1
        look = theta + (momentum_age - 1) / (momentum_age + 2) * (theta - prev)
        _, g = loss_grad(look)
        prev = theta
        theta = look - step * g
        loss, g_now = loss_grad(theta)
        grad_norm = np.abs(g_now).max()
        if loss < best_loss:
            best, best_loss = theta.copy(), loss
        else:
            momentum_age = 0
        if grad_norm < tol:
            break
    if grad_norm >= tol:
        warnings.warn(
            f"logistic regression did not converge in {cfg.iterations} iterations "
            f"(gradient norm {grad_norm:.2e}); returning best iterate",
            RuntimeWarning,
            stacklevel=3,
        )
    return LinearModel(enc, best[:-1], best[-1], link="logistic")


def _flatten_sklearn_trees(trees, leaf_value) -> tuple:
    feature, thr, left, right, value, roots = [], [], [], [], [], []
    offset = 0
    for t in trees:
        tr = t.tree_
        m = tr.node_count
        roots.append(offset)
        leaf = tr.children_left == -1
        feature.append(np.where(leaf, 0, tr.feature))
        thr.append(np.where(leaf, 0.0, tr.threshold))
        left.append(np.where(leaf, -1, tr.children_left + offset))
        right.append(np.where(leaf, -1, tr.children_right + offset))
        value.append(np.where(leaf, leaf_value(tr), 0.0))
        offset += m
    return tuple(np.concatenate(a) for a in (feature, thr, left, right, value)) + (np.array(roots),)


def _train_forest(ds: Dataset, cfg: TrainConfig) -> TreeEnsemble:
    from sklearn.ensemble import RandomForestClassifier

    clf = RandomForestClassifier(
        n_estimators=cfg.n_trees, max_depth=cfg.max_depth, min_samples_leaf=cfg.min_leaf,
        random_state=cfg.seed, n_jobs=1,
    )
    clf.fit(ds.X, ds.y)

    def leaf_value(tr):
        v = tr.value[:, 0, :]
        return v[:, 1] / v.sum(axis=1)

    return TreeEnsemble(ds.d, *_flatten_sklearn_trees(clf.estimators_, leaf_value), aggregate="mean")


def _train_gbt(ds: Dataset, cfg: TrainConfig) -> TreeEnsemble:
    from sklearn.ensemble import GradientBoostingClassifier

    clf = GradientBoostingClassifier(
        n_estimators=cfg.n_rounds, max_depth=cfg.gbt_depth, learning_rate=cfg.shrinkage,
        random_state=cfg.seed,
    )
    clf.fit(ds.X, ds.y)
    p = ds.y.mean()
    init = float(np.log(p / (1 - p)))

    def leaf_value(tr):
        return cfg.shrinkage * tr.value[:, 0, 0]

    return TreeEnsemble(ds.d, *_flatten_sklearn_trees(clf.estimators_[:, 0], leaf_value), aggregate="logit", init=init)


def agreement_rate(f: DecisionFunction, g: DecisionFunction, ds: Dataset) -> float:
    return float(np.mean(f.label(ds.X) == g.label(ds.X)))


@dataclass
class SamplerSpec:
    """Which explainer's perturbation scheme the detector is trained against."""

    kind: str = "lime"
    n_draws: Optional[int] = None  # defaults to twice the number of real rows
    extra: dict = field(default_factory=dict)


def scaffold(
    real: DecisionFunction,
    decoy: DecisionFunction,
    train_data: Dataset,
    perturbation_sampler: SamplerSpec | str = "lime",
    seed: int = 0,
    detector_config: Optional[TrainConfig] = None,
) -> ScaffoldedFunction:
    """Wrap ``real``/``decoy`` behind an out-of-distribution detector.

    The detector is a random forest separating training rows (class 0) from
    draws of the explainer's perturbation scheme (class 1), fit on 75% of the
    discrimination data. Its cut-off is then raised, if needed, so that at
    most ``real_flag_rate`` of the held-out real rows are routed to the decoy;
    held-out accuracy at that cut-off below 0.6 sets ``detector_warning``.
    """
    from .data import split
    from .seeding import rng as named_rng

    if isinstance(perturbation_sampler, str):
        perturbation_sampler = SamplerSpec(perturbation_sampler)
    real_flag_rate = perturbation_sampler.extra.get("real_flag_rate", 0.005)
    scaler = fit_scaler(train_data)
    n_draws = perturbation_sampler.n_draws or 2 * train_data.n
    fake = sampling.draw(
        perturbation_sampler.kind, train_data.X, scaler, train_data.schema, n_draws,
        named_rng(seed, "scaffold-sampler"),
    )
    disc = Dataset(
        train_data.schema,
        np.vstack([train_data.X, fake]),
        np.concatenate([np.zeros(train_data.n, int), np.ones(n_draws, int)]),
        name="ood-discrimination",
    )
    fit_part, held_out = split(disc, 0.25, seed)
    cfg = detector_config or TrainConfig("forest", seed=seed)
    detector = train(fit_part, cfg)
    real_scores = detector.score(held_out.X[held_out.y == 0])
    cut = float(np.quantile(real_scores, 1.0 - real_flag_rate))
    detector.threshold = max(0.5, np.nextafter(cut, np.inf))
    acc = accuracy(detector, held_out)
    detector._count = 0
    result = ScaffoldedFunction(real, decoy, detector, real.threshold, detector_accuracy=acc)
    if result.detector_warning:
        warnings.warn(f"OOD detector accuracy {acc:.2f} < 0.6; scaffold likely ineffective", RuntimeWarning, stacklevel=2)
    log.info("scaffold detector held-out accuracy %.3f at cut-off %.3f", acc, detector.threshold)
    return result


def model_to_json(f: DecisionFunction) -> dict:
    body = {"format": MODEL_FORMAT, "version": MODEL_VERSION, "kind": f.kind, "d": f.d, "threshold": f.threshold}
    body.update(f.to_json())
    if getattr(f, "training_report", None):
        body["training_report"] = f.training_report
    return body


def model_from_json(obj: dict, schema: Optional[FeatureSchema] = None) -> DecisionFunction:
    if obj.get("format") != MODEL_FORMAT:
        raise ValueError("not an xaudit model file")
    if obj.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {obj.get('version')}")
    kind, d, thr = obj["kind"], obj["d"], obj["threshold"]
    if schema is not None and schema.d != d:
        raise ValueError(f"model expects {d} features, schema has {schema.d}")
    if kind == "constant":
        f = ConstantModel(d, obj["value"], thr)
    elif kind == "linear":
        enc = Encoder(FeatureSchema.from_json(obj["schema"]), obj["encoder"]["mean"], obj["encoder"]["std"])
        f = LinearModel(enc, obj["w"], obj["b"], obj["link"], thr)
    elif kind == "trees":
        f = TreeEnsemble.from_nested(d, obj["trees"], obj["aggregate"], obj["init"], thr)
    elif kind == "scaffold":
        f = ScaffoldedFunction(
            model_from_json(obj["inner_real"], schema),
            model_from_json(obj["inner_decoy"], schema),
            model_from_json(obj["ood_detector"], schema),
            thr,
            obj.get("detector_accuracy"),
        )
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    if "training_report" in obj:
        f.training_report = obj["training_report"]
    return f
