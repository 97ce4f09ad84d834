"""Tabular datasets: schema, CSV ingestion, splitting, scaling and the two-group toy."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, EmptyInputError, SchemaError

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"


@dataclass(frozen=True)
class FeatureSchema:
    """Feature vocabulary shared by every model and explainer.

    ``cardinality[j] == 0`` marks a continuous feature. ``precision[j]`` is the
    measurement granularity of a continuous feature (1 for categoricals).
    ``categories`` maps a categorical feature name to its code -> label table.
    """

    names: tuple[str, ...]
    cardinality: tuple[int, ...]
    precision: tuple[float, ...]
    categories: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        d = len(self.names)
        if len(self.cardinality) != d or len(self.precision) != d:
            raise SchemaError("names, cardinality and precision must have equal length")
        if len(set(self.names)) != d or any(not n for n in self.names):
            raise SchemaError("feature names must be unique and non-empty")
        for name, card, prec in zip(self.names, self.cardinality, self.precision):
            if card == 1 or card < 0:
                raise SchemaError(f"categorical feature {name!r} needs cardinality >= 2")
            if card == 0 and not prec > 0:
                raise SchemaError(f"continuous feature {name!r} needs precision > 0")

    @classmethod
    def continuous(cls, names: Sequence[str], precision: float | Sequence[float] = 1e-3) -> "FeatureSchema":
        names = tuple(names)
        if np.isscalar(precision):
            precision = [float(precision)] * len(names)
        return cls(names, (0,) * len(names), tuple(float(p) for p in precision))

    @property
    def d(self) -> int:
        return len(self.names)

    @property
    def categorical_mask(self) -> np.ndarray:
        return np.array([c > 0 for c in self.cardinality], dtype=bool)

    @property
    def precision_array(self) -> np.ndarray:
        return np.array(self.precision, dtype=float)

    def kind(self, j: int) -> str:
        return CATEGORICAL if self.cardinality[j] > 0 else CONTINUOUS

    def round(self, X: np.ndarray) -> np.ndarray:
        """Snap continuous coordinates onto the precision grid."""
        X = np.array(X, dtype=float, copy=True)
        prec = self.precision_array
        cont = ~self.categorical_mask
        X[..., cont] = np.round(X[..., cont] / prec[cont]) * prec[cont]
        X[..., ~cont] = np.round(X[..., ~cont])
        return X

    def to_json(self) -> dict:
        feats = []
        for j, name in enumerate(self.names):
            if self.cardinality[j]:
                entry = {"name": name, "kind": CATEGORICAL, "cardinality": self.cardinality[j]}
                if name in self.categories:
                    entry["categories"] = list(self.categories[name])
            else:
                entry = {"name": name, "kind": CONTINUOUS, "precision": self.precision[j]}
            feats.append(entry)
        return {"features": feats}

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureSchema":
        try:
            feats = obj["features"]
        except (KeyError, TypeError):
            raise SchemaError("schema JSON needs a 'features' list") from None
        names, cards, precs, cats = [], [], [], {}
        for entry in feats:
            name = entry.get("name")
            kind = entry.get("kind", CONTINUOUS)
            names.append(name)
            if kind == CATEGORICAL:
                labels = entry.get("categories")
                card = entry.get("cardinality", len(labels) if labels else None)
                if card is None:
                    raise SchemaError(f"categorical feature {name!r} needs cardinality or categories")
                cards.append(int(card))
                precs.append(1.0)
                if labels:
                    cats[name] = tuple(str(c) for c in labels)
            elif kind == CONTINUOUS:
                cards.append(0)
                precs.append(float(entry.get("precision", 1e-3)))
            else:
                raise SchemaError(f"unknown feature kind {kind!r} for {name!r}")
        return cls(tuple(names), tuple(cards), tuple(precs), cats)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Rows (categoricals integer-coded), binary labels and optional group ids."""

    schema: FeatureSchema
    X: np.ndarray
    y: np.ndarray
    group: Optional[np.ndarray] = None
    name: str = "dataset"

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=float)
        y = np.asarray(self.y).astype(int)
        if X.ndim != 2 or X.shape[1] != self.schema.d:
            raise SchemaError(f"rows must be n x {self.schema.d}, got {X.shape}")
        if X.shape[0] < 1:
            raise EmptyInputError("dataset needs at least one row")
        if y.shape != (X.shape[0],):
            raise SchemaError("labels must have one entry per row")
        if not np.isin(y, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        for j, card in enumerate(self.schema.cardinality):
            if card:
                col = X[:, j]
                if (col < 0).any() or (col >= card).any() or (col != np.round(col)).any():
                    raise DataError(f"categorical feature {self.schema.names[j]!r} has invalid codes")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.group is not None:
            g = np.asarray(self.group)
            if g.shape != (X.shape[0],):
                raise SchemaError("group vector must have one entry per row")
            g.setflags(write=False)
            object.__setattr__(self, "group", g)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        group = None if self.group is None else self.group[idx]
        return Dataset(self.schema, self.X[idx], self.y[idx], group, self.name)

    def with_labels(self, y) -> "Dataset":
        return Dataset(self.schema, self.X, np.asarray(y), self.group, self.name)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.schema.to_json(), sort_keys=True).encode())
        h.update(self.X.tobytes())
        h.update(self.y.astype(np.int64).tobytes())
        if self.group is not None:
            h.update(np.asarray(self.group).astype(str).astype("U").tobytes())
        return h.hexdigest()


def load_csv(
    path,
    schema: FeatureSchema,
    label_column: str,
    group_column: Optional[str] = None,
) -> Dataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyInputError(f"{path} is empty") from None
        body = list(reader)
    header = [h.strip() for h in header]
    needed = list(schema.names) + [label_column] + ([group_column] if group_column else [])
    for col in needed:
        if col not in header:
            raise SchemaError(f"column {col!r} missing from {path}")
    if not body:
        raise EmptyInputError(f"{path} has a header but no rows")

    pos = {name: header.index(name) for name in needed}
    # categorical label -> code, seeded with any declared categories
    maps: dict[str, dict[str, int]] = {}
    for name, card in zip(schema.names, schema.cardinality):
        if card:
            declared = schema.categories.get(name, ())
            if not declared:
                # no names declared: cells that are all in-range integer codes keep their codes
                cells = {row[pos[name]].strip() for row in body if len(row) == len(header)}
                codes = [str(k) for k in range(card)]
                if cells <= set(codes):
                    declared = codes
            maps[name] = {c: i for i, c in enumerate(declared)}

    X = np.empty((len(body), schema.d))
    y = np.empty(len(body), dtype=int)
    group = [] if group_column else None
    for i, row in enumerate(body):
        line = i + 2
        if len(row) != len(header):
            raise DataError(f"{path}:{line}: expected {len(header)} cells, got {len(row)}")
        for j, name in enumerate(schema.names):
            cell = row[pos[name]].strip()
            if schema.cardinality[j]:
                codes = maps[name]
                if cell not in codes:
                    codes[cell] = len(codes)
                X[i, j] = codes[cell]
            else:
                try:
                    X[i, j] = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{line}: cannot parse {cell!r} in column {name!r}") from None
        cell = row[pos[label_column]].strip()
        if cell not in ("0", "1", "0.0", "1.0"):
            raise DataError(f"{path}:{line}: label {cell!r} is not 0/1")
        y[i] = int(float(cell))
        if group is not None:
            group.append(row[pos[group_column]].strip())

    cards, cats = list(schema.cardinality), dict(schema.categories)
    for j, name in enumerate(schema.names):
        if schema.cardinality[j]:
            labels = tuple(sorted(maps[name], key=maps[name].get))
            if len(labels) > schema.cardinality[j]:
                raise DataError(
                    f"{path}: column {name!r} has {len(labels)} categories, schema allows {schema.cardinality[j]}"
                )
            cats[name] = labels + tuple(str(k) for k in range(len(labels), schema.cardinality[j]))
    schema = FeatureSchema(schema.names, tuple(cards), schema.precision, cats)
    return Dataset(schema, X, y, None if group is None else np.array(group), name=path.stem)


def write_csv(ds: Dataset, path, label_column: str = "label", group_column: Optional[str] = "group") -> None:
    schema = ds.schema
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = list(schema.names) + [label_column]
        if ds.group is not None and group_column:
            cols.append(group_column)
        w.writerow(cols)
        for i in range(ds.n):
            cells = []
            for j, name in enumerate(schema.names):
                v = ds.X[i, j]
                if schema.cardinality[j]:
                    labels = schema.categories.get(name)
                    cells.append(labels[int(v)] if labels else str(int(v)))
                else:
                    cells.append(repr(float(v)))
            cells.append(str(int(ds.y[i])))
            if ds.group is not None and group_column:
                cells.append(str(ds.group[i]))
            w.writerow(cells)


def load_schema(path) -> FeatureSchema:
    with Path(path).open(encoding="utf-8") as fh:
        return FeatureSchema.from_json(json.load(fh))


def split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffled train/test partition.

    Rows are put in a canonical (content-sorted) order before shuffling, so the
    partition depends on the row multiset and the seed, not on input order.
    """
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    if ds.n < 2:
        raise ValueError("need at least two rows to split")
    n_test = int(round(ds.n * test_fraction))
    if n_test == 0 or n_test == ds.n:
        raise ValueError(f"split of n={ds.n} at {test_fraction} leaves an empty partition")
    keys = [ds.y] + [ds.X[:, j] for j in range(ds.d - 1, -1, -1)]
    canonical = np.lexsort(keys)
    perm = canonical[np.random.default_rng(seed).permutation(ds.n)]
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


@dataclass(frozen=True, eq=False)
class StandardScaler:
    """Per-feature location/scale statistics of the training distribution.

    Continuous features get mean, population std, median and MAD; constant
    continuous features are flagged and left unscaled. Categorical features get
    their empirical code frequencies.
    """

    mean: np.ndarray
    std: np.ndarray
    median: np.ndarray
    mad: np.ndarray
    constant: np.ndarray
    categorical: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    category_freqs: tuple

    @property
    def scale(self) -> np.ndarray:
        """std for scaled features, 1 where a feature is constant or categorical."""
        s = self.std.copy()
        s[self.constant | self.categorical] = 1.0
        return s

    @property
    def mad_scale(self) -> np.ndarray:
        m = self.mad.copy()
        m[self.constant | self.categorical] = 1.0
        return m

    def standardize(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        loc = np.where(self.constant | self.categorical, 0.0, self.mean)
        return (X - loc) / self.scale

    def unstandardize(self, Z: np.ndarray) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        loc = np.where(self.constant | self.categorical, 0.0, self.mean)
        return Z * self.scale + loc


def fit_scaler(ds: Dataset) -> StandardScaler:
    if ds.n < 2:
        raise ValueError("need at least two rows to fit a scaler")
    X = ds.X
    cat = ds.schema.categorical_mask
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    median = np.median(X, axis=0)
    mad = np.median(np.abs(X - median), axis=0)
    mad = np.where(mad > 0, mad, 0.6745 * std)
    constant = (std == 0) & ~cat
    freqs = []
    for j, card in enumerate(ds.schema.cardinality):
        if card:
            counts = np.bincount(X[:, j].astype(int), minlength=card).astype(float)
            freqs.append(tuple(counts / counts.sum()))
        else:
            freqs.append(None)
    return StandardScaler(
        mean=mean, std=std, median=median, mad=mad, constant=constant, categorical=cat,
        lower=X.min(axis=0), upper=X.max(axis=0), category_freqs=tuple(freqs),
    )


def make_two_group_toy(n_per_group: int = 250, seed: int = 0) -> Dataset:
    """Two population groups in 2-D.

    Group 1 sits around feature-2 = 0 and is labelled by the sign of feature 1;
    group 2 sits around feature-2 = 5 and is always positive.
    """
    if n_per_group < 10:
        raise ValueError("n_per_group must be at least 10")
    rng = np.random.default_rng(seed)
    x1_a = rng.uniform(-3, 3, n_per_group)
    x2_a = rng.normal(0.0, 0.5, n_per_group)
    x1_b = rng.uniform(-3, 3, n_per_group)
    x2_b = rng.normal(5.0, 0.5, n_per_group)
    X = np.column_stack([np.concatenate([x1_a, x1_b]), np.concatenate([x2_a, x2_b])])
    y = np.concatenate([(x1_a > 0).astype(int), np.ones(n_per_group, dtype=int)])
    group = np.repeat([1, 2], n_per_group)
    schema = FeatureSchema.continuous(["feature_1", "feature_2"], precision=1e-3)
    return Dataset(schema, X, y, group, name="two_group_toy")
