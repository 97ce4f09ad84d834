"""Local surrogate attributions: perturb, weight by proximity, fit a weighted ridge model."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attribution import Attribution
from .data import FeatureSchema, StandardScaler
from .models import DecisionFunction
from .sampling import lime_perturb


@dataclass(frozen=True)
class SurrogateConfig:
    """``bandwidth`` is in standardized units; ``None`` means 0.75 * sqrt(d).
    ``top_k`` ``None`` means all features for d <= 12, else 10."""

    n_perturbations: int = 5000
    bandwidth: Optional[float] = None
    top_k: Optional[int] = None
    ridge: float = 1.0
    seed: int = 0

    def resolved(self, d: int) -> "SurrogateConfig":
        bw = 0.75 * math.sqrt(d) if self.bandwidth is None else self.bandwidth
        k = (d if d <= 12 else 10) if self.top_k is None else self.top_k
        cfg = SurrogateConfig(self.n_perturbations, bw, k, self.ridge, self.seed)
        if cfg.n_perturbations < d + 2:
            raise ValueError(f"n_perturbations must be at least d + 2 = {d + 2}")
        if not cfg.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if not 1 <= cfg.top_k <= d:
            raise ValueError(f"top_k must lie in [1, {d}]")
        if cfg.ridge < 0:
            raise ValueError("ridge must be >= 0")
        return cfg

    @property
    def tag(self) -> str:
        return f"lime[n={self.n_perturbations},bw={self.bandwidth:.4g},k={self.top_k},ridge={self.ridge:g},seed={self.seed},sampling=gaussian-std]"


def perturb(x, scaler: StandardScaler, schema: FeatureSchema, n: int, seed: int) -> np.ndarray:
    return lime_perturb(x, scaler, schema, n, np.random.default_rng(seed))


def _distances(x, Z, scaler: StandardScaler, schema: FeatureSchema) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    cat = schema.categorical_mask
    diff = (Z - x[None, :]) / scaler.scale
    diff[:, cat] = (Z[:, cat] != x[None, cat]).astype(float)
    return np.sqrt(np.sum(diff**2, axis=1))


def kernel_weight(x, z, bandwidth: float, scaler: StandardScaler, schema: Optional[FeatureSchema] = None):
    """exp(-D^2 / b^2) on the standardized Euclidean distance D."""
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    if schema is None:
        schema = FeatureSchema.continuous([f"x{j}" for j in range(np.asarray(x).shape[0])])
    D = _distances(x, z, scaler, schema)
    w = np.exp(-(D**2) / bandwidth**2)
    return float(w[0]) if np.asarray(z).ndim == 1 else w


def _design(x, P, scaler, schema) -> np.ndarray:
    cat = schema.categorical_mask
    Z = scaler.standardize(P)
    Z[:, cat] = (P[:, cat] == np.asarray(x)[None, cat]).astype(float)
    return Z


def _weighted_ridge(Z, y, w, ridge):
    """Returns (coef, intercept, weighted R^2); the intercept is unpenalized."""
    sw = w / w.sum()
    zbar = sw @ Z
    ybar = sw @ y
    Zc, yc = Z - zbar, y - ybar
    A = (Zc.T * sw) @ Zc + (ridge / w.sum()) * np.eye(Z.shape[1])
    coef = np.linalg.solve(A, (Zc.T * sw) @ yc)
    resid = yc - Zc @ coef
    sst = sw @ yc**2
    r2 = 1.0 - (sw @ resid**2) / sst if sst > 0 else 0.0
    return coef, float(ybar - zbar @ coef), float(r2)


def forward_select(Z, y, w, k: int, ridge: float) -> list[int]:
    """Greedy forward selection by weighted R^2 gain; ties go to the lower index."""
    chosen: list[int] = []
    for _ in range(k):
        best, best_r2 = None, -np.inf
        for j in range(Z.shape[1]):
            if j in chosen:
                continue
            _, _, r2 = _weighted_ridge(Z[:, chosen + [j]], y, w, ridge)
            if r2 > best_r2 + 1e-15:
                best, best_r2 = j, r2
        chosen.append(best)
    return sorted(chosen)


def explain_lime(
    f: DecisionFunction,
    x,
    cfg: SurrogateConfig,
    scaler: StandardScaler,
    schema: FeatureSchema,
) -> Attribution:
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    cfg = cfg.resolved(d)
    P = perturb(x, scaler, schema, cfg.n_perturbations, cfg.seed)
    y = f.score(P)
    if np.var(y) < 1e-12:
        return Attribution(np.zeros(d), float(y[0]), x, cfg.tag, flags={"degenerate": True}, info={"r2": 0.0})
    w = kernel_weight(x, P, cfg.bandwidth, scaler, schema)
    Z = _design(x, P, scaler, schema)
    cols = list(range(d)) if cfg.top_k == d else forward_select(Z, y, w, cfg.top_k, cfg.ridge)
    coef, intercept, r2 = _weighted_ridge(Z[:, cols], y, w, cfg.ridge)
    values = np.zeros(d)
    values[cols] = coef
    return Attribution(
        values, intercept, x, cfg.tag,
        flags={"degenerate": False},
        info={"r2": r2, "selected": cols, "score": float(y[0])},
    )
