"""Perturbation schemes shared by the explainers and the scaffolding attack."""

from __future__ import annotations

import numpy as np

from .data import FeatureSchema, StandardScaler


def lime_perturb(x, scaler: StandardScaler, schema: FeatureSchema, n: int, rng) -> np.ndarray:
    """Gaussian perturbations around ``x`` in standardized space.

    Continuous features get unit normal noise in standardized units; each
    categorical feature is redrawn from its training marginal with
    probability 0.5. Row 0 is ``x`` itself.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    cat = schema.categorical_mask
    noise = rng.standard_normal((n, d))
    Z = scaler.standardize(x)[None, :] + noise
    out = scaler.unstandardize(Z)
    out[:, scaler.constant] = x[scaler.constant]
    for j in np.flatnonzero(cat):
        resample = rng.random(n) < 0.5
        draws = rng.choice(len(scaler.category_freqs[j]), size=n, p=scaler.category_freqs[j])
        out[:, j] = np.where(resample, draws, x[j])
    out[0] = x
    return out


def shap_composites(X_real: np.ndarray, n: int, rng) -> np.ndarray:
    """Interventional coalition composites: a random row with a random feature
    subset replaced by the values of another random row."""
    m, d = X_real.shape
    a = X_real[rng.integers(0, m, n)]
    b = X_real[rng.integers(0, m, n)]
    keep = rng.random((n, d)) < rng.random((n, 1))
    return np.where(keep, a, b)


def draw(kind: str, X_real: np.ndarray, scaler: StandardScaler, schema: FeatureSchema, n: int, rng) -> np.ndarray:
    """``n`` perturbation-style queries of the given scheme around rows of ``X_real``."""
    if kind == "lime":
        centers = X_real[rng.integers(0, X_real.shape[0], n)]
        noise = rng.standard_normal(centers.shape)
        out = scaler.unstandardize(scaler.standardize(centers) + noise)
        out[:, scaler.constant] = centers[:, scaler.constant]
        for j in np.flatnonzero(schema.categorical_mask):
            resample = rng.random(n) < 0.5
            draws = rng.choice(len(scaler.category_freqs[j]), size=n, p=scaler.category_freqs[j])
            out[:, j] = np.where(resample, draws, centers[:, j])
        return out
    if kind == "shap":
        return shap_composites(X_real, n, rng)
    if kind == "lime+shap":
        half = n // 2
        return np.vstack([draw("lime", X_real, scaler, schema, half, rng), shap_composites(X_real, n - half, rng)])
    raise ValueError(f"unknown perturbation scheme {kind!r} (expected 'lime', 'shap' or 'lime+shap')")
