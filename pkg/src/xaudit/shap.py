"""Shapley-value attributions with interventional or single-baseline value functions.

Two estimators share one coalition-value routine: exact enumeration of all
2^d coalitions (d <= 15) and the kernel-weighted least-squares estimator with
efficiency imposed as a hard constraint.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb, factorial
from typing import Iterable, Optional

import numpy as np

from .attribution import Attribution
from .data import Dataset
from .models import DecisionFunction

MAX_EXACT_D = 15
DEFAULT_CAP = 128
_CHUNK_ROWS = 262_144


@dataclass(frozen=True, eq=False)
class ValueFunctionSpec:
    """How absent features are filled in.

    ``interventional``: averaged over reference rows (a seeded subsample of at
    most ``n_reference_samples`` rows when the reference is larger).
    ``baseline``: taken from one fixed point.
    """

    kind: str
    reference: np.ndarray
    n_reference_samples: int = DEFAULT_CAP
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("interventional", "baseline"):
            raise ValueError(f"value function kind must be interventional or baseline, not {self.kind!r}")
        ref = self.reference.X if isinstance(self.reference, Dataset) else np.asarray(self.reference, dtype=float)
        ref = np.atleast_2d(ref)
        if ref.shape[0] == 0:
            raise ValueError("reference must be non-empty")
        if self.n_reference_samples < 1:
            raise ValueError("n_reference_samples must be >= 1")
        if self.kind == "baseline" and ref.shape[0] != 1:
            raise ValueError("a baseline value function takes exactly one point")
        object.__setattr__(self, "reference", ref)

    @classmethod
    def interventional(cls, reference, cap: int = DEFAULT_CAP, seed: int = 0) -> "ValueFunctionSpec":
        return cls("interventional", reference, cap, seed)

    @classmethod
    def baseline(cls, point) -> "ValueFunctionSpec":
        return cls("baseline", np.asarray(point, dtype=float).reshape(1, -1), 1)

    def rows(self) -> np.ndarray:
        ref = self.reference
        if ref.shape[0] <= self.n_reference_samples:
            return ref
        idx = np.random.default_rng(self.seed).choice(ref.shape[0], self.n_reference_samples, replace=False)
        return ref[np.sort(idx)]

    @property
    def tag(self) -> str:
        if self.kind == "baseline":
            return "baseline"
        return f"interventional(n_ref={min(self.reference.shape[0], self.n_reference_samples)},seed={self.seed})"


def coalition_values(f: DecisionFunction, x, masks: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """v(S) for each boolean row of ``masks``: mean of f over composites that
    take x on S and a reference row elsewhere."""
    x = np.asarray(x, dtype=float)
    masks = np.asarray(masks, dtype=bool)
    R = ref.shape[0]
    per_chunk = max(1, _CHUNK_ROWS // R)
    out = np.empty(masks.shape[0])
    for start in range(0, masks.shape[0], per_chunk):
        m = masks[start:start + per_chunk]
        comp = np.where(m[:, None, :], x[None, None, :], ref[None, :, :])
        scores = f.score(comp.reshape(-1, x.shape[0]))
        out[start:start + m.shape[0]] = scores.reshape(m.shape[0], R).mean(axis=1)
    return out


def coalition_value(f: DecisionFunction, x, S: Iterable[int], spec: ValueFunctionSpec) -> float:
    x = np.asarray(x, dtype=float)
    mask = np.zeros(x.shape[0], dtype=bool)
    mask[list(S)] = True
    return float(coalition_values(f, x, mask[None, :], spec.rows())[0])


def _all_masks(d: int) -> np.ndarray:
    codes = np.arange(2**d)
    return ((codes[:, None] >> np.arange(d)[None, :]) & 1).astype(bool)


def shapley_exact(f: DecisionFunction, x, spec: ValueFunctionSpec) -> Attribution:
    """Exact Shapley values by evaluating every coalition."""
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    if d > MAX_EXACT_D:
        raise ValueError(
            f"exact enumeration needs 2^{d} coalitions; use shapley_kernel for d > {MAX_EXACT_D}"
        )
    masks = _all_masks(d)
    v = coalition_values(f, x, masks, spec.rows())
    size_w = np.array([factorial(s) * factorial(d - s - 1) / factorial(d) for s in range(d)])
    sizes = masks.sum(axis=1)
    codes = np.arange(2**d)
    phi = np.empty(d)
    for i in range(d):
        without = codes[~masks[:, i]]
        phi[i] = np.sum(size_w[sizes[without]] * (v[without | (1 << i)] - v[without]))
    return Attribution(phi, float(v[0]), x, f"shap-exact[{spec.tag}]", info={"fx": float(v[-1])})


def kernel_weight(d: int, s: int) -> float:
    """Shapley kernel weight of one coalition of size ``s``."""
    return (d - 1) / (comb(d, s) * s * (d - s))


def _size_masks(d: int, s: int) -> np.ndarray:
    out = np.zeros((comb(d, s), d), dtype=bool)
    for row, idx in enumerate(itertools.combinations(range(d), s)):
        out[row, list(idx)] = True
    return out


def sample_coalitions(d: int, n_coalitions: int, rng) -> tuple[np.ndarray, np.ndarray, bool]:
    """Coalitions and regression weights for the kernel estimator.

    Complementary size pairs (1, d-1), (2, d-2), ... are enumerated outright
    while the budget covers their share of the kernel mass; the remaining
    sizes are sampled in complementary pairs, proportional to kernel mass,
    and share the leftover mass equally. Returns (masks, weights, complete).
    """
    if n_coalitions >= 2**d - 2:
        masks = np.concatenate([_size_masks(d, s) for s in range(1, d)])
        weights = np.array([kernel_weight(d, int(m.sum())) for m in masks])
        return masks, weights, True

    pairs = []
    for s in range(1, d // 2 + 1):
        pairs.append((s,) if s == d - s else (s, d - s))
    mass = {s: (d - 1) / (s * (d - s)) for s in range(1, d)}
    masks, weights = [], []
    budget = n_coalitions
    remaining = list(pairs)
    while remaining:
        sizes = remaining[0]
        count = sum(comb(d, s) for s in sizes)
        rest_mass = sum(mass[s] for p in remaining for s in p)
        share = budget * sum(mass[s] for s in sizes) / rest_mass
        if share < count or count > budget:
            break
        for s in sizes:
            masks.append(_size_masks(d, s))
            weights.append(np.full(comb(d, s), kernel_weight(d, s)))
        budget -= count
        remaining.pop(0)

    if remaining and budget >= 2:
        sizes = np.array([s for p in remaining for s in p if s <= d - s])
        p = np.array([mass[s] + (mass[d - s] if s != d - s else 0.0) for s in sizes])
        total_mass = sum(mass[s] for q in remaining for s in q)
        n_pairs = budget // 2
        drawn = {}
        chosen = rng.choice(sizes, size=n_pairs, p=p / p.sum())
        for s in chosen:
            idx = rng.choice(d, size=int(s), replace=False)
            m = np.zeros(d, dtype=bool)
            m[idx] = True
            for mm in (m, ~m):
                key = mm.tobytes()
                drawn[key] = drawn.get(key, 0) + 1
        keys = sorted(drawn)
        sampled = np.array([np.frombuffer(k, dtype=bool) for k in keys])
        counts = np.array([drawn[k] for k in keys], dtype=float)
        masks.append(sampled)
        weights.append(counts * total_mass / (2 * n_pairs))
    if not masks:
        raise ValueError("n_coalitions too small to form any coalition")
    return np.concatenate(masks), np.concatenate(weights), False


def _solve_constrained(Z, y_target, w, total, ridge):
    """Weighted least squares for phi with sum(phi) == total (last coordinate eliminated)."""
    A = Z[:, :-1].astype(float) - Z[:, [-1]].astype(float)
    b = y_target - Z[:, -1] * total
    AtW = A.T * w
    M = AtW @ A + ridge * np.eye(A.shape[1])
    rhs = AtW @ b
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > 1e12:
        raise np.linalg.LinAlgError(f"ill-conditioned kernel system (cond={cond:.2e})")
    head = np.linalg.solve(M, rhs)
    return np.append(head, total - head.sum())


def shapley_kernel(
    f: DecisionFunction,
    x,
    spec: ValueFunctionSpec,
    n_coalitions: int = 2048,
    ridge: float = 1e-6,
    seed: int = 0,
) -> Attribution:
    """Kernel-weighted regression estimate of the Shapley values."""
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    if n_coalitions < d + 2:
        raise ValueError(f"n_coalitions must be at least d + 2 = {d + 2}")
    ref = spec.rows()
    v_empty, v_full = coalition_values(f, x, np.array([np.zeros(d, bool), np.ones(d, bool)]), ref)
    masks, weights, complete = sample_coalitions(d, n_coalitions, np.random.default_rng(seed))
    v = coalition_values(f, x, masks, ref)
    total = v_full - v_empty
    escalated = False
    lam = ridge
    while True:
        try:
            phi = _solve_constrained(masks, v - v_empty, weights, total, lam)
            break
        except np.linalg.LinAlgError:
            if lam >= 1e-2:
                raise
            lam = max(lam, 1e-6) * 10
            escalated = True
    tag = f"shap-kernel[{spec.tag},n={n_coalitions},seed={seed},ridge={lam:g}{',escalated' if escalated else ''}]"
    return Attribution(
        phi, float(v_empty), x, tag,
        flags={"ridge_escalated": escalated, "complete_enumeration": complete},
        info={"fx": float(v_full), "n_distinct_coalitions": int(masks.shape[0])},
    )


def attribution_sensitivity_to_reference(
    f: DecisionFunction,
    x,
    spec_a: ValueFunctionSpec,
    spec_b: ValueFunctionSpec,
    method: str = "exact",
    n_coalitions: int = 2048,
    seed: int = 0,
) -> dict:
    """Same estimator, two value functions: how far apart are the attributions?"""
    from .compare import normalize_l1

    def run(spec):
        if method == "exact":
            return shapley_exact(f, x, spec)
        return shapley_kernel(f, x, spec, n_coalitions=n_coalitions, seed=seed)

    a, b = run(spec_a), run(spec_b)
    na, nb = normalize_l1(a), normalize_l1(b)
    return {
        "phi_a": a,
        "phi_b": b,
        "argmax_a": a.top(),
        "argmax_b": b.top(),
        "argmax_changed": a.top() != b.top(),
        "l1_delta": float(np.abs(na.values - nb.values).sum()),
    }
