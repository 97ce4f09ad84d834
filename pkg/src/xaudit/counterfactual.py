"""Counterfactual search under a query budget.

All searches work on the precision grid of the schema and inside plausibility
bounds (observed training range widened by 20% on each side by default).
Every returned point is checked against the model before it is returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attribution import Attribution
from .data import Dataset, FeatureSchema, StandardScaler, fit_scaler
from .models import DecisionFunction

DEFAULT_BUDGET = 20_000


class _Spent(Exception):
    pass


class _Budget:
    """Label queries against f, refusing any batch that would overrun the budget."""

    def __init__(self, f: DecisionFunction, budget: int):
        self.f = f
        self.budget = budget
        self.used = 0

    @property
    def left(self) -> int:
        return self.budget - self.used

    def labels(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if X.shape[0] == 0:
            return np.zeros(0, dtype=int)
        if X.shape[0] > self.left:
            raise _Spent
        self.used += X.shape[0]
        return self.f.label(X)


@dataclass(frozen=True, eq=False)
class FeatureSpace:
    """Schema, scales and plausibility bounds used by the searches."""

    schema: FeatureSchema
    scaler: StandardScaler
    lower: np.ndarray
    upper: np.ndarray
    slack: float = 0.2

    @classmethod
    def from_dataset(cls, ds: Dataset, slack: float = 0.2) -> "FeatureSpace":
        sc = fit_scaler(ds)
        span = sc.upper - sc.lower
        cat = ds.schema.categorical_mask
        lower = np.where(cat, 0, sc.lower - slack * span)
        upper = np.where(cat, np.array(ds.schema.cardinality) - 1, sc.upper + slack * span)
        return cls(ds.schema, sc, lower, upper, slack)

    @property
    def d(self) -> int:
        return self.schema.d

    @property
    def categorical(self) -> np.ndarray:
        return self.schema.categorical_mask

    @property
    def precision(self) -> np.ndarray:
        return self.schema.precision_array

    def distance(self, x, P, metric: str = "mad_l1") -> np.ndarray:
        x = np.asarray(x, dtype=float)
        P = np.atleast_2d(P)
        cat = self.categorical
        delta = P - x[None, :]
        mismatch = (delta[:, cat] != 0).sum(axis=1).astype(float)
        cont = ~cat
        if metric == "mad_l1":
            return np.abs(delta[:, cont] / self.scaler.mad_scale[cont]).sum(axis=1) + mismatch
        if metric == "l2":
            return np.sqrt(((delta[:, cont] / self.scaler.scale[cont]) ** 2).sum(axis=1) + mismatch)
        raise ValueError(f"unknown metric {metric!r} (expected mad_l1 or l2)")

    def snap(self, x, P) -> np.ndarray:
        """Clip to bounds and round changed coordinates onto the precision grid;
        coordinates equal to x stay exactly as in x."""
        x = np.asarray(x, dtype=float)
        P = np.atleast_2d(np.array(P, dtype=float))
        R = np.clip(self.schema.round(np.clip(P, self.lower, self.upper)), *self._grid_bounds)
        return np.where(P == x[None, :], x[None, :], R)

    @property
    def _grid_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        # bounds pulled inward onto the precision grid so rounding cannot leave the box
        prec = self.precision
        lo = np.ceil(self.lower / prec - 1e-9) * prec
        hi = np.floor(self.upper / prec + 1e-9) * prec
        return lo, hi

    def changed(self, x, P) -> np.ndarray:
        """Boolean mask of coordinates that differ from x by at least half a precision unit."""
        P = np.atleast_2d(P)
        delta = np.abs(P - np.asarray(x, dtype=float)[None, :])
        return delta >= 0.5 * self.precision[None, :]


@dataclass
class Counterfactual:
    point: np.ndarray
    original: np.ndarray
    distance: float
    flipped_score: float
    metric: str = "mad_l1"
    queries: int = 0

    def to_json(self) -> dict:
        return {
            "point": [float(v) for v in self.point],
            "original": [float(v) for v in self.original],
            "distance": float(self.distance),
            "flipped_score": float(self.flipped_score),
            "metric": self.metric,
        }


@dataclass
class CounterfactualSet:
    items: list
    original: np.ndarray
    original_label: int
    distinctness_radius: float = 1.0
    metric: str = "mad_l1"
    shortfall: bool = False
    queries: int = 0
    changed_masks: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.items)

    @property
    def points(self) -> np.ndarray:
        if not self.items:
            return np.zeros((0, self.original.shape[0]))
        return np.array([c.point for c in self.items])

    def to_json(self) -> dict:
        masks = self.changed_masks
        if masks is None:
            masks = self.points != self.original[None, :]
        return {
            "originals": [[float(v) for v in self.original]],
            "original_label": int(self.original_label),
            "points": [[float(v) for v in c.point] for c in self.items],
            "distances": [float(c.distance) for c in self.items],
            "flipped_scores": [float(c.flipped_score) for c in self.items],
            "changed": [[bool(b) for b in row] for row in masks],
            "distinctness_radius": self.distinctness_radius,
            "metric": self.metric,
            "shortfall": bool(self.shortfall),
            "queries": int(self.queries),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CounterfactualSet":
        original = np.array(obj["originals"][0], dtype=float)
        metric = obj.get("metric", "mad_l1")
        items = [
            Counterfactual(np.array(p, dtype=float), original, dist, score, metric)
            for p, dist, score in zip(obj["points"], obj["distances"], obj.get("flipped_scores", [np.nan] * len(obj["points"])))
        ]
        masks = np.array(obj["changed"], dtype=bool) if obj.get("changed") else None
        return cls(
            items, original, int(obj["original_label"]), obj.get("distinctness_radius", 1.0), metric,
            bool(obj.get("shortfall", False)), int(obj.get("queries", 0)), masks,
        )


def _interp(x, P, t, space: FeatureSpace) -> np.ndarray:
    """Points at fraction t of the way from x to each row of P; categoricals switch at t = 0.5."""
    out = x[None, :] + t[:, None] * (P - x[None, :])
    cat = space.categorical
    out[:, cat] = np.where(t[:, None] < 0.5, x[None, cat], P[:, cat])
    return space.snap(x, out)


def _bisect_segment(q: _Budget, x, P, target, space: FeatureSpace, iters: int = 12) -> np.ndarray:
    """Shrink each row of P toward x along the straight segment, keeping label == target."""
    lo = np.zeros(P.shape[0])
    hi = np.ones(P.shape[0])
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        ok = q.labels(_interp(x, P, mid, space)) == target
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    out = _interp(x, P, hi, space)
    ok = q.labels(out) == target
    return np.where(ok[:, None], out, P)


def _bisect_feature(q: _Budget, x, P, j: int, target, space: FeatureSpace) -> np.ndarray:
    """Move coordinate j of each row toward x_j as far as the label allows (precision grid)."""
    prec = space.precision[j]
    lo = np.full(P.shape[0], x[j])  # known non-flip side (or untested)
    hi = P[:, j].copy()  # known flip
    active = np.abs(hi - lo) > prec
    P = P.copy()
    while active.any():
        mid = np.round(0.5 * (lo + hi) / prec) * prec
        stuck = (mid == lo) | (mid == hi)
        active &= ~stuck
        if not active.any():
            break
        cand = P[active].copy()
        cand[:, j] = mid[active]
        ok = q.labels(cand) == target
        idx = np.flatnonzero(active)
        hi[idx[ok]] = mid[idx[ok]]
        lo[idx[~ok]] = mid[idx[~ok]]
        active &= np.abs(hi - lo) > prec
    P[:, j] = hi
    return P


def tighten(
    q: _Budget, x, P, target, space: FeatureSpace, metric: str = "mad_l1",
    feature_bisection: bool = True, passes: int = 2, trace: Optional[list] = None,
) -> np.ndarray:
    """Pull valid counterfactuals toward x: segment bisection, then per-feature
    reverts (and optionally per-feature bisection). Each accepted step keeps the
    label at ``target`` and never increases the distance."""
    x = np.asarray(x, dtype=float)
    P = np.array(P, dtype=float)

    def record(stage, before, after):
        if trace is not None:
            trace.append((stage, space.distance(x, before, metric), space.distance(x, after, metric), after.copy()))

    new = _bisect_segment(q, x, P, target, space)
    new = _keep_if_closer(x, P, new, space, metric)
    record("segment", P, new)
    P = new
    for _ in range(passes):
        before_pass = P.copy()
        contrib = np.abs(P - x[None, :]) / np.where(space.categorical, 1.0, space.scaler.mad_scale)
        order = np.argsort(-contrib.sum(axis=0), kind="stable")
        for j in order:
            rows = np.flatnonzero(P[:, j] != x[j])
            if rows.size == 0:
                continue
            cand = P[rows].copy()
            cand[:, j] = x[j]
            ok = q.labels(cand) == target
            new = P.copy()
            new[rows[ok]] = cand[ok]
            record("revert", P, new)
            P = new
            if feature_bisection and not space.categorical[j]:
                rows = np.flatnonzero(P[:, j] != x[j])
                if rows.size:
                    new = P.copy()
                    new[rows] = _bisect_feature(q, x, P[rows], j, target, space)
                    new = _keep_if_closer(x, P, new, space, metric)
                    record("feature", P, new)
                    P = new
        if np.array_equal(P, before_pass):
            break
    return P


def _keep_if_closer(x, old, new, space, metric):
    worse = space.distance(x, new, metric) > space.distance(x, old, metric)
    return np.where(worse[:, None], old, new)


def _single_feature_candidates(q: _Budget, x, j, target, space: FeatureSpace, grid: int = 64) -> Optional[np.ndarray]:
    """Closest flip that changes only feature j, or None."""
    if space.categorical[j]:
        codes = [c for c in range(int(space.upper[j]) + 1) if c != x[j]]
        if not codes:
            return None
        cand = np.repeat(x[None, :], len(codes), axis=0)
        cand[:, j] = codes
        ok = q.labels(cand) == target
        return cand[ok] if ok.any() else None

    found = []
    for bound in (space.lower[j], space.upper[j]):
        if bound == x[j]:
            continue
        vals = x[j] + (bound - x[j]) * np.linspace(0, 1, grid + 1)[1:]
        cand = space.snap(x, np.repeat(x[None, :], grid, axis=0))
        cand[:, j] = vals
        cand = space.snap(x, cand)
        ok = q.labels(cand) == target
        if ok.any():
            first = int(np.argmax(ok))
            pt = cand[first:first + 1]
            found.append(_bisect_feature(q, x, pt, j, target, space)[0])
    if not found:
        return None
    return np.array(found)


def closest_counterfactual(
    f: DecisionFunction,
    x,
    space: FeatureSpace,
    metric: str = "mad_l1",
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
    restarts: int = 8,
) -> Optional[Counterfactual]:
    """Best flip found by single-feature line searches, seeded random restarts
    and coordinate-descent refinement; ``None`` when nothing flips in budget."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    x = np.asarray(x, dtype=float)
    space.distance(x, x, metric)  # validates metric
    q = _Budget(f, budget - 1)  # one query reserved for the final score
    rng = np.random.default_rng(seed)
    pool = []
    y0 = None
    try:
        y0 = int(q.labels(x)[0])
        target = 1 - y0
        for j in range(space.d):
            c = _single_feature_candidates(q, x, j, target, space)
            if c is not None:
                pool.append(c)
        width = 0.5
        for _ in range(10):
            n = min(512, q.left // 4)
            if n == 0:
                break
            flips = _random_flips(q, x, target, space, rng, n, width)
            if len(flips):
                pool.append(flips)
            width *= 1.6
            if sum(len(p) for p in pool) >= 4 * restarts:
                break
        if pool:
            cands = np.concatenate(pool)
            dist = space.distance(x, cands, metric)
            best = cands[np.argsort(dist, kind="stable")[:restarts]]
            pool.append(tighten(q, x, best, target, space, metric, feature_bisection=True))
            _local_refine(q, x, pool, target, space, metric, rng, restarts)
    except _Spent:
        pass
    if not pool or y0 is None:
        return None
    cands = np.concatenate(pool)
    dist = space.distance(x, cands, metric)
    i = int(np.argmin(dist))
    score = float(f.score(cands[i]))
    return Counterfactual(cands[i], x, float(dist[i]), score, metric, q.used + 1)


def _ball(x, n, radius, space: FeatureSpace, metric, rng) -> np.ndarray:
    """n points uniform in the metric ball of ``radius`` around x (continuous coordinates only)."""
    cont = np.flatnonzero(~space.categorical)
    k = cont.size
    if metric == "mad_l1":
        e = rng.exponential(size=(n, k))
        u = e / e.sum(axis=1, keepdims=True) * np.where(rng.random((n, k)) < 0.5, -1.0, 1.0)
        scale = space.scaler.mad_scale[cont]
    else:
        g = rng.standard_normal((n, k))
        u = g / np.linalg.norm(g, axis=1, keepdims=True)
        scale = space.scaler.scale[cont]
    r = radius * rng.random(n) ** (1.0 / k)
    P = np.repeat(x[None, :], n, axis=0)
    P[:, cont] += u * r[:, None] * scale
    return P


def _local_refine(q: _Budget, x, pool: list, target, space: FeatureSpace, metric, rng, keep: int,
                  max_rounds: int = 30, patience: int = 3) -> None:
    """Random search for closer flips, appended (tightened) to ``pool``.

    Half of each round steps around the incumbent with a shrinking width, half
    samples the ball around x the incumbent's distance spans, where any flip
    is an improvement. Reaches corners and pockets of axis-aligned boundaries
    that coordinate-wise tightening cannot.
    """
    cont = ~space.categorical
    if not cont.any():
        return
    stale = 0
    for r in range(max_rounds):
        cands = np.concatenate(pool)
        dist = space.distance(x, cands, metric)
        i = int(np.argmin(dist))
        best, d_best = cands[i], dist[i]
        n = min(256, q.left // 4)
        if n < 2 or d_best == 0:
            return
        n_changed = max(int(space.changed(x, best[None, :]).sum()), 1)
        width = d_best / n_changed * 0.5 ** (r % 6)
        P = np.repeat(best[None, :], n // 2, axis=0)
        P[:, cont] += rng.standard_normal((n // 2, int(cont.sum()))) * width * space.scaler.mad_scale[cont]
        P = space.snap(x, np.vstack([P, _ball(x, n - n // 2, d_best, space, metric, rng)]))
        P = P[space.distance(x, P, metric) < d_best]
        ok = q.labels(P) == target if P.shape[0] else np.zeros(0, bool)
        if not ok.any():
            stale += 1
            if stale >= patience:
                return
            continue
        stale = 0
        F = P[ok]
        F = F[np.argsort(space.distance(x, F, metric), kind="stable")[:keep]]
        pool.append(tighten(q, x, F, target, space, metric, feature_bisection=True, passes=1))


def _random_flips(q: _Budget, x, target, space: FeatureSpace, rng, n: int, width: float) -> np.ndarray:
    d = space.d
    m = rng.integers(1, d + 1, size=n)
    order = np.argsort(rng.random((n, d)), axis=1)
    which = order < m[:, None]
    cont = ~space.categorical
    step = rng.standard_normal((n, d)) * width * space.scaler.scale[None, :]
    P = np.repeat(x[None, :], n, axis=0)
    P[:, cont] += step[:, cont]
    for j in np.flatnonzero(space.categorical):
        P[:, j] = rng.integers(0, int(space.upper[j]) + 1, size=n)
    P = np.where(which, P, x[None, :])
    P = space.snap(x, P)
    P = P[(P != x[None, :]).any(axis=1)]
    if P.shape[0] == 0:
        return P
    ok = q.labels(P) == target
    return P[ok]


def _distinct(P: np.ndarray, candidate: np.ndarray, precision: np.ndarray, radius: float) -> bool:
    if P.shape[0] == 0:
        return True
    linf = np.max(np.abs(P - candidate[None, :]) / precision[None, :], axis=1)
    return bool(linf.min() >= radius - 1e-9)


def _fill_distinct(T, pool, precision, k, radius) -> np.ndarray:
    rows = list(T)
    for p in pool:
        if len(rows) >= k:
            break
        if _distinct(np.array(rows) if rows else np.zeros((0, pool.shape[1])), p, precision, radius):
            rows.append(p)
    return np.array(rows) if rows else T


def _farthest_point(x, P, space, metric, k, radius) -> list[int]:
    """Greedy diverse subset: start at the closest point, then repeatedly add the
    point farthest (in the search metric) from everything chosen so far."""
    if P.shape[0] == 0:
        return []
    dist_x = space.distance(x, P, metric)
    first = int(np.argmin(dist_x))
    chosen = [first]
    mind = space.distance(P[first], P, metric)
    prec = space.precision
    alive = np.ones(P.shape[0], dtype=bool)
    alive[first] = False
    linf = np.max(np.abs(P - P[first][None, :]) / prec[None, :], axis=1)
    alive &= linf >= radius - 1e-9
    while len(chosen) < k and alive.any():
        score = np.where(alive, mind, -np.inf)
        nxt = int(np.argmax(score))
        chosen.append(nxt)
        alive[nxt] = False
        mind = np.minimum(mind, space.distance(P[nxt], P, metric))
        linf = np.max(np.abs(P - P[nxt][None, :]) / prec[None, :], axis=1)
        alive &= linf >= radius - 1e-9
    return chosen


def diverse_counterfactuals(
    f: DecisionFunction,
    x,
    space: FeatureSpace,
    k: int = 10,
    sampler_width: float = 0.5,
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
    metric: str = "mad_l1",
    distinctness_radius: float = 1.0,
) -> CounterfactualSet:
    """Up to k mutually distinct counterfactuals.

    Random sparse perturbations of x with a width that grows by 1.5x per round
    (in feature std units) collect flips; a farthest-point pre-selection of
    about 2k flips is tightened toward x, and a final farthest-point pass keeps
    k points at least ``distinctness_radius`` precision units apart in L-inf.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(x, dtype=float)
    if budget < k + 2:
        raise ValueError("budget must exceed k + 1")
    q = _Budget(f, budget - k)  # k queries reserved for the final validity scores
    rng = np.random.default_rng(seed)
    y0 = int(q.labels(x)[0])
    target = 1 - y0
    flips = []
    n_found = 0
    width = sampler_width
    sample_budget = budget // 3
    pool_target = 6 * k
    batch = max(64, min(1024, 4 * k))
    try:
        while n_found < pool_target and q.used + batch <= sample_budget:
            got = _random_flips(q, x, target, space, rng, batch, width)
            if len(got):
                flips.append(got)
                n_found += len(got)
            if n_found < pool_target:
                width *= 1.5
    except _Spent:
        pass
    P = np.concatenate(flips) if flips else np.zeros((0, space.d))
    P = np.unique(P, axis=0) if len(P) else P
    pre = P[_farthest_point(x, P, space, metric, 2 * k, distinctness_radius)] if len(P) else P

    # tighten in chunks while the budget lasts
    per_item = 14 + space.d + 2
    tightened = []
    start = 0
    while start < len(pre):
        n_afford = max(0, (q.left - 1) // per_item)
        if n_afford == 0:
            break
        chunk = pre[start:start + n_afford]
        try:
            tightened.append(tighten(q, x, chunk, target, space, metric, feature_bisection=False, passes=1))
        except _Spent:
            tightened.append(chunk)
            start += len(chunk)
            break
        start += len(chunk)
    if start < len(pre):
        tightened.append(pre[start:])
    T = np.concatenate(tightened) if tightened else np.zeros((0, space.d))

    chosen = _farthest_point(x, T, space, metric, k, distinctness_radius)
    T = T[chosen]
    if len(T) < k and len(P):
        # tightening often collapses flips onto the same minimal change; top up
        # with distinct sampled flips, nearest first
        T = _fill_distinct(T, P[np.argsort(space.distance(x, P, metric), kind="stable")], space.precision, k, distinctness_radius)
    items = []
    if len(T):
        scores = f.score(T)
        labels = (scores >= f.threshold).astype(int)
        dist = space.distance(x, T, metric)
        for p, s, lab, dd in zip(T, scores, labels, dist):
            if lab == target:
                items.append(Counterfactual(p, x, float(dd), float(s), metric))
    return CounterfactualSet(
        items, x, y0, distinctness_radius, metric,
        shortfall=len(items) < k, queries=q.used + len(T),
        changed_masks=space.changed(x, np.array([c.point for c in items])) if items else np.zeros((0, space.d), bool),
        info={"final_width": width, "flips_sampled": int(n_found)},
    )


def single_feature_counterfactual(
    f: DecisionFunction, x, j: int, space: FeatureSpace, budget: int = 1_000, metric: str = "mad_l1",
) -> Optional[Counterfactual]:
    """Closest flip changing only feature j inside the plausibility bounds."""
    x = np.asarray(x, dtype=float)
    if not 0 <= j < space.d:
        raise IndexError(f"feature index {j} out of range")
    q = _Budget(f, budget)
    try:
        target = 1 - int(q.labels(x)[0])
        cands = _single_feature_candidates(q, x, j, target, space)
    except _Spent:
        return None
    if cands is None:
        return None
    dist = space.distance(x, cands, metric)
    i = int(np.argmin(dist))
    return Counterfactual(cands[i], x, float(dist[i]), float(f.score(cands[i])), metric, q.used + 1)


def transfer_rate(cf_set: CounterfactualSet, g: DecisionFunction) -> float:
    """Share of counterfactuals that also flip g's decision on the original.

    Raises ``ValueError`` for an empty set or when g decides the original
    differently from the model the set was generated for.
    """
    if not cf_set.items:
        raise ValueError("transfer rate of an empty counterfactual set is undefined")
    g0 = int(g.label(cf_set.original))
    if g0 != cf_set.original_label:
        raise ValueError("g disagrees with the generating model on the original point")
    return float(np.mean(g.label(cf_set.points) != g0))


def transfer_experiment(cf_sets: list, g: DecisionFunction) -> dict:
    """Transfer rates of many sets to g. Sets whose original g labels
    differently are excluded and listed; empty sets likewise."""
    rates, mismatched, empty = [], [], []
    for i, cs in enumerate(cf_sets):
        if not cs.items:
            empty.append(i)
        elif int(g.label(cs.original)) != cs.original_label:
            mismatched.append(i)
        else:
            rates.append(transfer_rate(cs, g))
    return {
        "mean_transfer_rate": float(np.mean(rates)) if rates else float("nan"),
        "rates": rates,
        "n_used": len(rates),
        "excluded_label_mismatch": mismatched,
        "excluded_empty": empty,
    }


def counterfactual_attribution(f: DecisionFunction, x, cf_set: CounterfactualSet, space: Optional[FeatureSpace] = None) -> Attribution:
    """Per-feature share of counterfactuals that change the feature, L1-normalized."""
    if not cf_set.items:
        raise ValueError("counterfactual attribution needs a non-empty set")
    x = np.asarray(x, dtype=float)
    P = cf_set.points
    if space is not None:
        changed = space.changed(x, P)
    else:
        changed = P != x[None, :]
    freq = changed.mean(axis=0)
    total = freq.sum()
    values = freq / total if total > 0 else freq
    return Attribution(
        values, float(f.score(x)), x, f"cf[k={len(cf_set)},metric={cf_set.metric}]",
        info={"change_frequency": freq.tolist()},
    )
