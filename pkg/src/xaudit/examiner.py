"""Query-only auditing of a decision provider.

The examiner sees decisions and the provider's explanations through a
budgeted :class:`QueryOracle`. Direct tests of the decision function
(fairness, scaffold probing) run first; checks of the explanations' internal
consistency come after and are reported separately.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .attribution import Attribution
from .compare import normalize_l1
from .counterfactual import CounterfactualSet
from .data import Dataset, fit_scaler
from .errors import BudgetExhausted
from .explain import ExplainerConfig, ExplanationContext, explain
from .models import ConstantModel, DecisionFunction, TrainConfig, train
from .sampling import lime_perturb
from .seeding import rng as named_rng

NOISE_FLOOR = 1e-3
JUMP = 0.5
FLAT = 0.1

Explanation = Union[Attribution, CounterfactualSet]


class QueryOracle:
    """Budgeted access to a provider: ``decide`` costs one query per point,
    ``explain`` returns the provider's explanation and is not charged.

    Budget accounting is atomic, so checks may share one oracle across threads.
    A batch that would overrun the budget is refused as a whole.
    """

    def __init__(
        self,
        decide: Union[DecisionFunction, Callable],
        explain: Optional[Callable] = None,
        budget: int = 10_000,
        threshold: float = 0.5,
        keep_log: bool = True,
    ):
        if budget < 0:
            raise ValueError("budget must be >= 0")
        if isinstance(decide, DecisionFunction):
            f = decide
            self._score = f.score
            self.threshold = f.threshold
            self.d = f.d
        else:
            self._score = decide
            self.threshold = threshold
            self.d = None
        self._explain = explain
        self.budget = int(budget)
        self.spent = 0
        self._lock = threading.Lock()
        self.keep_log = keep_log
        self.log: list = []

    @property
    def remaining(self) -> int:
        return self.budget - self.spent

    def decide(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Scores and labels for the rows of ``X`` (a single point is one row)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = X.shape[0]
        with self._lock:
            if self.spent + n > self.budget:
                raise BudgetExhausted(f"{n} queries requested, {self.budget - self.spent} left")
            self.spent += n
        scores = np.asarray(self._score(X), dtype=float).reshape(n)
        labels = (scores >= self.threshold).astype(int)
        if self.keep_log:
            with self._lock:
                self.log.extend(zip(X.tolist(), scores.tolist(), labels.tolist()))
        return scores, labels

    def explain(self, x) -> Explanation:
        if self._explain is None:
            raise RuntimeError("this provider offers no explanations")
        return self._explain(np.asarray(x, dtype=float))

    @classmethod
    def from_model(
        cls, f: DecisionFunction, cfg: Optional[ExplainerConfig] = None,
        ctx: Optional[ExplanationContext] = None, budget: int = 10_000, cf_sets: bool = False,
    ) -> "QueryOracle":
        """An honest provider: ``f`` decides and ``cfg`` explains. With
        ``cf_sets`` the provider hands out the raw counterfactual set instead
        of the attribution derived from it."""
        explainer = None
        if cfg is not None:
            if ctx is None:
                raise ValueError("an explainer needs a context")
            if cf_sets:
                from .counterfactual import diverse_counterfactuals

                def explainer(x):
                    return diverse_counterfactuals(
                        f, x, ctx.space, k=cfg.cf_k, sampler_width=cfg.cf_width,
                        budget=cfg.cf_budget, seed=cfg.seed, metric=cfg.cf_metric,
                    )
            else:
                def explainer(x):
                    return explain(f, x, cfg, ctx)
        return cls(f, explainer, budget)


@dataclass
class Verdict:
    name: str
    status: str  # pass | fail | inconclusive
    evidence: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"name": self.name, "status": self.status, "evidence": _jsonable(self.evidence)}


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, np.generic):
        return v.item()
    return v


# ---------------------------------------------------------------- explanation consistency


def check_counterfactual_validity(o: QueryOracle, x, claims: Optional[CounterfactualSet] = None) -> Verdict:
    """Re-query every claimed counterfactual; fail on the first one that does
    not actually change the decision. The decision on ``x`` itself is queried
    first and counts against the budget."""
    x = np.asarray(x, dtype=float)
    if claims is None:
        claims = o.explain(x)
    if not isinstance(claims, CounterfactualSet):
        raise TypeError("provider's explanation is not a counterfactual set")
    P = claims.points
    try:
        _, (y0,) = o.decide(x)
    except BudgetExhausted:
        return Verdict("counterfactual_validity", "inconclusive", {"x": x, "checked": 0, "claimed": len(P), "reason": "budget"})
    checked = 0
    while checked < len(P):
        n = min(len(P) - checked, o.remaining)
        if n == 0:
            return Verdict("counterfactual_validity", "inconclusive", {
                "x": x, "label_x": int(y0), "checked": checked, "claimed": len(P), "reason": "budget",
                "points": P[:checked],
            })
        scores, labels = o.decide(P[checked:checked + n])
        bad = np.flatnonzero(labels == y0)
        if bad.size:
            i = checked + int(bad[0])
            return Verdict("counterfactual_validity", "fail", {
                "x": x, "label_x": int(y0), "witness": P[i], "witness_index": i,
                "witness_score": float(scores[bad[0]]), "witness_label": int(labels[bad[0]]),
                "checked": i + 1, "claimed": len(P),
            })
        checked += n
    return Verdict("counterfactual_validity", "pass", {"x": x, "label_x": int(y0), "checked": checked, "claimed": len(P), "points": P})


def check_attribution_faithfulness(
    o: QueryOracle, x, reference: Dataset, m: int = 32, seed: int = 0, attribution: Optional[Attribution] = None,
) -> Verdict:
    """Ablation test: replacing the top-attributed feature with reference
    draws should move the score at least as much as replacing the
    bottom-attributed one."""
    x = np.asarray(x, dtype=float)
    if attribution is None:
        attribution = o.explain(x)
    if not isinstance(attribution, Attribution):
        raise TypeError("provider's explanation is not a feature attribution")
    mag = np.abs(attribution.values)
    top = int(np.argmax(mag))
    bottom = int(len(mag) - 1 - np.argmin(mag[::-1]))  # highest index among ties
    draws = reference.X[named_rng(seed, "ablation").integers(0, reference.n, m)]
    X_top = np.repeat(x[None, :], m, axis=0)
    X_top[:, top] = draws[:, top]
    X_bot = np.repeat(x[None, :], m, axis=0)
    X_bot[:, bottom] = draws[:, bottom]
    points = np.vstack([x[None, :], X_top, X_bot])
    try:
        scores, _ = o.decide(points)
    except BudgetExhausted:
        return Verdict("attribution_faithfulness", "inconclusive", {"x": x, "reason": "budget", "needed": len(points)})
    s0 = scores[0]
    d_top = float(np.mean(np.abs(scores[1:m + 1] - s0)))
    d_bot = float(np.mean(np.abs(scores[m + 1:] - s0)))
    ev = {"x": x, "top": top, "bottom": bottom, "delta_top": d_top, "delta_bottom": d_bot, "points": points, "claimed": attribution.values}
    if d_top < NOISE_FLOOR and d_bot < NOISE_FLOOR:
        return Verdict("attribution_faithfulness", "inconclusive", {**ev, "reason": "below noise floor"})
    return Verdict("attribution_faithfulness", "pass" if d_top >= d_bot else "fail", ev)


# ---------------------------------------------------------------- sanity filter


@dataclass
class SanityProbes:
    """Planted models an explainer config must behave sensibly on."""

    linear: DecisionFunction
    linear_feature: int
    constant: DecisionFunction
    trained: DecisionFunction
    randomized: DecisionFunction
    ctx: ExplanationContext
    instances: np.ndarray


def default_probes(reference: Dataset, seed: int = 0, n_instances: int = 4) -> SanityProbes:
    """Probes built from the examiner's reference: a linear model on the most
    label-correlated continuous feature, a constant model, a gbt and a gbt
    trained on permuted labels."""
    from .manipulate import plant_single_feature_model

    cont = [j for j in range(reference.d) if not reference.schema.cardinality[j] and np.ptp(reference.X[:, j]) > 0]
    if not cont:
        raise ValueError("reference needs at least one non-constant continuous feature")
    corr = [abs(np.corrcoef(reference.X[:, j], reference.y)[0, 1]) for j in cont]
    j = cont[int(np.nanargmax(corr))]
    perm = named_rng(seed, "sanity-permute").permutation(reference.n)
    randomized = train(reference.with_labels(reference.y[perm]), TrainConfig("gbt", seed=seed))
    trained = train(reference, TrainConfig("gbt", seed=seed))
    rows = named_rng(seed, "sanity-rows").choice(reference.n, min(n_instances, reference.n), replace=False)
    return SanityProbes(
        plant_single_feature_model(reference, j), j, ConstantModel(reference.d, 0.3),
        trained, randomized, ExplanationContext(reference), reference.X[np.sort(rows)],
    )


def sanity_filter(config: Union[ExplainerConfig, Callable], probes: SanityProbes) -> dict:
    """Reject explainer configs that ignore the model or attribute to a constant.

    ``config`` is an :class:`ExplainerConfig` or any callable ``(f, x) ->
    Attribution``.
    """
    if isinstance(config, ExplainerConfig):
        def run(f, x):
            return explain(f, x, config, probes.ctx)
    else:
        run = config
    reasons = []
    deltas, const_max, recovered = [], 0.0, []
    for x in probes.instances:
        a = normalize_l1(run(probes.trained, x))
        b = normalize_l1(run(probes.randomized, x))
        deltas.append(float(np.abs(a.values - b.values).sum()))
        const_max = max(const_max, float(np.abs(run(probes.constant, x).values).max()))
        recovered.append(run(probes.linear, x).top() == probes.linear_feature)
    mean_delta = float(np.mean(deltas))
    if mean_delta < 1e-6:
        reasons.append(f"insensitive to the model (mean l1 delta {mean_delta:.2e})")
    if const_max > 1e-9:
        reasons.append(f"nonzero attribution on a constant model (max {const_max:.2e})")
    return {
        "pass": not reasons,
        "reasons": reasons,
        "mean_l1_delta_trained_vs_randomized": mean_delta,
        "max_abs_on_constant": const_max,
        "linear_top_recovered": float(np.mean(recovered)),
    }


# ---------------------------------------------------------------- direct tests


def _in_hull(points, ref_z, radius) -> np.ndarray:
    d2 = ((points[:, None, :] - ref_z[None, :, :]) ** 2).sum(axis=2)
    return np.sqrt(d2.min(axis=1)) <= radius


def _segment(r, c, t, categorical):
    P = r[None, :] + t[:, None] * (c - r)[None, :]
    if categorical.any():
        P[:, categorical] = np.where(t[:, None] < 0.5, r[None, categorical], c[None, categorical])
    return P


def scaffold_probe(
    o: QueryOracle, train_like: Dataset, n_pairs: int = 100, seed: int = 0,
    grid: int = 16, refine: int = 10, max_queries: Optional[int] = None,
) -> dict:
    """Look for score jumps that happen only once a query leaves the data.

    Each pair is a real row r and a perturbation-style composite c of it
    (Gaussian noise in standardized units on the continuous features, as a
    local surrogate would draw; categorical codes are kept).
    The score is read on a grid along the segment r -> c. For pairs whose end
    scores differ by more than 0.5, the largest grid step is bisected
    ``refine`` times. A pair is flagged when that change is a true
    discontinuity (still > 0.5 across a step of 1/(grid * 2**refine)) while
    the interpolates inside the examiner's data hull stay within 0.1 of
    score(r). Smooth or finely stepped models cross the boundary gradually
    and are not flagged; a model switching to other behavior off-manifold
    jumps in one step.

    ``suspicion_score`` = flagged pairs / pairs with a > 0.5 change (0 when
    there are none). When the budget (or ``max_queries``) runs out the score
    covers the pairs done.
    """
    sc = fit_scaler(train_like)
    cat = train_like.schema.categorical_mask
    g = named_rng(seed, "scaffold-probe")
    idx = g.choice(train_like.n, size=min(n_pairs, train_like.n), replace=False)
    ref_z = sc.standardize(train_like.X)
    ref_z[:, cat] = 0.0
    # hull radius: 95th percentile of nearest-neighbour distances among sample rows
    sub = ref_z[g.choice(train_like.n, size=min(500, train_like.n), replace=False)]
    d2 = ((sub[:, None, :] - ref_z[None, :, :]) ** 2).sum(axis=2)
    d2[d2 == 0] = np.inf
    radius = float(np.quantile(np.sqrt(d2.min(axis=1)), 0.95))
    t_grid = np.linspace(0.0, 1.0, grid + 1)

    pairs, done = [], 0
    start = o.spent
    for i in idx:
        if max_queries is not None and o.spent - start + grid + 1 + refine > max_queries:
            break
        r = train_like.X[i]
        c = lime_perturb(r, sc, train_like.schema, 2, g)[1]
        c[cat] = r[cat]  # a categorical switch is a jump for any model
        try:
            P = _segment(r, c, t_grid, cat)
            s, _ = o.decide(P)
            total = abs(s[-1] - s[0])
            rec = {"row": int(i), "real": r, "composite": c, "score_real": float(s[0]), "score_composite": float(s[-1]), "jump_pair": bool(total > JUMP)}
            if total > JUMP:
                k = int(np.argmax(np.abs(np.diff(s))))
                lo, hi, s_lo, s_hi = t_grid[k], t_grid[k + 1], s[k], s[k + 1]
                for _ in range(refine):
                    mid = 0.5 * (lo + hi)
                    (s_mid,), _ = o.decide(_segment(r, c, np.array([mid]), cat))
                    if abs(s_mid - s_lo) >= abs(s_hi - s_mid):
                        hi, s_hi = mid, s_mid
                    else:
                        lo, s_lo = mid, s_mid
                step_jump = abs(s_hi - s_lo)
                Pz = sc.standardize(P)
                Pz[:, cat] = 0.0
                before = t_grid <= lo
                inside = _in_hull(Pz[before], ref_z, radius)
                drift = float(np.max(np.abs(s[before][inside] - s[0]))) if inside.any() else 0.0
                rec.update(
                    jump_at=float(lo), step_jump=float(step_jump), in_hull_drift=drift,
                    flagged=bool(step_jump > JUMP and drift < FLAT),
                )
            pairs.append(rec)
            done += 1
        except BudgetExhausted:
            break
    jumps = [p for p in pairs if p["jump_pair"]]
    flagged = [p for p in jumps if p["flagged"]]
    return {
        "suspicion_score": len(flagged) / len(jumps) if jumps else 0.0,
        "n_pairs": int(len(idx)),
        "pairs_done": done,
        "coverage": done / len(idx) if len(idx) else 0.0,
        "n_jump_pairs": len(jumps),
        "n_flagged": len(flagged),
        "hull_radius": radius,
        "evidence": pairs,
    }


def fairness_audit(o: QueryOracle, reference: Dataset, positive_is_favorable: bool = True) -> dict:
    """Demographic-parity and equal-opportunity gaps from decisions on the reference rows.

    With ``positive_is_favorable`` False the favorable outcome is label 0, for
    both the decisions and the true labels.
    """
    if reference.group is None:
        raise ValueError("reference has no group column")
    groups = sorted(set(reference.group.tolist()), key=str)
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    _, labels = o.decide(reference.X)
    fav = labels if positive_is_favorable else 1 - labels
    truth = reference.y if positive_is_favorable else 1 - reference.y
    rates, tprs, sizes, pos_sizes = {}, {}, {}, {}
    for gname in groups:
        m = reference.group == gname
        sizes[gname] = int(m.sum())
        rates[gname] = float(fav[m].mean())
        mp = m & (truth == 1)
        pos_sizes[gname] = int(mp.sum())
        tprs[gname] = float(fav[mp].mean()) if mp.any() else None
    dp = max(abs(rates[a] - rates[b]) for a, b in itertools.combinations(groups, 2))
    eo_pairs = [(a, b) for a, b in itertools.combinations(groups, 2) if tprs[a] is not None and tprs[b] is not None]
    not_computable = [[str(a), str(b)] for a, b in itertools.combinations(groups, 2) if (a, b) not in eo_pairs]
    eo = max((abs(tprs[a] - tprs[b]) for a, b in eo_pairs), default=None)
    return {
        "demographic_parity_gap": float(dp),
        "equal_opportunity_gap": None if eo is None else float(eo),
        "eo_not_computable": not_computable,
        "group_rates": {str(k): v for k, v in rates.items()},
        "group_true_positive_rates": {str(k): v for k, v in tprs.items()},
        "group_sizes": {str(k): v for k, v in sizes.items()},
        "group_positive_sizes": {str(k): v for k, v in pos_sizes.items()},
        "positive_is_favorable": positive_is_favorable,
        "decisions": labels.tolist(),
    }


# ---------------------------------------------------------------- full audit

CHECKS = ("fairness", "scaffold", "consistency")


@dataclass
class AuditReport:
    consistency_verdicts: list = field(default_factory=list)
    fairness: Optional[dict] = None
    scaffold_probe: Optional[dict] = None
    queries_spent: int = 0
    budget: int = 0
    skipped: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "direct_findings": {"fairness": _jsonable(self.fairness), "scaffold_probe": _jsonable(self.scaffold_probe)},
            "explanation_consistency": [v.to_json() for v in self.consistency_verdicts],
            "queries_spent": self.queries_spent,
            "budget": self.budget,
            "skipped": self.skipped,
        }

    def summary(self) -> str:
        lines = [f"queries spent: {self.queries_spent} / {self.budget}"]
        if self.fairness:
            f = self.fairness
            eo = "n/a" if f["equal_opportunity_gap"] is None else f"{f['equal_opportunity_gap']:.3f}"
            lines.append(f"demographic parity gap: {f['demographic_parity_gap']:.3f}   equal opportunity gap: {eo}")
            for g, r in f["group_rates"].items():
                lines.append(f"  group {g}: n={f['group_sizes'][g]} positive rate {r:.3f}")
        if self.scaffold_probe:
            p = self.scaffold_probe
            lines.append(
                f"scaffold suspicion: {p['suspicion_score']:.2f} "
                f"({p['n_flagged']}/{p['n_jump_pairs']} large jumps off-manifold, coverage {p['coverage']:.2f})"
            )
        counts = {}
        for v in self.consistency_verdicts:
            counts.setdefault(v.name, {}).setdefault(v.status, 0)
            counts[v.name][v.status] += 1
        for name, c in counts.items():
            lines.append(f"{name}: " + ", ".join(f"{k} {n}" for k, n in sorted(c.items())))
        for s in self.skipped:
            lines.append(f"skipped: {s}")
        return "\n".join(lines)


def audit(
    o: QueryOracle,
    reference: Dataset,
    checks=CHECKS,
    n_instances: int = 5,
    n_pairs: int = 100,
    m: int = 32,
    seed: int = 0,
) -> AuditReport:
    """Run the selected checks within the oracle's budget: direct fairness
    test first, then the scaffold probe, then consistency of the provider's
    explanations on ``n_instances`` reference rows."""
    unknown = set(checks) - set(CHECKS)
    if unknown:
        raise ValueError(f"unknown checks: {sorted(unknown)}")
    report = AuditReport(budget=o.budget)
    start = o.spent
    if o.remaining <= 0:
        report.skipped = [f"{c}: no budget" for c in CHECKS if c in checks]
        return report
    if "fairness" in checks:
        if reference.group is None:
            report.skipped.append("fairness: reference has no groups")
        elif o.remaining < reference.n:
            report.skipped.append(f"fairness: needs {reference.n} queries, {o.remaining} left")
        else:
            report.fairness = fairness_audit(o, reference)
    if "scaffold" in checks and o.remaining > 0:
        # keep enough for the consistency checks when they will run
        reserve = n_instances * (2 * m + 2) if "consistency" in checks and o._explain is not None else 0
        report.scaffold_probe = scaffold_probe(o, reference, n_pairs, seed, max_queries=max(o.remaining - reserve, 0))
    if "consistency" in checks:
        if o._explain is None:
            report.skipped.append("consistency: provider offers no explanations")
        else:
            rows = named_rng(seed, "audit-rows").choice(reference.n, min(n_instances, reference.n), replace=False)
            for i in np.sort(rows):
                x = reference.X[i]
                e = o.explain(x)
                if isinstance(e, CounterfactualSet):
                    report.consistency_verdicts.append(check_counterfactual_validity(o, x, e))
                else:
                    report.consistency_verdicts.append(check_attribution_faithfulness(o, x, reference, m, seed, e))
    report.queries_spent = o.spent - start
    return report
