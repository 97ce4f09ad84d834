"""Provider-side manipulation experiments.

Each demo explains the same decision twice under two provider choices and
records both attributions, so the effect of a single lever (reference data,
method or parameters, decision boundary, scaffolding) can be inspected and
replayed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attribution import Attribution
from .compare import disagreement, normalize_l1
from .data import Dataset, make_two_group_toy, split
from .errors import XAuditError
from .explain import ExplainerConfig, ExplanationContext, explain
from .models import DecisionFunction, Encoder, LinearModel, SamplerSpec, TrainConfig, agreement_rate, scaffold, train
from .shap import ValueFunctionSpec, shapley_exact

log = logging.getLogger(__name__)

LEVERS = ("reference_swap", "method_choice", "parameter_choice", "boundary_choice", "scaffold")
OBJECTIVES = ("minimize", "move_argmax")


@dataclass
class ManipulationRecord:
    lever: str
    config_before: dict
    config_after: dict
    attribution_before: Attribution
    attribution_after: Attribution
    narrative: str
    metrics: dict = field(default_factory=dict)
    # live objects behind the record (not serialized)
    models: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.lever not in LEVERS:
            raise ValueError(f"unknown lever {self.lever!r}")
        if not np.array_equal(self.attribution_before.instance, self.attribution_after.instance):
            raise ValueError("before/after attributions must explain the same instance")

    @property
    def argmax_changed(self) -> bool:
        return self.attribution_before.top() != self.attribution_after.top()

    @property
    def l1_delta(self) -> float:
        return disagreement(self.attribution_before, self.attribution_after).l1_delta

    def to_json(self) -> dict:
        return {
            "lever": self.lever,
            "config_before": self.config_before,
            "config_after": self.config_after,
            "attribution_before": self.attribution_before.to_json(),
            "attribution_after": self.attribution_after.to_json(),
            "argmax_before": self.attribution_before.top(),
            "argmax_after": self.attribution_after.top(),
            "argmax_changed": self.argmax_changed,
            "l1_delta": self.l1_delta,
            "narrative": self.narrative,
            "metrics": self.metrics,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ManipulationRecord":
        return cls(
            obj["lever"], obj["config_before"], obj["config_after"],
            Attribution.from_json(obj["attribution_before"]), Attribution.from_json(obj["attribution_after"]),
            obj["narrative"], obj.get("metrics", {}),
        )


# ---------------------------------------------------------------- reference swap


DEFAULT_SWAP_SEED = 5


def reference_swap_demo(seed: int = DEFAULT_SWAP_SEED, reverse: bool = False, n_reference: Optional[int] = None) -> ManipulationRecord:
    """Interventional Shapley values for one decision on the two-group toy,
    once against the Group-1 rows only and once against the entire dataset.

    The gbt is trained on a 70% split; candidates are Group-1 test rows
    nearest the feature-1 boundary, then training rows. The first whose top
    feature moves from F1 to F2 is reported. ``n_reference`` ``None`` uses
    every reference row. ``reverse`` swaps which configuration counts as
    before/after.

    For a step-like classifier the two full-data attributions of a negative
    Group-1 point are equal in expectation, so which one wins is decided by
    the realized reference composition; ``metrics['margin']`` records it.
    """
    toy = make_two_group_toy(seed=seed)
    tr, te = split(toy, 0.3, seed)
    f = train(tr, TrainConfig("gbt", seed=seed))
    cap = n_reference or toy.n
    group1 = toy.subset(np.flatnonzero(toy.group == 1))
    spec_g1 = ValueFunctionSpec.interventional(group1, cap, seed)
    spec_all = ValueFunctionSpec.interventional(toy, cap, seed)
    common = {"method": "shap-exact", "value_fn": "interventional", "n_reference": n_reference, "seed": seed}
    cfg_g1 = {**common, "reference": "group 1"}
    cfg_all = {**common, "reference": "all"}

    tried = 0
    for pool_name, pool in (("test", te), ("train", tr)):
        rows = np.flatnonzero(pool.group == 1)
        rows = rows[np.argsort(np.abs(pool.X[rows, 0]), kind="stable")]
        for i in rows:
            x = pool.X[i]
            tried += 1
            a_g1 = shapley_exact(f, x, spec_g1)
            a_all = shapley_exact(f, x, spec_all)
            if not (a_g1.top() == 0 and a_all.top() == 1):
                continue
            before, after = (a_g1, a_all) if not reverse else (a_all, a_g1)
            cb, ca = (cfg_g1, cfg_all) if not reverse else (cfg_all, cfg_g1)
            frm, to = ("Group 1 only", "the entire dataset") if not reverse else ("the entire dataset", "Group 1 only")
            return ManipulationRecord(
                "reference_swap", cb, ca, before, after,
                narrative=(
                    f"Same model, same decision (score {float(f.score(x)):.3f}). Switching the reference "
                    f"data from {frm} to {to} moves the largest attribution from "
                    f"F{before.top() + 1} to F{after.top() + 1}. No explainer was tuned against the model."
                ),
                metrics={
                    "pool": pool_name, "row": int(i), "candidates_tried": tried,
                    "model_train_accuracy": f.training_report["train_accuracy"],
                    "margin": float(abs(a_all.values[1]) - abs(a_all.values[0])),
                },
            )
    raise XAuditError(f"no reference-swap flip among {tried} Group-1 candidates; toy construction looks wrong")


# ---------------------------------------------------------------- method / parameter shopping


def _objective(a: Attribution, j: int, objective: str) -> float:
    v = np.abs(normalize_l1(a).values)
    if objective == "minimize":
        return float(v[j])
    # negative once some other feature outranks j
    return float(v[j] - np.max(np.delete(v, j))) if v.size > 1 else float(v[j])


def method_shopping(
    f: DecisionFunction,
    x,
    candidates: list[ExplainerConfig],
    objective: str,
    feature: int,
    ctx: ExplanationContext,
    sanity_probes=None,
) -> ManipulationRecord:
    """Explain ``x`` with every candidate and contrast the one best for the
    provider's objective with the worst.

    ``objective`` is ``minimize`` (smallest normalized |phi_feature|) or
    ``move_argmax`` (push the top attribution off ``feature``). When
    ``sanity_probes`` are given, candidates failing the sanity filter are
    dropped first (and logged).
    """
    if not candidates:
        raise ValueError("need at least one candidate config")
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    x = np.asarray(x, dtype=float)
    if not 0 <= feature < x.shape[0]:
        raise ValueError(f"feature index {feature} out of range")
    if sanity_probes is not None:
        from .examiner import sanity_filter

        kept = []
        for c in candidates:
            verdict = sanity_filter(c, sanity_probes)
            if verdict["pass"]:
                kept.append(c)
            else:
                log.info("candidate %s rejected by sanity filter: %s", c.label, verdict["reasons"])
        if not kept:
            raise XAuditError("every candidate failed the sanity filter")
        candidates = kept

    evaluated = []
    for c in candidates:
        a = explain(f, x, c, ctx)
        evaluated.append((c, a, _objective(a, feature, objective)))
    values = [v for _, _, v in evaluated]
    best = int(np.argmin(values))
    worst = int(np.argmax(values))
    cb, ab, vb = evaluated[worst]
    ca, aa, va = evaluated[best]
    methods = {c.method for c, _, _ in evaluated}
    lever = "method_choice" if len(methods) > 1 else "parameter_choice"
    return ManipulationRecord(
        lever, cb.to_json(), ca.to_json(), ab, aa,
        narrative=(
            f"{len(evaluated)} candidate explainers; the provider reports {ca.label} "
            f"(objective {va:.3f} on F{feature + 1}) instead of {cb.label} ({vb:.3f}). "
            "This lever is explicit optimization over explainer choices; the unoptimized "
            "variants are the reference-swap and boundary comparisons."
        ),
        metrics={
            "objective": objective,
            "feature": feature,
            "log": [
                {"config": c.to_json(), "label": c.label, "objective_value": v, "argmax": a.top()}
                for c, a, v in evaluated
            ],
        },
    )


def boundary_choice(
    f: DecisionFunction, g: DecisionFunction, x, cfg: ExplainerConfig, ctx: ExplanationContext,
) -> ManipulationRecord:
    """Same explainer, two independently trained models that decide ``x`` alike."""
    x = np.asarray(x, dtype=float)
    if f.label(x) != g.label(x):
        raise ValueError("the two models decide this instance differently")
    a, b = explain(f, x, cfg, ctx), explain(g, x, cfg, ctx)
    return ManipulationRecord(
        "boundary_choice",
        {"model": getattr(f, "training_report", {}).get("config", f.kind), "explainer": cfg.to_json()},
        {"model": getattr(g, "training_report", {}).get("config", g.kind), "explainer": cfg.to_json()},
        a, b,
        narrative="Two models with the same decision here but differently shaped decision boundaries.",
    )


# ---------------------------------------------------------------- scaffolding


def plant_single_feature_model(ds: Dataset, feature: int, strength: float = 4.0) -> LinearModel:
    """Logistic scorer depending on one feature only, oriented to agree with the labels.

    A continuous feature gets slope ``strength`` per standard deviation with
    the boundary at its median; a categorical feature scores +/- ``strength``/2
    according to whether the code has an above-average positive rate.
    """
    enc = Encoder.fit(ds)
    card = ds.schema.cardinality
    offset = sum(c if c else 1 for c in card[:feature])
    w = np.zeros(enc.width)
    col = ds.X[:, feature]
    if card[feature]:
        codes = col.astype(int)
        rates = np.array([ds.y[codes == c].mean() if np.any(codes == c) else 0.0 for c in range(card[feature])])
        w[offset:offset + card[feature]] = np.where(rates > ds.y.mean(), strength / 2, -strength / 2)
        return LinearModel(enc, w, 0.0)
    z = (col - enc.mean[feature]) / enc.std[feature]
    sign = 1.0 if np.corrcoef(z, ds.y)[0, 1] >= 0 else -1.0
    w[offset] = sign * strength
    return LinearModel(enc, w, -sign * strength * float(np.median(z)))


def _pick_decoy_feature(ds: Dataset, j: int) -> int:
    best, best_c = None, np.inf
    for k in range(ds.d):
        if k == j or ds.schema.cardinality[k] or np.ptp(ds.X[:, k]) == 0:
            continue
        c = abs(np.corrcoef(ds.X[:, k], ds.y)[0, 1])
        if c < best_c:
            best, best_c = k, c
    if best is None:
        raise ValueError("no continuous feature available for the decoy")
    return best


def scaffold_demo(
    train_data: Dataset,
    feature: int,
    seed: int = 0,
    decoy_feature: Optional[int] = None,
    sampler: str = "lime",
    n_explain: int = 20,
    n_perturbations: int = 2000,
    decoy_equals_real: bool = False,
) -> ManipulationRecord:
    """Plant a model biased on ``feature``, hide it behind a scaffold, and
    compare what lime and kernel Shapley report with and without the scaffold.

    A quarter of ``train_data`` is held out: the scaffold is built on the
    rest, and the held-out rows measure deployment agreement with the biased
    model and serve as instances to explain.
    """
    if not 0 <= feature < train_data.d:
        raise ValueError(f"feature index {feature} out of range")
    fit_part, held_out = split(train_data, 0.25, seed)
    real = plant_single_feature_model(fit_part, feature)
    if decoy_equals_real:
        decoy, k = real, feature
    else:
        k = _pick_decoy_feature(fit_part, feature) if decoy_feature is None else decoy_feature
        decoy = plant_single_feature_model(fit_part, k)
    attacked = scaffold(real, decoy, fit_part, SamplerSpec(sampler), seed)
    deploy = agreement_rate(attacked, real, held_out)

    ctx = ExplanationContext(fit_part)
    methods = [
        ExplainerConfig("lime", seed=seed, n_perturbations=n_perturbations),
        ExplainerConfig("shap-kernel", seed=seed, n_coalitions=512, n_reference=64),
    ]
    rows = held_out.X[:n_explain]
    summary = {}
    exemplar = {}
    for cfg in methods:
        honest = [normalize_l1(explain(real, x, cfg, ctx)) for x in rows]
        hidden = [normalize_l1(explain(attacked, x, cfg, ctx)) for x in rows]
        phi_h = float(np.mean([abs(a.values[feature]) for a in honest]))
        phi_s = float(np.mean([abs(a.values[feature]) for a in hidden]))
        summary[cfg.method] = {
            "mean_abs_phi_unscaffolded": phi_h,
            "mean_abs_phi_scaffolded": phi_s,
            "suppression_ratio": phi_s / phi_h if phi_h > 0 else float("nan"),
            "top_is_feature_unscaffolded": float(np.mean([a.top() == feature for a in honest])),
            "top_is_feature_scaffolded": float(np.mean([a.top() == feature for a in hidden])),
        }
        exemplar[cfg.method] = (honest[0], hidden[0])
    before, after = exemplar["lime"]
    if attacked.detector_warning:
        log.warning("scaffold detector accuracy %.2f below 0.6", attacked.detector_accuracy)
    rec = ManipulationRecord(
        "scaffold",
        {"model": "planted", "feature": feature, "explainer": methods[0].to_json()},
        {"model": "scaffold", "feature": feature, "decoy_feature": k, "sampler": sampler, "seed": seed, "explainer": methods[0].to_json()},
        before, after,
        narrative=(
            f"The deployed model decides by F{feature + 1}; off-distribution queries are answered by a "
            f"decoy using F{k + 1}. Real-row agreement with the biased model: {deploy:.3f}. "
            f"Mean lime weight on F{feature + 1}: {summary['lime']['mean_abs_phi_unscaffolded']:.3f} without "
            f"the scaffold, {summary['lime']['mean_abs_phi_scaffolded']:.3f} with it."
        ),
        metrics={
            "deployment_agreement": deploy,
            "detector_accuracy": attacked.detector_accuracy,
            "detector_warning": bool(attacked.detector_warning),
            "explainers": summary,
            "n_explained": int(rows.shape[0]),
        },
        models={"scaffolded": attacked, "real": real, "decoy": decoy},
    )
    return rec
