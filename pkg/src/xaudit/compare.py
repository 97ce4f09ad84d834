"""Disagreement metrics between attributions and the experiments built on them."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .attribution import Attribution
from .data import Dataset
from .explain import ExplainerConfig, ExplanationContext, explain
from .models import DecisionFunction, agreement_rate

log = logging.getLogger(__name__)


def normalize_l1(a: Attribution) -> Attribution:
    """Scale to unit L1 norm; an all-zero attribution comes back unchanged with ``flags['zero']``."""
    total = np.abs(a.values).sum()
    flags = dict(a.flags)
    if total == 0:
        flags["zero"] = True
        return Attribution(a.values.copy(), a.base_value, a.instance, a.method_tag, flags, dict(a.info))
    flags["zero"] = False
    return Attribution(a.values / total, a.base_value, a.instance, a.method_tag, flags, dict(a.info))


def top_k(values, k: int) -> list[int]:
    """Indices of the k largest magnitudes, lower index first among ties."""
    order = np.argsort(-np.abs(np.asarray(values)), kind="stable")
    return [int(i) for i in order[:k]]


@dataclass
class DisagreementRecord:
    method_a: str
    method_b: str
    top1_match: bool
    topk_overlap: float
    rank_corr: float
    sign_agreement: float
    l1_delta: float
    instance: int = -1

    def as_dict(self) -> dict:
        return {
            "instance": self.instance,
            "method_a": self.method_a,
            "method_b": self.method_b,
            "top1_match": bool(self.top1_match),
            "topk_overlap": float(self.topk_overlap),
            "rank_corr": float(self.rank_corr),
            "sign_agreement": float(self.sign_agreement),
            "l1_delta": float(self.l1_delta),
        }


def _spearman_magnitudes(a, b) -> float:
    ma, mb = np.abs(a), np.abs(b)
    const_a, const_b = np.ptp(ma) == 0, np.ptp(mb) == 0
    if const_a or const_b:
        return 1.0 if const_a and const_b else 0.0
    return float(spearmanr(ma, mb).statistic)


def disagreement(a: Attribution, b: Attribution, k: int = 3, eps: float = 1e-12) -> DisagreementRecord:
    if a.d != b.d:
        raise ValueError(f"dimension mismatch: {a.d} vs {b.d}")
    a, b = normalize_l1(a), normalize_l1(b)
    va, vb = a.values, b.values
    k = min(k, a.d)
    overlap = len(set(top_k(va, k)) & set(top_k(vb, k))) / k
    both = (np.abs(va) > eps) & (np.abs(vb) > eps)
    sign = float(np.mean(np.sign(va[both]) == np.sign(vb[both]))) if both.any() else 1.0
    return DisagreementRecord(
        a.method_tag, b.method_tag,
        top1_match=a.top() == b.top(),
        topk_overlap=overlap,
        rank_corr=_spearman_magnitudes(va, vb),
        sign_agreement=sign,
        l1_delta=float(np.abs(va - vb).sum()),
    )


def _aggregate(records: list[DisagreementRecord]) -> dict:
    if not records:
        return {"n": 0}
    return {
        "n": len(records),
        "top1_match_rate": float(np.mean([r.top1_match for r in records])),
        "mean_topk_overlap": float(np.mean([r.topk_overlap for r in records])),
        "mean_rank_corr": float(np.mean([r.rank_corr for r in records])),
        "mean_sign_agreement": float(np.mean([r.sign_agreement for r in records])),
        "mean_l1_delta": float(np.mean([r.l1_delta for r in records])),
    }


@dataclass
class DisagreementReport:
    methods: list
    k: int
    records: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    attributions: dict = field(default_factory=dict)

    def pair(self, a: str, b: str) -> dict:
        return self.aggregates[f"{a} vs {b}"]

    def to_json(self) -> dict:
        return {
            "methods": self.methods,
            "k": self.k,
            "aggregates": self.aggregates,
            "records": [r.as_dict() for r in self.records],
            "failures": self.failures,
        }

    def to_csv(self) -> str:
        cols = ["instance", "method_a", "method_b", "top1_match", "topk_overlap", "rank_corr", "sign_agreement", "l1_delta"]
        lines = [",".join(cols)]
        for r in self.records:
            row = r.as_dict()
            lines.append(",".join(_csv_cell(row[c]) for c in cols))
        return "\n".join(lines) + "\n"


def _csv_cell(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    s = str(v)
    return f'"{s}"' if "," in s else s


def run_disagreement_experiment(
    f: DecisionFunction,
    test: Dataset,
    methods: list[ExplainerConfig],
    ctx: ExplanationContext,
    k: int = 3,
    keep_attributions: bool = False,
) -> DisagreementReport:
    """Explain every test row with every method and compare all method pairs."""
    if len(methods) < 2:
        raise ValueError("need at least two methods to compare")
    labels = [m.label for m in methods]
    # distinct labels so aggregates stay addressable even for repeated configs
    seen: dict[str, int] = {}
    for i, lab in enumerate(labels):
        if lab in seen:
            seen[lab] += 1
            labels[i] = f"{lab}#{seen[lab]}"
        else:
            seen[lab] = 0
    report = DisagreementReport(labels, k)
    per_pair: dict[str, list] = {f"{a} vs {b}": [] for a, b in itertools.combinations(labels, 2)}
    for i in range(test.n):
        x = test.X[i]
        atts = {}
        try:
            for lab, cfg in zip(labels, methods):
                atts[lab] = explain(f, x, cfg, ctx)
        except Exception as exc:  # an explainer failing on one row must not sink the run
            log.warning("instance %d skipped: %s", i, exc)
            report.failures.append({"instance": i, "error": f"{type(exc).__name__}: {exc}"})
            continue
        if keep_attributions:
            report.attributions[i] = atts
        for a, b in itertools.combinations(labels, 2):
            rec = disagreement(atts[a], atts[b], k)
            rec.method_a, rec.method_b, rec.instance = a, b, i
            report.records.append(rec)
            per_pair[f"{a} vs {b}"].append(rec)
    report.aggregates = {key: _aggregate(recs) for key, recs in per_pair.items()}
    return report


def run_boundary_experiment(
    f: DecisionFunction,
    g: DecisionFunction,
    test: Dataset,
    cfg: ExplainerConfig,
    ctx: ExplanationContext,
    k: int = 3,
) -> dict:
    """Same explainer on two models, restricted to rows where both decide alike."""
    lf, lg = f.label(test.X), g.label(test.X)
    agree = np.flatnonzero(lf == lg)
    if agree.size == 0:
        raise ValueError("the two models agree on no test instance")
    records = []
    for i in agree:
        rec = disagreement(explain(f, test.X[i], cfg, ctx), explain(g, test.X[i], cfg, ctx), k)
        rec.method_a, rec.method_b, rec.instance = "f", "g", int(i)
        records.append(rec)
    return {
        "explainer": cfg.to_json(),
        "agreement_rate": agreement_rate(f, g, test),
        "n_agreeing": int(agree.size),
        "aggregate": _aggregate(records),
        "records": [r.as_dict() for r in records],
    }
