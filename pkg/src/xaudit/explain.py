"""One entry point for every attribution method, driven by a serializable config."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from .attribution import Attribution
from .counterfactual import FeatureSpace, counterfactual_attribution, diverse_counterfactuals
from .data import Dataset, fit_scaler
from .lime import SurrogateConfig, explain_lime
from .models import DecisionFunction
from .shap import ValueFunctionSpec, shapley_exact, shapley_kernel

METHODS = ("shap-exact", "shap-kernel", "lime", "cf")


@dataclass(frozen=True)
class ExplainerConfig:
    method: str
    seed: int = 0
    # shapley
    value_fn: str = "interventional"
    n_reference: int = 128
    n_coalitions: int = 2048
    shap_ridge: float = 1e-6
    # surrogate
    bandwidth: Optional[float] = None
    bandwidth_factor: Optional[float] = None  # bandwidth = factor * sqrt(d)
    n_perturbations: int = 5000
    top_k: Optional[int] = None
    lime_ridge: float = 1.0
    # counterfactual
    cf_k: int = 30
    cf_budget: int = 20_000
    cf_metric: str = "mad_l1"
    cf_width: float = 0.5
    name: Optional[str] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.value_fn not in ("interventional", "baseline"):
            raise ValueError(f"value_fn must be interventional or baseline, not {self.value_fn!r}")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.method.startswith("shap"):
            return f"{self.method}/{self.value_fn}"
        if self.method == "lime":
            if self.bandwidth_factor is not None:
                return f"lime/bw={self.bandwidth_factor:g}sqrt(d)"
            return "lime" if self.bandwidth is None else f"lime/bw={self.bandwidth:g}"
        return f"cf/{self.cf_metric}"

    def with_seed(self, seed: int) -> "ExplainerConfig":
        return replace(self, seed=seed)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ExplainerConfig":
        return cls(**obj)


class ExplanationContext:
    """What an explainer may use besides the model: the reference data and
    statistics derived from it."""

    def __init__(self, reference: Dataset):
        self.reference = reference
        self.schema = reference.schema
        self.scaler = fit_scaler(reference)
        self.space = FeatureSpace.from_dataset(reference)

    def baseline_point(self) -> np.ndarray:
        X = self.reference.X
        point = np.median(X, axis=0)
        for j, card in enumerate(self.schema.cardinality):
            if card:
                point[j] = np.bincount(X[:, j].astype(int), minlength=card).argmax()
        return point


def explain(f: DecisionFunction, x, cfg: ExplainerConfig, ctx: ExplanationContext) -> Attribution:
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    if cfg.method in ("shap-exact", "shap-kernel"):
        if cfg.value_fn == "interventional":
            spec = ValueFunctionSpec.interventional(ctx.reference, cfg.n_reference, cfg.seed)
        else:
            spec = ValueFunctionSpec.baseline(ctx.baseline_point())
        if cfg.method == "shap-exact":
            return shapley_exact(f, x, spec)
        return shapley_kernel(f, x, spec, cfg.n_coalitions, cfg.shap_ridge, cfg.seed)
    if cfg.method == "lime":
        bw = cfg.bandwidth
        if cfg.bandwidth_factor is not None:
            bw = cfg.bandwidth_factor * np.sqrt(d)
        scfg = SurrogateConfig(cfg.n_perturbations, bw, cfg.top_k, cfg.lime_ridge, cfg.seed)
        return explain_lime(f, x, scfg, ctx.scaler, ctx.schema)
    cfs = diverse_counterfactuals(
        f, x, ctx.space, k=cfg.cf_k, sampler_width=cfg.cf_width, budget=cfg.cf_budget,
        seed=cfg.seed, metric=cfg.cf_metric,
    )
    if not cfs.items:
        return Attribution(
            np.zeros(d), float(f.score(x)), x, f"cf[k=0,metric={cfg.cf_metric}]",
            flags={"no_counterfactual": True},
        )
    return counterfactual_attribution(f, x, cfs, ctx.space)


def parse_method(name: str, **overrides) -> ExplainerConfig:
    """``shap-exact``, ``shap-kernel``, ``lime``, ``cf`` (alias ``dice``), with
    an optional ``:baseline`` / ``:interventional`` suffix for the Shapley methods."""
    name = name.strip()
    value_fn = None
    if ":" in name:
        name, value_fn = name.split(":", 1)
    if name == "dice":
        name = "cf"
    if value_fn:
        overrides["value_fn"] = value_fn
    return ExplainerConfig(name, **overrides)
