"""Bundled synthetic tasks shaped like common fairness/explainability benchmarks.

Each generator is deterministic given its seed and mimics the dimension,
feature types and class balance of a well-known public dataset; none of them
contains real records.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset, FeatureSchema, make_two_group_toy
from .models import sigmoid


def _cat(rng, n, probs):
    return rng.choice(len(probs), size=n, p=np.asarray(probs) / np.sum(probs))


def adult_like(n: int = 2000, seed: int = 0) -> Dataset:
    """12 census-style features, ~25% positive (income over a threshold)."""
    rng = np.random.default_rng(seed)
    age = np.clip(np.round(rng.normal(39, 13, n)), 17, 90)
    workclass = _cat(rng, n, [0.7, 0.12, 0.1, 0.08])
    edu = np.clip(np.round(rng.normal(10, 2.6, n)), 1, 16)
    married = (rng.random(n) < sigmoid((age - 30) / 6) * 0.75).astype(int)
    marital = np.where(married == 1, 0, _cat(rng, n, [0.65, 0.35]) + 1)
    occupation = _cat(rng, n, [0.25, 0.2, 0.2, 0.2, 0.15])
    relationship = np.where(married == 1, _cat(rng, n, [0.88, 0.12]), _cat(rng, n, [0.5, 0.5]) + 2)
    race = _cat(rng, n, [0.85, 0.1, 0.05])
    sex = (rng.random(n) < 0.67).astype(int)
    gain = np.where(rng.random(n) < 0.08, np.round(np.exp(rng.normal(8.5, 1.0, n))), 0.0)
    loss = np.where(rng.random(n) < 0.05, np.round(rng.normal(1900, 300, n)), 0.0)
    hours = np.clip(np.round(rng.normal(40, 12, n)), 1, 99)
    country = _cat(rng, n, [0.9, 0.06, 0.04])
    occ_eff = np.array([1.0, 0.6, 0.0, -0.5, -0.8])
    logit = (
        -8.6 + 0.035 * age + 0.33 * edu + 1.9 * (marital == 0) + occ_eff[occupation]
        + 0.3 * sex + 2.6 * (gain > 5000) + 1.2 * (loss > 1500) + 0.028 * hours
        - 0.02 * np.maximum(age - 60, 0) ** 1.5 - 0.3 * (workclass == 3)
    )
    y = (rng.random(n) < sigmoid(logit)).astype(int)
    X = np.column_stack([age, workclass, edu, marital, occupation, relationship, race, sex, gain, loss, hours, country])
    schema = FeatureSchema(
        ("age", "workclass", "education_num", "marital_status", "occupation", "relationship",
         "race", "sex", "capital_gain", "capital_loss", "hours_per_week", "country"),
        (0, 4, 0, 3, 5, 4, 3, 2, 0, 0, 0, 3),
        (1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0),
    )
    return Dataset(schema, X, y, group=np.where(sex == 1, "male", "female"), name="adult_like")


def credit_like(n: int = 1000, seed: int = 0) -> Dataset:
    """20 credit-application features, ~70% good risk."""
    rng = np.random.default_rng(seed)
    checking = _cat(rng, n, [0.27, 0.27, 0.06, 0.4])
    duration = np.clip(np.round(rng.gamma(3.0, 7.0, n)), 4, 72)
    history = _cat(rng, n, [0.04, 0.05, 0.53, 0.09, 0.29])
    purpose = _cat(rng, n, [0.23, 0.1, 0.18, 0.28, 0.01, 0.02, 0.05, 0.01, 0.1, 0.02])
    amount = np.clip(np.round(duration * rng.lognormal(4.6, 0.5, n)), 250, 20000)
    savings = _cat(rng, n, [0.6, 0.1, 0.06, 0.05, 0.19])
    employment = _cat(rng, n, [0.06, 0.17, 0.34, 0.17, 0.26])
    installment = rng.integers(1, 5, n).astype(float)
    personal = _cat(rng, n, [0.05, 0.31, 0.55, 0.09])
    debtors = _cat(rng, n, [0.91, 0.04, 0.05])
    residence = rng.integers(1, 5, n).astype(float)
    prop = _cat(rng, n, [0.28, 0.23, 0.33, 0.16])
    age = np.clip(np.round(rng.gamma(6.0, 6.0, n)), 19, 75)
    plans = _cat(rng, n, [0.14, 0.05, 0.81])
    housing = _cat(rng, n, [0.18, 0.71, 0.11])
    credits = np.clip(rng.poisson(0.4, n) + 1, 1, 4).astype(float)
    job = _cat(rng, n, [0.02, 0.2, 0.63, 0.15])
    dependents = (rng.random(n) < 0.15).astype(float) + 1
    phone = _cat(rng, n, [0.6, 0.4])
    foreign = _cat(rng, n, [0.96, 0.04])
    logit = (
        0.55 + np.array([-0.9, -0.4, 0.3, 1.1])[checking] - 0.035 * (duration - 20)
        + np.array([-1.0, -0.9, 0.0, 0.2, 0.7])[history] - 0.00008 * (amount - 3000)
        + np.array([-0.4, 0.0, 0.2, 0.4, 0.6])[savings] + np.array([-0.3, -0.2, 0.0, 0.2, 0.3])[employment]
        - 0.2 * (installment - 2.5) + 0.012 * (age - 35) - 0.4 * (plans == 0) + 0.3 * (housing == 1)
        + np.array([0.0, -0.4, 0.2, 0.3, -0.2, -0.3, -0.5, 0.4, 0.3, -0.4])[purpose]
        + 0.6 * (foreign == 1) - 0.3 * (debtors == 1)
    )
    y = (rng.random(n) < sigmoid(logit)).astype(int)
    X = np.column_stack([
        checking, duration, history, purpose, amount, savings, employment, installment, personal, debtors,
        residence, prop, age, plans, housing, credits, job, dependents, phone, foreign,
    ])
    schema = FeatureSchema(
        ("checking_status", "duration", "credit_history", "purpose", "credit_amount", "savings", "employment",
         "installment_rate", "personal_status", "other_debtors", "residence_since", "property", "age",
         "other_plans", "housing", "existing_credits", "job", "dependents", "telephone", "foreign_worker"),
        (4, 0, 5, 10, 0, 5, 5, 0, 4, 3, 0, 4, 0, 3, 3, 0, 4, 0, 2, 2),
        (1.0,) * 20,
    )
    return Dataset(schema, X, y, name="credit_like")


def income_like(n: int = 2000, seed: int = 0) -> Dataset:
    """8 person-level features predicting an income threshold."""
    rng = np.random.default_rng(seed)
    age = np.clip(np.round(rng.normal(42, 14, n)), 17, 90)
    cow = _cat(rng, n, [0.7, 0.15, 0.1, 0.05])
    schl = np.clip(np.round(rng.normal(18, 3.5, n)), 1, 24)
    mar = _cat(rng, n, [0.5, 0.35, 0.15])
    occp = _cat(rng, n, [0.2, 0.2, 0.25, 0.2, 0.15])
    hours = np.clip(np.round(rng.normal(38, 12, n)), 1, 99)
    sex = _cat(rng, n, [0.52, 0.48])
    race = _cat(rng, n, [0.6, 0.25, 0.15])
    logit = (
        -8.5 + 0.05 * age - 0.0006 * (age - 45) ** 2 + 0.3 * schl + 0.7 * (mar == 0)
        + np.array([0.9, 0.5, 0.0, -0.4, -0.9])[occp] + 0.045 * hours - 0.35 * sex + np.array([0.0, 0.2, -0.3, 0.1])[cow]
    )
    y = (rng.random(n) < sigmoid(logit)).astype(int)
    X = np.column_stack([age, cow, schl, mar, occp, hours, sex, race])
    schema = FeatureSchema(
        ("age", "class_of_worker", "schooling", "marital", "occupation", "hours_per_week", "sex", "race"),
        (0, 4, 0, 3, 5, 0, 2, 3), (1.0,) * 8,
    )
    return Dataset(schema, X, y, group=np.where(sex == 1, "female", "male"), name="income_like")


def diabetes_like(n: int = 600, seed: int = 0) -> Dataset:
    """10 baseline measurements; label = progression above the median."""
    rng = np.random.default_rng(seed)
    age = np.clip(rng.normal(48, 13, n), 19, 79)
    sex = _cat(rng, n, [0.53, 0.47])
    bmi = np.clip(rng.normal(26.4, 4.4, n), 18, 42)
    bp = np.clip(rng.normal(94.6, 13.8, n) + 0.3 * (age - 48), 62, 133)
    s1 = rng.normal(189, 34, n)
    s2 = 0.85 * (s1 - 189) + rng.normal(115, 16, n)
    s3 = np.clip(rng.normal(50, 13, n) - 0.6 * (bmi - 26.4), 22, 99)
    s4 = np.clip(np.round(200 / s3, 2), 2, 9)
    s5 = rng.normal(4.64, 0.52, n) + 0.04 * (bmi - 26.4)
    s6 = np.clip(rng.normal(91, 11, n) + 0.5 * (bmi - 26.4), 58, 124)
    y_cont = (
        5.6 * (bmi - 26.4) / 4.4 + 2.4 * (bp - 94.6) / 13.8 + 3.2 * (s5 - 4.64) / 0.52
        - 0.8 * (s3 - 50) / 13 + 0.7 * (s6 - 91) / 11 - 0.4 * sex + rng.normal(0, 3.0, n)
    )
    y = (y_cont > np.median(y_cont)).astype(int)
    X = np.column_stack([age, sex, bmi, bp, s1, s2, s3, s4, s5, s6])
    X[:, [0, 2, 3, 4, 5, 6, 9]] = np.round(X[:, [0, 2, 3, 4, 5, 6, 9]], 1)
    X[:, 8] = np.round(X[:, 8], 3)
    schema = FeatureSchema(
        ("age", "sex", "bmi", "bp", "s1", "s2", "s3", "s4", "s5", "s6"),
        (0, 2, 0, 0, 0, 0, 0, 0, 0, 0),
        (0.1, 1.0, 0.1, 0.1, 0.1, 0.1, 0.1, 0.01, 0.001, 0.1),
    )
    return Dataset(schema, X, y, name="diabetes_like")


_CANCER_BASE = [
    # name, mean, spread, latent loading
    ("radius", 14.1, 3.5, 0.9),
    ("texture", 19.3, 4.3, 0.45),
    ("perimeter", 92.0, 24.3, 0.9),
    ("area", 655.0, 352.0, 0.85),
    ("smoothness", 0.096, 0.014, 0.4),
    ("compactness", 0.104, 0.053, 0.65),
    ("concavity", 0.089, 0.08, 0.75),
    ("concave_points", 0.049, 0.039, 0.85),
    ("symmetry", 0.181, 0.027, 0.35),
    ("fractal_dimension", 0.063, 0.007, 0.1),
]


def cancer_like(n: int = 600, seed: int = 0) -> Dataset:
    """30 strongly correlated cell-nucleus measurements (mean / se / worst of ten
    base quantities), ~37% malignant (label 1)."""
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < 0.37).astype(int)
    latent = rng.normal(0, 1, n) + np.where(y == 1, 2.1, -1.2)
    cols, names, precs = [], [], []
    for suffix, scale in (("mean", 1.0), ("se", 0.12), ("worst", 1.25)):
        for name, mu, sd, load in _CANCER_BASE:
            z = load * latent + np.sqrt(1 - load**2) * rng.normal(0, 1, n)
            if suffix == "se":
                z = 0.5 * z + np.sqrt(0.75) * rng.normal(0, 1, n)
            val = np.exp(np.log(mu * scale) + (sd / mu) * 0.8 * z)
            prec = 10.0 ** (np.floor(np.log10(mu * scale)) - 2)
            cols.append(np.round(val / prec) * prec)
            names.append(f"{name}_{suffix}")
            precs.append(float(prec))
    X = np.column_stack(cols)
    return Dataset(FeatureSchema.continuous(names, precs), X, y, name="cancer_like")


def planted_bias(n: int = 1500, seed: int = 0) -> Dataset:
    """Recidivism-style task with one label-driving feature.

    The label follows ``group_score`` (feature 4) only, so a model biased on it
    is easy to plant. ``unrelated`` (feature 6) is independent of everything
    and serves an innocuous decoy. Counts are integers and three columns are
    0/1 flags; all are declared continuous, as a generic tabular pipeline
    would see them.
    """
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 1, n)
    b = rng.normal(0, 1, n)
    age = np.clip(np.round(35 + 9 * a), 18, 75)
    priors = np.clip(np.round(np.exp(0.8 + 0.6 * b - 0.2 * a)), 0, 30)
    stay = np.round(2 * priors + 3 + rng.normal(0, 1.0, n))
    group_score = np.round(b + rng.normal(0, 0.15, n), 2)
    charge = (a + b + rng.normal(0, 0.3, n) > 0).astype(float)
    unrelated = rng.integers(0, 10, n).astype(float)
    flagged = (b + rng.normal(0, 0.3, n) > 0.3).astype(float)
    sex = (rng.random(n) < 0.8).astype(float)
    y = (group_score + rng.normal(0, 0.3, n) > 0).astype(int)
    X = np.column_stack([age, priors, stay, group_score, charge, unrelated, flagged, sex])
    schema = FeatureSchema.continuous(
        ["age", "priors_count", "length_of_stay", "group_score", "charge_degree", "unrelated", "two_year_flag", "sex"],
        [1.0, 1.0, 1.0, 0.01, 1.0, 1.0, 1.0, 1.0],
    )
    return Dataset(schema, X, y, group=np.where(group_score > 0, "A", "B"), name="planted_bias")


def blobs(n: int = 400, seed: int = 0, separation: float = 6.0) -> Dataset:
    """Two linearly separable Gaussian blobs in 2-D."""
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    X = rng.normal(0, 1, (y.size, 2)) + np.where(y[:, None] == 1, separation / 2, -separation / 2)
    return Dataset(FeatureSchema.continuous(["x1", "x2"], 1e-3), np.round(X, 3), y, name="blobs")


BUNDLED = {
    "adult12": adult_like,
    "credit20": credit_like,
    "income8": income_like,
    "diabetes10": diabetes_like,
    "cancer30": cancer_like,
    "planted8": planted_bias,
    "toy": lambda n=250, seed=0: make_two_group_toy(n, seed),
    "blobs": blobs,
}


def load_bundled(name: str, seed: int = 0, **kw) -> Dataset:
    try:
        gen = BUNDLED[name]
    except KeyError:
        raise KeyError(f"unknown bundled dataset {name!r}; choose from {', '.join(sorted(BUNDLED))}") from None
    return gen(seed=seed, **kw)
