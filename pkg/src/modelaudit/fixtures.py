"""Deterministic toy credit data with planted fairness, slice and calibration structure.

Planted by construction:

* model approvals 37% for ``gender == F`` and 50% for ``gender == M`` (DI 0.74),
  spread evenly over age within each gender;
* every model confidence lies in [sigmoid(1.4), sigmoid(2.2)], about
  [0.802, 0.900]; outside the weak slice labels agree with the prediction
  slightly more often than that, so that each confidence level is calibrated
  over the whole table;
* the slice ``gender == F AND age < 25 AND amount > 5000`` (12% of rows) has 38%
  of its labels flipped, so accuracy there is about 0.62 against about 0.85;
* exactly 40% of rows are under 25 and exactly half request more than 5000, so
  decile cut points fall between the planted boundaries.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd

from .dataset import TabularFrame, FeatureKind, write_table
from .oracle import logreg_document, save_model_spec

TARGET = "approved"
MODEL_FEATURES = [
    "age", "income", "amount", "credit_score", "debt_ratio", "employment_years", "num_accounts", "home_owner",
]
COLUMNS = ["gender", "age", "income", "amount", "credit_score", "debt_ratio", "employment_years",
           "num_accounts", "home_owner", "purpose", TARGET]

# standardized-unit weights: z = b + sum w * (x - center) / scale
_CENTER = {"age": 40.0, "income": 55000.0, "amount": 6000.0, "credit_score": 650.0, "debt_ratio": 0.3,
           "employment_years": 8.0, "num_accounts": 5.0, "home_owner": 0.5}
_SCALE = {"age": 12.0, "income": 20000.0, "amount": 4000.0, "credit_score": 50.0, "debt_ratio": 0.15,
          "employment_years": 6.0, "num_accounts": 3.0, "home_owner": 0.5}
_WEIGHT = {"age": 0.1, "income": 0.6, "amount": -0.2, "credit_score": 1.5, "debt_ratio": -0.5,
           "employment_years": 0.3, "num_accounts": 0.1, "home_owner": 0.2}
_BIAS = 0.0

SELECTION_RATES = {"F": 0.37, "M": 0.50}
SLICE_FLIP_RATE = 0.38
_MARGIN_LO, _MARGIN_HI = 1.4, 2.2


def credit_logreg_document() -> dict:
    w = [_WEIGHT[f] / _SCALE[f] for f in MODEL_FEATURES]
    b = _BIAS - sum(_WEIGHT[f] * _CENTER[f] / _SCALE[f] for f in MODEL_FEATURES)
    return logreg_document([w], [b], MODEL_FEATURES, classes=[0, 1], name="toy-credit-logreg")


def _even_pick(count: int, k: int) -> np.ndarray:
    """Boolean mask choosing ``k`` of ``count`` positions evenly spaced."""
    pos = np.arange(count)
    return np.floor((pos + 1) * k / count) > np.floor(pos * k / count)


# row shares of the (gender, age band) cells and of high requests inside them
_YOUNG_F = 0.24
_YOUNG_M = 0.16
_HIGH_IN_SLICE = 0.5


def _cells(n):
    """Row ranges of the four (gender, young) cells and their high-amount counts."""
    n_f = n // 2
    young_f = int(round(_YOUNG_F * n))
    young_m = int(round(_YOUNG_M * n))
    ranges = [(0, young_f), (young_f, n_f), (n_f, n_f + young_m), (n_f + young_m, n)]
    slice_high = int(round(_HIGH_IN_SLICE * young_f))
    rest_high = n // 2 - slice_high
    rest_rows = n - young_f
    highs = [slice_high]
    for lo, hi in ranges[1:3]:
        highs.append(int(round(rest_high * (hi - lo) / rest_rows)))
    highs.append(n // 2 - sum(highs))
    return n_f, ranges, highs


def generate_credit(seed: int = 0, n: int = 1000, shift: bool = False, plant_slice: bool = True) -> pd.DataFrame:
    """Toy credit table. ``shift=True`` moves income, debt and credit history (covariate drift only)."""
    if n < 100 or n % 50:
        raise ValueError("n must be a multiple of 50, at least 100")
    rng = np.random.default_rng(seed)
    n_f, ranges, highs = _cells(n)
    gender = np.array(["F"] * n_f + ["M"] * (n - n_f), dtype=object)
    young = np.zeros(n, dtype=bool)
    for lo, hi in (ranges[0], ranges[2]):
        young[lo:hi] = True
    # exactly half of all rows request more than 5000, half of the young women among them
    high = np.zeros(n, dtype=bool)
    for (lo, hi), k in zip(ranges, highs):
        high[rng.choice(np.arange(lo, hi), size=k, replace=False)] = True

    age = np.where(young, rng.integers(18, 25, n), 25 + np.minimum(rng.gamma(2.0, 8.0, n), 45).astype(int))
    age[np.flatnonzero(young)[0]] = 24
    age[np.flatnonzero(~young)[0]] = 25
    amount = np.where(
        high,
        np.round(np.clip(5010 + rng.gamma(2.0, 2000.0, n), 5010, 20000), -1),
        np.round(rng.uniform(500, 4990, n), -1),
    )
    income_scale = 1.6 if shift else 1.0
    income = np.round(income_scale * np.exp(rng.normal(np.log(50000), 0.35, n)), -2)
    debt_ratio = np.round(rng.uniform(0.05, 0.6, n) * (0.6 if shift else 1.0), 3)
    employment_years = np.round(rng.gamma(2.0, 3.5, n) * (1.8 if shift else 1.0)).astype(float)
    num_accounts = rng.integers(0, 13, n).astype(float)
    home_owner = (rng.random(n) < 0.45).astype(float)
    purpose = rng.choice(np.array(["car", "education", "home", "other"], dtype=object), n)

    # planted approvals, evenly spread over age within each gender
    approve = np.zeros(n, dtype=bool)
    for g, rate in SELECTION_RATES.items():
        idx = np.flatnonzero(gender == g)
        order = idx[np.lexsort((rng.random(len(idx)), age[idx]))]
        approve[order] = _even_pick(len(order), int(round(rate * len(idx))))
    margin = rng.uniform(_MARGIN_LO, _MARGIN_HI, n)
    z = np.where(approve, margin, -margin)

    cols = {"age": age.astype(float), "income": income, "amount": amount, "debt_ratio": debt_ratio,
            "employment_years": employment_years, "num_accounts": num_accounts, "home_owner": home_owner}
    rest = _BIAS + sum(_WEIGHT[f] * (cols[f] - _CENTER[f]) / _SCALE[f] for f in cols)
    credit_score = _CENTER["credit_score"] + _SCALE["credit_score"] * (z - rest) / _WEIGHT["credit_score"]

    confidence = 1.0 / (1.0 + np.exp(-margin))
    in_slice = (gender == "F") & (age < 25) & (amount > 5000)
    share = in_slice.mean()
    flips = int(round(SLICE_FLIP_RATE * in_slice.sum())) if plant_slice else 0
    # outside the slice, agreement is raised just enough that each confidence level
    # stays calibrated over the whole table
    lift = share / (1 - share) * (confidence - (1 - flips / max(in_slice.sum(), 1))) if plant_slice else 0.0
    agree = rng.random(n) < np.clip(confidence + lift, 0.0, 1.0)
    if plant_slice:
        idx = np.flatnonzero(in_slice)
        # flips sit at the low-amount, older corner of the slice so that narrowing
        # it along amount or age never yields a weaker subgroup
        amount_rank = np.argsort(np.argsort(amount[idx], kind="stable"), kind="stable")
        age_rank = np.argsort(np.argsort(-age[idx], kind="stable"), kind="stable")
        order = idx[np.lexsort((idx, amount_rank + age_rank))]
        agree[idx] = True
        agree[order[:flips]] = False
    label = np.where(agree, approve, ~approve).astype(int)

    df = pd.DataFrame(
        {
            "gender": gender,
            "age": age.astype(float),
            "income": income,
            "amount": amount,
            "credit_score": np.round(credit_score, 6),
            "debt_ratio": debt_ratio,
            "employment_years": employment_years,
            "num_accounts": num_accounts,
            "home_owner": home_owner,
            "purpose": purpose,
            TARGET: label.astype(float),
        },
        columns=COLUMNS,
    )
    perm = rng.permutation(n)
    return df.iloc[perm].reset_index(drop=True)


def credit_frame(seed: int = 0, n: int = 1000, **kw) -> TabularFrame:
    df = generate_credit(seed, n, **kw)
    kinds = {c: FeatureKind.CATEGORICAL if df[c].dtype == object else FeatureKind.CONTINUOUS for c in df.columns}
    return TabularFrame(df, kinds)


def planted_slice_mask(df: pd.DataFrame) -> np.ndarray:
    return ((df["gender"] == "F") & (df["age"] < 25) & (df["amount"] > 5000)).to_numpy()


def gbm_document(df: pd.DataFrame, seed: int = 0, n_trees: int = 10, depth: int = 3) -> dict:
    """Boosted-tree spec fitted with scikit-learn on the model features."""
    from sklearn.ensemble import GradientBoostingClassifier

    X = df[MODEL_FEATURES].to_numpy(dtype=float)
    y = df[TARGET].to_numpy(dtype=int)
    gbm = GradientBoostingClassifier(n_estimators=n_trees, max_depth=depth, learning_rate=0.3, random_state=seed)
    gbm.fit(X, y)
    return gbm_to_document(gbm, MODEL_FEATURES, name="toy-credit-gbm")


def gbm_to_document(gbm, feature_order, name=None) -> dict:
    """Export a fitted binary ``GradientBoostingClassifier`` as a tree-ensemble spec."""
    # the default init estimator predicts the training class prior
    prior = float(gbm.init_.class_prior_[1])
    base = float(np.log(prior / (1 - prior)))
    trees = []
    for est in gbm.estimators_[:, 0]:
        t = est.tree_
        nodes = []
        for i in range(t.node_count):
            if t.children_left[i] == -1:
                nodes.append({"leaf": float(gbm.learning_rate * t.value[i, 0, 0])})
            else:
                nodes.append({
                    "feature": int(t.feature[i]),
                    "threshold": float(t.threshold[i]),
                    "left": int(t.children_left[i]),
                    "right": int(t.children_right[i]),
                })
        trees.append({"nodes": nodes})
    doc = {
        "version": "1",
        "kind": "tree_ensemble",
        "classes": [int(c) for c in gbm.classes_],
        "body": {"trees": trees, "base_score": base, "output_transform": "sigmoid",
                 "feature_order": list(feature_order)},
    }
    if name:
        doc["name"] = name
    return doc


def default_chain_config() -> dict:
    return {
        "stages": [
            {"n_features": 8, "l2": 0.0, "alpha": 0.5, "temperature": "auto"},
            {"n_features": 5, "l2": 0.01, "alpha": 0.5, "temperature": "auto"},
            {"n_features": 3, "l2": 0.01, "alpha": 0.5, "temperature": "auto"},
        ],
        "epochs": 300,
        "learning_rate": 0.5,
        "seed": 0,
        "soft_scale_T2": True,
        "k_nn": 25,
        "validation_fraction": 0.3,
    }


def write_fixture(out_dir, seed: int = 0, n: int = 1000) -> dict:
    """Write the credit table, a drifted copy, model specs and a chain config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frame = credit_frame(seed, n)
    paths = {
        "data": out / "credit.csv",
        "shifted": out / "credit_shifted.csv",
        "logreg": out / "credit_logreg.json",
        "gbm": out / "credit_gbm.json",
        "chain": out / "chain.json",
    }
    write_table(frame, paths["data"])
    write_table(credit_frame(seed + 1, n, shift=True, plant_slice=False), paths["shifted"])
    save_model_spec(credit_logreg_document(), paths["logreg"])
    save_model_spec(gbm_document(frame.data, seed), paths["gbm"])
    paths["chain"].write_text(json.dumps(default_chain_config(), indent=2) + "\n", encoding="utf-8")
    return {k: str(v) for k, v in paths.items()}
