"""Group fairness metrics, EEOC checks and ECOA adverse-action reasons."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from .dataset import FeatureKind, PredictionSet, TaskType, ValidationDataset
from .errors import DataError, NotAdverse, SingleGroup
from .uncertainty import ece

DI_THRESHOLD = 0.80
MIN_GROUP_SHARE = 0.02
# Inclusive thresholds, with slack for rates built from integer counts.
_TOL = 1e-12

DEFAULT_THRESHOLDS = {
    "difference": 0.10,
    "ratio_low": 0.80,
    "ratio_high": 1.25,
    "ece_gap": 0.05,
    "generalized_entropy_index": 0.25,
    "theil_index": 0.25,
    "knn_consistency": 0.80,
}


def _rate(num, den):
    return num / den if den > 0 else None


@dataclass
class GroupConfusion:
    group_value: object
    n: int
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def selection_rate(self):
        return _rate(self.tp + self.fp, self.n)

    @property
    def tpr(self):
        return _rate(self.tp, self.tp + self.fn)

    @property
    def fpr(self):
        return _rate(self.fp, self.fp + self.tn)

    @property
    def ppv(self):
        return _rate(self.tp, self.tp + self.fp)

    @property
    def fnr(self):
        return _rate(self.fn, self.fn + self.tp)

    @property
    def accuracy(self):
        return _rate(self.tp + self.tn, self.n)

    @property
    def treatment_ratio(self):
        return _rate(self.fn, self.fp)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["group_value"] = str(self.group_value)
        for name in ("selection_rate", "tpr", "fpr", "ppv", "fnr", "accuracy"):
            out[name] = getattr(self, name)
        return out


@dataclass
class FairnessMetricResult:
    metric_name: str
    kind: str  # difference | ratio | gap | index
    per_group: dict
    reference_group: Optional[str]
    disparity: Optional[float]
    threshold: object
    verdict: str  # pass | fail | undefined
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ComplianceFinding:
    rule: str  # EEOC_80 | EEOC_Q21 | ECOA_REASONS
    attribute: str
    detail: dict
    violated: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _binary(arr, name):
    arr = np.asarray(arr)
    if not np.isin(arr, (0, 1)).all():
        raise DataError(f"{name} must be binary 0/1 labels")
    return arr.astype(np.int64)


def group_confusions(y, yhat, groups) -> list:
    """Confusion counts per distinct group value, in sorted group order."""
    y = _binary(y, "y")
    yhat = _binary(yhat, "yhat")
    groups = np.asarray(groups, dtype=object)
    if not (len(y) == len(yhat) == len(groups)):
        raise DataError("y, yhat and groups must have equal length")
    values = sorted(set(groups.tolist()), key=str)
    if len(values) < 2:
        raise SingleGroup(f"need at least 2 groups, found {values}")
    out = []
    for g in values:
        m = groups == g
        yt, yp = y[m], yhat[m]
        out.append(
            GroupConfusion(
                group_value=g,
                n=int(m.sum()),
                tp=int(((yt == 1) & (yp == 1)).sum()),
                fp=int(((yt == 0) & (yp == 1)).sum()),
                tn=int(((yt == 0) & (yp == 0)).sum()),
                fn=int(((yt == 1) & (yp == 0)).sum()),
            )
        )
    return out


def default_reference(confusions: Sequence[GroupConfusion]) -> str:
    """Privileged group: highest selection rate, first in group order on ties."""
    best = max(confusions, key=lambda c: (c.selection_rate or 0.0))
    return str(best.group_value)


def _by_name(confusions):
    return {str(c.group_value): c for c in confusions}


def _resolve_reference(confusions, reference_group):
    groups = _by_name(confusions)
    ref = default_reference(confusions) if reference_group is None else str(reference_group)
    if ref not in groups:
        raise DataError(f"reference group {ref!r} not present")
    return groups, ref


def disparate_impact(confusions, reference_group=None, threshold: float = DI_THRESHOLD) -> FairnessMetricResult:
    """Lowest ratio of a group's selection rate to the reference group's."""
    groups, ref = _resolve_reference(confusions, reference_group)
    ref_rate = groups[ref].selection_rate
    per_group = {}
    if not ref_rate:
        return FairnessMetricResult(
            "disparate_impact", "ratio", {g: None for g in groups}, ref, None, threshold, "undefined",
            note="reference group has zero selection rate",
        )
    for g, c in groups.items():
        per_group[g] = c.selection_rate / ref_rate
    others = [v for g, v in per_group.items() if g != ref]
    di = min(others)
    verdict = "pass" if di >= threshold - _TOL else "fail"
    return FairnessMetricResult("disparate_impact", "ratio", per_group, ref, di, threshold, verdict)


def _difference_metric(name, confusions, ref, rate: Callable, threshold):
    groups = _by_name(confusions)
    values = {g: rate(c) for g, c in groups.items()}
    if any(v is None for v in values.values()):
        return FairnessMetricResult(name, "difference", {g: None for g in groups}, ref, None, threshold, "undefined",
                                    note="a rate has a zero denominator")
    per_group = {g: values[g] - values[ref] for g in groups}
    others = [per_group[g] for g in groups if g != ref]
    disparity = max(others, key=abs)
    verdict = "pass" if abs(disparity) <= threshold + _TOL else "fail"
    return FairnessMetricResult(name, "difference", per_group, ref, disparity, threshold, verdict)


def _ratio_metric(name, confusions, ref, rate: Callable, low, high):
    groups = _by_name(confusions)
    values = {g: rate(c) for g, c in groups.items()}
    if any(v is None for v in values.values()) or values[ref] == 0:
        return FairnessMetricResult(name, "ratio", {g: None for g in groups}, ref, None, [low, high], "undefined",
                                    note="a rate has a zero denominator")
    per_group = {g: values[g] / values[ref] for g in groups}
    others = [per_group[g] for g in groups if g != ref]
    if any(v == 0 for v in others):
        disparity = 0.0
    else:
        disparity = max(others, key=lambda v: abs(math.log(v)))
    verdict = "pass" if low - _TOL <= disparity <= high + _TOL else "fail"
    return FairnessMetricResult(name, "ratio", per_group, ref, disparity, [low, high], verdict)


def _equalized_odds(confusions, ref, threshold):
    groups = _by_name(confusions)
    r = groups[ref]
    if any(c.tpr is None or c.fpr is None for c in groups.values()):
        return FairnessMetricResult("equalized_odds", "gap", {g: None for g in groups}, ref, None, threshold,
                                    "undefined", note="a rate has a zero denominator")
    per_group = {g: max(abs(c.tpr - r.tpr), abs(c.fpr - r.fpr)) for g, c in groups.items()}
    disparity = max(per_group.values())
    verdict = "pass" if disparity <= threshold + _TOL else "fail"
    return FairnessMetricResult("equalized_odds", "gap", per_group, ref, disparity, threshold, verdict)


def generalized_entropy(benefits, alpha: float = 2.0) -> float:
    b = np.asarray(benefits, dtype=float)
    mu = b.mean()
    if len(b) == 0 or mu == 0:
        return 0.0
    r = b / mu
    if alpha == 1:
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(r > 0, r * np.log(r), 0.0)
        return float(terms.mean())
    if alpha == 0:
        return float(-np.log(r).mean())
    return float(((r**alpha) - 1).mean() / (alpha * (alpha - 1)))


def knn_consistency(X, yhat, k: int = 5) -> np.ndarray:
    """Per-row ``1 - |yhat_i - mean(yhat over the k nearest other rows)|``."""
    X = np.asarray(X, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    n = len(X)
    k = min(k, n - 1)
    if k < 1:
        return np.ones(n)
    sd = X.std(axis=0)
    Z = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    _, idx = cKDTree(Z).query(Z, k=k + 1)
    # drop self; with duplicate points self may not be first, so filter by index
    neigh = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        row = [j for j in idx[i] if j != i][:k]
        neigh[i] = row
    return 1.0 - np.abs(yhat - yhat[neigh].mean(axis=1))


def _index_metric(name, values_by_group, overall, threshold, higher_is_better=False):
    verdict = "pass" if (overall >= threshold - _TOL if higher_is_better else overall <= threshold + _TOL) else "fail"
    return FairnessMetricResult(name, "index", values_by_group, None, overall, threshold, verdict)


def fairness_metrics_from_arrays(
    y,
    yhat,
    groups,
    proba=None,
    X=None,
    reference_group=None,
    thresholds: Optional[dict] = None,
    knn_k: int = 5,
) -> list:
    """The 15-metric registry over binary labels, predictions and group labels.

    ``proba`` (n x 2) enables the within-group calibration gap; ``X`` enables
    kNN consistency. Metrics lacking their input come back ``undefined``.
    """
    th = {**DEFAULT_THRESHOLDS, **(thresholds or {})}
    confusions = group_confusions(y, yhat, groups)
    groups_arr = np.asarray(groups, dtype=object)
    names = [str(c.group_value) for c in confusions]
    _, ref = _resolve_reference(confusions, reference_group)
    d = th["difference"]
    lo, hi = th["ratio_low"], th["ratio_high"]
    results = [
        _difference_metric("statistical_parity_difference", confusions, ref, lambda c: c.selection_rate, d),
        disparate_impact(confusions, ref, lo),
        _difference_metric("equal_opportunity_difference", confusions, ref, lambda c: c.tpr, d),
        _equalized_odds(confusions, ref, d),
        _difference_metric(
            "average_odds_difference", confusions, ref,
            lambda c: None if c.tpr is None or c.fpr is None else 0.5 * (c.tpr + c.fpr), d,
        ),
        _difference_metric("predictive_parity_difference", confusions, ref, lambda c: c.ppv, d),
        _difference_metric("fnr_difference", confusions, ref, lambda c: c.fnr, d),
        _difference_metric("fpr_difference", confusions, ref, lambda c: c.fpr, d),
        _difference_metric("accuracy_difference", confusions, ref, lambda c: c.accuracy, d),
        _ratio_metric("treatment_equality_ratio", confusions, ref, lambda c: c.treatment_ratio, lo, hi),
    ]
    y = np.asarray(y, dtype=np.int64)
    yhat = np.asarray(yhat, dtype=np.int64)
    if proba is not None:
        proba = np.asarray(proba, dtype=float)
        eces = {}
        for g, c in zip(names, confusions):
            m = np.array([str(v) == g for v in groups_arr])
            eces[g] = ece(proba[m], y[m])[0]
        confusions_like = [GroupConfusion(g, 1, 0, 0, 0, 0) for g in names]
        res = _difference_metric("ece_gap", confusions_like, ref, lambda c: eces[str(c.group_value)], th["ece_gap"])
    else:
        res = FairnessMetricResult("ece_gap", "difference", {g: None for g in names}, ref, None, th["ece_gap"],
                                   "undefined", note="no probabilities supplied")
    results.append(res)
    results.append(_ratio_metric("selection_rate_ratio", confusions, ref, lambda c: c.selection_rate, lo, hi))

    benefits = yhat - y + 1
    gei_groups, theil_groups = {}, {}
    for g in names:
        m = np.array([str(v) == g for v in groups_arr])
        gei_groups[g] = generalized_entropy(benefits[m], 2.0)
        theil_groups[g] = generalized_entropy(benefits[m], 1.0)
    results.append(_index_metric("generalized_entropy_index", gei_groups, generalized_entropy(benefits, 2.0),
                                 th["generalized_entropy_index"]))
    results.append(_index_metric("theil_index", theil_groups, generalized_entropy(benefits, 1.0), th["theil_index"]))

    if X is not None:
        cons = knn_consistency(X, yhat, knn_k)
        per = {}
        for g in names:
            m = np.array([str(v) == g for v in groups_arr])
            per[g] = float(cons[m].mean())
        results.append(_index_metric("knn_consistency", per, float(cons.mean()), th["knn_consistency"], True))
    else:
        results.append(FairnessMetricResult("knn_consistency", "index", {g: None for g in names}, None, None,
                                            th["knn_consistency"], "undefined", note="no feature matrix supplied"))
    return results


def protected_groups(ds: ValidationDataset, attribute: str, bands: int = 4) -> np.ndarray:
    """Group label per row. Continuous attributes are cut into quantile bands."""
    col = ds.frame.column(attribute)
    if ds.feature_kinds.get(attribute) == FeatureKind.CONTINUOUS:
        edges = np.unique(np.nanquantile(col.to_numpy(dtype=float), np.linspace(0, 1, bands + 1)))
        cut = pd.cut(col, edges, include_lowest=True, duplicates="drop")
        labels = cut.astype(str).to_numpy(dtype=object)
        labels[col.isna().to_numpy()] = None
        return labels
    out = col.to_numpy(dtype=object).copy()
    for i, v in enumerate(out):
        if v is None or (isinstance(v, float) and math.isnan(v)):
            out[i] = None
        elif isinstance(v, float) and v.is_integer():
            out[i] = str(int(v))
        else:
            out[i] = str(v)
    return out


def _binary_arrays(ds: ValidationDataset, preds: PredictionSet, attribute: str):
    if ds.task_type is not TaskType.BINARY:
        raise DataError("fairness metrics need a binary classification task")
    y = ds.y_index()
    groups = protected_groups(ds, attribute)
    keep = (y >= 0) & np.array([g is not None for g in groups])
    return y[keep], np.asarray(preds.labels_pred)[keep], groups[keep], keep


def compute_fairness_metrics(ds, preds, attribute, reference_group=None, thresholds=None) -> list:
    if attribute not in ds.protected_attributes:
        raise DataError(f"{attribute!r} is not a protected attribute")
    y, yhat, groups, keep = _binary_arrays(ds, preds, attribute)
    X = ds.model_input()[keep]
    return fairness_metrics_from_arrays(
        y, yhat, groups, proba=np.asarray(preds.proba)[keep], X=X, reference_group=reference_group,
        thresholds=thresholds,
    )


def check_eeoc_80(ds, preds, reference_groups: Optional[dict] = None) -> list:
    findings = []
    for attr in ds.protected_attributes:
        y, yhat, groups, _ = _binary_arrays(ds, preds, attr)
        try:
            confusions = group_confusions(y, yhat, groups)
        except SingleGroup:
            findings.append(ComplianceFinding("EEOC_80", attr, {"status": "single_group"}, False))
            continue
        res = disparate_impact(confusions, (reference_groups or {}).get(attr))
        detail = {
            "status": res.verdict,
            "disparate_impact": res.disparity,
            "reference_group": res.reference_group,
            "selection_rates": {str(c.group_value): c.selection_rate for c in confusions},
            "threshold": DI_THRESHOLD,
        }
        if res.note:
            detail["note"] = res.note
        findings.append(ComplianceFinding("EEOC_80", attr, detail, res.verdict == "fail"))
    return findings


def group_shares(groups) -> dict:
    groups = pd.Series(np.asarray(groups, dtype=object))
    counts = groups.value_counts(sort=False)
    n = int(counts.sum())
    return {str(k): int(v) / n for k, v in sorted(counts.items(), key=lambda kv: str(kv[0]))}


def check_question21(ds, min_share: float = MIN_GROUP_SHARE) -> list:
    findings = []
    for attr in ds.protected_attributes:
        groups = protected_groups(ds, attr)
        groups = groups[np.array([g is not None for g in groups])]
        shares = group_shares(groups)
        below = sorted(g for g, s in shares.items() if s < min_share - _TOL)
        findings.append(
            ComplianceFinding(
                "EEOC_Q21", attr, {"shares": shares, "min_share": min_share, "below_minimum": below}, bool(below)
            )
        )
    return findings


def adverse_action_reasons(oracle, row, k: int, means, adverse_class: int = 0, method: str = "auto",
                           feature_names: Optional[Sequence[str]] = None, proba=None) -> list:
    """Features pushing ``row`` toward the adverse class, strongest first.

    Linear models use ``w_adv . (x - mean)``; other models (or ``method="occlusion"``)
    use the drop in adverse probability when a feature is reset to its mean.
    Only features with a positive push are returned. ``proba`` skips re-scoring
    the row when its probabilities are already known.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(row, dtype=float).ravel()
    means = np.asarray(means, dtype=float).ravel()
    names = list(feature_names or oracle.feature_order)
    proba = oracle.predict_proba(x[None, :])[0] if proba is None else np.asarray(proba, dtype=float)
    if int(np.argmax(proba)) != adverse_class:
        raise NotAdverse("row was not assigned the adverse class")
    if method == "auto":
        method = "linear" if oracle.differentiable else "occlusion"
    if method == "linear":
        body = oracle.spec.body
        if body.reduced:
            w_adv = body.weights[0] if adverse_class == 1 else -body.weights[0]
        else:
            others = [c for c in range(body.weights.shape[0]) if c != adverse_class]
            w_adv = body.weights[adverse_class] - body.weights[others].mean(axis=0)
        contrib = w_adv * (x - means)
    else:
        occluded = np.repeat(x[None, :], len(x), axis=0)
        occluded[np.arange(len(x)), np.arange(len(x))] = means
        contrib = proba[adverse_class] - oracle.predict_proba(occluded)[:, adverse_class]
    order = sorted((j for j in range(len(x)) if contrib[j] > 0), key=lambda j: (-contrib[j], j))
    return [(names[j], float(contrib[j])) for j in order[:k]]


def ecoa_findings(ds, preds, max_rows: int = 5, k: int = 4, adverse_class: int = 0) -> ComplianceFinding:
    """Reason codes for the first ``max_rows`` adverse decisions."""
    X = ds.model_input()
    means = np.nanmean(X, axis=0)
    adverse = np.flatnonzero(np.asarray(preds.labels_pred) == adverse_class)[:max_rows]
    rows = []
    empty = []
    for i in adverse:
        reasons = adverse_action_reasons(ds.model, X[i], k, means, adverse_class, proba=preds.proba[i])
        rows.append({"row": int(i), "reasons": [{"feature": f, "contribution": c} for f, c in reasons]})
        if not reasons:
            empty.append(int(i))
    detail = {"adverse_class": ds.classes[adverse_class], "notices": rows, "rows_without_reasons": empty}
    return ComplianceFinding("ECOA_REASONS", "*", detail, bool(empty))
