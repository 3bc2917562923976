"""Distribution-shift statistics, ADWIN change detection and drift typing."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import norm

from .dataset import FeatureKind, TabularFrame, _class_index, infer_feature_kinds
from .errors import SchemaMismatch, UnsupportedFeatureKind

SMOOTHING = 1e-6
PSI_MODERATE = 0.10
PSI_MAJOR = 0.25


def _present(col) -> np.ndarray:
    s = pd.Series(col)
    return s[s.notna()].to_numpy()


def _is_numeric(values) -> bool:
    return pd.api.types.is_numeric_dtype(pd.Series(values).infer_objects())


def bin_proportions(ref_col, cur_col, bins: int = 10, categorical: Optional[bool] = None):
    """Reference and current bin proportions (unsmoothed).

    Continuous columns use reference quantile cut points; categorical columns
    one bin per category seen in either window. Missing values are dropped.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    ref = _present(ref_col)
    cur = _present(cur_col)
    if categorical is None:
        categorical = not (_is_numeric(ref) and _is_numeric(cur))
    if categorical:
        cats = sorted(set(map(str, ref)) | set(map(str, cur)))
        rc = pd.Series(list(map(str, ref))).value_counts()
        cc = pd.Series(list(map(str, cur))).value_counts()
        p = np.array([rc.get(c, 0) for c in cats], dtype=float)
        q = np.array([cc.get(c, 0) for c in cats], dtype=float)
    else:
        ref = ref.astype(float)
        cur = cur.astype(float)
        cuts = np.unique(np.quantile(ref, np.linspace(0, 1, bins + 1)[1:-1]))
        p = np.bincount(np.searchsorted(cuts, ref, side="right"), minlength=len(cuts) + 1).astype(float)
        q = np.bincount(np.searchsorted(cuts, cur, side="right"), minlength=len(cuts) + 1).astype(float)
    p = p / p.sum() if p.sum() else p
    q = q / q.sum() if q.sum() else q
    return p, q


def _smooth(p, eps=SMOOTHING):
    p = np.asarray(p, dtype=float)
    return (p + eps) / (p + eps).sum()


def psi_from_proportions(p, q, eps: float = SMOOTHING) -> float:
    p, q = _smooth(p, eps), _smooth(q, eps)
    return float(max(0.0, np.sum((p - q) * np.log(p / q))))


def kl_from_proportions(p, q, eps: float = SMOOTHING) -> float:
    p, q = _smooth(p, eps), _smooth(q, eps)
    return float(max(0.0, np.sum(p * np.log(p / q))))


def psi(ref_col, cur_col, bins: int = 10, categorical: Optional[bool] = None) -> float:
    """Population stability index; symmetric in its two arguments for categorical bins."""
    return psi_from_proportions(*bin_proportions(ref_col, cur_col, bins, categorical))


def kl_binned(ref_col, cur_col, bins: int = 10, categorical: Optional[bool] = None) -> float:
    """KL(reference || current) over the same bins as :func:`psi`."""
    return kl_from_proportions(*bin_proportions(ref_col, cur_col, bins, categorical))


def _continuous_pair(ref_col, cur_col):
    ref, cur = _present(ref_col), _present(cur_col)
    if not (_is_numeric(ref) and _is_numeric(cur)):
        raise UnsupportedFeatureKind("statistic needs a continuous column")
    if len(ref) == 0 or len(cur) == 0:
        raise ValueError("both windows need at least one value")
    return np.sort(ref.astype(float)), np.sort(cur.astype(float))


def wasserstein1_empirical(ref_col, cur_col) -> float:
    """Integral of |F_ref - F_cur| over the merged support."""
    ref, cur = _continuous_pair(ref_col, cur_col)
    grid = np.sort(np.concatenate([ref, cur]))
    widths = np.diff(grid)
    f_ref = np.searchsorted(ref, grid[:-1], side="right") / len(ref)
    f_cur = np.searchsorted(cur, grid[:-1], side="right") / len(cur)
    return float(np.sum(np.abs(f_ref - f_cur) * widths))


def ks_stat(ref_col, cur_col) -> float:
    ref, cur = _continuous_pair(ref_col, cur_col)
    grid = np.concatenate([ref, cur])
    f_ref = np.searchsorted(ref, grid, side="right") / len(ref)
    f_cur = np.searchsorted(cur, grid, side="right") / len(cur)
    return float(np.max(np.abs(f_ref - f_cur)))


def psi_verdict(value: float) -> str:
    if value < PSI_MODERATE:
        return "stable"
    if value <= PSI_MAJOR:
        return "moderate"
    return "major"


@dataclass
class FeatureDriftStats:
    feature: str
    psi: float
    kl: float
    wasserstein1: Optional[float]
    ks: Optional[float]
    verdict: str

    def to_dict(self) -> dict:
        return asdict(self)


def feature_drift(name, ref_col, cur_col, kind: FeatureKind, bins: int = 10) -> FeatureDriftStats:
    categorical = kind != FeatureKind.CONTINUOUS
    p, q = bin_proportions(ref_col, cur_col, bins, categorical)
    value = psi_from_proportions(p, q)
    w1 = ks = None
    if not categorical:
        w1 = wasserstein1_empirical(ref_col, cur_col)
        ks = ks_stat(ref_col, cur_col)
    return FeatureDriftStats(name, value, kl_from_proportions(p, q), w1, ks, psi_verdict(value))


class AdwinDetector:
    """ADWIN change detector over an exponential histogram of buckets.

    Row ``i`` of the histogram holds buckets of ``2**i`` values, at most
    ``max_buckets`` per row; each bucket keeps its sum and sum of squared
    deviations so means and variances of any split are exact merges.
    Single writer; read snapshots between updates.
    """

    def __init__(self, delta: float = 0.002, max_buckets: int = 5, min_window: int = 5):
        if not 0 < delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        self.delta = delta
        self.max_buckets = max_buckets
        self.min_window = min_window
        self.rows: list = []  # rows[i] = [[total, m2], ...], oldest first
        self.width = 0
        self.total = 0.0
        self.variance = 0.0  # sum of squared deviations over the window
        self.drift_count = 0
        self.n_seen = 0

    @property
    def mean(self) -> float:
        return self.total / self.width if self.width else 0.0

    def buckets(self):
        """(count, total, m2) from oldest to newest."""
        for i in range(len(self.rows) - 1, -1, -1):
            for total, m2 in self.rows[i]:
                yield 2**i, total, m2

    def _insert(self, x: float):
        if self.width:
            mean = self.total / self.width
            self.variance += self.width * (x - mean) ** 2 / (self.width + 1)
        self.width += 1
        self.total += x
        if not self.rows:
            self.rows.append([])
        self.rows[0].append([x, 0.0])
        i = 0
        while len(self.rows[i]) > self.max_buckets:
            (t1, v1), (t2, v2) = self.rows[i][0], self.rows[i][1]
            del self.rows[i][:2]
            n = 2**i
            merged = [t1 + t2, v1 + v2 + n * n * (t1 / n - t2 / n) ** 2 / (2 * n)]
            if i + 1 == len(self.rows):
                self.rows.append([])
            self.rows[i + 1].append(merged)
            i += 1

    def _drop_oldest(self):
        i = len(self.rows) - 1
        total, m2 = self.rows[i].pop(0)
        n = 2**i
        self.width -= n
        self.total -= total
        if self.width:
            mu_b = total / n
            mu_w = self.total / self.width
            self.variance -= m2 + n * self.width * (mu_b - mu_w) ** 2 / (n + self.width)
            self.variance = max(self.variance, 0.0)
        else:
            self.variance = 0.0
        while self.rows and not self.rows[-1]:
            self.rows.pop()

    def _cut_found(self) -> bool:
        if self.width < 2 * self.min_window:
            return False
        var = self.variance / self.width
        log_term = math.log(2.0 * math.log(self.width) / self.delta)
        n0, t0 = 0, 0.0
        for count, total, _ in self.buckets():
            n0 += count
            t0 += total
            n1 = self.width - n0
            if n1 < self.min_window:
                break
            if n0 < self.min_window:
                continue
            t1 = self.total - t0
            inv_m = 1.0 / n0 + 1.0 / n1
            eps = math.sqrt(2.0 * inv_m * var * log_term) + (2.0 / 3.0) * inv_m * log_term
            if abs(t0 / n0 - t1 / n1) > eps:
                return True
        return False

    def update(self, value: float) -> str:
        value = float(value)
        if not math.isfinite(value):
            raise ValueError("ADWIN values must be finite")
        self.n_seen += 1
        self._insert(value)
        changed = False
        while self._cut_found():
            self._drop_oldest()
            changed = True
        if changed:
            self.drift_count += 1
            return "drift_detected"
        return "no_change"


def adwin_update(detector: AdwinDetector, value: float) -> str:
    return detector.update(value)


def adwin_scan(values, delta: float = 0.002) -> list:
    """Indices (0-based) of the stream positions where ADWIN fired."""
    det = AdwinDetector(delta)
    return [i for i, v in enumerate(values) if det.update(v) == "drift_detected"]


@dataclass
class DriftTypeReport:
    covariate: bool
    prior: bool
    concept: bool
    posterior: bool
    joint: bool
    evidence: dict = field(default_factory=dict)
    partial: bool = False

    @property
    def any_drift(self) -> bool:
        return self.joint

    def to_dict(self) -> dict:
        return asdict(self)


def check_schema(reference: TabularFrame, current: TabularFrame):
    if reference.columns != current.columns:
        raise SchemaMismatch(f"columns differ: {reference.columns} vs {current.columns}")
    diff = [c for c in reference.columns if reference.kinds[c] != current.kinds[c]]
    if diff:
        raise SchemaMismatch(f"column kinds differ for {diff}")


def cap_categories(ref_col, cur_col, k: int):
    """Keep the ``k - 1`` most frequent categories of both windows together; pool the rest as ``other``.

    Ranking on the pooled counts avoids favouring categories that happen to be
    over-represented in one window.
    """
    ref = pd.Series(ref_col).dropna().astype(str)
    cur = pd.Series(cur_col).dropna().astype(str)
    counts = pd.concat([ref, cur]).value_counts()
    order = sorted(counts.index, key=lambda c: (-counts[c], c))
    if len(set(ref) | set(cur)) <= k:
        return ref, cur
    keep = set(order[: k - 1])
    other = "\x00other"
    return ref.where(ref.isin(keep), other), cur.where(cur.isin(keep), other)


def two_proportion_z(errors_a: int, n_a: int, errors_b: int, n_b: int) -> float:
    pooled = (errors_a + errors_b) / (n_a + n_b)
    se = math.sqrt(pooled * (1 - pooled) * (1 / n_a + 1 / n_b))
    if se == 0:
        return 0.0
    return (errors_b / n_b - errors_a / n_a) / se


def classify_drift(
    reference: TabularFrame,
    current: TabularFrame,
    target_column: Optional[str] = None,
    oracle=None,
    feature_columns: Optional[Sequence[str]] = None,
    bins: int = 10,
    class_bins: int = 5,
    concept_alpha: float = 0.01,
    predicted=None,
) -> DriftTypeReport:
    """Flag covariate, prior, concept, posterior and joint drift between two windows.

    Concept drift is read off a two-sided two-proportion z-test on the oracle's
    error rate; posterior drift off per-class feature PSI. ``predicted`` may
    carry already-computed class indices for (reference rows, current rows),
    in which case the oracle is only consulted for its class list.
    """
    check_schema(reference, current)
    if feature_columns is None:
        feature_columns = [c for c in reference.columns if c != target_column]
    feature_columns = list(feature_columns)
    kinds = infer_feature_kinds(TabularFrame(reference.data[feature_columns], reference.kinds))
    evidence: dict = {}
    features = [
        feature_drift(f, reference.column(f), current.column(f), kinds[f], bins) for f in feature_columns
    ]
    evidence["features"] = [s.to_dict() for s in features]
    covariate = any(s.verdict != "stable" for s in features)

    labelled = (
        target_column is not None
        and target_column in current.columns
        and current.column(target_column).notna().any()
        and reference.column(target_column).notna().any()
    )
    prior = concept = posterior = False
    partial = False
    if not labelled:
        partial = True
        evidence["missing_labels"] = True
    else:
        y_ref = reference.column(target_column)
        y_cur = current.column(target_column)
        target_categorical = not pd.api.types.is_numeric_dtype(y_ref) or y_ref.nunique() <= 50
        label_psi = psi(y_ref, y_cur, bins, categorical=target_categorical)
        evidence["label_psi"] = label_psi
        prior = label_psi >= PSI_MODERATE

        if oracle is not None:
            rm = y_ref.notna().to_numpy()
            cm = y_cur.notna().to_numpy()
            classes = list(oracle.spec.classes)
            if predicted is not None:
                pred_ref = np.asarray(predicted[0])[rm]
                pred_cur = np.asarray(predicted[1])[cm]
            else:
                pred_ref = np.argmax(oracle.predict_proba(oracle.input_matrix(reference.data[rm])), axis=1)
                pred_cur = np.argmax(oracle.predict_proba(oracle.input_matrix(current.data[cm])), axis=1)
            err_ref = int((pred_ref != _class_index(y_ref[rm], classes)).sum())
            err_cur = int((pred_cur != _class_index(y_cur[cm], classes)).sum())
            z = two_proportion_z(err_ref, int(rm.sum()), err_cur, int(cm.sum()))
            critical = float(norm.ppf(1 - concept_alpha / 2))
            evidence["error_rate_reference"] = err_ref / rm.sum()
            evidence["error_rate_current"] = err_cur / cm.sum()
            evidence["error_rate_z"] = z
            evidence["error_rate_critical_z"] = critical
            concept = abs(z) > critical
        else:
            evidence["concept"] = "not evaluated: no model supplied"

        if target_categorical:
            per_class = {}
            ref_labels = y_ref.astype(str)
            cur_labels = y_cur.astype(str)
            for c in sorted(set(ref_labels[y_ref.notna()]) & set(cur_labels[y_cur.notna()])):
                rsel = (ref_labels == c) & y_ref.notna()
                csel = (cur_labels == c) & y_cur.notna()
                worst = 0.0
                worst_feature = None
                for f in feature_columns:
                    r_col, c_col = reference.column(f)[rsel], current.column(f)[csel]
                    categorical = kinds[f] != FeatureKind.CONTINUOUS
                    if categorical:
                        # same resolution as the continuous columns
                        r_col, c_col = cap_categories(r_col, c_col, class_bins)
                    value = psi(r_col, c_col, class_bins, categorical=categorical)
                    if value > worst:
                        worst, worst_feature = value, f
                per_class[c] = {"max_psi": worst, "feature": worst_feature}
                posterior = posterior or worst >= PSI_MODERATE
            evidence["per_class_psi"] = per_class
    joint = covariate or prior or concept or posterior
    return DriftTypeReport(covariate, prior, concept, posterior, joint, evidence, partial)
