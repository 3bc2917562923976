"""Gaussian copula synthesis for mixed tabular data.

Each column is mapped to normal scores (ranks for numeric columns, cumulative
probability midpoints for categories), the scores' Pearson correlation,
corrected for the attenuation that discretizing a Gaussian causes, is the
dependence model, and sampling pushes correlated normals back through each
column's empirical inverse CDF.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy.stats import norm, rankdata

from .dataset import FeatureKind, TabularFrame, infer_feature_kinds
from .errors import AllMissing, SchemaMismatch
from .resilience import ks_stat

PSD_FLOOR = 1e-10
MIN_ROWS = 10


@dataclass
class Marginal:
    """Empirical marginal: sorted values for numeric columns, a probability table otherwise."""

    name: str
    kind: str  # "continuous" | "categorical" | "constant"
    values: list  # sorted observations, category labels, or [constant]
    probs: Optional[list] = None
    missing_rate: float = 0.0

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.probs)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "values": list(self.values),
                "probs": None if self.probs is None else list(self.probs), "missing_rate": self.missing_rate}


@dataclass
class CopulaModel:
    columns: list
    marginals: list
    correlation: np.ndarray
    cholesky: np.ndarray
    n_fit: int

    @property
    def fingerprint(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "marginals": [m.to_dict() for m in self.marginals],
            "correlation": self.correlation.tolist(),
            "n_fit": self.n_fit,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CopulaModel":
        marginals = [Marginal(**m) for m in doc["marginals"]]
        corr = np.asarray(doc["correlation"], dtype=float)
        return cls(list(doc["columns"]), marginals, corr, _cholesky(corr), int(doc["n_fit"]))


def _category_sort_key(v):
    return (0, float(v), "") if isinstance(v, (int, float, np.number)) else (1, 0.0, str(v))


def _categorical_marginal(name, values) -> Marginal:
    cats, counts = np.unique(np.asarray(values, dtype=object).astype(str), return_counts=True)
    # keep the original objects (numbers stay numbers) in a stable, type-aware order
    originals = {}
    for v in values:
        originals.setdefault(str(v), v)
    pairs = sorted(((originals[c], k) for c, k in zip(cats, counts)), key=lambda p: _category_sort_key(p[0]))
    total = float(sum(k for _, k in pairs))
    labels = [p[0].item() if isinstance(p[0], np.generic) else p[0] for p in pairs]
    return Marginal(name, "categorical", labels, [k / total for _, k in pairs])


def _present(col: pd.Series) -> np.ndarray:
    return ~col.isna().to_numpy()


def _continuous_scores(x: np.ndarray) -> np.ndarray:
    n = len(x)
    return norm.ppf((rankdata(x, method="average") - 0.5) / n)


def _categorical_scores(values, marginal: Marginal) -> np.ndarray:
    cum = marginal.cumulative()
    mids = norm.ppf(np.clip(cum - np.asarray(marginal.probs) / 2.0, 1e-12, 1 - 1e-12))
    lookup = {str(v): m for v, m in zip(marginal.values, mids)}
    return np.array([lookup.get(str(v), 0.0) for v in values])


def normal_scores(frame: pd.DataFrame, marginals: list) -> np.ndarray:
    """Column-wise normal scores; missing cells and constants score 0."""
    out = np.zeros((len(frame), len(marginals)))
    for j, m in enumerate(marginals):
        col = frame[m.name]
        present = _present(col)
        if m.kind == "constant" or not present.any():
            continue
        if m.kind == "continuous":
            out[present, j] = _continuous_scores(col.to_numpy(dtype=float)[present])
        else:
            out[present, j] = _categorical_scores(col.to_numpy(dtype=object)[present], m)
    return out


def nearest_psd_correlation(corr: np.ndarray, floor: float = PSD_FLOOR) -> np.ndarray:
    """Clip eigenvalues at ``floor`` and rescale back to a unit diagonal."""
    corr = (corr + corr.T) / 2.0
    vals, vecs = np.linalg.eigh(corr)
    if vals.min() >= floor:
        return corr
    fixed = (vecs * np.clip(vals, floor, None)) @ vecs.T
    d = np.sqrt(np.diag(fixed))
    fixed = fixed / np.outer(d, d)
    np.fill_diagonal(fixed, 1.0)
    return (fixed + fixed.T) / 2.0


def _cholesky(corr: np.ndarray) -> np.ndarray:
    jitter = 0.0
    for _ in range(8):
        try:
            return np.linalg.cholesky(corr + jitter * np.eye(len(corr)))
        except np.linalg.LinAlgError:
            jitter = max(jitter * 10.0, 1e-12)
    raise np.linalg.LinAlgError("correlation matrix could not be factorized")


def score_correlation(scores: np.ndarray, constant: np.ndarray) -> np.ndarray:
    d = scores.shape[1]
    corr = np.eye(d)
    live = np.flatnonzero(~constant)
    if len(live) > 1:
        sub = np.corrcoef(scores[:, live], rowvar=False)
        corr[np.ix_(live, live)] = np.nan_to_num(sub)
        np.fill_diagonal(corr, 1.0)
    return corr


def attenuation(m: Marginal) -> float:
    """corr(midpoint_score(Z), Z) for a standard normal Z cut at the category boundaries.

    Midpoint scores of a discretized Gaussian correlate less than the latent
    variable does; dividing observed score correlations by these factors
    recovers the latent correlation to first order.
    """
    if m.kind != "categorical":
        return 1.0
    probs = np.asarray(m.probs, dtype=float)
    cum = np.cumsum(probs)
    edges = norm.ppf(np.clip(np.concatenate([[0.0], cum]), 0.0, 1.0))
    mids = norm.ppf(np.clip(cum - probs / 2.0, 1e-12, 1 - 1e-12))
    dens = norm.pdf(edges)  # pdf(+-inf) = 0
    cov = float(np.sum(mids * (dens[:-1] - dens[1:])))
    mean = float(np.sum(probs * mids))
    var = float(np.sum(probs * mids ** 2) - mean ** 2)
    return cov / np.sqrt(var) if var > 0 else 1.0


def latent_correlation(score_corr: np.ndarray, marginals: list) -> np.ndarray:
    a = np.array([attenuation(m) for m in marginals])
    latent = np.clip(score_corr / np.outer(a, a), -1.0, 1.0)
    np.fill_diagonal(latent, 1.0)
    return latent


def fit_copula(frame: TabularFrame, kinds: Optional[dict] = None) -> CopulaModel:
    """Empirical marginals plus the latent normal-score correlation (PSD-repaired)."""
    if frame.row_count < MIN_ROWS:
        raise ValueError(f"need at least {MIN_ROWS} rows to fit a copula, got {frame.row_count}")
    kinds = kinds or infer_feature_kinds(frame)
    df = frame.data
    marginals = []
    for c in frame.columns:
        col = df[c]
        present = _present(col)
        if not present.any():
            raise AllMissing(c)
        missing_rate = float(1.0 - present.mean())
        observed = col[present]
        if observed.nunique() == 1:
            v = observed.iloc[0]
            m = Marginal(c, "constant", [v.item() if isinstance(v, np.generic) else v])
        elif kinds.get(c) == FeatureKind.CONTINUOUS:
            m = Marginal(c, "continuous", np.sort(observed.to_numpy(dtype=float)).tolist())
        else:
            m = _categorical_marginal(c, observed.tolist())
        m.missing_rate = missing_rate
        marginals.append(m)
    scores = normal_scores(df, marginals)
    constant = np.array([m.kind == "constant" for m in marginals])
    corr = nearest_psd_correlation(latent_correlation(score_correlation(scores, constant), marginals))
    return CopulaModel(list(frame.columns), marginals, corr, _cholesky(corr), frame.row_count)


def _invert(m: Marginal, u: np.ndarray):
    if m.kind == "constant":
        return np.full(len(u), m.values[0], dtype=object if isinstance(m.values[0], str) else float)
    if m.kind == "continuous":
        vals = np.asarray(m.values, dtype=float)
        idx = np.clip(np.ceil(u * len(vals)).astype(np.int64) - 1, 0, len(vals) - 1)
        return vals[idx]
    idx = np.searchsorted(m.cumulative(), u, side="left")
    idx = np.clip(idx, 0, len(m.values) - 1)
    labels = np.asarray(m.values, dtype=object)
    out = labels[idx]
    if all(isinstance(v, (int, float)) for v in m.values):
        return out.astype(float)
    return out


def sample(model: CopulaModel, n: int, seed: int = 0) -> TabularFrame:
    """Draw ``n`` synthetic rows; identical for identical (model, n, seed)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z_seq, miss_seq = np.random.SeedSequence(seed).spawn(2)
    z = np.random.default_rng(z_seq).standard_normal((n, len(model.columns))) @ model.cholesky.T
    u = norm.cdf(z)
    miss_rng = np.random.default_rng(miss_seq)
    data = {}
    kinds = {}
    for j, m in enumerate(model.marginals):
        values = _invert(m, u[:, j])
        if m.missing_rate > 0:
            drop = miss_rng.random(n) < m.missing_rate
            values = values.astype(object) if values.dtype == object else values.astype(float)
            values[drop] = None if values.dtype == object else np.nan
        data[m.name] = values
        numeric = values.dtype != object
        kinds[m.name] = FeatureKind.CONTINUOUS if numeric else FeatureKind.CATEGORICAL
    return TabularFrame(pd.DataFrame(data, columns=model.columns), kinds)


@dataclass
class SynthesisReport:
    ks: dict
    total_variation: dict
    correlation_delta: np.ndarray
    columns: list

    @property
    def max_ks(self) -> float:
        return max(self.ks.values(), default=0.0)

    @property
    def max_correlation_delta(self) -> float:
        d = np.abs(self.correlation_delta)
        return float(d.max()) if d.size else 0.0

    def to_dict(self) -> dict:
        return {"ks": self.ks, "total_variation": self.total_variation,
                "max_ks": self.max_ks, "max_correlation_delta": self.max_correlation_delta,
                "columns": self.columns, "correlation_delta": self.correlation_delta.tolist()}


def evaluate_synthesis(real: TabularFrame, synth: TabularFrame, kinds: Optional[dict] = None) -> SynthesisReport:
    """KS per continuous column, total variation per categorical, and the normal-score correlation gap."""
    if real.columns != synth.columns:
        raise SchemaMismatch(f"columns differ: {real.columns} vs {synth.columns}")
    model = fit_copula(real, kinds)
    ks, tv = {}, {}
    for m in model.marginals:
        a, b = real.data[m.name], synth.data[m.name]
        if m.kind == "continuous":
            ks[m.name] = ks_stat(a.dropna().to_numpy(dtype=float), b.dropna().to_numpy(dtype=float))
        else:
            pa = a.dropna().astype(str).value_counts(normalize=True)
            pb = b.dropna().astype(str).value_counts(normalize=True)
            keys = sorted(set(pa.index) | set(pb.index))
            tv[m.name] = float(0.5 * sum(abs(pa.get(k, 0.0) - pb.get(k, 0.0)) for k in keys))
    constant = np.array([m.kind == "constant" for m in model.marginals])
    real_corr = score_correlation(normal_scores(real.data, model.marginals), constant)
    synth_margs = [m if m.kind != "categorical" else _refit_probs(m, synth.data[m.name]) for m in model.marginals]
    synth_corr = score_correlation(normal_scores(synth.data, synth_margs), constant)
    return SynthesisReport(ks, tv, synth_corr - real_corr, list(model.columns))


def _refit_probs(m: Marginal, col: pd.Series) -> Marginal:
    """Same category order as ``m`` with frequencies taken from ``col``."""
    counts = col.dropna().astype(str).value_counts()
    total = float(counts.sum()) or 1.0
    return Marginal(m.name, m.kind, m.values, [counts.get(str(v), 0) / total for v in m.values])
