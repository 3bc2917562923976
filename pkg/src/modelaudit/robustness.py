"""Perturbation curves, gradient attacks, weak-slice search and permutation importance."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .dataset import FeatureKind, TabularFrame, ValidationDataset, get_predictions, score_frame
from .errors import NoSlices, UnsupportedCapability

DECILES = np.linspace(0.1, 0.9, 9)


@dataclass
class PerturbationSpec:
    levels: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0)
    sigma_factor: float = 0.5
    flip_prob: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.levels = tuple(float(v) for v in self.levels)
        if list(self.levels) != sorted(self.levels) or any(not 0 <= v <= 1 for v in self.levels):
            raise ValueError("levels must be sorted and lie in [0, 1]")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")


def perturb(frame: TabularFrame, spec: PerturbationSpec, level: float, seed: Optional[int] = None,
            kinds: Optional[dict] = None, frozen: Sequence[str] = ()) -> TabularFrame:
    """Noisy copy of ``frame`` at severity ``level``.

    Continuous columns get N(0, (level * sigma_factor * std)^2) noise; categorical
    and binary cells switch to a uniformly drawn other category with probability
    ``level * flip_prob``. Columns in ``frozen`` and missing cells are untouched.
    """
    if level not in spec.levels:
        raise ValueError(f"level {level} is not one of {spec.levels}")
    seed = spec.seed if seed is None else seed
    data = frame.data.copy()
    if level == 0:
        return frame.with_data(data)
    kinds = kinds or {c: frame.kinds[c] for c in frame.columns}
    rng = np.random.default_rng([seed, int(round(level * 1_000_000))])
    for name in frame.columns:
        if name in frozen or name not in kinds:
            continue
        col = data[name]
        present = col.notna().to_numpy()
        if kinds[name] == FeatureKind.CONTINUOUS:
            values = col.to_numpy(dtype=float).copy()
            sd = float(np.nanstd(values))
            noise = rng.normal(0.0, 1.0, size=len(values)) * (level * spec.sigma_factor * sd)
            values[present] = values[present] + noise[present]
            data[name] = values
        else:
            cats = sorted(pd.unique(col.dropna()), key=str)
            flip = (rng.random(len(col)) < level * spec.flip_prob) & present
            draws = rng.random(len(col))
            if len(cats) < 2 or not flip.any():
                continue
            values = col.to_numpy(dtype=object).copy()
            for i in np.flatnonzero(flip):
                others = [c for c in cats if c != values[i]]
                values[i] = others[min(int(draws[i] * len(others)), len(others) - 1)]
            if pd.api.types.is_numeric_dtype(col):
                data[name] = values.astype(float)
            else:
                data[name] = pd.Series(values, dtype="object")
    return frame.with_data(data)


def accuracy(y_idx, labels_pred) -> float:
    y_idx = np.asarray(y_idx)
    keep = y_idx >= 0
    return float((np.asarray(labels_pred)[keep] == y_idx[keep]).mean())


def rmse(y, y_pred) -> float:
    y = np.asarray(y, dtype=float)
    keep = ~np.isnan(y)
    return float(np.sqrt(np.mean((np.asarray(y_pred, dtype=float)[keep] - y[keep]) ** 2)))


def dataset_metric(ds: ValidationDataset, labels_pred) -> float:
    if ds.task_type.is_classification:
        return accuracy(ds.y_index(), labels_pred)
    return rmse(ds.y_values(), labels_pred)


def perturb_dataset(ds: ValidationDataset, spec: PerturbationSpec, level: float, seed: Optional[int] = None):
    frozen = [ds.target_column, *ds.protected_attributes]
    kinds = {c: k for c, k in ds.feature_kinds.items() if c in ds.feature_columns}
    return perturb(ds.frame, spec, level, seed, kinds=kinds, frozen=frozen)


def robustness_curve(ds: ValidationDataset, spec: PerturbationSpec, seed: Optional[int] = None) -> list:
    """(level, metric) pairs: accuracy for classifiers, RMSE for regressors."""
    curve = []
    for level in spec.levels:
        if level == 0:
            labels = get_predictions(ds).labels_pred
        else:
            noisy = perturb_dataset(ds, spec, level, seed)
            labels = score_frame(ds.model, noisy.data, ds.task_type).labels_pred
        curve.append((level, dataset_metric(ds, labels)))
    return curve


@dataclass
class AttackConfig:
    kind: str = "fgsm"
    epsilon: float = 0.1
    steps: int = 1
    step_size: Optional[float] = None
    feature_clip: Optional[np.ndarray] = None  # (d, 2) lower/upper bounds
    feature_scale: Optional[np.ndarray] = None  # epsilon is measured in these units per feature
    movable: Optional[np.ndarray] = None  # boolean mask; frozen features never move

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ValueError("kind must be fgsm or pgd")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.kind == "fgsm" and self.steps != 1:
            raise ValueError("fgsm takes exactly one step")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is None:
            self.step_size = self.epsilon if self.kind == "fgsm" else self.epsilon / 4


def _attack_setup(oracle, X, config):
    if not oracle.differentiable:
        raise UnsupportedCapability(f"gradient attacks need a differentiable spec, got {oracle.kind}")
    X = np.asarray(X, dtype=float)
    d = X.shape[1]
    scale = np.ones(d) if config.feature_scale is None else np.asarray(config.feature_scale, dtype=float)
    movable = np.ones(d, dtype=bool) if config.movable is None else np.asarray(config.movable, dtype=bool)
    return X, scale * movable


def _clip_box(X, config):
    if config.feature_clip is None:
        return X
    clip = np.asarray(config.feature_clip, dtype=float)
    return np.clip(X, clip[:, 0], clip[:, 1])


def fgsm_batch(oracle, X, y, config: AttackConfig) -> np.ndarray:
    X, scale = _attack_setup(oracle, X, config)
    step = config.epsilon * scale * np.sign(oracle.gradient_matrix(X, np.asarray(y)))
    return _clip_box(X + step, config)


def pgd_batch(oracle, X, y, config: AttackConfig) -> np.ndarray:
    """Signed-gradient steps projected onto the L-inf ball and the clip box."""
    X, scale = _attack_setup(oracle, X, config)
    y = np.asarray(y)
    lower = X - config.epsilon * scale
    upper = X + config.epsilon * scale
    adv = X.copy()
    for _ in range(config.steps):
        adv = adv + config.step_size * scale * np.sign(oracle.gradient_matrix(adv, y))
        adv = np.clip(adv, lower, upper)
        adv = _clip_box(adv, config)
    return adv


def fgsm(oracle, row, y, config: AttackConfig) -> np.ndarray:
    return fgsm_batch(oracle, np.atleast_2d(row), [y], config)[0]


def pgd(oracle, row, y, config: AttackConfig) -> np.ndarray:
    return pgd_batch(oracle, np.atleast_2d(row), [y], config)[0]


def cross_entropy(oracle, X, y) -> np.ndarray:
    p = oracle.predict_proba(X)
    return -np.log(np.clip(p[np.arange(len(X)), np.asarray(y)], 1e-300, None))


def attack_setup_for(ds: ValidationDataset, epsilon: float, kind: str = "fgsm", steps: int = 1,
                     step_size: Optional[float] = None) -> AttackConfig:
    """Attack config in units of feature standard deviation, clipped to the observed range."""
    X = ds.model_input()
    kinds = ds.feature_kinds
    movable = np.array([kinds.get(f) == FeatureKind.CONTINUOUS for f in ds.model.feature_order])
    clip = np.column_stack([np.nanmin(X, axis=0), np.nanmax(X, axis=0)])
    return AttackConfig(kind, epsilon, steps, step_size, clip, np.nanstd(X, axis=0), movable)


def attack_accuracy(ds: ValidationDataset, epsilons: Sequence[float], kind: str = "fgsm", steps: int = 10) -> list:
    y = ds.y_index()
    keep = y >= 0
    X = ds.model_input()[keep]
    y = y[keep]
    out = []
    for eps in epsilons:
        config = attack_setup_for(ds, eps, kind, steps if kind == "pgd" else 1)
        adv = fgsm_batch(ds.model, X, y, config) if kind == "fgsm" else pgd_batch(ds.model, X, y, config)
        out.append((float(eps), float((np.argmax(ds.model.predict_proba(adv), axis=1) == y).mean())))
    return out


@dataclass(frozen=True, order=True)
class Conjunct:
    feature: str
    op: str  # "==", "<=", ">"
    value: object

    def __str__(self):
        v = self.value
        text = f"{v:.6g}" if isinstance(v, float) else str(v)
        return f"{self.feature} {self.op} {text}"

    def to_dict(self):
        v = self.value
        return {"feature": self.feature, "op": self.op, "value": v}


@dataclass(frozen=True)
class SlicePredicate:
    conjuncts: tuple

    def __str__(self):
        return " AND ".join(str(c) for c in self.conjuncts)

    @property
    def features(self):
        return {c.feature for c in self.conjuncts}

    def to_dict(self):
        return [c.to_dict() for c in self.conjuncts]


@dataclass
class WeakSlice:
    predicate: SlicePredicate
    support: int
    support_fraction: float
    slice_metric: float
    baseline_metric: float
    gap: float

    def to_dict(self):
        return {
            "predicate": str(self.predicate),
            "conjuncts": self.predicate.to_dict(),
            "support": self.support,
            "support_fraction": self.support_fraction,
            "slice_metric": self.slice_metric,
            "baseline_metric": self.baseline_metric,
            "gap": self.gap,
        }


def _category_key(v):
    if isinstance(v, float) and v.is_integer():
        return int(v)
    return v


def candidate_conjuncts(frame: pd.DataFrame, kinds: dict, features: Sequence[str]):
    """(conjunct, mask) for every equality test and decile threshold test."""
    out = []
    for f in features:
        col = frame[f]
        present = col.notna().to_numpy()
        if kinds[f] == FeatureKind.CONTINUOUS:
            values = col.to_numpy(dtype=float)
            for t in np.unique(np.quantile(values[present], DECILES)):
                t = float(t)
                with np.errstate(invalid="ignore"):
                    out.append((Conjunct(f, "<=", t), present & (values <= t)))
                    out.append((Conjunct(f, ">", t), present & (values > t)))
        else:
            values = col.to_numpy(dtype=object)
            for cat in sorted(pd.unique(col.dropna()), key=str):
                out.append((Conjunct(f, "==", _category_key(cat)), present & (values == cat)))
    return out


def beam_search_slices(ds: ValidationDataset, preds, width: int = 10, max_depth: int = 3, min_support: int = 10,
                       features: Optional[Sequence[str]] = None) -> list:
    """Low-accuracy conjunctive slices found by beam search.

    Each level keeps the ``width`` lowest-accuracy predicates with at least
    ``min_support`` labelled rows and extends them by one conjunct on an unused
    feature. Every predicate that ever sat in a beam and has a positive gap is
    returned, by gap descending, then support descending, then predicate text.
    """
    if width < 1 or max_depth < 1:
        raise ValueError("width and max_depth must be >= 1")
    if min_support < 10:
        raise ValueError("min_support must be >= 10")
    if not ds.task_type.is_classification:
        raise ValueError("slice search needs a classification task")
    y = ds.y_index()
    labelled = y >= 0
    correct = (np.asarray(preds.labels_pred) == y) & labelled
    n_lab = int(labelled.sum())
    baseline = float(correct.sum() / n_lab)
    features = list(features or ds.feature_columns)
    candidates = candidate_conjuncts(ds.frame.data, ds.feature_kinds, features)

    def score(mask):
        m = mask & labelled
        support = int(m.sum())
        return support, (float(correct[m].sum() / support) if support else math.nan)

    def rank_key(item):
        key, mask, support, acc = item
        return (acc, -support, str(SlicePredicate(key)))

    seen = {}
    beam = []
    level = []
    for conj, mask in candidates:
        support, acc = score(mask)
        if support >= min_support:
            level.append(((conj,), mask, support, acc))
    for depth in range(1, max_depth + 1):
        if depth > 1:
            level = []
            produced = set()
            for key, mask, _, _ in beam:
                used = {c.feature for c in key}
                for conj, cmask in candidates:
                    if conj.feature in used:
                        continue
                    new_key = tuple(sorted(key + (conj,)))
                    if new_key in produced:
                        continue
                    produced.add(new_key)
                    new_mask = mask & cmask
                    support, acc = score(new_mask)
                    if support >= min_support:
                        level.append((new_key, new_mask, support, acc))
        if not level:
            break
        level.sort(key=rank_key)
        beam = level[:width]
        for key, _, support, acc in beam:
            seen[key] = (support, acc)
    if not seen:
        raise NoSlices(f"no predicate reaches min_support={min_support}")
    slices = []
    for key, (support, acc) in seen.items():
        gap = baseline - acc
        if gap > 0:
            slices.append(WeakSlice(SlicePredicate(key), support, support / n_lab, acc, baseline, gap))
    slices.sort(key=lambda s: (-s.gap, -s.support, str(s.predicate)))
    return slices


@dataclass
class FeatureImportance:
    feature: str
    mean_drop: float
    std: float

    def to_dict(self):
        return asdict(self)


def permutation_importance(ds: ValidationDataset, metric: str = "auto", repeats: int = 5, seed: int = 0,
                           features: Optional[Sequence[str]] = None) -> list:
    """Metric degradation when one feature column is shuffled, averaged over repeats.

    Drops are positive when shuffling hurts (accuracy falls or RMSE rises).
    Columns the model never reads are not re-scored; their drop is exactly 0.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if metric == "auto":
        metric = "accuracy" if ds.task_type.is_classification else "rmse"
    sign = 1.0 if metric == "accuracy" else -1.0
    base = dataset_metric(ds, get_predictions(ds).labels_pred)
    used = set(ds.model.feature_order)
    rng = np.random.default_rng(seed)
    results = []
    for f in list(features or ds.feature_columns):
        drops = []
        for _ in range(repeats):
            perm = rng.permutation(ds.n)
            if f not in used:
                drops.append(0.0)
                continue
            data = ds.frame.data.copy()
            data[f] = data[f].to_numpy()[perm]
            labels = score_frame(ds.model, data, ds.task_type).labels_pred
            drops.append(sign * (base - dataset_metric(ds, labels)))
        results.append(FeatureImportance(f, float(np.mean(drops)), float(np.std(drops))))
    results.sort(key=lambda r: (-r.mean_drop, r.feature))
    return results
