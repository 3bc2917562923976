"""Calibration error and split conformal prediction."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class Bin:
    lo: float
    hi: float
    count: int
    acc: float | None
    conf: float | None


@dataclass
class ReliabilityBins:
    M: int
    bins: list
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def ece(proba, labels, M: int = 10):
    """Expected calibration error with ``M`` equal-width confidence bins.

    Confidence is the top class probability and the prediction its argmax; a
    bin ``(lo, hi]`` (the first one also takes 0) contributes
    ``|B|/n * |acc(B) - conf(B)|``, empty bins nothing.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    proba = np.asarray(proba, dtype=float)
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        return 0.0, ReliabilityBins(M, [Bin(m / M, (m + 1) / M, 0, None, None) for m in range(M)], 0)
    conf = proba.max(axis=1)
    correct = (np.argmax(proba, axis=1) == labels).astype(float)
    # compare against the edges themselves: ceil(conf * M) misplaces confidences
    # that sit on an edge once conf * M rounds up
    upper = np.arange(1, M + 1) / M
    idx = np.clip(np.searchsorted(upper, conf, side="left"), 0, M - 1)
    total = 0.0
    bins = []
    for m in range(M):
        sel = idx == m
        count = int(sel.sum())
        if count:
            acc = float(correct[sel].mean())
            cbar = float(conf[sel].mean())
            total += count / n * abs(acc - cbar)
            bins.append(Bin(m / M, (m + 1) / M, count, acc, cbar))
        else:
            bins.append(Bin(m / M, (m + 1) / M, 0, None, None))
    return float(total), ReliabilityBins(M, bins, n)


def classification_scores(proba, labels) -> np.ndarray:
    """Conformity score ``1 - p_true`` per row."""
    proba = np.asarray(proba, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    return 1.0 - proba[np.arange(len(labels)), labels]


def regression_scores(y, y_pred) -> np.ndarray:
    return np.abs(np.asarray(y, dtype=float) - np.asarray(y_pred, dtype=float))


@dataclass
class ConformalCalibrator:
    alpha: float
    scores: np.ndarray = field(repr=False)
    q_hat: float

    @property
    def n(self) -> int:
        return len(self.scores)

    @property
    def rank(self) -> int:
        return conformal_rank(self.n, self.alpha)


def conformal_rank(n: int, alpha: float) -> int:
    # (n+1)(1-alpha) in floating point can land a hair above an integer
    return int(math.ceil((n + 1) * (1.0 - alpha) - 1e-9))


def conformal_calibrate(scores, alpha: float) -> ConformalCalibrator:
    """Threshold = the ceil((n+1)(1-alpha))-th smallest score, +inf if that exceeds n."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    scores = np.sort(np.asarray(scores, dtype=float))
    if scores.size == 0:
        raise ValueError("need at least one calibration score")
    if not np.isfinite(scores).all():
        raise ValueError("calibration scores must be finite")
    k = conformal_rank(len(scores), alpha)
    q_hat = math.inf if k > len(scores) else float(scores[k - 1])
    return ConformalCalibrator(alpha, scores, q_hat)


def conformal_predict(calibrator: ConformalCalibrator, proba_row) -> set:
    p = np.asarray(proba_row, dtype=float)
    return {int(c) for c in np.flatnonzero(1.0 - p <= calibrator.q_hat)}


def prediction_sets(calibrator: ConformalCalibrator, proba) -> np.ndarray:
    """Boolean membership matrix, one row per example."""
    return 1.0 - np.asarray(proba, dtype=float) <= calibrator.q_hat


def evaluate_coverage(calibrator: ConformalCalibrator, proba, labels):
    """(empirical coverage, average set size) on a held-out labelled split."""
    members = prediction_sets(calibrator, proba)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        return 0.0, 0.0
    covered = members[np.arange(len(labels)), labels]
    return float(covered.mean()), float(members.sum(axis=1).mean())


def interval_coverage(calibrator: ConformalCalibrator, y, y_pred):
    """Regression: coverage and mean width of ``y_pred +/- q_hat``."""
    y = np.asarray(y, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    covered = np.abs(y - y_pred) <= calibrator.q_hat
    width = 2 * calibrator.q_hat
    return float(covered.mean()) if len(y) else 0.0, float(width)


def split_indices(n: int, fraction: float, seed: int):
    """Disjoint (calibration, evaluation) index arrays."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    cut = int(round(n * fraction))
    return np.sort(perm[:cut]), np.sort(perm[cut:])
