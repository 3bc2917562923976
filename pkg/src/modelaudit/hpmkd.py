"""Multi-teacher knowledge distillation into logistic-regression students.

Teachers are scoring oracles. Their temperature-softened outputs are fused
with per-row attention weights (softmax of each teacher's accuracy on the
nearest validation rows), and students are fitted by full-batch gradient
descent on a mix of hard-label cross-entropy and KL to the fused soft labels.
A chain of shrinking students can be trained, each one taught by the last.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.special import log_softmax, softmax

from .dataset import FeatureKind, TabularFrame, _class_index
from .errors import DivergenceError, EmptyValidationSet
from .oracle import ScoringOracle, logreg_document, parse_model_spec

log = logging.getLogger(__name__)

T_MIN = 1.0
T_MAX = 8.0


@dataclass(frozen=True)
class KDLossConfig:
    alpha: float = 0.5
    temperature: float = 1.0
    soft_scale_T2: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.temperature >= 1.0:
            raise ValueError(f"temperature must be >= 1, got {self.temperature}")

    @property
    def soft_scale(self) -> float:
        return self.temperature ** 2 if self.soft_scale_T2 else 1.0


def soft_labels(logits, T: float) -> np.ndarray:
    """Row-wise softmax of ``logits / T``."""
    if T < 1.0:
        raise ValueError("temperature must be >= 1")
    return softmax(np.asarray(logits, dtype=float) / T, axis=1)


def teacher_logits(oracle: ScoringOracle, frame: pd.DataFrame) -> np.ndarray:
    """Logits when the oracle exposes them, log-probabilities otherwise.

    Both give the same softmax at T=1; for proba-only teachers temperature
    scaling then acts on log-probabilities.
    """
    X = oracle.input_matrix(frame)
    if oracle.supports_logits:
        return oracle.predict_logits(X)
    return np.log(np.clip(oracle.predict_proba(X), 1e-300, None))


def _standardize_params(values: np.ndarray):
    mu = values.mean(axis=0)
    sd = values.std(axis=0)
    sd[sd == 0] = 1.0
    return mu, sd


class TeacherPool:
    """Teachers plus a labelled validation split used to score them locally.

    ``kinds`` decides the neighbourhood metric: Euclidean distance on
    standardized continuous columns plus a Hamming count over the others.
    """

    def __init__(self, teachers: Sequence[ScoringOracle], validation: pd.DataFrame, y_val, classes,
                 kinds: dict, k_nn: int = 25, feature_columns: Optional[Sequence[str]] = None):
        if not teachers:
            raise ValueError("need at least one teacher")
        if len(validation) == 0:
            raise EmptyValidationSet("teacher pool has no validation rows")
        widths = {t.n_outputs for t in teachers}
        if len(widths) != 1 or widths.pop() != len(classes):
            raise ValueError("teachers must share the class set")
        self.teachers = list(teachers)
        self.classes = list(classes)
        self.k_nn = int(k_nn)
        self.validation = validation.reset_index(drop=True)
        self.y_val = np.asarray(y_val, dtype=np.int64)
        cols = list(feature_columns) if feature_columns is not None else list(kinds)
        self.continuous = [c for c in cols if kinds.get(c) == FeatureKind.CONTINUOUS]
        self.discrete = [c for c in cols if kinds.get(c) != FeatureKind.CONTINUOUS and c in validation.columns]
        Xc = self.validation[self.continuous].to_numpy(dtype=float) if self.continuous else np.zeros((len(validation), 0))
        self._mu, self._sd = _standardize_params(np.nan_to_num(Xc))
        self._val_cont = self._scale(Xc)
        self._val_disc = self.validation[self.discrete].astype(str).to_numpy() if self.discrete else None
        self.correct = np.column_stack([
            np.argmax(t.predict_proba(t.input_matrix(self.validation)), axis=1) == self.y_val for t in self.teachers
        ]).astype(float)

    @property
    def K(self) -> int:
        return len(self.teachers)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def _scale(self, Xc):
        return np.nan_to_num((Xc - self._mu) / self._sd)

    def with_teachers(self, teachers: Sequence[ScoringOracle]) -> "TeacherPool":
        kinds = {c: FeatureKind.CONTINUOUS for c in self.continuous}
        kinds.update({c: FeatureKind.CATEGORICAL for c in self.discrete})
        return TeacherPool(teachers, self.validation, self.y_val, self.classes, kinds, self.k_nn,
                           self.continuous + self.discrete)

    def neighbours(self, frame: pd.DataFrame, chunk: int = 512) -> np.ndarray:
        """Indices of the ``k_nn`` nearest validation rows, ties broken by index."""
        k = min(self.k_nn, len(self.validation))
        Xc = self._scale(frame[self.continuous].to_numpy(dtype=float)) if self.continuous else np.zeros((len(frame), 0))
        Xd = frame[self.discrete].astype(str).to_numpy() if self.discrete else None
        out = np.empty((len(frame), k), dtype=np.int64)
        for start in range(0, len(frame), chunk):
            stop = min(start + chunk, len(frame))
            d = ((Xc[start:stop, None, :] - self._val_cont[None, :, :]) ** 2).sum(axis=2)
            if Xd is not None:
                d = d + (Xd[start:stop, None, :] != self._val_disc[None, :, :]).sum(axis=2)
            out[start:stop] = np.argsort(d, axis=1, kind="stable")[:, :k]
        return out

    def local_scores(self, frame: pd.DataFrame) -> np.ndarray:
        """Per-row, per-teacher accuracy over the nearest validation rows (n x K)."""
        nn = self.neighbours(frame)
        return self.correct[nn].mean(axis=1)

    def logits(self, frame: pd.DataFrame) -> list:
        return [teacher_logits(t, frame) for t in self.teachers]


def attention_weights(pool: TeacherPool, frame: pd.DataFrame) -> np.ndarray:
    """Softmax over teachers of their local accuracy; one row of K weights per input row."""
    if pool.K == 1:
        return np.ones((len(frame), 1))
    return softmax(pool.local_scores(frame), axis=1)


def fuse_soft_labels(pool: TeacherPool, frame: pd.DataFrame, T: float, weights: Optional[np.ndarray] = None,
                     logits: Optional[list] = None) -> np.ndarray:
    """Attention-weighted mixture of the teachers' softened distributions."""
    if weights is None:
        weights = attention_weights(pool, frame)
    if logits is None:
        logits = pool.logits(frame)
    fused = np.zeros((len(frame), pool.n_classes))
    for k, z in enumerate(logits):
        fused += weights[:, k : k + 1] * soft_labels(z, T)
    return fused


def kd_loss(y_onehot, student_logits, fused_soft, config: KDLossConfig):
    """Mean distillation loss over rows and its gradient in the student logits.

    loss = alpha * CE(y, softmax(z)) + (1 - alpha) * tau * KL(p_soft || softmax(z / T)),
    tau = T**2 when ``soft_scale_T2`` else 1.
    """
    y = np.asarray(y_onehot, dtype=float)
    z = np.asarray(student_logits, dtype=float)
    p = np.asarray(fused_soft, dtype=float)
    n = len(z)
    T = config.temperature
    a = config.alpha
    tau = config.soft_scale
    log_q1 = log_softmax(z, axis=1)
    log_qT = log_softmax(z / T, axis=1)
    ce = -(y * log_q1).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    kl = (plogp - p * log_qT).sum(axis=1)
    loss = float(np.mean(a * ce + (1 - a) * tau * kl))
    grad = a * (np.exp(log_q1) - y) + (1 - a) * tau / T * (np.exp(log_qT) - p)
    return loss, grad / n


def entropy(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=1)


def temperature_from_entropy(mean_entropy: float, n_classes: int) -> float:
    """clamp(1 + 6 * H / ln C, 1, 8)."""
    if n_classes < 2:
        return T_MIN
    return float(min(max(1.0 + 6.0 * mean_entropy / math.log(n_classes), T_MIN), T_MAX))


def meta_temperature(pool: TeacherPool, sample: pd.DataFrame) -> float:
    """Harder tasks (more uncertain fused teachers) get softer targets."""
    if len(sample) == 0:
        raise ValueError("temperature sample is empty")
    fused = fuse_soft_labels(pool, sample, 1.0)
    return temperature_from_entropy(float(entropy(fused).mean()), pool.n_classes)


@dataclass
class StudentCapacity:
    n_features: Optional[int] = None  # None keeps every candidate feature
    l2: float = 0.0


@dataclass
class StudentModel:
    document: dict
    features: list
    curve: list = field(repr=False)
    loss_config: KDLossConfig = None

    @property
    def oracle(self) -> ScoringOracle:
        return ScoringOracle(parse_model_spec(self.document))


def numeric_features(frame: pd.DataFrame, columns: Sequence[str]) -> list:
    return [c for c in columns if pd.api.types.is_numeric_dtype(frame[c])]


def _subset_by_importance(pool: TeacherPool, frame: pd.DataFrame, candidates: list, m: int, T: float,
                          seed: int) -> list:
    """Top-``m`` candidates ranked by how far shuffling them moves the fused soft labels."""
    if m >= len(candidates):
        return list(candidates)
    rng = np.random.default_rng(seed)
    weights = attention_weights(pool, frame)
    base = fuse_soft_labels(pool, frame, T, weights=weights)
    scores = []
    for c in candidates:
        shuffled = frame.copy()
        shuffled[c] = frame[c].to_numpy()[rng.permutation(len(frame))]
        moved = fuse_soft_labels(pool, shuffled, T, weights=weights)
        scores.append(float(np.abs(moved - base).sum(axis=1).mean()))
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], candidates[i]))
    return sorted((candidates[i] for i in order[:m]), key=candidates.index)


def train_student(frame: pd.DataFrame, y, pool: TeacherPool, loss_config: KDLossConfig,
                  capacity: StudentCapacity, epochs: int = 300, lr: float = 0.5, seed: int = 0,
                  features: Optional[Sequence[str]] = None, stage: Optional[int] = None,
                  name: Optional[str] = None) -> StudentModel:
    """Fit a logistic-regression student to the pool by full-batch gradient descent.

    Features are standardized during training and the scaling is folded back
    into the emitted weights, so the student reads raw columns.
    """
    y = np.asarray(y, dtype=np.int64)
    C = pool.n_classes
    candidates = numeric_features(frame, features if features is not None else list(frame.columns))
    if not candidates:
        raise ValueError("student needs at least one numeric feature")
    m = capacity.n_features or len(candidates)
    chosen = _subset_by_importance(pool, frame, candidates, m, loss_config.temperature, seed)
    X = frame[chosen].to_numpy(dtype=float)
    if np.isnan(X).any():
        raise ValueError("student features contain missing values")
    mu, sd = _standardize_params(X)
    Xs = (X - mu) / sd
    Y = np.eye(C)[y]
    soft = fuse_soft_labels(pool, frame, loss_config.temperature)

    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 0.01, size=(C, len(chosen)))
    b = np.zeros(C)
    curve = []
    for epoch in range(1, epochs + 1):
        z = Xs @ W.T + b
        loss, G = kd_loss(Y, z, soft, loss_config)
        loss += 0.5 * capacity.l2 * float((W ** 2).sum())
        if not np.isfinite(loss):
            raise DivergenceError(epoch, stage)
        curve.append(loss)
        W -= lr * (G.T @ Xs + capacity.l2 * W)
        b -= lr * G.sum(axis=0)
        if not (np.isfinite(W).all() and np.isfinite(b).all()):
            raise DivergenceError(epoch, stage)

    W_raw = W / sd
    b_raw = b - W_raw @ mu
    if C == 2:
        doc = logreg_document([W_raw[1] - W_raw[0]], [b_raw[1] - b_raw[0]], chosen, pool.classes, name)
    else:
        doc = logreg_document(W_raw, b_raw, chosen, pool.classes, name)
    log.debug("student stage=%s features=%s final loss=%.6f", stage, chosen, curve[-1] if curve else float("nan"))
    return StudentModel(doc, chosen, curve, loss_config)


@dataclass
class StageConfig:
    n_features: Optional[int] = None
    l2: float = 0.0
    alpha: float = 0.5
    temperature: Union[float, str] = "auto"


@dataclass
class ChainConfig:
    stages: list
    epochs: int = 300
    learning_rate: float = 0.5
    seed: int = 0
    soft_scale_T2: bool = True
    k_nn: int = 25
    validation_fraction: float = 0.3

    def __post_init__(self):
        if not self.stages:
            raise ValueError("chain needs at least one stage")
        for i, st in enumerate(self.stages):
            if not isinstance(st, StageConfig):
                raise ValueError(f"stage {i + 1} is not a stage config")
            if st.n_features is not None and st.n_features < 1:
                raise ValueError(f"stage {i + 1}: n_features must be >= 1")
            if st.l2 < 0:
                raise ValueError(f"stage {i + 1}: l2 must be >= 0")
            if not (st.temperature == "auto" or (isinstance(st.temperature, (int, float)) and st.temperature >= 1)):
                raise ValueError(f"stage {i + 1}: temperature must be 'auto' or >= 1")
            KDLossConfig(st.alpha, 1.0)
        for prev, cur in zip(self.stages, self.stages[1:]):
            if prev.n_features is not None and (cur.n_features is None or cur.n_features > prev.n_features):
                raise ValueError("stage capacities must be non-increasing (n_features)")
            if cur.l2 < prev.l2:
                raise ValueError("stage capacities must be non-increasing (l2 may only grow)")
        if self.epochs < 1 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 1 and learning_rate > 0")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")

    @classmethod
    def from_dict(cls, doc: dict) -> "ChainConfig":
        if not isinstance(doc, dict) or not isinstance(doc.get("stages"), list):
            raise ValueError("chain config must be an object with a 'stages' list")
        known = {"n_features", "l2", "alpha", "temperature"}
        stages = []
        for i, st in enumerate(doc["stages"]):
            if not isinstance(st, dict) or set(st) - known:
                raise ValueError(f"stage {i + 1}: expected keys among {sorted(known)}")
            stages.append(StageConfig(**st))
        rest = {k: v for k, v in doc.items() if k != "stages"}
        unknown = set(rest) - {"epochs", "learning_rate", "seed", "soft_scale_T2", "k_nn", "validation_fraction"}
        if unknown:
            raise ValueError(f"unknown chain keys: {sorted(unknown)}")
        return cls(stages=stages, **rest)

    @classmethod
    def load(cls, path) -> "ChainConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"chain config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


@dataclass
class DistillationReport:
    teacher_accuracy: float
    stage_accuracies: list
    final_accuracy: float
    retention: float
    spec_size_ratio: float
    temperatures: list
    stage_features: list

    def to_dict(self) -> dict:
        return {
            "teacher_accuracy": self.teacher_accuracy,
            "stage_accuracies": list(self.stage_accuracies),
            "final_accuracy": self.final_accuracy,
            "retention": self.retention,
            "spec_size_ratio": self.spec_size_ratio,
            "temperatures": list(self.temperatures),
            "stage_features": [list(f) for f in self.stage_features],
        }


def _spec_size(doc: dict) -> int:
    return len(json.dumps(doc, sort_keys=True, separators=(",", ":")))


def pool_accuracy(pool: TeacherPool, frame: pd.DataFrame, y) -> float:
    fused = fuse_soft_labels(pool, frame, 1.0)
    return float(np.mean(np.argmax(fused, axis=1) == np.asarray(y)))


def model_accuracy(oracle: ScoringOracle, frame: pd.DataFrame, y) -> float:
    proba = oracle.predict_proba(oracle.input_matrix(frame))
    return float(np.mean(np.argmax(proba, axis=1) == np.asarray(y)))


def progressive_chain(frame: pd.DataFrame, y, pool: TeacherPool, config: ChainConfig,
                      features: Optional[Sequence[str]] = None, eval_frame: Optional[pd.DataFrame] = None,
                      eval_y=None):
    """Teacher pool -> student 1 -> student 2 -> ...; returns the last student and a report.

    Accuracies are measured on ``eval_frame`` (default: the pool's validation split).
    """
    if eval_frame is None:
        eval_frame, eval_y = pool.validation, pool.y_val
    teacher_acc = pool_accuracy(pool, eval_frame, eval_y)
    teacher_docs = [t.spec.document for t in pool.teachers]
    current_pool = pool
    current_features = features
    students, accs, temps = [], [], []
    for i, st in enumerate(config.stages, start=1):
        if st.temperature == "auto":
            T = meta_temperature(current_pool, frame)
        else:
            T = float(st.temperature)
        loss_cfg = KDLossConfig(st.alpha, T, config.soft_scale_T2)
        student = train_student(frame, y, current_pool, loss_cfg, StudentCapacity(st.n_features, st.l2),
                                config.epochs, config.learning_rate, config.seed, features=current_features,
                                stage=i, name=f"student-stage-{i}")
        oracle = student.oracle
        students.append(student)
        temps.append(T)
        accs.append(model_accuracy(oracle, eval_frame, eval_y))
        log.info("distillation stage %d: T=%.3f features=%d accuracy=%.4f", i, T, len(student.features), accs[-1])
        current_pool = current_pool.with_teachers([oracle])
        current_features = student.features
    final = students[-1]
    teacher_size = sum(_spec_size(d) for d in teacher_docs)
    report = DistillationReport(
        teacher_accuracy=teacher_acc,
        stage_accuracies=accs,
        final_accuracy=accs[-1],
        retention=accs[-1] / teacher_acc if teacher_acc > 0 else float("nan"),
        spec_size_ratio=_spec_size(final.document) / teacher_size if teacher_size else float("nan"),
        temperatures=temps,
        stage_features=[s.features for s in students],
    )
    return final, report


@dataclass
class DistillationRun:
    student: StudentModel
    report: DistillationReport
    attention: list  # mean stage-1 attention weight per teacher over the training rows
    n_train: int
    n_validation: int

    def to_dict(self) -> dict:
        doc = self.report.to_dict()
        doc.update({"attention_weights": list(self.attention), "n_train": self.n_train,
                    "n_validation": self.n_validation})
        return doc


def distill_table(frame: TabularFrame, target_column: str, teachers: Sequence[ScoringOracle],
                  config: ChainConfig, features: Optional[Sequence[str]] = None) -> DistillationRun:
    """Split labelled rows into train and validation folds, build the pool and run the chain."""
    if target_column not in frame.columns:
        raise ValueError(f"target column {target_column!r} not in table")
    classes = list(teachers[0].spec.classes)
    data = frame.data[frame.data[target_column].notna()].reset_index(drop=True)
    y = _class_index(data[target_column], classes)
    n_val = int(round(config.validation_fraction * len(data)))
    if n_val < 1:
        raise EmptyValidationSet("validation fraction leaves no validation rows")
    if len(data) - n_val < 1:
        raise ValueError("validation fraction leaves no training rows")
    perm = np.random.default_rng(config.seed).permutation(len(data))
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    columns = [c for c in frame.columns if c != target_column]
    kinds = {c: frame.kinds[c] for c in columns}
    if features is None:
        features = numeric_features(data, columns)
    pool = TeacherPool(teachers, data.iloc[val_idx], y[val_idx], classes, kinds, config.k_nn, columns)
    train = data.iloc[train_idx].reset_index(drop=True)
    attention = attention_weights(pool, train).mean(axis=0)
    student, report = progressive_chain(train, y[train_idx], pool, config, features=features)
    return DistillationRun(student, report, [float(a) for a in attention], len(train_idx), len(val_idx))
