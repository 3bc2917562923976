"""Tabular data loading, type inference and the validation dataset container."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import re
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import (
    AllMissing,
    DataError,
    DuplicateColumn,
    EmptyFile,
    IncoherentTarget,
    MalformedRow,
    ScoringError,
)

if TYPE_CHECKING:
    from .oracle import ScoringOracle

logger = logging.getLogger(__name__)

CATEGORICAL_CUTOFF = 20
MULTICLASS_MAX = 50

# Short tokens only match on non-letter boundaries so "mortgage" or "trace" stay out.
DEFAULT_SENSITIVE_PATTERNS = (
    r"gender",
    r"(?<![a-z])sex(?![a-z])",
    r"(?<![a-z])race(?![a-z])",
    r"ethnic",
    r"(?<![a-z])age(?![a-z])",
    r"religi",
    r"disab",
    r"nationality",
    r"marital",
)


class FeatureKind(str, Enum):
    CONTINUOUS = "continuous"
    CATEGORICAL = "categorical"
    BINARY = "binary"


class TaskType(str, Enum):
    BINARY = "binary_classification"
    MULTICLASS = "multiclass_classification"
    REGRESSION = "regression"

    @property
    def is_classification(self) -> bool:
        return self is not TaskType.REGRESSION


@dataclass
class TabularFrame:
    """A typed table: a pandas frame plus one :class:`FeatureKind` per column.

    Missing cells are ``NaN`` in numeric columns and ``None`` in string columns.
    """

    data: pd.DataFrame
    kinds: dict

    def __post_init__(self):
        names = list(self.data.columns)
        if len(set(names)) != len(names):
            dupes = [n for n in names if names.count(n) > 1]
            raise DuplicateColumn(dupes[0])
        if any(not isinstance(n, str) or n == "" for n in names):
            raise DataError("column names must be non-empty strings")
        if len(self.data) < 1:
            raise EmptyFile("table has no rows")
        missing = [n for n in names if n not in self.kinds]
        if missing:
            raise DataError(f"no kind recorded for columns {missing}")
        self.kinds = {n: FeatureKind(self.kinds[n]) for n in names}

    @property
    def columns(self) -> list:
        return list(self.data.columns)

    @property
    def row_count(self) -> int:
        return len(self.data)

    def column(self, name: str) -> pd.Series:
        return self.data[name]

    def take(self, index) -> "TabularFrame":
        """Row subset (positional indices or boolean mask), index reset."""
        sub = self.data.iloc[index] if not isinstance(index, pd.Series) else self.data[index.values]
        return TabularFrame(sub.reset_index(drop=True), dict(self.kinds))

    def with_data(self, data: pd.DataFrame) -> "TabularFrame":
        return TabularFrame(data, dict(self.kinds))


def _is_missing(value) -> bool:
    if value is None:
        return True
    if isinstance(value, float) and math.isnan(value):
        return True
    return False


def _to_number(text: str):
    try:
        value = float(text)
    except ValueError:
        return None
    return value


def _build_column(raw: list):
    """Turn a list of raw cell values (None = missing) into a typed column."""
    present = [v for v in raw if v is not None]
    numbers = []
    numeric = True
    for v in present:
        if isinstance(v, bool):
            v = int(v)
        if isinstance(v, (int, float)):
            numbers.append(float(v))
            continue
        parsed = _to_number(v) if isinstance(v, str) else None
        if parsed is None:
            numeric = False
            break
        numbers.append(parsed)
    if numeric and present:
        if any(not math.isfinite(x) for x in numbers):
            numeric = False
    if numeric and present:
        out = np.full(len(raw), np.nan)
        it = iter(numbers)
        for i, v in enumerate(raw):
            if v is not None:
                out[i] = next(it)
        return pd.Series(out, dtype="float64"), FeatureKind.CONTINUOUS
    values = [None if v is None else str(v) for v in raw]
    return pd.Series(values, dtype="object"), FeatureKind.CATEGORICAL


def _frame_from_columns(names: list, raw_columns: list) -> TabularFrame:
    data = {}
    kinds = {}
    for name, raw in zip(names, raw_columns):
        data[name], kinds[name] = _build_column(raw)
    return TabularFrame(pd.DataFrame(data, columns=names), kinds)


def _read_csv(text: str) -> TabularFrame:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyFile("file is empty") from None
    header = [h.strip() for h in header]
    seen = set()
    for name in header:
        if name == "":
            raise MalformedRow(1, "empty column name in header")
        if name in seen:
            raise DuplicateColumn(name)
        seen.add(name)
    columns = [[] for _ in header]
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise MalformedRow(line_no, f"expected {len(header)} fields, got {len(row)}")
        for col, cell in zip(columns, row):
            col.append(None if cell == "" else cell)
    if not columns[0]:
        raise EmptyFile("file has a header but no data rows")
    return _frame_from_columns(header, columns)


def _read_jsonl(text: str) -> TabularFrame:
    records = []
    names: list = []
    seen = set()
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRow(line_no, f"invalid JSON: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise MalformedRow(line_no, "expected a JSON object")
        for key in obj:
            if key not in seen:
                seen.add(key)
                names.append(key)
        records.append(obj)
    if not records:
        raise EmptyFile("file has no records")
    columns = [[rec.get(n) for rec in records] for n in names]
    for col in columns:
        for i, v in enumerate(col):
            if isinstance(v, (dict, list)):
                raise MalformedRow(i + 1, "nested values are not supported")
    return _frame_from_columns(names, columns)


def load_table(path, format: Optional[str] = None) -> TabularFrame:
    """Read a CSV (header required) or JSON-lines file.

    Numeric-looking columns come back as ``continuous`` candidates and everything
    else as ``categorical``; :func:`infer_feature_kinds` refines them.
    """
    path = Path(path)
    if format is None:
        format = "jsonl" if path.suffix.lower() in (".jsonl", ".ndjson") else "csv"
    text = path.read_text(encoding="utf-8-sig")
    if not text.strip():
        raise EmptyFile(f"{path} is empty")
    if format == "csv":
        return _read_csv(text)
    if format == "jsonl":
        return _read_jsonl(text)
    raise ValueError(f"unknown table format {format!r}")


def _format_cell(value) -> str:
    if _is_missing(value):
        return ""
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if value.is_integer() and abs(value) < 1e15:
            return str(int(value))
        return repr(value)
    return str(value)


def write_table(frame: TabularFrame, path, format: str = "csv") -> None:
    path = Path(path)
    if format == "csv":
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(frame.columns)
            for row in frame.data.itertuples(index=False, name=None):
                writer.writerow([_format_cell(v) for v in row])
    elif format == "jsonl":
        with path.open("w", encoding="utf-8") as fh:
            for row in frame.data.itertuples(index=False, name=None):
                obj = {}
                for name, v in zip(frame.columns, row):
                    if _is_missing(v):
                        obj[name] = None
                    elif isinstance(v, (float, np.floating)):
                        obj[name] = float(v)
                    else:
                        obj[name] = v
                fh.write(json.dumps(obj) + "\n")
    else:
        raise ValueError(f"unknown table format {format!r}")


def _distinct(series: pd.Series) -> list:
    return list(pd.unique(series.dropna()))


def infer_feature_kinds(frame: TabularFrame, cutoff: int = CATEGORICAL_CUTOFF) -> dict:
    """Classify every column as binary, categorical or continuous.

    Exactly two distinct values is always binary. Otherwise numeric columns with
    more than ``cutoff`` distinct values are continuous and the rest categorical.
    """
    kinds = {}
    for name in frame.columns:
        col = frame.column(name)
        values = _distinct(col)
        if not values:
            raise AllMissing(name)
        numeric = pd.api.types.is_numeric_dtype(col)
        if len(values) == 2:
            kinds[name] = FeatureKind.BINARY
        elif numeric and len(values) > cutoff:
            kinds[name] = FeatureKind.CONTINUOUS
        else:
            kinds[name] = FeatureKind.CATEGORICAL
    return kinds


def infer_task_type(target, model_has_proba: bool, multiclass_max: int = MULTICLASS_MAX) -> TaskType:
    series = pd.Series(target)
    values = _distinct(series)
    if not values:
        raise IncoherentTarget("target column has no values")
    numeric = pd.api.types.is_numeric_dtype(series)
    if not numeric and not model_has_proba:
        raise IncoherentTarget("non-numeric target but the model gives no class probabilities")
    if len(values) == 2:
        return TaskType.BINARY
    if numeric:
        integral = all(float(v).is_integer() for v in values)
        if integral and 3 <= len(values) <= multiclass_max:
            return TaskType.MULTICLASS
        return TaskType.REGRESSION
    if 3 <= len(values) <= multiclass_max:
        return TaskType.MULTICLASS
    raise IncoherentTarget(f"non-numeric target with {len(values)} distinct values")


def detect_sensitive_attributes(column_names: Iterable[str], patterns: Sequence[str] = DEFAULT_SENSITIVE_PATTERNS) -> list:
    compiled = [re.compile(p, re.IGNORECASE) for p in patterns]
    return [name for name in column_names if any(c.search(name) for c in compiled)]


@dataclass(frozen=True)
class PredictionSet:
    proba: np.ndarray
    labels_pred: np.ndarray
    model_fingerprint: str

    def __post_init__(self):
        self.proba.setflags(write=False)
        self.labels_pred.setflags(write=False)

    @property
    def n(self) -> int:
        return self.proba.shape[0]


def _class_index(values: pd.Series, classes: Sequence) -> np.ndarray:
    """Map target values onto positions in ``classes``; -1 marks missing."""
    out = np.full(len(values), -1, dtype=np.int64)
    lookup = {}
    for i, c in enumerate(classes):
        lookup[c] = i
        if isinstance(c, (int, float)) and not isinstance(c, bool):
            lookup[float(c)] = i
        lookup[str(c)] = i
    for row, v in enumerate(values.tolist()):
        if _is_missing(v):
            continue
        key = float(v) if isinstance(v, (int, float)) else v
        if key not in lookup:
            if isinstance(v, str) and _to_number(v) is not None and _to_number(v) in lookup:
                key = _to_number(v)
            else:
                raise DataError(f"target value {v!r} at row {row} is not one of the model classes {list(classes)}")
        out[row] = lookup[key]
    return out


class ValidationDataset:
    """Binds a table, its target, protected attributes and a scoring oracle.

    Build once, share across suites. The only mutable state is the prediction
    cache, filled at most once under a lock.
    """

    def __init__(
        self,
        frame: TabularFrame,
        target_column: str,
        model: "ScoringOracle",
        protected_attributes: Optional[Sequence[str]] = None,
        feature_columns: Optional[Sequence[str]] = None,
        exclude_columns: Sequence[str] = (),
        task_type: Optional[TaskType] = None,
        cutoff: int = CATEGORICAL_CUTOFF,
    ):
        if target_column not in frame.columns:
            raise DataError(f"target column {target_column!r} not in table")
        if feature_columns is None:
            feature_columns = [c for c in frame.columns if c != target_column and c not in exclude_columns]
        feature_columns = list(feature_columns)
        if target_column in feature_columns:
            raise DataError("target column cannot also be a feature")
        unknown = [c for c in feature_columns if c not in frame.columns]
        if unknown:
            raise DataError(f"feature columns not in table: {unknown}")
        if protected_attributes is None:
            protected_attributes = detect_sensitive_attributes(feature_columns)
        protected_attributes = list(protected_attributes)
        unknown = [c for c in protected_attributes if c not in frame.columns]
        if unknown:
            raise DataError(f"protected attributes not in table: {unknown}")

        self._frame = frame
        self._target_column = target_column
        self._feature_columns = tuple(feature_columns)
        self._protected = tuple(protected_attributes)
        self._model = model
        self._cutoff = cutoff
        described = TabularFrame(frame.data[list(dict.fromkeys(feature_columns + protected_attributes))], frame.kinds)
        self._feature_kinds = infer_feature_kinds(described, cutoff)
        self._task_type = task_type or infer_task_type(frame.column(target_column), model.has_proba)
        self._cache: Optional[PredictionSet] = None
        self._lock = threading.Lock()

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    frame = property(lambda self: self._frame)
    target_column = property(lambda self: self._target_column)
    feature_columns = property(lambda self: list(self._feature_columns))
    protected_attributes = property(lambda self: list(self._protected))
    model = property(lambda self: self._model)
    task_type = property(lambda self: self._task_type)
    feature_kinds = property(lambda self: dict(self._feature_kinds))

    @property
    def n(self) -> int:
        return self._frame.row_count

    @property
    def classes(self) -> list:
        return list(self._model.spec.classes)

    @property
    def target(self) -> pd.Series:
        return self._frame.column(self._target_column)

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.target.notna().to_numpy()

    def y_index(self) -> np.ndarray:
        """Target as class indices (classification) with -1 for missing."""
        return _class_index(self.target, self.classes)

    def y_values(self) -> np.ndarray:
        return self.target.to_numpy(dtype=float)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(pd.util.hash_pandas_object(self._frame.data, index=False).values.tobytes())
        h.update(json.dumps(list(self._frame.columns)).encode())
        return h.hexdigest()

    def model_input(self, frame: Optional[TabularFrame] = None) -> np.ndarray:
        frame = frame or self._frame
        return self._model.input_matrix(frame.data)

    def cached_predictions(self) -> Optional[PredictionSet]:
        return self._cache

    def with_frame(self, frame: TabularFrame) -> "ValidationDataset":
        """A new dataset over ``frame`` with the same roles and model, empty cache."""
        return ValidationDataset(
            frame,
            self._target_column,
            self._model,
            protected_attributes=self.protected_attributes,
            feature_columns=self.feature_columns,
            task_type=self._task_type,
            cutoff=self._cutoff,
        )


def score_frame(oracle: "ScoringOracle", data: pd.DataFrame, task_type: TaskType) -> PredictionSet:
    X = oracle.input_matrix(data)
    try:
        proba = np.asarray(oracle.predict_proba(X), dtype=float)
    except ScoringError as exc:
        raise type(exc)(f"scoring rows 0-{len(X) - 1}: {exc}") from exc
    if task_type.is_classification:
        labels = np.argmax(proba, axis=1)
    else:
        labels = proba[:, 0].copy()
    return PredictionSet(proba, labels, oracle.fingerprint)


def get_predictions(ds: ValidationDataset) -> PredictionSet:
    """Score every row once and cache; later calls return the cached set."""
    cached = ds._cache
    if cached is not None and cached.model_fingerprint == ds.model.fingerprint:
        return cached
    with ds._lock:
        cached = ds._cache
        if cached is not None and cached.model_fingerprint == ds.model.fingerprint:
            return cached
        logger.debug("scoring %d rows with model %s", ds.n, ds.model.fingerprint[:12])
        preds = score_frame(ds.model, ds.frame.data, ds.task_type)
        ds._cache = preds
        return preds
