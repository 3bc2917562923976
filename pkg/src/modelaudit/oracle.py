"""Model specs and the uniform scoring interface over them."""

from __future__ import annotations

import hashlib
import json
import math
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import jsonschema
import numpy as np
import pandas as pd
from scipy.special import expit, softmax

from .errors import (
    ArityMismatch,
    DataError,
    InvalidNodeRef,
    ScoringError,
    SpecError,
    UnsupportedCapability,
)
from .protocol import ScorerClient


@dataclass(frozen=True)
class LogRegBody:
    """Linear scorer. One weight row means the binary reduced form ``p1 = sigmoid(w.x + b)``."""

    weights: np.ndarray
    intercepts: np.ndarray
    feature_order: tuple

    @property
    def reduced(self) -> bool:
        return self.weights.shape[0] == 1


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray  # -1 on leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, arity), zeros on internal nodes


@dataclass(frozen=True)
class TreeEnsembleBody:
    trees: tuple
    base_score: np.ndarray
    output_transform: str
    feature_order: tuple
    arity: int


@dataclass(frozen=True)
class ExternalBody:
    transport: str
    target: Union[str, tuple]
    feature_order: tuple
    batch_size: int = 1000
    timeout_ms: int = 30000
    protocol_version: str = "1"
    capabilities: tuple = ("proba",)


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    classes: tuple
    body: object
    document: dict = field(repr=False, compare=False, default_factory=dict)

    @property
    def feature_order(self) -> list:
        return list(self.body.feature_order)


@lru_cache(maxsize=None)
def _schema(name: str) -> dict:
    text = resources.files("modelaudit").joinpath("schemas", name).read_text(encoding="utf-8")
    return json.loads(text)


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def _check_finite(value, pointer):
    if isinstance(value, dict):
        for k, v in value.items():
            _check_finite(v, f"{pointer}/{k}")
    elif isinstance(value, list):
        for i, v in enumerate(value):
            _check_finite(v, f"{pointer}/{i}")
    elif isinstance(value, float) and not math.isfinite(value):
        raise SpecError("non-finite number", pointer)


def _parse_tree(doc: dict, ti: int, n_features: int, arity: Optional[int]):
    nodes = doc["nodes"]
    n = len(nodes)
    feature = np.full(n, -1, dtype=np.int64)
    threshold = np.zeros(n)
    left = np.full(n, -1, dtype=np.int64)
    right = np.full(n, -1, dtype=np.int64)
    values = []
    for i, node in enumerate(nodes):
        where = f"/body/trees/{ti}/nodes/{i}"
        if "leaf" in node:
            leaf = node["leaf"]
            leaf = [float(leaf)] if not isinstance(leaf, list) else [float(v) for v in leaf]
            if arity is None:
                arity = len(leaf)
            elif len(leaf) != arity:
                raise SpecError(f"leaf has {len(leaf)} values, expected {arity}", where + "/leaf")
            values.append((i, leaf))
            continue
        for side in ("left", "right"):
            child = node[side]
            if not 0 <= child < n or child == i:
                raise InvalidNodeRef(f"child index {child} out of range for {n} nodes", f"{where}/{side}")
        if node["feature"] >= n_features:
            raise InvalidNodeRef(f"feature index {node['feature']} out of range", f"{where}/feature")
        feature[i] = node["feature"]
        threshold[i] = node["threshold"]
        left[i] = node["left"]
        right[i] = node["right"]
    value = np.zeros((n, arity or 1))
    for i, leaf in values:
        value[i] = leaf
    # every node reachable from the root at most once, so walks terminate
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    while stack:
        i = stack.pop()
        if seen[i]:
            raise InvalidNodeRef(f"node {i} reachable twice", f"/body/trees/{ti}/nodes/{i}")
        seen[i] = True
        if feature[i] >= 0:
            stack.extend([left[i], right[i]])
    return Tree(feature, threshold, left, right, value), arity


def parse_model_spec(doc: dict) -> ModelSpec:
    """Validate a decoded spec document and build a :class:`ModelSpec`."""
    validator = jsonschema.Draft202012Validator(_schema("model_spec_v1.json"))
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = max(errors, key=lambda e: len(e.absolute_path))
        raise SpecError(err.message, _pointer(err.absolute_path))
    _check_finite(doc, "")
    kind = doc["kind"]
    classes = tuple(doc["classes"])
    body = doc["body"]
    order = tuple(body["feature_order"])
    if kind == "logreg":
        if not classes:
            raise SpecError("classification spec needs classes", "/classes")
        w = np.asarray(body["weights"], dtype=float)
        b = np.asarray(body["intercepts"], dtype=float)
        if w.ndim != 2 or w.shape[1] != len(order):
            raise SpecError(f"weights must be C x {len(order)}", "/body/weights")
        if b.shape != (w.shape[0],):
            raise SpecError("one intercept per weight row", "/body/intercepts")
        if w.shape[0] == 1 and len(classes) != 2:
            raise SpecError("reduced (1-row) form requires exactly 2 classes", "/body/weights")
        if w.shape[0] > 1 and w.shape[0] != len(classes):
            raise SpecError(f"{w.shape[0]} weight rows for {len(classes)} classes", "/body/weights")
        parsed = LogRegBody(w, b, order)
    elif kind == "tree_ensemble":
        transform = body["output_transform"]
        arity = None
        trees = []
        for ti, tdoc in enumerate(body["trees"]):
            tree, arity = _parse_tree(tdoc, ti, len(order), arity)
            trees.append(tree)
        base = np.atleast_1d(np.asarray(body["base_score"], dtype=float))
        if base.size not in (1, arity):
            raise SpecError(f"base_score must be scalar or length {arity}", "/body/base_score")
        if transform == "sigmoid" and (arity != 1 or len(classes) != 2):
            raise SpecError("sigmoid transform needs scalar leaves and 2 classes", "/body/output_transform")
        if transform == "softmax" and (arity != len(classes) or arity < 2):
            raise SpecError("softmax transform needs one leaf value per class", "/body/output_transform")
        parsed = TreeEnsembleBody(tuple(trees), base, transform, order, arity)
    else:
        if not classes:
            raise SpecError("external scorers must declare classes", "/classes")
        target = body["target"]
        parsed = ExternalBody(
            transport=body["transport"],
            target=tuple(target) if isinstance(target, list) else target,
            feature_order=order,
            batch_size=body.get("batch_size", 1000),
            timeout_ms=body.get("timeout_ms", 30000),
            protocol_version=body.get("protocol_version", "1"),
            capabilities=tuple(body.get("capabilities", ["proba"])),
        )
    return ModelSpec(kind, classes, parsed, doc)


def load_model_spec(path) -> ModelSpec:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"invalid JSON: {exc.msg} (line {exc.lineno})") from None
    return parse_model_spec(doc)


def logreg_document(weights, intercepts, feature_order, classes=(0, 1), name=None) -> dict:
    doc = {
        "version": "1",
        "kind": "logreg",
        "classes": list(classes),
        "body": {
            "weights": np.asarray(weights, dtype=float).tolist(),
            "intercepts": np.asarray(intercepts, dtype=float).tolist(),
            "feature_order": list(feature_order),
        },
    }
    if name:
        doc["name"] = name
    return doc


def save_model_spec(spec_or_doc, path) -> None:
    doc = spec_or_doc.document if isinstance(spec_or_doc, ModelSpec) else spec_or_doc
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def spec_fingerprint(doc: dict) -> str:
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _walk(tree: Tree, X: np.ndarray) -> np.ndarray:
    """Leaf values for every row. ``x <= threshold`` and missing values go left."""
    node = np.zeros(len(X), dtype=np.int64)
    rows = np.arange(len(X))
    active = tree.feature[node] >= 0
    while active.any():
        r = rows[active]
        nd = node[r]
        x = X[r, tree.feature[nd]]
        go_left = ~(x > tree.threshold[nd])  # NaN compares False, so it goes left
        node[r] = np.where(go_left, tree.left[nd], tree.right[nd])
        active = tree.feature[node] >= 0
    return tree.value[node]


class ScoringOracle:
    """Scores rows for one :class:`ModelSpec` and counts scoring passes.

    ``call_counter`` increments once per :meth:`predict_proba` call, whatever the
    number of rows or protocol batches.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.call_counter = 0
        self.fingerprint = spec_fingerprint(spec.document)
        self._client: Optional[ScorerClient] = None
        self._client_lock = threading.Lock()
        self._count_lock = threading.Lock()

    @classmethod
    def from_file(cls, path) -> "ScoringOracle":
        return cls(load_model_spec(path))

    @classmethod
    def from_document(cls, doc: dict) -> "ScoringOracle":
        return cls(parse_model_spec(doc))

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_client"] = None
        del state["_client_lock"], state["_count_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._client_lock = threading.Lock()
        self._count_lock = threading.Lock()

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def feature_order(self) -> list:
        return self.spec.feature_order

    @property
    def n_outputs(self) -> int:
        body = self.spec.body
        if self.kind == "tree_ensemble" and body.output_transform == "identity":
            return body.arity
        return len(self.spec.classes)

    @property
    def has_proba(self) -> bool:
        return not (self.kind == "tree_ensemble" and self.spec.body.output_transform == "identity")

    @property
    def supports_logits(self) -> bool:
        if self.kind == "external":
            return "logits" in self.spec.body.capabilities
        return True

    @property
    def differentiable(self) -> bool:
        return self.kind == "logreg"

    def input_matrix(self, data: pd.DataFrame) -> np.ndarray:
        """Pull the spec's features out of a frame, in spec order, as floats."""
        missing = [f for f in self.feature_order if f not in data.columns]
        if missing:
            raise ArityMismatch(f"model features missing from table: {missing}")
        cols = []
        for f in self.feature_order:
            col = data[f]
            if not pd.api.types.is_numeric_dtype(col):
                raise DataError(f"model feature {f!r} is not numeric")
            cols.append(col.to_numpy(dtype=float))
        return np.column_stack(cols) if cols else np.zeros((len(data), 0))

    def _check_rows(self, rows) -> np.ndarray:
        X = np.asarray(rows, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != len(self.feature_order):
            raise ArityMismatch(f"rows have {X.shape[-1]} features, model expects {len(self.feature_order)}")
        return X

    def _external(self) -> ScorerClient:
        with self._client_lock:
            if self._client is None:
                body = self.spec.body
                self._client = ScorerClient(body.transport, body.target, body.batch_size, body.timeout_ms)
            return self._client

    def close(self):
        if self._client is not None:
            self._client.close()
            self._client = None

    def _raw_logits(self, X: np.ndarray) -> np.ndarray:
        body = self.spec.body
        if self.kind == "logreg":
            z = X @ body.weights.T + body.intercepts
            if body.reduced:
                return np.column_stack([np.zeros(len(X)), z[:, 0]])
            return z
        if self.kind == "tree_ensemble":
            total = np.zeros((len(X), body.arity))
            for tree in body.trees:
                total += _walk(tree, X)
            total += body.base_score
            if body.output_transform == "sigmoid":
                return np.column_stack([np.zeros(len(X)), total[:, 0]])
            return total
        raise AssertionError(self.kind)

    def predict_logits(self, rows) -> np.ndarray:
        X = self._check_rows(rows)
        if self.kind == "external":
            if not self.supports_logits:
                raise UnsupportedCapability("external scorer declares proba only")
            return self._external().score(X, op="predict_logits", n_cols=self.n_outputs)
        if self.kind == "logreg" and np.isnan(X).any():
            raise ScoringError("logistic model received missing values")
        return self._raw_logits(X)

    def predict_proba(self, rows) -> np.ndarray:
        X = self._check_rows(rows)
        with self._count_lock:
            self.call_counter += 1
        if self.kind == "external":
            return self._external().score(X, op="predict_proba", n_cols=self.n_outputs)
        if self.kind == "logreg" and np.isnan(X).any():
            raise ScoringError("logistic model received missing values")
        z = self._raw_logits(X)
        if self.kind == "logreg" and self.spec.body.reduced:
            p1 = expit(z[:, 1])
            return np.column_stack([1.0 - p1, p1])
        if self.kind == "tree_ensemble":
            transform = self.spec.body.output_transform
            if transform == "identity":
                return z
            if transform == "sigmoid":
                p1 = expit(z[:, 1])
                return np.column_stack([1.0 - p1, p1])
        return softmax(z, axis=1)

    def score_external(self, rows) -> np.ndarray:
        if self.kind != "external":
            raise UnsupportedCapability("not an external scorer")
        return self.predict_proba(rows)

    def gradient_wrt_input(self, row, class_index: int) -> np.ndarray:
        """Gradient in x of the cross-entropy of ``class_index`` at ``row``.

        Equals ``W.T @ (p - onehot)``; in the binary reduced form ``(p1 - y) * w``.
        """
        if not self.differentiable:
            raise UnsupportedCapability(f"{self.kind} specs have no input gradient")
        x = self._check_rows(row)
        body = self.spec.body
        if body.reduced:
            p1 = expit(x @ body.weights[0] + body.intercepts[0])[0]
            return (p1 - float(class_index == 1)) * body.weights[0]
        p = softmax(x @ body.weights.T + body.intercepts, axis=1)[0]
        p[class_index] -= 1.0
        return body.weights.T @ p

    def gradient_matrix(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Row-wise :meth:`gradient_wrt_input` for a batch."""
        if not self.differentiable:
            raise UnsupportedCapability(f"{self.kind} specs have no input gradient")
        X = self._check_rows(X)
        body = self.spec.body
        if body.reduced:
            p1 = expit(X @ body.weights[0] + body.intercepts[0])
            return (p1 - (y == 1))[:, None] * body.weights[0][None, :]
        p = softmax(X @ body.weights.T + body.intercepts, axis=1)
        p[np.arange(len(X)), y] -= 1.0
        return p @ body.weights
