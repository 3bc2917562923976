"""Suite orchestration: profiles, concurrent fan-out, verdicts and the result bundle."""

from __future__ import annotations

import concurrent.futures as cf
import dataclasses
import hashlib
import json
import logging
import math
import os
import threading
import time
import traceback
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Callable, Optional

import numpy as np

from . import __version__
from .dataset import TaskType, ValidationDataset, get_predictions
from .errors import ModelAuditError, NoSlices
from .fairness import (
    DEFAULT_THRESHOLDS as FAIRNESS_THRESHOLDS,
    MIN_GROUP_SHARE,
    check_eeoc_80,
    check_question21,
    compute_fairness_metrics,
    ecoa_findings,
    group_confusions,
    protected_groups,
)
from .resilience import adwin_scan, classify_drift
from .robustness import (
    PerturbationSpec,
    attack_accuracy,
    beam_search_slices,
    permutation_importance,
    robustness_curve,
)
from .uncertainty import (
    classification_scores,
    conformal_calibrate,
    ece,
    evaluate_coverage,
    interval_coverage,
    regression_scores,
    split_indices,
)

log = logging.getLogger(__name__)

SUITE_ORDER = ("fairness", "robustness", "uncertainty", "resilience", "sensitivity")
STATUS_RANK = {"pass": 0, "warn": 1, "fail": 2, "error": 3}
EXIT_CODES = dict(STATUS_RANK)

PROFILES = {
    "quick": {
        "perturbation_levels": [0.0, 0.5, 1.0],
        "attack_epsilons": [0.0, 0.1, 0.5],
        "pgd_steps": 5,
        "beam_width": 10,
        "beam_depth": 2,
        "min_support_fraction": 0.1,
        "conformal_seeds": 5,
        "conformal_split": 0.5,
        "permutation_repeats": 3,
        "ecoa_rows": 5,
        "drift_bins": 10,
    },
    "medium": {
        "perturbation_levels": [0.0, 0.25, 0.5, 0.75, 1.0],
        "attack_epsilons": [0.0, 0.05, 0.1, 0.25, 0.5],
        "pgd_steps": 10,
        "beam_width": 10,
        "beam_depth": 3,
        "min_support_fraction": 0.1,
        "conformal_seeds": 10,
        "conformal_split": 0.5,
        "permutation_repeats": 5,
        "ecoa_rows": 5,
        "drift_bins": 10,
    },
    "full": {
        "perturbation_levels": [round(0.1 * i, 1) for i in range(11)],
        "attack_epsilons": [0.0, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5],
        "pgd_steps": 20,
        "beam_width": 20,
        "beam_depth": 3,
        "min_support_fraction": 0.1,
        "conformal_seeds": 20,
        "conformal_split": 0.5,
        "permutation_repeats": 10,
        "ecoa_rows": 10,
        "drift_bins": 10,
    },
}

DEFAULT_THRESHOLDS = {
    **FAIRNESS_THRESHOLDS,
    "min_group_share": MIN_GROUP_SHARE,
    "ece_warn": 0.05,
    "ece_fail": 0.15,
    "conformal_alpha": 0.1,
    "coverage_tolerance": 0.03,
    "slice_gap_warn": 0.10,
    "perturbation_drop_warn": 0.10,
    "attack_drop_warn": 0.25,
    "protected_importance_warn": 0.01,
}


@dataclass
class ExperimentConfig:
    suites: list = field(default_factory=lambda: list(SUITE_ORDER))
    profile: str = "medium"
    thresholds: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: Optional[str] = None
    title: Optional[str] = None
    logo: Optional[str] = None

    def __post_init__(self):
        if not self.suites:
            raise ValueError("at least one suite is required")
        unknown = [s for s in self.suites if s not in SUITE_ORDER]
        if unknown:
            raise ValueError(f"unknown suites: {unknown}; choose from {list(SUITE_ORDER)}")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        bad = [k for k in self.thresholds if k not in DEFAULT_THRESHOLDS]
        if bad:
            raise ValueError(f"unknown threshold keys: {bad}")
        # run order is fixed regardless of how suites were listed
        self.suites = [s for s in SUITE_ORDER if s in self.suites]

    @property
    def params(self) -> dict:
        return dict(PROFILES[self.profile])

    @property
    def merged_thresholds(self) -> dict:
        return {**DEFAULT_THRESHOLDS, **self.thresholds}

    def hash(self) -> str:
        doc = {"suites": self.suites, "profile": self.profile, "thresholds": self.merged_thresholds,
               "seed": self.seed}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass
class SuiteResult:
    suite: str
    status: str
    metrics: dict
    violations: list = field(default_factory=list)
    duration_ms: float = 0.0
    error: Optional[str] = None

    def payload(self) -> dict:
        """Everything except timing: the part that must be reproducible."""
        return {"suite": self.suite, "status": self.status, "metrics": self.metrics,
                "violations": self.violations, "error": self.error}

    def to_dict(self) -> dict:
        out = self.payload()
        out["duration_ms"] = self.duration_ms
        return out


@dataclass
class ResultBundle:
    manifest: dict
    suites: list
    overall: str

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.overall]

    def suite(self, name: str) -> SuiteResult:
        for s in self.suites:
            if s.suite == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "schema_version": "1",
            "manifest": self.manifest,
            "overall": self.overall,
            "exit_code": self.exit_code,
            "suites": [s.to_dict() for s in self.suites],
        }

    def metrics_json(self) -> str:
        """Canonical JSON of every suite's payload; timestamps and durations excluded."""
        return json.dumps([s.payload() for s in self.suites], sort_keys=True, separators=(",", ":"))


def jsonable(obj):
    """Plain-JSON view of results: numpy scalars unwrapped, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if hasattr(obj, "to_dict"):
        return jsonable(obj.to_dict())
    if dataclasses.is_dataclass(obj):
        return jsonable(dataclasses.asdict(obj))
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def worst_status(statuses) -> str:
    return max(statuses, key=lambda s: STATUS_RANK[s], default="pass")


def _breach(rule: str, detail: dict, attribute=None) -> dict:
    return {"rule": rule, "attribute": attribute, "detail": detail, "violated": True}


# --- suites -----------------------------------------------------------------

def fairness_suite(ds: ValidationDataset, params: dict, th: dict, seed: int):
    if ds.task_type is not TaskType.BINARY:
        return "warn", {"skipped": f"fairness metrics need a binary task, got {ds.task_type.value}"}, []
    if not ds.protected_attributes:
        return "warn", {"skipped": "no protected attributes declared or detected"}, []
    preds = get_predictions(ds)
    y = ds.y_index()
    keep = y >= 0
    fair_th = {k: th[k] for k in FAIRNESS_THRESHOLDS}
    attributes = {}
    metric_failures = []
    for attr in ds.protected_attributes:
        groups = protected_groups(ds, attr)
        sel = keep & np.array([g is not None for g in groups])
        try:
            confusions = group_confusions(y[sel], preds.labels_pred[sel], groups[sel])
        except ModelAuditError as exc:
            attributes[attr] = {"error": str(exc)}
            continue
        metrics = compute_fairness_metrics(ds, preds, attr, thresholds=fair_th)
        attributes[attr] = {
            "reference_group": metrics[1].reference_group,
            "groups": [c.to_dict() for c in confusions],
            "metrics": [m.to_dict() for m in metrics],
        }
        metric_failures += [f"{attr}:{m.metric_name}" for m in metrics if m.verdict == "fail"]
    findings = check_eeoc_80(ds, preds) + check_question21(ds, th["min_group_share"])
    try:
        findings.append(ecoa_findings(ds, preds, max_rows=params["ecoa_rows"]))
    except ModelAuditError as exc:
        log.warning("adverse-action reasons unavailable: %s", exc)
    compliance = [f.to_dict() for f in findings]
    violations = [f.to_dict() for f in findings if f.violated]
    metrics = {"attributes": attributes, "compliance": compliance, "metric_failures": metric_failures}
    regulatory = [f for f in findings if f.violated and f.rule in ("EEOC_80", "EEOC_Q21")]
    if regulatory:
        status = "fail"
    elif violations or metric_failures:
        status = "warn"
    else:
        status = "pass"
    return status, metrics, violations


def robustness_suite(ds: ValidationDataset, params: dict, th: dict, seed: int):
    preds = get_predictions(ds)
    spec = PerturbationSpec(params["perturbation_levels"], seed=seed)
    curve = robustness_curve(ds, spec, seed)
    metrics = {"metric": "accuracy" if ds.task_type.is_classification else "rmse",
               "perturbation_curve": [{"level": lv, "value": v} for lv, v in curve]}
    violations = []
    base = curve[0][1]
    worst = curve[-1][1]
    drop = (base - worst) if ds.task_type.is_classification else (worst - base)
    if drop > th["perturbation_drop_warn"]:
        violations.append(_breach("PERTURBATION_DROP", {"drop": drop, "threshold": th["perturbation_drop_warn"],
                                                        "level": curve[-1][0]}))
    if ds.task_type.is_classification and ds.model.differentiable:
        eps = params["attack_epsilons"]
        fgsm_curve = attack_accuracy(ds, eps, "fgsm")
        pgd_curve = attack_accuracy(ds, eps, "pgd", steps=params["pgd_steps"])
        metrics["attacks"] = {
            "epsilon_units": "feature standard deviations",
            "fgsm": [{"epsilon": e, "accuracy": a} for e, a in fgsm_curve],
            "pgd": [{"epsilon": e, "accuracy": a} for e, a in pgd_curve],
        }
        attack_drop = fgsm_curve[0][1] - min(a for _, a in pgd_curve + fgsm_curve)
        if attack_drop > th["attack_drop_warn"]:
            violations.append(_breach("ADVERSARIAL_DROP", {"drop": attack_drop, "threshold": th["attack_drop_warn"],
                                                           "max_epsilon": max(eps)}))
    else:
        metrics["attacks"] = {"skipped": "gradient attacks need a differentiable classifier"}
    if ds.task_type.is_classification:
        n_lab = int((ds.y_index() >= 0).sum())
        min_support = max(10, int(math.ceil(params["min_support_fraction"] * n_lab)))
        try:
            slices = beam_search_slices(ds, preds, params["beam_width"], params["beam_depth"], min_support)
        except NoSlices:
            slices = []
        metrics["slices"] = {"min_support": min_support, "width": params["beam_width"],
                             "max_depth": params["beam_depth"], "found": [s.to_dict() for s in slices[:20]]}
        for s in slices[:3]:
            if s.gap >= th["slice_gap_warn"]:
                violations.append(_breach("WEAK_SLICE", {"predicate": str(s.predicate), "gap": s.gap,
                                                         "support": s.support, "threshold": th["slice_gap_warn"]}))
    return ("warn" if violations else "pass"), metrics, violations


def uncertainty_suite(ds: ValidationDataset, params: dict, th: dict, seed: int):
    preds = get_predictions(ds)
    alpha = th["conformal_alpha"]
    labelled = np.flatnonzero(ds.labeled_mask)
    metrics: dict = {"alpha": alpha}
    violations = []
    status = "pass"
    if ds.task_type.is_classification:
        y = ds.y_index()[labelled]
        proba = np.asarray(preds.proba)[labelled]
        value, bins = ece(proba, y)
        metrics["ece"] = value
        metrics["reliability"] = bins.to_dict()
        if value > th["ece_fail"]:
            status = "fail"
        if value > th["ece_warn"]:
            violations.append(_breach("ECE_THRESHOLD", {"ece": value, "warn": th["ece_warn"], "fail": th["ece_fail"]}))
        scores = classification_scores(proba, y)
    else:
        y = ds.y_values()[labelled].astype(float)
        y_pred = np.asarray(preds.labels_pred)[labelled]
        scores = regression_scores(y, y_pred)
    runs = []
    for k in range(params["conformal_seeds"]):
        cal, ev = split_indices(len(labelled), params["conformal_split"], seed + k)
        calibrator = conformal_calibrate(scores[cal], alpha)
        if ds.task_type.is_classification:
            cov, size = evaluate_coverage(calibrator, proba[ev], y[ev])
        else:
            cov, size = interval_coverage(calibrator, y[ev], y_pred[ev])
        runs.append({"seed": seed + k, "q_hat": calibrator.q_hat, "coverage": cov, "set_size": size})
    mean_cov = float(np.mean([r["coverage"] for r in runs]))
    metrics["conformal"] = {"runs": runs, "mean_coverage": mean_cov,
                            "mean_set_size": float(np.mean([r["set_size"] for r in runs])),
                            "calibration_fraction": params["conformal_split"]}
    if mean_cov < 1 - alpha - th["coverage_tolerance"]:
        violations.append(_breach("CONFORMAL_COVERAGE", {"mean_coverage": mean_cov, "target": 1 - alpha,
                                                         "tolerance": th["coverage_tolerance"]}))
    if status != "fail" and violations:
        status = "warn"
    return status, metrics, violations


def resilience_suite(ds: ValidationDataset, params: dict, th: dict, seed: int):
    """Earlier half of the rows against the later half, plus ADWIN over the error stream."""
    preds = get_predictions(ds)
    n = ds.n
    half = n // 2
    if half < 10:
        return "warn", {"skipped": "too few rows to compare windows"}, []
    ref = ds.frame.take(np.arange(half))
    cur = ds.frame.take(np.arange(half, n))
    labels = np.asarray(preds.labels_pred)
    predicted = (labels[:half], labels[half:]) if ds.task_type.is_classification else None
    cols = [c for c in ds.feature_columns]
    report = classify_drift(ref, cur, ds.target_column, ds.model if predicted is not None else None,
                            cols, bins=params["drift_bins"], predicted=predicted)
    metrics = {"windows": {"reference_rows": [0, half - 1], "current_rows": [half, n - 1]},
               "drift": report.to_dict()}
    violations = []
    if ds.task_type.is_classification:
        y = ds.y_index()
        keep = y >= 0
        errors = (labels[keep] != y[keep]).astype(float)
        fired = adwin_scan(errors)
        metrics["adwin"] = {"stream": "per-row error indicator in row order", "detections": fired}
        if fired:
            violations.append(_breach("ADWIN_DRIFT", {"detections": fired[:10]}))
    for kind in ("covariate", "prior", "concept", "posterior"):
        if getattr(report, kind):
            violations.append(_breach(f"{kind.upper()}_DRIFT", {"within_dataset": True}))
    return ("warn" if violations else "pass"), metrics, violations


def sensitivity_suite(ds: ValidationDataset, params: dict, th: dict, seed: int):
    importances = permutation_importance(ds, repeats=params["permutation_repeats"], seed=seed)
    metrics = {"permutation_importance": [r.to_dict() for r in importances],
               "repeats": params["permutation_repeats"]}
    violations = []
    for r in importances:
        if r.feature in ds.protected_attributes and r.mean_drop > th["protected_importance_warn"]:
            violations.append(_breach("PROTECTED_FEATURE_RELIANCE",
                                      {"mean_drop": r.mean_drop, "threshold": th["protected_importance_warn"]},
                                      r.feature))
    return ("warn" if violations else "pass"), metrics, violations


SUITES: dict = {
    "fairness": fairness_suite,
    "robustness": robustness_suite,
    "uncertainty": uncertainty_suite,
    "resilience": resilience_suite,
    "sensitivity": sensitivity_suite,
}


def run_suite(name: str, ds: ValidationDataset, params: dict, thresholds: dict, seed: int,
              fn: Optional[Callable] = None) -> SuiteResult:
    """Run one suite, converting any exception into ``status="error"``."""
    fn = fn or SUITES[name]
    start = time.perf_counter()
    try:
        status, metrics, violations = fn(ds, params, thresholds, seed)
        result = SuiteResult(name, status, jsonable(metrics), jsonable(violations))
    except Exception as exc:  # isolation: one broken suite must not sink the run
        log.error("suite %s failed: %s", name, exc)
        log.debug("%s", traceback.format_exc())
        result = SuiteResult(name, "error", {}, [], error=f"{type(exc).__name__}: {exc}")
    result.duration_ms = (time.perf_counter() - start) * 1000.0
    return result


class ResultCache:
    """In-memory suite results keyed by (suite, data, model, parameters, seed)."""

    def __init__(self):
        self._store: dict = {}
        self._lock = threading.Lock()
        self.hits = 0

    @staticmethod
    def key(name, ds, params, thresholds, seed) -> str:
        doc = json.dumps([name, ds.fingerprint(), ds.model.fingerprint, params, thresholds, seed], sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()

    def get(self, key):
        with self._lock:
            hit = self._store.get(key)
            if hit is not None:
                self.hits += 1
            return hit

    def put(self, key, result: SuiteResult):
        with self._lock:
            self._store[key] = result


def default_workers(n_suites: int) -> int:
    try:
        cpus = len(os.sched_getaffinity(0))
    except AttributeError:
        cpus = os.cpu_count() or 1
    return max(1, min(n_suites, cpus))


def run_experiment(ds: ValidationDataset, config: ExperimentConfig, executor: str = "auto",
                   workers: Optional[int] = None, cache: Optional[ResultCache] = None,
                   suite_overrides: Optional[dict] = None) -> ResultBundle:
    """Fill the prediction cache once, fan the suites out, merge in fixed order.

    ``executor`` is ``process``, ``thread``, ``sequential`` or ``auto`` (processes
    when more than one worker is available). ``suite_overrides`` swaps suite
    callables by name, which is how tests inject failures.
    """
    started = datetime.now(timezone.utc)
    get_predictions(ds)  # one scoring pass before fan-out; workers inherit the cache
    params = config.params
    th = config.merged_thresholds
    overrides = suite_overrides or {}
    workers = workers or default_workers(len(config.suites))
    if executor == "auto":
        executor = "process" if workers > 1 else "sequential"
    if executor not in ("process", "thread", "sequential"):
        raise ValueError(f"unknown executor {executor!r}")

    results: dict = {}
    pending = []
    for name in config.suites:
        key = ResultCache.key(name, ds, params, th, config.seed) if cache is not None else None
        hit = cache.get(key) if cache is not None and name not in overrides else None
        if hit is not None:
            results[name] = hit
        else:
            pending.append((name, key))

    log.info("running suites %s with %s executor (%d workers)", [n for n, _ in pending], executor, workers)
    if executor == "sequential" or not pending:
        for name, _ in pending:
            results[name] = run_suite(name, ds, params, th, config.seed, overrides.get(name))
    else:
        pool_cls = cf.ProcessPoolExecutor if executor == "process" else cf.ThreadPoolExecutor
        with pool_cls(max_workers=workers) as pool:
            futures = {
                pool.submit(run_suite, name, ds, params, th, config.seed, overrides.get(name)): name
                for name, _ in pending
            }
            for fut in cf.as_completed(futures):
                name = futures[fut]
                try:
                    results[name] = fut.result()
                except Exception as exc:  # e.g. a worker process died
                    results[name] = SuiteResult(name, "error", {}, [], error=f"{type(exc).__name__}: {exc}")
    if cache is not None:
        for name, key in pending:
            if name not in overrides and results[name].status != "error":
                cache.put(key, results[name])

    ordered = [results[name] for name in config.suites]
    manifest = {
        "timestamp": started.isoformat(timespec="seconds"),
        "tool_version": __version__,
        "config_hash": config.hash(),
        "profile": config.profile,
        "seed": config.seed,
        "suites": list(config.suites),
        "dataset_fingerprint": ds.fingerprint(),
        "model_fingerprint": ds.model.fingerprint,
        "rows": ds.n,
        "target": ds.target_column,
        "task_type": ds.task_type.value,
        "protected_attributes": list(ds.protected_attributes),
        "title": config.title,
    }
    return ResultBundle(manifest, ordered, worst_status(r.status for r in ordered))
