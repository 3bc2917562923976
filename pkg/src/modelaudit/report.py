"""Report rendering: schema-checked JSON, a flat metrics CSV, SVG figures and a self-contained HTML page."""

import base64
import csv
import io
import json
import logging
import math
import mimetypes
from importlib import resources
from pathlib import Path
from typing import Optional

import jinja2
import jsonschema
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import InvalidBundle  # noqa: E402

logger = logging.getLogger(__name__)

SECTION_TITLES = {
    "fairness": "Fairness",
    "robustness": "Robustness",
    "uncertainty": "Uncertainty",
    "resilience": "Resilience",
    "sensitivity": "Sensitivity",
}
STATUS_COLOURS = {"pass": "#2e7d32", "warn": "#ef8f00", "fail": "#c62828", "error": "#6a1b9a"}

_SCHEMA = None


def report_schema() -> dict:
    global _SCHEMA
    if _SCHEMA is None:
        text = resources.files("modelaudit").joinpath("schemas/report_v1.json").read_text(encoding="utf-8")
        _SCHEMA = json.loads(text)
    return _SCHEMA


def bundle_document(bundle) -> dict:
    """Accept a ResultBundle or an already serialized dict and return the dict form."""
    if isinstance(bundle, dict):
        return bundle
    if hasattr(bundle, "to_dict"):
        return bundle.to_dict()
    raise InvalidBundle(f"cannot render object of type {type(bundle).__name__}")


def validate_document(doc: dict) -> dict:
    if not isinstance(doc, dict):
        raise InvalidBundle("report document must be a JSON object")
    if not doc.get("suites"):
        raise InvalidBundle("bundle contains no suite results")
    validator = jsonschema.Draft202012Validator(report_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        first = errors[0]
        where = "/" + "/".join(str(p) for p in first.absolute_path)
        raise InvalidBundle(f"report does not match schema v1 at {where}: {first.message}")
    return doc


def to_json_text(bundle) -> str:
    doc = validate_document(bundle_document(bundle))
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def render_json(bundle, path) -> Path:
    path = Path(path)
    text = to_json_text(bundle)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def load_bundle(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidBundle(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    return validate_document(doc)


# ---------------------------------------------------------------- metrics CSV

def _flatten(prefix: str, value, out: list):
    if isinstance(value, dict):
        for key, item in value.items():
            _flatten(f"{prefix}.{key}" if prefix else str(key), item, out)
    elif isinstance(value, list):
        for i, item in enumerate(value):
            _flatten(f"{prefix}[{i}]", item, out)
    else:
        out.append((prefix, value))


def metric_rows(bundle) -> list:
    """Every scalar leaf of every suite's metrics as (suite, status, path, value)."""
    doc = bundle_document(bundle)
    rows = []
    for suite in doc.get("suites", []):
        leaves: list = []
        _flatten("", suite.get("metrics") or {}, leaves)
        for key, value in leaves:
            rows.append((suite["suite"], suite["status"], key, "" if value is None else value))
    return rows


def write_metrics_csv(bundle, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["suite", "status", "metric", "value"])
        writer.writerows(metric_rows(bundle))
    return path


# -------------------------------------------------------------------- figures

def _svg(fig) -> str:
    buf = io.StringIO()
    with matplotlib.rc_context({"svg.hashsalt": "modelaudit", "svg.fonttype": "none"}):
        fig.savefig(buf, format="svg", bbox_inches="tight", metadata={"Date": None})
    plt.close(fig)
    text = buf.getvalue()
    start = text.find("<svg")
    return text[start:] if start >= 0 else text


def _suite(doc: dict, name: str) -> Optional[dict]:
    for suite in doc.get("suites", []):
        if suite["suite"] == name and isinstance(suite.get("metrics"), dict):
            return suite["metrics"]
    return None


def reliability_figure(reliability: dict) -> str:
    bins = [b for b in reliability.get("bins", []) if b.get("count")]
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    ax.plot([0, 1], [0, 1], linestyle="--", color="#888888", linewidth=1, label="perfect calibration")
    if bins:
        centres = [(b["lo"] + b["hi"]) / 2 for b in bins]
        width = bins[0]["hi"] - bins[0]["lo"]
        ax.bar(centres, [b["acc"] for b in bins], width=width * 0.9, alpha=0.6, color="#1565c0",
               edgecolor="#0d47a1", label="accuracy")
        ax.plot([b["conf"] for b in bins], [b["acc"] for b in bins], marker="o", color="#c62828",
                linewidth=1, label="mean confidence")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    ax.set_title("Reliability diagram")
    ax.legend(loc="upper left", fontsize=8)
    return _svg(fig)


def curve_figure(series: dict, xlabel: str, ylabel: str, title: str) -> str:
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for label, points in series.items():
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        ax.plot(xs, ys, marker="o", linewidth=1.5, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if len(series) > 1:
        ax.legend(fontsize=8)
    return _svg(fig)


def bar_figure(labels: list, values: list, xlabel: str, title: str, threshold: Optional[float] = None) -> str:
    height = max(2.2, 0.32 * len(labels) + 1.0)
    fig, ax = plt.subplots(figsize=(5.0, height))
    positions = list(range(len(labels)))
    ax.barh(positions, values, color="#1565c0", alpha=0.8)
    ax.set_yticks(positions)
    ax.set_yticklabels(labels)
    ax.invert_yaxis()
    if threshold is not None:
        ax.axvline(threshold, color="#c62828", linestyle="--", linewidth=1)
    ax.set_xlabel(xlabel)
    ax.set_title(title)
    ax.grid(axis="x", alpha=0.3)
    return _svg(fig)


def _finite(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def build_figures(bundle) -> dict:
    """Render every chart the bundle has data for. Keys are stable file stems."""
    doc = bundle_document(bundle)
    figures = {}

    fairness = _suite(doc, "fairness")
    if fairness:
        for attr, info in sorted((fairness.get("attributes") or {}).items()):
            groups = [g for g in info.get("groups", []) if _finite(g.get("selection_rate"))]
            if groups:
                figures[f"selection_rates_{attr}"] = bar_figure(
                    [str(g["group_value"]) for g in groups], [g["selection_rate"] for g in groups],
                    "selection rate", f"Selection rate by {attr}")

    robustness = _suite(doc, "robustness")
    if robustness:
        curve = robustness.get("perturbation_curve") or []
        if curve:
            figures["robustness_curve"] = curve_figure(
                {robustness.get("metric", "metric"): [(p["level"], p["value"]) for p in curve]},
                "noise level (feature standard deviations)", robustness.get("metric", "metric"),
                "Performance under Gaussian perturbation")
        attacks = robustness.get("attacks") or {}
        if attacks.get("fgsm"):
            series = {kind.upper(): [(p["epsilon"], p["accuracy"]) for p in attacks[kind]]
                      for kind in ("fgsm", "pgd") if attacks.get(kind)}
            figures["attack_curve"] = curve_figure(series, "epsilon (feature standard deviations)", "accuracy",
                                                   "Accuracy under gradient attacks")

    uncertainty = _suite(doc, "uncertainty")
    if uncertainty and uncertainty.get("reliability"):
        figures["reliability"] = reliability_figure(uncertainty["reliability"])

    resilience = _suite(doc, "resilience")
    if resilience:
        features = ((resilience.get("drift") or {}).get("evidence") or {}).get("features") or []
        features = [f for f in features if _finite(f.get("psi"))]
        if features:
            figures["drift_psi"] = bar_figure([f["feature"] for f in features], [f["psi"] for f in features],
                                              "PSI", "Feature drift (reference vs current)", threshold=0.25)

    sensitivity = _suite(doc, "sensitivity")
    if sensitivity:
        rows = [r for r in sensitivity.get("permutation_importance") or [] if _finite(r.get("mean_drop"))]
        if rows:
            figures["importance"] = bar_figure([r["feature"] for r in rows], [r["mean_drop"] for r in rows],
                                               "mean score drop", "Permutation importance")
    return figures


def write_figures(figures: dict, directory) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, svg in figures.items():
        target = directory / f"{name}.svg"
        target.write_text(svg, encoding="utf-8")
        written.append(target)
    return written


# ----------------------------------------------------------------------- HTML

def fmt(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        if not math.isfinite(value):
            return str(value)
        return f"{value:.4g}"
    if isinstance(value, (list, tuple)):
        return ", ".join(fmt(v) for v in value)
    if isinstance(value, dict):
        return "; ".join(f"{k}={fmt(v)}" for k, v in value.items())
    return str(value)


def _logo_data_uri(logo) -> Optional[str]:
    if not logo:
        return None
    path = Path(logo)
    if not path.is_file():
        logger.warning("logo file %s not found; rendering without it", path)
        return None
    mime = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
    return f"data:{mime};base64," + base64.b64encode(path.read_bytes()).decode("ascii")


def _environment() -> jinja2.Environment:
    env = jinja2.Environment(loader=jinja2.PackageLoader("modelaudit", "templates"),
                             autoescape=jinja2.select_autoescape(["html", "j2"]),
                             trim_blocks=True, lstrip_blocks=True, undefined=jinja2.StrictUndefined)
    env.filters["fmt"] = fmt
    return env


def html_text(bundle, title: Optional[str] = None, logo=None, figures: Optional[dict] = None) -> str:
    doc = validate_document(bundle_document(bundle))
    if figures is None:
        figures = build_figures(doc)
    manifest = doc["manifest"]
    title = title or manifest.get("title") or "Model validation report"
    suites = {s["suite"]: s for s in doc["suites"]}
    compliance = []
    fairness = suites.get("fairness")
    if fairness and isinstance(fairness.get("metrics"), dict):
        compliance = fairness["metrics"].get("compliance") or []
    template = _environment().get_template("report.html.j2")
    return template.render(
        title=title, logo=_logo_data_uri(logo), doc=doc, manifest=manifest, suites=suites,
        order=[name for name in SECTION_TITLES if name in suites], section_titles=SECTION_TITLES,
        compliance=compliance, figures=figures, colours=STATUS_COLOURS)


def render_html(bundle, path, title: Optional[str] = None, logo=None, figures_dir=None) -> Path:
    """Write a single-file HTML report. Figures are inlined and, if figures_dir is given, also saved there."""
    doc = validate_document(bundle_document(bundle))
    figures = build_figures(doc)
    if figures_dir is not None:
        write_figures(figures, figures_dir)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(html_text(doc, title=title, logo=logo, figures=figures), encoding="utf-8")
    return path


def write_report(bundle, out_dir, title: Optional[str] = None, logo=None) -> dict:
    """The full output set: report.json, metrics.csv, report.html and figures/*.svg."""
    out_dir = Path(out_dir)
    doc = bundle_document(bundle)
    paths = {
        "json": render_json(doc, out_dir / "report.json"),
        "csv": write_metrics_csv(doc, out_dir / "metrics.csv"),
        "html": render_html(doc, out_dir / "report.html", title=title, logo=logo, figures_dir=out_dir / "figures"),
    }
    paths["figures"] = sorted((out_dir / "figures").glob("*.svg"))
    return paths
