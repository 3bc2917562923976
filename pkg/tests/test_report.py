import csv
import json
import logging

import pytest

from modelaudit.errors import InvalidBundle
from modelaudit.experiment import ExperimentConfig, run_experiment
from modelaudit.report import (
    build_figures,
    html_text,
    load_bundle,
    metric_rows,
    render_html,
    render_json,
    validate_document,
    write_report,
)


@pytest.fixture(scope="module")
def fixture_bundle():
    from modelaudit import fixtures
    from modelaudit.dataset import ValidationDataset
    from modelaudit.oracle import ScoringOracle

    frame = fixtures.credit_frame(0, 1000)
    oracle = ScoringOracle.from_document(fixtures.credit_logreg_document())
    ds = ValidationDataset(frame, fixtures.TARGET, oracle, protected_attributes=["gender"])
    return run_experiment(ds, ExperimentConfig(profile="quick"), executor="sequential")


@pytest.fixture(scope="module")
def uncertainty_only():
    from modelaudit import fixtures
    from modelaudit.dataset import ValidationDataset
    from modelaudit.oracle import ScoringOracle

    frame = fixtures.credit_frame(0, 1000)
    oracle = ScoringOracle.from_document(fixtures.credit_logreg_document())
    ds = ValidationDataset(frame, fixtures.TARGET, oracle, protected_attributes=["gender"])
    return run_experiment(ds, ExperimentConfig(suites=["uncertainty"], profile="quick"), executor="sequential")


def test_fixture_report_matches_schema(fixture_bundle, tmp_path):
    path = render_json(fixture_bundle, tmp_path / "report.json")
    doc = json.loads(path.read_text())
    validate_document(doc)
    assert doc["schema_version"] == "1"


def test_round_trip(fixture_bundle, tmp_path):
    path = render_json(fixture_bundle, tmp_path / "report.json")
    assert load_bundle(path) == json.loads(json.dumps(fixture_bundle.to_dict()))


def test_empty_violations_present(uncertainty_only, tmp_path):
    text = render_json(uncertainty_only, tmp_path / "r.json").read_text()
    assert uncertainty_only.suites[0].violations == []
    assert '"violations": []' in text


def test_stable_key_order(fixture_bundle, tmp_path):
    a = render_json(fixture_bundle, tmp_path / "a.json").read_text()
    b = render_json(fixture_bundle, tmp_path / "b.json").read_text()
    assert a == b
    doc = json.loads(a)
    assert list(doc) == sorted(doc)


def test_no_suite_bundle_rejected(fixture_bundle, tmp_path):
    doc = fixture_bundle.to_dict()
    doc["suites"] = []
    with pytest.raises(InvalidBundle):
        validate_document(doc)
    with pytest.raises(InvalidBundle):
        render_html(doc, tmp_path / "r.html")


def test_schema_violation_reports_location(fixture_bundle):
    doc = json.loads(json.dumps(fixture_bundle.to_dict()))
    doc["suites"][0]["status"] = "bogus"
    with pytest.raises(InvalidBundle, match="suites"):
        validate_document(doc)


def test_load_bundle_bad_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(InvalidBundle):
        load_bundle(p)


def test_html_sections(fixture_bundle):
    html = html_text(fixture_bundle)
    for needle in ("Fairness", "Compliance", "Uncertainty", "0.74", "EEOC_80", "<svg"):
        assert needle in html, needle
    # self-contained: no stylesheet, script or image is fetched from elsewhere
    assert "<link" not in html and "<script" not in html
    assert 'src="http' not in html and 'href="http' not in html


def test_html_title_in_head_and_banner(fixture_bundle):
    html = html_text(fixture_bundle, title="Quarterly credit audit")
    assert "<title>Quarterly credit audit</title>" in html
    assert "<h1>Quarterly credit audit</h1>" in html


def test_title_is_escaped(fixture_bundle):
    html = html_text(fixture_bundle, title="<script>x</script>")
    assert "<script>x</script>" not in html


def test_missing_logo_warns(fixture_bundle, tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        path = render_html(fixture_bundle, tmp_path / "r.html", logo=tmp_path / "nope.png")
    assert path.exists()
    assert any("logo" in r.getMessage() for r in caplog.records)


def test_logo_embedded(fixture_bundle, tmp_path):
    logo = tmp_path / "logo.png"
    logo.write_bytes(b"\x89PNG\r\n\x1a\nfake")
    html = html_text(fixture_bundle, logo=logo)
    assert "data:image/png;base64," in html


def test_figures_deterministic(fixture_bundle):
    a = build_figures(fixture_bundle)
    b = build_figures(fixture_bundle)
    assert a == b
    assert {"reliability", "robustness_curve", "selection_rates_gender"} <= set(a)


def test_write_report_outputs(fixture_bundle, tmp_path):
    paths = write_report(fixture_bundle, tmp_path / "out")
    for key in ("json", "csv", "html"):
        assert paths[key].exists()
    assert paths["csv"].parent == paths["json"].parent
    assert paths["figures"] and all(p.suffix == ".svg" and p.parent.name == "figures" for p in paths["figures"])
    with open(paths["csv"], newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and set(rows[0]) == {"suite", "status", "metric", "value"}
    assert len(rows) == len(metric_rows(fixture_bundle))


def test_metric_rows_flatten_paths(fixture_bundle):
    rows = metric_rows(fixture_bundle)
    names = [r[2] for r in rows if r[0] == "uncertainty"]
    assert "ece" in names
    assert all(r[0] in {"fairness", "robustness", "uncertainty", "resilience", "sensitivity"} for r in rows)
