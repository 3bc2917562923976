import io
import json
import shlex
import sys

import numpy as np
import pandas as pd
import pytest

from modelaudit.cli import main
from modelaudit.oracle import ScoringOracle, load_model_spec
from modelaudit.protocol import selftest, stub_command


@pytest.fixture()
def fx(fixture_dir):
    return fixture_dir


def test_validate_full_fixture(fx, tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["validate", "--data", fx["data"], "--model", fx["logreg"], "--target", "approved",
                 "--protected", "gender", "--profile", "quick", "--out", str(out)])
    assert code == 2
    assert (out / "report.json").exists() and (out / "report.html").exists()
    assert (out / "metrics.csv").exists()
    assert list((out / "figures").glob("*.svg"))
    doc = json.loads((out / "report.json").read_text())
    fairness = next(s for s in doc["suites"] if s["suite"] == "fairness")
    assert any(v["rule"] == "EEOC_80" for v in fairness["violations"])
    assert "EEOC_80" in capsys.readouterr().out


def test_validate_uncertainty_only_passes(fx, tmp_path):
    code = main(["validate", "--data", fx["data"], "--model", fx["logreg"], "--target", "approved",
                 "--suites", "uncertainty", "--out", str(tmp_path / "o")])
    assert code == 0


@pytest.mark.parametrize("argv", [
    ["validate", "--data", "{data}", "--model", "{logreg}"],
    ["validate", "--data", "{data}", "--model", "{logreg}", "--target", "nope"],
    ["validate", "--data", "{data}", "--model", "{logreg}", "--target", "approved", "--suites", "bogus"],
    ["validate", "--data", "{data}", "--model", "{logreg}", "--target", "approved", "--threshold", "ece_warn"],
    ["validate", "--data", "/no/such.csv", "--model", "{logreg}", "--target", "approved"],
    ["validate", "--bogus-flag"],
    ["frobnicate"],
    [],
])
def test_usage_errors_exit_64(fx, argv, tmp_path):
    argv = [a.format(**fx) for a in argv]
    if argv and argv[0] == "validate" and "--out" not in argv and len(argv) > 2:
        argv += ["--out", str(tmp_path / "o")]
    assert main(argv) == 64


def test_bad_model_spec_exit_65(fx, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"version": "1", "kind": "logreg"}))
    assert main(["validate", "--data", fx["data"], "--model", str(bad), "--target", "approved",
                 "--out", str(tmp_path / "o")]) == 65


def test_malformed_table_exit_65(fx, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n3\n")
    assert main(["validate", "--data", str(bad), "--model", fx["logreg"], "--target", "a",
                 "--out", str(tmp_path / "o")]) == 65


def test_drift_identical_files(fx, tmp_path):
    out = tmp_path / "drift.json"
    assert main(["drift", "--reference", fx["data"], "--current", fx["data"], "--out", str(out)]) == 0
    assert json.loads(out.read_text())["any_drift"] is False


def test_drift_shifted_fixture(fx, tmp_path):
    out = tmp_path / "drift.json"
    code = main(["drift", "--reference", fx["data"], "--current", fx["shifted"], "--model", fx["logreg"],
                 "--target", "approved", "--out", str(out)])
    assert code == 2
    doc = json.loads(out.read_text())
    assert doc["covariate"] is True


def test_drift_schema_mismatch(fx, tmp_path):
    other = tmp_path / "other.csv"
    pd.read_csv(fx["data"]).drop(columns=["income"]).to_csv(other, index=False)
    assert main(["drift", "--reference", fx["data"], "--current", str(other)]) == 65


def test_drift_stream(monkeypatch, capsys):
    rng = np.random.default_rng(0)
    values = np.concatenate([rng.random(1000) < 0.2, rng.random(1000) < 0.8]).astype(int)
    monkeypatch.setattr(sys, "stdin", io.StringIO("\n".join(map(str, values)) + "\n"))
    assert main(["drift", "--stream"]) == 2
    monkeypatch.setattr(sys, "stdin", io.StringIO("0.5\n" * 2000))
    assert main(["drift", "--stream"]) == 0


def test_drift_needs_inputs():
    assert main(["drift", "--reference", "x.csv"]) == 64


def test_distill_identical_teachers(fx, tmp_path):
    out = tmp_path / "d"
    chain = tmp_path / "chain.json"
    chain.write_text(json.dumps({"stages": [{"alpha": 0.5, "temperature": 2.0}], "epochs": 50}))
    code = main(["distill", "--data", fx["data"], "--target", "approved",
                 "--teachers", fx["logreg"], fx["logreg"], fx["logreg"], "--chain", str(chain), "--out", str(out)])
    assert code == 0
    report = json.loads((out / "distillation.json").read_text())
    assert np.allclose(report["attention_weights"], 1 / 3)
    student = ScoringOracle(load_model_spec(out / "student.json"))
    frame = pd.read_csv(fx["data"])
    proba = student.predict_proba(student.input_matrix(frame))
    assert proba.shape == (1000, 2)


def test_distill_default_chain(fx, tmp_path):
    assert main(["distill", "--data", fx["data"], "--target", "approved", "--teachers", fx["logreg"],
                 "--out", str(tmp_path / "d")]) == 0


@pytest.mark.parametrize("content", ["{not json", json.dumps({"stages": []}), json.dumps({"stages": [{"x": 1}]})])
def test_distill_bad_chain(fx, tmp_path, content):
    chain = tmp_path / "chain.json"
    chain.write_text(content)
    assert main(["distill", "--data", fx["data"], "--target", "approved", "--teachers", fx["logreg"],
                 "--chain", str(chain), "--out", str(tmp_path / "d")]) == 64


def test_synth(fx, tmp_path):
    out = tmp_path / "synth.csv"
    report = tmp_path / "fidelity.json"
    assert main(["synth", "--data", fx["data"], "--n", "1000", "--out", str(out), "--report", str(report)]) == 0
    real = pd.read_csv(fx["data"])
    synth = pd.read_csv(out)
    assert len(synth) == 1000
    assert list(synth.columns) == list(real.columns)
    assert "max_ks" in json.loads(report.read_text())


def test_synth_deterministic(fx, tmp_path):
    for name in ("a.csv", "b.csv"):
        main(["synth", "--data", fx["data"], "--n", "200", "--seed", "4", "--out", str(tmp_path / name)])
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_report_rerender(fx, tmp_path):
    out = tmp_path / "o"
    main(["validate", "--data", fx["data"], "--model", fx["logreg"], "--target", "approved",
          "--suites", "fairness", "--out", str(out)])
    again = tmp_path / "again"
    assert main(["report", "--bundle", str(out / "report.json"), "--out", str(again), "--title", "Re-run"]) == 0
    assert "<title>Re-run</title>" in (again / "report.html").read_text()


def test_report_invalid_bundle(tmp_path):
    bad = tmp_path / "r.json"
    bad.write_text(json.dumps({"schema_version": "1", "suites": []}))
    assert main(["report", "--bundle", str(bad), "--out", str(tmp_path / "o")]) == 65


def test_score_selftest_stub(capsys):
    assert main(["score-selftest"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4 and all(line.startswith("PASS") for line in lines)


def test_selftest_detects_bad_id():
    results = dict((name, ok) for name, ok, _ in selftest(stub_command(["--bad-id"])))
    assert results["id_echo"] is False


def test_score_selftest_bad_target_string():
    target = shlex.join(stub_command(["--bad-id"]))
    assert main(["score-selftest", "--target", target]) == 2


def test_gen_fixture_deterministic(tmp_path):
    assert main(["gen-fixture", "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-fixture", "--out", str(tmp_path / "b")]) == 0
    for name in ("credit.csv", "credit_shifted.csv", "credit_logreg.json", "credit_gbm.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gen_fixture_rows_validation(tmp_path):
    assert main(["gen-fixture", "--out", str(tmp_path), "--rows", "120"]) == 64


def test_log_level_env(monkeypatch, fx, tmp_path, capsys):
    import logging

    monkeypatch.setenv("VALIDATOR_LOG", "DEBUG")
    logging.getLogger().handlers.clear()
    main(["validate", "--data", fx["data"], "--model", fx["logreg"], "--target", "approved",
          "--suites", "uncertainty", "--out", str(tmp_path / "o")])
    assert logging.getLogger().level == logging.DEBUG
    logging.getLogger().handlers.clear()
    logging.getLogger().setLevel(logging.WARNING)


def test_module_entry_point(fx, tmp_path):
    import subprocess

    proc = subprocess.run([sys.executable, "-m", "modelaudit", "validate", "--data", fx["data"],
                           "--model", fx["logreg"]], capture_output=True, text=True)
    assert proc.returncode == 64
    assert "--target" in proc.stderr
