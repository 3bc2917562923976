"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -s`` to see the lines inline; they are
also repeated in the terminal summary. ``python3 tests/test_acceptance.py``
runs the same checks without pytest.
"""

import itertools
import json
import time
from contextlib import contextmanager

import numpy as np
import pytest

from modelaudit import fixtures
from modelaudit.cli import main
from modelaudit.copula import evaluate_synthesis, fit_copula, sample
from modelaudit.dataset import ValidationDataset, get_predictions
from modelaudit.experiment import ExperimentConfig, default_workers, run_experiment
from modelaudit.fairness import check_question21, disparate_impact, group_confusions
from modelaudit.hpmkd import (
    ChainConfig,
    KDLossConfig,
    StageConfig,
    StudentCapacity,
    TeacherPool,
    attention_weights,
    fuse_soft_labels,
    kd_loss,
    progressive_chain,
    soft_labels,
    train_student,
)
from modelaudit.oracle import ScoringOracle, logreg_document
from modelaudit.resilience import (
    adwin_scan,
    kl_binned,
    kl_from_proportions,
    ks_stat,
    psi,
    psi_from_proportions,
    wasserstein1_empirical,
)
from modelaudit.robustness import AttackConfig, attack_accuracy, beam_search_slices, cross_entropy, fgsm_batch, pgd_batch
from modelaudit.uncertainty import classification_scores, conformal_calibrate, ece, evaluate_coverage

RESULTS: list = []


@contextmanager
def criterion(number: int, name: str, budget_s: float):
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        elapsed = time.perf_counter() - start
        line = f"FAIL criterion {number:>2} {name} ({elapsed:.2f}s): {exc}".splitlines()[0]
        RESULTS.append(line)
        print(line)
        raise
    elapsed = time.perf_counter() - start
    ok = elapsed < budget_s
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {name} ({elapsed:.2f}s, budget {budget_s:g}s)"
    RESULTS.append(line)
    print(line)
    assert ok, f"criterion {number} exceeded its {budget_s} s budget: {elapsed:.2f} s"


def _credit_ds(seed=0):
    frame = fixtures.credit_frame(seed, 1000)
    oracle = ScoringOracle.from_document(fixtures.credit_logreg_document())
    return ValidationDataset(frame, fixtures.TARGET, oracle, protected_attributes=["gender"])


def _counts(groups):
    y, yhat, g = [], [], []
    for name, (n, selected) in groups.items():
        y += [1] * selected + [0] * (n - selected)
        yhat += [1] * selected + [0] * (n - selected)
        g += [name] * n
    return np.array(y), np.array(yhat), np.array(g, dtype=object)


def test_criterion_01_validate_flags_eeoc(tmp_path):
    with criterion(1, "validate reports DI 0.74 and EEOC_80, exit 2", 10):
        paths = fixtures.write_fixture(tmp_path / "fx")
        out = tmp_path / "out"
        code = main(["validate", "--data", paths["data"], "--model", paths["logreg"], "--target", "approved",
                     "--protected", "gender", "--out", str(out)])
        doc = json.loads((out / "report.json").read_text())
        fairness = next(s for s in doc["suites"] if s["suite"] == "fairness")
        eeoc = [v for v in fairness["violations"] if v["rule"] == "EEOC_80"]
        assert code == 2, code
        assert eeoc and eeoc[0]["violated"]
        assert abs(eeoc[0]["detail"]["disparate_impact"] - 0.74) <= 0.01, eeoc[0]["detail"]


def test_criterion_02_inclusive_boundaries():
    from hypothesis import given, settings
    from hypothesis import strategies as st

    @settings(max_examples=60, deadline=None, database=None)
    @given(p=st.integers(1, 10), q=st.integers(10, 20), k=st.integers(1, 5))
    def exact_di(p, q, k):
        y, yhat, g = _counts({"ref": (q * k, p * k), "other": (5 * q * k, 4 * p * k)})
        res = disparate_impact(group_confusions(y, yhat, g), reference_group="ref")
        assert res.verdict == "pass" and abs(res.disparity - 0.8) < 1e-12

    @settings(max_examples=20, deadline=None, database=None)
    @given(m=st.integers(2, 20))
    def exact_share(m):
        import pandas as pd
        from modelaudit.dataset import TabularFrame

        n = 50 * m
        df = pd.DataFrame({"g": ["a"] * (n - m) + ["b"] * m, "x": np.zeros(n), "y": np.arange(n) % 2})
        ds = ValidationDataset(TabularFrame(df, {"g": "categorical", "x": "continuous", "y": "binary"}), "y",
                               ScoringOracle.from_document(logreg_document([[1.0]], [0.0], ["x"])),
                               protected_attributes=["g"])
        (finding,) = check_question21(ds)
        assert not finding.violated

    with criterion(2, "DI exactly 0.80 and a 2.00% share both pass", 1):
        exact_di()
        exact_share()


def _brute_ece(proba, labels, M=10):
    bins = [[] for _ in range(M)]
    for row, y in zip(proba.tolist(), labels.tolist()):
        c = max(row)
        m = next(m for m in range(M) if m / M < c <= (m + 1) / M or (m == 0 and c == 0))
        bins[m].append((c, row.index(c) == y))
    n = len(labels)
    return sum(len(b) / n * abs(sum(ok for _, ok in b) / len(b) - sum(c for c, _ in b) / len(b)) for b in bins if b)


def test_criterion_03_ece():
    with criterion(3, "ECE matches brute force to 1e-12; calibrated fixture ECE < 0.05", 1):
        rng = np.random.default_rng(0)
        for _ in range(20):
            proba = rng.dirichlet(np.ones(3), 10)
            labels = rng.integers(0, 3, 10)
            assert abs(ece(proba, labels)[0] - _brute_ece(proba, labels)) <= 1e-12
        assert abs(ece(np.tile([0.8, 0.2], (10, 1)), np.array([0] * 6 + [1] * 4))[0] - 0.2) <= 1e-12
        ds = _credit_ds()
        value = ece(get_predictions(ds).proba, ds.y_index())[0]
        assert value < 0.05, value


def test_criterion_04_conformal_coverage():
    with criterion(4, "conformal mean coverage in [0.89, 0.93] over 20 seeds", 30):
        coverages = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            p_cal = rng.dirichlet(np.ones(3), 1000)
            y_cal = np.array([rng.choice(3, p=p) for p in p_cal])
            p_test = rng.dirichlet(np.ones(3), 2000)
            y_test = np.array([rng.choice(3, p=p) for p in p_test])
            cal = conformal_calibrate(classification_scores(p_cal, y_cal), 0.1)
            coverages.append(evaluate_coverage(cal, p_test, y_test)[0])
        mean = float(np.mean(coverages))
        print(f"  mean coverage {mean:.4f}")
        assert 0.89 <= mean <= 0.93, mean


def test_criterion_05_drift_statistics():
    with criterion(5, "PSI/KL/W1/KS identities and hand cases", 1):
        x = np.random.default_rng(1).normal(size=1000)
        for stat in (psi, kl_binned, wasserstein1_empirical, ks_stat):
            assert abs(stat(x, x.copy())) <= 1e-9, stat.__name__
        assert abs(psi_from_proportions([0.5, 0.5], [0.1, 0.9]) - 0.8789) <= 1e-4
        assert abs(kl_from_proportions([0.5, 0.5], [0.1, 0.9]) - 0.5108) <= 1e-4
        for c in (-3.5, 0.25, 7.0):
            assert abs(wasserstein1_empirical(x, x + c) - abs(c)) <= 1e-9


def test_criterion_06_adwin():
    with criterion(6, "ADWIN silent on constants, detects 0.2->0.8 within 300 steps", 10):
        assert adwin_scan([1.0] * 5000) == []
        hits = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            stream = np.concatenate([rng.random(1000) < 0.2, rng.random(1000) < 0.8]).astype(float)
            after = [i for i in adwin_scan(stream, 0.002) if i >= 1000]
            hits += bool(after and after[0] - 1000 < 300)
        print(f"  detected in {hits}/20 seeds")
        assert hits >= 18, hits


def test_criterion_07_weak_slice():
    with criterion(7, "planted slice is the top slice in 5/5 seeds", 30):
        for seed in range(5):
            ds = _credit_ds(seed)
            top = beam_search_slices(ds, get_predictions(ds), min_support=100)[0]
            conj = {(c.feature, c.op) for c in top.predicate.conjuncts}
            assert conj == {("gender", "=="), ("age", "<="), ("amount", ">")}, str(top.predicate)
            df = ds.frame.data
            mask = np.ones(len(df), dtype=bool)
            for c in top.predicate.conjuncts:
                col = df[c.feature]
                mask &= (col == c.value if c.op == "==" else col <= c.value if c.op == "<=" else col > c.value).to_numpy()
            assert np.array_equal(mask, fixtures.planted_slice_mask(df)), str(top.predicate)
            assert abs(top.slice_metric - 0.62) <= 0.02 and abs(top.baseline_metric - 0.85) <= 0.02


def test_criterion_08_adversarial():
    with criterion(8, "FGSM monotone, PGD(1 step) == FGSM, gradient vs finite differences", 10):
        ds = _credit_ds()
        acc = [a for _, a in attack_accuracy(ds, [0.0, 0.1, 0.5])]
        assert acc[0] >= acc[1] >= acc[2], acc
        rng = np.random.default_rng(2)
        w = rng.normal(size=(3, 4))
        oracle = ScoringOracle.from_document(logreg_document(w.tolist(), [0.1, 0.0, -0.1], list("abcd"),
                                                             classes=[0, 1, 2]))
        X = rng.normal(size=(40, 4))
        y = np.arange(40) % 3
        for eps in (0.1, 0.5):
            assert np.array_equal(fgsm_batch(oracle, X, y, AttackConfig("fgsm", eps)),
                                  pgd_batch(oracle, X, y, AttackConfig("pgd", eps, steps=1, step_size=eps)))
        grad = oracle.gradient_matrix(X, y)
        h = 1e-6
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            fd = (cross_entropy(oracle, X + e, y) - cross_entropy(oracle, X - e, y)) / (2 * h)
            assert np.max(np.abs(fd - grad[:, j])) <= 1e-5


def test_criterion_09_hpmkd_mechanisms():
    with criterion(9, "kd_loss gradient, attention, K=1 fusion, single-stage chain", 60):
        rng = np.random.default_rng(3)
        for alpha, T in itertools.product([0.0, 0.5, 1.0], [1.0, 2.0, 4.0, 8.0]):
            z = rng.normal(size=(5, 3)) * 2
            yv = np.eye(3)[rng.integers(0, 3, 5)]
            p = rng.dirichlet(np.ones(3), 5)
            cfg = KDLossConfig(alpha, T)
            _, g = kd_loss(yv, z, p, cfg)
            num = np.zeros_like(z)
            for idx in np.ndindex(z.shape):
                e = np.zeros_like(z)
                e[idx] = 1e-5
                num[idx] = (kd_loss(yv, z + e, p, cfg)[0] - kd_loss(yv, z - e, p, cfg)[0]) / 2e-5
            assert np.max(np.abs(g - num)) / max(np.max(np.abs(num)), 1e-12) <= 1e-6, (alpha, T)

        import pandas as pd
        from modelaudit.dataset import FeatureKind

        X = rng.normal(size=(300, 3))
        frame = pd.DataFrame(X, columns=list("abc"))
        y = (2 * X[:, 0] - X[:, 1] > 0).astype(np.int64)
        kinds = {c: FeatureKind.CONTINUOUS for c in "abc"}
        t1 = ScoringOracle.from_document(logreg_document([[2.0, -1.0, 0.0]], [0.0], list("abc")))
        t2 = ScoringOracle.from_document(logreg_document([[1.0, 0.0, 0.5]], [0.0], list("abc")))
        pool3 = TeacherPool([t1, t1, t1], frame, y, [0, 1], kinds)
        w = attention_weights(pool3, frame)
        assert np.allclose(w.sum(axis=1), 1.0) and np.allclose(w, 1 / 3)
        mixed = attention_weights(TeacherPool([t1, t2], frame, y, [0, 1], kinds), frame)
        assert np.allclose(mixed.sum(axis=1), 1.0)
        pool1 = TeacherPool([t1], frame, y, [0, 1], kinds)
        assert np.array_equal(fuse_soft_labels(pool1, frame, 2.0), soft_labels(t1.predict_logits(X), 2.0))
        pool = TeacherPool([t1, t2], frame, y, [0, 1], kinds)
        config = ChainConfig([StageConfig(alpha=0.4, temperature=3.0)], epochs=60, learning_rate=0.3)
        chained, _ = progressive_chain(frame, y, pool, config)
        direct = train_student(frame, y, pool, KDLossConfig(0.4, 3.0), StudentCapacity(), 60, 0.3, 0,
                               stage=1, name="student-stage-1")
        assert chained.document == direct.document


def test_criterion_10_copula_round_trip():
    with criterion(10, "copula n=10000 keeps marginals (KS < 0.05) and correlations (+/- 0.08)", 30):
        real = fixtures.credit_frame(0, 1000)
        rep = evaluate_synthesis(real, sample(fit_copula(real), 10000, seed=0))
        print(f"  max KS {rep.max_ks:.4f}, max correlation delta {rep.max_correlation_delta:.4f}")
        assert rep.ks and rep.max_ks < 0.05
        assert rep.max_correlation_delta <= 0.08


def _broken(ds, params, th, seed):
    raise RuntimeError("planted")


def test_criterion_11_orchestrator():
    with criterion(11, "deterministic metrics, error isolation, concurrent == sequential", 30):
        ds = _credit_ds()
        config = ExperimentConfig(profile="quick", seed=7)
        a = run_experiment(ds, config, executor="sequential")
        b = run_experiment(ds, config, executor="sequential")
        assert a.metrics_json().encode() == b.metrics_json().encode()
        broken = run_experiment(ds, config, executor="thread", workers=5, suite_overrides={"resilience": _broken})
        assert broken.suite("resilience").status == "error"
        assert all(s.status != "error" for s in broken.suites if s.suite != "resilience")
        par = run_experiment(ds, config, executor="process", workers=5)
        assert par.metrics_json() == a.metrics_json()


def test_criterion_12_score_selftest():
    with criterion(12, "score-selftest against the bundled stub", 5):
        assert main(["score-selftest"]) == 0


def test_criterion_13_full_validate_runtime(tmp_path):
    with criterion(13, "full validate of all five suites under 60 s", 60):
        paths = fixtures.write_fixture(tmp_path / "fx")
        code = main(["validate", "--data", paths["data"], "--model", paths["logreg"], "--target", "approved",
                     "--profile", "full", "--out", str(tmp_path / "out")])
        assert code in (0, 1, 2), code


def test_criterion_13_concurrency_ratio():
    with criterion(13, "concurrent run <= 0.7x sequential wall clock", 60):
        cpus = default_workers(5)
        ds = _credit_ds()
        config = ExperimentConfig(profile="full")
        run_experiment(ds, config, executor="sequential")  # warm imports and caches
        t0 = time.perf_counter()
        run_experiment(ds, config, executor="sequential")
        seq = time.perf_counter() - t0
        t0 = time.perf_counter()
        run_experiment(ds, config, executor="process", workers=5)
        par = time.perf_counter() - t0
        ratio = par / seq
        print(f"  {cpus} usable CPU(s): sequential {seq:.3f}s, concurrent {par:.3f}s, ratio {ratio:.2f}")
        assert ratio <= 0.7, f"ratio {ratio:.2f} with {cpus} usable CPU(s)"


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
