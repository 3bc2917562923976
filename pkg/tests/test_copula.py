import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm, rankdata

from modelaudit import fixtures
from modelaudit.copula import CopulaModel, evaluate_synthesis, fit_copula, nearest_psd_correlation, sample
from modelaudit.dataset import FeatureKind, TabularFrame
from modelaudit.errors import AllMissing, SchemaMismatch


def cont_frame(cols: dict) -> TabularFrame:
    return TabularFrame(pd.DataFrame(cols), {c: FeatureKind.CONTINUOUS for c in cols})


def rank_scores(x):
    return norm.ppf((rankdata(x) - 0.5) / len(x))


def test_independent_columns_near_zero():
    rng = np.random.default_rng(0)
    model = fit_copula(cont_frame({"a": rng.normal(size=10000), "b": rng.exponential(size=10000)}))
    assert abs(model.correlation[0, 1]) < 0.05


def test_identical_columns_fully_correlated():
    x = np.random.default_rng(1).normal(size=2000)
    model = fit_copula(cont_frame({"x": x, "y": x.copy()}))
    assert model.correlation[0, 1] == pytest.approx(1.0, abs=0.01)


def test_fit_matches_rank_score_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=500)
    y = x ** 3 + rng.normal(size=500)
    model = fit_copula(cont_frame({"x": x, "y": y}))
    expected = np.corrcoef(rank_scores(x), rank_scores(y))[0, 1]
    assert model.correlation[0, 1] == pytest.approx(expected, abs=1e-9)


def test_constant_column():
    rng = np.random.default_rng(3)
    frame = cont_frame({"a": rng.normal(size=100), "k": np.full(100, 7.0), "b": rng.normal(size=100)})
    model = fit_copula(frame)
    assert model.marginals[1].kind == "constant"
    assert model.correlation[1, 0] == 0 and model.correlation[1, 2] == 0
    out = sample(model, 500, seed=1)
    assert (out.data["k"] == 7.0).all()


def test_same_seed_same_output(credit_frame):
    model = fit_copula(credit_frame)
    pd.testing.assert_frame_equal(sample(model, 300, seed=5).data, sample(model, 300, seed=5).data)
    assert not sample(model, 300, seed=5).data.equals(sample(model, 300, seed=6).data)


def test_gaussian_pair_correlation():
    rng = np.random.default_rng(4)
    z = rng.multivariate_normal([0, 0], [[1, 0.8], [0.8, 1]], size=20000)
    model = fit_copula(cont_frame({"a": z[:, 0], "b": z[:, 1]}))
    out = sample(model, 20000, seed=0).data
    rho = np.corrcoef(rank_scores(out["a"]), rank_scores(out["b"]))[0, 1]
    assert 0.75 <= rho <= 0.85


def test_fixture_round_trip(credit_frame):
    model = fit_copula(credit_frame)
    synth = sample(model, 10000, seed=0)
    rep = evaluate_synthesis(credit_frame, synth)
    assert rep.ks and max(rep.ks.values()) < 0.05
    assert rep.max_correlation_delta < 0.08
    assert synth.columns == credit_frame.columns


def test_real_copy_scores_zero(credit_frame):
    rep = evaluate_synthesis(credit_frame, credit_frame.with_data(credit_frame.data.copy()))
    assert rep.max_ks == 0.0
    assert all(v == 0.0 for v in rep.total_variation.values())
    assert rep.max_correlation_delta == pytest.approx(0.0, abs=1e-12)


def test_shuffled_column_breaks_correlation():
    rng = np.random.default_rng(5)
    x = rng.normal(size=3000)
    real = cont_frame({"x": x, "y": x + 0.3 * rng.normal(size=3000)})
    shuffled = real.data.copy()
    shuffled["y"] = rng.permutation(shuffled["y"].to_numpy())
    rep = evaluate_synthesis(real, real.with_data(shuffled))
    assert rep.max_correlation_delta > 0.3


def test_categorical_frequencies_converge():
    rng = np.random.default_rng(6)
    cats = rng.choice(["a", "b", "c", "d"], p=[0.5, 0.25, 0.15, 0.1], size=2000)
    frame = TabularFrame(pd.DataFrame({"c": cats, "x": rng.normal(size=2000)}),
                         {"c": FeatureKind.CATEGORICAL, "x": FeatureKind.CONTINUOUS})
    model = fit_copula(frame)
    out = sample(model, 50000, seed=2).data["c"].value_counts(normalize=True)
    fitted = dict(zip(model.marginals[0].values, model.marginals[0].probs))
    tv = 0.5 * sum(abs(out.get(k, 0.0) - p) for k, p in fitted.items())
    assert tv < 0.02


def test_missing_rate_reproduced():
    rng = np.random.default_rng(7)
    x = rng.normal(size=4000)
    x[rng.random(4000) < 0.2] = np.nan
    model = fit_copula(cont_frame({"x": x, "y": rng.normal(size=4000)}))
    out = sample(model, 20000, seed=0).data
    assert out["x"].isna().mean() == pytest.approx(0.2, abs=0.02)


def test_serialization_round_trip(credit_frame):
    model = fit_copula(credit_frame)
    again = CopulaModel.from_dict(model.to_dict())
    assert again.fingerprint == model.fingerprint
    pd.testing.assert_frame_equal(sample(again, 100, seed=3).data, sample(model, 100, seed=3).data)


def test_fit_errors():
    with pytest.raises(ValueError):
        fit_copula(cont_frame({"x": np.arange(5.0)}))
    with pytest.raises(AllMissing):
        fit_copula(cont_frame({"x": np.arange(20.0), "y": np.full(20, np.nan)}))
    with pytest.raises(ValueError):
        sample(fit_copula(cont_frame({"x": np.arange(20.0)})), 0)


def test_schema_mismatch():
    a = cont_frame({"x": np.arange(20.0), "y": np.arange(20.0) ** 2})
    with pytest.raises(SchemaMismatch):
        evaluate_synthesis(a, cont_frame({"x": np.arange(20.0)}))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-0.99, 0.99), min_size=3, max_size=3))
def test_psd_repair_gives_valid_correlation(off):
    c = np.eye(3)
    c[0, 1] = c[1, 0] = off[0]
    c[0, 2] = c[2, 0] = off[1]
    c[1, 2] = c[2, 1] = off[2]
    fixed = nearest_psd_correlation(c)
    assert np.allclose(np.diag(fixed), 1.0)
    assert np.allclose(fixed, fixed.T)
    assert np.linalg.eigvalsh(fixed).min() >= -1e-9
    assert np.all(np.abs(fixed) <= 1 + 1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_samples_stay_in_observed_support(seed):
    frame = fixtures.credit_frame(0, 200)
    model = fit_copula(frame)
    out = sample(model, 200, seed=seed).data
    for c in frame.columns:
        if frame.kinds[c] == FeatureKind.CONTINUOUS:
            assert out[c].min() >= frame.data[c].min() and out[c].max() <= frame.data[c].max()
        else:
            assert set(out[c].dropna().astype(str)) <= set(frame.data[c].dropna().astype(str))
