import itertools
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import softmax

from modelaudit.dataset import FeatureKind, TabularFrame
from modelaudit.errors import EmptyValidationSet
from modelaudit.hpmkd import (
    ChainConfig,
    KDLossConfig,
    StageConfig,
    StudentCapacity,
    TeacherPool,
    attention_weights,
    distill_table,
    fuse_soft_labels,
    kd_loss,
    progressive_chain,
    soft_labels,
    temperature_from_entropy,
    train_student,
)
from modelaudit.oracle import ScoringOracle, logreg_document

FEATURES = ["a", "b", "c"]
KINDS = {f: FeatureKind.CONTINUOUS for f in FEATURES}


def toy_task(n=400, seed=0, margin=0.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    score = 2 * X[:, 0] - X[:, 1] + 0.5 * X[:, 2]
    if margin:
        keep = np.abs(score) > margin
        X, score = X[keep], score[keep]
    return pd.DataFrame(X, columns=FEATURES), (score > 0).astype(np.int64)


def teacher(w, b=0.0):
    return ScoringOracle.from_document(logreg_document([list(w)], [b], FEATURES))


def make_pool(teachers, frame, y, k_nn=25):
    return TeacherPool(teachers, frame, y, [0, 1], KINDS, k_nn=k_nn)


def test_soft_label_examples():
    z = np.array([[2.0, 0.0], [0.3, -1.2]])
    assert np.allclose(soft_labels(z, 1.0), softmax(z, axis=1))
    assert np.allclose(soft_labels(z, 1e6), 0.5, atol=1e-5)
    assert np.allclose(soft_labels([[2.0, 0.0]], 2.0), [[math.e / (math.e + 1), 1 / (math.e + 1)]])
    assert np.allclose(soft_labels([[2.0, 0.0]], 2.0), [[0.7311, 0.2689]], atol=1e-4)


def test_soft_labels_reject_low_temperature():
    with pytest.raises(ValueError):
        soft_labels([[1.0, 0.0]], 0.5)


def test_attention_two_teachers_local_accuracy():
    frame, y = toy_task(200)
    good = teacher([2.0, -1.0, 0.5])
    bad = teacher([-2.0, 1.0, -0.5])
    pool = make_pool([good, bad], frame, y)
    w = attention_weights(pool, frame.iloc[:10])
    assert np.allclose(w, [math.e / (math.e + 1), 1 / (math.e + 1)])
    assert np.allclose(w.sum(axis=1), 1.0)


def test_attention_identical_teachers_uniform():
    frame, y = toy_task(200)
    t = teacher([1.0, 0.0, 0.0])
    pool = make_pool([t, t, t], frame, y)
    assert np.allclose(attention_weights(pool, frame), 1 / 3)


def test_single_teacher_weight_and_fusion():
    frame, y = toy_task(100)
    t = teacher([1.0, 2.0, -1.0])
    pool = make_pool([t], frame, y)
    assert np.all(attention_weights(pool, frame) == 1.0)
    for T in (1.0, 3.0):
        expected = soft_labels(t.predict_logits(t.input_matrix(frame)), T)
        assert np.array_equal(fuse_soft_labels(pool, frame, T), expected)


def test_fusion_arithmetic_example():
    frame, y = toy_task(50)
    pool = make_pool([teacher([1, 0, 0]), teacher([0, 1, 0])], frame, y)
    row = frame.iloc[:1]
    weights = np.array([[0.7311, 0.2689]])
    logits = [np.log([[0.9, 0.1]]), np.log([[0.1, 0.9]])]
    fused = fuse_soft_labels(pool, row, 1.0, weights=weights, logits=logits)
    assert np.allclose(fused, [[0.6849, 0.3151]], atol=1e-4)
    uniform = fuse_soft_labels(pool, row, 1.0, weights=np.array([[0.5, 0.5]]), logits=logits)
    assert np.allclose(uniform, [[0.5, 0.5]])


@settings(max_examples=20, deadline=None)
@given(perm=st.permutations([0, 1, 2]))
def test_attention_permutation_equivariant(perm):
    frame, y = toy_task(150, seed=1)
    ts = [teacher([2, -1, 0.5]), teacher([1, 0, 0]), teacher([0, 0, 1])]
    base = attention_weights(make_pool(ts, frame, y), frame)
    permuted = attention_weights(make_pool([ts[i] for i in perm], frame, y), frame)
    assert np.allclose(permuted, base[:, list(perm)])


def _numeric_grad(f, z, h=1e-5):
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        e = np.zeros_like(z)
        e[idx] = h
        g[idx] = (f(z + e) - f(z - e)) / (2 * h)
    return g


@pytest.mark.parametrize("alpha,T", list(itertools.product([0.0, 0.5, 1.0], [1.0, 2.0, 4.0, 8.0])))
def test_kd_loss_gradient(alpha, T):
    rng = np.random.default_rng(int(alpha * 10 + T))
    n, C = 6, 3
    z = rng.normal(size=(n, C)) * 2
    y = np.eye(C)[rng.integers(0, C, n)]
    p = rng.dirichlet(np.ones(C), n)
    cfg = KDLossConfig(alpha, T)
    _, grad = kd_loss(y, z, p, cfg)
    num = _numeric_grad(lambda v: kd_loss(y, v, p, cfg)[0], z)
    rel = np.max(np.abs(grad - num)) / max(np.max(np.abs(num)), 1e-12)
    assert rel <= 1e-6


def test_kd_loss_alpha_one_is_cross_entropy(rng):
    z = rng.normal(size=(5, 3))
    y = np.eye(3)[[0, 1, 2, 1, 0]]
    loss, _ = kd_loss(y, z, rng.dirichlet(np.ones(3), 5), KDLossConfig(1.0, 4.0))
    ce = -np.mean(np.sum(y * np.log(softmax(z, axis=1)), axis=1))
    assert loss == pytest.approx(ce, abs=1e-12)


def test_kd_loss_zero_when_student_matches(rng):
    z = rng.normal(size=(5, 3))
    loss, grad = kd_loss(np.eye(3)[[0] * 5], z, softmax(z, axis=1), KDLossConfig(0.0, 1.0))
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(grad, 0.0, atol=1e-15)


def test_kd_loss_t_squared_scaling(rng):
    z = rng.normal(size=(4, 2))
    p = rng.dirichlet(np.ones(2), 4)
    y = np.eye(2)[[0, 1, 0, 1]]
    scaled, _ = kd_loss(y, z, p, KDLossConfig(0.0, 3.0, True))
    plain, _ = kd_loss(y, z, p, KDLossConfig(0.0, 3.0, False))
    assert scaled == pytest.approx(9 * plain)


@pytest.mark.parametrize("alpha,T", [(-0.1, 1.0), (1.1, 1.0), (0.5, 0.9)])
def test_kd_config_validation(alpha, T):
    with pytest.raises(ValueError):
        KDLossConfig(alpha, T)


def test_temperature_rule():
    assert temperature_from_entropy(0.0, 2) == 1.0
    assert temperature_from_entropy(math.log(10), 10) == pytest.approx(7.0)
    assert temperature_from_entropy(0.5 * math.log(2), 2) == pytest.approx(4.0)
    assert temperature_from_entropy(10.0, 2) == 8.0


def test_hard_label_student_on_separable_data():
    frame, y = toy_task(400, margin=0.5)
    pool = make_pool([teacher([2, -1, 0.5])], frame, y)
    student = train_student(frame, y, pool, KDLossConfig(1.0, 1.0), StudentCapacity(), epochs=500, lr=0.1)
    o = student.oracle
    acc = np.mean(np.argmax(o.predict_proba(o.input_matrix(frame)), axis=1) == y)
    assert acc >= 0.95
    assert all(b <= a + 1e-12 for a, b in zip(student.curve, student.curve[1:]))


def test_student_capacity_limits_features():
    frame, y = toy_task(300)
    pool = make_pool([teacher([2, -1, 0.5])], frame, y)
    student = train_student(frame, y, pool, KDLossConfig(0.5, 2.0), StudentCapacity(n_features=1), epochs=50)
    assert student.features == ["a"]


def test_single_stage_chain_equals_train_student():
    frame, y = toy_task(300, seed=2)
    pool = make_pool([teacher([2, -1, 0.5]), teacher([1, -1, 0])], frame, y)
    config = ChainConfig([StageConfig(n_features=2, alpha=0.3, temperature=2.0)], epochs=80, learning_rate=0.3)
    final, report = progressive_chain(frame, y, pool, config)
    direct = train_student(frame, y, pool, KDLossConfig(0.3, 2.0), StudentCapacity(2), 80, 0.3, 0,
                           stage=1, name="student-stage-1")
    assert final.document == direct.document
    assert final.curve == direct.curve


def test_no_shrink_chain_close_to_single_stage():
    frame, y = toy_task(400, seed=3)
    pool = make_pool([teacher([2, -1, 0.5])], frame, y)
    one = ChainConfig([StageConfig(temperature=2.0)], epochs=200)
    three = ChainConfig([StageConfig(temperature=2.0)] * 3, epochs=200)
    _, r1 = progressive_chain(frame, y, pool, one)
    _, r3 = progressive_chain(frame, y, pool, three)
    assert abs(r3.final_accuracy - r1.final_accuracy) <= 0.01
    assert r3.retention == r3.final_accuracy / r3.teacher_accuracy
    assert len(r3.stage_accuracies) == 3


def test_chain_config_validation():
    with pytest.raises(ValueError):
        ChainConfig([])
    with pytest.raises(ValueError):
        ChainConfig([StageConfig(n_features=2), StageConfig(n_features=3)])
    with pytest.raises(ValueError):
        ChainConfig.from_dict({"stages": [{"bogus": 1}]})
    with pytest.raises(ValueError):
        ChainConfig([StageConfig(temperature=0.5)])


def test_distill_table_identical_teachers():
    frame, y = toy_task(300, seed=4)
    data = frame.assign(label=y)
    table = TabularFrame(data, {**KINDS, "label": FeatureKind.BINARY})
    t = teacher([2, -1, 0.5])
    run = distill_table(table, "label", [t, t, t], ChainConfig([StageConfig()], epochs=50))
    assert np.allclose(run.attention, 1 / 3)
    assert run.n_train + run.n_validation == 300
    assert run.report.retention > 0


def test_empty_validation_split():
    frame, y = toy_task(3)
    table = TabularFrame(frame.assign(label=y), {**KINDS, "label": FeatureKind.BINARY})
    with pytest.raises(EmptyValidationSet):
        distill_table(table, "label", [teacher([1, 0, 0])], ChainConfig([StageConfig()], validation_fraction=0.1))
