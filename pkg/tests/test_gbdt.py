import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from ticket_triage import gbdt
from ticket_triage.errors import (DegenerateLabels, FeatureOutOfRange, ModelFormatError,
                                  ShapeMismatch)
from ticket_triage.gbdt import GbdtConfig
from ticket_triage.tfidf import SparseVector

from oracles import brute_best_gain, central_diff, check_tree_optimal, rel_err


def col(values):
    return sp.csr_matrix(np.asarray(values, dtype=float).reshape(-1, 1))


def test_leaf_weight_formula():
    assert gbdt.leaf_weight(2.0, 4.0, 1.0, 1.0) == pytest.approx(-0.4)


def test_split_gain_formula():
    assert gbdt.split_gain(-1.0, 1.0, 1.0, 1.0, 1.0, 0.0) == pytest.approx(0.5)
    assert gbdt.split_gain(-1.0, 1.0, 1.0, 1.0, 1.0, 0.7) == pytest.approx(-0.2)


def test_one_dimensional_threshold():
    X = col([0, 1, 2, 3])
    y = np.array([0, 0, 1, 1])
    cfg = GbdtConfig(n_rounds=1, learning_rate=1.0, max_depth=1, reg_lambda=1.0,
                     min_child_hessian=0.0, objective=gbdt.BINARY)
    p = np.full(4, 0.5)
    g, h = p - y, p * (1 - p)
    tree, _, splits = gbdt.build_tree(X, g, h, cfg)
    assert splits[0].feature == 0 and splits[0].threshold == 1.5
    assert splits[0].gain == pytest.approx(brute_best_gain(X.toarray(), np.arange(4), g, h,
                                                           1.0, 0.0, 0.0))
    model = gbdt.train(X, y, GbdtConfig(n_rounds=5, objective=gbdt.BINARY,
                                        min_child_hessian=0.0))
    assert gbdt.predict_proba(model, SparseVector.zero())[0] > 0.5
    assert gbdt.predict_proba(model, SparseVector.from_dense([3.0]))[1] > 0.5


def test_degenerate_and_shape_errors():
    with pytest.raises(DegenerateLabels):
        gbdt.train(col([0, 1]), [1, 1], GbdtConfig(objective=gbdt.BINARY))
    with pytest.raises(ShapeMismatch):
        gbdt.train(col([0, 1, 2]), [0, 1], GbdtConfig(objective=gbdt.BINARY))


def test_config_validation():
    for bad in (dict(n_rounds=0), dict(learning_rate=0.0), dict(learning_rate=1.5),
                dict(max_depth=0), dict(reg_lambda=-1), dict(gamma=-1),
                dict(min_child_hessian=-1), dict(objective="poisson")):
        with pytest.raises(ValueError):
            GbdtConfig(**bad)


def test_zero_round_uniform():
    m = gbdt.GbdtModel([], np.zeros(4), 4, GbdtConfig(objective=gbdt.SOFTMAX, n_classes=4), 3)
    assert np.allclose(gbdt.predict_proba(m, SparseVector.zero()), 0.25)
    m3 = gbdt.GbdtModel([], np.zeros(3), 3, GbdtConfig(objective=gbdt.SOFTMAX, n_classes=3), 3)
    assert gbdt.predict(m3, SparseVector.zero()) == 0


def test_argmax_tie_break():
    assert gbdt.argmax_smallest(np.array([0.1, 0.7, 0.2])) == 1
    assert gbdt.argmax_smallest(np.array([0.4, 0.2, 0.4])) == 0


def test_feature_out_of_range():
    model = gbdt.train(col([0, 1, 2, 3]), [0, 0, 1, 1], GbdtConfig(n_rounds=2, objective=gbdt.BINARY))
    with pytest.raises(FeatureOutOfRange):
        gbdt.predict_proba(model, SparseVector(np.array([5]), np.array([1.0])))


def random_problem(rng, n, d, k, density=0.5):
    X = rng.normal(size=(n, d)) * (rng.random((n, d)) < density)
    X = np.round(X, 1)          # repeated values exercise the tie handling
    y = rng.integers(0, k, n)
    y[:k] = np.arange(k)
    return X, y


@pytest.mark.parametrize("seed", range(8))
def test_split_optimality_against_brute_force(seed):
    rng = np.random.default_rng(seed)
    X, y = random_problem(rng, int(rng.integers(10, 60)), int(rng.integers(1, 5)), 2)
    cfg = GbdtConfig(max_depth=3, reg_lambda=float(rng.uniform(0, 2)),
                     gamma=float(rng.choice([0.0, 0.1])),
                     min_child_hessian=float(rng.choice([0.0, 0.5, 1.0])),
                     objective=gbdt.BINARY)
    g = rng.normal(size=len(y))
    h = rng.uniform(0.05, 0.5, len(y))
    tree, delta, splits = gbdt.build_tree(sp.csr_matrix(X), g, h, cfg)
    n = check_tree_optimal(tree, X, g, h, cfg)
    assert n == len(splits)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 4))
def test_grad_hess_match_finite_differences(seed, k):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 10))
    m = rng.normal(size=(n, k))
    y = rng.integers(0, k, n)
    G, H = gbdt.softmax_grad_hess(m, y)
    assert rel_err(G, central_diff(lambda z: gbdt.softmax_loss(z, y), m)) < 1e-5
    diag = np.array([[central_diff(lambda z: gbdt.softmax_grad_hess(
        np.where(np.arange(k) == c, z, m[i])[None], y[i:i + 1])[0][0, c], m[i, c])
        for c in range(k)] for i in range(n)])
    assert rel_err(H, diag) < 1e-5

    z = rng.normal(size=n)
    yb = rng.integers(0, 2, n)
    g, h = gbdt.logistic_grad_hess(z, yb)
    assert rel_err(g, central_diff(lambda t: gbdt.logistic_loss(t, yb), z)) < 1e-5
    fd_h = central_diff(lambda t: gbdt.logistic_grad_hess(t, yb)[0].sum(), z)
    assert rel_err(h, fd_h) < 1e-5


@pytest.mark.parametrize("objective,k", [(gbdt.BINARY, 2), (gbdt.SOFTMAX, 3)])
def test_training_loss_non_increasing(objective, k):
    rng = np.random.default_rng(3)
    X, y = random_problem(rng, 80, 4, k)
    hist = []
    gbdt.train(sp.csr_matrix(X), y, GbdtConfig(n_rounds=15, learning_rate=0.3, max_depth=3,
                                               objective=objective), history=hist)
    assert len(hist) == 16
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


def test_softmax_tree_count_and_depth():
    rng = np.random.default_rng(4)
    X, y = random_problem(rng, 60, 3, 3)
    m = gbdt.train(sp.csr_matrix(X), y, GbdtConfig(n_rounds=4, max_depth=2))
    assert len(m.trees) == 12
    assert [(r, k) for r, k, _ in m.trees] == [(r, k) for r in range(4) for k in range(3)]
    assert all(t.depth() <= 2 for _, _, t in m.trees)


def test_predict_agrees_with_proba_and_paths_identical():
    rng = np.random.default_rng(5)
    X, y = random_problem(rng, 50, 4, 3)
    m = gbdt.train(sp.csr_matrix(X), y, GbdtConfig(n_rounds=6, max_depth=3))
    vecs = [SparseVector.from_dense(r) for r in X]
    P = gbdt.predict_proba_many(m, sp.csr_matrix(X))
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((P >= 0) & (P <= 1))
    for i, v in enumerate(vecs):
        single = gbdt.predict_proba(m, v)
        assert np.array_equal(single, P[i])
        assert gbdt.predict(m, v) == int(np.argmax(single))
    assert np.array_equal(gbdt.predict_many(m, sp.csr_matrix(X)), np.argmax(P, axis=1))


def test_deterministic_training():
    rng = np.random.default_rng(6)
    X, y = random_problem(rng, 40, 3, 2)
    cfg = GbdtConfig(n_rounds=5, objective=gbdt.BINARY)
    a = gbdt.dumps(gbdt.train(sp.csr_matrix(X), y, cfg))
    b = gbdt.dumps(gbdt.train(sp.csr_matrix(X), y, cfg))
    assert a == b


def test_serialization_round_trip_bit_exact():
    rng = np.random.default_rng(8)
    X, y = random_problem(rng, 60, 4, 3)
    m = gbdt.train(sp.csr_matrix(X), y, GbdtConfig(n_rounds=5, learning_rate=0.37, max_depth=3))
    text = gbdt.dumps(m)
    assert text.startswith("gbdt-model 1 objective=softmax K=3")
    m2 = gbdt.loads(text)
    assert gbdt.dumps(m2) == text
    Xs = sp.csr_matrix(X)
    assert np.array_equal(gbdt.predict_margins(m, Xs), gbdt.predict_margins(m2, Xs))


def test_constant_model_serializes():
    m = gbdt.constant_model(3, 5, label=2)
    m2 = gbdt.loads(gbdt.dumps(m))
    assert np.array_equal(gbdt.predict_proba(m2, SparseVector.zero()), [0.0, 0.0, 1.0])


def test_loader_rejects_garbage():
    with pytest.raises(ModelFormatError):
        gbdt.loads("gbdt-model 2 objective=softmax\n")
    with pytest.raises(ModelFormatError):
        gbdt.loads("")
