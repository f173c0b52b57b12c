import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odefuse.graph import Adjacency, adjacency_from_features, build_adjacency, pearson_matrix
from oracles import adjacency_loop, pearson_loop


def test_pearson_examples(rng):
    x = rng.normal(size=20)
    X = np.column_stack([x, x, -x])
    r = pearson_matrix(X)
    assert r[0, 1] == pytest.approx(1.0, abs=1e-15)
    assert r[0, 2] == pytest.approx(-1.0, abs=1e-15)
    Y = rng.normal(size=(20, 4))
    assert np.abs(pearson_matrix(Y) - pearson_loop(Y)).max() < 1e-12


def test_pearson_constant_column_and_short_input(rng):
    X = rng.normal(size=(10, 3))
    X[:, 1] = 4.0
    r = pearson_matrix(X)
    assert r[1, 0] == r[0, 1] == r[1, 2] == 0.0 and r[1, 1] == 1.0
    with pytest.raises(ValueError):
        pearson_matrix(np.ones((2, 3)))


def test_build_examples():
    assert np.array_equal(build_adjacency(np.array([[1.0]])).A, [[1.0]])
    c = np.array([[1.0, 0.29], [0.29, 1.0]])
    assert build_adjacency(c, 0.3).A[0, 1] == 0.0
    c = np.array([[1.0, -0.8], [-0.8, 1.0]])
    assert build_adjacency(c, 0.3).A[0, 1] == 0.8


def test_threshold_is_strict():
    c = np.array([[1.0, 0.3], [0.3, 1.0]])
    assert build_adjacency(c, 0.3).A[0, 1] == 0.0


def test_rejects_asymmetric_and_adjacency_input():
    with pytest.raises(ValueError):
        build_adjacency(np.array([[1.0, 0.5], [0.4, 1.0]]))
    adj = build_adjacency(np.eye(2))
    with pytest.raises(TypeError):
        build_adjacency(adj)


def test_matches_loop_oracle(rng):
    for _ in range(10):
        X = rng.normal(size=(30, 6))
        assert np.abs(adjacency_from_features(X).A - adjacency_loop(X, 0.3)).max() < 1e-12


def test_text_and_fingerprint(rng):
    adj = adjacency_from_features(rng.normal(size=(30, 3)))
    text = adj.to_text(["a", "b", "c"])
    assert text.startswith("# tau=0.3 d=3") and len(text.splitlines()) == 5
    assert adj.fingerprint() == Adjacency(adj.A.copy(), 0.3).fingerprint()
    assert adj.fingerprint() != Adjacency(adj.A, 0.31).fingerprint()


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 40), st.integers(1, 7), st.floats(0.0, 0.95), st.integers(0, 2**31 - 1))
def test_invariants(n, d, tau, seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, d)) + r.normal(size=(n, 1))
    A = adjacency_from_features(X, tau).A
    assert np.array_equal(A, A.T)
    assert (np.diag(A) == 1).all()
    off = A[~np.eye(d, dtype=bool)]
    assert ((off == 0) | (off > tau)).all()
    assert (A.max(axis=1) > 0).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_positive_column_scaling_leaves_graph(seed, c):
    r = np.random.default_rng(seed)
    X = r.normal(size=(25, 4)) + r.normal(size=(25, 1))
    Y = X.copy()
    Y[:, 2] *= c
    a, b = adjacency_from_features(X).A, adjacency_from_features(Y).A
    assert np.array_equal(a > 0, b > 0)
    assert np.abs(a - b).max() < 1e-12
