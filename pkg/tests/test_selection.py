import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odefuse.selection import (GbmModel, fit_gbm, rank_importance, rfe, select_features,
                               _predict_tree)


def noisy_problem(seed, n=200, informative=10, noise=5):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, informative + noise))
    w = np.linspace(1.0, 2.0, informative)
    y = X[:, :informative] @ w + 0.1 * r.normal(size=n)
    names = [f"inf{i}" for i in range(informative)] + [f"noise{i}" for i in range(noise)]
    return X, y, names


def test_constant_target_has_no_gain(caplog):
    X = np.random.default_rng(0).normal(size=(20, 3))
    m = fit_gbm(X, np.full(20, 3.0))
    assert m.trees == [] and not m.gains.any()
    assert np.array_equal(m.predict(X), np.full(20, 3.0))


def test_single_stump_gain_is_analytic():
    x = np.arange(10.0)
    y = (x >= 5).astype(float)
    X = np.column_stack([x, np.zeros(10)])
    m = fit_gbm(X, y, rounds=1, max_depth=1, learning_rate=1.0)
    # parent SSE = 10 * 0.25, both children pure
    assert m.gains[0] == pytest.approx(2.5, abs=1e-12) and m.gains[1] == 0
    assert m.trees[0].threshold == 4.5
    assert np.allclose(m.predict(X), y)


def test_exact_target_feature_ranks_first(rng):
    X = rng.normal(size=(100, 5))
    y = X[:, 0].copy()
    m = fit_gbm(X, y)
    assert int(np.argmax(m.gains)) == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(10, 60), st.integers(1, 6), st.integers(1, 4))
def test_gain_accounting(seed, n, d, depth):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, d))
    y = X @ r.normal(size=d) + r.normal(size=n)
    m = fit_gbm(X, y, rounds=10, max_depth=depth)
    assert (m.gains >= 0).all()
    assert abs(m.gains.sum() - sum(m.tree_gains)) < 1e-8
    # per tree, the gains equal the SSE reduction of that tree's fitted partition
    pred = np.full(n, m.base)
    for tree in m.trees:
        res = y - pred
        fit = _predict_tree(tree, X)
        leaves = {v: res[fit == v] for v in np.unique(fit)}
        reduction = ((res - res.mean()) ** 2).sum() - sum(((v - v.mean()) ** 2).sum()
                                                            for v in leaves.values())
        pred = pred + m.learning_rate * fit
        assert abs(reduction - sum([_node_gains(tree)])) < 1e-8


def _node_gains(node):
    if node.is_leaf:
        return 0.0
    return node.gain + _node_gains(node.left) + _node_gains(node.right)


def test_rank_examples(caplog):
    m = GbmModel(0.0, [], 0.1, np.array([5.0, 1.0, 3.0]))
    assert rank_importance(m, ["a", "b", "c"], 3) == ["a", "c", "b"]
    tie = GbmModel(0.0, [], 0.1, np.array([1.0, 2.0, 2.0, 1.0]))
    assert rank_importance(tie, list("abcd"), 4) == ["b", "c", "a", "d"]
    assert rank_importance(m, ["a", "b", "c"], 15) == ["a", "c", "b"]
    assert "exceeds" in caplog.text
    with pytest.raises(ValueError):
        rank_importance(m, ["a", "b"], 2)


def test_rfe_examples():
    X, y, names = noisy_problem(0, informative=8, noise=0)
    res = rfe(X, y, names, target_size=8)
    assert res.selected == names and len(res.trace) == 1
    with pytest.raises(ValueError):
        rfe(X, y, names, start_set=names[:5], target_size=8)


def test_rfe_drops_noise_first():
    hits = 0
    for seed in range(10):
        X, y, names = noisy_problem(seed, informative=8, noise=2)
        res = rfe(X, y, names, target_size=8)
        removed = {row["removed"] for row in res.trace[:2]}
        hits += removed == {"noise0", "noise1"}
    assert hits >= 9


def test_two_stage_only_above_top_k():
    X, y, names = noisy_problem(1, informative=10, noise=4)
    res = select_features(X, y, names)
    assert res.ranked == names and len(res.selected) == 8  # 14 features, straight to RFE
    X, y, names = noisy_problem(1, informative=10, noise=6)
    res = select_features(X, y, names)
    assert len(res.ranked) == 15 and set(res.selected) <= set(res.ranked)
    assert len(res.trace) == 8


def test_selection_invariants():
    X, y, names = noisy_problem(3)
    res = select_features(X, y, names)
    assert len(res.selected) == 8
    removed = [row["removed"] for row in res.trace if row["removed"]]
    assert not set(removed) & set(res.selected)
    assert len(set(removed)) == len(removed)
    assert select_features(X, y, names).selected == res.selected
    text = res.to_text()
    assert text.startswith("# ranked") and "# selected" in text
