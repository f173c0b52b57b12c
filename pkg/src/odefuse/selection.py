"""Two-stage feature selection: boosted-tree gain ranking, then RFE.

The scorer is least-squares gradient boosting over exact-greedy CART trees.
Every split credits ``parent SSE - left SSE - right SSE`` (on the residuals
being fitted) to its split feature, so a feature's cumulative gain is the sum
over all trees of the variance reduction it produced.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class TreeNode:
    value: float
    feature: int = -1
    threshold: float = 0.0
    gain: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class GbmModel:
    base: float
    trees: list[TreeNode]
    learning_rate: float
    gains: np.ndarray
    tree_gains: list[float] = field(default_factory=list)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.full(len(X), self.base)
        for tree in self.trees:
            out += self.learning_rate * _predict_tree(tree, X)
        return out


@dataclass
class SelectionResult:
    ranked: list[str]
    selected: list[str]
    trace: list[dict]

    def to_text(self) -> str:
        lines = ["# ranked", *self.ranked, "# selected", *self.selected,
                 "# trace: n_features\tval_mse\tremoved"]
        for row in self.trace:
            lines.append(f"{row['n_features']}\t{float(row['val_mse'])!r}\t{row['removed'] or '-'}")
        return "\n".join(lines) + "\n"


def _predict_tree(node: TreeNode, X: np.ndarray) -> np.ndarray:
    if node.is_leaf:
        return np.full(len(X), node.value)
    out = np.empty(len(X))
    go_left = X[:, node.feature] <= node.threshold
    out[go_left] = _predict_tree(node.left, X[go_left])
    out[~go_left] = _predict_tree(node.right, X[~go_left])
    return out


def _sse(r: np.ndarray) -> float:
    return float(((r - r.mean()) ** 2).sum()) if len(r) else 0.0


def _best_split(X: np.ndarray, r: np.ndarray, min_leaf: int):
    """Exact greedy search; ties go to the lowest feature, then lowest threshold."""
    n = len(r)
    total, total_sq = r.sum(), (r * r).sum()
    parent = total_sq - total * total / n
    best = (0.0, -1, 0.0)
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs, rs = X[order, j], r[order]
        cs, cs2 = np.cumsum(rs)[:-1], np.cumsum(rs * rs)[:-1]
        nl = np.arange(1, n)
        nr = n - nl
        valid = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
        if not valid.any():
            continue
        sse_l = cs2 - cs * cs / nl
        sse_r = (total_sq - cs2) - (total - cs) ** 2 / nr
        gain = np.where(valid, parent - sse_l - sse_r, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best[0] + 1e-12:
            best = (float(gain[i]), j, 0.5 * (xs[i] + xs[i + 1]))
    return best


def _grow(X, r, depth, max_depth, min_leaf, gains) -> TreeNode:
    node = TreeNode(value=float(r.mean()))
    if depth >= max_depth or len(r) < 2 * min_leaf:
        return node
    _, feature, threshold = _best_split(X, r, min_leaf)
    if feature < 0:
        return node
    mask = X[:, feature] <= threshold
    # gain recomputed from the realised partition so accounting is exact
    gain = _sse(r) - _sse(r[mask]) - _sse(r[~mask])
    if gain <= 0:
        return node
    node.feature, node.threshold, node.gain = feature, threshold, gain
    gains[feature] += gain
    node.left = _grow(X[mask], r[mask], depth + 1, max_depth, min_leaf, gains)
    node.right = _grow(X[~mask], r[~mask], depth + 1, max_depth, min_leaf, gains)
    return node


def _tree_gain(node: TreeNode) -> float:
    if node.is_leaf:
        return 0.0
    return node.gain + _tree_gain(node.left) + _tree_gain(node.right)


def fit_gbm(X, y, rounds: int = 50, max_depth: int = 3, learning_rate: float = 0.1,
            min_samples_leaf: int = 1) -> GbmModel:
    """Least-squares boosting; each round fits a tree to the current residuals."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) < 10:
        raise ValueError(f"need at least 10 rows to fit the scorer, got {len(X)}")
    if np.isnan(X).any() or np.isnan(y).any():
        raise ValueError("scorer input contains missing values")
    gains = np.zeros(X.shape[1])
    base = float(y.mean())
    if np.ptp(y) == 0:
        logger.warning("fit_gbm: constant target, returning a model with no trees")
        return GbmModel(base, [], learning_rate, gains)
    pred = np.full(len(y), base)
    trees, tree_gains = [], []
    for _ in range(rounds):
        r = y - pred
        tree = _grow(X, r, 0, max_depth, min_samples_leaf, gains)
        if tree.is_leaf:
            break
        trees.append(tree)
        tree_gains.append(_tree_gain(tree))
        pred += learning_rate * _predict_tree(tree, X)
    return GbmModel(base, trees, learning_rate, gains, tree_gains)


def rank_importance(model: GbmModel, names: Sequence[str], top_k: int = 15) -> list[str]:
    """Names by descending cumulative gain; ties keep the original column order."""
    names = list(names)
    if len(names) != len(model.gains):
        raise ValueError("names do not match the fitted feature count")
    if top_k > len(names):
        logger.warning("rank_importance: top_k=%d exceeds %d features, returning all",
                       top_k, len(names))
    order = np.argsort(-model.gains, kind="stable")
    return [names[i] for i in order[:top_k]]


def rfe(X, y, names: Sequence[str], start_set: Sequence[str] | None = None,
        target_size: int = 8, validation_fraction: float = 0.2,
        rounds: int = 50, max_depth: int = 3, learning_rate: float = 0.1) -> SelectionResult:
    """Drop the lowest-gain feature one at a time until ``target_size`` remain.

    Each step refits the scorer on the leading rows and records its MSE on
    the trailing ``validation_fraction`` of rows.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    names = list(names)
    current = list(start_set) if start_set is not None else list(names)
    if len(current) < target_size:
        raise ValueError(f"start set has {len(current)} features, fewer than {target_size}")
    cut = len(X) - max(1, int(np.floor(validation_fraction * len(X))))
    trace: list[dict] = []
    while True:
        cols = [names.index(n) for n in current]
        model = fit_gbm(X[:cut, cols], y[:cut], rounds, max_depth, learning_rate)
        mse = float(np.mean((model.predict(X[cut:, cols]) - y[cut:]) ** 2))
        if len(current) == target_size:
            trace.append({"n_features": len(current), "val_mse": mse, "removed": None})
            break
        worst = current[int(np.argsort(model.gains, kind="stable")[0])]
        trace.append({"n_features": len(current), "val_mse": mse, "removed": worst})
        current.remove(worst)
    return SelectionResult(ranked=list(start_set) if start_set is not None else list(names),
                           selected=current, trace=trace)


def select_features(X, y, names: Sequence[str], target_size: int = 8, top_k: int = 15,
                    rounds: int = 50, max_depth: int = 3,
                    learning_rate: float = 0.1) -> SelectionResult:
    """Gain ranking to ``top_k`` when there are more than ``top_k`` features, then RFE."""
    names = list(names)
    if len(names) > top_k:
        model = fit_gbm(X, y, rounds, max_depth, learning_rate)
        start = rank_importance(model, names, top_k)
    else:
        start = names
    return rfe(X, y, names, start, target_size, rounds=rounds, max_depth=max_depth,
               learning_rate=learning_rate)
