"""Shapley attributions for a black-box regressor.

``model`` is any callable mapping an ``(n, d)`` array to ``n`` predictions.
Coalition values use interventional masking: features outside the coalition
take their values from each background row, and the coalition value is the
mean prediction over the background.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MAX_EXACT_FEATURES = 12
WATERFALL_COLUMNS = ("Feature", "SHAP Value", "Feature Value", "Contribution Impact")

Model = Callable[[np.ndarray], np.ndarray]


@dataclass
class Attribution:
    base_value: float
    phi: np.ndarray
    instance: np.ndarray
    prediction: float

    @property
    def residual(self) -> float:
        """Local-accuracy gap ``base + sum(phi) - prediction``."""
        return float(self.base_value + self.phi.sum() - self.prediction)


@dataclass
class GlobalSummary:
    names: list[str]
    mean_abs: np.ndarray
    phi: np.ndarray        # (n_instances, d)
    values: np.ndarray     # instance feature values, same shape

    def order(self) -> list[int]:
        """Descending mean |phi|, ties broken by feature name."""
        return sorted(range(len(self.names)), key=lambda i: (-self.mean_abs[i], self.names[i]))

    def bar_rows(self) -> list[tuple[str, float]]:
        return [(self.names[i], float(self.mean_abs[i])) for i in self.order()]


def background_sample(X, size: int = 100, seed: int = 0) -> np.ndarray:
    """Seeded subsample of at most ``size`` rows, kept in original row order."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("background set is empty")
    if len(X) <= size:
        return X.copy()
    idx = np.sort(np.random.default_rng(seed).choice(len(X), size, replace=False))
    return X[idx]


def _check(background, instance) -> tuple[np.ndarray, np.ndarray]:
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    instance = np.asarray(instance, dtype=np.float64).ravel()
    if len(background) == 0:
        raise ValueError("background set is empty")
    if background.shape[1] != len(instance):
        raise ValueError(f"instance has {len(instance)} features, background has "
                         f"{background.shape[1]}")
    return background, instance


def coalition_values(model: Model, background: np.ndarray, instance: np.ndarray,
                     masks: np.ndarray) -> np.ndarray:
    """v(S) for each boolean row of ``masks`` (True = feature taken from instance)."""
    m, nb = len(masks), len(background)
    Z = np.where(masks[:, None, :], instance[None, None, :], background[None, :, :])
    out = np.asarray(model(Z.reshape(m * nb, -1)), dtype=np.float64).reshape(m, nb)
    return out.mean(axis=1)


def shapley_exact(model: Model, background, instance) -> Attribution:
    """Enumerate all 2^d coalitions and apply the Shapley weighting directly."""
    background, instance = _check(background, instance)
    d = len(instance)
    if d > MAX_EXACT_FEATURES:
        raise ValueError(f"exact enumeration supports d <= {MAX_EXACT_FEATURES}, got {d}; "
                         "use shapley_sampled")
    codes = np.arange(1 << d)
    masks = ((codes[:, None] >> np.arange(d)) & 1).astype(bool)
    v = coalition_values(model, background, instance, masks)
    sizes = masks.sum(axis=1)
    weight = np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d)
                       for s in range(d)])
    phi = np.zeros(d)
    for i in range(d):
        without = ~masks[:, i]
        s = codes[without]
        phi[i] = np.sum(weight[sizes[without]] * (v[s | (1 << i)] - v[s]))
    return Attribution(float(v[0]), phi, instance, float(v[-1]))


def shapley_sampled(model: Model, background, instance, n_samples: int = 2048,
                    seed: int = 0) -> Attribution:
    """Kernel regression over coalitions drawn from the Shapley kernel.

    Sizes are drawn with probability proportional to ``(d-1) / (s (d-s))`` and
    each draw is paired with its complement, so the regression weights are
    uniform. The efficiency constraint is imposed by eliminating the last
    coefficient before the least-squares solve.
    """
    background, instance = _check(background, instance)
    d = len(instance)
    if n_samples < 2 * d:
        raise ValueError(f"n_samples must be >= 2d = {2 * d}, got {n_samples}")
    ends = np.zeros((2, d), dtype=bool)
    ends[1] = True
    v_ends = coalition_values(model, background, instance, ends)
    base, pred = float(v_ends[0]), float(v_ends[1])
    if d == 1:
        return Attribution(base, np.array([pred - base]), instance, pred)
    rng = np.random.default_rng(seed)
    s = np.arange(1, d)
    p = (d - 1) / (s * (d - s))
    half = (n_samples + 1) // 2
    sizes = rng.choice(s, size=half, p=p / p.sum())
    keys = rng.random((half, d))
    rank = np.argsort(np.argsort(keys, axis=1), axis=1)
    first = rank < sizes[:, None]
    masks = np.concatenate([first, ~first])[:n_samples]
    v = coalition_values(model, background, instance, masks)
    z = masks.astype(np.float64)
    target = v - base - z[:, -1] * (pred - base)
    design = z[:, :-1] - z[:, -1:]
    if np.linalg.matrix_rank(design) < d - 1:
        raise ValueError("sampled coalitions leave the kernel regression underdetermined; "
                         "increase n_samples")
    head, *_ = np.linalg.lstsq(design, target, rcond=None)
    phi = np.append(head, (pred - base) - head.sum())
    return Attribution(base, phi, instance, pred)


def global_summary(attributions: Sequence[Attribution], names: Sequence[str]) -> GlobalSummary:
    if not attributions:
        raise ValueError("global_summary needs at least one attribution")
    phi = np.vstack([a.phi for a in attributions])
    values = np.vstack([a.instance for a in attributions])
    if phi.shape[1] != len(names):
        raise ValueError("names do not match the attribution width")
    return GlobalSummary(list(names), np.abs(phi).mean(axis=0), phi, values)


def waterfall_export(attribution: Attribution, names: Sequence[str],
                     feature_values=None, tol: float = 1e-6) -> tuple[list[dict], dict]:
    """Rows sorted by |phi| descending plus a header with base value and prediction.

    ``feature_values`` lets the caller show original-unit values (the model
    itself sees standardized inputs); Contribution Impact is phi times the
    displayed value.
    """
    if abs(attribution.residual) > tol:
        raise ValueError(f"local accuracy violated by {attribution.residual:.3e}")
    values = attribution.instance if feature_values is None else \
        np.asarray(feature_values, dtype=np.float64).ravel()
    if len(values) != len(attribution.phi) or len(names) != len(attribution.phi):
        raise ValueError("names/values do not match the attribution width")
    order = sorted(range(len(names)), key=lambda i: (-abs(attribution.phi[i]), names[i]))
    rows = [{"Feature": names[i], "SHAP Value": float(attribution.phi[i]),
             "Feature Value": float(values[i]),
             "Contribution Impact": float(attribution.phi[i] * values[i])} for i in order]
    header = {"base_value": attribution.base_value, "prediction": attribution.prediction,
              "sum_phi": float(attribution.phi.sum())}
    return rows, header


def strongest_interaction(summary: GlobalSummary, feature: int) -> int | None:
    """Feature that best explains the spread of phi[feature] at fixed feature value.

    Instances are sorted by the feature's value and cut into about ten
    slices; within each slice the absolute correlation of phi[feature] with
    every other feature is summed. A multiplicative interaction shows up as
    strong within-slice correlation even when the global correlation is zero.
    """
    n = len(summary.phi)
    if n < 3:
        return None
    order = np.argsort(summary.values[:, feature], kind="stable")
    step = max(3, int(round(n / 10)))
    scores = np.zeros(len(summary.names))
    for start in range(0, n, step):
        idx = order[start:start + step]
        if len(idx) < 3:
            continue
        y = summary.phi[idx, feature]
        if np.ptp(y) == 0:
            continue
        for j in range(len(summary.names)):
            col = summary.values[idx, j]
            if j != feature and np.ptp(col) > 0:
                scores[j] += abs(float(np.corrcoef(col, y)[0, 1]))
    scores[feature] = -1.0
    best = int(np.argmax(scores))
    return best if scores[best] > 0 else None


def dependence_export(summary: GlobalSummary, feature: int | None = None) -> list[dict]:
    """Per-instance (value, phi, interaction value) rows for the top feature by default."""
    if feature is None:
        feature = summary.order()[0]
    other = strongest_interaction(summary, feature)
    rows = []
    for k in range(len(summary.phi)):
        rows.append({"feature": summary.names[feature],
                     "value": float(summary.values[k, feature]),
                     "shap": float(summary.phi[k, feature]),
                     "interaction_feature": summary.names[other] if other is not None else "",
                     "interaction_value": float(summary.values[k, other])
                     if other is not None else math.nan})
    return rows


def format_table(rows: list[dict], columns: Sequence[str]) -> str:
    """Tab-separated table; floats in repr so the text round-trips exactly."""
    lines = ["\t".join(columns)]
    for row in rows:
        lines.append("\t".join(repr(float(row[c])) if isinstance(row[c], float) else str(row[c])
                               for c in columns))
    return "\n".join(lines) + "\n"
