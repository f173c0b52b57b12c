"""Correlation graph over input features.

Edges connect features whose absolute Pearson correlation strictly exceeds a
threshold; every node keeps a self-loop of weight 1.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Adjacency:
    A: np.ndarray
    tau: float

    @property
    def d(self) -> int:
        return self.A.shape[0]

    def fingerprint(self) -> str:
        """Short digest of the exact matrix bytes, for run manifests."""
        raw = np.ascontiguousarray(self.A, dtype="<f8").tobytes()
        return hashlib.sha256(raw + repr(float(self.tau)).encode()).hexdigest()[:16]

    def to_text(self, names=None) -> str:
        names = list(names) if names is not None else [f"f{i}" for i in range(self.d)]
        width = max(8, *(len(n) for n in names))
        lines = [f"# tau={float(self.tau)!r} d={self.d}",
                 " " * width + " " + " ".join(n.rjust(width) for n in names)]
        for name, row in zip(names, self.A):
            lines.append(name.ljust(width) + " " + " ".join(f"{v:{width}.4f}" for v in row))
        return "\n".join(lines) + "\n"


def pearson_matrix(X) -> np.ndarray:
    """Pairwise Pearson correlations of the columns of ``X`` (n x d).

    Constant columns get correlation 0 with every other column. The diagonal
    is exactly 1.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {X.shape}")
    n, d = X.shape
    if n < 3:
        raise ValueError(f"need at least 3 rows for correlations, got {n}")
    Xc = X - X.mean(axis=0)
    norms = np.sqrt((Xc * Xc).sum(axis=0))
    ok = norms > 0
    Z = np.zeros_like(Xc)
    Z[:, ok] = Xc[:, ok] / norms[ok]
    corr = Z.T @ Z
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr


def build_adjacency(corr, tau: float = 0.3) -> Adjacency:
    if isinstance(corr, Adjacency):
        raise TypeError("build_adjacency expects a correlation matrix, not an Adjacency")
    corr = np.asarray(corr, dtype=np.float64)
    if corr.ndim != 2 or corr.shape[0] != corr.shape[1]:
        raise ValueError(f"correlation matrix must be square, got {corr.shape}")
    if not np.allclose(corr, corr.T, rtol=0.0, atol=1e-10):
        raise ValueError("correlation matrix is not symmetric")
    mag = np.abs(corr)
    A = np.where(mag > tau, mag, 0.0)
    A = np.maximum(A, A.T)
    np.fill_diagonal(A, 1.0)
    return Adjacency(A=A, tau=float(tau))


def adjacency_from_features(X, tau: float = 0.3) -> Adjacency:
    return build_adjacency(pearson_matrix(X), tau)
