"""Fixed-step classical Runge-Kutta integration of an autonomous field.

All stage evaluations go through diffcore ops, so gradients flow through the
solver when a tape is recording (discretize-then-differentiate).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from . import diffcore as dc

Field = Callable[[dc.Tensor], dc.Tensor]


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 0.01
    steps: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")


def _evaluate(field: Field, h: dc.Tensor) -> dc.Tensor:
    k = field(h)
    if k.shape != h.shape:
        raise dc.ShapeError(f"field returned shape {k.shape} for state {h.shape}")
    return k


def rk4_step(field: Field, h, dt: float) -> dc.Tensor:
    """One RK4 step: ``h + dt/6 (k1 + 2 k2 + 2 k3 + k4)``."""
    h = dc.as_tensor(h)
    k1 = _evaluate(field, h)
    k2 = _evaluate(field, dc.add(h, dc.scale(k1, 0.5 * dt)))
    k3 = _evaluate(field, dc.add(h, dc.scale(k2, 0.5 * dt)))
    k4 = _evaluate(field, dc.add(h, dc.scale(k3, dt)))
    incr = dc.add(dc.add(k1, dc.scale(dc.add(k2, k3), 2.0)), k4)
    return dc.add(h, dc.scale(incr, dt / 6.0))


def integrate(field: Field, h, config: SolverConfig = SolverConfig()) -> dc.Tensor:
    h = dc.as_tensor(h)
    for _ in range(config.steps):
        h = rk4_step(field, h, config.dt)
    return h
