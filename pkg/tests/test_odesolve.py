import math

import numpy as np
import pytest

from odefuse import diffcore as dc
from odefuse.odesolve import SolverConfig, integrate, rk4_step
from conftest import numeric_grad, rel_err


def decay(h):
    return dc.scale(h, -1.0)


def global_error(dt, t_end=0.08):
    steps = int(round(t_end / dt))
    h = integrate(decay, dc.Tensor([1.0]), SolverConfig(dt, steps))
    return abs(h.value[0] - math.exp(-t_end))


def test_single_step_matches_hand_stages():
    dt = 0.1
    k1 = -1.0
    k2 = -(1 + 0.5 * dt * k1)
    k3 = -(1 + 0.5 * dt * k2)
    k4 = -(1 + dt * k3)
    expect = 1 + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    assert rk4_step(decay, dc.Tensor([1.0]), dt).value[0] == pytest.approx(expect, abs=1e-15)


def test_zero_field_is_identity():
    h = np.array([1.5, -2.0])
    out = integrate(lambda x: dc.scale(x, 0.0), dc.Tensor(h), SolverConfig(0.01, 5))
    assert np.array_equal(out.value, h)


def test_exponential_one_step():
    out = integrate(decay, dc.Tensor([1.0]), SolverConfig(0.01, 1)).value[0]
    assert abs(out - math.exp(-0.01)) < 1e-11


def test_fourth_order_convergence():
    errs = [global_error(0.08 / 2 ** k) for k in range(4)]
    ratios = [errs[i] / errs[i + 1] for i in range(3)]
    assert all(abs(r / 16 - 1) < 0.2 for r in ratios), ratios


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(dt=0.0)
    with pytest.raises(ValueError):
        SolverConfig(steps=0)


def test_field_shape_mismatch():
    with pytest.raises(dc.ShapeError):
        rk4_step(lambda h: dc.sum_all(h), dc.Tensor([1.0, 2.0]), 0.1)


def test_gradient_through_solver(rng):
    W = rng.uniform(-1, 1, size=(3, 3))
    h0 = rng.uniform(-1, 1, size=(2, 3))

    def run(h, w):
        return integrate(lambda s: dc.tanh(dc.matmul(s, w)), h, SolverConfig(0.1, 3))

    with dc.Tape() as tape:
        th, tw = dc.Tensor(h0), dc.Tensor(W)
        loss = dc.sum_all(dc.sin(run(th, tw)))
    g = dc.backward(tape, loss)

    def f_h(v):
        return float(np.sin(run(dc.Tensor(v), dc.Tensor(W)).value).sum())

    def f_w(v):
        return float(np.sin(run(dc.Tensor(h0), dc.Tensor(v)).value).sum())

    assert rel_err(g[th.id], numeric_grad(f_h, h0)) < 1e-4
    assert rel_err(g[tw.id], numeric_grad(f_w, W)) < 1e-4
