import numpy as np
import pytest

from odefuse import diffcore as dc

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + step
        hi = f(x)
        x[i] = old - step
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * step)
    return g


def rel_err(a, b, floor: float = 1e-6) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float((np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)).max())


def tape_grads(build, *arrays):
    """Run ``build`` on fresh leaves under a tape; return (loss, grads per leaf)."""
    with dc.Tape() as tape:
        leaves = [dc.Tensor(a) for a in arrays]
        loss = build(*leaves)
    grads = dc.backward(tape, loss)
    return loss.item(), [grads.get(t.id, np.zeros(t.shape)) for t in leaves]


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
