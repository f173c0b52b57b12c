"""Minimal reverse-mode differentiation on numpy arrays.

Every op takes :class:`Tensor` inputs, computes its value eagerly and, when a
:class:`Tape` is active, appends a record holding a backward closure.
:func:`backward` walks the records in reverse creation order.

Ops accept an optional leading batch axis so one tape can cover a mini-batch;
the per-sample semantics are unchanged.  Implicit broadcasting is limited to
scalar/equal shapes.  Trailing-vector broadcasts (biases, layer-norm gains)
go through the explicit ``add_bias`` / ``scale_shift`` ops.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()
_active: list["Tape"] = []


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entry."""


class Tensor:
    __slots__ = ("value", "id", "name")

    def __init__(self, value, name: str | None = None):
        if type(value) is not np.ndarray or value.dtype != np.float64:
            value = np.asarray(value, dtype=np.float64)
        self.value = value
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, id={self.id})"


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered op records; use as a context manager to start recording."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind, inputs, out, backward_fn) -> Tensor:
    if _active:
        _active[-1].nodes.append(Node(kind, tuple(inputs), out, backward_fn))
    return out


def _sum_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum leading axes of ``grad`` so it matches a trailing ``shape``."""
    if grad.shape == shape:
        return grad
    if int(np.prod(shape)) == 1:
        return np.asarray(grad.sum()).reshape(shape)
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))).reshape(shape)


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.value.size != 1 and b.value.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _check_trailing(op: str, x: Tensor, v: Tensor) -> None:
    xs, vs = x.value.shape, v.value.shape
    if len(vs) > len(xs) or xs[len(xs) - len(vs):] != vs:
        raise ShapeError(f"{op}: {v.shape} does not match trailing dims of {x.shape}")


# -- arithmetic -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("add", a, b)
    out = Tensor(a.value + b.value)
    return _record("add", (a, b), out,
                   lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("sub", a, b)
    out = Tensor(a.value - b.value)
    return _record("sub", (a, b), out,
                   lambda g: (_sum_to(g, a.shape), -_sum_to(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("mul", a, b)
    out = Tensor(a.value * b.value)
    return _record("mul", (a, b), out,
                   lambda g: (_sum_to(g * b.value, a.shape),
                              _sum_to(g * a.value, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a non-differentiable Python constant."""
    out = Tensor(x.value * c)
    return _record("scale", (x,), out, lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` where ``b`` matches the trailing dimensions of ``x``."""
    _check_trailing("add_bias", x, b)
    out = Tensor(x.value + b.value)
    return _record("add_bias", (x, b), out, lambda g: (g, _sum_to(g, b.shape)))


def scale_shift(x: Tensor, s: Tensor, t: Tensor) -> Tensor:
    """``x * s + t`` with ``s`` and ``t`` matching trailing dims of ``x``."""
    _check_trailing("scale_shift", x, s)
    _check_trailing("scale_shift", x, t)
    out = Tensor(x.value * s.value + t.value)
    return _record("scale_shift", (x, s, t), out,
                   lambda g: (g * s.value, _sum_to(g * x.value, s.shape),
                              _sum_to(g, t.shape)))


def row_scale(x: Tensor, w: Tensor) -> Tensor:
    """``out[..., i, :] = x[..., i] * w[i, :]`` for ``x`` (..., d), ``w`` (d, h)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"row_scale: {x.shape} and {w.shape}")
    out = Tensor(x.value[..., None] * w.value)
    return _record("row_scale", (x, w), out,
                   lambda g: ((g * w.value).sum(-1),
                              _sum_to(g * x.value[..., None], w.shape)))


# -- nonlinearities ---------------------------------------------------------


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    out = Tensor(y)
    return _record("tanh", (x,), out, lambda g: (g * (1.0 - y * y),))


def sin(x: Tensor) -> Tensor:
    out = Tensor(np.sin(x.value))
    return _record("sin", (x,), out, lambda g: (g * np.cos(x.value),))


def relu(x: Tensor) -> Tensor:
    # subgradient 0 at 0
    on = x.value > 0
    out = Tensor(np.where(on, x.value, 0.0))
    return _record("relu", (x,), out, lambda g: (g * on,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    slopes = np.where(x.value > 0, 1.0, slope)
    out = Tensor(x.value * slopes)
    return _record("leaky_relu", (x,), out, lambda g: (g * slopes,))


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch by name: add, mul, tanh, sin, relu, scale_shift."""
    table = {"add": add, "sub": sub, "mul": mul, "tanh": tanh, "sin": sin,
             "relu": relu, "leaky_relu": leaky_relu, "scale_shift": scale_shift}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


# -- linear algebra and structure -------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a plain ``k x n`` matrix shared across any leading batch
    axes of ``a``, or carries the same batch axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2] or (
            bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]):
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = Tensor(av @ bv)

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2 and av.ndim > 2:
            k, n = bv.shape
            gb = av.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), out, backward)


def outer_add(a: Tensor, b: Tensor) -> Tensor:
    """``out[..., i, j] = a[..., i] + b[..., j]``."""
    if a.shape != b.shape:
        raise ShapeError(f"outer_add: {a.shape} and {b.shape}")
    out = Tensor(a.value[..., :, None] + b.value[..., None, :])
    return _record("outer_add", (a, b), out, lambda g: (g.sum(-1), g.sum(-2)))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.value.reshape(shape))
    return _record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = Tensor(np.concatenate([x.value for x in xs], axis=axis))
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return np.split(g, cuts, axis=axis)

    return _record("concat", xs, out, backward)


def mean_pool(x: Tensor, axis: int = 0) -> Tensor:
    """Arithmetic mean over ``axis``; gradient fans out as ``1/n``."""
    n = x.shape[axis]
    if n < 1:
        raise ShapeError("mean_pool: empty axis")
    out = Tensor(x.value.mean(axis=axis))

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _record("mean_pool", (x,), out, backward)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.value.sum())
    return _record("sum_all", (x,), out,
                   lambda g: (np.full(x.shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.value.size
    out = Tensor(x.value.mean())
    return _record("mean_all", (x,), out,
                   lambda g: (np.full(x.shape, float(g) / n),))


def softmax_masked(scores: Tensor, mask) -> Tensor:
    """Row softmax of ``scores`` restricted to entries where ``mask > 0``.

    Masked entries come out exactly zero. ``mask`` is a constant ``d x d``
    array; ``scores`` may carry leading batch axes.
    """
    mask = np.asarray(getattr(mask, "A", mask), dtype=np.float64)
    if scores.shape[-2:] != mask.shape:
        raise ShapeError(f"softmax_masked: scores {scores.shape} vs mask {mask.shape}")
    keep = mask > 0
    if not keep.any(axis=-1).all():
        raise DegenerateRowError("softmax_masked: mask row with no nonzero entry")
    s = np.where(keep, scores.value, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(s), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("softmax_masked", (scores,), out, backward)


def conv1d_same(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Single-channel 1-D cross-correlation with zero 'same' padding.

    ``x`` (..., L), ``kernels`` (K, F) with odd K, ``bias`` (F,) -> (..., L, F);
    ``out[t, f] = bias[f] + sum_j kernels[j, f] * x[t + j - K//2]``.
    """
    if x.shape[-1] < 1:
        raise ShapeError("conv1d_same: empty input")
    if kernels.ndim != 2 or kernels.shape[0] % 2 == 0 or bias.shape != kernels.shape[1:]:
        raise ShapeError(f"conv1d_same: kernels {kernels.shape}, bias {bias.shape}")
    width = kernels.shape[0]
    pad = width // 2
    length = x.shape[-1]
    padded = np.pad(x.value, [(0, 0)] * (x.ndim - 1) + [(pad, pad)])
    windows = np.lib.stride_tricks.sliding_window_view(padded, width, axis=-1)
    out = Tensor(windows @ kernels.value + bias.value)

    def backward(g):
        gk = windows.reshape(-1, width).T @ g.reshape(-1, g.shape[-1])
        gw = g @ kernels.value.T  # (..., L, K)
        gpad = np.zeros(padded.shape)
        for j in range(width):
            gpad[..., j:j + length] += gw[..., j]
        return gpad[..., pad:pad + length], gk, _sum_to(g, bias.shape)

    return _record("conv1d_same", (x, kernels, bias), out, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis then apply ``gain`` and ``bias``."""
    _check_trailing("layer_norm", x, gain)
    _check_trailing("layer_norm", x, bias)
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.value + bias.value)

    def backward(g):
        gx_hat = g * gain.value
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _sum_to(g * xhat, gain.shape), _sum_to(g, bias.shape)

    return _record("layer_norm", (x, gain, bias), out, backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None,
            training: bool) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.value * keep)
    return _record("dropout", (x,), out, lambda g: (g * keep,))


# -- reverse pass -----------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(t) for every tensor reached on ``tape``.

    Returns a dict keyed by tensor id. Tensors used several times receive
    the sum of their contributions.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.id, None) if node.output is not loss else grads.get(loss.id)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None:
                continue
            prev = grads.get(inp.id)
            grads[inp.id] = gi if prev is None else prev + gi
    return grads


def gradients_for(grads: dict[int, np.ndarray], tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Map ``backward`` output onto named leaves; unreached leaves get zeros."""
    return {k: grads.get(t.id, np.zeros(t.shape)) for k, t in tensors.items()}
