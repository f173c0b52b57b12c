"""Four-path forecasting network.

Paths, in concatenation order:

* ``ode``: per-feature embedding to a ``d x h`` node state, one RK4 step of a
  graph-attention vector field, mean over nodes -> ``h``
* ``daubechies``: width-5 learnable convolution over the feature vector,
  ReLU, mean over positions -> ``h/2``
* ``parametric``: ``act((x W_f) * a + b)`` with ``act`` in {sin, tanh} -> ``h/2``
* ``dense``: ``relu(x W + b)`` -> ``h/4``

The fused vector goes through a residual head ``h -> h/2 -> h`` (+ skip from
the first head layer) and a final scalar layer.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping

import numpy as np

from . import diffcore as dc
from .graph import Adjacency
from .odesolve import SolverConfig, integrate

PATHS = ("ode", "daubechies", "parametric", "dense")
ARCHIVE_VERSION = 1
KERNEL_WIDTH = 5
ATTENTION_SLOPE = 0.2
LN_EPS = 1e-5

# named ablation settings -> disabled paths
ABLATIONS: dict[str, tuple[str, ...]] = {
    "Full Model": (),
    "No ODE": ("ode",),
    "No Daubechies": ("daubechies",),
    "No Parametric": ("parametric",),
    "No Dense": ("dense",),
    "Only ODE": ("daubechies", "parametric", "dense"),
}


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 32
    dropout_rate: float = 0.2
    activation: str = "sin"
    dt: float = 0.01
    ode_steps: int = 1
    tau: float = 0.3

    def __post_init__(self):
        h = self.hidden_dim
        if not isinstance(h, (int, np.integer)) or h % 4:
            raise ValueError(f"hidden_dim must be an integer divisible by 4, got {h!r}")
        if not 16 <= h <= 512:
            raise ValueError(f"hidden_dim must lie in [16, 512], got {h}")
        if not 0.0 <= self.dropout_rate <= 0.5:
            raise ValueError(f"dropout_rate must lie in [0, 0.5], got {self.dropout_rate}")
        if self.activation not in ("sin", "tanh"):
            raise ValueError(f"activation must be 'sin' or 'tanh', got {self.activation!r}")
        SolverConfig(self.dt, self.ode_steps)
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(self.dt, self.ode_steps)


def path_widths(h: int) -> dict[str, int]:
    return {"ode": h, "daubechies": h // 2, "parametric": h // 2, "dense": h // 4}


def enabled_paths(disabled: Iterable[str] = ()) -> tuple[str, ...]:
    disabled = set(disabled)
    unknown = disabled - set(PATHS)
    if unknown:
        raise ValueError(f"unknown paths {sorted(unknown)}; choose from {PATHS}")
    paths = tuple(p for p in PATHS if p not in disabled)
    if not paths:
        raise ValueError("at least one path must stay enabled")
    return paths


def fused_width(h: int, paths: Iterable[str] = PATHS) -> int:
    widths = path_widths(h)
    return sum(widths[p] for p in paths)


@dataclass
class NetworkParams:
    arrays: dict[str, np.ndarray]
    d: int
    hidden_dim: int
    paths: tuple[str, ...] = PATHS

    def copy(self) -> "NetworkParams":
        return NetworkParams({k: v.copy() for k, v in self.arrays.items()},
                             self.d, self.hidden_dim, self.paths)

    def count(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays.values())


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(d: int, config: ModelConfig, seed: int,
                disabled_paths: Iterable[str] = ()) -> NetworkParams:
    """Glorot-uniform weights, zero biases/phases, unit amplitudes and gains."""
    if d < 1:
        raise ValueError(f"need at least one feature, got d={d}")
    h = config.hidden_dim
    if h % 4:
        raise ValueError(f"hidden_dim must be divisible by 4, got {h}")
    paths = enabled_paths(disabled_paths)
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    if "ode" in paths:
        p["ode.proj_w"] = _glorot(rng, (d, h), d, h)
        p["ode.proj_b"] = np.zeros((d, h))
        p["ode.w1"] = _glorot(rng, (h, h), h, h)
        p["ode.b1"] = np.zeros(h)
        p["ode.w2"] = _glorot(rng, (h, h), h, h)
        p["ode.b2"] = np.zeros(h)
        p["ode.attn_w"] = _glorot(rng, (h, h), h, h)
        p["ode.attn_src"] = _glorot(rng, (h, 1), 2 * h, 1)
        p["ode.attn_dst"] = _glorot(rng, (h, 1), 2 * h, 1)
        p["ode.ln_gain"] = np.ones(h)
        p["ode.ln_bias"] = np.zeros(h)
    if "daubechies" in paths:
        p["daub.kernel"] = _glorot(rng, (KERNEL_WIDTH, h // 2), KERNEL_WIDTH, h // 2)
        p["daub.bias"] = np.zeros(h // 2)
    if "parametric" in paths:
        p["param.w_freq"] = _glorot(rng, (d, h // 2), d, h // 2)
        p["param.amp"] = np.ones(h // 2)
        p["param.phase"] = np.zeros(h // 2)
    if "dense" in paths:
        p["dense.w"] = _glorot(rng, (d, h // 4), d, h // 4)
        p["dense.b"] = np.zeros(h // 4)
    width = fused_width(h, paths)
    p["head.w1"] = _glorot(rng, (width, h), width, h)
    p["head.b1"] = np.zeros(h)
    p["head.w2"] = _glorot(rng, (h, h // 2), h, h // 2)
    p["head.b2"] = np.zeros(h // 2)
    p["head.w3"] = _glorot(rng, (h // 2, h), h // 2, h)
    p["head.b3"] = np.zeros(h)
    p["head.w4"] = _glorot(rng, (h, 1), h, 1)
    p["head.b4"] = np.zeros(1)
    return NetworkParams(p, d, h, paths)


def as_tensors(params) -> dict[str, dc.Tensor]:
    """Wrap parameter arrays as fresh leaf tensors (pass-through for tensors)."""
    arrays = params.arrays if isinstance(params, NetworkParams) else params
    return {k: v if isinstance(v, dc.Tensor) else dc.Tensor(v, name=k)
            for k, v in arrays.items()}


def _mask(A) -> np.ndarray:
    return A.A if isinstance(A, Adjacency) else np.asarray(A, dtype=np.float64)


def _batched(x) -> tuple[dc.Tensor, bool]:
    x = dc.as_tensor(x)
    if x.ndim == 1:
        return dc.reshape(x, (1, x.shape[0])), True
    return x, False


def _dense(x, w, b):
    return dc.add_bias(dc.matmul(x, w), b)


# -- ODE path ---------------------------------------------------------------


def graph_attention(H: dc.Tensor, A, W: dc.Tensor, u_src: dc.Tensor,
                    u_dst: dc.Tensor) -> dc.Tensor:
    """Single-head additive attention restricted to edges of ``A``.

    ``s_ij = leaky_relu(u_src . (W H_i) + u_dst . (W H_j))`` on edges,
    ``alpha = masked row softmax(s)``, ``out_i = sum_j alpha_ij W H_j``.
    """
    Z = dc.matmul(H, W)
    node_shape = Z.shape[:-1]
    src = dc.reshape(dc.matmul(Z, u_src), node_shape)
    dst = dc.reshape(dc.matmul(Z, u_dst), node_shape)
    scores = dc.leaky_relu(dc.outer_add(src, dst), ATTENTION_SLOPE)
    alpha = dc.softmax_masked(scores, _mask(A))
    return dc.matmul(alpha, Z)


def ode_field(H: dc.Tensor, A, p: Mapping[str, dc.Tensor]) -> dc.Tensor:
    """dH/dt: two tanh layers, graph attention, residual, layer norm."""
    z = dc.tanh(_dense(H, p["ode.w1"], p["ode.b1"]))
    z = dc.tanh(_dense(z, p["ode.w2"], p["ode.b2"]))
    g = graph_attention(z, A, p["ode.attn_w"], p["ode.attn_src"], p["ode.attn_dst"])
    return dc.layer_norm(dc.add(g, H), p["ode.ln_gain"], p["ode.ln_bias"], LN_EPS)


def embed_nodes(x: dc.Tensor, p: Mapping[str, dc.Tensor]) -> dc.Tensor:
    """Node i gets ``x_i * proj_w[i] + proj_b[i]``: (..., d) -> (..., d, h)."""
    return dc.add_bias(dc.row_scale(x, p["ode.proj_w"]), p["ode.proj_b"])


def ode_path(x, A, p: Mapping[str, dc.Tensor], config: ModelConfig, field=None) -> dc.Tensor:
    x, single = _batched(x)
    H0 = embed_nodes(x, p)
    if field is None:
        def field(H):
            return ode_field(H, A, p)
    H1 = integrate(field, H0, config.solver)
    out = dc.mean_pool(H1, axis=-2)
    return dc.reshape(out, out.shape[1:]) if single else out


# -- transform paths --------------------------------------------------------


def daubechies_path(x, p: Mapping[str, dc.Tensor]) -> dc.Tensor:
    x, single = _batched(x)
    conv = dc.relu(dc.conv1d_same(x, p["daub.kernel"], p["daub.bias"]))
    out = dc.mean_pool(conv, axis=-2)
    return dc.reshape(out, out.shape[1:]) if single else out


def parametric_path(x, p: Mapping[str, dc.Tensor], activation: str = "sin") -> dc.Tensor:
    if activation not in ("sin", "tanh"):
        raise ValueError(f"activation must be 'sin' or 'tanh', got {activation!r}")
    x, single = _batched(x)
    z = dc.scale_shift(dc.matmul(x, p["param.w_freq"]), p["param.amp"], p["param.phase"])
    out = dc.sin(z) if activation == "sin" else dc.tanh(z)
    return dc.reshape(out, out.shape[1:]) if single else out


def dense_path(x, p: Mapping[str, dc.Tensor]) -> dc.Tensor:
    x, single = _batched(x)
    out = dc.relu(_dense(x, p["dense.w"], p["dense.b"]))
    return dc.reshape(out, out.shape[1:]) if single else out


# -- fusion -----------------------------------------------------------------


def _present_paths(p: Mapping[str, object]) -> tuple[str, ...]:
    prefix = {"ode": "ode.", "daubechies": "daub.", "parametric": "param.", "dense": "dense."}
    return tuple(name for name in PATHS if any(k.startswith(prefix[name]) for k in p))


def fuse(x, A, p: Mapping[str, dc.Tensor], config: ModelConfig) -> dc.Tensor:
    """Concatenate the enabled path outputs in fixed order: (B, width)."""
    x, _ = _batched(x)
    parts = []
    for name in _present_paths(p):
        if name == "ode":
            parts.append(ode_path(x, A, p, config))
        elif name == "daubechies":
            parts.append(daubechies_path(x, p))
        elif name == "parametric":
            parts.append(parametric_path(x, p, config.activation))
        else:
            parts.append(dense_path(x, p))
    return dc.concat(parts, axis=-1)


def forward(x, A, params, config: ModelConfig, training: bool = False,
            rng: np.random.Generator | None = None) -> dc.Tensor:
    """Scalar prediction per sample: shape (B,) for (B, d) input, () for (d,)."""
    p = as_tensors(params)
    x, single = _batched(x)
    hc = fuse(x, A, p, config)
    rate = config.dropout_rate
    u1 = dc.dropout(dc.relu(_dense(hc, p["head.w1"], p["head.b1"])), rate, rng, training)
    u2 = dc.dropout(dc.relu(_dense(u1, p["head.w2"], p["head.b2"])), rate, rng, training)
    u3 = dc.relu(_dense(u2, p["head.w3"], p["head.b3"]))
    y = _dense(dc.add(u3, u1), p["head.w4"], p["head.b4"])
    return dc.reshape(y, () if single else (y.shape[0],))


def ablation_forward(x, A, params, config: ModelConfig, disabled_paths: Iterable[str],
                     training: bool = False, rng=None) -> dc.Tensor:
    """``forward`` for a network initialised without ``disabled_paths``."""
    wanted = enabled_paths(disabled_paths)
    arrays = params.arrays if isinstance(params, NetworkParams) else params
    present = _present_paths(arrays)
    if present != wanted:
        raise ValueError(f"parameters carry paths {present}, expected {wanted}")
    return forward(x, A, params, config, training, rng)


def predict(x, A, params: NetworkParams, config: ModelConfig,
            batch_size: int = 4096) -> np.ndarray:
    """Eval-mode predictions as a plain array, chunked to bound memory."""
    X = np.asarray(x, dtype=np.float64)
    if X.ndim == 1:
        return np.asarray(forward(X, A, params, config).value)
    p = as_tensors(params)
    out = [forward(X[i:i + batch_size], A, p, config).value
           for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


# -- archive ----------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_params(path, params: NetworkParams, config: ModelConfig,
                extra: Mapping[str, object] | None = None) -> None:
    """Write a versioned archive: ``manifest.json`` plus one raw ``<f8`` block per array."""
    manifest = {
        "format_version": ARCHIVE_VERSION,
        "dtype": "<f8",
        "d": params.d,
        "hidden_dim": params.hidden_dim,
        "paths": list(params.paths),
        "config": asdict(config),
        "arrays": [{"name": k, "shape": list(v.shape), "block": f"blocks/{k}.f8"}
                   for k, v in params.arrays.items()],
        "extra": dict(extra or {}),
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_write(zf, "manifest.json",
                   json.dumps(manifest, indent=2, sort_keys=True).encode())
        for k, v in params.arrays.items():
            _zip_write(zf, f"blocks/{k}.f8", np.ascontiguousarray(v, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_params(path) -> tuple[NetworkParams, ModelConfig, dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != ARCHIVE_VERSION:
            raise ValueError(f"unsupported archive version {manifest.get('format_version')}")
        arrays = {}
        for entry in manifest["arrays"]:
            raw = zf.read(entry["block"])
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
    params = NetworkParams(arrays, manifest["d"], manifest["hidden_dim"], tuple(manifest["paths"]))
    return params, ModelConfig(**manifest["config"]), manifest.get("extra", {})
