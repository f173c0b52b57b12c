"""MSE training with Adam, plateau learning-rate reduction and early stopping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .model import ModelConfig, NetworkParams, as_tensors, forward, init_params, predict

logger = logging.getLogger(__name__)

IMPROVEMENT_EPS = 1e-8


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    early_stop_patience: int = 15
    lr_reduce_factor: float = 0.2
    lr_reduce_patience: int = 5
    validation_fraction: float = 0.1
    shuffle: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.early_stop_patience < 1 or self.lr_reduce_patience < 1:
            raise ValueError("patience values must be >= 1")
        if not 0 < self.lr_reduce_factor < 1:
            raise ValueError(f"lr_reduce_factor must lie in (0, 1), got {self.lr_reduce_factor}")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_epoch: int = -1

    def __len__(self) -> int:
        return len(self.val_loss)

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch] if self.val_loss else math.nan

    def records(self) -> list[dict]:
        return [{"epoch": i, "train_loss": t, "val_loss": v, "learning_rate": lr,
                 "best": i == self.best_epoch}
                for i, (t, v, lr) in enumerate(zip(self.train_loss, self.val_loss,
                                                   self.learning_rate))]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records())


def mse_loss(pred, truth) -> dc.Tensor:
    pred = dc.as_tensor(pred)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {truth.shape}")
    if truth.size < 1:
        raise ValueError("mse_loss of an empty batch")
    diff = dc.sub(pred, truth)
    return dc.mean_all(dc.mul(diff, diff))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; advances ``state`` in place."""
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {k}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m.get(k, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


def validation_cut(n: int, fraction: float) -> int:
    n_val = int(np.floor(fraction * n))
    if n_val < 1:
        raise ValueError(f"validation slice is empty for n={n}, fraction={fraction}")
    if n - n_val < 2:
        raise ValueError(f"need at least 2 training samples after carving validation (n={n})")
    return n - n_val


def loss_and_grads(params: NetworkParams, X, y, A, config: ModelConfig,
                   training: bool = False, rng=None) -> tuple[float, dict[str, np.ndarray]]:
    with dc.Tape() as tape:
        leaves = as_tensors(params)
        loss = mse_loss(forward(X, A, leaves, config, training, rng), y)
    return loss.item(), dc.gradients_for(dc.backward(tape, loss), leaves)


def evaluate_mse(params: NetworkParams, X, y, A, config: ModelConfig) -> float:
    return float(np.mean((predict(X, A, params, config) - np.asarray(y)) ** 2))


def fit(X, y, A, model_config: ModelConfig, train_config: TrainConfig,
        validation: tuple[np.ndarray, np.ndarray] | None = None,
        params: NetworkParams | None = None,
        disabled_paths: Sequence[str] = ()) -> tuple[NetworkParams, TrainHistory]:
    """Train on ``(X, y)`` and return the best-validation snapshot.

    Without an explicit ``validation`` pair, the chronological tail
    (``validation_fraction``) of the rows is held out.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    tc = train_config
    if validation is None:
        cut = validation_cut(len(X), tc.validation_fraction)
        X, y, Xv, yv = X[:cut], y[:cut], X[cut:], y[cut:]
    else:
        Xv, yv = (np.asarray(a, dtype=np.float64) for a in validation)
        if len(Xv) == 0:
            raise ValueError("validation slice is empty")
    if params is None:
        params = init_params(X.shape[1], model_config, tc.seed, disabled_paths)
    history = TrainHistory()
    if tc.epochs == 0:
        return params, history

    rng = np.random.default_rng(tc.seed + 1)
    state = AdamState()
    lr = tc.learning_rate
    current = params.copy()
    best = current.copy()
    best_val = math.inf
    since_best = since_reduce = 0
    n = len(X)
    for epoch in range(tc.epochs):
        order = rng.permutation(n) if tc.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, tc.batch_size):
            idx = order[start:start + tc.batch_size]
            loss, grads = loss_and_grads(current, X[idx], y[idx], A, model_config, True, rng)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            try:
                current.arrays = adam_step(current.arrays, grads, state, lr)
            except FloatingPointError as exc:
                logger.warning("epoch %d aborted: %s", epoch, exc)
                break
            total += loss * len(idx)
        val = evaluate_mse(current, Xv, yv, A, model_config)
        if not math.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.train_loss.append(total / n)
        history.val_loss.append(val)
        history.learning_rate.append(lr)
        if val < best_val - IMPROVEMENT_EPS:
            best_val, best = val, current.copy()
            history.best_epoch = epoch
            since_best = since_reduce = 0
        else:
            since_best += 1
            since_reduce += 1
            if since_reduce >= tc.lr_reduce_patience:
                lr *= tc.lr_reduce_factor
                since_reduce = 0
                logger.debug("epoch %d: learning rate reduced to %g", epoch, lr)
            if since_best >= tc.early_stop_patience:
                history.stopped_epoch = epoch
                break
    if history.stopped_epoch < 0:
        history.stopped_epoch = len(history) - 1
    return best, history


# -- hyperparameter search ---------------------------------------------------


@dataclass(frozen=True)
class Param:
    """One search dimension: ``kind`` is 'int', 'float', 'log' or 'choice'."""

    kind: str
    low: float = 0.0
    high: float = 0.0
    step: float | None = None
    choices: tuple = ()

    def sample(self, rng: np.random.Generator):
        if self.kind == "choice":
            return self.choices[int(rng.integers(len(self.choices)))]
        if self.kind == "log":
            return float(np.exp(rng.uniform(np.log(self.low), np.log(self.high))))
        if self.step:
            k = int(rng.integers(int(round((self.high - self.low) / self.step)) + 1))
            value = self.low + k * self.step
            return int(round(value)) if self.kind == "int" else float(round(value, 10))
        if self.kind == "int":
            return int(rng.integers(int(self.low), int(self.high) + 1))
        return float(rng.uniform(self.low, self.high))

    def contains(self, value) -> bool:
        if self.kind == "choice":
            return value in self.choices
        return self.low - 1e-12 <= value <= self.high + 1e-12

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "choice":
            d["choices"] = list(self.choices)
        else:
            d.update(low=self.low, high=self.high)
            if self.step:
                d["step"] = self.step
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Param":
        return cls(d["kind"], d.get("low", 0.0), d.get("high", 0.0), d.get("step"),
                   tuple(d.get("choices", ())))


@dataclass(frozen=True)
class SearchSpace:
    params: dict[str, Param]

    def __post_init__(self):
        if not self.params:
            raise ValueError("search space is empty")

    def sample(self, rng: np.random.Generator) -> dict:
        return {name: p.sample(rng) for name, p in self.params.items()}

    def to_dict(self) -> dict:
        return {k: p.to_dict() for k, p in self.params.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls({k: Param.from_dict(v) for k, v in d.items()})


_LR = Param("log", 1e-4, 1e-2)
_DROPOUT = Param("float", 0.1, 0.5, 0.1)

# search ranges per dataset family
SEARCH_SPACES: dict[str, SearchSpace] = {
    "eia": SearchSpace({"hidden_dim": Param("int", 16, 512, 4),
                        "batch_size": Param("choice", choices=(16, 32)),
                        "epochs": Param("int", 30, 250),
                        "dropout_rate": _DROPOUT, "learning_rate": _LR}),
    "solar": SearchSpace({"hidden_dim": Param("int", 16, 256, 4),
                          "batch_size": Param("choice", choices=(16, 32, 64, 128)),
                          "epochs": Param("int", 30, 150), "learning_rate": _LR}),
    "ett": SearchSpace({"hidden_dim": Param("int", 32, 128, 16),
                        "batch_size": Param("choice", choices=(16, 32, 64, 128)),
                        "epochs": Param("int", 30, 100, 10),
                        "dropout_rate": _DROPOUT, "learning_rate": _LR}),
}

MODEL_KEYS = {"hidden_dim", "dropout_rate", "activation", "dt", "ode_steps", "tau"}


def apply_sample(model_config: ModelConfig, train_config: TrainConfig,
                 sample: Mapping) -> tuple[ModelConfig, TrainConfig]:
    m = {k: v for k, v in sample.items() if k in MODEL_KEYS}
    t = {k: v for k, v in sample.items() if k not in MODEL_KEYS}
    return replace(model_config, **m), replace(train_config, **t)


def trial_seed(master_seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([master_seed, trial]).generate_state(1)[0])


@dataclass
class SearchResult:
    best: dict
    best_score: float
    trials: list[dict]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(t, sort_keys=True) + "\n" for t in self.trials)


def hyperopt(space: SearchSpace, trials: int, objective: Callable[[dict, int], float],
             seed: int = 0) -> SearchResult:
    """Seeded random search; ``objective(sample, trial_seed)`` returns validation MSE.

    Trials that raise are logged with a null score and skipped.
    """
    if trials < 1:
        raise ValueError("hyperopt needs at least one trial")
    log, best, best_score = [], None, math.inf
    for i in range(trials):
        tseed = trial_seed(seed, i)
        sample = space.sample(np.random.default_rng(tseed))
        try:
            score = float(objective(sample, tseed))
        except (ValueError, TrainingError) as exc:
            logger.warning("trial %d failed: %s", i, exc)
            log.append({"trial": i, "seed": tseed, "params": sample, "score": None,
                        "error": str(exc)})
            continue
        log.append({"trial": i, "seed": tseed, "params": sample, "score": score})
        if score < best_score:
            best, best_score = sample, score
    if best is None:
        raise RuntimeError("no hyperparameter trial succeeded")
    return SearchResult(best, best_score, log)


def config_dicts(model_config: ModelConfig, train_config: TrainConfig) -> dict:
    return {"model": asdict(model_config), "train": asdict(train_config)}
