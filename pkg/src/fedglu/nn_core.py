"""Dense ReLU network with hand-written backprop, Adam/SGD and JSON checkpoints.

All parameters of a model live in one flat float64 vector. Per-layer weight
matrices (out x in, row-major) and bias vectors are views into it, laid out
as W0, b0, W1, b1, ... . Optimisers and federated averaging work on the flat
vector directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cgm_data import DEFAULT_NORMALIZER, Normalizer, SampleSet, denormalize
from .loss import LossSpec, batch_grad, per_sample_loss

ARCHITECTURE = (24, 512, 256, 256, 64, 1)


class DimensionMismatch(ValueError):
    pass


class StaleCache(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class NonFiniteParameters(FloatingPointError):
    pass


class EmptyDataset(ValueError):
    pass


def param_count(layer_dims: Sequence[int]) -> int:
    return sum(o * i + o for i, o in zip(layer_dims[:-1], layer_dims[1:]))


class MlpModel:
    """Parameters of a fully-connected net; ReLU hidden layers, identity output."""

    def __init__(self, layer_dims: Sequence[int] = ARCHITECTURE, params: Optional[np.ndarray] = None):
        dims = tuple(int(d) for d in layer_dims)
        if len(dims) < 2 or min(dims) < 1:
            raise DimensionMismatch(f"invalid layer dims {dims}")
        self.layer_dims = dims
        n = param_count(dims)
        if params is None:
            self.params = np.zeros(n)
        else:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (n,):
                raise DimensionMismatch(f"expected {n} parameters for {dims}, got {params.shape}")
            self.params = params.copy()
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        offset = 0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            self.weights.append(self.params[offset:offset + fan_in * fan_out].reshape(fan_out, fan_in))
            offset += fan_in * fan_out
            self.biases.append(self.params[offset:offset + fan_out])
            offset += fan_out

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def flatten(self) -> np.ndarray:
        return self.params.copy()

    @classmethod
    def unflatten(cls, vec: np.ndarray, layer_dims: Sequence[int] = ARCHITECTURE) -> "MlpModel":
        return cls(layer_dims, vec)

    def copy(self) -> "MlpModel":
        return MlpModel(self.layer_dims, self.params)

    def load(self, vec: np.ndarray) -> None:
        if vec.shape != self.params.shape:
            raise DimensionMismatch(f"cannot load {vec.shape} into {self.params.shape}")
        self.params[...] = vec

    def __repr__(self):
        return f"MlpModel({list(self.layer_dims)}, n_params={self.params.size})"


def init_model(seed: int, layer_dims: Sequence[int] = ARCHITECTURE) -> MlpModel:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    model = MlpModel(layer_dims)
    for w in model.weights:
        bound = np.sqrt(6.0 / w.shape[1])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return model


@dataclass
class ForwardCache:
    layer_dims: tuple
    activations: list  # input plus post-activation output of each hidden layer
    pre_activations: list


def forward(model: MlpModel, x) -> tuple[np.ndarray, ForwardCache]:
    """Predict for a single input vector or a batch (n, d_in).

    Returns the (normalised) prediction, a scalar-shaped array for 1-d input
    or shape (n,) for a batch, along with the cache needed by ``backward``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.ndim != 2 or a.shape[1] != model.layer_dims[0]:
        raise DimensionMismatch(f"input shape {x.shape} does not match input dim {model.layer_dims[0]}")
    acts, pres = [a], []
    last = model.n_layers - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        pres.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        if i != last:
            acts.append(a)
    out = a[:, 0]
    cache = ForwardCache(model.layer_dims, acts, pres)
    return (out[0] if single else out), cache


def predict(model: MlpModel, X, chunk: int = 8192) -> np.ndarray:
    """Forward pass without keeping a cache; normalised outputs of shape (n,)."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty(len(X))
    last = model.n_layers - 1
    for s in range(0, len(X), chunk):
        a = X[s:s + chunk]
        for i, (w, b) in enumerate(zip(model.weights, model.biases)):
            a = a @ w.T + b
            if i != last:
                np.maximum(a, 0.0, out=a)
        out[s:s + chunk] = a[:, 0]
    return out


def predict_mgdl(model: MlpModel, X, normalizer: Normalizer = DEFAULT_NORMALIZER) -> np.ndarray:
    return denormalize(predict(model, X), normalizer)


def backward(model: MlpModel, cache: ForwardCache, dL_dyhat) -> np.ndarray:
    """Exact gradient of the loss w.r.t. the flat parameter vector.

    ``dL_dyhat`` holds one entry per cached input (a scalar for a single
    input). ReLU'(0) is taken as 0.
    """
    if cache.layer_dims != model.layer_dims:
        raise StaleCache(f"cache built for {cache.layer_dims}, model is {model.layer_dims}")
    n = cache.activations[0].shape[0]
    delta = np.asarray(dL_dyhat, dtype=np.float64).reshape(-1, 1)
    if delta.shape[0] != n:
        raise StaleCache(f"{delta.shape[0]} output gradients for a cache of {n} inputs")
    grad = MlpModel(model.layer_dims)
    for i in range(model.n_layers - 1, -1, -1):
        a_prev = cache.activations[i]
        grad.weights[i][...] = delta.T @ a_prev
        grad.biases[i][...] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i]) * (cache.pre_activations[i - 1] > 0.0)
    return grad.params


# ---------------------------------------------------------------------------
# optimisers

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))

    def to_dict(self) -> dict:
        return {"m": self.m.tolist(), "v": self.v.tolist(), "t": self.t,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(np.asarray(d["m"], dtype=np.float64), np.asarray(d["v"], dtype=np.float64),
                   int(d["t"]), d["beta1"], d["beta2"], d["eps"])


def _check_finite(grads: np.ndarray) -> None:
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient("gradient contains NaN or Inf")


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float):
    """One bias-corrected Adam update, applied to ``params`` and ``state`` in place."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise DimensionMismatch("params, grads and Adam moments must be aligned")
    _check_finite(grads)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * (grads * grads)
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if not np.all(np.isfinite(params)):
        raise NonFiniteParameters("Adam step produced non-finite parameters")
    return params, state


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    _check_finite(grads)
    out = params - lr * grads
    if not np.all(np.isfinite(out)):
        raise NonFiniteParameters("SGD step produced non-finite parameters")
    return out


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 500
    max_epochs: int = 50
    patience: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate and batch_size must be positive")
        if self.max_epochs < 0 or self.patience < 0:
            raise ValueError("max_epochs and patience must be non-negative")


@dataclass
class TrainResult:
    model: MlpModel
    train_trace: list = field(default_factory=list)
    val_trace: list = field(default_factory=list)
    optimizer: Optional[AdamState] = None

    @property
    def epochs_run(self) -> int:
        return len(self.train_trace)


def evaluate_loss(model: MlpModel, samples: SampleSet, loss: LossSpec,
                  normalizer: Normalizer = DEFAULT_NORMALIZER) -> float:
    y_pred = predict_mgdl(model, samples.X, normalizer)
    return float(np.mean(per_sample_loss(loss, samples.y, y_pred)))


def train(model: MlpModel, samples: SampleSet, loss: LossSpec, cfg: TrainConfig,
          val: Optional[SampleSet] = None, normalizer: Normalizer = DEFAULT_NORMALIZER,
          optimizer: Optional[AdamState] = None) -> TrainResult:
    """Minibatch Adam training with a seeded shuffle per epoch.

    The loss is evaluated in mg/dL on the denormalised prediction. Training
    stops after ``patience`` consecutive epochs without improvement of the
    monitored loss (validation loss if ``val`` is given, else the epoch's
    running training loss); the weights at the last step are returned.
    """
    if len(samples) == 0:
        raise EmptyDataset("cannot train on an empty sample set")
    model = model.copy()
    state = optimizer if optimizer is not None else AdamState.zeros(model.params.size)
    rng = np.random.default_rng(cfg.rng_seed)
    n = len(samples)
    result = TrainResult(model, optimizer=state)
    best = np.inf
    stale = 0
    for _ in range(cfg.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            out, cache = forward(model, samples.X[idx])
            y_pred = denormalize(out, normalizer)
            y_true = samples.y[idx]
            total += float(per_sample_loss(loss, y_true, y_pred).sum())
            d_out = batch_grad(loss, y_true, y_pred) * normalizer.span
            adam_step(model.params, backward(model, cache, d_out), state, cfg.learning_rate)
        epoch_loss = total / n
        result.train_trace.append(epoch_loss)
        monitored = epoch_loss
        if val is not None and len(val):
            monitored = evaluate_loss(model, val, loss, normalizer)
            result.val_trace.append(monitored)
        if monitored < best:
            best = monitored
            stale = 0
        else:
            stale += 1
        if stale >= cfg.patience:
            break
    return result


# ---------------------------------------------------------------------------
# checkpoints

def model_to_dict(model: MlpModel, optimizer: Optional[AdamState] = None) -> dict:
    d = {
        "arch": list(model.layer_dims),
        "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in zip(model.weights, model.biases)],
    }
    if optimizer is not None:
        d["optimizer"] = optimizer.to_dict()
    return d


def model_from_dict(d: dict) -> tuple[MlpModel, Optional[AdamState]]:
    model = MlpModel(d["arch"])
    if len(d["layers"]) != model.n_layers:
        raise DimensionMismatch(f"checkpoint has {len(d['layers'])} layers, arch implies {model.n_layers}")
    for layer, w, b in zip(d["layers"], model.weights, model.biases):
        lw = np.asarray(layer["w"], dtype=np.float64)
        lb = np.asarray(layer["b"], dtype=np.float64)
        if lw.shape != w.shape or lb.shape != b.shape:
            raise DimensionMismatch("checkpoint layer shapes disagree with arch")
        w[...] = lw
        b[...] = lb
    opt = AdamState.from_dict(d["optimizer"]) if d.get("optimizer") else None
    return model, opt


def save_checkpoint(path, model: MlpModel, optimizer: Optional[AdamState] = None) -> None:
    # json writes floats with repr(), the shortest string that round-trips exactly
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(model_to_dict(model, optimizer)), encoding="utf-8")


def load_checkpoint(path) -> tuple[MlpModel, Optional[AdamState]]:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
