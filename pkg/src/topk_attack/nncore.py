"""
Dense feedforward classifiers in plain numpy.

Everything here works on 64-bit floats. ``forward`` accepts a single input
vector of shape ``(d,)`` or a batch of shape ``(n, d)`` and returns logits
of shape ``(K,)`` or ``(n, K)`` accordingly, together with the activations
needed by ``backprop_input``. Backpropagation starts from an arbitrary
logit gradient dL/dZ, so any loss defined in logit space can be pushed
back to the input.
"""

from __future__ import annotations

import base64
import copy
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "identity")
_version_counter = itertools.count(1)


class DimensionError(ValueError):
    """Raised when an array does not have the dimensions a model expects."""

    def __init__(self, what, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


class StaleTraceError(RuntimeError):
    """Raised when a trace is replayed against a model that changed since."""


class TrainingDiverged(RuntimeError):
    """Raised when training produces a non-finite loss or logit."""


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise DimensionError("weights ndim", 2, self.weights.ndim)
        if self.bias.shape != (self.weights.shape[0],):
            raise DimensionError("bias shape", (self.weights.shape[0],), self.bias.shape)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]


class Model:
    """
    An ordered stack of dense layers ending in an identity (logit) layer.

    ``version`` changes whenever parameters are modified through
    :meth:`touch`, which lets :func:`backprop_input` reject traces recorded
    before the modification.
    """

    def __init__(self, layers: Sequence[DenseLayer], seed=None):
        if not layers:
            raise ValueError("a model needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise DimensionError("layer chain", prev.out_dim, nxt.in_dim)
        if layers[-1].activation != "identity":
            raise ValueError("the final layer must use the identity activation (logits are pre-softmax)")
        self.layers = list(layers)
        self.seed = seed
        self.version = next(_version_counter)

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def num_classes(self):
        return self.layers[-1].out_dim

    @property
    def dims(self):
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    def touch(self):
        self.version = next(_version_counter)

    def copy(self):
        return Model([copy.deepcopy(layer) for layer in self.layers], seed=self.seed)

    def __eq__(self, other):
        if not isinstance(other, Model) or len(self.layers) != len(other.layers):
            return False
        return all(
            a.activation == b.activation
            and np.array_equal(a.weights, b.weights)
            and np.array_equal(a.bias, b.bias)
            for a, b in zip(self.layers, other.layers)
        )

    def __repr__(self):
        return f"Model(dims={self.dims}, seed={self.seed})"


@dataclass
class ForwardTrace:
    """Activations recorded by :func:`forward` for one call."""

    inputs: np.ndarray
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)
    model_id: int = 0
    model_version: int = 0

    def __len__(self):
        return len(self.pre)


@dataclass(frozen=True)
class InitScheme:
    kind: str = "kaiming-uniform"  # or "gaussian"
    mean: float = 0.0
    std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "kaiming-uniform"):
            raise ValueError(f"unknown init kind {self.kind!r}")
        if self.std <= 0:
            raise ValueError("std must be positive")


def init_model(dims: Sequence[int], scheme: InitScheme = InitScheme()) -> Model:
    """
    Build a ReLU network with layer widths ``dims`` (input first, classes last).

    ``gaussian`` draws every weight and bias from N(mean, std^2);
    ``kaiming-uniform`` draws weights from U(-sqrt(6/in), sqrt(6/in)) and
    zeroes the biases.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError(f"dims must list at least input and output sizes, got {dims}")
    if any(d < 1 for d in dims):
        raise ValueError(f"all dims must be positive, got {dims}")
    rng = np.random.default_rng(scheme.seed)
    layers = []
    for i, (n_in, n_out) in enumerate(zip(dims, dims[1:])):
        act = "identity" if i == len(dims) - 2 else "relu"
        if scheme.kind == "gaussian":
            w = rng.normal(scheme.mean, scheme.std, size=(n_out, n_in))
            b = rng.normal(scheme.mean, scheme.std, size=n_out)
        else:
            bound = np.sqrt(6.0 / n_in)
            w = rng.uniform(-bound, bound, size=(n_out, n_in))
            b = np.zeros(n_out)
        layers.append(DenseLayer(w, b, act))
    return Model(layers, seed=scheme.seed)


def _as_batch(x, input_dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != input_dim:
        raise DimensionError("input dim", input_dim, x.shape[-1] if x.ndim else x.shape)
    return xb, single


def forward(model: Model, x) -> tuple[np.ndarray, ForwardTrace]:
    """Return the logits for ``x`` and the trace needed for backprop."""
    xb, single = _as_batch(x, model.input_dim)
    trace = ForwardTrace(inputs=xb.copy(), model_id=id(model), model_version=model.version)
    h = xb
    for layer in model.layers:
        a = h @ layer.weights.T + layer.bias
        h = np.maximum(a, 0.0) if layer.activation == "relu" else a
        trace.pre.append(a)
        trace.post.append(h)
    z = h.copy()
    return (z[0] if single else z), trace


def logits(model: Model, x) -> np.ndarray:
    return forward(model, x)[0]


def softmax(z, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax along the last axis."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    s = np.asarray(z, dtype=np.float64) / temperature
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _check_trace(model, trace):
    if trace.model_id != id(model) or trace.model_version != model.version:
        raise StaleTraceError("trace was recorded on a different model or before the model was modified")


def _backward(model, trace, dz):
    """Return dL/dX and the per-layer (index, dL/d pre-activation) pairs, last layer first."""
    grads = []
    g = dz
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.activation == "relu":
            g = g * (trace.pre[i] > 0)
        grads.append((i, g))
        g = g @ layer.weights
    return g, grads


def backprop_input(model: Model, trace: ForwardTrace, dL_dZ) -> np.ndarray:
    """
    Chain a logit-space gradient back to the input.

    The ReLU derivative at exactly zero is taken as zero.
    """
    _check_trace(model, trace)
    dz = np.asarray(dL_dZ, dtype=np.float64)
    single = dz.ndim == 1
    dzb = dz[None, :] if single else dz
    if dzb.shape != trace.pre[-1].shape:
        raise DimensionError("logit gradient shape", trace.pre[-1].shape, dz.shape)
    dx, _ = _backward(model, trace, dzb)
    return dx[0] if single else dx


def _param_grads(model, trace, dzb):
    _, grads = _backward(model, trace, dzb)
    out = [None] * len(model.layers)
    for i, g in grads:
        h_in = trace.inputs if i == 0 else trace.post[i - 1]
        out[i] = (g.T @ h_in, g.sum(axis=0))
    return out


def ce_grad(z, labels):
    """Default training gradient, softmax(z) - onehot(labels)."""
    g = softmax(z)
    g[np.arange(len(labels)), labels] -= 1.0
    return g


@dataclass
class TrainingLog:
    loss: list = field(default_factory=list)  # mean CE over the epoch's batches
    accuracy: list = field(default_factory=list)  # training-set accuracy after each epoch
    holdout_accuracy: list = field(default_factory=list)
    holdout_sum_z: list = field(default_factory=list)  # mean of sum_i z_i over the holdout set
    holdout_abs_sum_z: list = field(default_factory=list)

    def thirds(self, values=None):
        """Mean of a per-epoch series over its first and final thirds."""
        v = np.asarray(self.holdout_sum_z if values is None else values)
        n = max(len(v) // 3, 1)
        return float(v[:n].mean()), float(v[-n:].mean())


def train(
    model: Model,
    dataset,
    epochs: int,
    lr: float,
    grad_fn: Callable = ce_grad,
    *,
    batch_size: int = 32,
    weight_decay: float = 0.0,
    holdout=None,
    holdout_frac: float = 0.2,
    seed: int = 0,
) -> tuple[Model, TrainingLog]:
    """
    Minibatch gradient descent on a copy of ``model``.

    ``grad_fn(z, labels)`` returns dL/dZ for a batch of logits; it defines
    the training loss. ``weight_decay`` adds an L2 penalty
    ``weight_decay/2 * ||theta||^2`` to every parameter. When ``holdout`` is
    not given, a fixed ``holdout_frac`` split of ``dataset`` is held out and
    training uses the rest. Returns the trained copy and a per-epoch log.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if holdout is None:
        from .data import split

        dataset, holdout = split(dataset, holdout_frac, seed=seed)
    if np.any(dataset.labels >= model.num_classes) or np.any(dataset.labels < 0):
        raise ValueError("dataset labels out of range for the model")

    model = model.copy()
    rng = np.random.default_rng(seed)
    x_all, y_all = dataset.inputs, dataset.labels
    n = len(y_all)
    log = TrainingLog()
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            z, trace = forward(model, x_all[idx])
            y = y_all[idx]
            p = softmax(z)
            batch_loss = -np.log(np.maximum(p[np.arange(len(y)), y], 1e-300)).mean()
            if not np.isfinite(batch_loss) or not np.all(np.isfinite(z)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            losses.append(batch_loss)
            dz = np.asarray(grad_fn(z, y), dtype=np.float64) / len(y)
            for layer, (gw, gb) in zip(model.layers, _param_grads(model, trace, dz)):
                layer.weights -= lr * (gw + weight_decay * layer.weights)
                layer.bias -= lr * (gb + weight_decay * layer.bias)
            model.touch()
        log.loss.append(float(np.mean(losses)) if losses else float("nan"))
        log.accuracy.append(accuracy(model, dataset))
        if holdout is not None and len(holdout.labels):
            zh = logits(model, holdout.inputs)
            log.holdout_accuracy.append(float((zh.argmax(axis=1) == holdout.labels).mean()))
            s = zh.sum(axis=1)
            log.holdout_sum_z.append(float(s.mean()))
            log.holdout_abs_sum_z.append(float(np.abs(zh).sum(axis=1).mean()))
        logger.debug("epoch %d loss %.4f acc %.3f", epoch, log.loss[-1], log.accuracy[-1])
    return model, log


def accuracy(model: Model, dataset) -> float:
    if len(dataset.labels) == 0:
        return float("nan")
    return float((logits(model, dataset.inputs).argmax(axis=1) == dataset.labels).mean())


# checkpoints

def _encode(a):
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(s, shape):
    return np.frombuffer(base64.b64decode(s), dtype="<f8").astype(np.float64).reshape(shape)


def model_to_dict(model: Model) -> dict:
    return {
        "format": "dense-model/1",
        "dims": model.dims,
        "activations": [layer.activation for layer in model.layers],
        "seed": model.seed,
        "weights": [_encode(layer.weights) for layer in model.layers],
        "biases": [_encode(layer.bias) for layer in model.layers],
    }


def model_from_dict(d: dict) -> Model:
    dims = d["dims"]
    layers = []
    for i, act in enumerate(d["activations"]):
        w = _decode(d["weights"][i], (dims[i + 1], dims[i]))
        b = _decode(d["biases"][i], (dims[i + 1],))
        layers.append(DenseLayer(w, b, act))
    return Model(layers, seed=d.get("seed"))


def save_model(model: Model, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(model_to_dict(model)))
    return path


def load_model(path) -> Model:
    return model_from_dict(json.loads(Path(path).read_text()))
