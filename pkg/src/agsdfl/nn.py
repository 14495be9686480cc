"""Dense ReLU classifier with flat parameter vectors and analytic gradients.

Parameters for layer ``l`` are stored as ``W_l`` (fan_in x fan_out, row-major)
followed by ``b_l``. Everything outside this module treats a model as a
:class:`ParamVector` and never touches the per-layer arrays directly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .seeding import derive_seed, rng_for, shuffled_indices


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    layer_dims: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("layer_dims needs at least an input and an output size")
        if any(d <= 0 for d in dims):
            raise ValueError(f"layer_dims must be positive, got {dims}")
        if dims[-1] < 2:
            raise ValueError("a classifier needs at least 2 classes")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]))

    def slices(self) -> list[tuple[slice, tuple[int, int], slice]]:
        """(weight slice, weight shape, bias slice) per layer."""
        out = []
        pos = 0
        for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            w = slice(pos, pos + a * b)
            pos += a * b
            bias = slice(pos, pos + b)
            pos += b
            out.append((w, (a, b), bias))
        return out


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    layout: ModelSpec

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size != self.layout.n_params:
            raise ShapeError(
                f"parameter vector of length {v.size} does not match layout with {self.layout.n_params} parameters"
            )
        object.__setattr__(self, "values", v)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def __len__(self) -> int:
        return self.values.size


def unflatten(p: ParamVector) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(p.values[w].reshape(shape), p.values[b]) for w, shape, b in p.layout.slices()]


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]], spec: ModelSpec) -> ParamVector:
    return ParamVector(np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in layers]), spec)


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """He-normal weights, zero biases."""
    rng = rng_for(seed, "init")
    layers = []
    for a, b in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        layers.append((rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)), np.zeros(b)))
    return flatten(layers, spec)


def zeros(spec: ModelSpec) -> ParamVector:
    return ParamVector(np.zeros(spec.n_params), spec)


# ---------------------------------------------------------------------------
# forward / backward


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_inputs(p: ParamVector, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != p.layout.input_dim:
        raise ShapeError(f"expected input width {p.layout.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs contain non-finite values")
    return x


def _forward_cache(p: ParamVector, x: np.ndarray):
    layers = unflatten(p)
    acts = [x]
    pre = []
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    return layers, acts, pre


def logits(p: ParamVector, inputs: np.ndarray) -> np.ndarray:
    x = _check_inputs(p, inputs)
    return _forward_cache(p, x)[1][-1]


def forward(p: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Class probabilities, one row per input sample."""
    return softmax(logits(p, inputs))


def predict(p: ParamVector, inputs: np.ndarray) -> np.ndarray:
    return np.argmax(logits(p, inputs), axis=1)


def _backward(layers, acts, pre, dlogits, want_params=True, want_inputs=False):
    grads = []
    g = dlogits
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        if want_params:
            grads.append((acts[i].T @ g, g.sum(axis=0)))
        if i > 0 or want_inputs:
            g = g @ w.T
            if i > 0:
                g = g * (pre[i - 1] > 0)
    grads.reverse()
    return grads, g


# ---------------------------------------------------------------------------
# losses
#
# A loss maps (probs, targets) to (value, dL/dlogits). ``targets`` is an
# N x K matrix of target distributions (one-hot for hard labels).


def _cross_entropy(probs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    n = probs.shape[0]
    logp = np.log(np.clip(probs, 1e-300, None))
    value = -float(np.sum(targets * logp)) / n
    # (p - t) assumes rows of t sum to 1
    return value, (probs * targets.sum(axis=1, keepdims=True) - targets) / n


def _backdoor_deviation(probs: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean l2 distance of each prediction from the batch-mean prediction.

    Returns the value and its gradient with respect to ``probs``.
    """
    n = probs.shape[0]
    dev = probs - probs.mean(axis=0, keepdims=True)
    norms = np.linalg.norm(dev, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = np.where(norms[:, None] > 0, dev / safe[:, None], 0.0)
    value = float(norms.mean())
    dprobs = (unit - unit.mean(axis=0, keepdims=True)) / n
    return value, dprobs


def _softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    return probs * (dprobs - np.sum(dprobs * probs, axis=1, keepdims=True))


def _agsd_loss(probs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Negative cross-entropy plus the backdoor deviation term (to be minimized)."""
    ce, dce = _cross_entropy(probs, targets)
    dv, ddev = _backdoor_deviation(probs)
    return -ce + dv, -dce + _softmax_backward(probs, ddev)


LossFn = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]

# loss kind -> (function, FGSM direction). Cross-entropy is ascended by the
# attacker; the agsd objective is written as a quantity to minimize.
LOSSES: dict[str, tuple[LossFn, float]] = {
    "cross_entropy": (_cross_entropy, 1.0),
    "agsd": (_agsd_loss, -1.0),
}


def _loss_fn(loss_kind: str) -> tuple[LossFn, float]:
    try:
        return LOSSES[loss_kind]
    except KeyError:
        raise ValueError(f"unknown loss_kind {loss_kind!r}; expected one of {sorted(LOSSES)}") from None


def as_targets(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return labels.astype(np.float64)
    t = np.zeros((labels.size, num_classes))
    t[np.arange(labels.size), labels.astype(np.int64)] = 1.0
    return t


def loss_value(p: ParamVector, inputs, labels, loss_kind: str = "cross_entropy", weight_decay: float = 0.0) -> float:
    fn, _ = _loss_fn(loss_kind)
    x = _check_inputs(p, inputs)
    value, _ = fn(softmax(logits(p, x)), as_targets(labels, p.layout.num_classes))
    return value + 0.5 * weight_decay * float(p.values @ p.values)


def loss_and_grad(
    p: ParamVector, inputs, labels, loss_kind: str = "cross_entropy", weight_decay: float = 0.0
) -> tuple[float, ParamVector]:
    fn, _ = _loss_fn(loss_kind)
    x = _check_inputs(p, inputs)
    layers, acts, pre = _forward_cache(p, x)
    probs = softmax(acts[-1])
    value, dlogits = fn(probs, as_targets(labels, p.layout.num_classes))
    grads, _ = _backward(layers, acts, pre, dlogits)
    g = flatten(grads, p.layout).values
    if weight_decay:
        g = g + weight_decay * p.values
        value += 0.5 * weight_decay * float(p.values @ p.values)
    return value, p.with_values(g)


def grad_wrt_params(p: ParamVector, inputs, labels, loss_kind: str = "cross_entropy", weight_decay: float = 0.0) -> ParamVector:
    """Gradient of ``loss + weight_decay/2 * ||theta||^2`` with respect to the parameters."""
    return loss_and_grad(p, inputs, labels, loss_kind, weight_decay)[1]


def grad_wrt_inputs(p: ParamVector, inputs, labels, loss_kind: str = "cross_entropy") -> np.ndarray:
    fn, _ = _loss_fn(loss_kind)
    x = _check_inputs(p, inputs)
    layers, acts, pre = _forward_cache(p, x)
    probs = softmax(acts[-1])
    _, dlogits = fn(probs, as_targets(labels, p.layout.num_classes))
    _, gx = _backward(layers, acts, pre, dlogits, want_params=False, want_inputs=True)
    return gx


def fgsm_perturb(p: ParamVector, inputs, labels, epsilon: float, loss_kind: str = "cross_entropy") -> np.ndarray:
    """One signed-gradient step of size ``epsilon``, clipped to [0, 1].

    The step ascends cross-entropy and descends the agsd objective.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    x = _check_inputs(p, inputs)
    if epsilon == 0:
        return x.copy()
    _, direction = _loss_fn(loss_kind)
    g = grad_wrt_inputs(p, x, labels, loss_kind)
    return np.clip(x + direction * epsilon * np.sign(g), 0.0, 1.0)


# ---------------------------------------------------------------------------
# vector helpers


def l2_norm(p) -> float:
    return float(np.linalg.norm(_values(p)))


def cosine_sim(a, b) -> float:
    va, vb = _values(a), _values(b)
    if va.shape != vb.shape:
        raise ShapeError(f"length mismatch: {va.size} vs {vb.size}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def _values(p) -> np.ndarray:
    return p.values if isinstance(p, ParamVector) else np.asarray(p, dtype=np.float64)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    local_epochs: int = 2
    batch_size: int = 32

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be nonnegative")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")


class Sgd:
    """Heavy-ball SGD with coupled weight decay (the PyTorch update rule)."""

    def __init__(self, cfg: SgdConfig):
        self.cfg = cfg
        self.buf: np.ndarray | None = None

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        g = grad + self.cfg.weight_decay * theta
        if self.cfg.momentum:
            self.buf = g if self.buf is None else self.cfg.momentum * self.buf + g
            g = self.buf
        return theta - self.cfg.learning_rate * g


def minibatches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = shuffled_indices(n, derive_seed(seed, "batches", epoch))
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def sgd_step(opt: Sgd, theta: np.ndarray, spec: ModelSpec, x, targets, batch_index: int) -> np.ndarray:
    value, grad = loss_and_grad(ParamVector(theta, spec), x, targets)
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss at batch {batch_index}")
    return opt.step(theta, grad.values)


def train_local(p: ParamVector, data, cfg: SgdConfig, seed: int, targets: np.ndarray | None = None) -> ParamVector:
    """Mini-batch SGD on softmax cross-entropy.

    ``targets`` optionally replaces the hard labels of ``data`` with an
    N x K matrix of soft labels.
    """
    if len(data) == 0:
        raise TrainingError("cannot train on an empty dataset")
    if cfg.local_epochs == 0:
        return p.copy()
    t = as_targets(data.labels, p.layout.num_classes) if targets is None else np.asarray(targets, dtype=np.float64)
    opt = Sgd(cfg)
    theta = p.values.copy()
    batch_no = 0
    for epoch in range(cfg.local_epochs):
        for idx in minibatches(len(data), cfg.batch_size, seed, epoch):
            theta = sgd_step(opt, theta, p.layout, data.inputs[idx], t[idx], batch_no)
            batch_no += 1
    return p.with_values(theta)


def accuracy(p: ParamVector, inputs, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(predict(p, inputs) == labels))
