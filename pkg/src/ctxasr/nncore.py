"""Minimal reverse-mode neural network core in double precision.

Only the fixed architectures used by the acoustic and language models are
supported: dense stacks and stacked LSTM cells. Every layer exposes a pure
forward function, a forward variant that keeps a cache, and a backward
function that consumes that cache.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = math.log(PROB_FLOOR)

# Incremented whenever a probability is clamped at PROB_FLOOR before a log.
floor_events: Counter = Counter()

ACTIVATIONS = ("relu", "tanh", "sigmoid", "linear", "softmax")

Params = Dict[str, np.ndarray]


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _activate(kind: str, pre):
    if kind == "relu":
        return np.maximum(pre, 0.0)
    if kind == "tanh":
        return np.tanh(pre)
    if kind == "sigmoid":
        return sigmoid(pre)
    if kind == "linear":
        return pre
    if kind == "softmax":
        return softmax(pre)
    raise ContractError(f"unknown activation {kind!r}")


def _activation_backward(kind: str, pre, out, grad_out):
    if kind == "relu":
        return grad_out * (pre > 0)
    if kind == "tanh":
        return grad_out * (1.0 - out * out)
    if kind == "sigmoid":
        return grad_out * out * (1.0 - out)
    if kind == "linear":
        return grad_out
    if kind == "softmax":
        # Jacobian-vector product of a row-wise softmax
        return out * (grad_out - np.sum(grad_out * out, axis=-1, keepdims=True))
    raise ContractError(f"unknown activation {kind!r}")


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


# --------------------------------------------------------------------------
# Dense layers
# --------------------------------------------------------------------------


@dataclass
class DenseLayer:
    """Affine map followed by an elementwise (or row-wise softmax) activation.

    ``weights`` has shape (out, in) and ``bias`` shape (out,).
    """

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "linear"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 2:
            raise ShapeError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} != weight rows {self.weights.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, rng, n_in: int, n_out: int, activation: str = "linear", zero: bool = False):
        if zero:
            w = np.zeros((n_out, n_in))
        else:
            w = glorot_uniform(rng, n_out, n_in)
        return cls(w, np.zeros(n_out), activation)

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]


class DenseCache(NamedTuple):
    input: np.ndarray
    pre: np.ndarray
    out: np.ndarray


def _check_input(layer: DenseLayer, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != layer.n_in:
        raise ShapeError(
            f"input shape {x.shape} incompatible with weights shape {layer.weights.shape}"
        )


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return dense_forward(layer, x[None, :])[0]
    _check_input(layer, x)
    return _activate(layer.activation, x @ layer.weights.T + layer.bias)


def dense_forward_train(layer: DenseLayer, x) -> Tuple[np.ndarray, DenseCache]:
    x = np.asarray(x, dtype=np.float64)
    _check_input(layer, x)
    pre = x @ layer.weights.T + layer.bias
    out = _activate(layer.activation, pre)
    return out, DenseCache(x, pre, out)


def dense_backward(layer: DenseLayer, cache: Optional[DenseCache], grad_out,
                   from_preactivation: bool = False):
    """Backpropagate ``grad_out`` through one dense layer.

    Returns ``(grad_input, grad_weights, grad_bias)``. With
    ``from_preactivation`` the incoming gradient is taken to be with respect
    to the affine output, which is how the fused softmax/cross-entropy
    gradient enters the output layer.
    """
    if cache is None:
        raise ContractError("dense_backward called without a forward cache")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if cache.input.ndim != 2 or cache.input.shape[1] != layer.n_in \
            or cache.pre.shape != (cache.input.shape[0], layer.n_out):
        raise ContractError(
            f"cache shapes {cache.input.shape}/{cache.pre.shape} do not match layer "
            f"{layer.weights.shape}"
        )
    if grad_out.shape != cache.pre.shape:
        raise ContractError(
            f"upstream gradient shape {grad_out.shape} != output shape {cache.pre.shape}"
        )
    if from_preactivation:
        dpre = grad_out
    else:
        dpre = _activation_backward(layer.activation, cache.pre, cache.out, grad_out)
    return dpre @ layer.weights, dpre.T @ cache.input, dpre.sum(axis=0)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def _check_probs(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeError(f"probabilities {probs.shape} vs labels {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= probs.shape[1]):
        raise ContractError(f"labels must lie in [0, {probs.shape[1]})")
    if not np.all(np.isfinite(probs)):
        raise NumericalError("non-finite probabilities (diverged forward pass)")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6, rtol=0):
        raise ContractError("probability rows must sum to 1 within 1e-6")
    return probs, labels


def cross_entropy(probs, labels) -> float:
    """Mean negative log-likelihood of ``labels`` under row distributions."""
    probs, labels = _check_probs(probs, labels)
    picked = probs[np.arange(len(labels)), labels]
    low = picked < PROB_FLOOR
    if low.any():
        floor_events["cross_entropy"] += int(low.sum())
        picked = np.maximum(picked, PROB_FLOOR)
    return float(-np.mean(np.log(picked)))


def cross_entropy_grad(probs, labels) -> np.ndarray:
    """Gradient of :func:`cross_entropy` with respect to the softmax input."""
    probs, labels = _check_probs(probs, labels)
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    return grad / len(labels)


# --------------------------------------------------------------------------
# LSTM
# --------------------------------------------------------------------------


@dataclass
class LstmCellParams:
    """Gate blocks are stacked in the order input, forget, cell, output."""

    wx: np.ndarray
    wh: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.wx = np.asarray(self.wx, dtype=np.float64)
        self.wh = np.asarray(self.wh, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        h = self.wh.shape[1]
        if self.wh.shape != (4 * h, h) or self.wx.shape[0] != 4 * h or self.b.shape != (4 * h,):
            raise ShapeError(
                f"inconsistent LSTM shapes wx={self.wx.shape} wh={self.wh.shape} b={self.b.shape}"
            )

    @property
    def hidden(self) -> int:
        return self.wh.shape[1]

    @property
    def n_in(self) -> int:
        return self.wx.shape[1]

    @classmethod
    def init(cls, rng, n_in: int, hidden: int, forget_bias: float = 1.0):
        wx = glorot_uniform(rng, 4 * hidden, n_in)
        wh = glorot_uniform(rng, 4 * hidden, hidden)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = forget_bias
        return cls(wx, wh, b)


class LstmCache(NamedTuple):
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray


def _lstm_gates(params: LstmCellParams, x, h_prev, c_prev):
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    hid = params.hidden
    if x.shape[-1] != params.n_in or h_prev.shape[-1] != hid or c_prev.shape != h_prev.shape:
        raise ShapeError(
            f"lstm_step got x={x.shape} h={h_prev.shape} c={c_prev.shape} for "
            f"wx={params.wx.shape} wh={params.wh.shape}"
        )
    a = x @ params.wx.T + h_prev @ params.wh.T + params.b
    i = sigmoid(a[..., :hid])
    f = sigmoid(a[..., hid:2 * hid])
    g = np.tanh(a[..., 2 * hid:3 * hid])
    o = sigmoid(a[..., 3 * hid:])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    return x, h_prev, c_prev, i, f, g, o, c, tanh_c


def lstm_step(params: LstmCellParams, x, h_prev, c_prev):
    """One LSTM step; works on a single vector or a batch of row vectors."""
    *_, o, c, tanh_c = _lstm_gates(params, x, h_prev, c_prev)
    return o * tanh_c, c


def lstm_step_train(params: LstmCellParams, x, h_prev, c_prev):
    x, h_prev, c_prev, i, f, g, o, c, tanh_c = _lstm_gates(params, x, h_prev, c_prev)
    return o * tanh_c, c, LstmCache(x, h_prev, c_prev, i, f, g, o, tanh_c)


def lstm_step_backward(params: LstmCellParams, cache: LstmCache, dh, dc):
    """Returns ``(dx, dh_prev, dc_prev, dwx, dwh, db)`` for one step."""
    dc_total = dc + dh * cache.o * (1.0 - cache.tanh_c ** 2)
    do = dh * cache.tanh_c
    di = dc_total * cache.g
    df = dc_total * cache.c_prev
    dg = dc_total * cache.i
    da = np.concatenate(
        [
            di * cache.i * (1.0 - cache.i),
            df * cache.f * (1.0 - cache.f),
            dg * (1.0 - cache.g ** 2),
            do * cache.o * (1.0 - cache.o),
        ],
        axis=-1,
    )
    da2 = np.atleast_2d(da)
    dwx = da2.T @ np.atleast_2d(cache.x)
    dwh = da2.T @ np.atleast_2d(cache.h_prev)
    db = da2.sum(axis=0)
    dx = da @ params.wx
    dh_prev = da @ params.wh
    return dx, dh_prev, dc_total * cache.f, dwx, dwh, db


# --------------------------------------------------------------------------
# Dense stacks
# --------------------------------------------------------------------------


class Mlp:
    """A stack of :class:`DenseLayer` objects with named parameters."""

    def __init__(self, layers: List[DenseLayer]):
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise ShapeError(f"layer chain broken: {a.weights.shape} -> {b.weights.shape}")
        self.layers = layers

    @classmethod
    def build(cls, rng, sizes, hidden_activation, output_activation, zero_output=False):
        layers = []
        for k, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
            last = k == len(sizes) - 2
            layers.append(DenseLayer.init(
                rng, n_in, n_out,
                output_activation if last else hidden_activation,
                zero=zero_output and last,
            ))
        return cls(layers)

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.layers[-1].n_out

    def params(self) -> Params:
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"l{k}.W"] = layer.weights
            out[f"l{k}.b"] = layer.bias
        return out

    def forward(self, x):
        for layer in self.layers:
            x = dense_forward(layer, x)
        return x

    def forward_train(self, x):
        caches = []
        for layer in self.layers:
            x, cache = dense_forward_train(layer, x)
            caches.append(cache)
        return x, caches

    def backward(self, caches, grad, from_logits=False):
        """Returns ``(grad_input, grads)`` with grads keyed like :meth:`params`."""
        grads = {}
        for k in range(len(self.layers) - 1, -1, -1):
            last = k == len(self.layers) - 1
            grad, dw, db = dense_backward(
                self.layers[k], caches[k], grad, from_preactivation=from_logits and last
            )
            grads[f"l{k}.W"] = dw
            grads[f"l{k}.b"] = db
        return grad, grads


def dropout(x, rate: float, rng: np.random.Generator):
    """Inverted dropout; returns ``(output, mask)`` where mask already holds the scale."""
    if rate <= 0.0:
        return x, None
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


# --------------------------------------------------------------------------
# Gradient utilities and optimizers
# --------------------------------------------------------------------------


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_gradients(grads: Mapping[str, np.ndarray], threshold: float) -> Params:
    """Rescale all tensors jointly so that their global L2 norm is at most ``threshold``."""
    if not threshold > 0:
        raise ContractError(f"clipping threshold must be positive, got {threshold}")
    norm = global_norm(grads)
    if norm <= threshold:
        return {k: v for k, v in grads.items()}
    scale = threshold / norm
    return {k: v * scale for k, v in grads.items()}


@dataclass
class Optimizer:
    """Plain SGD or Adagrad over a dict of named parameter arrays.

    Parameters are updated in place so that model objects holding the same
    arrays see the new values.
    """

    kind: str = "adagrad"
    lr: float = 0.01
    eps: float = 1e-8
    accum: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adagrad"):
            raise ContractError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> float:
        """Apply one update and return the global norm of the applied update."""
        for name in sorted(grads):
            if name not in params:
                raise ContractError(f"gradient for unknown parameter {name!r}")
            if grads[name].shape != params[name].shape:
                raise ShapeError(
                    f"{name}: gradient shape {grads[name].shape} != parameter shape "
                    f"{params[name].shape}"
                )
            if not np.all(np.isfinite(grads[name])):
                raise NumericalError(f"non-finite gradient in tensor {name!r}; step rejected")
        sq = 0.0
        for name in sorted(grads):
            g = grads[name]
            if self.kind == "sgd":
                update = self.lr * g
            else:
                acc = self.accum.get(name)
                if acc is None:
                    acc = self.accum[name] = np.zeros_like(g)
                acc += g * g
                update = self.lr * g / (np.sqrt(acc) + self.eps)
            params[name] -= update
            sq += float(np.sum(update * update))
        return math.sqrt(sq)


# --------------------------------------------------------------------------
# Finite-difference checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: Optional[str]
    worst_index: Optional[tuple]
    passed: bool
    checked: int


def grad_check(closure: Callable[[], Tuple[float, Mapping[str, np.ndarray]]],
               params: Mapping[str, np.ndarray],
               tolerance: float = 1e-4,
               h: float = 1e-5,
               abs_floor: float = 1e-6,
               names=None) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``closure`` evaluates the loss at the current contents of ``params``
    (which are perturbed in place) and returns ``(loss, grads)``. The error
    for one entry is ``|a - n| / max(|a|, |n|, abs_floor)``; the floor keeps
    entries whose true gradient is zero from dividing rounding noise by ~0.
    """
    loss0, grads = closure()
    loss1, _ = closure()
    if loss0 != loss1:
        raise ContractError(
            f"closure is not deterministic: two evaluations gave {loss0!r} and {loss1!r}"
        )
    worst, worst_name, worst_idx, count = 0.0, None, None, 0
    for name in sorted(names if names is not None else params):
        p = params[name]
        analytic = np.asarray(grads[name], dtype=np.float64)
        if analytic.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {analytic.shape} != {p.shape}")
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up, _ = closure()
            p[idx] = orig - h
            down, _ = closure()
            p[idx] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            count += 1
            if err > worst or worst_name is None:
                worst, worst_name, worst_idx = err, name, idx
    return GradCheckReport(worst, worst_name, worst_idx, worst < tolerance, count)
