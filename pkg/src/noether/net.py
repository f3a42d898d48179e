"""Dense feed-forward networks: evaluation, losses and exact reverse-mode gradients.

Layers are indexed from 1 to K in the public API (``W(1)`` connects the input
to the first hidden layer), matching the usual ``W^(h)`` notation.  All numerics
are float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit, log_softmax, softmax


class InputError(ValueError):
    """Inconsistent shapes or empty inputs."""


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

ACTIVATION_KINDS = ("linear", "relu", "leaky_relu", "polynomial", "repu", "swish")


@dataclass(frozen=True)
class Activation:
    kind: str
    c: float = 1.0
    alpha: float = 0.0
    p: float = 1.0

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise InputError(f"unknown activation kind {self.kind!r}")
        if self.kind == "leaky_relu" and not self.alpha < 1:
            raise InputError("LeakyReLU requires alpha < 1")
        if self.kind == "polynomial" and (int(self.p) != self.p or self.p < 1):
            raise InputError("Polynomial requires an integer exponent p >= 1")
        if self.kind == "repu" and not self.p > 0:
            raise InputError("RePU requires p > 0")

    @property
    def degree(self) -> Optional[float]:
        """Homogeneity degree, or None for Swish (which is not homogeneous)."""
        if self.kind in ("linear", "relu", "leaky_relu"):
            return 1.0
        if self.kind in ("polynomial", "repu"):
            return float(self.p)
        return None

    @property
    def is_linear(self) -> bool:
        return self.kind == "linear"

    def __str__(self):
        if self.kind == "linear":
            return f"linear:{self.c:g}"
        if self.kind == "leaky_relu":
            return f"leaky_relu:{self.alpha:g}"
        if self.kind in ("polynomial", "repu"):
            return f"{self.kind}:{self.p:g}"
        return self.kind


def Linear(c: float = 1.0) -> Activation:
    return Activation("linear", c=float(c))


def ReLU() -> Activation:
    return Activation("relu")


def LeakyReLU(alpha: float) -> Activation:
    return Activation("leaky_relu", alpha=float(alpha))


def Polynomial(p: int) -> Activation:
    return Activation("polynomial", p=p)


def RePU(p: float) -> Activation:
    return Activation("repu", p=float(p))


def Swish() -> Activation:
    return Activation("swish")


def parse_activation(text: str) -> Activation:
    """Parse ``"relu"``, ``"leaky_relu:0.1"``, ``"repu:2"``, ``"linear"`` ..."""
    name, _, arg = text.strip().lower().partition(":")
    aliases = {"identity": "linear", "leakyrelu": "leaky_relu", "poly": "polynomial"}
    name = aliases.get(name, name)
    if name == "linear":
        return Linear(float(arg) if arg else 1.0)
    if name == "relu":
        return ReLU()
    if name == "leaky_relu":
        return LeakyReLU(float(arg) if arg else 0.01)
    if name == "polynomial":
        p = float(arg)
        if p != int(p):
            raise InputError("Polynomial requires an integer exponent; use repu for real p")
        return Polynomial(int(p))
    if name == "repu":
        return RePU(float(arg))
    if name == "swish":
        return Swish()
    raise InputError(f"unknown activation {text!r}")


def _check_beta(a: Activation, beta):
    if (a.kind == "swish") != (beta is not None):
        raise InputError("beta must be supplied exactly when the activation is Swish")


def activation_eval(a: Activation, x, beta=None):
    """Elementwise sigma(x).  ``beta`` broadcasts against ``x`` (Swish only)."""
    _check_beta(a, beta)
    x = np.asarray(x, dtype=np.float64)
    k = a.kind
    if k == "linear":
        return a.c * x
    if k == "relu":
        return np.maximum(x, 0.0)
    if k == "leaky_relu":
        return np.where(x > 0, x, a.alpha * x)
    if k == "polynomial":
        return x ** int(a.p)
    if k == "repu":
        return np.where(x > 0, np.maximum(x, 0.0) ** a.p, 0.0)
    return x * expit(beta * x)


def activation_grad(a: Activation, x, beta=None):
    """Return ``(dsigma/dx, dsigma/dbeta)``; the second entry is None unless Swish.

    The derivative of ReLU/RePU at exactly 0 is taken to be 0.
    """
    _check_beta(a, beta)
    x = np.asarray(x, dtype=np.float64)
    k = a.kind
    if k == "linear":
        return np.full_like(x, a.c), None
    if k == "relu":
        return (x > 0).astype(np.float64), None
    if k == "leaky_relu":
        return np.where(x > 0, 1.0, a.alpha), None
    if k == "polynomial":
        p = int(a.p)
        return p * x ** (p - 1), None
    if k == "repu":
        pos = np.maximum(x, 0.0)
        return np.where(x > 0, a.p * pos ** (a.p - 1), 0.0), None
    s = expit(beta * x)
    ds = s * (1.0 - s)
    return s + beta * x * ds, x * x * ds


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class Layer:
    W: np.ndarray
    activation: Activation
    b: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 2:
            raise InputError("weight matrices must be 2-D")
        d_out = self.W.shape[0]
        if self.b is not None:
            self.b = np.asarray(self.b, dtype=np.float64).reshape(d_out)
        if self.activation.kind == "swish":
            if self.beta is None:
                self.beta = np.ones(d_out)
            self.beta = np.asarray(self.beta, dtype=np.float64).reshape(d_out)
        elif self.beta is not None:
            raise InputError("beta is only allowed on Swish layers")

    def copy(self) -> "Layer":
        return Layer(
            self.W.copy(),
            self.activation,
            None if self.b is None else self.b.copy(),
            None if self.beta is None else self.beta.copy(),
        )


@dataclass
class NetworkParams:
    """Weights ``W(h)``, optional biases ``b(h)`` and Swish slopes ``beta(h)``.

    The flat view concatenates, layer by layer, the row-major ``W``, then ``b``
    (if present), then ``beta`` (if present).
    """

    layers: list[Layer]
    _offsets: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise InputError("a network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.W.shape[1] != prev.W.shape[0]:
                raise InputError(
                    f"layer shapes {prev.W.shape} and {nxt.W.shape} do not chain"
                )
        offsets = {}
        pos = 0
        for h, layer in enumerate(self.layers, start=1):
            for name, arr in (("W", layer.W), ("b", layer.b), ("beta", layer.beta)):
                if arr is not None:
                    offsets[(h, name)] = (pos, arr.shape)
                    pos += arr.size
        self._offsets = offsets
        self._size = pos

    # -- structure ---------------------------------------------------------
    @property
    def K(self) -> int:
        return len(self.layers)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.layers[0].W.shape[1],) + tuple(l.W.shape[0] for l in self.layers)

    @property
    def activations(self) -> tuple[Activation, ...]:
        return tuple(l.activation for l in self.layers)

    @property
    def size(self) -> int:
        return self._size

    def layer(self, h: int) -> Layer:
        if not 1 <= h <= self.K:
            raise InputError(f"layer index {h} outside 1..{self.K}")
        return self.layers[h - 1]

    def W(self, h: int) -> np.ndarray:
        return self.layer(h).W

    def b(self, h: int) -> Optional[np.ndarray]:
        return self.layer(h).b

    def beta(self, h: int) -> Optional[np.ndarray]:
        return self.layer(h).beta

    def slot(self, h: int, name: str) -> slice:
        """Slice of the flat vector holding ``name`` ('W', 'b', 'beta') of layer h."""
        try:
            start, shape = self._offsets[(h, name)]
        except KeyError:
            raise InputError(f"layer {h} has no {name!r} parameters") from None
        return slice(start, start + int(np.prod(shape)))

    def has(self, h: int, name: str) -> bool:
        return (h, name) in self._offsets

    # -- flat view ---------------------------------------------------------
    def flatten(self) -> np.ndarray:
        parts = []
        for layer in self.layers:
            parts.append(layer.W.ravel())
            if layer.b is not None:
                parts.append(layer.b)
            if layer.beta is not None:
                parts.append(layer.beta)
        return np.concatenate(parts)

    def unflatten(self, vec) -> "NetworkParams":
        """A new network with this architecture and parameters taken from ``vec``."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise InputError(f"flat vector has shape {vec.shape}, expected ({self.size},)")
        layers = []
        for h, layer in enumerate(self.layers, start=1):
            W = vec[self.slot(h, "W")].reshape(layer.W.shape).copy()
            b = vec[self.slot(h, "b")].copy() if layer.b is not None else None
            beta = vec[self.slot(h, "beta")].copy() if layer.beta is not None else None
            layers.append(Layer(W, layer.activation, b, beta))
        return NetworkParams(layers)

    def copy(self) -> "NetworkParams":
        return NetworkParams([l.copy() for l in self.layers])


def make_network(weights: Sequence, activations: Sequence[Activation], biases=None, betas=None):
    """Convenience constructor from parallel lists."""
    K = len(weights)
    biases = biases if biases is not None else [None] * K
    betas = betas if betas is not None else [None] * K
    return NetworkParams(
        [Layer(np.asarray(W, float), a, b, be) for W, a, b, be in zip(weights, activations, biases, betas)]
    )


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    inputs: np.ndarray  # (n, d_0)
    pre: list  # z^(h), (n, d_h)
    post: list  # a^(h), (n, d_h)


def _forward_batch(net: NetworkParams, X: np.ndarray) -> ForwardCache:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.dims[0]:
        raise InputError(f"inputs of shape {X.shape} do not match input dim {net.dims[0]}")
    a = X
    pre, post = [], []
    for layer in net.layers:
        z = a @ layer.W.T
        if layer.b is not None:
            z = z + layer.b
        a = activation_eval(layer.activation, z, layer.beta)
        pre.append(z)
        post.append(a)
    return ForwardCache(X, pre, post)


def forward(net: NetworkParams, x):
    """Evaluate ``f_w(x)`` for one input vector; returns ``(prediction, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError("forward expects a single input vector; use predict for batches")
    cache = _forward_batch(net, x[None, :])
    return cache.post[-1][0], cache


def predict(net: NetworkParams, X) -> np.ndarray:
    """Batched predictions, shape (n, d_K)."""
    return _forward_batch(net, X).post[-1]


def _backward(net: NetworkParams, cache: ForwardCache, dout: np.ndarray) -> np.ndarray:
    """Reverse pass given dL/d(output) of shape (n, d_K); returns the flat gradient."""
    grad = np.zeros(net.size)
    delta_a = dout
    for h in range(net.K, 0, -1):
        layer = net.layers[h - 1]
        z = cache.pre[h - 1]
        a_in = cache.inputs if h == 1 else cache.post[h - 2]
        dsdx, dsdb = activation_grad(layer.activation, z, layer.beta)
        delta_z = delta_a * dsdx
        grad[net.slot(h, "W")] = (delta_z.T @ a_in).ravel()
        if layer.b is not None:
            grad[net.slot(h, "b")] = delta_z.sum(axis=0)
        if layer.beta is not None:
            grad[net.slot(h, "beta")] = (delta_a * dsdb).sum(axis=0)
        if h > 1:
            delta_a = delta_z @ layer.W
    return grad


def per_sample_gradients(net: NetworkParams, X, dout=None) -> np.ndarray:
    """Per-sample gradients of ``<dout_i, f_w(x_i)>``, shape (n, m).

    With the default ``dout`` of ones and a scalar-output network this is the
    Jacobian of the predictions, i.e. the tangent features of every input.
    """
    cache = _forward_batch(net, X)
    n = cache.inputs.shape[0]
    if dout is None:
        dout = np.ones((n, net.dims[-1]))
    out = np.zeros((n, net.size))
    delta_a = np.asarray(dout, dtype=np.float64)
    for h in range(net.K, 0, -1):
        layer = net.layers[h - 1]
        z = cache.pre[h - 1]
        a_in = cache.inputs if h == 1 else cache.post[h - 2]
        dsdx, dsdb = activation_grad(layer.activation, z, layer.beta)
        delta_z = delta_a * dsdx
        out[:, net.slot(h, "W")] = np.einsum("ni,nj->nij", delta_z, a_in).reshape(n, -1)
        if layer.b is not None:
            out[:, net.slot(h, "b")] = delta_z
        if layer.beta is not None:
            out[:, net.slot(h, "beta")] = delta_a * dsdb
        if h > 1:
            delta_a = delta_z @ layer.W
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LossSpec:
    """Either a dataset loss (``quadratic`` / ``nll``) or a closed-form potential.

    * quadratic: ``0.5 * sum_i ||y_i - f(x_i)||^2`` with ``targets`` of shape (n, d_K)
    * nll: mean over samples of ``-log softmax(f(x_i))[y_i]`` with integer ``targets``
    * potential: ``V(flatten(w))`` with an explicit gradient callable
    """

    kind: str
    inputs: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None
    value_fn: Optional[Callable[[np.ndarray], float]] = None
    grad_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = ""

    @staticmethod
    def quadratic(inputs, targets) -> "LossSpec":
        X = np.asarray(inputs, dtype=np.float64)
        Y = np.asarray(targets, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise InputError("quadratic loss needs a non-empty (n, d) input matrix")
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.shape[0] != X.shape[0]:
            raise InputError("inputs and targets disagree on the number of samples")
        return LossSpec("quadratic", X, Y, name="quadratic")

    @staticmethod
    def nll(inputs, labels) -> "LossSpec":
        X = np.asarray(inputs, dtype=np.float64)
        y = np.asarray(labels)
        if X.ndim != 2 or X.shape[0] == 0:
            raise InputError("NLL loss needs a non-empty (n, d) input matrix")
        if y.shape != (X.shape[0],) or not np.issubdtype(y.dtype, np.integer):
            raise InputError("NLL targets must be n integer class indices")
        return LossSpec("nll", X, y.astype(np.int64), name="nll")

    @staticmethod
    def potential(value_fn, grad_fn, name="potential") -> "LossSpec":
        return LossSpec("potential", value_fn=value_fn, grad_fn=grad_fn, name=name)

    @property
    def n(self) -> int:
        return 0 if self.inputs is None else self.inputs.shape[0]


def radial_potential() -> LossSpec:
    """``(||w||^2 - 1)^2`` on the flat parameter vector."""

    def value(w):
        return float((w @ w - 1.0) ** 2)

    def grad(w):
        return 4.0 * (w @ w - 1.0) * w

    return LossSpec.potential(value, grad, name="radial")


def quadratic_potential(scale: float = 1.0) -> LossSpec:
    """``0.5 * scale * ||w||^2``."""
    return LossSpec.potential(
        lambda w: float(0.5 * scale * (w @ w)), lambda w: scale * np.asarray(w, float), name="harmonic"
    )


def zero_potential() -> LossSpec:
    return LossSpec.potential(lambda w: 0.0, lambda w: np.zeros_like(w, dtype=float), name="zero")


def _check_dataset(net: NetworkParams, ls: LossSpec):
    if ls.n == 0:
        raise InputError("empty dataset")
    if ls.inputs.shape[1] != net.dims[0]:
        raise InputError("dataset input dimension does not match the network")
    if ls.kind == "quadratic" and ls.targets.shape[1] != net.dims[-1]:
        raise InputError("target dimension does not match the network output")
    if ls.kind == "nll" and (ls.targets.min() < 0 or ls.targets.max() >= net.dims[-1]):
        raise InputError("class index outside the output dimension")


def loss(net: NetworkParams, ls: LossSpec) -> float:
    if ls.kind == "potential":
        return float(ls.value_fn(net.flatten()))
    _check_dataset(net, ls)
    out = predict(net, ls.inputs)
    if ls.kind == "quadratic":
        r = out - ls.targets
        return float(0.5 * np.sum(r * r))
    logp = log_softmax(out, axis=1)
    return float(-np.mean(logp[np.arange(ls.n), ls.targets]))


def _output_gradient(out: np.ndarray, ls: LossSpec) -> np.ndarray:
    if ls.kind == "quadratic":
        return out - ls.targets
    p = softmax(out, axis=1)
    p[np.arange(ls.n), ls.targets] -= 1.0
    return p / ls.n


def grad(net: NetworkParams, ls: LossSpec) -> np.ndarray:
    """Flat gradient of the loss, including Swish slopes when they are trainable."""
    if ls.kind == "potential":
        return np.asarray(ls.grad_fn(net.flatten()), dtype=np.float64)
    _check_dataset(net, ls)
    cache = _forward_batch(net, ls.inputs)
    return _backward(net, cache, _output_gradient(cache.post[-1], ls))


def loss_and_grad(net: NetworkParams, ls: LossSpec) -> tuple[float, np.ndarray]:
    if ls.kind == "potential":
        w = net.flatten()
        return float(ls.value_fn(w)), np.asarray(ls.grad_fn(w), dtype=np.float64)
    _check_dataset(net, ls)
    cache = _forward_batch(net, ls.inputs)
    out = cache.post[-1]
    if ls.kind == "quadratic":
        r = out - ls.targets
        value = 0.5 * float(np.sum(r * r))
    else:
        value = float(-np.mean(log_softmax(out, axis=1)[np.arange(ls.n), ls.targets]))
    return value, _backward(net, cache, _output_gradient(out, ls))


class Objective:
    """Loss and gradient as functions of the flat parameter vector."""

    def __init__(self, template: NetworkParams, ls: LossSpec):
        self.template = template
        self.ls = ls

    def params(self, w) -> NetworkParams:
        return self.template.unflatten(w)

    def value(self, w) -> float:
        if self.ls.kind == "potential":
            return float(self.ls.value_fn(np.asarray(w, float)))
        return loss(self.params(w), self.ls)

    def grad(self, w) -> np.ndarray:
        if self.ls.kind == "potential":
            return np.asarray(self.ls.grad_fn(np.asarray(w, float)), dtype=np.float64)
        return grad(self.params(w), self.ls)

    def value_and_grad(self, w):
        if self.ls.kind == "potential":
            w = np.asarray(w, float)
            return float(self.ls.value_fn(w)), np.asarray(self.ls.grad_fn(w), dtype=np.float64)
        return loss_and_grad(self.params(w), self.ls)


def directional_second_difference(net: NetworkParams, target, direction, eps: float):
    """``[g(w + eps d) - 2 g(w) + g(w - eps d)] / eps^2``.

    ``target`` is either an input vector (``g`` is the network output, so the
    result is a vector) or a :class:`LossSpec` (``g`` is the loss).
    """
    d = np.asarray(direction, dtype=np.float64)
    if not np.linalg.norm(d) > 0 or not eps > 0:
        raise InputError("direction must be nonzero and eps positive")
    w = net.flatten()

    if isinstance(target, LossSpec):
        def g(v):
            return np.asarray(loss(net.unflatten(v), target))
    else:
        x = np.asarray(target, dtype=np.float64)

        def g(v):
            return forward(net.unflatten(v), x)[0]

    return (g(w + eps * d) - 2.0 * g(w) + g(w - eps * d)) / eps**2


__all__ = [
    "Activation",
    "ForwardCache",
    "InputError",
    "Layer",
    "LeakyReLU",
    "Linear",
    "LossSpec",
    "NetworkParams",
    "Objective",
    "Polynomial",
    "ReLU",
    "RePU",
    "Swish",
    "activation_eval",
    "activation_grad",
    "directional_second_difference",
    "forward",
    "grad",
    "loss",
    "loss_and_grad",
    "make_network",
    "parse_activation",
    "per_sample_gradients",
    "predict",
    "quadratic_potential",
    "radial_potential",
    "zero_potential",
]
