"""Symmetry generators of the loss, their exact group actions and residual checks.

Four families are supported:

* ``homogeneity``  scale row i of ``W(h)`` (and ``b(h)[i]``) by ``1+eps`` and
  column i of ``W(h+1)`` by ``(1+eps)^-p`` (p-homogeneous activation at layer h)
* ``swish``        same with ``p = 1`` and ``beta(h)[i]`` divided by ``1+eps``
* ``linear``       ``W(h) -> (I + eps A) W(h)``, ``W(h+1) -> W(h+1) (I + eps A)^-1``
* ``rotation``     ``W(1) -> W(1) Q`` with Q the Cayley element of a skew matrix P

Generators are stored as slot descriptions and applied directly to the layer
arrays; no m x m matrix is ever formed.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import Window
from .net import LossSpec, NetworkParams, grad, loss

FAMILIES = ("homogeneity", "swish", "linear", "rotation")


class GeneratorError(ValueError):
    """Generator does not fit the architecture."""


class TransformError(ValueError):
    """Finite transformation is not defined (e.g. singular I + eps A)."""


@dataclass(frozen=True, eq=False)
class Generator:
    family: str
    h: int = 1
    i: Optional[int] = None  # neuron index (0-based); None means every neuron of layer h
    p: float = 1.0
    with_bias: bool = False
    A: Optional[np.ndarray] = None
    P: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise GeneratorError(f"unknown generator family {self.family!r}")
        if self.family == "linear" and self.A is None:
            raise GeneratorError("linear generators need a matrix A")
        if self.family == "rotation":
            if self.P is None:
                raise GeneratorError("rotation generators need a skew matrix P")
            P = np.asarray(self.P, dtype=np.float64)
            if P.ndim != 2 or P.shape[0] != P.shape[1]:
                raise GeneratorError("P must be square")
            if np.max(np.abs(P + P.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(P))):
                raise GeneratorError("P must be skew-symmetric")

    @property
    def label(self) -> str:
        if self.family == "homogeneity":
            who = "*" if self.i is None else self.i
            return f"homogeneity(h={self.h},i={who},p={self.p:g}{',bias' if self.with_bias else ''})"
        if self.family == "swish":
            who = "*" if self.i is None else self.i
            return f"swish(h={self.h},i={who}{',bias' if self.with_bias else ''})"
        if self.family == "linear":
            return f"linear(h={self.h})"
        return f"rotation(d={np.asarray(self.P).shape[0]})"


def homogeneity(h: int, i: Optional[int] = None, p: float = 1.0, with_bias: bool = False) -> Generator:
    return Generator("homogeneity", h=h, i=i, p=float(p), with_bias=with_bias)


def swish_neuron(h: int, i: Optional[int] = None, with_bias: bool = False) -> Generator:
    return Generator("swish", h=h, i=i, with_bias=with_bias)


def linear_layer(h: int, A) -> Generator:
    return Generator("linear", h=h, A=np.asarray(A, dtype=np.float64))


def rotation(P) -> Generator:
    return Generator("rotation", P=np.asarray(P, dtype=np.float64))


def rotation_basis(d: int) -> list[np.ndarray]:
    """The skew matrices ``P_ij`` (i < j) with +1 at (i, j) and -1 at (j, i)."""
    out = []
    for i, j in itertools.combinations(range(d), 2):
        P = np.zeros((d, d))
        P[i, j], P[j, i] = 1.0, -1.0
        out.append(P)
    return out


def random_skew(d: int, rng: np.random.Generator) -> np.ndarray:
    M = rng.standard_normal((d, d))
    return M - M.T


def cayley(P, eps: float) -> np.ndarray:
    """``(I - eps/2 P)^-1 (I + eps/2 P)``, exactly orthogonal for skew P."""
    P = np.asarray(P, dtype=np.float64)
    eye = np.eye(P.shape[0])
    return np.linalg.solve(eye - 0.5 * eps * P, eye + 0.5 * eps * P)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def _neurons(g: Generator, d: int):
    if g.i is None:
        return slice(None)
    if not 0 <= g.i < d:
        raise GeneratorError(f"neuron index {g.i} outside layer of width {d}")
    return g.i


def _check(g: Generator, net: NetworkParams):
    if g.family == "rotation":
        d0 = net.dims[0]
        if np.asarray(g.P).shape != (d0, d0):
            raise GeneratorError(f"rotation generator must be {d0}x{d0} for this network")
        return
    if not 1 <= g.h <= net.K - 1:
        raise GeneratorError(f"layer {g.h} has no successor layer in a {net.K}-layer network")
    act = net.layer(g.h).activation
    has_bias = net.b(g.h) is not None
    if g.family == "homogeneity":
        if act.degree is None or abs(act.degree - g.p) > 1e-12:
            raise GeneratorError(f"layer {g.h} activation {act} is not {g.p:g}-homogeneous")
        if g.with_bias != has_bias:
            raise GeneratorError(f"with_bias={g.with_bias} but layer {g.h} bias presence is {has_bias}")
        _neurons(g, net.dims[g.h])
    elif g.family == "swish":
        if act.kind != "swish" or net.beta(g.h) is None:
            raise GeneratorError(f"layer {g.h} has no trainable Swish slopes")
        if g.with_bias != has_bias:
            raise GeneratorError(f"with_bias={g.with_bias} but layer {g.h} bias presence is {has_bias}")
        _neurons(g, net.dims[g.h])
    elif g.family == "linear":
        if not act.is_linear:
            raise GeneratorError(f"layer {g.h} activation {act} is not linear")
        d = net.dims[g.h]
        if np.asarray(g.A).shape != (d, d):
            raise GeneratorError(f"A must be {d}x{d} for layer {g.h}")


# ---------------------------------------------------------------------------
# action
# ---------------------------------------------------------------------------


def apply_generator(g: Generator, net: NetworkParams) -> np.ndarray:
    """The tangent vector ``xi(w)`` as a flat array (zero outside the touched slots)."""
    _check(g, net)
    out = np.zeros(net.size)
    if g.family == "rotation":
        out[net.slot(1, "W")] = (net.W(1) @ g.P).ravel()
        return out
    h = g.h
    W, Wn = net.W(h), net.W(h + 1)
    if g.family == "linear":
        out[net.slot(h, "W")] = (g.A @ W).ravel()
        if net.b(h) is not None:
            out[net.slot(h, "b")] = g.A @ net.b(h)
        out[net.slot(h + 1, "W")] = (-Wn @ g.A).ravel()
        return out
    idx = _neurons(g, W.shape[0])
    row = np.zeros_like(W)
    row[idx, :] = W[idx, :]
    col = np.zeros_like(Wn)
    p = g.p if g.family == "homogeneity" else 1.0
    col[:, idx] = -p * Wn[:, idx]
    out[net.slot(h, "W")] = row.ravel()
    out[net.slot(h + 1, "W")] = col.ravel()
    if g.with_bias:
        b = np.zeros(W.shape[0])
        b[idx] = net.b(h)[idx]
        out[net.slot(h, "b")] = b
    if g.family == "swish":
        beta = np.zeros(W.shape[0])
        beta[idx] = -net.beta(h)[idx]
        out[net.slot(h, "beta")] = beta
    return out


def transform_exact(g: Generator, net: NetworkParams, eps: float) -> NetworkParams:
    """Apply the finite group element with parameter ``eps`` (not its linearization)."""
    _check(g, net)
    out = net.copy()
    if g.family == "rotation":
        out.layer(1).W = net.W(1) @ cayley(g.P, eps)
        return out
    h = g.h
    if g.family == "linear":
        M = np.eye(net.dims[h]) + eps * g.A
        if np.linalg.cond(M) > 1e12:
            raise TransformError(f"I + eps*A is singular at eps={eps}")
        out.layer(h).W = M @ net.W(h)
        if net.b(h) is not None:
            out.layer(h).b = M @ net.b(h)
        # W(h+1) M^-1 computed as a solve against M^T
        out.layer(h + 1).W = np.linalg.solve(M.T, net.W(h + 1).T).T
        return out
    if not 1.0 + eps > 0:
        raise TransformError("scaling group element needs 1 + eps > 0")
    s = 1.0 + eps
    p = g.p if g.family == "homogeneity" else 1.0
    idx = _neurons(g, net.dims[h])
    out.layer(h).W[idx, :] *= s
    if g.with_bias:
        out.layer(h).b[idx] *= s
    out.layer(h + 1).W[:, idx] *= s ** (-p)
    if g.family == "swish":
        out.layer(h).beta[idx] /= s
    return out


def loss_invariance_defect(g: Generator, net: NetworkParams, ls: LossSpec, eps: float) -> float:
    """``|L(transformed) - L(w)|``."""
    return abs(loss(transform_exact(g, net, eps), ls) - loss(net, ls))


def rund_trautmann_residual(g: Generator, net: NetworkParams, ls: LossSpec) -> float:
    """``<grad L(w), xi(w)>``; zero whenever the generator leaves the loss invariant."""
    return float(grad(net, ls) @ apply_generator(g, net))


def rund_trautmann_certified(g: Generator, net: NetworkParams, ls: LossSpec, rtol: float = 1e-8) -> bool:
    gr = grad(net, ls)
    xi = apply_generator(g, net)
    return abs(gr @ xi) <= rtol * np.linalg.norm(gr) * np.linalg.norm(xi)


def conserved_expression(
    g: Generator, window: Window, template: NetworkParams, method: str = "fd"
) -> float:
    """``<k2 w'' + k1 w', xi(w)>`` at the centre of a three-sample window.

    Zero (up to discretization) along trajectories of any dynamics in the
    family when ``g`` is a symmetry of the loss.
    """
    if window.ws.shape[0] < 3:
        raise ValueError("window must hold at least three samples")
    E = window.lhs(method)
    return float(E @ apply_generator(g, template.unflatten(window.w)))


# ---------------------------------------------------------------------------
# catalogues
# ---------------------------------------------------------------------------


def builtin_generators(net: NetworkParams, rng: Optional[np.random.Generator] = None, per_neuron: bool = False,
                       n_linear: int = 1) -> list[Generator]:
    """Every activation/linear symmetry the architecture admits.

    Rotation generators are not included: whether they are symmetries depends on
    the loss, not on the architecture.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    gens = []
    for h in range(1, net.K):
        act = net.layer(h).activation
        bias = net.b(h) is not None
        neurons = range(net.dims[h]) if per_neuron else [None]
        if act.kind == "swish":
            gens += [swish_neuron(h, i, bias) for i in neurons]
        elif act.degree is not None:
            gens += [homogeneity(h, i, act.degree, bias) for i in neurons]
        if act.is_linear:
            d = net.dims[h]
            gens += [linear_layer(h, rng.standard_normal((d, d))) for _ in range(n_linear)]
    return gens


__all__ = [
    "FAMILIES",
    "Generator",
    "GeneratorError",
    "TransformError",
    "apply_generator",
    "builtin_generators",
    "cayley",
    "conserved_expression",
    "homogeneity",
    "linear_layer",
    "loss_invariance_defect",
    "random_skew",
    "rotation",
    "rotation_basis",
    "rund_trautmann_certified",
    "rund_trautmann_residual",
    "swish_neuron",
    "transform_exact",
]
