"""Conserved and semi-conserved quantities, as plain functions and as trajectory monitors.

A monitor is any callable ``monitor(sample) -> float | ndarray`` with a
``name`` attribute; :func:`noether.dynamics.run` evaluates each registered
monitor at every sampled step.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import Sample, Trajectory, Window
from .net import NetworkParams


class NotApplicableError(ValueError):
    """Quantity is undefined for this dynamics or architecture."""


class MonitorError(ValueError):
    """Monitor flags disagree with the architecture."""


def _sq(a) -> float:
    return float(np.sum(np.asarray(a) ** 2))


# ---------------------------------------------------------------------------
# homogeneity
# ---------------------------------------------------------------------------


def _gap_flags(net: NetworkParams, h: int, p, with_bias, with_swish):
    if not 1 <= h <= net.K - 1:
        raise MonitorError(f"norm gap needs layers {h} and {h + 1}; network has {net.K}")
    act = net.layer(h).activation
    has_b, has_beta = net.b(h) is not None, net.beta(h) is not None
    with_bias = has_b if with_bias is None else bool(with_bias)
    with_swish = has_beta if with_swish is None else bool(with_swish)
    if with_bias and not has_b:
        raise MonitorError(f"layer {h} has no bias")
    if with_swish and not has_beta:
        raise MonitorError(f"layer {h} has no trainable Swish slopes")
    if p is None:
        p = 1.0 if act.kind == "swish" else act.degree
        if p is None:
            raise MonitorError(f"layer {h} activation {act} has no homogeneity degree")
    return float(p), with_bias, with_swish


def norm_gap(net: NetworkParams, h: int, p: Optional[float] = None,
             with_bias: Optional[bool] = None, with_swish: Optional[bool] = None) -> float:
    """``||W(h)||^2 + ||b(h)||^2 - p ||W(h+1)||^2 - ||beta(h)||^2``.

    Flags default to what the architecture has; ``p`` defaults to the
    activation's degree (1 for Swish).
    """
    p, with_bias, with_swish = _gap_flags(net, h, p, with_bias, with_swish)
    out = _sq(net.W(h)) - p * _sq(net.W(h + 1))
    if with_bias:
        out += _sq(net.b(h))
    if with_swish:
        out -= _sq(net.beta(h))
    return out


def neuron_gaps(net: NetworkParams, h: int, p: Optional[float] = None,
                with_bias: Optional[bool] = None, with_swish: Optional[bool] = None) -> np.ndarray:
    """Per-neuron version of :func:`norm_gap`; sums to it exactly."""
    p, with_bias, with_swish = _gap_flags(net, h, p, with_bias, with_swish)
    out = np.sum(net.W(h) ** 2, axis=1) - p * np.sum(net.W(h + 1) ** 2, axis=0)
    if with_bias:
        out = out + net.b(h) ** 2
    if with_swish:
        out = out - net.beta(h) ** 2
    return out


# ---------------------------------------------------------------------------
# linear layers
# ---------------------------------------------------------------------------


def _check_pair(net: NetworkParams, h: int):
    if not 1 <= h <= net.K - 1:
        raise MonitorError(f"balance needs layers {h} and {h + 1}; network has {net.K}")


def balancedness_residual(net: NetworkParams, h: int) -> np.ndarray:
    """``W(h) W(h)^T - W(h+1)^T W(h+1)`` (plus ``b b^T`` when layer h has a bias)."""
    _check_pair(net, h)
    W, Wn = net.W(h), net.W(h + 1)
    out = W @ W.T - Wn.T @ Wn
    if net.b(h) is not None:
        out = out + np.outer(net.b(h), net.b(h))
    return out


def _lhs_params(window: Window, template: NetworkParams, kappa1, kappa2, method):
    if window.ws.shape[0] < 3:
        raise ValueError("window must hold at least three samples")
    E = template.unflatten(window.lhs(method, kappa1, kappa2))
    W = template.unflatten(window.w)
    return E, W


def dynamic_balance_residual(window: Window, template: NetworkParams, h: int,
                             kappa1: Optional[float] = None, kappa2: Optional[float] = None,
                             method: str = "fd") -> np.ndarray:
    """``X = W(h) E(h)^T - E(h+1)^T W(h+1)`` with ``E = k2 W'' + k1 W'``.

    ``tr(X A)`` equals the conserved expression of the linear-layer generator
    with matrix ``A``, so ``X = 0`` is equivalent to every such expression vanishing.
    """
    _check_pair(template, h)
    E, W = _lhs_params(window, template, kappa1, kappa2, method)
    X = W.W(h) @ E.W(h).T - E.W(h + 1).T @ W.W(h + 1)
    if W.b(h) is not None:
        X = X + np.outer(W.b(h), E.b(h))
    return X


def nd_balance_second_derivative(velocity: Optional[NetworkParams], h: int) -> np.ndarray:
    """``V(h) V(h)^T - V(h+1)^T V(h+1)`` with ``V`` the weight velocities.

    Under ND this is half the second time derivative of the balance matrix.
    """
    if velocity is None:
        raise NotApplicableError("velocity samples exist only for second-order dynamics")
    _check_pair(velocity, h)
    V, Vn = velocity.W(h), velocity.W(h + 1)
    return V @ V.T - Vn.T @ Vn


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------


def rotation_residual(window: Window, template: NetworkParams,
                      kappa1: Optional[float] = None, kappa2: Optional[float] = None,
                      method: str = "fd") -> np.ndarray:
    """``E(1)^T W(1) - W(1)^T E(1)``; antisymmetric by construction."""
    E, W = _lhs_params(window, template, kappa1, kappa2, method)
    M = E.W(1).T @ W.W(1)
    return M - M.T


def rotation_momentum(params: NetworkParams, velocity: Optional[NetworkParams]) -> np.ndarray:
    """``V(1)^T W(1) - W(1)^T V(1)``: conserved under ND with rotation-invariant loss."""
    if velocity is None:
        raise NotApplicableError("velocity samples exist only for second-order dynamics")
    M = velocity.W(1).T @ params.W(1)
    return M - M.T


def angular_momentum(w, v) -> np.ndarray:
    """``v x w`` for 3-vectors (position ``w``, velocity ``v``)."""
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if w.shape != (3,) or v.shape != (3,):
        raise ValueError("angular momentum is defined for 3-vectors only")
    return np.array([
        v[1] * w[2] - v[2] * w[1],
        v[2] * w[0] - v[0] * w[2],
        v[0] * w[1] - v[1] * w[0],
    ])


# ---------------------------------------------------------------------------
# energy
# ---------------------------------------------------------------------------


def energy(v, loss_value: float) -> float:
    return 0.5 * float(np.dot(v, v)) + float(loss_value)


def hamiltonian(state, objective) -> float:
    """``0.5 ||v||^2 + L(w)`` for a state with ``w`` and ``v``; ``objective`` has ``value(w)``."""
    if getattr(state, "v", None) is None:
        raise NotApplicableError("the Hamiltonian needs a velocity")
    return energy(state.v, objective.value(state.w))


# ---------------------------------------------------------------------------
# bound check
# ---------------------------------------------------------------------------


@dataclass
class BoundReport:
    ok: bool
    margin: float  # min over samples of (rhs - lhs); negative means violated
    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    layers: tuple
    first_violation: Optional[int] = None
    loss0: float = 0.0

    def summary(self) -> str:
        status = "holds" if self.ok else f"violated at sample {self.first_violation}"
        return f"norm-gap growth bound {status}; margin {self.margin:.3e}"


def half_gaps(net: NetworkParams, layers: Sequence[int]) -> np.ndarray:
    return np.array([0.5 * norm_gap(net, h, p=1.0) for h in layers])


def _unit_layers(net: NetworkParams) -> tuple:
    out = []
    for h in range(1, net.K):
        act = net.layer(h).activation
        if act.kind != "swish" and act.degree == 1.0:
            out.append(h)
    return tuple(out)


def norm_gap_growth_bound_check(traj: Trajectory, loss_star: float = 0.0,
                                layers: Optional[Sequence[int]] = None,
                                rest_tol: float = 0.0) -> BoundReport:
    """Check ``sum_h |gap_h(t)| - sum_h |gap_h(0)| <= 2 (L(w(0)) - L*) (t - t0)^2`` at every sample.

    ``gap_h = 0.5 (||W(h)||^2 - ||W(h+1)||^2)`` (bias terms included when
    present) over the 1-homogeneous layers.  Only meaningful for a
    second-order trajectory that starts at rest.
    """
    if not traj.spec.second_order or not traj.vs or traj.vs[0] is None:
        raise NotApplicableError("bound applies to second-order trajectories with stored velocities")
    if np.max(np.abs(traj.vs[0])) > rest_tol:
        raise NotApplicableError("bound applies to trajectories that start at rest")
    layers = _unit_layers(traj.template) if layers is None else tuple(layers)
    if not layers:
        raise NotApplicableError("no 1-homogeneous layer pairs in this network")
    t0 = traj.records[0].t
    loss0 = traj.records[0].loss
    base = np.sum(np.abs(half_gaps(traj.params(0), layers)))
    times = traj.times - t0
    lhs = np.array([np.sum(np.abs(half_gaps(traj.params(j), layers))) - base for j in range(len(traj.ws))])
    rhs = 2.0 * (loss0 - loss_star) * times**2
    slack = rhs - lhs
    bad = np.flatnonzero(slack < 0)
    return BoundReport(
        ok=bad.size == 0,
        margin=float(np.min(slack)),
        times=times,
        lhs=lhs,
        rhs=rhs,
        layers=layers,
        first_violation=int(bad[0]) if bad.size else None,
        loss0=loss0,
    )


# ---------------------------------------------------------------------------
# monitors
# ---------------------------------------------------------------------------


@dataclass
class Monitor:
    """Base class: subclasses set ``name`` and implement ``__call__``."""

    name: str = field(init=False, default="")


@dataclass
class NormGap(Monitor):
    h: int = 1
    p: Optional[float] = None
    with_bias: Optional[bool] = None
    with_swish: Optional[bool] = None

    def __post_init__(self):
        self.name = f"norm_gap_h{self.h}"

    def __call__(self, s: Sample) -> float:
        return norm_gap(s.params, self.h, self.p, self.with_bias, self.with_swish)


@dataclass
class NeuronGaps(NormGap):
    def __post_init__(self):
        self.name = f"neuron_gaps_h{self.h}"

    def __call__(self, s: Sample) -> np.ndarray:
        return neuron_gaps(s.params, self.h, self.p, self.with_bias, self.with_swish)


@dataclass
class LayerNorm(Monitor):
    """``||W(h)||_F^2``; differences of these give the p-homogeneity ratio."""

    h: int = 1

    def __post_init__(self):
        self.name = f"weight_sq_h{self.h}"

    def __call__(self, s: Sample) -> float:
        return _sq(s.params.W(self.h))


@dataclass
class Balance(Monitor):
    h: int = 1

    def __post_init__(self):
        self.name = f"balance_h{self.h}"

    def __call__(self, s: Sample) -> np.ndarray:
        return balancedness_residual(s.params, self.h)


@dataclass
class BalanceAccel(Monitor):
    h: int = 1

    def __post_init__(self):
        self.name = f"balance_accel_h{self.h}"

    def __call__(self, s: Sample) -> np.ndarray:
        return nd_balance_second_derivative(s.velocity, self.h)


@dataclass
class Hamiltonian(Monitor):
    def __post_init__(self):
        self.name = "hamiltonian"

    def __call__(self, s: Sample) -> float:
        if s.velocity is None:
            raise NotApplicableError("the Hamiltonian needs a velocity")
        return energy(s.velocity.flatten(), s.loss)


@dataclass
class Kinetic(Monitor):
    def __post_init__(self):
        self.name = "kinetic"

    def __call__(self, s: Sample) -> float:
        if s.velocity is None:
            raise NotApplicableError("kinetic energy needs a velocity")
        v = s.velocity.flatten()
        return 0.5 * float(v @ v)


@dataclass
class AngularMomentum(Monitor):
    """``v x w`` of the whole (3-dimensional) parameter vector; ``scaled`` multiplies by ``t^3``."""

    scaled: bool = False

    def __post_init__(self):
        self.name = "scaled_angular_momentum" if self.scaled else "angular_momentum"

    def __call__(self, s: Sample) -> np.ndarray:
        if s.velocity is None:
            raise NotApplicableError("angular momentum needs a velocity")
        out = angular_momentum(s.state.w, s.velocity.flatten())
        return out * s.state.t**3 if self.scaled else out


@dataclass
class RotationMomentum(Monitor):
    def __post_init__(self):
        self.name = "rotation_momentum"

    def __call__(self, s: Sample) -> np.ndarray:
        return rotation_momentum(s.params, s.velocity)


MONITOR_KINDS = {
    "norm_gap": NormGap,
    "neuron_gaps": NeuronGaps,
    "weight_sq": LayerNorm,
    "balance": Balance,
    "balance_accel": BalanceAccel,
    "hamiltonian": Hamiltonian,
    "kinetic": Kinetic,
    "angular_momentum": AngularMomentum,
    "rotation_momentum": RotationMomentum,
}


def make_monitor(kind: str, **kwargs) -> Monitor:
    try:
        cls = MONITOR_KINDS[kind]
    except KeyError:
        raise MonitorError(f"unknown monitor kind {kind!r}; known: {sorted(MONITOR_KINDS)}") from None
    return cls(**kwargs)


def check_monitors(monitors: Sequence[Monitor], sample: Sample) -> None:
    """Evaluate each monitor once so architecture mismatches surface before a long run."""
    for m in monitors:
        m(sample)


__all__ = [
    "AngularMomentum",
    "Balance",
    "BalanceAccel",
    "BoundReport",
    "Hamiltonian",
    "Kinetic",
    "LayerNorm",
    "MONITOR_KINDS",
    "Monitor",
    "MonitorError",
    "NeuronGaps",
    "NormGap",
    "NotApplicableError",
    "RotationMomentum",
    "angular_momentum",
    "balancedness_residual",
    "check_monitors",
    "dynamic_balance_residual",
    "energy",
    "half_gaps",
    "hamiltonian",
    "make_monitor",
    "nd_balance_second_derivative",
    "neuron_gaps",
    "norm_gap",
    "norm_gap_growth_bound_check",
    "rotation_momentum",
    "rotation_residual",
]
