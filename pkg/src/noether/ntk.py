"""Tangent kernels, kernel-regression dynamics and the width-sweep measurements.

Everything here assumes a scalar-output network and the quadratic loss
``0.5 * sum_i (f(x_i) - y_i)^2``, for which the predictions ``u`` of the
linearized network follow ``u'' = -H (u - y)`` (second order) or
``u' = -H (u - y)`` (gradient flow).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .conservation import NotApplicableError
from .dynamics import DynamicsSpec, Trajectory, run
from .net import (
    LossSpec,
    NetworkParams,
    directional_second_difference,
    per_sample_gradients,
    predict,
)

MAX_GRAM = 512


def _scalar(net: NetworkParams):
    if net.dims[-1] != 1:
        raise NotApplicableError(f"kernel suite needs a scalar output, network has {net.dims[-1]}")


def tangent_features(net: NetworkParams, x) -> np.ndarray:
    """``d f_w(x) / d w`` as a flat vector."""
    _scalar(net)
    x = np.asarray(x, dtype=np.float64)
    return per_sample_gradients(net, x[None, :])[0]


def feature_matrix(net: NetworkParams, X) -> np.ndarray:
    """Rows are the tangent features of the rows of ``X``."""
    _scalar(net)
    return per_sample_gradients(net, np.asarray(X, dtype=np.float64))


def gram(net: NetworkParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] > MAX_GRAM:
        raise ValueError(f"dense Gram matrix limited to n <= {MAX_GRAM}")
    F = feature_matrix(net, X)
    H = F @ F.T
    return 0.5 * (H + H.T)


# ---------------------------------------------------------------------------
# kernel dynamics
# ---------------------------------------------------------------------------


@dataclass
class KernelTrajectory:
    kind: str
    eta: float
    times: np.ndarray
    steps: np.ndarray
    us: np.ndarray  # (samples, n)
    vs: Optional[np.ndarray] = None


def kernel_dynamics_run(H, y, u0, kind: str, eta: float, steps: int, sample_every: int = 1,
                        v0=None) -> KernelTrajectory:
    """Integrate the linear prediction dynamics with the same scheme as the network run.

    ``gf``: explicit Euler.  ``nd``: velocity Verlet (stored velocity kept half
    a step behind, exactly as :func:`noether.dynamics.run` does it).
    """
    H = np.asarray(H, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    u = np.array(u0, dtype=np.float64).ravel()
    n = y.shape[0]
    if H.shape != (n, n) or u.shape != (n,):
        raise ValueError("H, y and u0 must have consistent sizes")
    if kind not in ("gf", "nd"):
        raise ValueError(f"kernel dynamics support 'gf' and 'nd', not {kind!r}")
    if sample_every < 1:
        raise ValueError("sample_every must be >= 1")
    dt = eta if kind == "gf" else math.sqrt(eta)
    times, ks, us, vs = [0.0], [0], [u.copy()], []
    if kind == "nd":
        v_sync = np.zeros(n) if v0 is None else np.array(v0, dtype=np.float64).ravel()
        g = H @ (u - y)
        v = v_sync + 0.5 * dt * g
        vs.append(v_sync.copy())
    for k in range(1, steps + 1):
        if kind == "gf":
            u = u - eta * (H @ (u - y))
        else:
            v = v - dt * g
            u = u + dt * v
            g = H @ (u - y)
        if k % sample_every == 0 or k == steps:
            times.append(k * dt)
            ks.append(k)
            us.append(u.copy())
            if kind == "nd":
                vs.append(v - 0.5 * dt * g)
    return KernelTrajectory(kind, eta, np.array(times), np.array(ks), np.array(us),
                            np.array(vs) if vs else None)


# ---------------------------------------------------------------------------
# trajectory statistics
# ---------------------------------------------------------------------------


@dataclass
class VelocityStats:
    sup_norm: float
    sup_max: float
    sup_avg: float
    loss0: float
    m: int

    @property
    def norm_bound(self) -> float:
        return math.sqrt(2.0 * self.loss0)

    @property
    def avg_bound(self) -> float:
        return math.sqrt(2.0 * self.loss0 / self.m)


def velocity_stats(traj: Trajectory) -> VelocityStats:
    """Sup over samples of ``||v||``, ``max_i |v_i|`` and ``mean_i |v_i|``."""
    if not traj.spec.second_order or not traj.vs or traj.vs[0] is None:
        raise NotApplicableError("velocity statistics need a second-order trajectory")
    V = np.abs(np.stack(traj.vs))
    return VelocityStats(
        sup_norm=float(np.max(np.linalg.norm(V, axis=1))),
        sup_max=float(np.max(V)),
        sup_avg=float(np.max(np.mean(V, axis=1))),
        loss0=float(traj.records[0].loss),
        m=V.shape[1],
    )


def weight_movement(traj: Trajectory) -> float:
    if not traj.ws:
        raise ValueError("trajectory holds no snapshots")
    return float(np.max(np.abs(traj.ws[-1] - traj.ws[0]), initial=0.0))


def network_predictions(traj: Trajectory, X) -> np.ndarray:
    """Predictions on ``X`` at every stored sample, shape (samples, n)."""
    _scalar(traj.template)
    return np.array([predict(traj.params(j), X)[:, 0] for j in range(len(traj.ws))])


def network_vs_kernel_divergence(net_us, net_times, kernel: KernelTrajectory, rtol: float = 1e-9) -> float:
    """``sup_t max_i |u_net(t) - u_kernel(t)|`` over a shared sampling schedule."""
    net_us = np.asarray(net_us, dtype=np.float64)
    net_times = np.asarray(net_times, dtype=np.float64)
    if net_us.shape != kernel.us.shape:
        raise ValueError(f"schedules differ: {net_us.shape} vs {kernel.us.shape}")
    t0 = net_times[0]
    if not np.allclose(net_times - t0, kernel.times, rtol=rtol, atol=rtol):
        raise ValueError("network and kernel trajectories are sampled at different times")
    return float(np.max(np.abs(net_us - kernel.us)))


def second_order_audit(traj: Trajectory, X, eps: float = 1e-4) -> float:
    """Largest ``|d^2 f / dw^2 [v, v]| / ||v||^2`` along the trajectory, over inputs ``X``.

    For piecewise-linear networks this is zero between kink crossings.
    """
    worst = 0.0
    for j in range(len(traj.ws)):
        v = traj.vs[j] if traj.vs else None
        if v is None or not np.any(v):
            continue
        net = traj.params(j)
        u = v / np.linalg.norm(v)
        for x in np.asarray(X):
            worst = max(worst, float(np.max(np.abs(directional_second_difference(net, x, u, eps)))))
    return worst


# ---------------------------------------------------------------------------
# width sweep
# ---------------------------------------------------------------------------


@dataclass
class WidthResult:
    width: int
    m: int
    loss0: float
    stats: Optional[VelocityStats]
    movement: float
    divergence: float
    diverged: bool = False
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        s = self.stats
        return {
            "width": self.width,
            "m": self.m,
            "loss0": self.loss0,
            "sup_v_sq": None if s is None else s.sup_norm**2,
            "two_loss0": 2.0 * self.loss0,
            "sup_avg_abs_v": None if s is None else s.sup_avg,
            "avg_bound": None if s is None else s.avg_bound,
            "max_weight_movement": self.movement,
            "kernel_divergence": self.divergence,
            "diverged": self.diverged,
        }


def width_point(net: NetworkParams, X, y, spec: DynamicsSpec, sample_every: int = 1) -> WidthResult:
    """Train ``net`` on ``(X, y)`` from rest and compare with its tangent-kernel dynamics."""
    _scalar(net)
    ls = LossSpec.quadratic(X, np.asarray(y).reshape(-1, 1))
    traj = run(spec, net, ls, sample_every=sample_every)
    u_net = network_predictions(traj, X)
    kind = "gf" if spec.kind == "gf" else "nd"
    if spec.kind not in ("gf", "nd"):
        raise NotApplicableError("width sweep supports gf and nd dynamics")
    H = gram(net, X)
    ker = kernel_dynamics_run(H, np.asarray(y).ravel(), u_net[0], kind, spec.eta, spec.steps, sample_every)
    stats = velocity_stats(traj) if spec.second_order else None
    if traj.diverged:
        div = float("inf")
    else:
        div = network_vs_kernel_divergence(u_net, traj.times, ker)
    return WidthResult(
        width=net.dims[1],
        m=net.size,
        loss0=float(traj.records[0].loss),
        stats=stats,
        movement=weight_movement(traj),
        divergence=div,
        diverged=traj.diverged,
        extra={"lambda_max": float(np.linalg.eigvalsh(H)[-1])},
    )


__all__ = [
    "KernelTrajectory",
    "MAX_GRAM",
    "VelocityStats",
    "WidthResult",
    "feature_matrix",
    "gram",
    "kernel_dynamics_run",
    "network_predictions",
    "network_vs_kernel_divergence",
    "second_order_audit",
    "tangent_features",
    "velocity_stats",
    "weight_movement",
    "width_point",
]
