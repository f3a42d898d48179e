"""Discrete integrators for the family ``k2(t) w'' + k1(t) w' + grad L(w) = 0``.

Time bookkeeping: gradient flow advances ``t`` by ``eta`` per step, every
second-order method advances it by ``sqrt(eta)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .net import NetworkParams, LossSpec, Objective

KINDS = ("gf", "nd", "nagd", "general")


class SpecError(ValueError):
    """Invalid dynamics specification."""


class DivergedError(RuntimeError):
    """A step produced a non-finite gradient or iterate."""

    def __init__(self, message: str, last_state: "DynamicsState"):
        super().__init__(message)
        self.last_state = last_state


@dataclass(frozen=True)
class DynamicsSpec:
    kind: str
    eta: float
    steps: int = 0
    t_start: Optional[float] = None
    kappa1: Optional[Callable[[float], float]] = None
    kappa2: Optional[Callable[[float], float]] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown dynamics kind {self.kind!r}")
        if not self.eta > 0:
            raise SpecError("step size eta must be positive")
        if self.steps < 0:
            raise SpecError("steps must be non-negative")
        if self.kind == "general" and (self.kappa1 is None or self.kappa2 is None):
            raise SpecError("general dynamics need both kappa1 and kappa2")
        if self.kind == "nagd" and self.start_time <= 0:
            raise SpecError("Nesterov dynamics must start at a positive time delta")
        if self.start_time < 0:
            raise SpecError("t_start must be non-negative")

    @property
    def dt(self) -> float:
        """Continuous time elapsed per discrete step."""
        return self.eta if self.kind == "gf" else math.sqrt(self.eta)

    @property
    def second_order(self) -> bool:
        return self.kind != "gf"

    @property
    def start_time(self) -> float:
        if self.t_start is not None:
            return float(self.t_start)
        return 10.0 * math.sqrt(self.eta) if self.kind == "nagd" else 0.0

    def kappas(self, t: float) -> tuple[float, float]:
        """``(kappa1(t), kappa2(t))`` for this family."""
        if self.kind == "gf":
            return 1.0, 0.0
        if self.kind == "nd":
            return 0.0, 1.0
        if self.kind == "nagd":
            return 3.0 / t, 1.0
        k1, k2 = float(self.kappa1(t)), float(self.kappa2(t))
        if not k2 > 0:
            raise SpecError(f"kappa2 must be positive, got {k2} at t={t}")
        return k1, k2


def gf(eta: float, steps: int = 0) -> DynamicsSpec:
    return DynamicsSpec("gf", eta, steps)


def nd(eta: float, steps: int = 0) -> DynamicsSpec:
    return DynamicsSpec("nd", eta, steps)


def nagd(eta: float, steps: int = 0, delta: Optional[float] = None) -> DynamicsSpec:
    return DynamicsSpec("nagd", eta, steps, t_start=delta)


def general(kappa1, kappa2, eta: float, steps: int = 0, t_start: float = 0.0) -> DynamicsSpec:
    return DynamicsSpec("general", eta, steps, t_start=t_start, kappa1=kappa1, kappa2=kappa2)


def nagf_general(eta: float, steps: int = 0, delta: Optional[float] = None) -> DynamicsSpec:
    """The Nesterov ODE (``k1 = 3/t``, ``k2 = 1``) through the generic integrator."""
    delta = 10.0 * math.sqrt(eta) if delta is None else delta
    return general(lambda t: 3.0 / t, lambda t: 1.0, eta, steps, t_start=delta)


@dataclass
class DynamicsState:
    w: np.ndarray
    v: Optional[np.ndarray] = None
    t: float = 0.0
    k: int = 0

    def copy(self) -> "DynamicsState":
        return DynamicsState(self.w.copy(), None if self.v is None else self.v.copy(), self.t, self.k)


def initial_state(spec: DynamicsSpec, w0, v0=None, grad0=None) -> DynamicsState:
    """State at ``spec.start_time``; second-order methods default to rest.

    For ND and general dynamics the stored velocity lags the position by half
    a step.  When ``grad0`` is given, ``v0`` is read as the velocity *at* the
    start time and shifted back by half a kick, which turns the scheme into
    velocity Verlet with respect to ``v0``.  Nesterov keeps
    ``v = (w_k - w_{k-1}) / sqrt(eta)`` and takes ``v0`` literally.
    """
    w0 = np.array(w0, dtype=np.float64)
    t0 = spec.start_time
    if spec.kind == "gf":
        return DynamicsState(w0, None, t0, 0)
    v = np.zeros_like(w0) if v0 is None else np.array(v0, dtype=np.float64)
    if v.shape != w0.shape:
        raise SpecError("initial velocity must match the parameter shape")
    k0 = 0
    if spec.kind == "nagd":
        k0 = max(1, int(round(t0 / spec.dt)))
        t0 = k0 * spec.dt
    elif grad0 is not None:
        k1, k2 = spec.kappas(t0)
        v = v + 0.5 * spec.dt * ((k1 / k2) * v + np.asarray(grad0) / k2)
    return DynamicsState(w0, v, t0, k0)


def synchronized_velocity(spec: DynamicsSpec, state: DynamicsState, grad) -> Optional[np.ndarray]:
    """Velocity estimate at ``state.t`` (half a kick ahead of the stored one)."""
    if state.v is None:
        return None
    if spec.kind == "nagd":
        return state.v
    k1, k2 = spec.kappas(state.t)
    return state.v - 0.5 * spec.dt * ((k1 / k2) * state.v + np.asarray(grad) / k2)


def _check(vec, state, what):
    if not np.all(np.isfinite(vec)):
        raise DivergedError(f"non-finite {what} at step {state.k}", state)


def step_gf(state: DynamicsState, grad, eta: float) -> DynamicsState:
    _check(grad, state, "gradient")
    w = state.w - eta * grad
    _check(w, state, "iterate")
    return DynamicsState(w, None, state.t + eta, state.k + 1)


def step_nd(state: DynamicsState, grad, eta: float) -> DynamicsState:
    """Position-Verlet form of ``w_{k+2} = 2 w_{k+1} - w_k - eta grad L(w_{k+1})``."""
    _check(grad, state, "gradient")
    h = math.sqrt(eta)
    v = state.v - h * grad
    w = state.w + h * v
    _check(w, state, "iterate")
    return DynamicsState(w, v, state.t + h, state.k + 1)


def nesterov_coefficient(k: int) -> float:
    """Momentum coefficient ``(k-1)/(k+2)``; the first step (k=0) has none."""
    return (k - 1) / (k + 2) if k >= 1 else 0.0


def nesterov_lookahead(state: DynamicsState, eta: float) -> np.ndarray:
    h = math.sqrt(eta)
    return state.w + nesterov_coefficient(state.k) * h * state.v


def step_nagd(state: DynamicsState, grad_fn: Callable[[np.ndarray], np.ndarray], eta: float) -> DynamicsState:
    """One step of the discrete Nesterov recursion.

    The state carries ``w_k`` and ``v_k = (w_k - w_{k-1}) / sqrt(eta)``, so
    ``y_k = w_k + (k-1)/(k+2) (w_k - w_{k-1})`` and
    ``w_{k+1} = y_k - eta grad L(y_k)``.
    """
    h = math.sqrt(eta)
    y = nesterov_lookahead(state, eta)
    g = np.asarray(grad_fn(y), dtype=np.float64)
    _check(g, state, "gradient")
    w = y - eta * g
    _check(w, state, "iterate")
    return DynamicsState(w, (w - state.w) / h, (state.k + 1) * h, state.k + 1)


def step_general(state: DynamicsState, grad, kappa1: float, kappa2: float, eta: float) -> DynamicsState:
    """Semi-implicit Euler on ``w' = v, v' = -(k1/k2) v - grad/k2``."""
    if not kappa2 > 0:
        raise SpecError(f"kappa2 must be positive, got {kappa2} at t={state.t}")
    _check(grad, state, "gradient")
    h = math.sqrt(eta)
    v = state.v - h * ((kappa1 / kappa2) * state.v + grad / kappa2)
    w = state.w + h * v
    _check(w, state, "iterate")
    return DynamicsState(w, v, state.t + h, state.k + 1)


def advance(spec: DynamicsSpec, state: DynamicsState, grad_fn, grad=None) -> DynamicsState:
    """Take one step of ``spec``; ``grad`` may be supplied if already known at ``state.w``."""
    if spec.kind == "nagd":
        return step_nagd(state, grad_fn, spec.eta)
    g = grad_fn(state.w) if grad is None else grad
    if spec.kind == "gf":
        return step_gf(state, g, spec.eta)
    if spec.kind == "nd":
        return step_nd(state, g, spec.eta)
    k1, k2 = spec.kappas(state.t)
    return step_general(state, g, k1, k2, spec.eta)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    """Everything a pointwise monitor may look at."""

    state: DynamicsState
    params: NetworkParams
    velocity: Optional[NetworkParams]
    loss: float
    spec: DynamicsSpec
    initial_loss: float


@dataclass
class MonitorRecord:
    t: float
    k: int
    loss: float
    quantities: dict = field(default_factory=dict)


@dataclass
class Window:
    """Three consecutive samples, used for central-difference derivative estimates."""

    ws: np.ndarray  # (3, m)
    ts: np.ndarray  # (3,)
    spec: DynamicsSpec
    vs: Optional[np.ndarray] = None
    grad_center: Optional[np.ndarray] = None

    @property
    def t(self) -> float:
        return float(self.ts[1])

    @property
    def w(self) -> np.ndarray:
        return self.ws[1]

    def velocity(self) -> np.ndarray:
        return (self.ws[2] - self.ws[0]) / (self.ts[2] - self.ts[0])

    def acceleration(self) -> np.ndarray:
        t0, t1, t2 = self.ts
        right = (self.ws[2] - self.ws[1]) / (t2 - t1)
        left = (self.ws[1] - self.ws[0]) / (t1 - t0)
        return 2.0 * (right - left) / (t2 - t0)

    def lhs(self, method: str = "fd", kappa1: Optional[float] = None, kappa2: Optional[float] = None) -> np.ndarray:
        """Estimate of ``k2 w'' + k1 w'`` at the centre sample.

        ``method="fd"`` uses central differences of the positions; ``"ode"``
        substitutes the equation of motion, i.e. returns ``-grad L(w)``.
        """
        if method == "ode":
            if self.grad_center is None:
                raise ValueError("window carries no gradient for the ode estimate")
            return -self.grad_center
        if kappa1 is None or kappa2 is None:
            kappa1, kappa2 = self.spec.kappas(self.t)
        out = kappa1 * self.velocity()
        if kappa2:
            out = out + kappa2 * self.acceleration()
        return out


@dataclass
class Trajectory:
    spec: DynamicsSpec
    template: NetworkParams
    records: list = field(default_factory=list)
    ws: list = field(default_factory=list)
    vs: list = field(default_factory=list)
    truncated_at: Optional[int] = None
    message: str = ""

    def __len__(self):
        return len(self.records)

    @property
    def diverged(self) -> bool:
        return self.truncated_at is not None

    @property
    def times(self) -> np.ndarray:
        return np.array([r.t for r in self.records])

    @property
    def steps(self) -> np.ndarray:
        return np.array([r.k for r in self.records])

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def series(self, name: str) -> np.ndarray:
        return np.array([r.quantities[name] for r in self.records])

    def params(self, j: int) -> NetworkParams:
        return self.template.unflatten(self.ws[j])

    def velocity_params(self, j: int) -> Optional[NetworkParams]:
        if not self.vs or self.vs[j] is None:
            return None
        return self.template.unflatten(self.vs[j])

    def window(self, j: int, objective: Optional[Objective] = None) -> Window:
        if len(self.ws) < 3:
            raise ValueError("need at least three stored samples for a window")
        if not 1 <= j <= len(self.ws) - 2:
            raise ValueError(f"window centre {j} needs a neighbour on both sides")
        vs = None
        if self.vs and self.vs[j] is not None:
            vs = np.stack(self.vs[j - 1 : j + 2])
        g = objective.grad(self.ws[j]) if objective is not None else None
        return Window(
            np.stack(self.ws[j - 1 : j + 2]),
            np.array([r.t for r in self.records[j - 1 : j + 2]]),
            self.spec,
            vs,
            g,
        )

    def windows(self, objective: Optional[Objective] = None):
        for j in range(1, len(self.ws) - 1):
            yield self.window(j, objective)


def run(
    spec: DynamicsSpec,
    net: NetworkParams,
    ls: LossSpec,
    monitors: Sequence = (),
    sample_every: int = 1,
    v0=None,
    keep_snapshots: bool = True,
) -> Trajectory:
    """Integrate from ``net`` for ``spec.steps`` steps, sampling every ``sample_every``.

    The final step is always sampled.  Stored and monitored velocities are the
    synchronized estimates at the sample time.  A non-finite gradient or iterate
    ends the run early; the trajectory then carries ``truncated_at``.
    """
    if sample_every < 1:
        raise SpecError("sample_every must be >= 1")
    objective = Objective(net, ls)
    w0 = net.flatten()
    value, g = objective.value_and_grad(w0)
    state = initial_state(spec, w0, v0, grad0=g)
    traj = Trajectory(spec, net)
    loss0, t0 = value, state.t

    def record(state, value, g):
        if g is None:
            g = objective.grad(state.w)
        v = synchronized_velocity(spec, state, g)
        params = net.unflatten(state.w)
        vel = net.unflatten(v) if v is not None else None
        sample = Sample(state, params, vel, value, spec, loss0)
        quantities = {}
        for mon in monitors:
            quantities[mon.name] = mon(sample)
        traj.records.append(MonitorRecord(state.t, state.k, value, quantities))
        if keep_snapshots:
            traj.ws.append(state.w.copy())
            traj.vs.append(None if v is None else v.copy())

    record(state, value, g)
    for i in range(1, spec.steps + 1):
        sampled = i % sample_every == 0 or i == spec.steps
        try:
            if spec.kind == "nagd":
                state = advance(spec, state, objective.grad)
                g = None
                if sampled:
                    value = objective.value(state.w)
            else:
                state = advance(spec, state, objective.grad, grad=g)
                state.t = t0 + state.k * spec.dt  # no accumulated rounding in t
                value, g = objective.value_and_grad(state.w)
        except DivergedError as exc:
            traj.truncated_at = exc.last_state.k
            traj.message = str(exc)
            break
        if sampled and not (math.isfinite(value) and np.all(np.isfinite(state.w))):
            traj.truncated_at = state.k
            traj.message = f"non-finite loss at step {state.k}"
            break
        if sampled:
            record(state, value, g)
    return traj


__all__ = [
    "DivergedError",
    "DynamicsSpec",
    "DynamicsState",
    "MonitorRecord",
    "Sample",
    "SpecError",
    "Trajectory",
    "Window",
    "advance",
    "general",
    "gf",
    "initial_state",
    "nagd",
    "nagf_general",
    "nd",
    "nesterov_coefficient",
    "run",
    "step_general",
    "step_gf",
    "step_nagd",
    "step_nd",
    "synchronized_velocity",
]
