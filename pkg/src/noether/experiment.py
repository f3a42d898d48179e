"""Builds networks, losses and dynamics from a :class:`Config` and runs the three workflows."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import conservation as cons
from . import symmetry as sym
from .config import CheckConfig, Config, GeneratorConfig, NtkConfig, as_array
from .data import Dataset, idx_dataset, init, synth_classification, synth_regression, synth_rotational
from .dynamics import DynamicsSpec, Trajectory, nagd, nd, gf, run
from .errors import ConfigError
from .net import (
    Layer,
    Linear,
    LossSpec,
    NetworkParams,
    ReLU,
    grad,
    loss,
    parse_activation,
    quadratic_potential,
    radial_potential,
    zero_potential,
)
from .ntk import WidthResult, width_point

# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def build_network(cfg: Config, seed: Optional[int] = None) -> NetworkParams:
    cfg.require("network")
    nc = cfg.network
    seed = cfg.seed if seed is None else seed
    acts = [parse_activation(a) for a in nc.activations]
    if nc.init == "explicit":
        K = len(acts)
        bias = nc.bias if isinstance(nc.bias, list) else [nc.bias] * K
        layers = []
        for h in range(K):
            d = nc.dims[h + 1]
            layers.append(Layer(
                np.asarray(nc.weights[h], dtype=np.float64),
                acts[h],
                np.zeros(d) if bias[h] else None,
                np.ones(d) if acts[h].kind == "swish" else None,
            ))
        return NetworkParams(layers)
    scheme = "balanced" if nc.init == "balanced" else nc.init
    return init(scheme, nc.dims, acts, seed, bias=nc.bias, p=nc.init_p, ntk_output=nc.ntk_output)


def build_dataset(cfg: Config) -> Optional[Dataset]:
    cfg.require("data", "network")
    dc, dims = cfg.data, cfg.network.dims
    if dc.kind == "potential":
        return None
    if dc.kind == "classification":
        if dims[-1] < 2:
            raise ConfigError("classification needs at least two outputs", "network.dims")
        return synth_classification(dc.n, dims[0], dims[-1], dc.seed)
    if dc.kind == "idx":
        ds = idx_dataset(dc.images, dc.labels, dc.limit)
        if ds.d != dims[0]:
            raise ConfigError(f"images have {ds.d} pixels, network input is {dims[0]}", "network.dims")
        return ds
    if dc.kind == "rotational":
        if dims[-1] != 1:
            raise ConfigError("rotational data has scalar targets", "network.dims")
        ds = synth_rotational(dc.n, dims[0], dc.seed)
    else:
        ds = synth_regression(dc.n, dims[0], dc.seed, d_out=dims[-1])
    if dc.target == "zero":
        ds = Dataset(ds.inputs, np.zeros_like(ds.targets), dict(ds.meta, target="zero"))
    return ds


def build_loss(cfg: Config, ds: Optional[Dataset]) -> LossSpec:
    dc = cfg.data
    if dc.kind == "potential":
        return {"radial": radial_potential, "harmonic": quadratic_potential, "zero": zero_potential}[dc.potential]()
    if dc.loss_kind == "nll":
        return LossSpec.nll(ds.inputs, ds.targets)
    return LossSpec.quadratic(ds.inputs, ds.targets)


def build_dynamics(cfg: Config) -> DynamicsSpec:
    cfg.require("dynamics")
    dy = cfg.dynamics
    if dy.kind == "gf":
        return gf(dy.eta, dy.steps)
    if dy.kind == "nd":
        return DynamicsSpec("nd", dy.eta, dy.steps, t_start=dy.t_start)
    return nagd(dy.eta, dy.steps, dy.t_start)


def build_monitors(cfg: Config) -> list:
    mons = [cons.make_monitor(m.kind, **m.kwargs()) for m in cfg.monitors]
    names = [m.name for m in mons]
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise ConfigError(f"duplicate monitors {sorted(dup)}", "monitors")
    return mons


def _probe_monitors(mons, net, ls, spec, v0, path="monitors"):
    """Evaluate monitors once at the initial point so architecture mismatches become config errors."""
    for j, m in enumerate(mons):
        try:
            run(DynamicsSpec(spec.kind, spec.eta, 0, spec.t_start), net, ls, [m], v0=v0, keep_snapshots=False)
        except (cons.MonitorError, cons.NotApplicableError, ValueError) as exc:
            raise ConfigError(str(exc), f"{path}[{j}]") from None


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    trajectory: Trajectory
    monitors: list
    net: NetworkParams
    ls: LossSpec


def run_experiment(cfg: Config, seed: Optional[int] = None) -> RunResult:
    cfg.require("network", "data", "dynamics")
    net = build_network(cfg, seed)
    ds = build_dataset(cfg)
    ls = build_loss(cfg, ds)
    spec = build_dynamics(cfg)
    mons = build_monitors(cfg)
    v0 = as_array(cfg.dynamics.v0)
    _probe_monitors(mons, net, ls, spec, v0)
    traj = run(spec, net, ls, mons, sample_every=cfg.dynamics.sample_every, v0=v0,
               keep_snapshots=False)
    return RunResult(traj, mons, net, ls)


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------

INVARIANCE_RTOL = 1e-10
RT_RTOL = 1e-8
TRACE_RTOL = 1e-12
FP_FLOOR = 1e-12


@dataclass
class GeneratorReport:
    label: str
    family: str
    invariance_defect: float
    invariance_pass: bool
    rt_residual: float
    rt_pass: bool
    drift: float
    drift_ratio: float
    drift_pass: bool
    expect_invariant: bool = True
    trace_error: Optional[float] = None
    note: str = ""

    @property
    def invariant(self) -> bool:
        ok = self.invariance_pass and self.rt_pass and self.drift_pass
        if self.trace_error is not None:
            ok = ok and self.trace_error <= TRACE_RTOL
        return ok

    @property
    def passed(self) -> bool:
        """PASS when the outcome matches what the config expects (negative controls expect failure)."""
        return self.invariant if self.expect_invariant else not (self.invariance_pass or self.rt_pass)

    @property
    def status(self) -> str:
        if self.expect_invariant:
            return "PASS" if self.passed else "FAIL"
        return "FAIL (expected)" if self.passed else "UNEXPECTED PASS"

    def as_dict(self) -> dict:
        return {
            "generator": self.label,
            "family": self.family,
            "invariance_defect": self.invariance_defect,
            "invariance_pass": self.invariance_pass,
            "rt_residual": self.rt_residual,
            "rt_pass": self.rt_pass,
            "drift": self.drift,
            "drift_ratio": self.drift_ratio,
            "drift_pass": self.drift_pass,
            "trace_error": self.trace_error,
            "expect_invariant": self.expect_invariant,
            "status": self.status,
            "note": self.note,
        }


@dataclass
class CheckResult:
    reports: list
    trajectory: Trajectory
    loss0: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(r.passed for r in self.reports)


def _op_norm(g: sym.Generator) -> float:
    if g.family == "linear":
        return float(np.linalg.norm(g.A, 2))
    if g.family == "rotation":
        return float(np.linalg.norm(g.P, 2))
    return max(1.0, g.p)


def expand_generators(gc: GeneratorConfig, net: NetworkParams, rng: np.random.Generator, path: str) -> list:
    def layers(pred):
        if gc.h is not None:
            return [gc.h]
        out = [h for h in range(1, net.K) if pred(net.layer(h).activation)]
        if not out:
            raise ConfigError(f"no layer of this network admits {gc.family} generators", path)
        return out

    try:
        if gc.family == "auto":
            gens = sym.builtin_generators(net, rng, n_linear=gc.count)
            if not gens:
                raise ConfigError("architecture admits no built-in generators", path)
            return gens
        if gc.family == "homogeneity":
            out = []
            for h in layers(lambda a: a.degree is not None):
                p = gc.p if gc.p is not None else net.layer(h).activation.degree
                wb = gc.with_bias if gc.with_bias is not None else net.b(h) is not None
                out.append(sym.homogeneity(h, gc.i, p, wb))
            return out
        if gc.family == "swish":
            out = []
            for h in layers(lambda a: a.kind == "swish"):
                wb = gc.with_bias if gc.with_bias is not None else net.b(h) is not None
                out.append(sym.swish_neuron(h, gc.i, wb))
            return out
        if gc.family == "linear":
            out = []
            for h in layers(lambda a: a.is_linear):
                d = net.dims[h]
                out += [sym.linear_layer(h, rng.standard_normal((d, d))) for _ in range(gc.count)]
            return out
        d0 = net.dims[0]
        if gc.basis:
            return [sym.rotation(P) for P in sym.rotation_basis(d0)]
        return [sym.rotation(sym.random_skew(d0, rng)) for _ in range(gc.count)]
    except sym.GeneratorError as exc:
        raise ConfigError(str(exc), path) from None


def _window_indices(n: int, count: int) -> np.ndarray:
    if n < 3:
        return np.array([], dtype=int)
    return np.unique(np.linspace(1, n - 2, num=min(count, n - 2)).round().astype(int))


def check_generator(g: sym.Generator, net: NetworkParams, ls: LossSpec, traj: Trajectory, windows: list,
                    cc: CheckConfig, expect: bool) -> GeneratorReport:
    L0 = loss(net, ls)
    defects = []
    for eps in cc.eps:
        try:
            defects.append(sym.loss_invariance_defect(g, net, ls, eps))
        except sym.TransformError:
            continue
    defect = max(defects) / (1.0 + abs(L0)) if defects else float("nan")
    inv_ok = bool(defects) and defect <= INVARIANCE_RTOL

    gvec = grad(net, ls)
    xi = sym.apply_generator(g, net)
    denom = float(np.linalg.norm(gvec) * np.linalg.norm(xi))
    rt = abs(float(gvec @ xi)) / denom if denom > 0 else 0.0
    rt_ok = rt <= RT_RTOL

    # conserved expression along the trajectory; per-window tolerance
    # factor * stride * ||xi||_op * ||E||^2 bounds the O(stride) discretization error
    drift, ratio = 0.0, 0.0
    trace_err = 0.0 if g.family == "linear" else None
    op = _op_norm(g)
    for win in windows:
        val = sym.conserved_expression(g, win, traj.template)
        E = win.lhs()
        xi_w = sym.apply_generator(g, traj.template.unflatten(win.w))
        e = float(np.linalg.norm(E))
        stride = 0.5 * float(win.ts[2] - win.ts[0])
        tol = cc.tolerance_factor * stride * op * e**2 + FP_FLOOR * e * float(np.linalg.norm(xi_w))
        drift = max(drift, abs(val))
        if abs(val) > 0:
            ratio = max(ratio, abs(val) / tol if tol > 0 else float("inf"))
        if g.family == "linear":
            X = cons.dynamic_balance_residual(win, traj.template, g.h)
            tr = float(np.trace(X @ g.A))
            trace_err = max(trace_err, abs(tr - val) / max(1.0, abs(val), abs(tr)))
    drift_ok = ratio <= 1.0

    note = ""
    if g.family == "rotation" and not (inv_ok and rt_ok):
        note = "loss is not rotation invariant: a property of the training data, not an implementation defect"
    return GeneratorReport(g.label, g.family, defect, inv_ok, rt, rt_ok, drift, ratio, drift_ok,
                           expect, trace_err, note)


def check_experiment(cfg: Config, seed: Optional[int] = None) -> CheckResult:
    cfg.require("network", "data", "dynamics", "check")
    net = build_network(cfg, seed)
    ds = build_dataset(cfg)
    ls = build_loss(cfg, ds)
    spec = build_dynamics(cfg)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    gens = []
    for j, gc in enumerate(cfg.check.generators):
        for g in expand_generators(gc, net, rng, f"check.generators[{j}]"):
            gens.append((g, gc.expect_invariant))
    traj = run(spec, net, ls, sample_every=cfg.dynamics.sample_every, v0=as_array(cfg.dynamics.v0))
    idx = _window_indices(len(traj.ws), cfg.check.windows)
    windows = [traj.window(int(j)) for j in idx]
    reports = [check_generator(g, net, ls, traj, windows, cfg.check, exp) for g, exp in gens]
    return CheckResult(reports, traj, float(traj.records[0].loss), {"windows": len(windows)})


# ---------------------------------------------------------------------------
# ntk
# ---------------------------------------------------------------------------


@dataclass
class NtkResult:
    results: list
    checks: dict

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    @property
    def any_diverged(self) -> bool:
        return any(r.diverged for r in self.results)


def ntk_network(nc: NtkConfig, width: int, seed: int) -> NetworkParams:
    return init("unbiased_pairs", [nc.input_dim, width, 1], [ReLU(), Linear()], seed,
                ntk_output=nc.parameterization == "ntk")


def ntk_experiment(cfg: Config, seed: Optional[int] = None) -> NtkResult:
    cfg.require("ntk")
    nc = cfg.ntk
    seed = cfg.seed if seed is None else seed
    ds = synth_regression(nc.n, nc.input_dim, nc.data_seed)
    y = np.zeros(nc.n) if nc.target == "zero" else ds.targets[:, 0]
    spec = gf(nc.eta, nc.steps) if nc.kind == "gf" else nd(nc.eta, nc.steps)
    results: list[WidthResult] = []
    for width in nc.widths:
        net = ntk_network(nc, width, seed)
        results.append(width_point(net, ds.inputs, y, spec, nc.sample_every))
    checks = {}
    slack = 1.0 + nc.energy_slack
    for r in results:
        if r.stats is not None:
            checks[f"energy_w{r.width}"] = r.stats.sup_norm**2 <= 2.0 * r.loss0 * slack
            checks[f"avg_velocity_w{r.width}"] = r.stats.sup_avg <= r.stats.avg_bound * slack
    ordered = sorted(results, key=lambda r: r.width)
    mv = [r.movement for r in ordered]
    dv = [r.divergence for r in ordered]
    if len(ordered) > 1:
        checks["movement_decreasing"] = all(b < a for a, b in zip(mv, mv[1:]))
        checks["divergence_decreasing"] = all(b <= a for a, b in zip(dv, dv[1:]))
    else:
        checks["finite"] = all(math.isfinite(x) for x in mv + dv)
    return NtkResult(results, checks)


__all__ = [
    "CheckResult",
    "GeneratorReport",
    "NtkResult",
    "RunResult",
    "build_dataset",
    "build_dynamics",
    "build_loss",
    "build_monitors",
    "build_network",
    "check_experiment",
    "check_generator",
    "expand_generators",
    "ntk_experiment",
    "ntk_network",
    "run_experiment",
]
