"""Declarative run configuration (TOML), validated with pydantic.

One file describes an entire experiment: network, initialization, data,
dynamics, monitors, generators to check and the output directory.  The
schema is documented in README.md; unknown keys are rejected.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .errors import ConfigError
from .net import InputError, parse_activation


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NetworkConfig(_Model):
    dims: List[int] = Field(min_length=2)
    activations: List[str]
    bias: Union[bool, List[bool]] = False
    init: Literal["lecun", "unbiased_pairs", "balanced", "explicit"] = "lecun"
    init_p: float = Field(1.0, gt=0)
    ntk_output: bool = False
    weights: Optional[List[List[List[float]]]] = None

    @field_validator("dims")
    @classmethod
    def _positive(cls, v):
        if min(v) < 1:
            raise ValueError("all widths must be positive")
        return v

    @field_validator("activations")
    @classmethod
    def _parse(cls, v):
        for a in v:
            try:
                parse_activation(a)
            except (InputError, ValueError) as exc:
                raise ValueError(str(exc)) from None
        return v

    @model_validator(mode="after")
    def _shapes(self):
        K = len(self.dims) - 1
        if len(self.activations) != K:
            raise ValueError(f"need {K} activations for {K} layers, got {len(self.activations)}")
        if isinstance(self.bias, list) and len(self.bias) != K:
            raise ValueError(f"bias list must have {K} entries")
        if self.init == "explicit":
            if self.weights is None:
                raise ValueError("init = 'explicit' needs weights")
            if len(self.weights) != K:
                raise ValueError(f"weights must list {K} matrices")
            for h, W in enumerate(self.weights, start=1):
                shape = (len(W), len(W[0]) if W else 0)
                if shape != (self.dims[h], self.dims[h - 1]) or any(len(r) != shape[1] for r in W):
                    raise ValueError(f"weight matrix {h} must be {self.dims[h]}x{self.dims[h - 1]}")
        elif self.weights is not None:
            raise ValueError("weights are only used with init = 'explicit'")
        return self


class DataConfig(_Model):
    kind: Literal["classification", "regression", "rotational", "idx", "potential"]
    loss: Optional[Literal["nll", "quadratic"]] = None
    n: int = Field(100, ge=1)
    classes: int = Field(10, ge=2)
    seed: int = 0
    target: Literal["default", "zero"] = "default"
    images: Optional[str] = None
    labels: Optional[str] = None
    limit: Optional[int] = Field(None, ge=1)
    potential: Literal["radial", "harmonic", "zero"] = "radial"

    @model_validator(mode="after")
    def _consistent(self):
        if self.kind == "idx" and (self.images is None or self.labels is None):
            raise ValueError("idx data needs both images and labels paths")
        if self.kind == "potential" and self.loss is not None:
            raise ValueError("potential data has no loss kind")
        if self.kind in ("classification", "idx") and self.loss == "quadratic":
            raise ValueError("class labels need the nll loss")
        if self.kind in ("regression", "rotational") and self.loss == "nll":
            raise ValueError("real-valued targets need the quadratic loss")
        return self

    @property
    def loss_kind(self) -> Optional[str]:
        if self.kind == "potential":
            return None
        if self.loss is not None:
            return self.loss
        return "nll" if self.kind in ("classification", "idx") else "quadratic"


class DynamicsConfig(_Model):
    kind: Literal["gf", "nd", "nagd"]
    eta: float = Field(gt=0)
    steps: int = Field(ge=0)
    t_start: Optional[float] = Field(None, ge=0)
    v0: Optional[List[float]] = None
    sample_every: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _velocity(self):
        if self.kind == "gf" and self.v0 is not None:
            raise ValueError("gradient flow has no velocity; drop v0")
        if self.kind == "nagd" and self.t_start is not None and self.t_start <= 0:
            raise ValueError("Nesterov dynamics must start at t_start > 0")
        return self


class MonitorConfig(_Model):
    kind: Literal[
        "norm_gap", "neuron_gaps", "weight_sq", "balance", "balance_accel",
        "hamiltonian", "kinetic", "angular_momentum", "rotation_momentum",
    ]
    h: Optional[int] = Field(None, ge=1)
    p: Optional[float] = Field(None, gt=0)
    with_bias: Optional[bool] = None
    with_swish: Optional[bool] = None
    scaled: bool = False

    @model_validator(mode="after")
    def _layer(self):
        layered = {"norm_gap", "neuron_gaps", "weight_sq", "balance", "balance_accel"}
        if self.kind in layered and self.h is None:
            raise ValueError(f"monitor {self.kind} needs a layer index h")
        if self.kind not in layered and self.h is not None:
            raise ValueError(f"monitor {self.kind} takes no layer index")
        return self

    def kwargs(self) -> dict:
        if self.kind in ("norm_gap", "neuron_gaps"):
            return {"h": self.h, "p": self.p, "with_bias": self.with_bias, "with_swish": self.with_swish}
        if self.kind in ("weight_sq", "balance", "balance_accel"):
            return {"h": self.h}
        if self.kind == "angular_momentum":
            return {"scaled": self.scaled}
        return {}


class GeneratorConfig(_Model):
    family: Literal["homogeneity", "swish", "linear", "rotation", "auto"]
    h: Optional[int] = Field(None, ge=1)
    i: Optional[int] = Field(None, ge=0)
    p: Optional[float] = Field(None, gt=0)
    with_bias: Optional[bool] = None
    count: int = Field(1, ge=1)
    basis: bool = False
    expect_invariant: bool = True


class CheckConfig(_Model):
    generators: List[GeneratorConfig] = Field(min_length=1)
    eps: List[float] = Field(default_factory=lambda: [1e-3, 0.1, 0.5])
    tolerance_factor: float = Field(10.0, gt=0)
    windows: int = Field(20, ge=1)


class NtkConfig(_Model):
    widths: List[int] = Field(min_length=1)
    input_dim: int = Field(10, ge=1)
    n: int = Field(20, ge=1, le=512)
    horizon: float = Field(2.0, gt=0)
    eta: float = Field(1e-3, gt=0)
    kind: Literal["gf", "nd"] = "nd"
    parameterization: Literal["ntk", "standard"] = "ntk"
    sample_every: int = Field(1, ge=1)
    data_seed: int = 0
    target: Literal["default", "zero"] = "default"
    energy_slack: float = Field(0.01, ge=0)

    @field_validator("widths")
    @classmethod
    def _even(cls, v):
        for w in v:
            if w < 2 or w % 2:
                raise ValueError("widths must be even (unbiased paired initialization)")
        return v

    @property
    def steps(self) -> int:
        dt = self.eta if self.kind == "gf" else math.sqrt(self.eta)
        return int(round(self.horizon / dt))


class OutputConfig(_Model):
    dir: str = "out"
    plots: Optional[List[str]] = None


class Config(_Model):
    seed: int = 0
    network: Optional[NetworkConfig] = None
    data: Optional[DataConfig] = None
    dynamics: Optional[DynamicsConfig] = None
    monitors: List[MonitorConfig] = Field(default_factory=list)
    check: Optional[CheckConfig] = None
    ntk: Optional[NtkConfig] = None
    output: OutputConfig = Field(default_factory=OutputConfig)

    @model_validator(mode="after")
    def _cross(self):
        if self.network is not None and self.dynamics is not None and self.dynamics.v0 is not None:
            dims, bias = self.network.dims, self.network.bias
            K = len(dims) - 1
            bias = bias if isinstance(bias, list) else [bias] * K
            acts = [parse_activation(a) for a in self.network.activations]
            m = sum(dims[h] * dims[h - 1] + dims[h] * (bias[h - 1] + (acts[h - 1].kind == "swish"))
                    for h in range(1, K + 1))
            if len(self.dynamics.v0) != m:
                raise ValueError(f"v0 has {len(self.dynamics.v0)} entries, the network has {m} parameters")
        return self

    def require(self, *sections: str) -> None:
        for s in sections:
            if getattr(self, s) is None:
                raise ConfigError("section is required for this command", s)


def _format_loc(loc) -> str:
    out = ""
    for part in loc:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out or "<root>"


def parse_config(data: dict) -> Config:
    try:
        return Config.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(err["msg"], _format_loc(err["loc"])) from None


def load_config(path) -> Config:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found", "--config") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}", str(path)) from None
    return parse_config(data)


def bundled_config_dir() -> Path:
    return Path(__file__).parent / "configs"


def as_array(v) -> Optional[np.ndarray]:
    return None if v is None else np.asarray(v, dtype=np.float64)


__all__ = [
    "CheckConfig",
    "Config",
    "DataConfig",
    "DynamicsConfig",
    "GeneratorConfig",
    "MonitorConfig",
    "NetworkConfig",
    "NtkConfig",
    "OutputConfig",
    "as_array",
    "bundled_config_dir",
    "load_config",
    "parse_config",
]
