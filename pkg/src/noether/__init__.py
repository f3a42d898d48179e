"""Train small dense networks under gradient-flow-type dynamics and verify their conserved quantities."""

from . import conservation, data, dynamics, ntk, symmetry
from .dynamics import DynamicsSpec, Trajectory, gf, nagd, nd, run
from .net import (
    Activation,
    LeakyReLU,
    Linear,
    LossSpec,
    NetworkParams,
    Polynomial,
    ReLU,
    RePU,
    Swish,
    forward,
    grad,
    loss,
    make_network,
)

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "DynamicsSpec",
    "LeakyReLU",
    "Linear",
    "LossSpec",
    "NetworkParams",
    "Polynomial",
    "ReLU",
    "RePU",
    "Swish",
    "Trajectory",
    "conservation",
    "data",
    "dynamics",
    "forward",
    "gf",
    "grad",
    "loss",
    "make_network",
    "nagd",
    "nd",
    "ntk",
    "run",
    "symmetry",
]
