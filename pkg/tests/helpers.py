"""Shared test fixtures: random networks and finite-difference oracles."""
import numpy as np

from noether.net import (
    LeakyReLU,
    Linear,
    LossSpec,
    Polynomial,
    ReLU,
    RePU,
    Swish,
    grad,
    loss,
)
from noether.data import init

FAMILIES = {
    "linear": lambda: Linear(0.7),
    "relu": ReLU,
    "leaky_relu": lambda: LeakyReLU(0.1),
    "polynomial": lambda: Polynomial(2),
    "repu": lambda: RePU(1.5),
    "swish": Swish,
}

# relative-error floor for finite differences: coordinates whose derivative is
# far below the gradient scale are compared against FD_FLOOR * ||g||_inf
FD_STEP = 1e-6
FD_RTOL = 1e-6
FD_FLOOR = 1e-3


def random_net(family, rng, dims=(4, 5, 3), bias=True, scale=1.0):
    act = FAMILIES[family]()
    K = len(dims) - 1
    acts = [act] * (K - 1) + [Linear()]
    net = init("lecun", dims, acts, int(rng.integers(2**31)), bias=bias)
    for layer in net.layers:
        layer.W *= scale
        if layer.beta is not None:
            layer.beta[:] = rng.uniform(0.5, 2.0, size=layer.beta.shape)
    return net


def regression_loss(net, rng, n=6):
    X = rng.standard_normal((n, net.dims[0]))
    Y = rng.standard_normal((n, net.dims[-1]))
    return LossSpec.quadratic(X, Y)


def fd_grad(net, ls, step=FD_STEP):
    w = net.flatten()
    out = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = step
        out[i] = (loss(net.unflatten(w + e), ls) - loss(net.unflatten(w - e), ls)) / (2 * step)
    return out


def richardson_grad(net, ls, step=1e-4):
    """Fourth-order FD gradient; used where rounding makes the plain central difference too noisy."""
    return (4 * fd_grad(net, ls, step) - fd_grad(net, ls, 2 * step)) / 3


def fd_mismatch(net, ls, oracle=fd_grad):
    """Largest per-coordinate relative error between the analytic and FD gradient."""
    a = grad(net, ls)
    b = oracle(net, ls)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), FD_FLOOR * np.max(np.abs(a)))
    return float(np.max(np.abs(a - b) / scale))
