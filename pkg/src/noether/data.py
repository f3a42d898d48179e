"""Datasets (IDX files and synthetic generators) and parameter initialization."""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError
from .net import Activation, Layer, Linear, NetworkParams

IDX_UBYTE = 0x08


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError("dataset needs a non-empty (n, d) input matrix")
        if len(self.targets) != self.inputs.shape[0]:
            raise ValueError("inputs and targets disagree on the number of samples")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("dataset inputs must be finite")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(buf: bytes, limit: Optional[int] = None) -> np.ndarray:
    """Parse an unsigned-byte IDX buffer into a uint8 array."""
    if len(buf) < 4:
        raise FormatError("file shorter than the 4-byte magic number", len(buf))
    if buf[0] != 0 or buf[1] != 0:
        raise FormatError("magic number must start with two zero bytes", 0)
    if buf[2] != IDX_UBYTE:
        raise FormatError(f"unsupported element type 0x{buf[2]:02x} (only unsigned byte 0x08)", 2)
    ndim = buf[3]
    if ndim == 0:
        raise FormatError("zero-dimensional IDX payload", 3)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"truncated header: expected {ndim} dimension words", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = dims[0]
    if limit is not None:
        if limit < 0:
            raise ValueError("limit must be non-negative")
        count = min(count, limit)
    record = math.prod(dims[1:])
    need = header + count * record
    if len(buf) < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(buf)}", len(buf))
    data = np.frombuffer(buf, dtype=np.uint8, count=count * record, offset=header)
    return data.reshape((count,) + tuple(dims[1:])).copy()


def load_idx(path, limit: Optional[int] = None, raw: bool = False) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed).

    One-dimensional files are label files and come back as int64 class
    indices.  Anything else is image data scaled to ``[0, 1]`` unless ``raw``.
    """
    arr = parse_idx(_read_bytes(path), limit)
    if raw:
        return arr
    if arr.ndim == 1:
        return arr.astype(np.int64)
    return arr.astype(np.float64) / 255.0


def encode_idx(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError("only uint8 arrays can be written as IDX")
    if arr.ndim < 1 or arr.ndim > 255:
        raise ValueError("IDX supports 1 to 255 dimensions")
    head = bytes([0, 0, IDX_UBYTE, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def write_idx(path, arr, compress: bool = False) -> None:
    payload = encode_idx(arr)
    opener = gzip.open if compress else open
    with opener(Path(path), "wb") as fh:
        fh.write(payload)


def idx_dataset(images_path, labels_path, limit: Optional[int] = None) -> Dataset:
    """Images flattened to rows and labels as class indices; takes the first ``limit`` records."""
    X = load_idx(images_path, limit)
    y = load_idx(labels_path, limit)
    if y.ndim != 1:
        raise FormatError("labels file must be one-dimensional", 3)
    if X.shape[0] != y.shape[0]:
        raise ValueError("image and label files disagree on the record count")
    if X.shape[0] == 0:
        raise ValueError("IDX dataset is empty")
    return Dataset(X.reshape(X.shape[0], -1), y, {"source": [str(images_path), str(labels_path)]})


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def synth_rotational(n: int, d: int, seed: int, target_fn: Optional[Callable] = None) -> Dataset:
    """Isotropic Gaussian inputs with targets that depend on ``||x||`` only."""
    if n < 1 or d < 2:
        raise ValueError("need n >= 1 and d >= 2")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    fn = target_fn if target_fn is not None else (lambda r: np.sin(r))
    r = np.linalg.norm(X, axis=1)
    y = np.asarray(fn(r), dtype=np.float64).reshape(n, -1)
    return Dataset(X, y, {"generator": "rotational", "seed": seed})


def synth_regression(n: int, d: int, seed: int, d_out: int = 1) -> Dataset:
    """Inputs on the unit sphere with targets from a fixed random smooth function.

    The targets single out directions, so the loss is not rotation invariant.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    A = rng.standard_normal((d, d_out))
    y = np.sin(2.0 * X @ A)
    return Dataset(X, y, {"generator": "regression", "seed": seed})


def synth_classification(n: int, d: int, classes: int, seed: int) -> Dataset:
    """Gaussian inputs labelled by the argmax of a random linear teacher."""
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    T = rng.standard_normal((d, classes))
    y = np.argmax(X @ T, axis=1).astype(np.int64)
    return Dataset(X, y, {"generator": "classification", "seed": seed})


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed element of SO(d)."""
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

SCHEMES = ("lecun", "unbiased_pairs", "balanced")


def _lecun_layers(dims, activations, rng, bias):
    layers = []
    for h in range(1, len(dims)):
        fan_in, fan_out = dims[h - 1], dims[h]
        W = rng.standard_normal((fan_out, fan_in)) / math.sqrt(fan_in)
        b = rng.standard_normal(fan_out) / math.sqrt(fan_in) if bias[h - 1] else None
        act = activations[h - 1]
        beta = np.ones(fan_out) if act.kind == "swish" else None
        layers.append(Layer(W, act, b, beta))
    return layers


def init(scheme: str, dims: Sequence[int], activations: Sequence[Activation], seed: int,
         bias=False, p: float = 1.0, ntk_output: bool = False) -> NetworkParams:
    """Seeded initialization.

    * ``lecun``: Gaussian weights with variance ``1/fan_in`` (biases alike, Swish slopes 1)
    * ``unbiased_pairs``: LeCun, then the last hidden layer is split into two
      halves with identical incoming weights and opposite outgoing weights, so
      the initial network output is identically zero
    * ``balanced``: LeCun, then each ``W(h+1)`` is rescaled so that
      ``||W(h)||^2 = p ||W(h+1)||^2``

    ``ntk_output`` moves the ``1/sqrt(fan_in)`` factor of a linear output layer
    out of the weights and into the activation constant.  The initial function
    is unchanged, but the tangent kernel no longer grows with the hidden width.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ConfigError("dims must list at least an input and an output width, all positive", "dims")
    if len(activations) != len(dims) - 1:
        raise ConfigError(f"need {len(dims) - 1} activations, got {len(activations)}", "activations")
    if isinstance(bias, bool):
        bias = [bias] * (len(dims) - 1)
    if len(bias) != len(dims) - 1:
        raise ConfigError("bias flags must match the number of layers", "bias")
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown init scheme {scheme!r}; known: {', '.join(SCHEMES)}", "init.scheme")
    rng = np.random.default_rng(seed)
    net = NetworkParams(_lecun_layers(dims, activations, rng, bias))
    K = net.K
    if scheme == "unbiased_pairs":
        if K < 2:
            raise ConfigError("unbiased_pairs needs at least one hidden layer", "dims")
        width = dims[K - 1]
        if width % 2:
            raise ConfigError(f"unbiased_pairs needs an even last hidden width, got {width}", "dims")
        half = width // 2
        hid, out = net.layer(K - 1), net.layer(K)
        hid.W[half:] = hid.W[:half]
        if hid.b is not None:
            hid.b[half:] = hid.b[:half]
        out.W[:, half:] = -out.W[:, :half]
        if out.b is not None:
            out.b[:] = 0.0
    elif scheme == "balanced":
        if not p > 0:
            raise ConfigError("balanced init needs p > 0", "init.p")
        for h in range(1, K):
            top = float(np.sum(net.W(h) ** 2))
            nxt = float(np.sum(net.W(h + 1) ** 2))
            net.layer(h + 1).W *= math.sqrt(top / (p * nxt))
    if ntk_output:
        out = net.layer(K)
        if not out.activation.is_linear:
            raise ConfigError("ntk_output needs a linear output activation", "activations")
        scale = math.sqrt(dims[K - 1])
        out.W *= scale
        if out.b is not None:
            out.b *= scale
        out.activation = Linear(out.activation.c / scale)
    return net


__all__ = [
    "Dataset",
    "SCHEMES",
    "encode_idx",
    "idx_dataset",
    "init",
    "load_idx",
    "parse_idx",
    "random_rotation",
    "synth_classification",
    "synth_regression",
    "synth_rotational",
    "write_idx",
]
