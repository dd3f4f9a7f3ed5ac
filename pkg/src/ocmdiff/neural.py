"""Small time-conditioned MLP with hand-written reverse and forward mode.

The network maps ``concat(x, embed(t_norm))`` through dense layers with a
smooth activation on hidden layers and identity on the output.  Parameter
gradients use ordinary backpropagation; input Jacobian-vector products carry
a (value, tangent) pair through every layer, so they are exact up to float
rounding.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

SILU = "silu"
TANH = "tanh"
ACTIVATIONS = (SILU, TANH)

CHECKPOINT_MAGIC = b"OCMD"
CHECKPOINT_VERSION = 1


def _act(kind, z):
    """Return (activation, derivative) evaluated at z."""
    if kind == SILU:
        s = expit(z)
        return z * s, s * (1.0 + z * (1.0 - s))
    if kind == TANH:
        a = np.tanh(z)
        return a, 1.0 - a * a
    raise ValueError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class TimeEmbedding:
    width: int = 32
    kind: str = "sinusoidal"
    base: float = 10000.0
    scale: float = 1000.0

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("embedding width must be >= 1")
        if self.kind not in ("sinusoidal", "scalar"):
            raise ValueError(f"unknown embedding kind {self.kind!r}")

    def __call__(self, t_norm):
        t = np.asarray(t_norm, dtype=np.float64).reshape(-1, 1)
        if self.kind == "scalar":
            return np.repeat(2.0 * t - 1.0, self.width, axis=1)
        half = (self.width + 1) // 2
        freqs = self.base ** (-np.arange(half) / max(half, 1))
        arg = self.scale * t * freqs
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)[:, : self.width]

    def to_dict(self):
        return {"width": self.width, "kind": self.kind, "base": self.base, "scale": self.scale}


@dataclass(eq=False)
class Mlp:
    layer_dims: list
    weights: list
    biases: list
    activation: str = SILU
    embedding: TimeEmbedding = field(default_factory=TimeEmbedding)

    def __post_init__(self):
        dims = [int(d) for d in self.layer_dims]
        self.layer_dims = dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("layer_dims inconsistent with number of parameter arrays")
        for (a, b), W, c in zip(zip(dims, dims[1:]), self.weights, self.biases):
            if W.shape != (a, b) or c.shape != (b,):
                raise ValueError(f"parameter shapes {W.shape}/{c.shape} do not match ({a}, {b})")
        if dims[0] <= self.embedding.width:
            raise ValueError("first layer width must exceed the time-embedding width")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0] - self.embedding.width

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def params(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp(
            list(self.layer_dims),
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.embedding,
        )

    def __call__(self, x, t_norm):
        return forward(self, x, t_norm)


def init_mlp(
    D: int,
    out_dim: int,
    hidden=(128, 128, 128),
    rng: np.random.Generator | None = None,
    activation: str = SILU,
    embedding: TimeEmbedding | None = None,
) -> Mlp:
    """He-style fan-in uniform initialisation with zero biases."""
    embedding = embedding or TimeEmbedding()
    rng = rng or np.random.default_rng(0)
    dims = [D + embedding.width, *hidden, out_dim]
    weights, biases = [], []
    for a, b in zip(dims, dims[1:]):
        bound = math.sqrt(6.0 / a)
        weights.append(rng.uniform(-bound, bound, size=(a, b)))
        biases.append(np.zeros(b))
    return Mlp(dims, weights, biases, activation, embedding)


def _inputs(net, x, t_norm):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != net.in_dim:
        raise ValueError(f"expected inputs of dimension {net.in_dim}, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    t = np.broadcast_to(np.asarray(t_norm, dtype=np.float64), (x.shape[0],))
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise ValueError("t_norm must lie in [0, 1]")
    return np.concatenate([x, net.embedding(t)], axis=1)


def _value(kind, z):
    if kind == SILU:
        return z * expit(z)
    if kind == TANH:
        return np.tanh(z)
    raise ValueError(f"unknown activation {kind!r}")


def forward(net: Mlp, x, t_norm):
    h = _inputs(net, x, t_norm)
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ W + b
        if i < last:
            h = _value(net.activation, h)
    return h


def forward_cached(net: Mlp, x, t_norm):
    h = _inputs(net, x, t_norm)
    hs, ds = [h], []
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W + b
        if i < last:
            h, d = _act(net.activation, z)
            ds.append(d)
        else:
            h = z
        hs.append(h)
    return h, (hs, ds)


def backward(net: Mlp, cache, dout):
    """Gradients of a scalar loss w.r.t. [W0, b0, W1, b1, ...] given dL/d(output)."""
    hs, ds = cache
    g = np.asarray(dout, dtype=np.float64)
    grads = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        grads[2 * i] = hs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = (g @ net.weights[i].T) * ds[i - 1]
    return grads


def grad_params(net: Mlp, x, t_norm, loss_closure):
    """Reverse-mode gradient of ``loss_closure(output)``.

    ``loss_closure`` returns ``(loss, dloss_doutput)`` for the batch output.
    """
    out, cache = forward_cached(net, x, t_norm)
    loss, dout = loss_closure(out)
    return float(loss), backward(net, cache, dout)


def jvp_input(net: Mlp, x, t_norm, v):
    """J_x f(x, t) v by dual-number propagation; time input carries zero tangent."""
    return jvp_input_with_value(net, x, t_norm, v)[1]


def jvp_input_with_value(net: Mlp, x, t_norm, v):
    """Primal output and input JVP from a single dual forward pass."""
    h = _inputs(net, x, t_norm)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        v = v[None, :]
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite direction")
    dh = np.zeros_like(h)
    dh[:, : net.in_dim] = v
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W + b
        dz = dh @ W
        if i < last:
            h, d = _act(net.activation, z)
            dh = d * dz
        else:
            h, dh = z, dz
    return h, dh


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params, grads, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update with bias correction; returns the state."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# -- checkpoints --------------------------------------------------------------

def _header(net: Mlp, binding: dict | None):
    return {
        "layer_dims": net.layer_dims,
        "activation": net.activation,
        "embedding": net.embedding.to_dict(),
        "binding": binding or {},
    }


def checkpoint_bytes(net: Mlp, binding: dict | None = None) -> bytes:
    header = json.dumps(_header(net, binding), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    for p in net.params():
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, net: Mlp, binding: dict | None = None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(net, binding))


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        return _parse_header(fh.read())[0]


def _parse_header(data: bytes):
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    return header, 12 + hlen


def load_checkpoint(path):
    """Return ``(net, binding)`` from a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        data = fh.read()
    header, offset = _parse_header(data)
    dims = header["layer_dims"]
    arrays = []
    for a, b in zip(dims, dims[1:]):
        for shape in ((a, b), (b,)):
            n = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape)
            arrays.append(arr.astype(np.float64))
            offset += 8 * n
    if offset != len(data):
        raise ValueError("checkpoint has trailing or missing bytes")
    net = Mlp(
        dims,
        arrays[0::2],
        arrays[1::2],
        header["activation"],
        TimeEmbedding(**header["embedding"]),
    )
    return net, header["binding"]
