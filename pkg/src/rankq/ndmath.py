"""Dense MLPs with a per-pass activation tape, Adam, and gradient clipping.

Everything is float64. Arrays are row-major numpy arrays, rows are samples.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")
CHECKPOINT_MAGIC = b"RQMLP\x00\x01\x00"


class ShapeError(ValueError):
    pass


class NetworkStateError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was produced; training must stop."""


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


@dataclass
class GradBundle:
    grads: list[np.ndarray]
    input_grad: np.ndarray | None = None
    _norm: float | None = field(default=None, repr=False)

    @property
    def global_norm(self) -> float:
        if self._norm is None:
            self._norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads)))
        return self._norm

    def scaled(self, c: float) -> "GradBundle":
        return GradBundle([g * c for g in self.grads])

    def __add__(self, other: "GradBundle") -> "GradBundle":
        return GradBundle([a + b for a, b in zip(self.grads, other.grads)])

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads])


class Mlp:
    """Fully connected network; hidden layers use ``activation``, output is linear.

    ``forward`` records layer inputs on a tape that the next ``backward`` consumes.
    """

    def __init__(self, layer_sizes: Sequence[int], activation: str = "relu",
                 rng: np.random.Generator | None = None):
        if len(layer_sizes) < 2 or any(int(n) < 1 for n in layer_sizes):
            raise ShapeError(f"bad layer sizes {list(layer_sizes)}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_sizes = [int(n) for n in layer_sizes]
        self.activation = activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            bound = 1.0 / np.sqrt(n_in)
            self.weights.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
            self.biases.append(rng.uniform(-bound, bound, size=n_out))
        self._tape: list[tuple[np.ndarray, np.ndarray]] | None = None

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_params:
            raise ShapeError(f"expected {self.num_params} parameters, got {flat.size}")
        i = 0
        for p in self.params():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def copy(self) -> "Mlp":
        new = Mlp.__new__(Mlp)
        new.layer_sizes = list(self.layer_sizes)
        new.activation = self.activation
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        new._tape = None
        return new

    def _act(self, z):
        return np.maximum(z, 0.0) if self.activation == "relu" else np.tanh(z)

    def _act_grad(self, z):
        if self.activation == "relu":
            return (z > 0.0).astype(np.float64)
        t = np.tanh(z)
        return 1.0 - t * t

    def forward(self, x: np.ndarray, record: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"input shape {x.shape} does not match first layer width {self.in_dim}")
        tape = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            tape.append((h, z))
            h = z if i == last else self._act(z)
        check_finite(h, "mlp output")
        self._tape = tape if record else None
        return h

    __call__ = forward

    def backward(self, upstream: np.ndarray) -> GradBundle:
        """Gradient of ``sum(upstream * output)`` w.r.t. parameters and input."""
        if self._tape is None:
            raise NetworkStateError("backward called without a recorded forward pass")
        tape, self._tape = self._tape, None
        delta = np.asarray(upstream, dtype=np.float64)
        n = tape[0][0].shape[0]
        if delta.shape != (n, self.out_dim):
            raise ShapeError(f"upstream shape {delta.shape} != {(n, self.out_dim)}")
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            h_in, z = tape[i]
            if i != last:
                delta = delta * self._act_grad(z)
            grads[2 * i] = h_in.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            delta = delta @ self.weights[i].T
        return GradBundle(grads, input_grad=delta)


def polyak_average(target: Mlp, source: Mlp, tau: float) -> None:
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    for pt, ps in zip(target.params(), source.params()):
        pt *= 1.0 - tau
        pt += tau * ps


def clip_global_norm(g: GradBundle, max_norm: float) -> GradBundle:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = g.global_norm
    if not np.isfinite(norm):
        raise NonFiniteError("non-finite gradient norm")
    if norm <= max_norm:
        return g
    return g.scaled(max_norm / norm)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr, **kw)


def adam_step(params: Sequence[np.ndarray], g: GradBundle, st: AdamState):
    """In-place bias-corrected Adam update. Returns ``(params, st)``."""
    if len(params) != len(g.grads) or any(p.shape != d.shape for p, d in zip(params, g.grads)):
        raise ShapeError("gradient shapes do not match parameters")
    st.step += 1
    c1 = 1.0 - st.beta1 ** st.step
    c2 = 1.0 - st.beta2 ** st.step
    for p, d, m, v in zip(params, g.grads, st.m, st.v):
        m *= st.beta1
        m += (1.0 - st.beta1) * d
        v *= st.beta2
        v += (1.0 - st.beta2) * d * d
        p -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
    return params, st


class Adam:
    """Clip-then-Adam for one network."""

    def __init__(self, net: Mlp, lr: float, clip: float | None = None):
        self.net = net
        self.clip = clip
        self.state = AdamState.for_params(net.params(), lr)

    def step(self, g: GradBundle) -> float:
        norm = g.global_norm
        if not np.isfinite(norm):
            raise NonFiniteError("non-finite gradient norm")
        if self.clip is not None:
            g = clip_global_norm(g, self.clip)
        adam_step(self.net.params(), g, self.state)
        return norm


# checkpoint layout (little-endian):
#   8 bytes magic, uint32 n_layers_sizes, uint32 activation index,
#   n x uint32 layer sizes, then float64 W0 (in x out, row-major), b0, W1, b1, ...

def write_mlp(f: BinaryIO, net: Mlp) -> None:
    f.write(CHECKPOINT_MAGIC)
    f.write(struct.pack("<II", len(net.layer_sizes), ACTIVATIONS.index(net.activation)))
    f.write(struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes))
    for p in net.params():
        f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def read_mlp(f: BinaryIO) -> Mlp:
    magic = f.read(8)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError("not an MLP checkpoint (bad magic)")
    n, act = struct.unpack("<II", f.read(8))
    sizes = struct.unpack(f"<{n}I", f.read(4 * n))
    net = Mlp(sizes, ACTIVATIONS[act])
    for p in net.params():
        raw = f.read(8 * p.size)
        if len(raw) != 8 * p.size:
            raise ValueError("truncated MLP checkpoint")
        p[...] = np.frombuffer(raw, dtype="<f8").reshape(p.shape)
    return net


def save_mlp(path: str | Path, net: Mlp) -> None:
    with open(path, "wb") as f:
        write_mlp(f, net)


def load_mlp(path: str | Path) -> Mlp:
    with open(path, "rb") as f:
        return read_mlp(f)


def softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logsumexp(x: np.ndarray, axis: int = 0) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def softmax(x: np.ndarray, axis: int = 0) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))
