"""Small differentiable core: cells with analytic backward passes, loss
primitives, a flat parameter layout and a first-order optimizer.

All cell functions are batched over the leading axis: ``x`` is (B, in),
``W`` is (out, in). Forward functions return ``(out, cache)`` and the
matching backward takes ``(cache, grad_out)``.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CheckpointError, IndexOutOfRangeError, LayoutMismatchError,
                     LengthMismatchError, NonFiniteGradientError, ShapeMismatchError)

LOG_EPS = 1e-12


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_in(W, x):
    if x.shape[-1] != W.shape[1]:
        raise ShapeMismatchError(f"input width {x.shape[-1]} does not match weight {W.shape}")


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

def dense_forward(W, b, x):
    x = np.asarray(x)
    _check_in(W, x)
    if b.shape != (W.shape[0],):
        raise ShapeMismatchError(f"bias {b.shape} does not match weight {W.shape}")
    return x @ W.T + b


def dense_backward(W, x, g):
    """Returns (dW, db, dx) for y = x W^T + b."""
    return g.T @ x, g.sum(axis=0), g @ W


def rnn_cell_forward(W, b, h_prev, x):
    hx = np.concatenate([h_prev, x], axis=-1)
    _check_in(W, hx)
    if W.shape[0] != h_prev.shape[-1]:
        raise ShapeMismatchError("hidden width does not match the cell")
    h = np.tanh(hx @ W.T + b)
    return h, (W, hx, h)


def rnn_cell_backward(cache, gh):
    W, hx, h = cache
    ga = gh * (1.0 - h * h)
    dW, db, dhx = dense_backward(W, hx, ga)
    d = h.shape[-1]
    return {"W": dW, "b": db}, dhx[:, :d], dhx[:, d:]


def gru_cell_forward(p, h_prev, x):
    """GRU step with gates on the concatenation [h_prev, x].

    ``p`` maps Wr, br, Wz, bz, Wh, bh to arrays.
    """
    d = h_prev.shape[-1]
    hx = np.concatenate([h_prev, x], axis=-1)
    for k in ("Wr", "Wz", "Wh"):
        _check_in(p[k], hx)
        if p[k].shape[0] != d:
            raise ShapeMismatchError("hidden width does not match the cell")
    r = sigmoid(hx @ p["Wr"].T + p["br"])
    z = sigmoid(hx @ p["Wz"].T + p["bz"])
    rhx = np.concatenate([r * h_prev, x], axis=-1)
    cand = np.tanh(rhx @ p["Wh"].T + p["bh"])
    h = (1.0 - z) * h_prev + z * cand
    return h, (p, h_prev, hx, rhx, r, z, cand)


def gru_cell_backward(cache, gh):
    """Returns (param grads, d h_prev, d x)."""
    p, h_prev, hx, rhx, r, z, cand = cache
    d = h_prev.shape[-1]
    gz = gh * (cand - h_prev)
    gcand = gh * z
    dh = gh * (1.0 - z)
    ga_h = gcand * (1.0 - cand * cand)
    dWh, dbh, drhx = dense_backward(p["Wh"], rhx, ga_h)
    dh += drhx[:, :d] * r
    gr = drhx[:, :d] * h_prev
    dx = drhx[:, d:].copy()
    ga_z = gz * z * (1.0 - z)
    ga_r = gr * r * (1.0 - r)
    dWz, dbz, dhx_z = dense_backward(p["Wz"], hx, ga_z)
    dWr, dbr, dhx_r = dense_backward(p["Wr"], hx, ga_r)
    dhx = dhx_z + dhx_r
    dh += dhx[:, :d]
    dx += dhx[:, d:]
    return {"Wr": dWr, "br": dbr, "Wz": dWz, "bz": dbz, "Wh": dWh, "bh": dbh}, dh, dx


# --------------------------------------------------------------------------
# probabilities and losses
# --------------------------------------------------------------------------

def masked_softmax(logits, mask):
    """Softmax reweighted by non-negative ``mask``; zero-mask entries get 0.

    Works on the last axis. Rows whose mask is all zero fall back to the
    plain softmax.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if logits.shape != mask.shape:
        raise LengthMismatchError(f"logits {logits.shape} vs mask {mask.shape}")
    if np.any(mask < 0):
        raise ValueError("mask weights must be non-negative")
    with np.errstate(divide="ignore"):
        logw = np.log(mask)
    empty = ~np.any(mask > 0, axis=-1, keepdims=True)
    logw = np.where(empty, 0.0, logw)
    return log_masked_softmax(logits, logw)


def log_masked_softmax(logits, log_mask):
    """Same as masked_softmax with the mask given as log-weights (-inf = 0).

    Shifting by the row maximum of ``logits + log_mask`` keeps the
    computation finite for bandwidths where exp(-d^2/gamma) underflows.
    """
    s = logits + log_mask
    top = np.max(s, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(s - top)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, target: int) -> float:
    probs = np.asarray(probs)
    if not 0 <= target < probs.shape[-1]:
        raise IndexOutOfRangeError(f"class {target} outside 0..{probs.shape[-1] - 1}")
    return float(-np.log(probs[target] + LOG_EPS))


def cross_entropy_grad(probs, targets):
    """Gradient of -log(p_y + eps) w.r.t. the pre-softmax scores, batched.

    The softmax Jacobian restricted to the mask support gives
    -(p_y / (p_y + eps)) * (onehot_y - p).
    """
    b = np.arange(len(targets))
    py = probs[b, targets]
    g = probs.copy()
    g[b, targets] -= 1.0
    return g * (py / (py + LOG_EPS))[:, None]


def mse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.size == 0:
        raise LengthMismatchError("mse needs equal, non-empty sequences")
    return float(np.mean((pred - truth) ** 2))


# --------------------------------------------------------------------------
# parameter layout and vectors
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Layout:
    segments: tuple  # ((name, shape), ...)

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.segments)

    def offsets(self) -> dict:
        out, off = {}, 0
        for name, shape in self.segments:
            n = int(np.prod(shape))
            out[name] = (off, off + n, shape)
            off += n
        return out

    def views(self, flat: np.ndarray) -> dict:
        return {name: flat[a:b].reshape(shape) for name, (a, b, shape) in self.offsets().items()}


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Flat float32 parameters plus their layout; treated as immutable."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float32)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        if v.ndim != 1 or len(v) != self.layout.size:
            raise LayoutMismatchError(f"{len(v)} values for a layout of size {self.layout.size}")

    def __len__(self):
        return len(self.values)

    def __eq__(self, other):
        return (isinstance(other, ParameterVector) and self.layout == other.layout
                and np.array_equal(self.values, other.values))

    def bit_equal(self, other: "ParameterVector") -> bool:
        return self.layout == other.layout and self.values.tobytes() == other.values.tobytes()


class ParamStore:
    """Named parameter arrays that are views into one flat buffer."""

    def __init__(self, layout: Layout, dtype=np.float32):
        self.layout = layout
        self.dtype = np.dtype(dtype)
        self.flat = np.zeros(layout.size, dtype=self.dtype)
        self.p = layout.views(self.flat)

    def init_uniform(self, seed: int, fan_in: dict) -> None:
        rng = np.random.default_rng(seed)
        for name, (a, b, _) in self.layout.offsets().items():
            bound = 1.0 / np.sqrt(fan_in[name])
            self.flat[a:b] = rng.uniform(-bound, bound, b - a)

    def zeros_like(self):
        flat = np.zeros(self.layout.size, dtype=np.float64)
        return flat, self.layout.views(flat)

    def flatten(self) -> ParameterVector:
        return ParameterVector(self.flat, self.layout)

    def load(self, pv: ParameterVector) -> None:
        if pv.layout != self.layout:
            raise LayoutMismatchError("parameter layout differs from the model's")
        self.flat[:] = pv.values


def flatten(model) -> ParameterVector:
    return model.params.flatten()


def load(model, pv: ParameterVector) -> None:
    model.params.load(pv)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 0.001
    clip: float | None = 5.0
    adam: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    step_count: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")

    def direction(self, grad: np.ndarray) -> np.ndarray:
        """Clipped (and, with ``adam``, moment-scaled) step, 64-bit."""
        g = np.asarray(grad, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("gradient contains NaN or inf")
        if self.clip is not None:
            norm = float(np.sqrt(np.dot(g, g)))
            if norm > self.clip:
                g = g * (self.clip / norm)
        if not self.adam:
            return g
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.step_count += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mh = self.m / (1 - self.beta1 ** self.step_count)
        vh = self.v / (1 - self.beta2 ** self.step_count)
        return mh / (np.sqrt(vh) + 1e-8)

    def apply(self, flat: np.ndarray, grad: np.ndarray) -> None:
        """In-place update of a parameter buffer."""
        flat -= (self.lr * self.direction(grad)).astype(flat.dtype)


def sgd_step(state: OptimizerState, params: ParameterVector, grads: ParameterVector) -> ParameterVector:
    if params.layout != grads.layout:
        raise LayoutMismatchError("parameter and gradient layouts differ")
    step = state.lr * state.direction(grads.values)
    # a zero step must leave every bit alone (including signed zeros)
    new = np.where(step == 0, params.values, params.values.astype(np.float64) - step)
    return ParameterVector(new, params.layout)


# --------------------------------------------------------------------------
# checkpoint file
# --------------------------------------------------------------------------

MAGIC = b"FTRC"
VERSION = 1


def write_checkpoint(path, pv: ParameterVector, version: int = VERSION) -> None:
    """Header: magic, u32 version, u32 segment count, then per segment a
    length-prefixed UTF-8 name, u32 rank and u32 dims; then float32 LE data."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", version, len(pv.layout.segments)))
    for name, shape in pv.layout.segments:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", len(shape)))
        buf.write(struct.pack(f"<{len(shape)}I", *shape))
    buf.write(pv.values.astype("<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> ParameterVector:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("checkpoint is truncated")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    segments = []
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        segments.append((name, tuple(shape)))
    layout = Layout(tuple(segments))
    body = take(4 * layout.size)
    if pos != len(data):
        raise CheckpointError("trailing bytes after parameter data")
    return ParameterVector(np.frombuffer(body, dtype="<f4"), layout)
