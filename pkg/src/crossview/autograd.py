"""Reverse-mode automatic differentiation over dense float64 arrays.

A define-by-run engine: every operation on tracked tensors appends one entry
to a module-global tape, and ``backward`` replays the tape in exact reverse
recording order.  The op set is deliberately small, just what a co-attention
block and a toy box detector need.  Gradients on leaf tensors accumulate
additively until ``zero_grads`` is called; gradients on intermediate tensors
are recomputed from scratch on every ``backward``.

Everything is float64 so that central finite differences (see
``max_relative_gradient_error``) stay sharp enough for tight tolerances.
"""

from __future__ import annotations

import os
import struct
from typing import Callable, Iterable, Sequence

import numpy as np


class Tensor:
    """Dense float64 array participating in the differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "_recorded")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._recorded = False

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        # internal fast path: takes ownership of a freshly computed array
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._recorded = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _tracked(self) -> bool:
        return self.requires_grad or self._recorded

    def _accumulate(self, g: np.ndarray):
        g = np.broadcast_to(np.asarray(g, dtype=np.float64), self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class Tape:
    """Ordered record of operations; entries are (output, backward_rule)."""

    def __init__(self):
        self.entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def record(self, out: Tensor, backward_rule: Callable[[np.ndarray], None]):
        out._recorded = True
        self.entries.append((out, backward_rule))

    def __len__(self):
        return len(self.entries)


_TAPE = Tape()
_GRAD_ENABLED = True


def active_tape() -> Tape:
    return _TAPE


def reset_tape():
    """Drop all recorded operations; call once per forward pass."""
    _TAPE.entries.clear()


class no_grad:
    """Context manager that suppresses tape recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _record(out: Tensor, inputs: Iterable[Tensor], backward_rule):
    if _GRAD_ENABLED and any(t._tracked() for t in inputs):
        _TAPE.record(out, backward_rule)


def backward(loss: Tensor):
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on.

    Leaf gradients accumulate across calls; intermediate gradients are reset
    at the start of each call so repeated backwards from different scalars on
    one tape stay correct.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not _TAPE.entries:
        raise RuntimeError("backward called on an empty tape")
    for out, _ in _TAPE.entries:
        out.grad = None
    loss.grad = np.ones_like(loss.data)
    for out, rule in reversed(_TAPE.entries):
        if out.grad is not None:
            rule(out.grad)


def zero_grads(params: Iterable[Tensor] | dict):
    if isinstance(params, dict):
        params = params.values()
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor._wrap(a.data @ b.data)

    def rule(g):
        if a._tracked():
            a._accumulate(g @ b.data.T)
        if b._tracked():
            b._accumulate(a.data.T @ g)

    _record(out, (a, b), rule)
    return out


def transpose(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.ascontiguousarray(x.data.T))

    def rule(g):
        x._accumulate(g.T)

    _record(out, (x,), rule)
    return out


def _binary_check(a: Tensor, b: Tensor, name: str):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{name} shape mismatch: {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "add")
    out = Tensor._wrap(a.data + b.data)

    def rule(g):
        if a._tracked():
            a._accumulate(g)
        if b._tracked():
            b._accumulate(g)

    _record(out, (a, b), rule)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "sub")
    out = Tensor._wrap(a.data - b.data)

    def rule(g):
        if a._tracked():
            a._accumulate(g)
        if b._tracked():
            b._accumulate(-g)

    _record(out, (a, b), rule)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "mul")
    out = Tensor._wrap(a.data * b.data)

    def rule(g):
        if a._tracked():
            a._accumulate(g * b.data)
        if b._tracked():
            b._accumulate(g * a.data)

    _record(out, (a, b), rule)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "div")
    out = Tensor._wrap(a.data / b.data)

    def rule(g):
        if a._tracked():
            a._accumulate(g / b.data)
        if b._tracked():
            b._accumulate(-g * a.data / (b.data * b.data))

    _record(out, (a, b), rule)
    return out


def mul_scalar(x: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(x.data * c)

    def rule(g):
        x._accumulate(g * c)

    _record(out, (x,), rule)
    return out


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(x.data + c)

    def rule(g):
        x._accumulate(g)

    _record(out, (x,), rule)
    return out


def pow_scalar(x: Tensor, p: float) -> Tensor:
    """Elementwise x**p; for non-integer p the domain is x > 0."""
    out = Tensor._wrap(x.data ** p)

    def rule(g):
        x._accumulate(g * p * x.data ** (p - 1.0))

    _record(out, (x,), rule)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.maximum(x.data, 0.0))

    def rule(g):
        # subgradient 0 at the origin
        x._accumulate(g * (x.data > 0.0))

    _record(out, (x,), rule)
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)
    out = Tensor._wrap(y)

    def rule(g):
        x._accumulate(g * y * (1.0 - y))

    _record(out, (x,), rule)
    return out


def log(x: Tensor) -> Tensor:
    """Natural log; domain x > 0."""
    out = Tensor._wrap(np.log(x.data))

    def rule(g):
        x._accumulate(g / x.data)

    _record(out, (x,), rule)
    return out


def concat_last_axis(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_last_axis needs at least one tensor")
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=-1))
    widths = [p.data.shape[-1] for p in parts]

    def rule(g):
        offset = 0
        for p, w in zip(parts, widths):
            if p._tracked():
                p._accumulate(g[..., offset:offset + w])
            offset += w

    _record(out, tuple(parts), rule)
    return out


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor._wrap(x.data[start:stop].copy())

    def rule(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        x._accumulate(full)

    _record(out, (x,), rule)
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor._wrap(np.ascontiguousarray(x.data[..., start:stop]))

    def rule(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        x._accumulate(full)

    _record(out, (x,), rule)
    return out


def gather_rows(x: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor._wrap(x.data[idx].copy())

    def rule(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)

    _record(out, (x,), rule)
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-n bias row to every row of an m-by-n tensor."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"add_bias shape mismatch: {x.data.shape} + {b.data.shape}")
    out = Tensor._wrap(x.data + b.data[None, :])

    def rule(g):
        if x._tracked():
            x._accumulate(g)
        if b._tracked():
            b._accumulate(g.sum(axis=0))

    _record(out, (x, b), rule)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.array(x.data.sum()))

    def rule(g):
        x._accumulate(np.broadcast_to(g, x.data.shape))

    _record(out, (x,), rule)
    return out


def mean_all(x: Tensor) -> Tensor:
    return mul_scalar(sum_all(x), 1.0 / x.data.size)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2D tensor, max-subtracted for stability."""
    if x.data.ndim != 2:
        raise ValueError(f"softmax_rows expects a 2D tensor, got shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor._wrap(y)

    def rule(g):
        x._accumulate(y * (g - (g * y).sum(axis=1, keepdims=True)))

    _record(out, (x,), rule)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization (biased variance) followed by affine gamma/beta."""
    if x.data.ndim != 2 or x.data.shape[1] < 2:
        raise ValueError(f"layer_norm needs an m-by-n tensor with n >= 2, got {x.data.shape}")
    n = x.data.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor._wrap(xhat * gamma.data[None, :] + beta.data[None, :])

    def rule(g):
        if beta._tracked():
            beta._accumulate(g.sum(axis=0))
        if gamma._tracked():
            gamma._accumulate((g * xhat).sum(axis=0))
        if x._tracked():
            dxhat = g * gamma.data[None, :]
            term = dxhat - dxhat.mean(axis=1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            x._accumulate(inv * term)

    _record(out, (x, gamma, beta), rule)
    return out


# -- compositions (no new backward rules) -----------------------------------

def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max built from relu; ties route the gradient to b."""
    return add(b, relu(sub(a, b)))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    return sub(a, relu(sub(a, b)))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    lo_t = Tensor(np.full(x.data.shape, lo))
    hi_t = Tensor(np.full(x.data.shape, hi))
    return minimum(maximum(x, lo_t), hi_t)


def tanh(x: Tensor) -> Tensor:
    # tanh(z) = 2*sigmoid(2z) - 1
    return add_scalar(mul_scalar(sigmoid(mul_scalar(x, 2.0)), 2.0), -1.0)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """Per-parameter moment buffers plus the shared step counter."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray] | None,
              state: AdamState):
    """One bias-corrected Adam update, in place on ``params``.

    ``grads`` may be None, in which case each parameter's accumulated ``.grad``
    is used (missing gradients count as zero).
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def numeric_gradient(f: Callable[[], Tensor], t: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``f()`` wrt every entry of t."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_relative_gradient_error(f: Callable[[], Tensor], tensors: Sequence[Tensor],
                                step: float = 1e-5) -> float:
    """Worst relative disagreement between tape gradients and central differences.

    ``f`` must rebuild the forward pass from the given leaf tensors on every
    call.  The relative error per entry is |ad - fd| / (|fd| + 1e-6).
    """
    reset_tape()
    zero_grads(tensors)
    loss = f()
    backward(loss)
    ad = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, ad):
        fd = numeric_gradient(f, t, step)
        rel = np.abs(a - fd) / (np.abs(fd) + 1e-6)
        if rel.size:
            worst = max(worst, float(rel.max()))
    reset_tape()
    return worst


# ---------------------------------------------------------------------------
# Parameter checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"XVCKPT01"


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path: str, arrays: dict[str, np.ndarray]):
    """Write a flat name -> array container; layout in docs/formats.md.

    The write is atomic: a temp file in the same directory is renamed over
    the target only once fully written.
    """
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        enc = name.encode("utf-8")
        blob += struct.pack("<H", len(enc))
        blob += enc
        blob += struct.pack("<B", a.ndim)
        for dim in a.shape:
            blob += struct.pack("<I", dim)
        blob += a.tobytes(order="C")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic in {path!r}")
    off = 8
    try:
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = []
            for _ in range(ndim):
                (dim,) = struct.unpack_from("<I", blob, off)
                off += 4
                shape.append(dim)
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).copy()
            off += 8 * n
            out[name] = arr.reshape(shape)
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated checkpoint {path!r}") from exc
    if off != len(blob):
        raise CheckpointFormatError(f"trailing bytes in checkpoint {path!r}")
    return out
