"""Dense tensors with tape-based reverse-mode differentiation.

Storage is 32-bit; every primitive upcasts to the compute dtype (64-bit by
default), evaluates, and rounds the result back to the storage dtype. A
primitive only records itself when a :class:`Tape` is active and at least one
input is tracked, so inference paths pay no bookkeeping cost.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

STORAGE_DTYPE = np.float32
ACCUM_DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class _State(threading.local):
    def __init__(self) -> None:
        self.tapes: list[Tape] = []
        self.counters: list[FlopCounter] = []
        self.storage = STORAGE_DTYPE
        self.compute = ACCUM_DTYPE


_state = _State()


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the storage dtype (e.g. ``np.float64`` for gradient checks)."""
    prev = _state.storage
    _state.storage = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.storage = prev


def storage_dtype():
    return _state.storage


@contextmanager
def compute_precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype primitives evaluate and accumulate in.

    The default is 64-bit; training loops may opt into 32-bit for throughput.
    """
    prev = _state.compute
    _state.compute = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.compute = prev


def compute_dtype():
    return _state.compute


class Tensor:
    """An array plus the flag telling the tape whether gradients flow into it."""

    __slots__ = ("data", "tracked", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_state.storage)
        self.tracked = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, reciprocal(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager around the forward pass, then call
    :meth:`gradient`. Recording is per thread.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Replay the tape backward from scalar ``loss``.

        Returns one storage-dtype array per entry of ``params``; parameters the
        loss never touched get zeros.
        """
        if loss.data.size != 1:
            raise ValueError("gradient() needs a scalar loss")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, _state.compute)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.out), None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.vjp(g_out)):
                if g is None or not inp.tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        dtype = _state.storage
        return [
            grads[id(p)].astype(dtype) if id(p) in grads else np.zeros(p.shape, dtype)
            for p in params
        ]


class FlopCounter:
    """Accumulates FLOPs reported by matmul (2mnk) and the selective scan."""

    def __init__(self) -> None:
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, flops: int) -> None:
        self.total += flops
        self.by_op[op] = self.by_op.get(op, 0) + flops


@contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    _state.counters.append(counter)
    try:
        yield counter
    finally:
        _state.counters.remove(counter)


def report_flops(op: str, flops: int) -> None:
    for c in _state.counters:
        c.add(op, int(flops))


def _f64(x: Tensor) -> np.ndarray:
    return x.data.astype(_state.compute, copy=False)


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    total = float(np.sum(value, dtype=_state.compute)) if value.size else 0.0
    if not math.isfinite(total):
        raise NonFiniteError(f"non-finite value produced (sum={total})")
    out = Tensor(value)
    if _state.tapes and any(t.tracked for t in inputs):
        out.tracked = True
        _state.tapes[-1].nodes.append(_Node(out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    av, bv = _f64(a), _f64(b)
    out = np.matmul(av, bv)
    report_flops("matmul", 2 * out.size * a.shape[-1])

    if b.ndim == 2 and a.ndim > 2:
        # activations @ weight: fold the leading axes into one GEMM
        a2 = av.reshape(-1, a.shape[-1])

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bv.T).reshape(a.shape), a2.T @ g2

        return _emit(out, (a, b), vjp)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(out, (a, b), vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _f64(a) + _f64(b)
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _f64(a) - _f64(b)
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = _f64(a), _f64(b)
    return _emit(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit(_f64(a) * c, (a,), lambda g: (g * c,))


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    r = 1.0 / _f64(a)
    return _emit(r, (a,), lambda g: (-g * r * r,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(_f64(a))
    return _emit(out, (a,), lambda g: (g * out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(_f64(a))
    return _emit(s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    av = _f64(a)
    out = np.logaddexp(0.0, av)
    return _emit(out, (a,), lambda g: (g * _sigmoid(av),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    av = _f64(a)
    s = _sigmoid(av)
    return _emit(av * s, (a,), lambda g: (g * (s + av * s * (1.0 - s)),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = _f64(a)
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _emit(out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _emit(_f64(a).reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(_f64(a), axes), (a,), lambda g: (np.transpose(g, inv),))


def repeat(a, n: int, axis: int) -> Tensor:
    """``np.repeat`` along ``axis``; used to share kv heads across query groups."""
    a = as_tensor(a)
    if n == 1:
        return a
    axis = axis % a.ndim

    def vjp(g):
        shp = g.shape[:axis] + (a.shape[axis], n) + g.shape[axis + 1 :]
        return (g.reshape(shp).sum(axis=axis + 1),)

    return _emit(np.repeat(_f64(a), n, axis=axis), (a,), vjp)


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros(a.shape, _state.compute)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(_f64(a)[idx], (a,), vjp)


def embed(table, ids) -> Tensor:
    """Row gather ``table[ids]``; ``ids`` is an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("token id outside the embedding table")

    def vjp(g):
        full = np.zeros(table.shape, _state.compute)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit(_f64(table)[ids], (table,), vjp)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(_f64(a), axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(np.asarray(out), (a,), vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / float(n))


def causal_mask(lq: int, lk: int | None = None) -> np.ndarray:
    """Boolean mask m[t, s] = (s <= t), aligned so the last query sees every key."""
    lk = lq if lk is None else lk
    offset = lk - lq
    return np.arange(lk)[None, :] <= (np.arange(lq)[:, None] + offset)


def causal_softmax(scores) -> Tensor:
    """Softmax over the last axis with future keys masked out.

    Row max is subtracted before exponentiation and sums accumulate in 64 bits.
    """
    scores = as_tensor(scores)
    lq, lk = scores.shape[-2:]
    mask = causal_mask(lq, lk)
    s = np.where(mask, _f64(scores), -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(p, (scores,), vjp)


def apply_causal_mask(scores) -> Tensor:
    """Zero every entry with key index beyond the query index (no softmax)."""
    scores = as_tensor(scores)
    mask = causal_mask(*scores.shape[-2:]).astype(_state.compute)
    return _emit(_f64(scores) * mask, (scores,), lambda g: (g * mask,))


def rmsnorm(x, gain, eps: float = 1e-5) -> Tensor:
    x, gain = as_tensor(x), as_tensor(gain)
    xv, gv = _f64(x), _f64(gain)
    inv = 1.0 / np.sqrt((xv * xv).mean(axis=-1, keepdims=True) + eps)
    xhat = xv * inv
    out = xhat * gv

    def vjp(g):
        gg = _unbroadcast(g * xhat, gain.shape)
        gx_hat = g * gv
        n = xv.shape[-1]
        gx = inv * (gx_hat - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gg

    return _emit(out, (x, gain), vjp)


def shift_right(x, k: int, axis: int = 1) -> Tensor:
    """Delay a sequence by ``k`` steps along ``axis``, filling with zeros."""
    x = as_tensor(x)
    if k == 0:
        return x
    axis = axis % x.ndim
    xv = _f64(x)
    out = np.zeros_like(xv)
    src = [slice(None)] * x.ndim
    dst = [slice(None)] * x.ndim
    src[axis] = slice(0, x.shape[axis] - k)
    dst[axis] = slice(k, None)
    out[tuple(dst)] = xv[tuple(src)]

    def vjp(g):
        gx = np.zeros_like(g)
        gx[tuple(src)] = g[tuple(dst)]
        return (gx,)

    return _emit(out, (x,), vjp)


def selective_scan(abar, bbar, x, c, h0: np.ndarray | None = None) -> Tensor:
    """Run ``h_t = abar_t * h_{t-1} + bbar_t (outer) x_t`` and read ``y_t = h_t c_t``.

    Shapes: ``abar`` and ``x`` are (B, L, H, P); ``bbar`` and ``c`` are
    (B, L, H, N). The state per head is P x N. Returns y of shape (B, L, H, P).
    The loop runs over L; the backward pass is the reversed recurrence.
    """
    abar, bbar, x, c = map(as_tensor, (abar, bbar, x, c))
    av, bv, xv, cv = map(_f64, (abar, bbar, x, c))
    bsz, length, heads, p = xv.shape
    n = bv.shape[-1]
    if av.shape != xv.shape or bv.shape != cv.shape or bv.shape[:3] != xv.shape[:3]:
        raise ValueError("selective_scan shape mismatch")
    report_flops("scan", 6 * bsz * length * heads * p * n)
    hs = np.empty((length + 1, bsz, heads, p, n), _state.compute)
    hs[0] = 0.0 if h0 is None else h0
    y = np.empty_like(xv)
    for t in range(length):
        hs[t + 1] = av[:, t, :, :, None] * hs[t] + xv[:, t, :, :, None] * bv[:, t, :, None, :]
        y[:, t] = np.einsum("bhpn,bhn->bhp", hs[t + 1], cv[:, t])

    def vjp(gy):
        ga = np.empty_like(av)
        gb = np.empty_like(bv)
        gx = np.empty_like(xv)
        gc = np.empty_like(cv)
        carry = np.zeros((bsz, heads, p, n), _state.compute)
        for t in range(length - 1, -1, -1):
            gc[:, t] = np.einsum("bhpn,bhp->bhn", hs[t + 1], gy[:, t])
            carry = carry + gy[:, t, :, :, None] * cv[:, t, :, None, :]
            ga[:, t] = (carry * hs[t]).sum(axis=-1)
            gb[:, t] = np.einsum("bhpn,bhp->bhn", carry, xv[:, t])
            gx[:, t] = np.einsum("bhpn,bhn->bhp", carry, bv[:, t])
            carry = carry * av[:, t, :, :, None]
        return ga, gb, gx, gc

    return _emit(y, (abar, bbar, x, c), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def rel_err(actual, expected) -> float:
    """Max absolute deviation normalised by the largest reference magnitude."""
    a = np.asarray(actual.data if isinstance(actual, Tensor) else actual, ACCUM_DTYPE)
    e = np.asarray(expected.data if isinstance(expected, Tensor) else expected, ACCUM_DTYPE)
    if a.shape != e.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {e.shape}")
    denom = max(float(np.abs(e).max(initial=0.0)), 1e-30)
    return float(np.abs(a - e).max(initial=0.0)) / denom
