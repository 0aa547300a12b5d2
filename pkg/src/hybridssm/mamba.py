"""Selective state-space layer (Mamba-style) with recurrent, parallel and decode paths.

Per head ``j`` and inner channel ``c``::

    h_t[c, :] = exp(delta_t[j] * A[c]) * h_{t-1}[c, :] + delta_t[j] * B_t[j, :] * x_t[c]
    y_t[c]    = out_scale * <C_t[j, :], h_t[c, :]> + D[c] * x_t[c]

``x``, ``B``, ``C`` and ``delta`` are projected from the layer input. ``x`` and
``B`` are shared by the query heads of a group (like V and K under GQA), so a
layer built from a GQA donor keeps ``h_kv`` x/B projections but ``h`` states.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import tensor as T
from .numerics.tensor import Tensor, as_tensor

# silu(b) == 1, so a zero-weight gate starts at exactly one
GATE_BIAS_UNIT = 1.2784645427610738


def delta_bias_for(delta: float) -> float:
    """Inverse softplus: the bias giving ``softplus(bias) == delta``."""
    return float(np.log(np.expm1(delta)))


@dataclass
class MambaLayerWeights:
    W_x: Tensor  # d x (h_kv*d_v)
    W_B: Tensor  # d x (h_kv*N)
    W_C: Tensor  # d x (h*N)
    W_delta: Tensor  # d x h
    b_delta: Tensor  # h
    A_log: Tensor  # h*d_v, A = -exp(A_log)
    D: Tensor  # h*d_v
    W_O: Tensor  # (h*d_v) x d
    h: int
    h_kv: int
    d_v: int
    N: int
    out_scale: float = 1.0
    W_gate: Tensor | None = None  # d x (h*d_v)
    b_gate: Tensor | None = None
    conv: Tensor | None = None  # (h_kv*d_v) x k, tap 0 = current token

    def __post_init__(self) -> None:
        if self.h % self.h_kv:
            raise ValueError(f"h={self.h} not divisible by h_kv={self.h_kv}")
        d = self.W_x.shape[0]
        hv = self.h * self.d_v
        expected = {
            "W_x": (d, self.h_kv * self.d_v),
            "W_B": (d, self.h_kv * self.N),
            "W_C": (d, self.h * self.N),
            "W_delta": (d, self.h),
            "b_delta": (self.h,),
            "A_log": (hv,),
            "D": (hv,),
            "W_O": (hv, d),
        }
        if self.W_gate is not None:
            expected["W_gate"] = (d, hv)
            expected["b_gate"] = (hv,)
        if self.conv is not None:
            expected["conv"] = (self.h_kv * self.d_v, self.conv.shape[1])
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def d(self) -> int:
        return self.W_x.shape[0]

    @property
    def group(self) -> int:
        return self.h // self.h_kv

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.A_log.data.astype(T.ACCUM_DTYPE))

    def params(self) -> dict[str, Tensor]:
        names = ["W_x", "W_B", "W_C", "W_delta", "b_delta", "A_log", "D", "W_O"]
        if self.W_gate is not None:
            names += ["W_gate", "b_gate"]
        if self.conv is not None:
            names.append("conv")
        return {n: getattr(self, n) for n in names}


def s4d_real_A(h: int, d_v: int, N: int) -> np.ndarray:
    """Channel ``c`` of every head gets ``-(1 + c mod N)``."""
    return -np.tile(1.0 + np.arange(d_v) % N, h)


def init_mamba(
    rng: np.random.Generator,
    d: int,
    h: int,
    h_kv: int,
    d_v: int,
    N: int,
    scheme: str = "xavier",
    delta_init: float = 0.05,
    gate: bool = False,
    conv_kernel: int = 0,
    out_std_scale: float = 1.0,
) -> MambaLayerWeights:
    """Randomly initialised layer (no donor)."""

    def w(rows, cols, s=1.0):
        std = {"xavier": math.sqrt(2.0 / (rows + cols)), "kaiming": math.sqrt(2.0 / rows)}[scheme]
        return Tensor(rng.normal(0.0, s * std, (rows, cols)), requires_grad=True)

    weights = MambaLayerWeights(
        W_x=w(d, h_kv * d_v),
        W_B=w(d, h_kv * N),
        W_C=w(d, h * N),
        W_delta=w(d, h, 0.1),
        b_delta=Tensor(np.full(h, delta_bias_for(delta_init)), requires_grad=True),
        A_log=Tensor(np.log(-s4d_real_A(h, d_v, N)), requires_grad=True),
        D=Tensor(np.ones(h * d_v), requires_grad=True),
        W_O=w(h * d_v, d, out_std_scale),
        h=h,
        h_kv=h_kv,
        d_v=d_v,
        N=N,
        out_scale=1.0 / math.sqrt(N),
    )
    add_block_extras(weights, gate=gate, conv_kernel=conv_kernel)
    return weights


def add_block_extras(w: MambaLayerWeights, gate: bool, conv_kernel: int) -> None:
    """Attach the optional gate and depthwise conv at function-preserving values."""
    hv = w.h * w.d_v
    if gate:
        w.W_gate = Tensor(np.zeros((w.d, hv)), requires_grad=True)
        w.b_gate = Tensor(np.full(hv, GATE_BIAS_UNIT), requires_grad=True)
    if conv_kernel:
        k = np.zeros((w.h_kv * w.d_v, conv_kernel))
        k[:, 0] = 1.0
        w.conv = Tensor(k, requires_grad=True)


def discretize(A, B_t, delta_t) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order hold for the decay, Euler for the input: ``(exp(delta*A), delta*B)``.

    ``delta_t`` broadcasts against both ``A`` and ``B_t``.
    """
    delta_t = np.asarray(delta_t, T.ACCUM_DTYPE)
    if np.any(delta_t <= 0):
        raise ValueError("delta must be positive")
    A = np.asarray(A, T.ACCUM_DTYPE)
    return np.exp(delta_t * A), delta_t * np.asarray(B_t, T.ACCUM_DTYPE)


def _batched(x) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ValueError(f"expected (B, L, d) or (L, d), got {x.shape}")
    return x, False


def _conv(w: MambaLayerWeights, xs: Tensor) -> Tensor:
    """Causal depthwise conv over L of a (B, L, C) stream."""
    out = None
    for j in range(w.conv.shape[1]):
        term = T.mul(T.shift_right(xs, j, axis=1), T.index(w.conv, (slice(None), j)))
        out = term if out is None else T.add(out, term)
    return out


@dataclass
class _Streams:
    xs: Tensor  # B, L, h, d_v  (group-expanded)
    Bs: Tensor  # B, L, h, N
    Cs: Tensor  # B, L, h, N
    delta: Tensor  # B, L, h


def _project(w: MambaLayerWeights, u: Tensor) -> _Streams:
    if u.shape[-1] != w.d:
        raise ValueError(f"input dim {u.shape[-1]} != layer dim {w.d}")
    b, l, _ = u.shape
    xs = T.matmul(u, w.W_x)
    if w.conv is not None:
        xs = _conv(w, xs)
    xs = T.repeat(T.reshape(xs, (b, l, w.h_kv, w.d_v)), w.group, axis=2)
    Bs = T.repeat(T.reshape(T.matmul(u, w.W_B), (b, l, w.h_kv, w.N)), w.group, axis=2)
    Cs = T.reshape(T.matmul(u, w.W_C), (b, l, w.h, w.N))
    delta = T.softplus(T.add(T.matmul(u, w.W_delta), w.b_delta))
    return _Streams(xs, Bs, Cs, delta)


def _discretized(w: MambaLayerWeights, s: _Streams) -> tuple[Tensor, Tensor]:
    b, l, _ = s.delta.shape
    d4 = T.reshape(s.delta, (b, l, w.h, 1))
    A = T.reshape(T.scale(T.exp(w.A_log), -1.0), (w.h, w.d_v))
    return T.exp(T.mul(d4, A)), T.mul(d4, s.Bs)


def _finish(w: MambaLayerWeights, u: Tensor, s: _Streams, y: Tensor, skip: bool = True) -> Tensor:
    b, l = y.shape[:2]
    y = T.scale(y, w.out_scale)
    if skip:
        y = T.add(y, T.mul(s.xs, T.reshape(w.D, (w.h, w.d_v))))
    y = T.reshape(y, (b, l, w.h * w.d_v))
    if w.W_gate is not None:
        y = T.mul(y, T.silu(T.add(T.matmul(u, w.W_gate), w.b_gate)))
    return T.matmul(y, w.W_O)


def ssm_scan_recurrent(w: MambaLayerWeights, x) -> Tensor:
    """Full layer evaluated with the sequential (differentiable) scan."""
    u, squeeze = _batched(x)
    s = _project(w, u)
    abar, bbar = _discretized(w, s)
    y = _finish(w, u, s, T.selective_scan(abar, bbar, s.xs, s.Cs))
    return T.reshape(y, y.shape[1:]) if squeeze else y


def combine(later: tuple, earlier: tuple) -> tuple:
    """Compose two affine maps ``h -> a h + b``: apply ``earlier`` then ``later``."""
    a2, b2 = later
    a1, b1 = earlier
    return a2 * a1, a2 * b1 + b2


def associative_scan(a: np.ndarray, b: np.ndarray, axis: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive scan of (a, b) pairs under :func:`combine` by recursive doubling.

    After the pass with offset ``k`` each element holds the composition of the
    ``2k`` most recent maps, so ``ceil(log2 L)`` vectorised passes suffice.
    """
    a = np.moveaxis(np.array(a, T.ACCUM_DTYPE), axis, 0)
    b = np.moveaxis(np.array(b, T.ACCUM_DTYPE), axis, 0)
    length = a.shape[0]
    k = 1
    while k < length:
        na, nb = combine((a[k:], b[k:]), (a[:-k], b[:-k]))
        a = np.concatenate([a[:k], na])
        b = np.concatenate([b[:k], nb])
        k *= 2
    return np.moveaxis(a, 0, axis), np.moveaxis(b, 0, axis)


def ssm_scan_parallel(w: MambaLayerWeights, x) -> Tensor:
    """Same outputs as :func:`ssm_scan_recurrent` via a parallel associative scan.

    Forward only; nothing is recorded on the tape.
    """
    u, squeeze = _batched(x)
    s = _project(w, u)
    abar, bbar = _discretized(w, s)
    av = abar.data.astype(T.ACCUM_DTYPE)[..., None]  # B,L,h,P,1
    bx = s.xs.data.astype(T.ACCUM_DTYPE)[..., None] * bbar.data.astype(T.ACCUM_DTYPE)[..., None, :]
    _, hs = associative_scan(np.broadcast_to(av, bx.shape), bx, axis=1)
    T.report_flops("scan", 6 * bx.size)
    y = np.einsum("blhpn,blhn->blhp", hs, s.Cs.data.astype(T.ACCUM_DTYPE))
    out = _finish(w, u, s, Tensor(y))
    return T.reshape(out, out.shape[1:]) if squeeze else out


def mamba_forward_emulation(w: MambaLayerWeights, x) -> Tensor:
    """Discretisation bypassed (decay 1, input matrix B), no skip term.

    For weights transferred from an attention layer this reproduces the donor's
    masked linear attention exactly.
    """
    u, squeeze = _batched(x)
    s = _project(w, u)
    ones = Tensor(np.ones(s.xs.shape))
    y = _finish(w, u, s, T.selective_scan(ones, s.Bs, s.xs, s.Cs), skip=False)
    return T.reshape(y, y.shape[1:]) if squeeze else y


@dataclass
class SSMState:
    """Decode state: (B, h, d_v, N) hidden state plus the conv tail when enabled."""

    h: np.ndarray
    conv_buf: np.ndarray | None = None  # B, k-1, h_kv*d_v (most recent first)

    @classmethod
    def zeros(cls, w: MambaLayerWeights, batch: int = 1) -> "SSMState":
        dt = T.storage_dtype()
        buf = None
        if w.conv is not None and w.conv.shape[1] > 1:
            buf = np.zeros((batch, w.conv.shape[1] - 1, w.h_kv * w.d_v), dt)
        return cls(np.zeros((batch, w.h, w.d_v, w.N), dt), buf)

    @property
    def nbytes(self) -> int:
        return self.h.nbytes + (0 if self.conv_buf is None else self.conv_buf.nbytes)


def mamba_step(w: MambaLayerWeights, state: SSMState, x_t) -> tuple[Tensor, SSMState]:
    """Advance one token; a sequence of steps equals :func:`ssm_scan_recurrent`."""
    xt = as_tensor(x_t)
    single = xt.ndim == 1
    u = T.reshape(xt, (1 if single else xt.shape[0], 1, w.d))
    b = u.shape[0]
    if state.h.shape != (b, w.h, w.d_v, w.N):
        raise ValueError("state/layer shape mismatch")
    xs_raw = T.matmul(u, w.W_x)  # B,1,h_kv*d_v
    if w.conv is not None:
        k = w.conv.data.astype(T.ACCUM_DTYPE)
        cur = xs_raw.data.astype(T.ACCUM_DTYPE)[:, 0]
        mixed = cur * k[:, 0]
        if state.conv_buf is not None:
            mixed = mixed + np.einsum("bjc,cj->bc", state.conv_buf.astype(T.ACCUM_DTYPE), k[:, 1:])
            state.conv_buf = np.concatenate(
                [cur[:, None].astype(state.conv_buf.dtype), state.conv_buf[:, :-1]], axis=1
            )
        xs_raw = Tensor(mixed[:, None])
    xs = np.repeat(xs_raw.data.astype(T.ACCUM_DTYPE).reshape(b, w.h_kv, w.d_v), w.group, axis=1)
    Bs = np.repeat(T.matmul(u, w.W_B).data.astype(T.ACCUM_DTYPE).reshape(b, w.h_kv, w.N), w.group, axis=1)
    Cs = T.matmul(u, w.W_C).data.astype(T.ACCUM_DTYPE).reshape(b, w.h, w.N)
    z = T.matmul(u, w.W_delta).data.astype(T.ACCUM_DTYPE).reshape(b, w.h) + w.b_delta.data
    delta = np.logaddexp(0.0, z)[:, :, None]
    abar, bbar = discretize(w.A.reshape(w.h, w.d_v), Bs, delta)  # (b,h,d_v), (b,h,N)
    T.report_flops("scan", 6 * b * w.h * w.d_v * w.N)
    hnew = abar[..., None] * state.h.astype(T.ACCUM_DTYPE) + xs[..., None] * bbar[:, :, None, :]
    state.h = hnew.astype(state.h.dtype)
    y = np.einsum("bhpn,bhn->bhp", hnew, Cs) * w.out_scale
    y = y + xs * w.D.data.reshape(w.h, w.d_v)
    y = y.reshape(b, 1, w.h * w.d_v)
    if w.W_gate is not None:
        y = y * T.silu(T.add(T.matmul(u, w.W_gate), w.b_gate)).data
    out = T.matmul(Tensor(y), w.W_O)
    out = T.reshape(out, (w.d,) if single else (b, w.d))
    return out, state
