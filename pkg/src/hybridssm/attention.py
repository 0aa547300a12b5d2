"""Causal multi-head / grouped-query attention and its linearised forms.

Weights are stored input-major: ``W_Q`` is ``d x (h*d_k)`` with head ``i``
occupying columns ``i*d_k:(i+1)*d_k``. Sequences are ``(B, L, d)``; 2-D inputs
are treated as a single sequence.

In the linearised forms the key-value product ``K_s V_s`` is the outer product
``K_s V_s^T`` (a ``d_k x d_v`` matrix per head), which is the only reading
under which the state recursion composes dimensionally.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import tensor as T
from .numerics.tensor import Tensor, as_tensor


@dataclass
class AttentionLayerWeights:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor
    h: int
    h_kv: int
    d_k: int
    d_v: int

    def __post_init__(self) -> None:
        if self.h % self.h_kv:
            raise ValueError(f"h={self.h} not divisible by h_kv={self.h_kv}")
        d = self.W_Q.shape[0]
        expected = {
            "W_Q": (d, self.h * self.d_k),
            "W_K": (d, self.h_kv * self.d_k),
            "W_V": (d, self.h_kv * self.d_v),
            "W_O": (self.h * self.d_v, d),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]

    @property
    def group(self) -> int:
        return self.h // self.h_kv

    def params(self) -> dict[str, Tensor]:
        return {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V, "W_O": self.W_O}


def init_attention(
    rng: np.random.Generator,
    d: int,
    h: int,
    h_kv: int,
    d_k: int,
    d_v: int | None = None,
    out_std_scale: float = 1.0,
) -> AttentionLayerWeights:
    d_v = d_k if d_v is None else d_v

    def w(rows, cols, s=1.0):
        return Tensor(rng.normal(0.0, s / math.sqrt(rows), (rows, cols)), requires_grad=True)

    return AttentionLayerWeights(
        W_Q=w(d, h * d_k),
        W_K=w(d, h_kv * d_k),
        W_V=w(d, h_kv * d_v),
        W_O=w(h * d_v, d, out_std_scale),
        h=h,
        h_kv=h_kv,
        d_k=d_k,
        d_v=d_v,
    )


def _batched(x) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ValueError(f"expected (B, L, d) or (L, d), got {x.shape}")
    return x, False


def _heads(x: Tensor, n: int, dh: int) -> Tensor:
    b, l, _ = x.shape
    return T.transpose(T.reshape(x, (b, l, n, dh)), (0, 2, 1, 3))


def _merge(y: Tensor) -> Tensor:
    b, n, l, dh = y.shape
    return T.reshape(T.transpose(y, (0, 2, 1, 3)), (b, l, n * dh))


def _qkv(w: AttentionLayerWeights, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    if x.shape[-1] != w.d:
        raise ValueError(f"input dim {x.shape[-1]} != layer dim {w.d}")
    q = _heads(T.matmul(x, w.W_Q), w.h, w.d_k)
    k = T.repeat(_heads(T.matmul(x, w.W_K), w.h_kv, w.d_k), w.group, axis=1)
    v = T.repeat(_heads(T.matmul(x, w.W_V), w.h_kv, w.d_v), w.group, axis=1)
    return q, k, v


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return T.reshape(y, y.shape[1:]) if squeeze else y


def attention_forward(w: AttentionLayerWeights, x) -> Tensor:
    """Causal softmax attention, heads concatenated and projected by ``W_O``."""
    x, squeeze = _batched(x)
    q, k, v = _qkv(w, x)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(w.d_k))
    y = T.matmul(T.causal_softmax(scores), v)
    return _unbatch(T.matmul(_merge(y), w.W_O), squeeze)


def linear_attention_direct(w: AttentionLayerWeights, x) -> Tensor:
    """Softmax removed, causal mask kept: ``y_t = Q_t^T (sum_{s<=t} K_s V_s^T) / sqrt(d_k)``.

    Evaluated as the masked quadratic form ``(mask * Q K^T) V``.
    """
    x, squeeze = _batched(x)
    q, k, v = _qkv(w, x)
    scores = T.apply_causal_mask(T.matmul(q, T.transpose(k, (0, 1, 3, 2))))
    y = T.scale(T.matmul(scores, v), 1.0 / math.sqrt(w.d_k))
    return _unbatch(T.matmul(_merge(y), w.W_O), squeeze)


class LinearAttentionState:
    """Per-kv-head running sum of ``K_s V_s^T``; its size never depends on L."""

    def __init__(self, w: AttentionLayerWeights, batch: int = 1):
        self.S = np.zeros((batch, w.h_kv, w.d_k, w.d_v), T.ACCUM_DTYPE)
        self.t = 0

    @property
    def nbytes(self) -> int:
        return self.S.nbytes


def linear_attention_step(w: AttentionLayerWeights, state: LinearAttentionState, x_t) -> np.ndarray:
    """One step of ``S_t = m_{t-1,t} S_{t-1} + K_t V_t^T`` (m = 1 inside the causal range)."""
    xt = np.atleast_2d(np.asarray(as_tensor(x_t).data, T.ACCUM_DTYPE))
    b = xt.shape[0]
    if state.S.shape[0] != b or xt.shape[1] != w.d:
        raise ValueError("state/input shape mismatch")
    q = (xt @ w.W_Q.data.astype(T.ACCUM_DTYPE)).reshape(b, w.h_kv, w.group, w.d_k)
    k = (xt @ w.W_K.data.astype(T.ACCUM_DTYPE)).reshape(b, w.h_kv, w.d_k)
    v = (xt @ w.W_V.data.astype(T.ACCUM_DTYPE)).reshape(b, w.h_kv, w.d_v)
    decay = 1.0 if state.t == 0 else float(causal_mask_entry(state.t - 1, state.t))
    state.S = decay * state.S + k[..., :, None] * v[..., None, :]
    state.t += 1
    y = np.einsum("bkgi,bkij->bkgj", q, state.S) / math.sqrt(w.d_k)
    return y.reshape(b, w.h * w.d_v) @ w.W_O.data.astype(T.ACCUM_DTYPE)


def linear_attention_recurrent(w: AttentionLayerWeights, x) -> Tensor:
    """Recurrent evaluation of the linearised attention with a constant-size state."""
    x, squeeze = _batched(x)
    b, length, _ = x.shape
    state = LinearAttentionState(w, b)
    out = np.stack([linear_attention_step(w, state, x.data[:, t]) for t in range(length)], axis=1)
    return _unbatch(Tensor(out), squeeze)


def causal_mask_entry(s: int, t: int) -> int:
    """m_{s,t}: 1 when key position ``s`` is visible from query position ``t``."""
    return 1 if s <= t else 0


@dataclass
class KVCache:
    """Keys (B, L, h_kv, d_k) and values (B, L, h_kv, d_v) of one layer."""

    keys: np.ndarray
    values: np.ndarray

    @classmethod
    def empty(cls, w: AttentionLayerWeights, batch: int = 1) -> "KVCache":
        dt = T.storage_dtype()
        return cls(
            np.zeros((batch, 0, w.h_kv, w.d_k), dt),
            np.zeros((batch, 0, w.h_kv, w.d_v), dt),
        )

    @property
    def length(self) -> int:
        return self.keys.shape[1]

    @property
    def nbytes(self) -> int:
        return self.keys.nbytes + self.values.nbytes


def attention_step(w: AttentionLayerWeights, cache: KVCache, x_t) -> tuple[Tensor, KVCache]:
    """Incremental decode: append this token's K/V and attend over the cache."""
    xt = as_tensor(x_t)
    single = xt.ndim == 1
    if single:
        xt = T.reshape(xt, (1, xt.shape[0]))
    b = xt.shape[0]
    if cache.keys.shape[0] != b or cache.keys.shape[2:] != (w.h_kv, w.d_k) or xt.shape[1] != w.d:
        raise ValueError("cache/layer shape mismatch")
    q = T.reshape(T.matmul(xt, w.W_Q), (b, w.h, 1, w.d_k))
    k = T.matmul(xt, w.W_K).data.reshape(b, 1, w.h_kv, w.d_k)
    v = T.matmul(xt, w.W_V).data.reshape(b, 1, w.h_kv, w.d_v)
    cache.keys = np.concatenate([cache.keys, k.astype(cache.keys.dtype)], axis=1)
    cache.values = np.concatenate([cache.values, v.astype(cache.values.dtype)], axis=1)
    keys = np.repeat(cache.keys.transpose(0, 2, 3, 1), w.group, axis=1)  # B,h,d_k,L
    vals = np.repeat(cache.values.transpose(0, 2, 1, 3), w.group, axis=1)  # B,h,L,d_v
    scores = T.scale(T.matmul(q, keys), 1.0 / math.sqrt(w.d_k))
    y = T.matmul(T.causal_softmax(scores), vals)  # last query sees every key
    out = T.matmul(T.reshape(y, (b, w.h * w.d_v)), w.W_O)
    return (T.reshape(out, (w.d,)) if single else out), cache
