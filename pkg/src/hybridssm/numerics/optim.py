"""Adam with bias correction, operating in place on parameter tensors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ACCUM_DTYPE, Tensor


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    if not state.m:
        state.m = [np.zeros(p.shape, ACCUM_DTYPE) for p in params]
        state.v = [np.zeros(p.shape, ACCUM_DTYPE) for p in params]
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} vs param {p.shape}")
        g = g.astype(ACCUM_DTYPE, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data.astype(ACCUM_DTYPE) - update).astype(p.data.dtype)
    return state


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g.astype(ACCUM_DTYPE) ** 2).sum()) for g in grads)))
    if max_norm > 0 and total > max_norm:
        k = max_norm / (total + 1e-12)
        for g in grads:
            g *= k
    return total
