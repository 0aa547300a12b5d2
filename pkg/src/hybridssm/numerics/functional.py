"""Row softmax and the scalar objectives used for training and distillation."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, _emit, _f64, as_tensor, compute_dtype


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_rows(m) -> Tensor:
    """Softmax over the last axis, stabilised by row-max subtraction."""
    m = as_tensor(m)
    p = np.exp(_log_softmax(_f64(m)))

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(p, (m,), vjp)


def _position_weights(shape: tuple[int, ...], mask) -> tuple[np.ndarray, float]:
    if mask is None:
        w = np.ones(shape, compute_dtype())
    else:
        w = np.asarray(mask, compute_dtype())
        if w.shape != shape:
            raise ValueError(f"mask shape {w.shape} does not match {shape}")
    count = float(w.sum())
    if count <= 0:
        raise ValueError("mask selects no positions")
    return w, count


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``mask`` (same shape as ``targets``) restricts the mean to scored positions.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"targets shape {targets.shape} vs logits {logits.shape}")
    w, count = _position_weights(targets.shape, mask)
    scored = w > 0
    if scored.any() and (targets[scored].min() < 0 or targets[scored].max() >= vocab):
        raise ValueError("target id outside the vocabulary")
    safe = np.where(scored, targets, 0)
    logp = _log_softmax(_f64(logits))
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / count

    def vjp(g):
        grad = np.exp(logp)
        np.put_along_axis(
            grad, safe[..., None], np.take_along_axis(grad, safe[..., None], -1) - 1.0, -1
        )
        return (grad * (w / count)[..., None] * g,)

    return _emit(np.asarray(loss), (logits,), vjp)


def _check_distribution(p: np.ndarray, name: str) -> None:
    if np.any(p < 0):
        raise ValueError(f"{name} has negative entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError(f"{name} does not sum to 1")


def skew_kl(p, q, alpha: float) -> Tensor:
    """KL(p || alpha*p + (1-alpha)*q) over the last axis, averaged over rows.

    Both arguments are probability vectors; the gradient flows into ``q``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    p_arr = np.asarray(p.data if isinstance(p, Tensor) else p, compute_dtype())
    q = as_tensor(q)
    qv = _f64(q)
    _check_distribution(p_arr, "p")
    _check_distribution(qv, "q")
    mix = alpha * p_arr + (1.0 - alpha) * qv
    pos = p_arr > 0
    rows = int(np.prod(p_arr.shape[:-1])) if p_arr.ndim > 1 else 1
    terms = np.where(pos, p_arr * (np.log(np.where(pos, p_arr, 1.0)) - np.log(np.where(pos, mix, 1.0))), 0.0)
    value = terms.sum() / rows

    def vjp(g):
        gq = np.where(pos, -(1.0 - alpha) * p_arr / np.where(pos, mix, 1.0), 0.0)
        return (gq * g / rows,)

    return _emit(np.asarray(value), (q,), vjp)


def skew_kl_logits(teacher_probs, student_logits, alpha: float, mask=None) -> Tensor:
    """Skew KL between a fixed teacher distribution and ``softmax(student_logits)``.

    Fused so the student softmax is never materialised on the tape; averaged
    over the positions selected by ``mask``.
    """
    z = as_tensor(student_logits)
    p = np.asarray(teacher_probs.data if isinstance(teacher_probs, Tensor) else teacher_probs, compute_dtype())
    if p.shape != z.shape:
        raise ValueError(f"teacher {p.shape} vs student {z.shape}")
    w, count = _position_weights(z.shape[:-1], mask)
    q = np.exp(_log_softmax(_f64(z)))
    mix = alpha * p + (1.0 - alpha) * q
    pos = p > 0
    safe_mix = np.where(pos, mix, 1.0)
    per_row = np.where(pos, p * (np.log(np.where(pos, p, 1.0)) - np.log(safe_mix)), 0.0).sum(-1)
    value = (per_row * w).sum() / count

    def vjp(g):
        gq = np.where(pos, -(1.0 - alpha) * p / safe_mix, 0.0)
        gz = q * (gq - (gq * q).sum(axis=-1, keepdims=True))
        return (gz * (w / count)[..., None] * g,)

    return _emit(np.asarray(value), (z,), vjp)


def mse(a, b, mask=None) -> Tensor:
    """Mean squared difference.

    With a (B, L) ``mask`` over (B, L, d) inputs the squared error is averaged
    over the masked positions of each sequence, then across sequences.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = _f64(a) - _f64(b)
    if mask is None:
        n = diff.size
        value = (diff * diff).sum() / n

        def vjp(g):
            gd = 2.0 * diff * g / n
            return gd, -gd

        return _emit(np.asarray(value), (a, b), vjp)

    w = np.asarray(mask, compute_dtype())
    if w.shape != a.shape[:2]:
        raise ValueError("mask must cover the (batch, length) axes")
    per_seq = w.sum(axis=1)
    live = per_seq > 0
    if not live.any():
        raise ValueError("mask selects no positions")
    dim = a.shape[-1]
    coef = np.where(live, 1.0 / np.where(live, per_seq, 1.0), 0.0) / live.sum()
    weights = w * coef[:, None] / dim
    sq = (diff * diff).sum(axis=-1)
    value = (sq * weights).sum()

    def vjp(g):
        gd = 2.0 * diff * weights[..., None] * g
        return gd, -gd

    return _emit(np.asarray(value), (a, b), vjp)
