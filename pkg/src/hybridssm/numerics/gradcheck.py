from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor, precision


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    samples: int = 24,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Compare tape gradients of scalar ``f()`` against central differences.

    A random subset of ``samples`` entries per parameter is perturbed by
    +/- ``eps``. The error for each parameter is ``max|tape - fd|`` over its
    sampled entries divided by ``max(max|fd|, floor)``; the maximum over all
    parameters is returned. Runs in 64-bit so finite-difference noise stays
    far below the tolerance; parameters are converted for the duration.
    """
    rng = np.random.default_rng(seed)
    originals = [p.data for p in params]
    with precision(np.float64):
        for p in params:
            p.data = p.data.astype(np.float64)
        try:
            with Tape() as tape:
                loss = f()
            grads = tape.gradient(loss, list(params))
            worst = 0.0
            for p, g in zip(params, grads):
                flat = p.data.reshape(-1)
                k = min(samples, flat.size)
                picks = rng.choice(flat.size, size=k, replace=False)
                fd = np.empty(k)
                for j, i in enumerate(picks):
                    keep = flat[i]
                    flat[i] = keep + eps
                    up = float(f().data)
                    flat[i] = keep - eps
                    down = float(f().data)
                    flat[i] = keep
                    if not (np.isfinite(up) and np.isfinite(down)):
                        raise NonFiniteError("non-finite loss during finite differences")
                    fd[j] = (up - down) / (2 * eps)
                tape_vals = g.reshape(-1)[picks]
                denom = max(float(np.abs(fd).max()), floor)
                worst = max(worst, float(np.abs(tape_vals - fd).max()) / denom)
        finally:
            for p, orig in zip(params, originals):
                p.data = orig
    return worst
