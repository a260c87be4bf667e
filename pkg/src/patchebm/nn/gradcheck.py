"""Central-finite-difference verification of analytic gradients.

Checks the vector-Jacobian product directly: backward is seeded with a random
cotangent G and compared against finite differences of sum(G * f(x)). Run in
float64, where central differences with h~1e-5 carry O(1e-10) error, far
below the 1e-6 acceptance tolerance.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def max_relative_error(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Worst |analytic - numeric| / max(1, |analytic|, |numeric|) over all inputs."""
    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    cotangent = np.random.default_rng(seed).standard_normal(out.shape).astype(out.dtype)
    out.backward(cotangent)

    def projected(*args: Tensor) -> float:
        return float((fn(*args).data * cotangent).sum())

    worst = 0.0
    for idx, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = projected(*inputs)
            flat[i] = orig - h
            lo = projected(*inputs)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * h)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        err = float((np.abs(analytic - numeric) / denom).max()) if flat.size else 0.0
        worst = max(worst, err)
    return worst
