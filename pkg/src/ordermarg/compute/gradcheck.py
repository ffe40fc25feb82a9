"""Central finite-difference gradient checking (use float64 inputs)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, zero_grad

REL_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries from blowing up."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, coords: np.ndarray, h: float) -> np.ndarray:
    flat = t.data.reshape(-1)
    out = np.empty(len(coords), dtype=np.float64)
    with no_grad():
        for i, c in enumerate(coords):
            keep = flat[c]
            flat[c] = keep + h
            up = float(fn().data)
            flat[c] = keep - h
            down = float(fn().data)
            flat[c] = keep
            out[i] = (up - down) / (2 * h)
    return out


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                    max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between backward() and central differences.

    ``fn`` rebuilds a scalar from ``inputs`` on each call; inputs must be
    float64 leaves with ``requires_grad=True``.  With ``max_coords`` set, that
    many coordinates are sampled per input instead of checking all of them.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError(f"gradient checks need float64 inputs, got {t.dtype}")
    zero_grad(inputs)
    backward(fn())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.data.size) if t.grad is None else t.grad.reshape(-1).astype(np.float64)
        coords = np.arange(t.data.size)
        if max_coords is not None and t.data.size > max_coords:
            coords = rng.choice(t.data.size, size=max_coords, replace=False)
        numeric = numeric_grad(fn, t, coords, h)
        worst = max(worst, float(relative_error(analytic[coords], numeric).max()))
    return worst
