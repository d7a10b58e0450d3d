"""Central finite differences for checking analytic gradients."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-6,
                 indices: Iterable[tuple] | None = None) -> np.ndarray:
    """Central-difference gradient of ``f()`` w.r.t. ``x``, perturbing ``x`` in place.

    Only ``indices`` are probed when given; other entries of the result are 0.
    The divisor is the step actually stored in ``x``, which matters at float32.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    it = indices if indices is not None else np.ndindex(x.shape)
    for idx in it:
        old = x[idx]
        x[idx] = old + h
        hi = float(x[idx])
        fp = float(f())
        x[idx] = old - h
        lo = float(x[idx])
        fm = float(f())
        x[idx] = old
        grad[idx] = (fp - fm) / (hi - lo)
    return grad


def max_rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    """``max|a - n|`` scaled by the larger of the two gradients' magnitudes."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), floor)
    return float(np.max(np.abs(a - n), initial=0.0) / scale)


def probe_indices(shape, count: int, rng: np.random.Generator) -> list[tuple]:
    total = int(np.prod(shape))
    flat = rng.choice(total, size=min(count, total), replace=False)
    return [np.unravel_index(i, shape) for i in flat]
