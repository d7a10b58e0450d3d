"""Input validation helpers shared across the package.

These follow the scikit-learn convention of ``check_*`` functions that
either return a cleaned array or raise ``ValueError``.
"""
from __future__ import annotations

import numpy as np


class SizeError(ValueError):
    """Raised when an exhaustive routine is asked to run on too large an input."""


class StateError(RuntimeError):
    """Raised when an object is used before the data it needs is available."""


class NotFittedError(StateError, AttributeError):
    pass


def check_logits(z, *, allow_batch: bool = True) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0:
        raise ValueError("logits must be a vector, got a scalar")
    if not allow_batch and z.ndim != 1:
        raise ValueError(f"logits must be 1-D, got shape {z.shape}")
    if z.shape[-1] < 1:
        raise ValueError("logits must contain at least one entry")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    return z


def check_permutation(sigma, n: int) -> np.ndarray:
    """Return ``sigma`` as an integer array whose last axis is a permutation of range(n)."""
    arr = np.asarray(sigma)
    if arr.ndim == 0:
        raise ValueError("permutation must be a vector")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError("permutation entries must be integers")
    arr = arr.astype(np.int64)
    if arr.shape[-1] != n:
        raise ValueError(f"permutation length {arr.shape[-1]} does not match {n} items")
    if not np.array_equal(np.sort(arr, axis=-1), np.broadcast_to(np.arange(n), arr.shape)):
        raise ValueError(f"not a permutation of 0..{n - 1}: {arr.tolist()}")
    return arr


def check_actions(actions, n_actions: int) -> np.ndarray:
    arr = np.asarray(actions)
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise ValueError("action ids must be integers")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= n_actions):
        raise ValueError(f"action ids must lie in [0, {n_actions})")
    return arr


def check_observations(obs, n_agents: int, obs_dim: int) -> np.ndarray:
    """Accept ``(n_agents, obs_dim)`` or ``(batch, n_agents, obs_dim)``; always return 3-D."""
    arr = np.asarray(obs, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (n_agents, obs_dim):
        raise ValueError(
            f"observations must have shape (n_agents={n_agents}, obs_dim={obs_dim}) "
            f"with an optional leading batch axis, got {np.shape(obs)}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError("observations must be finite")
    return arr


def check_random_state(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
