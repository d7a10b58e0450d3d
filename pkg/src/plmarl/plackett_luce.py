"""Plackett-Luce distribution over permutations.

A permutation ``sigma`` lists item indices from first to last. Under
log-preferences ``z`` its probability is the product over positions of a
softmax restricted to the items not yet placed::

    P(sigma | z) = prod_i exp(z[sigma[i]]) / sum_{j >= i} exp(z[sigma[j]])

All functions accept a single vector ``z`` of shape ``(n,)`` and most also
accept a batch ``(..., n)`` with matching permutations.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from ._validation import SizeError, check_logits, check_permutation, check_random_state

MAX_ENUMERATE = 8


@dataclass(frozen=True)
class OrderSample:
    permutation: np.ndarray
    log_prob: float | np.ndarray


def _suffix_logsumexp(zs: np.ndarray) -> np.ndarray:
    # logaddexp shifts by the running max, so every suffix is normalized stably
    return np.logaddexp.accumulate(zs[..., ::-1], axis=-1)[..., ::-1]


def pl_log_prob(z, sigma):
    """Natural log of ``P(sigma | z)``.

    Works on batches: ``z`` and ``sigma`` of shape ``(..., n)`` give a result of
    shape ``(...)``.
    """
    z = check_logits(z)
    sigma = check_permutation(sigma, z.shape[-1])
    z, sigma = np.broadcast_arrays(z, sigma)
    zs = np.take_along_axis(z, sigma, axis=-1)
    out = np.sum(zs - _suffix_logsumexp(zs), axis=-1)
    # each factor is <= 1; clamp the rounding noise
    out = np.minimum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def pl_log_prob_grad(z, sigma) -> np.ndarray:
    """Gradient of ``log P(sigma | z)`` with respect to ``z``.

    The component for the item at position ``i`` is
    ``1 - exp(z[sigma[i]]) * sum_{k <= i} 1 / sum_{j >= k} exp(z[sigma[j]])``.
    Suffix normalizers and prefix sums of their reciprocals are accumulated in
    one pass each, so the cost is linear in ``n``.
    """
    z = check_logits(z)
    sigma = check_permutation(sigma, z.shape[-1])
    z, sigma = np.broadcast_arrays(z, sigma)
    zs = np.take_along_axis(z, sigma, axis=-1)
    log_denom = _suffix_logsumexp(zs)
    # log of sum_{k<=i} exp(-log_denom[k])
    log_prefix = np.logaddexp.accumulate(-log_denom, axis=-1)
    grad_sorted = 1.0 - np.exp(zs + log_prefix)
    grad = np.empty_like(grad_sorted)
    np.put_along_axis(grad, sigma, grad_sorted, axis=-1)
    return grad


def pl_mode(z) -> np.ndarray:
    """Most probable permutation: items by descending ``z``, ties by ascending index."""
    z = check_logits(z)
    return np.argsort(-z, axis=-1, kind="stable")


def pl_sample(z, rng=None, method: str = "gumbel") -> OrderSample:
    """Draw one permutation per leading index of ``z``.

    ``method="gumbel"`` perturbs each logit with independent standard Gumbel
    noise and sorts in descending order. ``method="sequential"`` draws the
    items one at a time from the softmax over what remains. Both produce the
    same distribution.
    """
    z = check_logits(z)
    rng = check_random_state(rng)
    if method == "gumbel":
        keys = z + rng.gumbel(size=z.shape)
        sigma = np.argsort(-keys, axis=-1, kind="stable")
    elif method == "sequential":
        sigma = _sample_sequential(z, rng)
    else:
        raise ValueError(f"unknown sampling method {method!r}")
    return OrderSample(sigma, pl_log_prob(z, sigma))


def _sample_sequential(z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    flat = z.reshape(-1, z.shape[-1])
    batch, n = flat.shape
    out = np.empty((batch, n), dtype=np.int64)
    rows = np.arange(batch)
    remaining = flat.copy()
    for i in range(n):
        shifted = remaining - remaining.max(axis=1, keepdims=True)
        w = np.exp(shifted)
        cdf = np.cumsum(w, axis=1)
        u = rng.random(batch) * cdf[:, -1]
        pick = np.minimum((cdf <= u[:, None]).sum(axis=1), n - 1)
        # a zero-weight item can only be hit through rounding; step back to a live one
        dead = np.isneginf(remaining[rows, pick])
        while np.any(dead):
            pick[dead] -= 1
            dead = np.isneginf(remaining[rows, pick])
        out[:, i] = pick
        remaining[rows, pick] = -np.inf
    return out.reshape(z.shape)


def pl_enumerate(z) -> list[tuple[tuple[int, ...], float]]:
    """Every permutation of ``len(z)`` items with its exact probability."""
    z = check_logits(z, allow_batch=False)
    n = z.shape[0]
    if n > MAX_ENUMERATE:
        raise SizeError(f"refusing to enumerate {n}! permutations (limit n <= {MAX_ENUMERATE})")
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    probs = np.exp(pl_log_prob(np.broadcast_to(z, perms.shape), perms))
    return [(tuple(int(i) for i in p), float(q)) for p, q in zip(perms, np.atleast_1d(probs))]


def estimate_order_objective_grad(z, samples) -> np.ndarray:
    """Score-function estimate of the gradient of ``E[A(sigma)]``.

    ``samples`` is a sequence of ``(permutation, advantage)`` pairs; the result
    is ``mean(A * grad log P(sigma | z))``.
    """
    z = check_logits(z, allow_batch=False)
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one (permutation, advantage) sample")
    sigmas = np.stack([check_permutation(s, z.shape[0]) for s, _ in samples])
    adv = np.asarray([a for _, a in samples], dtype=np.float64)
    if not np.all(np.isfinite(adv)):
        raise ValueError("advantages must be finite")
    grads = pl_log_prob_grad(np.broadcast_to(z, sigmas.shape), sigmas)
    return (adv[:, None] * grads).mean(axis=0)


def uniform_log_prob(n: int) -> float:
    return -math.lgamma(n + 1)


def sample_uniform_permutation(n: int, size: int | None, rng) -> np.ndarray:
    rng = check_random_state(rng)
    if size is None:
        return rng.permutation(n)
    return np.argsort(rng.random((size, n)), axis=1, kind="stable")
