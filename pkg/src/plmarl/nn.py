"""Neural-network building blocks on top of :mod:`plmarl.autodiff`.

Parameters live in a :class:`ParameterStore` as plain numpy arrays keyed by
dotted names whose first component is the segment (``encoder``, ``decoder``,
``scoring``). A forward pass wraps them as leaf tensors, so every pass builds
its own graph.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from ._validation import check_permutation

CHECKPOINT_MAGIC = b"PMATCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class ParameterStore:
    params: dict[str, np.ndarray]
    step_count: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    last_grad_norm: float = field(default=0.0, repr=False)

    @property
    def segments(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for name in self.params:
            out.setdefault(name.split(".", 1)[0], []).append(name)
        return out

    def segment(self, seg: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.split(".", 1)[0] == seg}

    def leaves(self) -> dict[str, ad.Tensor]:
        """Fresh leaf tensors sharing memory with the stored arrays."""
        return {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in self.params.items()}

    def assign(self, values: Mapping[str, np.ndarray]) -> None:
        for k, v in values.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            v = np.asarray(v)
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape of {k!r} is fixed at {self.params[k].shape}, got {v.shape}")
            self.params[k][...] = v

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            {k: v.copy() for k, v in self.params.items()},
            self.step_count,
            {k: v.copy() for k, v in self.adam_m.items()},
            {k: v.copy() for k, v in self.adam_v.items()},
        )

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


class ParamView:
    """Prefix-scoped read access to a mapping of parameters."""

    def __init__(self, params: Mapping, prefix: str = ""):
        self._params = params
        self.prefix = prefix

    def __getitem__(self, key):
        return self._params[self.prefix + key]

    def __contains__(self, key):
        return self.prefix + key in self._params

    def sub(self, name: str) -> "ParamView":
        return ParamView(self._params, f"{self.prefix}{name}.")


# ---- initialization ----------------------------------------------------------

def orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_dense(params: dict, name: str, fan_in: int, fan_out: int, rng, gain: float = 1.0) -> None:
    params[name + ".w"] = orthogonal((fan_in, fan_out), gain, rng)
    params[name + ".b"] = np.zeros(fan_out)


def init_layer_norm(params: dict, name: str, dim: int) -> None:
    params[name + ".g"] = np.ones(dim)
    params[name + ".b"] = np.zeros(dim)


def init_attention(params: dict, name: str, d_model: int, rng) -> None:
    for proj in ("q", "k", "v", "o"):
        init_dense(params, f"{name}.{proj}", d_model, d_model, rng)


# ---- layers ------------------------------------------------------------------

def dense_forward(p: ParamView, x) -> ad.Tensor:
    x = ad.as_tensor(x)
    w = p["w"]
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"input dim {x.shape[-1]} does not match weight fan-in {w.shape[0]}")
    return x @ w + p["b"]


def layer_norm_forward(p: ParamView, x) -> ad.Tensor:
    return ad.layer_norm(x, p["g"], p["b"])


def mlp_forward(p: ParamView, x) -> ad.Tensor:
    return dense_forward(p.sub("fc2"), ad.gelu(dense_forward(p.sub("fc1"), x)))


@dataclass(frozen=True)
class AttentionMask:
    """``kind="none"`` or ``kind="causal"``; a causal mask may carry an order.

    With an order ``sigma``, token ``i`` may attend to token ``j`` when ``j``
    is placed no later than ``i`` in ``sigma``. Without one, token positions
    are the order.
    """

    kind: str = "none"
    order: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("none", "causal"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if self.order is not None:
            if self.kind != "causal":
                raise ValueError("only a causal mask takes an order")
            object.__setattr__(self, "order", tuple(int(i) for i in self.order))

    def allowed(self, n: int) -> np.ndarray | None:
        if self.kind == "none":
            return None
        if self.order is None:
            return np.tril(np.ones((n, n), dtype=bool))
        sigma = check_permutation(self.order, n)
        pos = np.empty(n, dtype=np.int64)
        pos[sigma] = np.arange(n)
        return pos[None, :] <= pos[:, None]


def attention_forward(p: ParamView, x, mask: AttentionMask | None = None, n_heads: int = 1,
                      return_weights: bool = False):
    """Multi-head scaled dot-product self-attention over the second-to-last axis."""
    x = ad.as_tensor(x)
    if x.ndim < 2:
        raise ValueError(f"attention input must be (..., n_tokens, d_model), got {x.shape}")
    *lead, n, d = x.shape
    if d % n_heads:
        raise ValueError(f"d_model={d} is not divisible by {n_heads} heads")
    dh = d // n_heads

    def heads(t):
        return ad.transpose(ad.reshape(t, (*lead, n, n_heads, dh)), _swap_axes(len(lead)))

    q = heads(dense_forward(p.sub("q"), x))
    k = heads(dense_forward(p.sub("k"), x))
    v = heads(dense_forward(p.sub("v"), x))
    scores = (q @ ad.transpose(k, _last_two(len(lead) + 3))) * (1.0 / np.sqrt(dh))
    allowed = (mask or AttentionMask()).allowed(n)
    weights = ad.softmax(scores, axis=-1, mask=allowed)
    ctx = ad.transpose(weights @ v, _swap_axes(len(lead)))
    out = dense_forward(p.sub("o"), ad.reshape(ctx, (*lead, n, d)))
    return (out, weights) if return_weights else out


def _swap_axes(n_lead: int) -> tuple[int, ...]:
    # (..., n, h, dh) <-> (..., h, n, dh)
    lead = tuple(range(n_lead))
    return (*lead, n_lead + 1, n_lead, n_lead + 2)


def _last_two(ndim: int) -> tuple[int, ...]:
    return (*range(ndim - 2), ndim - 1, ndim - 2)


def block_forward(p: ParamView, x, mask: AttentionMask | None, n_heads: int) -> ad.Tensor:
    """Pre-norm residual block: attention then MLP."""
    x = x + attention_forward(p.sub("attn"), layer_norm_forward(p.sub("ln1"), x), mask, n_heads)
    return x + mlp_forward(p.sub("mlp"), layer_norm_forward(p.sub("ln2"), x))


def init_block(params: dict, name: str, d_model: int, rng) -> None:
    init_layer_norm(params, f"{name}.ln1", d_model)
    init_attention(params, f"{name}.attn", d_model, rng)
    init_layer_norm(params, f"{name}.ln2", d_model)
    init_dense(params, f"{name}.mlp.fc1", d_model, d_model, rng, gain=np.sqrt(2.0))
    init_dense(params, f"{name}.mlp.fc2", d_model, d_model, rng)


# ---- gradients and optimization ----------------------------------------------

def grad_map(loss: ad.Tensor, leaves: Mapping[str, ad.Tensor]) -> dict[str, np.ndarray]:
    """Backpropagate a scalar loss; unreachable parameters get zero gradients."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    for t in leaves.values():
        t.grad = None
    if loss.requires_grad:
        ad.backward(loss)
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def adam_step(store: ParameterStore, grads: Mapping[str, np.ndarray], lr, betas=(0.9, 0.999),
              eps: float = 1e-5, max_grad_norm: float | None = None) -> ParameterStore:
    """Bias-corrected Adam update, in place. ``lr`` may map segment name to rate.

    With ``max_grad_norm`` set, gradients are first rescaled so their global
    norm does not exceed it. The pre-clip norm is stored in
    ``store.last_grad_norm``.
    """
    if set(grads) != set(store.params):
        missing = sorted(set(store.params) - set(grads))
        extra = sorted(set(grads) - set(store.params))
        raise ValueError(f"gradient map does not match parameters (missing={missing}, extra={extra})")
    for k, g in grads.items():
        if np.shape(g) != store.params[k].shape:
            raise ValueError(f"gradient for {k!r} has shape {np.shape(g)}, expected {store.params[k].shape}")
    norm = global_norm(grads)
    scale = 1.0
    if max_grad_norm is not None and norm > max_grad_norm:
        scale = max_grad_norm / norm
    store.last_grad_norm = norm
    b1, b2 = betas
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in store.params.items():
        g = np.asarray(grads[k]) * scale
        m = store.adam_m.get(k)
        if m is None:
            m = store.adam_m[k] = np.zeros_like(p)
            store.adam_v[k] = np.zeros_like(p)
        v = store.adam_v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        rate = lr[k.split(".", 1)[0]] if isinstance(lr, Mapping) else lr
        p -= rate * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


# ---- checkpoints -------------------------------------------------------------

def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(store: ParameterStore) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, arr in store.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(data: bytes, dtype=np.float64) -> ParameterStore:
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    if len(data) < 12:
        raise CheckpointError("truncated checkpoint header")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    pos = 12
    params: dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            payload = data[pos:pos + 4 * count]
            if len(payload) != 4 * count:
                raise CheckpointError(f"truncated payload for {name!r}")
            pos += 4 * count
            if name in params:
                raise CheckpointError(f"duplicate segment record {name!r}")
            params[name] = np.frombuffer(payload, dtype="<f4").astype(dtype).reshape(shape)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    return ParameterStore(params)


def save_checkpoint(path, store: ParameterStore, meta: dict | None = None) -> None:
    """Write the binary checkpoint, plus ``<path>.json`` holding ``meta`` when given."""
    atomic_write_bytes(path, encode_checkpoint(store))
    if meta is not None:
        meta = dict(meta, step_count=store.step_count)
        atomic_write_bytes(os.fspath(path) + ".json", json.dumps(meta, indent=2, sort_keys=True).encode())


def load_checkpoint(path) -> tuple[ParameterStore, dict | None]:
    with open(path, "rb") as fh:
        store = decode_checkpoint(fh.read())
    meta = None
    side = os.fspath(path) + ".json"
    if os.path.exists(side):
        with open(side, encoding="utf-8") as fh:
            meta = json.load(fh)
        store.step_count = int(meta.get("step_count", 0))
    return store, meta
