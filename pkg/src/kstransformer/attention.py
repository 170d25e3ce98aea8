"""Scaled dot-product attention, key importance, the top-k key mask, and multi-head wrappers.

Shapes follow ``(..., heads, i, d)`` for queries and ``(..., heads, j, d)`` for
keys/values; any leading batch dimensions pass through unchanged. Validity
masks are boolean arrays over the key (``j``) or query (``i``) axis that
broadcast against the leading dimensions of the score matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import numcore as nc
from .errors import ConfigError, EmptyContextError, ShapeError
from .numcore import Parameter, Tensor


@dataclass
class SparseMask:
    """Binary keep/drop decision per key position, per head."""

    mask: np.ndarray  # float 0/1, shape (..., j)
    kept_count: np.ndarray  # shape (...)
    target_k: np.ndarray  # shape (...)
    threshold: np.ndarray  # shape (...)
    ratio: float


class AttentionResult(NamedTuple):
    attn: Tensor
    weights: Tensor  # dense softmax weights
    sparse_weights: Tensor  # weights actually applied to V
    mask: SparseMask | None


def _expand_valid(valid, lead_shape: tuple[int, ...], n: int, what: str) -> np.ndarray:
    if valid is None:
        return np.ones((*lead_shape, n), dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape[-1] != n:
        raise ShapeError(f"{what} padding has length {valid.shape[-1]}, expected {n}")
    try:
        return np.broadcast_to(valid, (*lead_shape, n))
    except ValueError:
        raise ShapeError(f"{what} padding {valid.shape} does not broadcast to {(*lead_shape, n)}")


def _check_triple(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.ndim < 2 or k.ndim != q.ndim or v.ndim != q.ndim:
        raise ShapeError(f"attention: Q {q.shape}, K {k.shape}, V {v.shape} have mismatched ranks")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: Q {q.shape} and K {k.shape} differ in query dimension")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: K {k.shape} and V {v.shape} differ in sequence length")
    if not (q.shape[:-2] == k.shape[:-2] == v.shape[:-2]):
        raise ShapeError(f"attention: leading dimensions differ: {q.shape}, {k.shape}, {v.shape}")


def attention_weights(q: Tensor, k: Tensor, key_valid=None) -> Tensor:
    """``softmax(Q K^T / sqrt(d_Q))`` with padded keys forced to zero weight."""
    lead = q.shape[:-2]
    kv = _expand_valid(key_valid, lead, k.shape[-2], "key")
    if not kv.any(axis=-1).all():
        raise EmptyContextError("attention: every key position is padded")
    logits = nc.scale(nc.matmul(q, nc.swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    return nc.softmax_rows(logits, kv[..., None, :])


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, key_valid=None) -> AttentionResult:
    _check_triple(q, k, v)
    w = attention_weights(q, k, key_valid)
    return AttentionResult(nc.matmul(w, v), w, w, None)


def column_importance(weights, query_valid=None) -> np.ndarray:
    """Per-key importance: the sum of each column of W over valid query rows."""
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=float)
    qv = _expand_valid(query_valid, w.shape[:-2], w.shape[-2], "query")
    return (w * qv[..., :, None]).sum(axis=-2)


def target_k(ratio: float, j_valid):
    """Number of keys to keep: ``max(1, round(ratio * j_valid))`` with halves rounded up."""
    j_valid = np.asarray(j_valid)
    k = np.floor(ratio * j_valid + 0.5 + 1e-9).astype(np.int64)
    return np.maximum(1, np.minimum(k, j_valid))


def topk_mask(scores, ratio: float, valid=None) -> SparseMask:
    """Keep every key whose score is at least the k-th largest valid score.

    ``valid`` is either a boolean array over the last axis of ``scores`` or an
    integer count of leading valid positions. Ties at the threshold are all
    kept, so ``kept_count`` can exceed ``target_k`` only when ties occur.
    """
    if not (0.0 < ratio <= 1.0) or math.isnan(ratio):
        raise ConfigError(f"sparse ratio must lie in (0, 1], got {ratio}")
    s = np.asarray(scores, dtype=float)
    j = s.shape[-1]
    if valid is None:
        vmask = np.ones(s.shape, dtype=bool)
    elif np.isscalar(valid) or np.ndim(valid) == 0:
        if int(valid) < 1:
            raise ConfigError("topk_mask: need at least one valid position")
        vmask = np.broadcast_to(np.arange(j) < int(valid), s.shape)
    else:
        vmask = np.broadcast_to(np.asarray(valid, dtype=bool), s.shape)
    j_valid = vmask.sum(axis=-1)
    if (j_valid < 1).any():
        raise EmptyContextError("topk_mask: a row has no valid positions")
    k = target_k(ratio, j_valid)
    ranked = -np.sort(-np.where(vmask, s, -np.inf), axis=-1)
    threshold = np.take_along_axis(ranked, (k - 1)[..., None], axis=-1)[..., 0]
    keep = vmask & (s >= threshold[..., None])
    return SparseMask(
        mask=keep.astype(float),
        kept_count=keep.sum(axis=-1),
        target_k=k,
        threshold=threshold,
        ratio=ratio,
    )


def key_sparse_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    ratio: float,
    key_valid=None,
    query_valid=None,
    renormalize: bool = False,
    mask: SparseMask | None = None,
) -> AttentionResult:
    """Attention in which only the top-importance key columns keep their weights.

    The mask is a constant of the forward pass: gradients reach the kept
    weights unchanged and the dropped ones receive none. Pass ``mask`` to reuse
    a previously computed mask instead of recomputing it.
    """
    _check_triple(q, k, v)
    if not (0.0 < ratio <= 1.0):
        raise ConfigError(f"sparse ratio must lie in (0, 1], got {ratio}")
    w = attention_weights(q, k, key_valid)
    if mask is None:
        lead = q.shape[:-2]
        kv = _expand_valid(key_valid, lead, k.shape[-2], "key")
        mask = topk_mask(column_importance(w, query_valid), ratio, kv)
    ws = nc.mul_const(w, np.broadcast_to(mask.mask[..., None, :], w.shape))
    if renormalize:
        norm = ws.data.sum(axis=-1, keepdims=True)
        ws = _row_renormalize(ws, norm)
    return AttentionResult(nc.matmul(ws, v), w, ws, mask)


def _row_renormalize(ws: Tensor, norm: np.ndarray) -> Tensor:
    y = ws.data / norm

    def bw(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return nc.from_op(y, (ws,), bw)


# multi-head


@dataclass
class AttentionTrace:
    """Collects per-call attention weights and optionally freezes sparse masks.

    With ``freeze=True`` the first mask seen under a layer name is reused on
    every later call with that name, which makes the forward pass a smooth
    function of the parameters (needed for finite-difference checks).
    """

    record: bool = True
    freeze: bool = False
    entries: list[dict] = field(default_factory=list)
    masks: dict[str, SparseMask] = field(default_factory=dict)

    def resolve_mask(self, name: str) -> SparseMask | None:
        return self.masks.get(name) if self.freeze else None

    def observe(self, name: str, result: AttentionResult, query_valid, key_valid) -> None:
        if self.freeze and result.mask is not None:
            self.masks.setdefault(name, result.mask)
        if self.record:
            self.entries.append(
                {
                    "layer": name,
                    "dense": result.weights.data.copy(),
                    "mask": None if result.mask is None else result.mask.mask.copy(),
                    "sparse": result.sparse_weights.data.copy(),
                    "query_valid": None if query_valid is None else np.array(query_valid),
                    "key_valid": None if key_valid is None else np.array(key_valid),
                }
            )


def _init_linear(rng, din: int, dout: int, name: str) -> tuple[Parameter, Parameter]:
    bound = 1.0 / math.sqrt(din)
    w = Parameter(rng.uniform((din, dout)) * 2 * bound - bound, f"{name}.weight")
    b = Parameter(rng.uniform((dout,)) * 2 * bound - bound, f"{name}.bias")
    return w, b


class MultiHeadAttention:
    """Projects queries from one stream and keys/values from another, then attends per head."""

    def __init__(self, d_model: int, heads: int, rng, name: str = "attn"):
        if heads < 1 or d_model % heads:
            raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")
        self.d_model, self.heads, self.name = d_model, heads, name
        self.wq, self.bq = _init_linear(rng, d_model, d_model, f"{name}.q")
        self.wk, self.bk = _init_linear(rng, d_model, d_model, f"{name}.k")
        self.wv, self.bv = _init_linear(rng, d_model, d_model, f"{name}.v")
        self.wo, self.bo = _init_linear(rng, d_model, d_model, f"{name}.out")

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        dh = d // self.heads
        x = nc.reshape(x, (*lead, n, self.heads, dh))
        nl = len(lead)
        return nc.transpose(x, (*range(nl), nl + 1, nl, nl + 2))

    def _merge(self, x: Tensor) -> Tensor:
        *lead, h, n, dh = x.shape
        nl = len(lead)
        x = nc.transpose(x, (*range(nl), nl + 1, nl, nl + 2))
        return nc.reshape(x, (*lead, n, h * dh))

    def forward(
        self,
        x_q: Tensor,
        x_kv: Tensor,
        sparse_ratio: float | None = None,
        query_valid=None,
        key_valid=None,
        renormalize: bool = False,
        trace: AttentionTrace | None = None,
        layer_name: str | None = None,
    ) -> Tensor:
        """Multi-head attention on ``(..., i, d_model)`` queries and ``(..., j, d_model)`` context.

        ``query_valid``/``key_valid`` have shape ``(..., i)``/``(..., j)``.
        Dense attention is used when ``sparse_ratio`` is None.
        """
        if x_q.shape[-1] != self.d_model or x_kv.shape[-1] != self.d_model:
            raise ShapeError(
                f"{self.name}: inputs {x_q.shape} and {x_kv.shape} must end in d_model={self.d_model}"
            )
        q = self._split(nc.linear(x_q, self.wq, self.bq))
        k = self._split(nc.linear(x_kv, self.wk, self.bk))
        v = self._split(nc.linear(x_kv, self.wv, self.bv))
        # insert the head axis into the padding masks
        kv = None if key_valid is None else np.asarray(key_valid, dtype=bool)[..., None, :]
        qv = None if query_valid is None else np.asarray(query_valid, dtype=bool)[..., None, :]
        name = layer_name or self.name
        if sparse_ratio is None:
            res = scaled_dot_attention(q, k, v, kv)
        else:
            frozen = trace.resolve_mask(name) if trace is not None else None
            res = key_sparse_attention(q, k, v, sparse_ratio, kv, qv, renormalize, frozen)
        if trace is not None:
            trace.observe(name, res, query_valid, key_valid)
        return nc.linear(self._merge(res.attn), self.wo, self.bo)
