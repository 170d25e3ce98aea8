"""Post-norm Transformer encoder layers (dense or key-sparse) and sinusoidal positions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .attention import AttentionTrace, MultiHeadAttention, _init_linear
from .errors import ConfigError, ShapeError
from .numcore import Parameter, Tensor


@dataclass(frozen=True)
class EncoderLayerConfig:
    d_model: int
    heads: int
    ffn_dim: int | None = None  # 4 * d_model when None
    dropout_p: float = 0.5
    sparse_ratio: float | None = None  # None: vanilla layer; otherwise key-sparse
    renormalize_after_mask: bool = False
    ln_eps: float = nc.LN_EPS

    def __post_init__(self):
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.sparse_ratio is not None and not 0.0 < self.sparse_ratio <= 1.0:
            raise ConfigError(f"sparse_ratio must lie in (0, 1], got {self.sparse_ratio}")

    @property
    def ffn_width(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.d_model

    @property
    def is_sparse(self) -> bool:
        return self.sparse_ratio is not None


def layer_param_count(d_model: int, ffn_dim: int) -> int:
    return 4 * (d_model * d_model + d_model) + 2 * d_model * ffn_dim + ffn_dim + d_model + 4 * d_model


class EncoderLayer:
    def __init__(self, cfg: EncoderLayerConfig, rng, name: str):
        self.cfg, self.name = cfg, name
        d, f = cfg.d_model, cfg.ffn_width
        self.attn = MultiHeadAttention(d, cfg.heads, rng, f"{name}.attn")
        self.ln1_gain = Parameter(np.ones(d), f"{name}.ln1.gain")
        self.ln1_bias = Parameter(np.zeros(d), f"{name}.ln1.bias")
        self.w1, self.b1 = _init_linear(rng, d, f, f"{name}.ffn1")
        self.w2, self.b2 = _init_linear(rng, f, d, f"{name}.ffn2")
        self.ln2_gain = Parameter(np.ones(d), f"{name}.ln2.gain")
        self.ln2_bias = Parameter(np.zeros(d), f"{name}.ln2.bias")

    def parameters(self) -> list[Parameter]:
        return [
            *self.attn.parameters(),
            self.ln1_gain,
            self.ln1_bias,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.ln2_gain,
            self.ln2_bias,
        ]

    def forward(
        self,
        x_q: Tensor,
        x_kv: Tensor | None = None,
        query_valid=None,
        key_valid=None,
        training: bool = False,
        rng=None,
        trace: AttentionTrace | None = None,
    ) -> Tensor:
        """One encoder layer; ``x_kv=None`` means self-attention on ``x_q``.

        Attention sublayer and feed-forward sublayer each end in dropout, a
        residual add and layer norm.
        """
        cfg = self.cfg
        if x_kv is None:
            x_kv, key_valid = x_q, query_valid if key_valid is None else key_valid
        if x_q.shape[-1] != cfg.d_model or x_kv.shape[-1] != cfg.d_model:
            raise ShapeError(
                f"{self.name}: expected d_model={cfg.d_model}, got {x_q.shape} and {x_kv.shape}"
            )
        if training and cfg.dropout_p > 0 and rng is None:
            raise ConfigError(f"{self.name}: training with dropout needs an rng")
        a = self.attn.forward(
            x_q,
            x_kv,
            sparse_ratio=cfg.sparse_ratio,
            query_valid=query_valid,
            key_valid=key_valid,
            renormalize=cfg.renormalize_after_mask,
            trace=trace,
            layer_name=self.name,
        )
        a = nc.dropout(a, cfg.dropout_p, rng, training)
        h = nc.layer_norm(nc.add(x_q, a), self.ln1_gain, self.ln1_bias, cfg.ln_eps)
        ff = nc.linear(nc.relu(nc.linear(h, self.w1, self.b1)), self.w2, self.b2)
        ff = nc.dropout(ff, cfg.dropout_p, rng, training)
        return nc.layer_norm(nc.add(h, ff), self.ln2_gain, self.ln2_bias, cfg.ln_eps)


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: even columns ``sin(pos / 10000^(2i/d))``, odd columns the cosine."""
    if length < 1:
        raise ConfigError("positional_encoding: length must be at least 1")
    if d_model < 2 or d_model % 2:
        raise ConfigError(f"positional_encoding: d_model must be even, got {d_model}")
    pos = np.arange(length, dtype=float)[:, None]
    inv_freq = np.exp(-math.log(10000.0) * np.arange(0, d_model, 2, dtype=float) / d_model)
    table = np.empty((length, d_model))
    table[:, 0::2] = np.sin(pos * inv_freq)
    table[:, 1::2] = np.cos(pos * inv_freq)
    return table
