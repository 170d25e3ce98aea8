"""Cascaded cross-attention blocks, the modality-interaction stack and deep fusion."""

from __future__ import annotations

from dataclasses import dataclass

from . import numcore as nc
from .attention import AttentionTrace
from .errors import ConfigError, ShapeError
from .layers import EncoderLayer, EncoderLayerConfig
from .numcore import Parameter, Tensor


@dataclass(frozen=True)
class FusionConfig:
    n_ccab: int = 3
    n_deep: int = 2
    sparse_ratio: float | None = 0.5

    def __post_init__(self):
        if self.n_ccab < 0 or self.n_deep < 0:
            raise ConfigError("n_ccab and n_deep must be non-negative")


class CCAB:
    """Cross-attention KS layer (queries from A, keys/values from B) then a KS self-attention layer."""

    def __init__(self, layer_cfg: EncoderLayerConfig, rng, name: str):
        self.name = name
        self.cross = EncoderLayer(layer_cfg, rng, f"{name}.cross")
        self.self_layer = EncoderLayer(layer_cfg, rng, f"{name}.self")

    def parameters(self) -> list[Parameter]:
        return [*self.cross.parameters(), *self.self_layer.parameters()]

    def forward(self, a, b, a_valid=None, b_valid=None, training=False, rng=None, trace=None):
        if a.shape[-1] != b.shape[-1]:
            raise ShapeError(f"{self.name}: stream widths differ: {a.shape} vs {b.shape}")
        fused = self.cross.forward(a, b, a_valid, b_valid, training, rng, trace)
        return self.self_layer.forward(fused, None, a_valid, None, training, rng, trace)


class InteractionStack:
    """``n_ccab`` CCABs chained on the A stream, each reading B, plus one skip from input to output."""

    def __init__(self, n_ccab: int, layer_cfg: EncoderLayerConfig, rng, name: str = "interaction"):
        self.blocks = [CCAB(layer_cfg, rng, f"{name}.ccab{t}") for t in range(n_ccab)]

    def parameters(self) -> list[Parameter]:
        return [p for blk in self.blocks for p in blk.parameters()]

    def forward(
        self,
        a0: Tensor,
        b: Tensor,
        a_valid=None,
        b_valid=None,
        training: bool = False,
        rng=None,
        trace: AttentionTrace | None = None,
    ) -> Tensor:
        if not self.blocks:
            return a0
        a = a0
        for blk in self.blocks:
            a = blk.forward(a, b, a_valid, b_valid, training, rng, trace)
        return nc.add(a0, a)


class DeepFusion:
    def __init__(self, n_deep: int, layer_cfg: EncoderLayerConfig, rng, name: str = "deep"):
        self.layers = [EncoderLayer(layer_cfg, rng, f"{name}.{t}") for t in range(n_deep)]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, f, valid=None, training=False, rng=None, trace=None) -> Tensor:
        for layer in self.layers:
            f = layer.forward(f, None, valid, None, training, rng, trace)
        return f
