"""Two-modality key-sparse Transformer classifier.

Pipeline per batch: linear projection of each modality to ``d_model`` plus
sinusoidal positions, a vanilla self-attention stack per modality, the CCAB
interaction stack (queries from one modality, keys/values from the other), the
key-sparse deep-fusion stack, masked mean pooling and a linear classifier.
"""

from __future__ import annotations

import json
import math
import os
import struct
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numcore as nc
from .attention import AttentionTrace, _init_linear
from .data import Batch, TruncationWarning, collate
from .errors import ConfigError, EmptyContextError, FormatError, ShapeError
from .fusion import DeepFusion, InteractionStack
from .labels import EMOTIONS, EmotionLabel
from .layers import EncoderLayer, EncoderLayerConfig, layer_param_count, positional_encoding
from .numcore import Parameter, Tensor
from .prng import SplitMix64

__all__ = [
    "ModelConfig",
    "KSTransformerClassifier",
    "EmotionLabel",
    "EMOTIONS",
    "predict",
    "preset",
    "expected_param_count",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    heads: int = 8
    n_feat_layers: int = 5
    n_ccab: int = 3
    n_deep: int = 2
    sparse_ratio: float | None = 0.5  # None turns every KS layer into a dense one
    n_classes: int = 4
    audio_in_dim: int = 512
    text_in_dim: int = 768
    max_audio_len: int = 460
    max_text_len: int = 20
    dropout_p: float = 0.5
    ffn_dim: int | None = None
    renormalize_after_mask: bool = False
    query_modality: str = "audio"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for sinusoidal positions")
        if self.sparse_ratio is not None and not 0.0 < self.sparse_ratio <= 1.0:
            raise ConfigError(f"sparse_ratio must lie in (0, 1], got {self.sparse_ratio}")
        if self.query_modality not in ("audio", "text"):
            raise ConfigError(f"query_modality must be 'audio' or 'text', got {self.query_modality!r}")
        if min(self.n_feat_layers, self.n_ccab, self.n_deep) < 0 or self.n_classes < 2:
            raise ConfigError("layer counts must be non-negative and n_classes >= 2")

    def layer_config(self, sparse: bool) -> EncoderLayerConfig:
        return EncoderLayerConfig(
            d_model=self.d_model,
            heads=self.heads,
            ffn_dim=self.ffn_dim,
            dropout_p=self.dropout_p,
            sparse_ratio=self.sparse_ratio if sparse else None,
            renormalize_after_mask=self.renormalize_after_mask,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "full": {},
    "tiny": dict(d_model=8, heads=2, n_feat_layers=1, n_ccab=1, n_deep=1),
    "small": dict(d_model=16, heads=4, n_feat_layers=2, n_ccab=2, n_deep=1),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalar parameters for ``cfg``."""
    d = cfg.d_model
    f = cfg.ffn_dim if cfg.ffn_dim is not None else 4 * d
    per_layer = layer_param_count(d, f)
    n_layers = 2 * cfg.n_feat_layers + 2 * cfg.n_ccab + cfg.n_deep
    return (
        (cfg.audio_in_dim + 1) * d
        + (cfg.text_in_dim + 1) * d
        + n_layers * per_layer
        + (d + 1) * cfg.n_classes
    )


class KSTransformerClassifier:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg, self.seed = cfg, seed
        rng = SplitMix64(seed)
        d = cfg.d_model
        dense, sparse = cfg.layer_config(False), cfg.layer_config(True)
        self.audio_proj = _init_linear(rng, cfg.audio_in_dim, d, "audio_proj")
        self.text_proj = _init_linear(rng, cfg.text_in_dim, d, "text_proj")
        self.feat_audio = [EncoderLayer(dense, rng, f"feat.audio.{t}") for t in range(cfg.n_feat_layers)]
        self.feat_text = [EncoderLayer(dense, rng, f"feat.text.{t}") for t in range(cfg.n_feat_layers)]
        self.interaction = InteractionStack(cfg.n_ccab, sparse, rng, "interaction")
        self.deep = DeepFusion(cfg.n_deep, sparse, rng, "deep")
        self.classifier = _init_linear(rng, d, cfg.n_classes, "classifier")

    def parameters(self) -> list[Parameter]:
        params = [*self.audio_proj, *self.text_proj]
        for layer in (*self.feat_audio, *self.feat_text):
            params += layer.parameters()
        return [*params, *self.interaction.parameters(), *self.deep.parameters(), *self.classifier]

    def trainable_parameters(self) -> list[Parameter]:
        """Parameters that can influence the logits.

        Without CCABs the key/value modality never reaches the classifier, so its
        projection and feature stack are left out.
        """
        if self.cfg.n_ccab:
            return self.parameters()
        if self.cfg.query_modality == "audio":
            dead = [*self.text_proj, *(p for layer in self.feat_text for p in layer.parameters())]
        else:
            dead = [*self.audio_proj, *(p for layer in self.feat_audio for p in layer.parameters())]
        dead_ids = {id(p) for p in dead}
        return [p for p in self.parameters() if id(p) not in dead_ids]

    def named_parameters(self) -> dict[str, Parameter]:
        named = {p.name: p for p in self.parameters()}
        assert len(named) == len(self.parameters()), "duplicate parameter names"
        return named

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        if set(state) != set(named):
            missing, extra = set(named) - set(state), set(state) - set(named)
            raise ShapeError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in named.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data[...] = arr

    def _encode(self, x, valid, proj, stack, training, rng, trace) -> Tensor:
        h = nc.linear(Tensor(x), *proj)
        h = nc.add(h, Tensor(positional_encoding(x.shape[-2], self.cfg.d_model)))
        for layer in stack:
            h = layer.forward(h, None, valid, None, training, rng, trace)
        return h

    def forward(
        self,
        batch: Batch,
        training: bool = False,
        rng=None,
        trace: AttentionTrace | None = None,
    ) -> Tensor:
        """Logits of shape (B, n_classes) for a collated batch."""
        cfg = self.cfg
        if batch.audio.shape[-1] != cfg.audio_in_dim or batch.text.shape[-1] != cfg.text_in_dim:
            raise ShapeError(
                f"input widths {batch.audio.shape[-1]}/{batch.text.shape[-1]} do not match "
                f"config {cfg.audio_in_dim}/{cfg.text_in_dim}"
            )
        if not (batch.audio_valid.any(axis=-1).all() and batch.text_valid.any(axis=-1).all()):
            raise EmptyContextError("every sample needs at least one valid position per modality")
        if batch.audio.shape[1] > cfg.max_audio_len or batch.text.shape[1] > cfg.max_text_len:
            warnings.warn("batch exceeds configured maximum lengths; truncating", TruncationWarning)
            la, lt = cfg.max_audio_len, cfg.max_text_len
            batch = replace(
                batch,
                audio=batch.audio[:, :la],
                audio_valid=batch.audio_valid[:, :la],
                text=batch.text[:, :lt],
                text_valid=batch.text_valid[:, :lt],
            )
        audio = self._encode(batch.audio, batch.audio_valid, self.audio_proj, self.feat_audio, training, rng, trace)
        text = self._encode(batch.text, batch.text_valid, self.text_proj, self.feat_text, training, rng, trace)
        if cfg.query_modality == "audio":
            a, a_valid, b, b_valid = audio, batch.audio_valid, text, batch.text_valid
        else:
            a, a_valid, b, b_valid = text, batch.text_valid, audio, batch.audio_valid
        fused = self.interaction.forward(a, b, a_valid, b_valid, training, rng, trace)
        fused = self.deep.forward(fused, a_valid, training, rng, trace)
        weights = a_valid / a_valid.sum(axis=-1, keepdims=True)
        pooled = nc.matmul(Tensor(weights[:, None, :]), fused)  # (B, 1, d)
        pooled = nc.reshape(pooled, (pooled.shape[0], cfg.d_model))
        return nc.linear(pooled, *self.classifier)

    def forward_samples(self, samples, training=False, rng=None, trace=None) -> Tensor:
        batch = collate(samples, self.cfg.max_audio_len, self.cfg.max_text_len)
        return self.forward(batch, training, rng, trace)

    def forward_single(self, audio: np.ndarray, text: np.ndarray, training=False, rng=None, trace=None) -> Tensor:
        """Logits of shape (n_classes,) for one unpadded pair of sequences."""
        from .data import Sample

        logits = self.forward_samples([Sample("x", np.asarray(audio), np.asarray(text), 0)], training, rng, trace)
        return nc.reshape(logits, (self.cfg.n_classes,))


def predict(logits) -> EmotionLabel | list[EmotionLabel]:
    """Argmax with ties resolved toward the lowest class id."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=float)
    if arr.ndim == 1:
        return EmotionLabel(int(np.argmax(arr)))
    return [EmotionLabel(int(i)) for i in np.argmax(arr, axis=-1)]


# checkpoints: <dir>/manifest.json + <dir>/params.bin

PARAMS_FILE = "params.bin"
MANIFEST_FILE = "manifest.json"


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict[str, np.ndarray]
    seed: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def build(self) -> KSTransformerClassifier:
        model = KSTransformerClassifier(self.config, self.seed)
        model.load_state_dict(self.state)
        return model

    @classmethod
    def from_model(cls, model: KSTransformerClassifier, **kw) -> "Checkpoint":
        return cls(model.cfg, model.state_dict(), seed=model.seed, **kw)


def encode_params(state: dict[str, np.ndarray], order: list[str]) -> bytes:
    parts = []
    for name in order:
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_params(buf: bytes, order: list[str]) -> dict[str, np.ndarray]:
    state, pos = {}, 0
    for expected in order:
        try:
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 4)
            pos += 4 + 4 * ndim
            size = math.prod(shape)
            if pos + 8 * size > len(buf):
                raise struct.error("payload")
        except struct.error:
            raise FormatError(f"truncated parameter blob at byte {pos}") from None
        if name != expected:
            raise FormatError(f"parameter blob order mismatch: found {name!r}, manifest declares {expected!r}")
        state[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * size
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes in parameter blob")
    return state


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    order = list(ckpt.state)
    manifest = {
        "format": "kstransformer-checkpoint",
        "version": 1,
        "config": ckpt.config.to_dict(),
        "seed": ckpt.seed,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "param_names": order,
        "extra": ckpt.extra,
    }
    _atomic_write(directory / PARAMS_FILE, encode_params(ckpt.state, order))
    _atomic_write(directory / MANIFEST_FILE, json.dumps(manifest, indent=2).encode("utf-8"))
    return directory


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST_FILE).read_text())
    except FileNotFoundError:
        raise FormatError(f"no {MANIFEST_FILE} in {directory}") from None
    if manifest.get("format") != "kstransformer-checkpoint":
        raise FormatError(f"{directory} is not a checkpoint directory")
    state = decode_params((directory / PARAMS_FILE).read_bytes(), manifest["param_names"])
    return Checkpoint(
        ModelConfig.from_dict(manifest["config"]),
        state,
        seed=manifest.get("seed", 0),
        epoch=manifest.get("epoch", 0),
        history=manifest.get("history", []),
        extra=manifest.get("extra", {}),
    )


def dense_twin(cfg: ModelConfig) -> ModelConfig:
    """The same architecture with every key-sparse layer made dense."""
    return replace(cfg, sparse_ratio=None)
