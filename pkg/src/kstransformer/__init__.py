"""Key-sparse Transformer attention and cascaded cross-attention fusion for two-modality classification."""

__version__ = "0.1.0"

from .attention import (  # noqa: E402
    AttentionTrace,
    MultiHeadAttention,
    column_importance,
    key_sparse_attention,
    scaled_dot_attention,
    topk_mask,
)
from .data import Dataset, Sample, SynthSpec, generate_synthetic, load_dataset, save_dataset  # noqa: E402
from .labels import EMOTIONS, EmotionLabel  # noqa: E402
from .model import KSTransformerClassifier, ModelConfig, predict, preset  # noqa: E402
from .trainer import TrainConfig, evaluate, lr_at, sweep, train  # noqa: E402
