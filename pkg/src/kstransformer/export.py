"""Per-layer, per-head attention weights as JSON data for heatmaps."""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .attention import AttentionTrace
from .data import Sample
from .model import KSTransformerClassifier, predict

FORMAT = "kstransformer-attention"
_SHADES = " .:-=+*#%@"


def load_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("attention_export.schema.json").read_text())


def _layer_ratio(model: KSTransformerClassifier, layer: str):
    if layer.startswith("feat."):
        return None
    return model.cfg.sparse_ratio


def export_attention(model: KSTransformerClassifier, sample: Sample) -> dict:
    """Dense weights, key mask and masked weights for every attention call on one sample.

    Padding is trimmed, so ``rows``/``cols`` are the valid query/key counts.
    Layers without sparsity report an all-ones mask and ``sparse == dense``.
    """
    trace = AttentionTrace(record=True)
    logits = model.forward_samples([sample], training=False, trace=trace)
    entries = []
    for rec in trace.entries:
        dense = rec["dense"][0]  # drop batch axis: (heads, i, j)
        qv = rec["query_valid"][0] if rec["query_valid"] is not None else np.ones(dense.shape[1], bool)
        kv = rec["key_valid"][0] if rec["key_valid"] is not None else np.ones(dense.shape[2], bool)
        for h in range(dense.shape[0]):
            d = dense[h][np.ix_(qv, kv)]
            s = rec["sparse"][0, h][np.ix_(qv, kv)]
            m = np.ones(d.shape[1]) if rec["mask"] is None else rec["mask"][0, h][kv]
            entries.append(
                {
                    "layer": rec["layer"],
                    "head": h,
                    "rows": int(d.shape[0]),
                    "cols": int(d.shape[1]),
                    "sparse_ratio": None if rec["mask"] is None else _layer_ratio(model, rec["layer"]),
                    "dense": d.tolist(),
                    "mask": [int(x) for x in m],
                    "sparse": s.tolist(),
                }
            )
    return {
        "format": FORMAT,
        "version": 1,
        "sample_id": sample.id,
        "label": int(sample.label),
        "predicted": int(predict(logits.data[0])),
        "entries": entries,
    }


def render_grid(entry: dict, which: str = "sparse") -> str:
    """Plain-text heatmap: one character per weight, darker for larger values."""
    w = np.asarray(entry[which])
    top = w.max() if w.size and w.max() > 0 else 1.0
    idx = np.minimum((w / top * (len(_SHADES) - 1)).round().astype(int), len(_SHADES) - 1)
    lines = [f"{entry['layer']} head {entry['head']} ({which})"]
    lines.append("mask " + "".join("|" if m else "." for m in entry["mask"]))
    lines += ["     " + "".join(_SHADES[i] for i in row) for row in idx]
    return "\n".join(lines)
