"""End-to-end finite-difference checks of the full classifier with frozen sparse masks."""

from __future__ import annotations

from .attention import AttentionTrace
from .data import SynthSpec, collate, generate_synthetic
from .model import KSTransformerClassifier, preset
from .numcore import GradCheckReport, finite_diff_check
from .trainer import cross_entropy

# input widths and sequence lengths kept small so every entry can be probed
GRADCHECK_INPUTS = {
    "tiny": dict(audio_dim=6, text_dim=5, audio_len=(5, 7), text_len=(3, 5), n_samples=2),
    "small": dict(audio_dim=8, text_dim=6, audio_len=(6, 9), text_len=(3, 6), n_samples=2),
}
MAX_ENTRIES = {"tiny": None, "small": 24}


def model_gradcheck(name: str = "tiny", seed: int = 0, h: float = 1e-4, tol: float = 1e-3) -> GradCheckReport:
    """Gradient check of cross-entropy on a padded two-sample batch through every parameter.

    Masks chosen on the first forward pass are replayed on all perturbed passes,
    so the checked function is smooth in the parameters.
    """
    inputs = GRADCHECK_INPUTS[name]
    spec = SynthSpec(signal_strength=2.0, seed=seed, **inputs)
    ds = generate_synthetic(spec)
    cfg = preset(name, audio_in_dim=spec.audio_dim, text_in_dim=spec.text_dim)
    model = KSTransformerClassifier(cfg, seed)
    batch = collate(ds.samples, cfg.max_audio_len, cfg.max_text_len)
    trace = AttentionTrace(record=False, freeze=True)

    def loss():
        return cross_entropy(model.forward(batch, training=False, trace=trace), batch.labels)

    return finite_diff_check(
        loss, model.named_parameters(), h=h, tol=tol, max_entries=MAX_ENTRIES[name], seed=seed
    )
