"""Embedding-sequence datasets: the KSEF binary container, batching, and a synthetic generator.

KSEF v1 layout (all integers little-endian)::

    b"KSEF"  u8 version=1  u32 record_count
    u32 header_len  header_len bytes of UTF-8 JSON {"audio_dim", "text_dim", "label_names"}
    record_count times:
        u32 id_len  id bytes (UTF-8)  u8 label  u32 L_a  u32 L_t
        L_a*audio_dim float32  L_t*text_dim float32
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptFileError, EmptyContextError, FormatError, SchemaError, ShapeError
from .labels import EMOTIONS
from .prng import SplitMix64

log = logging.getLogger(__name__)

MAGIC = b"KSEF"
VERSION = 1
_F32 = np.dtype("<f4")


class TruncationWarning(UserWarning):
    pass


@dataclass
class Sample:
    id: str
    audio: np.ndarray  # (L_a, audio_dim), float32-representable values held as float64
    text: np.ndarray  # (L_t, text_dim)
    label: int
    meta: dict = field(default_factory=dict, compare=False, repr=False)


@dataclass
class Dataset:
    samples: list[Sample]
    audio_dim: int
    text_dim: int
    label_names: tuple[str, ...] = EMOTIONS

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Dataset(self.samples[idx], self.audio_dim, self.text_dim, self.label_names)
        return self.samples[idx]

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.audio_dim, self.text_dim, self.label_names)

    def histogram(self) -> dict[str, int]:
        counts = Counter(s.label for s in self.samples)
        return {name: counts.get(i, 0) for i, name in enumerate(self.label_names)}

    def find(self, sample_id: str) -> Sample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)

    def split(self, dev_fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Disjoint (train, dev) split after a seeded shuffle."""
        order = SplitMix64(seed).permutation(len(self.samples))
        n_dev = int(round(dev_fraction * len(order)))
        return self.subset(sorted(order[n_dev:])), self.subset(sorted(order[:n_dev]))


# KSEF serialization


def encode_dataset(ds: Dataset) -> bytes:
    header = json.dumps(
        {"audio_dim": ds.audio_dim, "text_dim": ds.text_dim, "label_names": list(ds.label_names)},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    parts = [MAGIC, struct.pack("<BI", VERSION, len(ds.samples)), struct.pack("<I", len(header)), header]
    for s in ds.samples:
        if s.audio.ndim != 2 or s.audio.shape[1] != ds.audio_dim:
            raise ShapeError(f"sample {s.id!r}: audio shape {s.audio.shape}, expected (*, {ds.audio_dim})")
        if s.text.ndim != 2 or s.text.shape[1] != ds.text_dim:
            raise ShapeError(f"sample {s.id!r}: text shape {s.text.shape}, expected (*, {ds.text_dim})")
        if not 0 <= s.label < ds.n_classes:
            raise SchemaError(f"sample {s.id!r}: label {s.label} outside 0..{ds.n_classes - 1}")
        sid = s.id.encode("utf-8")
        parts.append(struct.pack("<I", len(sid)))
        parts.append(sid)
        parts.append(struct.pack("<BII", s.label, s.audio.shape[0], s.text.shape[0]))
        parts.append(np.ascontiguousarray(s.audio, dtype=_F32).tobytes())
        parts.append(np.ascontiguousarray(s.text, dtype=_F32).tobytes())
    return b"".join(parts)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def decode_dataset(buf: bytes) -> Dataset:
    mv = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(mv):
            raise CorruptFileError(f"truncated {what}: need {n} bytes, {len(mv) - pos} left", pos)
        chunk = mv[pos : pos + n]
        pos += n
        return chunk

    if len(mv) < 4 or bytes(mv[:4]) != MAGIC:
        raise FormatError("not a KSEF file (bad magic bytes)")
    pos = 4
    (version,) = struct.unpack("<B", take(1, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported KSEF version {version}")
    (count,) = struct.unpack("<I", take(4, "record count"))
    (hlen,) = struct.unpack("<I", take(4, "header length"))
    hstart = pos
    try:
        header = json.loads(bytes(take(hlen, "header")).decode("utf-8"))
        audio_dim, text_dim = int(header["audio_dim"]), int(header["text_dim"])
        label_names = tuple(header["label_names"])
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, CorruptFileError):
            raise
        raise CorruptFileError(f"malformed header ({exc})", hstart) from None
    samples = []
    for _ in range(count):
        rec_start = pos
        (id_len,) = struct.unpack("<I", take(4, "id length"))
        sid = bytes(take(id_len, "id")).decode("utf-8")
        label, la, lt = struct.unpack("<BII", take(9, "record header"))
        if label >= len(label_names):
            raise SchemaError(f"record {sid!r} at byte {rec_start}: unknown label id {label}")
        audio = np.frombuffer(take(4 * la * audio_dim, "audio payload"), dtype=_F32)
        text = np.frombuffer(take(4 * lt * text_dim, "text payload"), dtype=_F32)
        samples.append(
            Sample(
                sid,
                audio.astype(np.float64).reshape(la, audio_dim),
                text.astype(np.float64).reshape(lt, text_dim),
                int(label),
            )
        )
    if pos != len(mv):
        raise CorruptFileError(f"{len(mv) - pos} trailing bytes after last record", pos)
    return Dataset(samples, audio_dim, text_dim, label_names)


def load_dataset(path) -> Dataset:
    ds = decode_dataset(Path(path).read_bytes())
    log.info("loaded %d samples from %s; per-class counts %s", len(ds), path, ds.histogram())
    return ds


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# batching


@dataclass
class Batch:
    audio: np.ndarray  # (B, La, audio_dim), zero padded
    audio_valid: np.ndarray  # (B, La) bool
    text: np.ndarray
    text_valid: np.ndarray
    labels: np.ndarray  # (B,)
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def _pad(seqs: list[np.ndarray], dim: int) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s) for s in seqs)
    out = np.zeros((len(seqs), n, dim))
    valid = np.zeros((len(seqs), n), dtype=bool)
    for b, s in enumerate(seqs):
        out[b, : len(s)] = s
        valid[b, : len(s)] = True
    return out, valid


def collate(samples, max_audio_len: int | None = None, max_text_len: int | None = None) -> Batch:
    """Pad samples into one batch, truncating over-length sequences with a warning."""
    audio, text = [], []
    for s in samples:
        if len(s.audio) < 1 or len(s.text) < 1:
            raise EmptyContextError(f"sample {s.id!r} has an empty modality")
        a, t = s.audio, s.text
        if max_audio_len is not None and len(a) > max_audio_len:
            warnings.warn(f"{s.id}: audio length {len(a)} truncated to {max_audio_len}", TruncationWarning)
            a = a[:max_audio_len]
        if max_text_len is not None and len(t) > max_text_len:
            warnings.warn(f"{s.id}: text length {len(t)} truncated to {max_text_len}", TruncationWarning)
            t = t[:max_text_len]
        audio.append(a)
        text.append(t)
    a_arr, a_valid = _pad(audio, samples[0].audio.shape[1])
    t_arr, t_valid = _pad(text, samples[0].text.shape[1])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return Batch(a_arr, a_valid, t_arr, t_valid, labels, [s.id for s in samples])


def decollate(batch: Batch) -> list[tuple[np.ndarray, np.ndarray]]:
    """Recover the per-sample (audio, text) arrays without padding."""
    return [
        (batch.audio[b, batch.audio_valid[b]], batch.text[b, batch.text_valid[b]])
        for b in range(len(batch))
    ]


def iter_batches(ds: Dataset, batch_size: int, order=None):
    idx = np.arange(len(ds)) if order is None else order
    for start in range(0, len(idx), batch_size):
        yield [ds.samples[i] for i in idx[start : start + batch_size]]


# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a dataset where only a few tokens per sequence carry the class.

    Each sample holds ``signal_token_count`` tokens equal to a class prototype
    scaled by ``signal_strength`` (per modality), ``noise_token_count``
    distractor tokens drawn from a class-independent pool at
    ``noise_strength``, and Gaussian background elsewhere.
    """

    n_samples: int = 200
    class_count: int = 4
    signal_token_count: int = 2
    noise_token_count: int = 0
    signal_strength: float = 6.0
    noise_strength: float = 6.0
    background_std: float = 1.0
    audio_dim: int = 16
    text_dim: int = 12
    audio_len: tuple[int, int] = (8, 16)
    text_len: tuple[int, int] = (4, 8)
    seed: int = 0
    class_weights: tuple[float, ...] | None = None
    distractor_pool: int = 8
    id_prefix: str = "s"

    def __post_init__(self):
        if self.signal_token_count < 1:
            raise ConfigError("signal_token_count must be at least 1")
        need = self.signal_token_count + self.noise_token_count
        if min(self.audio_len[0], self.text_len[0]) < need:
            raise ConfigError(f"minimum sequence length must hold {need} signal+noise tokens")
        if self.audio_len[0] > self.audio_len[1] or self.text_len[0] > self.text_len[1]:
            raise ConfigError("length ranges must be (min, max) with min <= max")
        if self.class_weights is not None and len(self.class_weights) != self.class_count:
            raise ConfigError("class_weights needs one entry per class")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        for key in ("audio_len", "text_len", "class_weights"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _class_counts(spec: SynthSpec) -> list[int]:
    if spec.class_weights is None:
        base, rem = divmod(spec.n_samples, spec.class_count)
        return [base + (c < rem) for c in range(spec.class_count)]
    w = np.asarray(spec.class_weights, dtype=float)
    counts = np.floor(w / w.sum() * spec.n_samples).astype(int)
    for c in np.argsort(-w, kind="stable")[: spec.n_samples - counts.sum()]:
        counts[c] += 1
    return counts.tolist()


def generate_synthetic(spec: SynthSpec) -> Dataset:
    rng = SplitMix64(spec.seed)
    protos = {
        "audio": _unit_rows(rng.normal((spec.class_count, spec.audio_dim))),
        "text": _unit_rows(rng.normal((spec.class_count, spec.text_dim))),
    }
    pools = {
        "audio": _unit_rows(rng.normal((spec.distractor_pool, spec.audio_dim))),
        "text": _unit_rows(rng.normal((spec.distractor_pool, spec.text_dim))),
    }
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(_class_counts(spec))]).astype(int)
    labels = labels[rng.permutation(len(labels))]
    names = EMOTIONS if spec.class_count == len(EMOTIONS) else tuple(f"class{c}" for c in range(spec.class_count))
    width = len(str(max(spec.n_samples - 1, 0)))

    def sequence(modality: str, label: int, lo: int, hi: int, dim: int):
        length = int(rng.integers(lo, hi + 1))
        x = rng.normal((length, dim)) * spec.background_std
        chosen = rng.permutation(length)[: spec.signal_token_count + spec.noise_token_count]
        sig, noise = np.sort(chosen[: spec.signal_token_count]), np.sort(chosen[spec.signal_token_count :])
        x[sig] += spec.signal_strength * protos[modality][label]
        if len(noise):
            pick = rng.integers(0, spec.distractor_pool, (len(noise),))
            x[noise] += spec.noise_strength * pools[modality][pick]
        # KSEF stores float32; keep in-memory values identical to what a reload yields
        return x.astype(np.float32).astype(np.float64), sig, noise

    samples = []
    for n, label in enumerate(labels):
        a, a_sig, a_noise = sequence("audio", label, *spec.audio_len, spec.audio_dim)
        t, t_sig, t_noise = sequence("text", label, *spec.text_len, spec.text_dim)
        meta = {"audio_signal": a_sig, "text_signal": t_sig, "audio_noise": a_noise, "text_noise": t_noise}
        samples.append(Sample(f"{spec.id_prefix}{n:0{width}d}", a, t, int(label), meta))
    return Dataset(samples, spec.audio_dim, spec.text_dim, names)
