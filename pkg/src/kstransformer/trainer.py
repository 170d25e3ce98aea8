"""SGD training with step-decay learning rate, cross-entropy, WA/UA metrics and ablation sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .data import Dataset, collate, iter_batches
from .errors import ConfigError, ContractError, DivergenceError, KSError
from .model import Checkpoint, KSTransformerClassifier, ModelConfig
from .numcore import Tensor
from .prng import SplitMix64, derive_seed

log = logging.getLogger(__name__)

LR_IEMOCAP = 5e-4
LR_LSSED = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = LR_IEMOCAP
    decay_factor: float = 0.5
    decay_every: int = 30
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    eval_split: float = 0.2
    repeats: int = 1
    grad_clip: float | None = None
    eval_threads: int = 1

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.batch_size < 1 or self.decay_every < 1 or self.epochs < 0 or self.repeats < 1:
            raise ConfigError("batch_size, decay_every and repeats must be >= 1; epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch (a 1-D logit vector is a batch of one)."""
    z = logits.data
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if len(y) != len(z2):
        raise ContractError(f"cross_entropy: {len(z2)} logit rows but {len(y)} labels")
    m = z2.max(axis=-1, keepdims=True)
    rows = np.arange(len(y))
    # non-finite logits yield a non-finite loss, which the trainer reports itself
    with np.errstate(invalid="ignore", over="ignore"):
        lse = m[:, 0] + np.log(np.exp(z2 - m).sum(axis=-1))
        loss = float(np.mean(lse - z2[rows, y]))
        probs = np.exp(z2 - lse[:, None])

    def bw(g):
        grad = probs.copy()
        grad[rows, y] -= 1.0
        grad *= g / len(y)
        return (grad[0] if single else grad,)

    return nc.from_op(np.array(loss), (logits,), bw)


def sgd_step(params, lr: float) -> None:
    """``p <- p - lr * grad`` for every parameter, then clear the gradients."""
    params = list(params)
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise ContractError(f"sgd_step: no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    for p in params:
        p.data -= lr * p.grad
        p.grad = None


def _clip(params, max_norm: float) -> float:
    norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm
    return norm


# metrics


@dataclass
class MetricReport:
    wa: float
    ua: float
    confusion: np.ndarray  # rows: true class, columns: predicted
    per_class_recall: list[float | None]

    @classmethod
    def from_confusion(cls, confusion: np.ndarray) -> "MetricReport":
        confusion = np.asarray(confusion, dtype=np.int64)
        total = confusion.sum()
        if total == 0:
            raise ContractError("metrics need at least one sample")
        support = confusion.sum(axis=1)
        recall = [float(confusion[c, c] / support[c]) if support[c] else None for c in range(len(support))]
        present = [r for r in recall if r is not None]
        return cls(float(np.trace(confusion) / total), float(np.mean(present)), confusion, recall)

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes: int) -> "MetricReport":
        conf = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(conf, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cls.from_confusion(conf)

    def to_dict(self) -> dict:
        return {
            "wa": self.wa,
            "ua": self.ua,
            "confusion": self.confusion.tolist(),
            "per_class_recall": self.per_class_recall,
        }


def _confusion_for(model, samples, n_classes) -> np.ndarray:
    logits = model.forward_samples(samples, training=False)
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    pred = np.argmax(logits.data, axis=-1)
    np.add.at(conf, ([s.label for s in samples], pred), 1)
    return conf


def evaluate(model: KSTransformerClassifier, dataset: Dataset, batch_size: int = 32, threads: int = 1) -> MetricReport:
    """Deterministic confusion matrix, WA and UA; batches may be spread over threads."""
    if len(dataset) == 0:
        raise ContractError("evaluate: empty dataset")
    n = model.cfg.n_classes
    chunks = list(iter_batches(dataset, batch_size))
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _confusion_for(model, c, n), chunks))
    else:
        parts = [_confusion_for(model, c, n) for c in chunks]
    return MetricReport.from_confusion(sum(parts))


def threads_from_env(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("KS_THREADS", default)))
    except ValueError:
        return default


# training


@dataclass
class TrainResult:
    best: Checkpoint
    history: list[dict]
    best_report: MetricReport | None = None


def train(
    model: KSTransformerClassifier,
    train_set: Dataset,
    dev_set: Dataset,
    cfg: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Plain SGD over shuffled mini-batches, keeping the parameters with the best dev UA.

    Raises :class:`DivergenceError` (carrying the last good checkpoint) on a non-finite loss.
    """
    if len(train_set) == 0:
        raise ContractError("train: empty training set")
    ids_train = {s.id for s in train_set}
    if any(s.id in ids_train for s in dev_set):
        raise ContractError("train: train and dev sets share sample ids")
    params = model.trainable_parameters()
    shuffle_rng = SplitMix64(derive_seed(cfg.seed, 1))
    dropout_rng = SplitMix64(derive_seed(cfg.seed, 2))
    best = Checkpoint.from_model(model, epoch=0)
    best_ua, best_report = -1.0, None
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = shuffle_rng.permutation(len(train_set))
        total, seen = 0.0, 0
        last_good = model.state_dict()
        for samples in iter_batches(train_set, cfg.batch_size, order):
            batch = collate(samples, model.cfg.max_audio_len, model.cfg.max_text_len)
            logits = model.forward(batch, training=True, rng=dropout_rng)
            loss = cross_entropy(logits, batch.labels)
            value = float(loss.data)
            if not math.isfinite(value):
                diag = {"epoch": epoch, "lr": lr, "loss": value, "batch_ids": batch.ids[:5]}
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}",
                    checkpoint=Checkpoint(model.cfg, last_good, model.seed, epoch, history),
                    diagnostic=diag,
                )
            last_good = model.state_dict()
            nc.backward(loss)
            if cfg.grad_clip is not None:
                _clip(params, cfg.grad_clip)
            sgd_step(params, lr)
            total += value * len(samples)
            seen += len(samples)
        row = {"epoch": epoch, "lr": lr, "train_loss": total / seen}
        if len(dev_set):
            report = evaluate(model, dev_set, cfg.batch_size, cfg.eval_threads)
            row.update(dev_wa=report.wa, dev_ua=report.ua)
            if report.ua > best_ua:
                best_ua, best_report = report.ua, report
                best = Checkpoint.from_model(model, epoch=epoch + 1)
        history.append(row)
        log.info("epoch %d lr %.3g loss %.4f dev UA %s", epoch, lr, row["train_loss"], row.get("dev_ua"))
        if on_epoch is not None:
            on_epoch(row)
    if not len(dev_set) and cfg.epochs:
        best = Checkpoint.from_model(model, epoch=cfg.epochs)
    best.history = history
    return TrainResult(best, history, best_report)


@dataclass
class RepeatSummary:
    results: list[TrainResult]
    seeds: list[int]

    def _values(self, key: str) -> np.ndarray:
        return np.array([getattr(r.best_report, key) if r.best_report else float("nan") for r in self.results])

    @property
    def mean_ua(self) -> float:
        return float(np.mean(self._values("ua")))

    @property
    def std_ua(self) -> float:
        return float(np.std(self._values("ua")))

    @property
    def mean_wa(self) -> float:
        return float(np.mean(self._values("wa")))

    @property
    def std_wa(self) -> float:
        return float(np.std(self._values("wa")))


def train_repeats(model_cfg: ModelConfig, train_set, dev_set, cfg: TrainConfig) -> RepeatSummary:
    """Run ``cfg.repeats`` independent trainings with seeds derived from ``cfg.seed``."""
    results, seeds = [], []
    for r in range(cfg.repeats):
        seed = cfg.seed if cfg.repeats == 1 else derive_seed(cfg.seed, 100 + r)
        model = KSTransformerClassifier(model_cfg, seed)
        results.append(train(model, train_set, dev_set, replace(cfg, seed=seed)))
        seeds.append(seed)
    return RepeatSummary(results, seeds)


# sweeps

SWEEP_FIELDS = {"sparsity": "sparse_ratio", "ccab": "n_ccab"}
SWEEP_COLUMN = {"sparsity": "ratio", "ccab": "amount"}
SPARSITY_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
CCAB_GRID = (0, 1, 2, 3, 4)


@dataclass
class SweepTable:
    kind: str
    rows: list[dict] = field(default_factory=list)

    @property
    def column(self) -> str:
        return SWEEP_COLUMN[self.kind]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([self.column, "WA", "UA"])
        for row in self.rows:
            wa = "" if row.get("wa") is None else f"{row['wa']:.6f}"
            ua = "" if row.get("ua") is None else f"{row['ua']:.6f}"
            writer.writerow([row["value"], wa, ua])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "column": self.column, "rows": self.rows}, indent=2)


def sweep(
    kind: str,
    values: Sequence,
    base_model: ModelConfig,
    train_cfg: TrainConfig,
    train_set: Dataset,
    dev_set: Dataset,
) -> SweepTable:
    """Train one model per value with a shared seed and data; failed cells are recorded, not fatal."""
    if kind not in SWEEP_FIELDS:
        raise ConfigError(f"sweep kind must be one of {sorted(SWEEP_FIELDS)}, got {kind!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    table = SweepTable(kind)
    for value in values:
        row = {"value": value, "wa": None, "ua": None, "error": None}
        try:
            mcfg = replace(base_model, **{SWEEP_FIELDS[kind]: value})
            summary = train_repeats(mcfg, train_set, dev_set, train_cfg)
            row.update(wa=summary.mean_wa, ua=summary.mean_ua)
            if train_cfg.repeats > 1:
                row.update(wa_std=summary.std_wa, ua_std=summary.std_ua)
        except KSError as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
            log.warning("sweep cell %s=%s failed: %s", kind, value, exc)
        table.rows.append(row)
    return table
