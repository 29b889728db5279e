"""Multilabel training loop and ranking metrics."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import latent_encoder as le
from .errors import ConfigurationError, NumericFailure, PreconditionError, UndefinedMetricError
from .modality_forge import SplitManifest
from .tokenizer import Codecs, Sample, tokenize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    warmup_epochs: int = 5
    peak_lr: float = 3e-4
    batch_size: int = 32  # the reference run used 1024 over two GPUs
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    eval_batch_size: int = 32

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError("warmup_epochs must be in [0, epochs)")
        if not self.peak_lr > 0:
            raise ConfigurationError("peak_lr must be > 0")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigurationError("batch sizes must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# loss / schedule


def bce_loss(logits, target) -> tuple[float, np.ndarray]:
    """Mean-over-classes binary cross-entropy and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    loss = np.mean(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z))))
    sig = np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))
    return float(loss), (sig - t) / z.size


def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    return int(round(total_steps * cfg.warmup_epochs / cfg.epochs))


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``peak_lr`` then cosine annealing to exactly 0."""
    if not 0 <= step <= total_steps:
        raise PreconditionError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, cfg)
    if step < w:
        return cfg.peak_lr * step / w
    if total_steps == w:
        return cfg.peak_lr
    progress = (step - w) / (total_steps - w)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# metrics


def average_precision(scores, labels) -> float:
    """Mean of precision@k over the ranks k of positive items (scores descending).

    Ties keep the original order. Raises UndefinedMetricError without positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise PreconditionError("scores and labels must be 1-D and of equal length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision is undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    return math.fsum(np.arange(1, n_pos + 1) / ranks) / n_pos


def per_class_ap(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """AP per column; NaN where a class has no positives."""
    out = np.full(scores.shape[1], np.nan)
    for c in range(scores.shape[1]):
        if labels[:, c].any():
            out[c] = average_precision(scores[:, c], labels[:, c])
    return out


def mean_average_precision(aps: np.ndarray) -> float:
    defined = aps[~np.isnan(aps)]
    if defined.size < aps.size:
        warnings.warn(
            f"{aps.size - defined.size} class(es) have no positives and are excluded from mAP", stacklevel=2
        )
    return float(defined.mean()) if defined.size else float("nan")


def subset_accuracy(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    """Fraction of samples whose full label vector is predicted exactly."""
    return float(np.mean(np.all((probs >= threshold) == labels.astype(bool), axis=1)))


def micro_accuracy(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    """Fraction of (sample, class) decisions that are correct."""
    return float(np.mean((probs >= threshold) == labels.astype(bool)))


@dataclass
class EvalReport:
    per_class_ap: list[float]
    mAP: float
    subset_accuracy: float
    micro_accuracy: float
    num_samples: int
    modality: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_ap"] = [None if math.isnan(a) else a for a in self.per_class_ap]
        return d


def report_from_scores(logits: np.ndarray, labels: np.ndarray, modality: str = "") -> EvalReport:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    probs = 1.0 / (1.0 + np.exp(-logits))
    aps = per_class_ap(logits, labels)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m = mean_average_precision(aps)
    if np.isnan(aps).any():
        log.warning("%s: %d class(es) without positives excluded from mAP", modality or "eval", int(np.isnan(aps).sum()))
    return EvalReport(
        per_class_ap=aps.tolist(),
        mAP=m,
        subset_accuracy=subset_accuracy(probs, labels),
        micro_accuracy=micro_accuracy(probs, labels),
        num_samples=int(labels.shape[0]),
        modality=modality,
    )


# batching


def group_by_modality(samples: Sequence[Sample]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        key = s.modality.name or repr(s.modality)
        groups.setdefault(key, []).append(i)
    return groups


def stack_tokens(samples: Sequence[Sample], codecs: Codecs, dtype=np.float32) -> np.ndarray:
    return np.stack([tokenize(s, codecs, dtype).tokens for s in samples])


def predict(
    params: le.ParameterStore, samples: Sequence[Sample], codecs: Codecs, batch_size: int = 32
) -> np.ndarray:
    """Eval-mode logits (no pruning) for every sample, in input order."""
    logits = np.zeros((len(samples), params.config.num_classes))
    for idx in group_by_modality(samples).values():
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            tok = stack_tokens([samples[i] for i in chunk], codecs, params.dtype)
            logits[chunk] = le.predict_logits(tok, params)
    return logits


def evaluate(
    params: le.ParameterStore, samples: Sequence[Sample], codecs: Codecs, modality: str = "", batch_size: int = 32
) -> EvalReport:
    if not samples:
        raise PreconditionError("cannot evaluate an empty dataset")
    logits = predict(params, samples, codecs, batch_size)
    labels = np.stack([s.target for s in samples])
    return report_from_scores(logits, labels, modality)


# optimizer


class AdamW:
    """Adam with decoupled weight decay on matrices (ndim >= 2) only."""

    def __init__(self, params: le.ParameterStore, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}

    def step(self, params: le.ParameterStore, grads: Mapping[str, np.ndarray], lr: float):
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1**self.t
        bc2 = 1 - c.beta2**self.t
        for k, p in params.arrays.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            if p.ndim >= 2 and c.weight_decay:
                p -= lr * c.weight_decay * p
            p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)).astype(p.dtype)


# training


@dataclass
class TrainResult:
    params: le.ParameterStore
    best_params: le.ParameterStore
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    total_steps: int = 0


def _batches(groups: Mapping[str, list[int]], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    out = []
    for key in sorted(groups):
        idx = list(groups[key])
        rng.shuffle(idx)
        out.extend(idx[i : i + batch_size] for i in range(0, len(idx), batch_size))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def steps_per_epoch(samples: Sequence[Sample], batch_size: int) -> int:
    return sum(math.ceil(len(v) / batch_size) for v in group_by_modality(samples).values())


def step_seed(run_seed: int, step: int, position: int) -> int:
    ss = np.random.SeedSequence([int(run_seed), int(step), int(position)])
    return int(ss.generate_state(1, np.uint64)[0])


def train(
    train_samples: Sequence[Sample],
    codecs: Codecs,
    cfg: TrainConfig,
    encoder_cfg: le.EncoderConfig,
    val_samples: Sequence[Sample] = (),
    on_epoch: Callable[[dict, le.ParameterStore, bool], None] | None = None,
    params: le.ParameterStore | None = None,
) -> TrainResult:
    """Seeded minibatch training; batches never mix modalities.

    ``on_epoch(record, params, is_best)`` runs after every epoch (checkpointing
    and logging hooks). The best-validation parameters are kept; without a
    validation set "best" means lowest mean training loss.
    """
    if not train_samples:
        raise PreconditionError("no training samples")
    params = params or le.init_parameters(encoder_cfg, codecs.token_dim, cfg.seed)
    if params.token_dim != codecs.token_dim:
        raise ConfigurationError(f"parameters expect token width {params.token_dim}, codecs give {codecs.token_dim}")
    opt = AdamW(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    groups = group_by_modality(train_samples)
    spe = steps_per_epoch(train_samples, cfg.batch_size)
    total = spe * cfg.epochs
    result = TrainResult(params=params, best_params=params.copy(), total_steps=total)
    best_score = -math.inf
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for batch in _batches(groups, cfg.batch_size, rng):
            batch_samples = [train_samples[i] for i in batch]
            tok = stack_tokens(batch_samples, codecs, params.dtype)
            targets = np.stack([s.target for s in batch_samples])
            seeds = [step_seed(cfg.seed, step, i) for i in batch]
            loss, grads = le.loss_and_grads(params, tok, targets, encoder_cfg, "train", seeds)
            if not math.isfinite(loss):
                raise NumericFailure(f"epoch {epoch} step {step} loss")
            step += 1
            opt.step(params, grads, lr_at(step, total, cfg))
            losses.append(loss)
        record = {"epoch": epoch, "lr": lr_at(step, total, cfg), "train_loss": float(np.mean(losses))}
        if val_samples:
            rep = evaluate(params, val_samples, codecs, "val", cfg.eval_batch_size)
            record.update(val_mAP=rep.mAP, val_subset_acc=rep.subset_accuracy, val_micro_acc=rep.micro_accuracy)
            score = rep.mAP if math.isfinite(rep.mAP) else -record["train_loss"]
        else:
            record.update(val_mAP=None, val_subset_acc=None, val_micro_acc=None)
            score = -record["train_loss"]
        is_best = score > best_score
        if is_best:
            best_score = score
            result.best_epoch = epoch
            result.best_params = params.copy()
        result.history.append(record)
        log.info("epoch %d: %s", epoch, json.dumps(record))
        if on_epoch is not None:
            on_epoch(record, params, is_best)
    return result
