"""Cross-dataset training, few-shot finetuning and zero-shot generation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetBundle, MetaDataset, compute_weights
from .errors import ConfigError, DataError, NumericError
from .model import LaTable, ModelConfig, build_context, context_for, load_checkpoint, make_batch, sample_rows, save_checkpoint
from .nn import Adam, backward, clip_grad_norm, cosine_lr

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    lr0: float = 5e-5
    batch_size: int = 32
    seed: int = 0
    eval_every: int = 1
    clip_norm: float = 1.0
    dataset_weighting: str = "sqrt"  # "sqrt": w_k ~ 1/sqrt(n_k); "none": every row counts once
    val_batch_size: int = 512

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs, batch_size and eval_every must be positive")
        if self.lr0 < 0:
            raise ConfigError(f"lr0 must be nonnegative, got {self.lr0}")
        if self.dataset_weighting not in ("sqrt", "none"):
            raise ConfigError(f"unknown dataset_weighting {self.dataset_weighting!r}")

    @classmethod
    def from_dict(cls, obj):
        return cls(**{k: obj[k] for k in cls.__dataclass_fields__ if k in obj})


@dataclass
class TrainResult:
    model: LaTable  # best-validation parameters (final ones without validation data)
    curve: list = field(default_factory=list)
    best_epoch: int = 0
    final_state: dict | None = None

    def write_curve(self, path):
        write_loss_curve(self.curve, path)


def write_loss_curve(curve, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in curve:
            val = "" if row["val_loss"] is None else f"{row['val_loss']:.9g}"
            writer.writerow([row["epoch"], f"{row['train_loss']:.9g}", val, f"{row['lr']:.9g}"])


def sampling_probabilities(meta: MetaDataset):
    """P(dataset k) proportional to n_k * w_k, which realizes per-row weights w_k in expectation."""
    mass = meta.sizes() * np.asarray(meta.weights, dtype=np.float64)
    return mass / mass.sum()


def epoch_schedule(probs, steps, rng):
    """Dataset index for each step of an epoch.

    Systematic sampling with a random offset, then shuffled: dataset k gets
    floor or ceil of steps * p_k batches, steps * p_k in expectation.
    """
    edges = np.cumsum(probs)
    edges[-1] = 1.0
    picks = np.searchsorted(edges, (rng.random() + np.arange(steps)) / steps, side="right")
    return rng.permutation(picks)


class _RowQueue:
    """Shuffled passes over one table's rows; a pass that cannot fill a batch is reshuffled."""

    def __init__(self, n, rng):
        self.n, self.rng = n, rng
        self.order, self.pos = rng.permutation(n), 0

    def take(self, size):
        if self.pos + size > self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
        rows = self.order[self.pos:self.pos + size]
        self.pos += size
        return rows


def steps_per_epoch(meta: MetaDataset, batch_size):
    return int(math.ceil(int(meta.sizes().sum()) / batch_size))


def _check_ready(meta):
    if not len(meta):
        raise DataError("nothing to train on: the metadataset is empty")
    for b in meta:
        if b.n_rows == 0:
            raise DataError(f"dataset {b.id!r} is empty")
        if not b.normalized and any(not f.is_categorical for f in b.features):
            raise DataError(f"dataset {b.id!r} must be normalized before training")


def validation_loss(model: LaTable, meta: MetaDataset, contexts, seed, batch_size=512):
    """Loss over every row with noise fixed by ``seed``; datasets weighted by n_k * w_k."""
    rng = np.random.default_rng(seed)
    total, mass = 0.0, 0.0
    p = model.frozen()
    for bundle, w, ctx in zip(meta.datasets, meta.weights, contexts):
        for lo in range(0, bundle.n_rows, batch_size):
            rows = np.arange(lo, min(bundle.n_rows, lo + batch_size))
            batch = make_batch(bundle, ctx, rows)
            t, en, ec = model.draw_noise(batch, rng)
            value = float(model.training_loss(batch, t, en, ec, p=p, weight=1.0).data)
            total += value * len(rows) * w
            mass += len(rows) * w
    return total / mass


def train(
    meta: MetaDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    embedder,
    val_meta: MetaDataset | None = None,
    init_model: LaTable | None = None,
    checkpoint_path=None,
) -> TrainResult:
    """Optimize the model on all tables of ``meta`` jointly.

    Each step trains on a batch of rows from one table; table k receives a
    share n_k * w_k / sum(n w) of the steps in every epoch. An epoch is ceil(total rows / batch size) steps.
    """
    _check_ready(meta)
    if train_config.dataset_weighting == "sqrt":
        meta = compute_weights(meta)
        if val_meta is not None:
            val_meta = compute_weights(val_meta)
    model = init_model.copy() if init_model is not None else LaTable(model_config)
    if model.config.d_f != embedder.dim:
        raise ConfigError(f"model expects d_f={model.config.d_f}, embedder produces {embedder.dim}")
    contexts = [context_for(b, embedder) for b in meta]
    val_contexts = [context_for(b, embedder) for b in val_meta] if val_meta is not None else None

    rng = np.random.default_rng(train_config.seed)
    probs = sampling_probabilities(meta)
    per_epoch = steps_per_epoch(meta, train_config.batch_size)
    total_steps = per_epoch * train_config.epochs
    opt = Adam()
    queues = [_RowQueue(b.n_rows, rng) for b in meta]
    curve = []
    best = (math.inf, 0, model.store.state_dict())
    step = 0
    for epoch in range(1, train_config.epochs + 1):
        losses = []
        for k in epoch_schedule(probs, per_epoch, rng):
            k = int(k)
            bundle = meta.datasets[k]
            rows = queues[k].take(min(train_config.batch_size, bundle.n_rows))
            batch = make_batch(bundle, contexts[k], rows)
            t, en, ec = model.draw_noise(batch, rng)
            lr = cosine_lr(step, total_steps, train_config.lr0)
            model.store.zero_grad()
            loss = model.training_loss(batch, t, en, ec, weight=1.0)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, step {step} (dataset {bundle.id!r}, lr {lr:.3g})")
            backward(loss)
            grads = model.store.grads()
            clip_grad_norm(grads, train_config.clip_norm)
            opt.step(model.store, grads, lr)
            losses.append(value)
            step += 1
        val = None
        if val_meta is not None and (epoch % train_config.eval_every == 0 or epoch == train_config.epochs):
            val = validation_loss(model, val_meta, val_contexts, train_config.seed + 1, train_config.val_batch_size)
            if val < best[0]:
                best = (val, epoch, model.store.state_dict())
        curve.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val, "lr": lr})
        log.info("epoch %d train %.4f val %s", epoch, curve[-1]["train_loss"], "-" if val is None else f"{val:.4f}")

    final_state = model.store.state_dict()
    best_epoch = train_config.epochs
    if val_meta is not None and best[1] > 0:
        model.store.load_state_dict(best[2])
        best_epoch = best[1]
    result = TrainResult(model, curve, best_epoch, final_state)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, extra={"best_epoch": best_epoch})
    return result


def finetune(
    checkpoint,
    target: DatasetBundle,
    n_samples: int,
    train_config: TrainConfig,
    embedder,
    val: DatasetBundle | None = None,
    checkpoint_path=None,
) -> TrainResult:
    """Continue training a pretrained model on ``n_samples`` rows of ``target``.

    ``checkpoint`` is a path or a :class:`LaTable`; neither is modified.
    """
    if n_samples <= 0:
        raise DataError(f"n_samples must be positive, got {n_samples}")
    if n_samples > target.n_rows:
        raise DataError(f"n_samples={n_samples} exceeds the {target.n_rows} available rows")
    model = load_checkpoint(checkpoint)[0] if isinstance(checkpoint, (str, Path)) else checkpoint
    rng = np.random.default_rng(train_config.seed)
    rows = np.sort(rng.choice(target.n_rows, size=n_samples, replace=False))
    reduced = target.take(rows)
    val_meta = MetaDataset((val,)) if val is not None else None
    return train(MetaDataset((reduced,)), model.config, train_config, embedder, val_meta, model, checkpoint_path)


def zero_shot_generate(checkpoint, features, description, embedder, n, seed=0, argmax=False) -> DatasetBundle:
    """Generate rows for an unseen schema from its metadata alone.

    Numerical features must carry mean/std and categorical features their
    allowed categories; the result is on the original scale.
    """
    model = load_checkpoint(checkpoint)[0] if isinstance(checkpoint, (str, Path)) else checkpoint
    features = tuple(features)
    lacking = [f.name for f in features if not f.is_categorical and not f.has_stats]
    if lacking:
        raise DataError(f"zero-shot generation needs mean/std for numerical feature(s) {lacking}")
    ctx = build_context(features, description, embedder)
    return sample_rows(model, ctx, n, seed, argmax=argmax).denormalized()
