"""Batching, warm-up schedule, early-stopped training and user-tower refresh."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .datamodel import ImageRecord, InteractionRecord, UserRecord
from .encoding import EncodedBatch
from .model import TwoTowerModel
from .nn import NonFiniteGradientError, adagrad_step

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``model`` holds the last good parameters."""

    def __init__(self, msg, model: TwoTowerModel, history):
        super().__init__(msg)
        self.model = model
        self.history = history


@dataclass
class TrainConfig:
    batch_size: int = 256
    # one rate per epoch; the last entry is held for the remaining epochs
    lr_schedule: list[float] = field(default_factory=lambda: [1e-5, 1e-4, 1e-3, 1e-2])
    validation_fraction: float = 0.10
    patience: int = 2
    min_delta: float = 1e-4
    max_epochs: int = 30
    seed: int = 0
    freeze_image_tower: bool = False
    epsilon: float = 1e-7
    initial_accumulator: float = 0.1

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 so that in-batch negatives exist")
        if not self.lr_schedule or any(r <= 0 for r in self.lr_schedule):
            raise ValueError("lr_schedule must be a non-empty list of positive rates")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")

    def lr_for_epoch(self, epoch: int) -> float:
        """Rate for 1-based ``epoch``."""
        return self.lr_schedule[min(epoch, len(self.lr_schedule)) - 1]

    @property
    def warmup_epochs(self) -> int:
        return len(self.lr_schedule)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def best_val_loss(self) -> float:
        if not self.epochs or self.best_epoch == 0:
            return math.nan
        return self.epochs[self.best_epoch - 1].val_loss

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in self.epochs:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])
        return buf.getvalue()


@dataclass
class ClickDataset:
    interactions: Sequence[InteractionRecord]
    users: Mapping[str, UserRecord]
    images: Mapping[str, ImageRecord]


class EncodedCorpus:
    """Every user and image encoded once; batches are row gathers."""

    def __init__(self, model: TwoTowerModel, users: Mapping[str, UserRecord], images: Mapping[str, ImageRecord]):
        self.user_ids = sorted(users)
        self.image_ids = sorted(images)
        self.user_rows = {u: i for i, u in enumerate(self.user_ids)}
        self.image_rows = {m: i for i, m in enumerate(self.image_ids)}
        self.users: EncodedBatch = model.encode_users(users[u] for u in self.user_ids)
        self.images: EncodedBatch = model.encode_images(images[m] for m in self.image_ids)

    def pairs(self, interactions: Sequence[InteractionRecord]) -> np.ndarray:
        out = np.empty((len(interactions), 2), dtype=np.int64)
        for k, it in enumerate(interactions):
            out[k, 0] = self.user_rows[it.user_id]
            out[k, 1] = self.image_rows[it.image_id]
        return out


def make_batches(pairs: np.ndarray, batch_size: int, seed) -> Iterator[np.ndarray]:
    """Yield shuffled ``[batch_size, ...]`` slices of ``pairs``; the short tail is dropped."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    n = len(pairs)
    if n < batch_size:
        raise ValueError(f"only {n} pairs for batch_size {batch_size}; use a smaller batch")
    order = np.random.default_rng(seed).permutation(n)
    for b in range(n // batch_size):
        yield pairs[order[b * batch_size: (b + 1) * batch_size]]


def split_validation(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random (seeded) per-interaction split into train and validation rows."""
    order = np.random.default_rng([seed, 0x7A11]).permutation(n)
    n_val = int(round(n * fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _validation_loss(model, corpus, val_pairs, batch_size) -> float:
    if len(val_pairs) == 0:
        return math.nan
    bs = min(batch_size, len(val_pairs))
    losses = []
    for b in range(len(val_pairs) // bs):
        chunk = val_pairs[b * bs: (b + 1) * bs]
        losses.append(model.loss(corpus.users.take(chunk[:, 0]), corpus.images.take(chunk[:, 1])))
    return float(np.mean(losses))


def train(model: TwoTowerModel, dataset: ClickDataset, config: TrainConfig,
          corpus: EncodedCorpus | None = None, on_epoch=None) -> tuple[TwoTowerModel, History]:
    """Train in place and return ``(model, history)`` with the best-validation weights loaded.

    Early stopping only starts counting once the warm-up schedule is done: a
    1e-5 epoch barely moves the loss and would otherwise end training.
    ``on_epoch(record, model)`` is called after every epoch, before the stopping check.
    """
    corpus = corpus or EncodedCorpus(model, dataset.users, dataset.images)
    pairs = corpus.pairs(dataset.interactions)
    train_rows, val_rows = split_validation(len(pairs), config.validation_fraction, config.seed)
    train_pairs, val_pairs = pairs[train_rows], pairs[val_rows]
    params = model.user_parameters if config.freeze_image_tower else model.parameters
    frozen = model.image_parameters if config.freeze_image_tower else []
    if config.max_epochs > 0:
        for p in params:
            p.state[...] = config.initial_accumulator

    history = History()
    best_state = model.state_dict()
    best_val = math.inf
    bad_epochs = 0
    for epoch in range(1, config.max_epochs + 1):
        lr = config.lr_for_epoch(epoch)
        losses = []
        for batch in make_batches(train_pairs, config.batch_size, [config.seed, epoch]):
            loss = model.loss_and_backward(
                corpus.users.take(batch[:, 0]), corpus.images.take(batch[:, 1]),
                freeze_image_tower=config.freeze_image_tower,
            )
            if not math.isfinite(loss):
                model.load_state(best_state)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", model, history)
            try:
                adagrad_step(params, lr, config.epsilon)
            except NonFiniteGradientError as exc:
                model.load_state(best_state)
                raise TrainingDiverged(f"epoch {epoch}: {exc}", model, history) from exc
            losses.append(loss)
        assert all(not p.grad.any() for p in frozen), "frozen tower received gradient"

        val = _validation_loss(model, corpus, val_pairs, config.batch_size)
        history.epochs.append(EpochRecord(epoch, float(np.mean(losses)), val, lr))
        log.info("epoch %d lr=%g train=%.4f val=%.4f", epoch, lr, np.mean(losses), val)
        if on_epoch is not None:
            on_epoch(history.epochs[-1], model)
        monitored = val if math.isfinite(val) else float(np.mean(losses))
        improved = monitored < best_val - config.min_delta
        if monitored < best_val:
            best_val = monitored
            best_state = model.state_dict()
            history.best_epoch = epoch
        if epoch >= config.warmup_epochs:
            bad_epochs = 0 if improved else bad_epochs + 1
            if bad_epochs >= config.patience:
                history.stopped_early = True
                break
    if history.epochs:
        model.load_state(best_state)
    return model, history


def refresh_user_tower(model: TwoTowerModel, fresh: ClickDataset, config: TrainConfig,
                       corpus: EncodedCorpus | None = None) -> tuple[TwoTowerModel, History]:
    """Re-fit only the user tower on fresh clicks; image tower stays bit-identical."""
    if not config.freeze_image_tower:
        raise ValueError("refresh_user_tower requires freeze_image_tower=True")
    return train(model, fresh, config, corpus)
