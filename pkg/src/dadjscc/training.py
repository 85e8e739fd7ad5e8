"""Losses, Adam with decoupled weight decay, and the end-to-end training loop."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import ChannelConfig
from .data import ImageDataset, batch_iter
from .models import (CheckpointError, end_to_end, load_arrays, load_into, save_arrays,
                     save_checkpoint)
from .tensor import Tape, Tensor, backward, log_softmax, mul, reduce, sub

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "mean_loss", "wall_seconds")


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 300
    lr: float = 1e-4
    weight_decay: float = 1e-5
    seed: int = 0
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    subset: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, pred.dtype))
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    d = sub(pred, target)
    return reduce("mean", mul(d, d))


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise ValueError(f"logits {logits.shape} do not match {labels.size} labels")
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(labels.size), labels] = -1.0
    return reduce("mean", reduce("sum", mul(log_softmax(logits, axis=1), Tensor(onehot)), 1))


class AdamState:
    def __init__(self, params):
        self.params = list(params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"m.{p.name}"] = m
            out[f"v.{p.name}"] = v
        return out

    def load(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for i, p in enumerate(self.params):
            try:
                self.m[i] = arrays[f"m.{p.name}"].astype(p.dtype)
                self.v[i] = arrays[f"v.{p.name}"].astype(p.dtype)
            except KeyError as exc:
                raise CheckpointError(f"optimizer state missing {exc}") from None
        self.t = t


def adam_step(params, state: AdamState, cfg: TrainConfig) -> None:
    """Decoupled weight decay followed by a bias-corrected Adam update."""
    params = list(params)
    if any(p.grad is None for p in params):
        missing = [p.name for p in params if p.grad is None]
        raise ValueError(f"missing gradient for {missing[:5]}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, p in enumerate(params):
        g = p.grad
        if cfg.weight_decay:
            p.data = p.data * p.data.dtype.type(1.0 - cfg.lr * cfg.weight_decay)
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        step = cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        p.data = (p.data - step).astype(p.dtype, copy=False)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    batches: int
    batch_losses: list[float]
    wall_seconds: float = 0.0


def train_step(model, images: np.ndarray, cfg: TrainConfig, state: AdamState,
               rng: np.random.Generator) -> float:
    params = state.params
    for p in params:
        p.grad = None
    with Tape() as tape:
        recon, _ = end_to_end(model, Tensor(images), cfg.channel, rng)
        loss = mse_loss(recon, images)
    backward(loss, tape)
    adam_step(params, state, cfg)
    return loss.item()


def train_epoch(model, dataset: ImageDataset, cfg: TrainConfig, rng: np.random.Generator,
                state: AdamState | None = None, epoch: int = 1) -> EpochStats:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    state = state or AdamState(model.parameters())
    start = time.perf_counter()
    losses = []
    for images, _ in batch_iter(dataset, cfg.batch_size, True, rng):
        losses.append(train_step(model, images, cfg, state, rng))
    return EpochStats(epoch, float(np.mean(losses)), len(losses), losses,
                      time.perf_counter() - start)


@dataclass
class TrainingReport:
    epochs: list[EpochStats]
    best_loss: float | None
    checkpoint_dir: Path | None

    @property
    def final_loss(self) -> float | None:
        return self.epochs[-1].mean_loss if self.epochs else None


def _rng_state_path(ckpt_dir: Path) -> Path:
    return ckpt_dir / "last_state.json"


def fit(model, dataset: ImageDataset, cfg: TrainConfig, rng: np.random.Generator,
        checkpoint_dir=None, resume: bool = False) -> TrainingReport:
    """Train for ``cfg.epochs`` epochs, logging and checkpointing under ``checkpoint_dir``.

    Writes ``train_log.csv``, ``best``/``last`` model checkpoints and, for
    resumption, ``last_optim`` plus ``last_state.json`` (rng state, step
    count). With ``resume`` those are reloaded and training continues from
    the next epoch.
    """
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    state = AdamState(model.parameters())
    history: list[EpochStats] = []
    best = None
    first_epoch = 1
    if ckpt is not None:
        try:
            ckpt.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create checkpoint directory {ckpt}: {exc}") from exc
        log_path = ckpt / "train_log.csv"
        if resume:
            meta = json.loads(_rng_state_path(ckpt).read_text())
            load_into(model, ckpt / "last")
            state.load(load_arrays(ckpt / "last_optim"), meta["step"])
            rng.bit_generator.state = meta["rng"]
            first_epoch = meta["epoch"] + 1
            best = meta.get("best_loss")
        else:
            save_checkpoint(model, ckpt / "initial")
            with open(log_path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_HEADER)
    for epoch in range(first_epoch, cfg.epochs + 1):
        stats = train_epoch(model, dataset, cfg, rng, state, epoch)
        history.append(stats)
        log.info("epoch %d mean_loss %.6f (%.1fs)", epoch, stats.mean_loss, stats.wall_seconds)
        if ckpt is None:
            continue
        with open(ckpt / "train_log.csv", "a", newline="") as fh:
            csv.writer(fh).writerow([epoch, f"{stats.mean_loss:.8f}", f"{stats.wall_seconds:.3f}"])
        if best is None or stats.mean_loss < best:
            best = stats.mean_loss
            save_checkpoint(model, ckpt / "best")
        save_checkpoint(model, ckpt / "last")
        save_arrays(state.arrays(), ckpt / "last_optim")
        _rng_state_path(ckpt).write_text(json.dumps(
            {"epoch": epoch, "step": state.t, "best_loss": best,
             "rng": rng.bit_generator.state}))
    return TrainingReport(history, best, ckpt)
