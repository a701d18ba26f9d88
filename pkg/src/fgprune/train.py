"""SGD training and post-pruning fine-tuning."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import functional as F
from .data import Dataset, iterate
from .errors import NumericError
from .models import Model, forward
from .tensor import Tape

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = (10, 15)
    gamma: float = 0.1
    seed: int = 0
    precision: str = "float32"
    flip: bool = False
    crop: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0 or not 0 < self.gamma <= 1:
            raise ValueError("learning rate, momentum, weight decay must be >= 0 and gamma in (0, 1]")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if ms and (ms[0] < 1 or ms[-1] >= max(self.epochs, 1)):
            raise ValueError(f"milestones {ms} must lie in [1, epochs={self.epochs})")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.gamma ** sum(epoch >= m for m in self.milestones)

    def for_finetune(self, epochs: int, schedule: str = "truncated") -> "TrainConfig":
        """Same optimiser for ``epochs`` more epochs.

        ``truncated`` keeps the milestones that still fall inside the
        shorter run (a 10-epoch run after a 20-epoch schedule decaying at 10
        and 15 stays at the initial rate); ``scaled`` moves each milestone to
        the same fraction of the shorter run (5 and 7).
        """
        if schedule == "scaled":
            ms = {m * epochs // self.epochs for m in self.milestones} if self.epochs else set()
        elif schedule == "truncated":
            ms = set(self.milestones)
        else:
            raise ValueError(f"unknown fine-tune schedule {schedule!r}")
        return replace(self, epochs=epochs, milestones=tuple(sorted(m for m in ms if 1 <= m < epochs)))


# per-task defaults, scaled from 200 epochs / decay at 100 and 150
CLASSIFICATION_DEFAULTS = TrainConfig()
SEGMENTATION_DEFAULTS = TrainConfig(lr=0.01, weight_decay=1e-4, batch_size=16)


class SGD:
    """Heavy-ball SGD with L2 weight decay folded into the gradient:
    ``v <- m v + (g + wd p)``, ``p <- p - lr v``."""

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        for key, p in params.items():
            g = grads[key]
            if self.weight_decay:
                g = g + self.weight_decay * p
            if self.momentum:
                v = self.velocity.get(key)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[key] = v
                g = v
            p -= (self.lr * g).astype(p.dtype, copy=False)


def loss_fn(model: Model, out, y):
    if model.spec.task == "classification":
        return F.softmax_cross_entropy(out, y)
    return F.pixel_cross_entropy(out, y)


def train(model: Model, ds: Dataset, cfg: TrainConfig, eval_ds: Dataset | None = None,
          eval_every: int = 0):
    """Train a copy of ``model``; returns ``(model, curve)``.

    ``curve`` has one row per epoch (epoch, lr, mean loss, and the eval metric
    when ``eval_every`` divides the epoch number).
    """
    from .metrics import evaluate

    model = model.astype(cfg.precision)
    opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    keys = [(i, name) for i, name, _ in model.state.learnable(model.spec)]
    arrays = {(i, name): model.state.layers[i][name] for i, name in keys}
    curve = []
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        total, seen = 0.0, 0
        for step, (x, y) in enumerate(iterate(ds, cfg.batch_size, cfg.seed, epoch, True, cfg.flip, cfg.crop)):
            tape = Tape()
            params = {k: tape.watch(arrays[k]) for k in keys}
            try:
                # overflow shows up as a NumericError below; the numpy warning adds nothing
                with np.errstate(over="ignore", invalid="ignore"):
                    out, _ = forward(model, x, train=True, params=params)
                    loss = loss_fn(model, out, y)
            except NumericError as e:
                raise NumericError(f"training diverged at epoch {epoch} step {step}: {e}") from e
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise NumericError(f"loss is {lv} at epoch {epoch} step {step}")
            grads = tape.backward(loss, nodes=params.values())
            opt.step(arrays, {k: grads[params[k].id] for k in keys})
            total += lv * len(x)
            seen += len(x)
        row = {"epoch": epoch + 1, "lr": opt.lr, "loss": total / max(seen, 1)}
        if eval_ds is not None and eval_every and (epoch + 1) % eval_every == 0:
            row["metric"] = evaluate(model, eval_ds)
        log.info("epoch %d lr %.4g loss %.4f", epoch + 1, opt.lr, row["loss"])
        curve.append(row)
    return model, curve


def finetune(model: Model, ds: Dataset, base: TrainConfig, epochs: int = 10, eval_ds=None, eval_every=0,
             schedule: str = "truncated"):
    """Continue training a pruned model with the base optimiser settings."""
    return train(model, ds, base.for_finetune(epochs, schedule), eval_ds, eval_every)
