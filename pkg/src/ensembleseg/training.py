"""Epoch loop over mixed labeled / pseudo-labeled samples with patience-based stopping."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .core import InvalidArgumentError
from .model import combined_loss, images_to_tensor

log = logging.getLogger(__name__)


class TrainingDivergenceError(RuntimeError):
    def __init__(self, epoch, value):
        super().__init__(f"non-finite loss {value} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 50
    batch_size: int = 1
    learning_rate: float = 1e-4
    dropout_rate: float = 0.0
    early_stop_patience: Optional[int] = 5
    seed: int = 0
    ce_weight: float = 0.5
    dice_weight: float = 0.5

    def validate(self):
        if self.max_epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise InvalidArgumentError(f"invalid training config {self}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise InvalidArgumentError("early_stop_patience must be >= 1 or None")
        return self


# Regimes used in the experiments; desk-scale runs override epochs.
INITIAL = TrainConfig(max_epochs=200, batch_size=10, dropout_rate=0.25, early_stop_patience=5)
SUBMODEL = TrainConfig(max_epochs=50, batch_size=1, dropout_rate=0.0, early_stop_patience=5)
FULLY_SUPERVISED = TrainConfig(max_epochs=200, batch_size=10, dropout_rate=0.25, early_stop_patience=None)
SELF_TRAINING = TrainConfig(max_epochs=50, batch_size=28, dropout_rate=0.25, early_stop_patience=None)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


def early_stop_check(history, patience):
    """True when each of the last ``patience`` epochs failed to beat the best loss before them."""
    if patience < 1:
        raise InvalidArgumentError("patience must be >= 1")
    if len(history) <= patience:
        return False
    best_before = min(r.val_loss for r in history[:-patience])
    return all(r.val_loss >= best_before for r in history[-patience:])


def _stack(samples, classes):
    x = images_to_tensor([s.image for s in samples])
    y = torch.from_numpy(np.stack([np.asarray(s.target(classes), dtype=np.float32) for s in samples]))
    return x, y.permute(0, 3, 1, 2).contiguous()


def evaluate_loss(net, x, y, cfg, batch_size=16):
    net.eval()
    total = 0.0
    with torch.no_grad():
        for s in range(0, len(x), batch_size):
            xb, yb = x[s:s + batch_size], y[s:s + batch_size]
            total += float(combined_loss(net(xb), yb, cfg.ce_weight, cfg.dice_weight)) * len(xb)
    return total / len(x)


def train(net, labeled, pseudo, validation, cfg: TrainConfig):
    """Train ``net`` in place and return ``(net, history)``.

    Samples are ordered by id, then shuffled each epoch by a generator seeded from
    ``cfg.seed``, so the input order never matters. When a validation set is given
    the parameters of the best validation epoch are restored at the end.
    """
    cfg.validate()
    samples = sorted([*labeled, *pseudo], key=lambda s: s.id)
    if not samples:
        raise InvalidArgumentError("empty training set")
    if cfg.early_stop_patience is not None and not validation:
        raise InvalidArgumentError("early stopping needs a validation set")

    classes = net.cfg.classes
    x, y = _stack(samples, classes)
    xv, yv = _stack(validation, classes) if validation else (None, None)

    torch.manual_seed(cfg.seed)
    order_rng = np.random.default_rng(cfg.seed)
    net.set_dropout(cfg.dropout_rate)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)

    history = []
    best_state, best_val = None, math.inf
    for epoch in range(1, cfg.max_epochs + 1):
        net.train()
        perm = torch.from_numpy(order_rng.permutation(len(samples)))
        running = 0.0
        for s in range(0, len(samples), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            opt.zero_grad()
            loss = combined_loss(net(x[idx]), y[idx], cfg.ce_weight, cfg.dice_weight)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergenceError(epoch, value)
            loss.backward()
            opt.step()
            running += value * len(idx)
        train_loss = running / len(samples)
        val_loss = evaluate_loss(net, xv, yv, cfg) if xv is not None else math.nan
        if xv is not None and not math.isfinite(val_loss):
            raise TrainingDivergenceError(epoch, val_loss)
        history.append(EpochRecord(epoch, train_loss, val_loss))
        log.debug("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)

        if xv is not None and val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(net.state_dict())
        if cfg.early_stop_patience is not None and early_stop_check(history, cfg.early_stop_patience):
            log.info("early stop after epoch %d (best val %.5f)", epoch, best_val)
            break

    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    return net, history


def write_curve(path, history):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss)])
