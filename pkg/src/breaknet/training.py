"""Dice loss with deep supervision, Adam with step decay, and the training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .model import BreakNet, save_checkpoint
from .synth import AUGMENTATIONS, augment
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

DICE_EPS = 1e-6


class NonFiniteLossError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-2
    decay_factor: float = 0.8
    decay_every: int = 5
    batch_size: int = 8
    max_epochs: int = 60
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    aux_loss_weights: tuple = (0.25, 0.25, 0.25, 0.25)
    augment: tuple = AUGMENTATIONS
    seed: int = 0
    checkpoint_every: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        self.aux_loss_weights = tuple(float(w) for w in self.aux_loss_weights)
        self.augment = tuple(self.augment)
        self.validate()

    def validate(self) -> None:
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")
        if len(self.aux_loss_weights) != 4:
            raise ValueError("aux_loss_weights needs 4 entries (main + 3 auxiliary)")
        if abs(sum(self.aux_loss_weights) - 1.0) > 1e-9:
            raise ValueError("aux_loss_weights must sum to 1")
        unknown = set(self.augment) - set(AUGMENTATIONS)
        if unknown:
            raise ValueError(f"unknown augmentations {sorted(unknown)}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aux_loss_weights"] = list(self.aux_loss_weights)
        d["augment"] = list(self.augment)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """N x H x W ids -> N x C x H x W indicator."""
    labels = np.asarray(labels)
    return (labels[:, None] == np.arange(num_classes)[None, :, None, None]).astype(dtype)


def dice_loss(probs: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - mean soft Dice over the classes present in ``target``."""
    target = np.asarray(target, dtype=probs.dtype)
    if probs.shape != target.shape:
        raise ValueError(f"dice_loss: probs {probs.shape} vs target {target.shape}")
    axes = (0, 2, 3)
    g_sum = target.sum(axis=axes)
    present = (g_sum > 0).astype(probs.dtype)
    if present.sum() == 0:
        raise ValueError("dice_loss: target contains no class")
    inter = ops.sum(ops.mul(probs, target), axis=axes)
    p_sum = ops.sum(probs, axis=axes)
    score = ops.div(ops.add(ops.scale(inter, 2.0), eps), ops.add(p_sum, g_sum + eps))
    mean_present = ops.scale(ops.sum(ops.mul(score, present)), 1.0 / float(present.sum()))
    return ops.sub(1.0, mean_present)


def deep_supervision_loss(main: Tensor, aux: Sequence[Tensor], target: np.ndarray,
                          weights=(0.25, 0.25, 0.25, 0.25)) -> Tensor:
    outputs = [main, *aux]
    if len(outputs) != len(weights):
        raise ValueError(f"{len(outputs)} outputs but {len(weights)} weights")
    total = None
    for out, w in zip(outputs, weights):
        if w == 0:
            continue
        term = ops.scale(dice_loss(out, target), w)
        total = term if total is None else ops.add(total, term)
    if total is None:
        raise ValueError("all loss weights are zero")
    return total


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0


def adam_init(params: Sequence[Tensor]) -> AdamState:
    return AdamState([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data -= step.astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    def append(self, entry: dict) -> None:
        expected = len(self.epochs)
        if entry["epoch"] != expected:
            raise ValueError(f"epoch {entry['epoch']} logged out of order (expected {expected})")
        self.epochs.append(entry)

    def without_timing(self) -> list:
        return [{k: v for k, v in e.items() if k != "wall_time"} for e in self.epochs]


@dataclass
class TrainResult:
    model: BreakNet
    log: TrainLog
    best_epoch: int
    best_dice: float
    checkpoints: list


def batch_seed(seed: int, epoch: int, batch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, batch]).generate_state(1)[0])


def validation_scores(model: BreakNet, samples: Sequence, batch_size: int = 8) -> tuple[float, float]:
    """Mean foreground Dice and IoU (per scan, then averaged)."""
    from .metrics import per_class_scores
    model.eval()
    dices, ious = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        pred = model.predict(np.stack([s.image for s in chunk])[:, None]).argmax(axis=1)
        for s, p in zip(chunk, pred):
            d, j = per_class_scores(p, s.labels, model.config.num_classes)
            dices.append(d[1:-1].mean())
            ious.append(j[1:-1].mean())
    return float(np.mean(dices)), float(np.mean(ious))


def train(model: BreakNet, train_set: Sequence, val_set: Sequence, cfg: TrainConfig,
          out_dir=None, on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Mini-batch Adam on the deep-supervision Dice loss.

    Batches are drawn in a seeded order, augmented on the fly and the model
    with the best validation foreground Dice is kept (restored into
    ``model`` at the end).  With ``out_dir`` set, checkpoints, ``log.jsonl``
    and ``best.json`` (pointing at ``best_model.json``) are written there.
    """
    if not train_set:
        raise ValueError("train: empty training set")
    if not val_set:
        raise ValueError("train: empty validation set")
    params = model.parameters()
    state = adam_init(params)
    order_rng = np.random.default_rng(cfg.seed)
    tlog = TrainLog()
    best_dice, best_epoch, best_state = -1.0, -1, None
    checkpoints = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "log.jsonl").write_text("")
    n = len(train_set)
    num_classes = model.config.num_classes

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        perm = order_rng.permutation(n)
        model.train()
        losses, steps = [], 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            seed_b = batch_seed(cfg.seed, epoch, b)
            rng = np.random.default_rng(seed_b)
            batch = [augment(train_set[i], rng, cfg.augment) for i in perm[start:start + cfg.batch_size]]
            images = Tensor(np.stack([s.image for s in batch])[:, None], dtype=model.dtype)
            target = one_hot(np.stack([s.labels for s in batch]), num_classes, model.dtype)
            model.reseed_dropout(seed_b)
            main, aux = model(images)
            loss = deep_supervision_loss(main, aux, target, cfg.aux_loss_weights)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteLossError(
                    f"non-finite loss {value} at epoch {epoch}, batch {b} (batch seed {seed_b})")
            model.zero_grad()
            backward(loss)
            adam_step(params, [p.grad for p in params], state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            losses.append(value)
            steps += 1
        val_dice, val_iou = validation_scores(model, val_set, cfg.batch_size)
        entry = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "steps": steps,
            "val_dice": val_dice,
            "val_iou": val_iou,
            "wall_time": time.perf_counter() - t0,
        }
        tlog.append(entry)
        log.info("epoch %d lr %.3g loss %.4f val dice %.4f", epoch, lr, entry["train_loss"], val_dice)
        if val_dice > best_dice:
            best_dice, best_epoch = val_dice, epoch
            best_state = {k: v.copy() for k, v in model.state().items()}
            if out is not None:
                save_checkpoint(model, out / "best_model", extra={"epoch": epoch, "val_dice": val_dice})
        if out is not None:
            with open(out / "log.jsonl", "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                checkpoints.append(str(save_checkpoint(model, out / f"epoch_{epoch:03d}")))
        if on_epoch is not None:
            on_epoch(entry)

    if out is not None and cfg.max_epochs > 0:
        checkpoints.append(str(save_checkpoint(model, out / "last")))
        (out / "best.json").write_text(json.dumps(
            {"checkpoint": "best_model.json", "epoch": best_epoch, "val_dice": best_dice}, indent=2))
    if best_state is not None:
        model.load_state(best_state)
    model.eval()
    return TrainResult(model, tlog, best_epoch, best_dice, checkpoints)
