"""Seeded training loop: Adam updates, step-decay schedule, validation
selection, checkpointing.

The learning rate stays flat for the first `decay_start` epochs and then
halves once per completed `decay_every`-epoch block.  Model selection keeps
the checkpoint with the best validation IoU at threshold 0.5; the last epoch
is always checkpointed as well.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import SamplePair, augment_train
from .errors import ContractViolation, NumericError
from .losses import LossConfig, total_loss
from .metrics import binarize, pixel_metrics
from .network import Model

HISTORY_COLUMNS = ["epoch", "lr", "train_loss", "val_iou"]


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 5
    base_lr: float = 1e-4
    decay_factor: float = 0.5
    decay_every: int = 25
    decay_start: int = 150
    lam: float = 1.0
    seed: int = 0
    variant: str = "hmmen"
    checkpoint_dir: str = "checkpoints"
    augment: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ContractViolation("base_lr must be positive")
        if self.decay_start > self.epochs and self.epochs > 0:
            raise ContractViolation("decay_start must be <= epochs")


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Learning rate in effect during the given 1-based epoch."""
    steps = max(0, (epoch - config.decay_start) // config.decay_every)
    return config.base_lr * config.decay_factor ** steps


class AdamState:
    """First/second moment buffers keyed by parameter name."""

    def __init__(self) -> None:
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.t = 0


def adam_step(params, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update over every parameter in the store (in place).

    Bias correction is folded into the scalar step size: with
    c2 = sqrt(1 - beta2^t), the textbook update
    m_hat / (sqrt(v_hat) + eps) equals m * c2 / ((1 - beta1^t) *
    (sqrt(v) + eps * c2)), so each parameter needs one fused addcdiv
    instead of two bias-correction divisions.
    """
    state.t += 1
    t = state.t
    c2 = math.sqrt(1 - beta2 ** t)
    step_size = lr * c2 / (1 - beta1 ** t)
    with torch.no_grad():
        for name, p in params.items():
            g = p.grad
            if g is None:
                g = torch.zeros_like(p)
            # single-pass reduction; a NaN/Inf anywhere poisons the sum
            if not torch.isfinite(g.sum()):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m = state.m[name]
            v = state.v[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            denom = v.sqrt().add_(eps * c2)
            p.addcdiv_(m, denom, value=-step_size)


def _batch_tensors(samples: list[SamplePair]):
    rgb = torch.from_numpy(np.stack([s.rgb for s in samples]))
    ir = torch.from_numpy(np.stack([s.ir for s in samples]))
    gt = torch.from_numpy(np.stack([s.gt for s in samples]).astype(np.float32))
    return rgb, ir, gt


def validation_iou(model: Model, val_set: list[SamplePair],
                   threshold: float = 0.5) -> float:
    ious = []
    for s in val_set:
        rgb, ir, _ = _batch_tensors([s])
        probs = model.predict_probs(rgb, ir)[0, 0].numpy()
        ious.append(pixel_metrics(binarize(probs, threshold), s.gt[0])["iou"])
    return float(np.mean(ious)) if ious else 0.0


def train(model: Model, train_set: list[SamplePair], val_set: list[SamplePair],
          config: TrainConfig):
    """Run the optimization loop; returns (best_checkpoint_path, history)."""
    if not train_set or not val_set:
        raise ContractViolation("train and validation sets must be nonempty")
    ckpt_dir = Path(config.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    best_path = ckpt_dir / "best.ckpt"
    last_path = ckpt_dir / "last.ckpt"
    history_path = ckpt_dir / "history.csv"

    torch.manual_seed(config.seed)
    loss_cfg = LossConfig(lam=config.lam)
    state = AdamState()
    history: list[dict] = []
    best_iou = -1.0

    model.save_checkpoint(best_path, epoch=0, learning_rate=0.0)
    model.save_checkpoint(last_path, epoch=0, learning_rate=0.0)

    for epoch in range(1, config.epochs + 1):
        lr = lr_at(epoch, config)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch]))
        order = rng.permutation(len(train_set))
        epoch_losses = []
        aborted = False
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            samples = [train_set[i] for i in idx]
            if config.augment:
                samples = [augment_train(s, rng) for s in samples]
            rgb, ir, gt = _batch_tensors(samples)
            model.params.zero_grad()
            logits = model.forward(rgb, ir)
            loss = total_loss(logits, gt, loss_cfg)
            if not torch.isfinite(loss):
                aborted = True
                break
            loss.backward()
            adam_step(model.params, state, lr)
            epoch_losses.append(float(loss.detach()))
        if aborted:
            # last good checkpoint is already on disk
            break
        val_iou = validation_iou(model, val_set)
        train_loss = float(np.mean(epoch_losses)) if epoch_losses else math.nan
        history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss,
                        "val_iou": val_iou})
        print(f"epoch={epoch} lr={lr:.8g} train_loss={train_loss:.6f} "
              f"val_iou={val_iou:.6f}", flush=True)
        snapshot = {"val_iou": val_iou, "train_loss": train_loss}
        model.save_checkpoint(last_path, epoch=epoch, learning_rate=lr,
                              metric_snapshot=snapshot)
        if val_iou > best_iou:
            best_iou = val_iou
            model.save_checkpoint(best_path, epoch=epoch, learning_rate=lr,
                                  metric_snapshot=snapshot)

    with open(history_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for rec in history:
            writer.writerow(rec)
    return best_path, history
