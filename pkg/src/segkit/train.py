"""Training loop: augmentation, soft Dice, Nesterov-Adam, plateau decay."""
import math
from dataclasses import dataclass, field

import numpy as np

from segkit import checkpoint
from segkit.data import AugmentConfig, augment
from segkit.errors import NonFiniteError
from segkit.losses import dice_loss, dice_metric
from segkit.optim import Nadam, PlateauScheduler
from segkit.tensor import Prng

# fork keys for the trainer's own stream (shuffling + augmentation)
_TRAIN_STREAM = 101


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr: float = 5e-4
    augment: bool = True
    augment_cfg: AugmentConfig = field(default_factory=AugmentConfig)
    lr_factor: float = 10.0
    patience: int = 2
    min_delta: float = 1e-4
    smooth: float = 1.0
    plateau: bool = True  # False keeps lr fixed
    stop_dice: float = None
    seed: int = 0


def evaluate(net, volumes, smooth=1.0, chunk=8):
    """Inference over [(scan_id, image, mask)] volumes.

    Returns (mean soft-Dice loss, mean hard Dice, per-volume records).
    """
    records = []
    losses = []
    for sid, img, msk in volumes:
        pred = np.concatenate([net.predict(img[i:i + chunk])
                               for i in range(0, img.shape[0], chunk)])
        loss, _ = dice_loss(pred, msk, smooth)
        losses.append(loss)
        records.append({"scan_id": sid, "dice": dice_metric(pred, msk)})
    dice = float(np.mean([r["dice"] for r in records]))
    return float(np.mean(losses)), dice, records


class Trainer:
    """Owns a network's optimizer, scheduler and data stream.

    ``images``/``masks`` are (N, 1, H, W) slice stacks. Validation volumes
    default to the training slices, one volume per slice.
    """

    def __init__(self, net, images, masks, config=None, val=None):
        self.net = net
        self.cfg = config or TrainConfig()
        self.images = images.astype(net.dtype, copy=False)
        self.masks = masks.astype(net.dtype, copy=False)
        if val is None:
            val = [(f"{i:04d}", self.images[i:i + 1], self.masks[i:i + 1])
                   for i in range(len(self.images))]
        self.val = val
        self.opt = Nadam(net.trainable_parameters(), lr=self.cfg.lr)
        self.sched = PlateauScheduler(self.cfg.lr_factor, self.cfg.patience,
                                      self.cfg.min_delta)
        self.rng = Prng(self.cfg.seed).fork(_TRAIN_STREAM)
        self.epoch = 0

    @property
    def n_samples(self):
        return len(self.images)

    def _batch(self, idx):
        xb, yb = self.images[idx], self.masks[idx]
        if not self.cfg.augment:
            return xb, yb
        pairs = [augment(xb[i:i + 1], yb[i:i + 1], self.cfg.augment_cfg, self.rng)
                 for i in range(len(idx))]
        return (np.concatenate([p[0] for p in pairs]).astype(self.net.dtype, copy=False),
                np.concatenate([p[1] for p in pairs]).astype(self.net.dtype, copy=False))

    def train_epoch(self):
        """One pass over the shuffled training slices; returns mean loss."""
        self.net.train()
        order = self.rng.permutation(self.n_samples)
        bs = self.cfg.batch_size
        losses = []
        for start in range(0, len(order), bs):
            xb, yb = self._batch(order[start:start + bs])
            self.opt.zero_grad()
            pred = self.net.forward(xb)
            loss, grad = dice_loss(pred, yb, self.cfg.smooth)
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {self.epoch + 1}")
            self.net.backward(grad)
            self.opt.step()
            losses.append(loss)
        self.epoch += 1
        return float(np.mean(losses))

    def run_epoch(self):
        loss = self.train_epoch()
        val_loss, val_dice, _ = evaluate(self.net, self.val, self.cfg.smooth)
        if not math.isfinite(val_loss):
            raise NonFiniteError(f"non-finite validation loss at epoch {self.epoch}")
        lr_used = self.opt.lr
        if self.cfg.plateau:
            self.sched.epoch_end(val_loss, self.opt.state)
        return {"epoch": self.epoch, "loss": round(loss, 8), "val_loss": round(val_loss, 8),
                "val_dice": round(val_dice, 8), "lr": lr_used}

    def fit(self, epochs=None, on_epoch=None):
        """Train; returns (history, best checkpoint bytes by validation Dice)."""
        epochs = self.cfg.epochs if epochs is None else epochs
        history = []
        best_dice, best = -1.0, checkpoint.save(self.net)
        for _ in range(epochs):
            rec = self.run_epoch()
            history.append(rec)
            if on_epoch is not None:
                on_epoch(rec)
            if rec["val_dice"] > best_dice:
                best_dice, best = rec["val_dice"], checkpoint.save(self.net)
            if self.cfg.stop_dice is not None and rec["val_dice"] >= self.cfg.stop_dice:
                break
        return history, best
