"""Soft Dice loss for training and the binarized Dice metric for evaluation."""
import numpy as np

from segkit.errors import ContractError


def dice_loss(pred, target, smooth=1.0):
    """Batch-global soft Dice loss and its gradient w.r.t. ``pred``.

    L = 1 - (2*sum(p*g) + smooth) / (sum(p) + sum(g) + smooth), one ratio over
    every element of the batch.
    """
    if pred.shape != target.shape:
        raise ContractError(f"pred {pred.shape} and target {target.shape} differ")
    if smooth <= 0:
        raise ContractError("smooth must be > 0")
    p = pred.astype(np.float64, copy=False)
    g = target.astype(np.float64, copy=False)
    inter = float(np.sum(p * g))
    denom = float(np.sum(p)) + float(np.sum(g)) + smooth
    numer = 2.0 * inter + smooth
    loss = 1.0 - numer / denom
    grad = -(2.0 * g * denom - numer) / denom**2
    return loss, grad.astype(pred.dtype, copy=False)


def dice_metric(pred_probs, target, threshold=0.5):
    """Hard Dice 2|A&B| / (|A|+|B|) after thresholding; two empty masks give 1."""
    if pred_probs.shape != target.shape:
        raise ContractError(f"pred {pred_probs.shape} and target {target.shape} differ")
    a = pred_probs >= threshold
    b = target >= threshold
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())
