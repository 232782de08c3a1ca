"""Dice, focal and combined losses with analytic gradients; accuracy and IoU metrics.

Probability and one-hot tensors are channels-last: ``(..., num_classes)``.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import LabelOutOfRange, ShapeMismatch

NUM_CLASSES = 4
DICE_SMOOTH = 1e-6
IOU_SMOOTH = 1e-6
IOU_THRESHOLD = 0.5


@dataclasses.dataclass
class LossValue:
    scalar: float
    grad: np.ndarray

    def __add__(self, other: LossValue) -> LossValue:
        return LossValue(self.scalar + other.scalar, self.grad + other.grad)


@dataclasses.dataclass(frozen=True)
class FocalParams:
    gamma: float = 2.0
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0 < self.epsilon < 0.5:
            raise ValueError(f"clip epsilon must lie in (0, 0.5), got {self.epsilon}")


def _same_shape(y_true: np.ndarray, y_pred: np.ndarray) -> None:
    if y_true.shape != y_pred.shape:
        raise ShapeMismatch(f"y_true {y_true.shape} and y_pred {y_pred.shape} differ")


def one_hot(mask: np.ndarray, num_classes: int = NUM_CLASSES, dtype=np.float32) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes}), got range [{mask.min()}, {mask.max()}]")
    return (mask[..., None] == np.arange(num_classes)).astype(dtype)


def dice_loss(y_true: np.ndarray, y_pred: np.ndarray, smooth: float = DICE_SMOOTH) -> LossValue:
    """Soft dice per class, summed over every voxel of the batch, averaged over classes.

    per class: 1 - (2*sum(t*p) + s) / (sum(t) + sum(p) + s)
    """
    _same_shape(y_true, y_pred)
    C = y_pred.shape[-1]
    t = y_true.reshape(-1, C)
    p = y_pred.reshape(-1, C)
    inter = (t * p).sum(axis=0)
    denom = t.sum(axis=0) + p.sum(axis=0) + smooth
    numer = 2.0 * inter + smooth
    per_class = 1.0 - numer / denom
    # d/dp of -(numer/denom) = -(2 t denom - numer) / denom^2
    grad = -(2.0 * t * denom - numer) / denom**2 / C
    return LossValue(float(per_class.mean()), grad.reshape(y_pred.shape).astype(y_pred.dtype, copy=False))


def dice_per_class(y_true: np.ndarray, y_pred: np.ndarray, smooth: float = DICE_SMOOTH) -> np.ndarray:
    C = y_pred.shape[-1]
    t = y_true.reshape(-1, C)
    p = y_pred.reshape(-1, C)
    return 1.0 - (2.0 * (t * p).sum(axis=0) + smooth) / (t.sum(axis=0) + p.sum(axis=0) + smooth)


def focal_loss(y_true: np.ndarray, y_pred: np.ndarray, fp: FocalParams = FocalParams()) -> LossValue:
    """Mean over voxels of -(1 - P_t)^gamma * log(P_t).

    P_t is the probability assigned to the true class, clipped to
    [eps, 1 - eps]; clipped voxels contribute no gradient.
    """
    _same_shape(y_true, y_pred)
    n_vox = int(np.prod(y_pred.shape[:-1]))
    pt_raw = (y_true * y_pred).sum(axis=-1)
    pt = np.clip(pt_raw, fp.epsilon, 1.0 - fp.epsilon)
    log_pt = np.log(pt)
    one_minus = 1.0 - pt
    per_voxel = -(one_minus**fp.gamma) * log_pt
    # d/dP_t of -(1-P)^g log P = g (1-P)^(g-1) log P - (1-P)^g / P
    if fp.gamma == 0:
        dpt = -1.0 / pt
    else:
        dpt = fp.gamma * one_minus ** (fp.gamma - 1.0) * log_pt - one_minus**fp.gamma / pt
    inside = (pt_raw >= fp.epsilon) & (pt_raw <= 1.0 - fp.epsilon)
    dpt = np.where(inside, dpt, 0.0) / n_vox
    grad = y_true * dpt[..., None]
    return LossValue(float(per_voxel.mean()), grad.astype(y_pred.dtype, copy=False))


def total_loss(y_true: np.ndarray, y_pred: np.ndarray, focal_weight: float = 1.0, fp: FocalParams = FocalParams()) -> LossValue:
    """dice + focal_weight * focal, with the matching gradient."""
    d = dice_loss(y_true, y_pred)
    if focal_weight == 0:
        return d
    f = focal_loss(y_true, y_pred, fp)
    return LossValue(d.scalar + focal_weight * f.scalar, d.grad + focal_weight * f.grad)


def iou_per_class(
    y_true: np.ndarray, y_pred: np.ndarray, threshold: float = IOU_THRESHOLD, smooth: float = IOU_SMOOTH
) -> np.ndarray:
    """Per-sample, per-class IoU of the thresholded prediction; shape ``(N, C)``.

    The leading axis of the inputs is the batch axis.
    """
    _same_shape(y_true, y_pred)
    N, C = y_pred.shape[0], y_pred.shape[-1]
    a = y_true.reshape(N, -1, C) > 0.5
    b = y_pred.reshape(N, -1, C) > threshold
    inter = np.count_nonzero(a & b, axis=1)
    union = np.count_nonzero(a | b, axis=1)
    return (inter + smooth) / (union + smooth)


def iou_score(
    y_true: np.ndarray,
    y_pred: np.ndarray,
    threshold: float = IOU_THRESHOLD,
    include_background: bool = True,
) -> float:
    """Mean IoU over classes, then over the batch (leading axis)."""
    per = iou_per_class(y_true, y_pred, threshold)
    if not include_background:
        per = per[:, 1:]
    return float(per.mean(axis=1).mean())


def voxel_accuracy(y_true_labels: np.ndarray, y_pred_probs: np.ndarray) -> float:
    """Fraction of voxels whose argmax class (ties -> lowest index) equals the label."""
    if y_true_labels.shape != y_pred_probs.shape[:-1]:
        raise ShapeMismatch(f"labels {y_true_labels.shape} vs probabilities {y_pred_probs.shape}")
    pred = y_pred_probs.argmax(axis=-1)
    return float(np.count_nonzero(pred == y_true_labels)) / pred.size
