"""Differentiable box losses on the tape.

Boxes here are (4,) tensors in normalized (cx, cy, w, h) form.  The geometry
deliberately re-derives IoU/GIoU with tape kernels instead of calling the
float route in ``boxes``; tests cross-check the two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class LossConfig:
    giou_weight: float = 1.0   # λ on the (1 - GIoU) term
    beta: float = 1.0          # smooth-L1 quadratic/linear transition point

    def __post_init__(self):
        if self.giou_weight < 0:
            raise ConfigError(f"giou_weight must be >= 0, got {self.giou_weight}")
        if self.beta <= 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")


def _check_box(t: Tensor, name: str) -> None:
    if t.shape != (4,):
        raise ShapeError(f"{name} must have shape (4,), got {t.shape}")


def box_corners(b: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """(cx, cy, w, h) -> scalar tensors (x1, y1, x2, y2)."""
    _check_box(b, "box")
    cx, cy, w, h = b[0], b[1], b[2], b[3]
    return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5


def iou(a: Tensor, b: Tensor) -> Tensor:
    ax1, ay1, ax2, ay2 = box_corners(a)
    bx1, by1, bx2, by2 = box_corners(b)
    iw = ag.relu(ag.minimum(ax2, bx2) - ag.maximum(ax1, bx1))
    ih = ag.relu(ag.minimum(ay2, by2) - ag.maximum(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def giou(a: Tensor, b: Tensor) -> Tensor:
    ax1, ay1, ax2, ay2 = box_corners(a)
    bx1, by1, bx2, by2 = box_corners(b)
    iw = ag.relu(ag.minimum(ax2, bx2) - ag.maximum(ax1, bx1))
    ih = ag.relu(ag.minimum(ay2, by2) - ag.maximum(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    hull = ((ag.maximum(ax2, bx2) - ag.minimum(ax1, bx1))
            * (ag.maximum(ay2, by2) - ag.minimum(ay1, by1)))
    return inter / union - (hull - union) / hull


def smooth_l1(pred: Tensor, target: Tensor, beta: float = 1.0) -> Tensor:
    """Quadratic below beta, linear above, averaged over the 4 coordinates."""
    _check_box(pred, "pred")
    _check_box(target, "target")
    d = pred - target
    ad = ag.abs_(d)
    quad = ag.scale(d * d, 0.5 / beta)
    lin = ad - 0.5 * beta
    per_coord = ag.where(ad.data < beta, quad, lin)
    return ag.mean_(per_coord)


def grounding_loss(pred: Tensor, target: Tensor,
                   cfg: LossConfig = LossConfig()) -> Tensor:
    """smooth-L1 plus λ·(1 - GIoU); zero exactly when the boxes coincide."""
    loss = smooth_l1(pred, target, cfg.beta)
    if cfg.giou_weight > 0:
        loss = loss + ag.scale(1.0 - giou(pred, target), cfg.giou_weight)
    return loss
