"""Axis-aligned box geometry in plain floats.

This is the reference route for IoU/GIoU and the evaluation metric; the
differentiable twins in ``losses`` are validated against it, so nothing here
may import the tensor engine.  Boxes are center-parameterized (cx, cy, w, h),
normalized by image size when they come from data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .errors import ContractError


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for v in (self.cx, self.cy, self.w, self.h):
            if not math.isfinite(v):
                raise ContractError(f"box has non-finite coordinate: {self}")
        if self.w < 0 or self.h < 0:
            raise ContractError(f"box has negative extent: {self}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @staticmethod
    def from_corners(x1: float, y1: float, x2: float, y2: float) -> "Box":
        if x2 < x1 or y2 < y1:
            raise ContractError(f"corner box is inverted: ({x1}, {y1}, {x2}, {y2})")
        return Box((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @staticmethod
    def from_pixels(x: float, y: float, w: float, h: float,
                    img_w: int, img_h: int) -> "Box":
        """Pixel-space corner origin (x, y, w, h) -> normalized center form."""
        return Box((x + w / 2) / img_w, (y + h / 2) / img_h, w / img_w, h / img_h)

    def to_pixels(self, img_w: int, img_h: int) -> tuple[float, float, float, float]:
        """Inverse of from_pixels: (x, y, w, h) in pixel units."""
        return ((self.cx - self.w / 2) * img_w, (self.cy - self.h / 2) * img_h,
                self.w * img_w, self.h * img_h)

    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area() + b.area() - inter
    return inter / union if union > 0 else 0.0


def giou(a: Box, b: Box) -> float:
    """IoU minus the enclosing-hull penalty (|C| - |A∪B|) / |C|; range (-1, 1]."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    if hull <= 0:
        raise ContractError("enclosing box of the pair has zero area")
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area() + b.area() - inter
    return inter / union - (hull - union) / hull if union > 0 else -(hull - union) / hull


def accuracy_at_iou(predictions: Sequence[Box], ground_truths: Sequence[Box],
                    threshold: float = 0.5) -> float:
    """Fraction of pairs with IoU strictly above the threshold."""
    if len(predictions) != len(ground_truths):
        raise ContractError(
            f"{len(predictions)} predictions vs {len(ground_truths)} ground truths")
    if not predictions:
        raise ContractError("accuracy over an empty list is undefined")
    hits = sum(1 for p, g in zip(predictions, ground_truths) if iou(p, g) > threshold)
    return hits / len(predictions)
