"""Axis-aligned box geometry shared by assignment, deduplication, and scoring.

Boxes are corner-encoded in continuous pixel coordinates. There is no +1
pixel convention anywhere; a box covers the half-open real region
[x_min, x_max) x [y_min, y_max) for measurement purposes, and its area is
the plain product of side lengths.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractViolation


@dataclass(frozen=True)
class Box:
    """Corner-encoded rectangle. Sides may be zero but never negative."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        # NaN fails both comparisons, so non-finite corners are rejected too
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ContractViolation(
                f"inverted or non-finite box ({self.x_min}, {self.y_min}, "
                f"{self.x_max}, {self.y_max})")

    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    def size(self) -> tuple[float, float]:
        return self.x_max - self.x_min, self.y_max - self.y_min

    def corners(self) -> tuple[float, float, float, float]:
        return self.x_min, self.y_min, self.x_max, self.y_max


def area(b: Box) -> float:
    """Box area; zero iff the box is degenerate in at least one axis."""
    return (b.x_max - b.x_min) * (b.y_max - b.y_min)


def iou(a: Box, b: Box) -> float:
    """Intersection over union in [0, 1].

    Two boxes with an empty union (both degenerate) score 0 by definition,
    which avoids a 0/0 and reads as "no overlap evidence".
    """
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = area(a) + area(b) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def from_center(cx: float, cy: float, w: float, h: float) -> Box:
    """Build a box from its center point and side lengths."""
    if not (w >= 0.0 and h >= 0.0):
        raise ContractViolation(f"negative box size w={w}, h={h}")
    return Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
