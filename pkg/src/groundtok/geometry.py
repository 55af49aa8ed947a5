"""Axis-aligned box arithmetic: IoU, enclosing boxes, greedy NMS, size buckets.

Boxes use corner form (x_min, y_min, x_max, y_max) in absolute, continuous
pixel coordinates. All functions are pure.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

# COCO-convention area thresholds for the small/medium/large split.
SMALL_AREA_MAX = 32.0 * 32.0
LARGE_AREA_MIN = 96.0 * 96.0


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box; zero-area (degenerate) boxes are representable."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite: {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"box min exceeds max: {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def clamp(self, width: float, height: float) -> "BoundingBox":
        """Clamp to the image rectangle [0, width] x [0, height]."""
        return BoundingBox(
            min(max(self.x_min, 0.0), width),
            min(max(self.y_min, 0.0), height),
            min(max(self.x_max, 0.0), width),
            min(max(self.y_max, 0.0), height),
        )

    def to_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BoundingBox":
        if len(values) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(values)}")
        return cls(float(values[0]), float(values[1]), float(values[2]), float(values[3]))


@dataclass(frozen=True)
class ScoredBox:
    box: BoundingBox
    score: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


class SizeBucket(enum.Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0.0 when the union has zero area."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def enclosing_box(boxes: Iterable[BoundingBox]) -> BoundingBox:
    """Smallest box containing every input box."""
    boxes = list(boxes)
    if not boxes:
        raise ValueError("empty box set")
    return BoundingBox(
        min(b.x_min for b in boxes),
        min(b.y_min for b in boxes),
        max(b.x_max for b in boxes),
        max(b.y_max for b in boxes),
    )


def nms(candidates: Sequence[ScoredBox], iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Iterates candidates in descending score (ties broken by lower input
    index) and keeps one iff its IoU with every already-kept candidate is
    <= iou_threshold. Returns kept original indices in visit order, so any
    two kept boxes have pairwise IoU <= iou_threshold.
    """
    if not (0.0 <= iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i].score, i))
    kept: list[int] = []
    for i in order:
        box = candidates[i].box
        if all(iou(box, candidates[j].box) <= iou_threshold for j in kept):
            kept.append(i)
    return kept


def size_bucket(box: BoundingBox) -> SizeBucket:
    """Bucket by area: small below 32^2, large above 96^2, medium between."""
    area = box.area
    if area < SMALL_AREA_MAX:
        return SizeBucket.SMALL
    if area > LARGE_AREA_MIN:
        return SizeBucket.LARGE
    return SizeBucket.MEDIUM
