"""Axis-aligned bounding-box arithmetic in normalized image coordinates.

Boxes are ``(x_min, y_min, x_max, y_max)`` with every coordinate in ``[0, 1]``
relative to the image width and height. Distances are measured with the image
width and height both set to 1, even for non-square images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DIRECTIONS = ("left", "right", "top", "bottom")


class PlacementError(ValueError):
    """No direction around the target can hold the requested square region."""


@dataclass(frozen=True, order=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box: {coords}")
        if min(coords) < 0.0 or max(coords) > 1.0:
            raise ValueError(f"box outside the unit square: {coords}")

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
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "BoundingBox":
        x0, y0, x1, y1 = (float(v) for v in values)
        return cls(x0, y0, x1, y1)

    @classmethod
    def clipped(cls, x_min: float, y_min: float, x_max: float, y_max: float) -> "BoundingBox":
        """Build a box after clamping coordinates into the unit square."""
        x0, x1 = (min(max(v, 0.0), 1.0) for v in (x_min, x_max))
        y0, y1 = (min(max(v, 0.0), 1.0) for v in (y_min, y_max))
        return cls(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))


@dataclass(frozen=True)
class PixelBox:
    """Integer pixel box, half-open: columns ``[x0, x1)`` and rows ``[y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int
    image_w: int
    image_h: int

    def __post_init__(self) -> None:
        if not (0 <= self.x0 <= self.x1 <= self.image_w and 0 <= self.y0 <= self.y1 <= self.image_h):
            raise ValueError(f"pixel box out of bounds: {self}")

    def to_normalized(self) -> BoundingBox:
        return BoundingBox(
            self.x0 / self.image_w,
            self.y0 / self.image_h,
            self.x1 / self.image_w,
            self.y1 / self.image_h,
        )


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 for disjoint, touching, or zero-area boxes."""
    inter = intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(inter / union, 1.0)


def overlaps(a: BoundingBox, b: BoundingBox) -> bool:
    """True iff the boxes share positive area. Edge or corner contact is not overlap."""
    return intersection_area(a, b) > 0.0


def min_box_distance(a: BoundingBox, b: BoundingBox) -> float:
    """Euclidean distance between the closest pair of points of two boxes.

    The gap along each axis is the separation of the two coordinate intervals
    (0 when they intersect); the closest points realize both gaps at once.
    """
    dx = max(0.0, b.x_min - a.x_max, a.x_min - b.x_max)
    dy = max(0.0, b.y_min - a.y_max, a.y_min - b.y_max)
    return math.hypot(dx, dy)


def iou_matrix(boxes_a: Sequence[BoundingBox], boxes_b: Sequence[BoundingBox]) -> np.ndarray:
    """Pairwise IOU, shape ``(len(boxes_a), len(boxes_b))``."""
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = iou(a, b)
    return out


def box_mask(box: BoundingBox, image_h: int, image_w: int) -> np.ndarray:
    """Boolean ``(H, W)`` mask of the pixels whose centers fall inside ``box``.

    Intervals are half-open, so masks of non-overlapping boxes are disjoint.
    """
    cols = (np.arange(image_w) + 0.5) / image_w
    rows = (np.arange(image_h) + 0.5) / image_h
    in_x = (cols >= box.x_min) & (cols < box.x_max)
    in_y = (rows >= box.y_min) & (rows < box.y_max)
    return in_y[:, None] & in_x[None, :]


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


@dataclass(frozen=True)
class SquarePlacement:
    box: BoundingBox
    pixels: PixelBox
    direction: str
    eligible: tuple[str, ...]


def candidate_square(
    target: BoundingBox,
    direction: str,
    side_fraction: float,
    distance_fraction: float,
    image_w: int,
    image_h: int,
) -> tuple[int, int, int, int]:
    """Pixel bounds ``(x0, y0, x1, y1)`` of the square beside ``target``.

    Side and gap scale with the image width for left/right placement and with
    the height for top/bottom. The side is rounded half-up; the near edge is
    rounded away from the target so the square can never overlap it, and the
    cross-axis position is floored about the target center.
    """
    tx0, tx1 = target.x_min * image_w, target.x_max * image_w
    ty0, ty1 = target.y_min * image_h, target.y_max * image_h
    cx, cy = 0.5 * (tx0 + tx1), 0.5 * (ty0 + ty1)
    if direction in ("left", "right"):
        side = _round_half_up(side_fraction * image_w)
        gap = distance_fraction * image_w
        y0 = int(math.floor(cy - side / 2))
        if direction == "right":
            x0 = int(math.ceil(tx1 + gap))
        else:
            x0 = int(math.floor(tx0 - gap)) - side
        return x0, y0, x0 + side, y0 + side
    if direction in ("top", "bottom"):
        side = _round_half_up(side_fraction * image_h)
        gap = distance_fraction * image_h
        x0 = int(math.floor(cx - side / 2))
        if direction == "bottom":
            y0 = int(math.ceil(ty1 + gap))
        else:
            y0 = int(math.floor(ty0 - gap)) - side
        return x0, y0, x0 + side, y0 + side
    raise ValueError(f"unknown direction {direction!r}")


def eligible_directions(
    target: BoundingBox,
    side_fraction: float,
    distance_fraction: float,
    image_w: int,
    image_h: int,
) -> tuple[str, ...]:
    out = []
    for direction in DIRECTIONS:
        x0, y0, x1, y1 = candidate_square(target, direction, side_fraction, distance_fraction, image_w, image_h)
        if x1 > x0 and 0 <= x0 and x1 <= image_w and 0 <= y0 and y1 <= image_h:
            out.append(direction)
    return tuple(out)


def place_square_region(
    target: BoundingBox,
    side_fraction: float,
    distance_fraction: float,
    image_w: int,
    image_h: int,
    rng: np.random.Generator,
) -> SquarePlacement:
    """Place a center-aligned square beside ``target`` in a random eligible direction.

    Raises:
        PlacementError: when no direction keeps the square inside the image.
    """
    if not (0.0 < side_fraction < 1.0 and 0.0 < distance_fraction < 1.0):
        raise ValueError("side_fraction and distance_fraction must lie in (0, 1)")
    eligible = eligible_directions(target, side_fraction, distance_fraction, image_w, image_h)
    if not eligible:
        raise PlacementError("no eligible direction for the square region")
    direction = eligible[int(rng.integers(len(eligible)))]
    x0, y0, x1, y1 = candidate_square(target, direction, side_fraction, distance_fraction, image_w, image_h)
    pixels = PixelBox(x0, y0, x1, y1, image_w, image_h)
    return SquarePlacement(pixels.to_normalized(), pixels, direction, eligible)
