"""Box/offset geometry shared by target assignment, decoding and evaluation.

Coordinates are continuous (sub-pixel). A feature cell at grid index
(i, j) on stride s back-projects to the image-plane point
(s * (j + 0.5), s * (i + 0.5)), which keeps the detector's location grid
consistent with bilinear RoI sampling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle (x0, y0) top-left, (x1, y1) bottom-right."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        for v in (self.x0, self.y0, self.x1, self.y1):
            if not math.isfinite(v):
                raise ValueError(f"box coordinates must be finite, got {self}")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box: {self}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True)
class OffsetVector:
    """Distances (l, t, r, b) from a location to the four box sides."""

    l: float
    t: float
    r: float
    b: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.l, self.t, self.r, self.b)


@dataclass(frozen=True)
class Location:
    """An image-plane point backed by one feature-grid cell of a pyramid level."""

    x: float
    y: float
    level: int

    @property
    def stride(self) -> int:
        return 2 ** self.level


def compute_offsets(loc: Location, box: Box) -> OffsetVector:
    """Offsets (l, t, r, b) from ``loc`` to the sides of ``box``.

    The location must lie inside the box (boundary included); callers filter
    outside locations before regressing.
    """
    off = OffsetVector(loc.x - box.x0, loc.y - box.y0, box.x1 - loc.x, box.y1 - loc.y)
    if min(off.as_tuple()) < 0:
        raise ValueError(f"location ({loc.x}, {loc.y}) lies outside {box}")
    return off


def decode_box(loc_x: float, loc_y: float, off: OffsetVector) -> Box:
    """Invert compute_offsets around a location."""
    return Box(loc_x - off.l, loc_y - off.t, loc_x + off.r, loc_y + off.b)


def centerness(off: OffsetVector) -> float:
    """Score in [0, 1] that peaks at the box center and hits 0 on the boundary.

    sqrt((min(l,r)/max(l,r)) * (min(t,b)/max(t,b))); the degenerate all-zero
    offset vector maps to 0.
    """
    l, t, r, b = off.as_tuple()
    if min(l, t, r, b) < 0:
        raise ValueError(f"offsets must be non-negative, got {off}")
    lr = max(l, r)
    tb = max(t, b)
    if lr == 0 or tb == 0:
        return 0.0
    return math.sqrt((min(l, r) / lr) * (min(t, b) / tb))


def box_iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes; 0 for disjoint boxes."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)
