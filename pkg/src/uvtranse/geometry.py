"""Axis-aligned boxes, overlap measures, and normalized spatial features.

Boxes are (x, y, w, h) with (x, y) the top-left corner in pixel
coordinates; w and h must be positive, but boxes may extend past the
image border (detectors emit those). All derived features are
normalized by image or box dimensions, which makes the 19-d pair vector
invariant under joint rescaling of boxes and image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box: w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls(x1, y1, x2 - x1, y2 - y1)

    def to_corners(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x2, self.y2)


@dataclass(frozen=True)
class ImageDims:
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"invalid image dims {self.width} x {self.height}")

    @property
    def area(self) -> float:
        return self.width * self.height


def union_box(a: Box, b: Box) -> Box:
    """Smallest box enclosing both inputs."""
    x1 = min(a.x, b.x)
    y1 = min(a.y, b.y)
    x2 = max(a.x2, b.x2)
    y2 = max(a.y2, b.y2)
    return Box.from_corners(x1, y1, x2, y2)


def intersection_area(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes, always in [0, 1]."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def box_location_feature(b: Box, img: ImageDims) -> np.ndarray:
    """5-d normalized location: corners over image dims plus area ratio."""
    return np.array(
        [
            b.x / img.width,
            b.y / img.height,
            (b.x + b.w) / img.width,
            (b.y + b.h) / img.height,
            b.area / img.area,
        ]
    )


def pair_location_feature(s: Box, o: Box, img: ImageDims) -> np.ndarray:
    """9-d relative geometry of a subject/object box pair.

    Offsets are normalized by the other box's size in both directions,
    log size ratios both ways, and the union area over the image area.
    """
    u = union_box(s, o)
    return np.array(
        [
            (s.x - o.x) / o.w,
            (s.y - o.y) / o.h,
            np.log(s.w / o.w),
            np.log(s.h / o.h),
            (o.x - s.x) / s.w,
            (o.y - s.y) / s.h,
            np.log(o.w / s.w),
            np.log(o.h / s.h),
            u.area / img.area,
        ]
    )


def triplet_location_vector(s: Box, o: Box, img: ImageDims) -> np.ndarray:
    """19-d spatial input: subject 5-d, object 5-d, then the pair 9-d."""
    return np.concatenate(
        [
            box_location_feature(s, img),
            box_location_feature(o, img),
            pair_location_feature(s, o, img),
        ]
    )
