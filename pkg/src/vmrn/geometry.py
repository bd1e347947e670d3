"""Axis-aligned box arithmetic.

Boxes are ``(x_min, y_min, x_max, y_max)`` in pixel coordinates. Scalar
helpers take :class:`BBox`; the ``*_array`` variants take ``(N, 4)`` arrays
and are what the detector and metrics use in hot loops.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np


class InvalidBoxError(ValueError):
    pass


class BBox(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def validate(self) -> "BBox":
        if not all(math.isfinite(v) for v in self):
            raise InvalidBoxError(f"non-finite box {tuple(self)}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidBoxError(f"degenerate box {tuple(self)}")
        return self

    def clip(self, width: float, height: float) -> "BBox":
        return BBox(
            min(max(self.x_min, 0.0), width),
            min(max(self.y_min, 0.0), height),
            min(max(self.x_max, 0.0), width),
            min(max(self.y_max, 0.0), height),
        )


class OffsetVector(NamedTuple):
    dx: float
    dy: float
    dw: float
    dh: float


def as_box(b) -> BBox:
    return b if isinstance(b, BBox) else BBox(*(float(v) for v in b))


def intersection_area(a: BBox, b: BBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; touching boxes give 0."""
    a = as_box(a).validate()
    b = as_box(b).validate()
    inter = intersection_area(a, b)
    return inter / (a.area + b.area - inter)


def union_box(a: BBox, b: BBox) -> BBox:
    a = as_box(a).validate()
    b = as_box(b).validate()
    return BBox(
        min(a.x_min, b.x_min),
        min(a.y_min, b.y_min),
        max(a.x_max, b.x_max),
        max(a.y_max, b.y_max),
    )


def encode_offsets(b: BBox, d: BBox) -> OffsetVector:
    """Center-size offsets of ``b`` relative to default box ``d``."""
    b = as_box(b).validate()
    d = as_box(d)
    if not (d.width > 0 and d.height > 0):
        raise InvalidBoxError(f"default box must have positive area, got {tuple(d)}")
    out = encode_array(np.asarray([b], dtype=np.float64), np.asarray([d], dtype=np.float64))[0]
    return OffsetVector(*(float(v) for v in out))


def decode_offsets(o: OffsetVector, d: BBox) -> BBox:
    d = as_box(d)
    if not (d.width > 0 and d.height > 0):
        raise InvalidBoxError(f"default box must have positive area, got {tuple(d)}")
    out = decode_array(np.asarray([o], dtype=np.float64), np.asarray([d], dtype=np.float64))[0]
    return BBox(*(float(v) for v in out))


def to_center_size(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes)
    wh = boxes[..., 2:] - boxes[..., :2]
    return np.concatenate([boxes[..., :2] + 0.5 * wh, wh], axis=-1)


def to_corners(cs: np.ndarray) -> np.ndarray:
    cs = np.asarray(cs)
    half = 0.5 * cs[..., 2:]
    return np.concatenate([cs[..., :2] - half, cs[..., :2] + half], axis=-1)


def encode_array(boxes: np.ndarray, defaults: np.ndarray) -> np.ndarray:
    b = to_center_size(boxes)
    d = to_center_size(defaults)
    return np.concatenate(
        [(b[..., :2] - d[..., :2]) / d[..., 2:], np.log(b[..., 2:] / d[..., 2:])], axis=-1
    )


def decode_array(offsets: np.ndarray, defaults: np.ndarray) -> np.ndarray:
    d = to_center_size(defaults)
    offsets = np.asarray(offsets)
    centers = d[..., :2] + offsets[..., :2] * d[..., 2:]
    sizes = d[..., 2:] * np.exp(offsets[..., 2:])
    return to_corners(np.concatenate([centers, sizes], axis=-1))


def area_array(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def intersection_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, M) intersection areas."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lo = np.maximum(a[:, None, :2], b[None, :, :2])
    hi = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(hi - lo, 0.0, None)
    return wh[..., 0] * wh[..., 1]


def iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, M) IoU table between two box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    inter = intersection_array(a, b)
    union = area_array(a)[:, None] + area_array(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out
