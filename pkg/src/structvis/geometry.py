"""Box types, IoU, normalization and integer quantization.

Coordinates are always ordered ``[x1 y1 x2 y2]`` (top-left, bottom-right).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal


def round_half_up(value: float) -> int:
    """Round to the nearest integer, ties away from zero for positives.

    The float is read through its shortest repr so that e.g. ``0.995 * 100``
    rounds the way the decimal literal suggests, identically on every platform.
    """
    return int(Decimal(repr(float(value))).to_integral_value(rounding=ROUND_HALF_UP))


def _scaled_half_up(value: float, scale: int) -> int:
    return int((Decimal(repr(float(value))) * scale).to_integral_value(rounding=ROUND_HALF_UP))


def _check_order(x1, y1, x2, y2, kind):
    if x1 > x2 or y1 > y2:
        raise ValueError(f"{kind} requires x1 <= x2 and y1 <= y2, got {(x1, y1, x2, y2)}")


@dataclass(frozen=True)
class PixelBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"PixelBox coordinates must be finite, got {coords}")
        if min(coords) < 0:
            raise ValueError(f"PixelBox coordinates must be >= 0, got {coords}")
        _check_order(*coords, "PixelBox")

    def __iter__(self):
        return iter((self.x1, self.y1, self.x2, self.y2))

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @classmethod
    def from_detector(cls, coords) -> "PixelBox":
        """Build from raw detector output, clipping negative overshoot to 0."""
        x1, y1, x2, y2 = (max(0.0, float(c)) for c in coords)
        return cls(x1, y1, x2, y2)


@dataclass(frozen=True)
class NormBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(0.0 <= c <= 1.0 for c in coords):
            raise ValueError(f"NormBox coordinates must lie in [0, 1], got {coords}")
        _check_order(*coords, "NormBox")

    def __iter__(self):
        return iter((self.x1, self.y1, self.x2, self.y2))


@dataclass(frozen=True)
class QuantBox:
    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(isinstance(c, int) and c >= 0 for c in coords):
            raise ValueError(f"QuantBox coordinates must be non-negative ints, got {coords}")
        _check_order(*coords, "QuantBox")

    def __iter__(self):
        return iter((self.x1, self.y1, self.x2, self.y2))

    def __str__(self):
        return f"[{self.x1} {self.y1} {self.x2} {self.y2}]"


@dataclass(frozen=True, order=True)
class FrameRef:
    index: int

    def __post_init__(self):
        if not isinstance(self.index, int) or self.index < 0:
            raise ValueError(f"frame index must be a non-negative int, got {self.index!r}")


@dataclass(frozen=True)
class Detection:
    label: str
    box: PixelBox
    score: float

    def __post_init__(self):
        if not self.label:
            raise ValueError("detection label must be non-empty")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")


def iou(a: PixelBox, b: PixelBox) -> float:
    """Intersection over union; 0 when both boxes have zero area."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def normalize(box: PixelBox, width: float, height: float) -> NormBox:
    if width <= 0 or height <= 0:
        raise ValueError(f"frame dimensions must be positive, got {width}x{height}")

    def clamp(v):
        return min(1.0, max(0.0, v))

    return NormBox(
        clamp(box.x1 / width), clamp(box.y1 / height), clamp(box.x2 / width), clamp(box.y2 / height)
    )


def quantize(box: NormBox, scale: int = 100) -> QuantBox:
    if scale < 1:
        raise ValueError(f"quantization scale must be >= 1, got {scale}")
    return QuantBox(*(_scaled_half_up(c, scale) for c in box))


def dequantize(box: QuantBox, scale: int = 100) -> NormBox:
    if scale < 1:
        raise ValueError(f"quantization scale must be >= 1, got {scale}")
    if max(box) > scale:
        raise ValueError(f"{box} exceeds quantization scale {scale}")
    return NormBox(*(c / scale for c in box))
