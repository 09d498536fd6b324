"""Colored box overlays on RGB frames, written as binary PPM."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import PixelBox, round_half_up

GOLDEN_ANGLE = 137.508


@dataclass
class RgbImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8, row-major

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width, 3):
            raise ValueError(f"pixel buffer must be {(self.height, self.width, 3)}, got {self.pixels.shape}")

    @classmethod
    def blank(cls, width: int, height: int, color=(0, 0, 0)) -> "RgbImage":
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[:] = color
        return cls(width, height, px)

    @classmethod
    def from_buffer(cls, width: int, height: int, buffer: bytes) -> "RgbImage":
        if len(buffer) != 3 * width * height:
            raise ValueError(f"buffer length {len(buffer)} != 3*{width}*{height}")
        return cls(width, height, np.frombuffer(buffer, dtype=np.uint8).reshape(height, width, 3).copy())

    @property
    def buffer(self) -> bytes:
        return self.pixels.tobytes()

    def copy(self) -> "RgbImage":
        return RgbImage(self.width, self.height, self.pixels.copy())


def track_color(track_id: int) -> tuple:
    """Fully saturated color with hue stepped by the golden angle per id."""
    if track_id < 0:
        raise ValueError(f"track id must be >= 0, got {track_id}")
    hue = math.fmod(track_id * GOLDEN_ANGLE, 360.0)
    sector = int(hue // 60) % 6
    x = 1.0 - abs(math.fmod(hue / 60.0, 2.0) - 1.0)
    r, g, b = [
        (1, x, 0),
        (x, 1, 0),
        (0, 1, x),
        (0, x, 1),
        (x, 0, 1),
        (1, 0, x),
    ][sector]
    return tuple(round_half_up(255 * c) for c in (r, g, b))


def _pixel_rect(box: PixelBox, width: int, height: int):
    """Half-open integer rectangle ``[c0, c1) x [r0, r1)`` clipped to the image."""
    c0 = min(width, round_half_up(box.x1))
    c1 = min(width, round_half_up(box.x2))
    r0 = min(height, round_half_up(box.y1))
    r1 = min(height, round_half_up(box.y2))
    return c0, c1, r0, r1


def draw_overlay(img: RgbImage, boxes: Sequence, thickness: int = 3) -> RgbImage:
    """Draw ``(track_id, PixelBox)`` rectangle borders, growing inward, later boxes on top."""
    if thickness < 1:
        raise ValueError(f"thickness must be >= 1, got {thickness}")
    out = img.copy()
    px = out.pixels
    for track_id, box in boxes:
        c0, c1, r0, r1 = _pixel_rect(box, img.width, img.height)
        if c1 <= c0 or r1 <= r0:
            continue
        color = track_color(track_id)
        t = thickness
        px[r0 : min(r1, r0 + t), c0:c1] = color
        px[max(r0, r1 - t) : r1, c0:c1] = color
        px[r0:r1, c0 : min(c1, c0 + t)] = color
        px[r0:r1, max(c0, c1 - t) : c1] = color
    return out


def write_ppm(img: RgbImage) -> bytes:
    return f"P6\n{img.width} {img.height}\n255\n".encode("ascii") + img.buffer


def read_ppm(data: bytes) -> RgbImage:
    """Parse a binary P6 file with maxval 255 (comments allowed in the header)."""
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        fields.append(data[start:pos])
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P6" or maxval != 255:
        raise ValueError(f"only binary P6 with maxval 255 is supported, got {magic!r}/{maxval}")
    return RgbImage.from_buffer(w, h, data[pos + 1 : pos + 1 + 3 * w * h])


def overlay_path(out_dir, video_id: str, frame_index: int) -> Path:
    return Path(out_dir) / video_id / f"frame_{frame_index}.ppm"
