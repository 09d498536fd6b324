"""Text rendering of 3D keypoint sequences.

Each sampled frame becomes one line, ``Frame 0: pelvis [500 500 542] left hip [...]``,
with body-centred metric coordinates mapped linearly onto ``[0, quant_scale]``.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

SCHEMA = "structvis/pose/v1"


@dataclass(frozen=True)
class PoseConfig:
    n_frames: int = 6
    quant_scale: int = 1000
    half_range: float = 1.0

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError(f"n_frames must be >= 1, got {self.n_frames}")
        if self.quant_scale < 2:
            raise ValueError(f"quant_scale must be >= 2, got {self.quant_scale}")
        if not self.half_range > 0:
            raise ValueError(f"half_range must be positive, got {self.half_range}")


class PoseSequence:
    """Joint names plus a ``(frames, joints, 3)`` coordinate array in metres."""

    def __init__(self, joint_names: Sequence[str], frames, sequence_id: str = "", fps: float = 0.0):
        self.joint_names = tuple(joint_names)
        if not self.joint_names:
            raise ValueError("joint_names must be non-empty")
        if any(not n or "[" in n or "\n" in n for n in self.joint_names):
            raise ValueError("joint names must be non-empty and free of '[' and newlines")
        arr = np.asarray(frames, dtype=float)
        if arr.ndim != 3 or arr.shape[1:] != (len(self.joint_names), 3):
            raise ValueError(
                f"frames must have shape (T, {len(self.joint_names)}, 3), got {arr.shape}"
            )
        if not np.isfinite(arr).all():
            raise ValueError("pose coordinates must be finite")
        self.frames = arr
        self.sequence_id = sequence_id
        self.fps = fps

    def __len__(self):
        return self.frames.shape[0]


def sample_frame_indices(total: int, n: int) -> list:
    if total < 1 or n < 1:
        raise ValueError(f"need total >= 1 and n >= 1, got total={total}, n={n}")
    if n == 1:
        return [0]
    out = []
    for i in range(n):
        idx = int(Fraction(i * (total - 1), n - 1) + Fraction(1, 2))  # floor(x + 1/2), exact
        if not out or out[-1] != idx:
            out.append(idx)
    return out


def quantize_joint(c: float, cfg: PoseConfig = PoseConfig()) -> int:
    # exact arithmetic on the decimal reprs: float error near .5 would flip the rounding
    mid = Fraction(cfg.quant_scale, 2)
    x = mid + mid * Fraction(repr(float(c))) / Fraction(repr(float(cfg.half_range)))
    v = math.floor(x + Fraction(1, 2)) if x >= 0 else -math.floor(-x + Fraction(1, 2))
    return min(cfg.quant_scale, max(0, v))


def render_pose(seq: PoseSequence, cfg: PoseConfig = PoseConfig()) -> str:
    lines = []
    for ordinal, idx in enumerate(sample_frame_indices(len(seq), cfg.n_frames)):
        parts = [f"Frame {ordinal}:"]
        for name, xyz in zip(seq.joint_names, seq.frames[idx]):
            q = [quantize_joint(float(c), cfg) for c in xyz]
            parts.append(f"{name} [{q[0]} {q[1]} {q[2]}]")
        lines.append(" ".join(parts))
    return "\n".join(lines)


_POSE_LINE = re.compile(r"^Frame (\d+):((?: [^\[\n]+ \[\d+ \d+ \d+\])+)$")
_JOINT = re.compile(r" ([^\[\n]+) \[(\d+) (\d+) (\d+)\]")


def parse_pose(text: str) -> list:
    """Return ``[(ordinal, [(joint, (x, y, z)), ...]), ...]`` from rendered pose text."""
    out = []
    if not text:
        return out
    for n, line in enumerate(text.split("\n")):
        m = _POSE_LINE.match(line)
        if m is None:
            raise ValueError(f"line {n + 1} is not a pose line: {line!r}")
        joints = [(j.group(1), tuple(int(j.group(i)) for i in (2, 3, 4))) for j in _JOINT.finditer(m.group(2))]
        out.append((int(m.group(1)), joints))
    return out


def load_pose(path) -> PoseSequence:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(doc, dict) or doc.get("schema") != SCHEMA:
        raise ValueError(f"{path}: expected schema {SCHEMA!r}")
    try:
        return PoseSequence(
            doc["joint_names"], doc["frames"], sequence_id=doc.get("sequence_id", path.stem), fps=doc.get("fps", 0.0)
        )
    except KeyError as exc:
        raise ValueError(f"{path}: missing field {exc.args[0]!r}") from None
