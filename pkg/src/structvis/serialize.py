"""Plain-text box scripts under a token budget.

A track renders as one line::

    (Object 3) red cube - frame 0 [8 0 54 93] frame 30 [9 1 55 93]

and a whole video is downsampled by keeping every k-th keyframe, with k the
smallest stride whose script stays strictly under the token budget.
"""

from __future__ import annotations

import json
import math
import re
import shlex
import subprocess
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

from .geometry import FrameRef, QuantBox, normalize, quantize
from .tracking import TrackSet

_TOKEN_RE = re.compile(r"[0-9]+|[^\W\d_]+| +|.", re.DOTALL)


class TokenizerError(RuntimeError):
    pass


@dataclass(frozen=True)
class TokenCostModel:
    """``reference`` is a deterministic built-in count; ``external`` calls a tokenizer process.

    The external command receives, on stdin, one record per text: the UTF-8
    byte length in ASCII decimal, a newline, then the bytes. It must print one
    decimal count per record, one per line, and exit 0.
    """

    mode: str = "reference"
    command: Optional[str] = None
    timeout: float = 60.0

    def __post_init__(self):
        if self.mode not in ("reference", "external"):
            raise ValueError(f"unknown token cost mode {self.mode!r}")
        if self.mode == "external" and not self.command:
            raise ValueError("external token cost model needs a command")


REFERENCE = TokenCostModel()


@dataclass(frozen=True)
class SerializationConfig:
    token_budget: int = 1000
    quant_scale: int = 100
    boxes_enabled: bool = True
    labels_only: bool = False
    fixed_stride: Optional[int] = None

    def __post_init__(self):
        if self.token_budget < 1:
            raise ValueError(f"token_budget must be >= 1, got {self.token_budget}")
        if self.quant_scale < 1:
            raise ValueError(f"quant_scale must be >= 1, got {self.quant_scale}")
        if self.fixed_stride is not None and self.fixed_stride < 1:
            raise ValueError(f"fixed_stride must be >= 1, got {self.fixed_stride}")


@dataclass(frozen=True)
class BoxScript:
    text: str
    stride: int
    token_count: int
    over_budget: bool
    frames_used: tuple = field(default_factory=tuple)

    def to_record(self, video_id: str) -> dict:
        return {
            "video_id": video_id,
            "stride": self.stride,
            "token_count": self.token_count,
            "over_budget": self.over_budget,
            "text": self.text,
        }


def reference_token_count(text: str) -> int:
    cost = 0
    for run in _TOKEN_RE.findall(text):
        if run[0] in "0123456789":
            cost += math.ceil(len(run) / 3)
        else:
            # letter run, run of spaces, or any single other character
            cost += 1
    return cost


def _external_counts(texts: Sequence[str], model: TokenCostModel) -> list:
    payload = b"".join(b"%d\n%s" % (len(b), b) for b in (t.encode("utf-8") for t in texts))
    try:
        proc = subprocess.run(
            shlex.split(model.command),
            input=payload,
            capture_output=True,
            timeout=model.timeout,
            check=False,
        )
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise TokenizerError(f"external tokenizer {model.command!r} failed: {exc}") from exc
    if proc.returncode != 0:
        err = proc.stderr.decode("utf-8", "replace").strip()
        raise TokenizerError(f"external tokenizer exited with {proc.returncode}: {err}")
    lines = proc.stdout.decode("ascii", "replace").split()
    if len(lines) != len(texts) or not all(s.isdigit() for s in lines):
        raise TokenizerError(f"external tokenizer returned {lines[:5]!r}... for {len(texts)} records")
    return [int(s) for s in lines]


def count_tokens_batch(texts: Sequence[str], model: TokenCostModel = REFERENCE) -> list:
    if model.mode == "reference":
        return [reference_token_count(t) for t in texts]
    if not texts:
        return []
    return _external_counts(texts, model)


def count_tokens(text: str, model: TokenCostModel = REFERENCE) -> int:
    return count_tokens_batch([text], model)[0]


def keep_frames_for_stride(keyframes: Sequence[FrameRef], stride: int) -> set:
    """Keyframes whose ordinal position is a multiple of ``stride``."""
    return {f for i, f in enumerate(sorted(keyframes)) if i % stride == 0}


def render_tracks(ts: TrackSet, keep_frames: Iterable[FrameRef], cfg: SerializationConfig) -> str:
    if not cfg.boxes_enabled:
        return ""
    keep = set(keep_frames)
    lines = []
    for track in sorted(ts.tracks, key=lambda t: t.id):
        parts = []
        for frame, box in track.observations:
            if frame not in keep:
                continue
            parts.append(f"frame {frame.index}")
            if not cfg.labels_only:
                q = quantize(normalize(box, ts.width, ts.height), cfg.quant_scale)
                parts.append(str(q))
        if parts:
            lines.append(f"(Object {track.id}) {track.label} - " + " ".join(parts))
    return "\n".join(lines)


def select_stride(ts: TrackSet, cfg: SerializationConfig, model: TokenCostModel = REFERENCE) -> int:
    """Smallest stride whose script costs fewer than ``cfg.token_budget`` tokens.

    Binary search over ``1..K`` (K keyframes), so the answer is exact when the
    cost is non-increasing in the stride. Whatever the input, the result ``k``
    has ``cost(k) < budget`` and ``cost(k - 1) >= budget``, or is ``K`` when
    even a single keyframe is over budget.
    """
    n_keyframes = len(ts.keyframes)
    if n_keyframes <= 1:
        return 1

    def fits(stride):
        text = render_tracks(ts, keep_frames_for_stride(ts.keyframes, stride), cfg)
        return count_tokens(text, model) < cfg.token_budget

    if fits(1):
        return 1
    if not fits(n_keyframes):
        return n_keyframes
    lo, hi = 1, n_keyframes  # fits(lo) is False, fits(hi) is True
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid):
            hi = mid
        else:
            lo = mid
    return hi


def serialize_video(
    ts: TrackSet, cfg: SerializationConfig = SerializationConfig(), model: TokenCostModel = REFERENCE
) -> BoxScript:
    stride = cfg.fixed_stride if cfg.fixed_stride is not None else select_stride(ts, cfg, model)
    keep = keep_frames_for_stride(ts.keyframes, stride)
    text = render_tracks(ts, keep, cfg)
    tokens = count_tokens(text, model)
    return BoxScript(
        text=text,
        stride=stride,
        token_count=tokens,
        over_budget=tokens >= cfg.token_budget,
        frames_used=tuple(sorted(keep)),
    )


_LINE_RE = re.compile(
    r"^\(Object (\d+)\) (.+) - ((?:frame \d+(?: \[\d+ \d+ \d+ \d+\])?)(?: frame \d+(?: \[\d+ \d+ \d+ \d+\])?)*)$"
)
_ENTRY_RE = re.compile(r"frame (\d+)(?: \[(\d+) (\d+) (\d+) (\d+)\])?")


def parse_box_script(text: str) -> list:
    """Inverse of :func:`render_tracks`.

    Returns ``(track_id, label, frame_index, QuantBox | None)`` tuples in
    rendering order; the box is ``None`` for label-only scripts.
    """
    out = []
    if not text:
        return out
    for n, line in enumerate(text.split("\n")):
        m = _LINE_RE.match(line)
        if m is None:
            raise ValueError(f"line {n + 1} is not a box script line: {line!r}")
        tid, label = int(m.group(1)), m.group(2)
        for e in _ENTRY_RE.finditer(m.group(3)):
            box = None if e.group(2) is None else QuantBox(*(int(e.group(i)) for i in range(2, 6)))
            out.append((tid, label, int(e.group(1)), box))
    return out


def write_script_records(fh, records: Iterable[dict], settings: Optional[dict] = None):
    """Write a line-delimited script dataset, header record first."""
    header = {"schema": "structvis/scripts/v1", "settings": settings or {}}
    fh.write(json.dumps(header, sort_keys=True) + "\n")
    for rec in records:
        fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def read_script_records(fh) -> dict:
    """Map video_id to record, skipping the header."""
    out = {}
    for line in fh:
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        if "schema" in rec:
            continue
        out[rec["video_id"]] = rec
    return out


def config_dict(cfg: SerializationConfig, model: TokenCostModel) -> dict:
    d = asdict(cfg)
    d["tokenizer"] = model.mode if model.mode == "reference" else model.command
    return d
