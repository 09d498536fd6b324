"""Track reconstruction from keyframe detections and propagated track boxes.

At every keyframe, live tracks are first extended with the box the external
mask tracker propagated for them (or retired when the tracker lost them).
Fresh detections are then visited in descending score order; a detection
overlapping a propagated box or an already accepted detection by IoU > 0.5
is a duplicate, anything else starts a new track.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .geometry import Detection, FrameRef, PixelBox, iou

logger = logging.getLogger(__name__)

SCHEMA = "structvis/tracks/v1"
DUPLICATE_IOU = 0.5


class SchemaError(ValueError):
    """A document does not follow its declared schema."""

    def __init__(self, message, source=None, where=None):
        self.source = source
        self.where = where
        prefix = ":".join(str(p) for p in (source, where) if p is not None)
        super().__init__(f"{prefix}: {message}" if prefix else message)


@dataclass
class Track:
    id: int
    label: str
    observations: list = field(default_factory=list)  # [(FrameRef, PixelBox)]
    alive: bool = True

    def extend(self, frame: FrameRef, box: PixelBox):
        if not self.alive:
            raise ValueError(f"track {self.id} is dead and cannot gain observations")
        if self.observations and self.observations[-1][0] >= frame:
            raise ValueError(f"track {self.id}: frame {frame.index} is not after the last observation")
        self.observations.append((frame, box))

    @property
    def frames(self):
        return [f for f, _ in self.observations]


@dataclass(frozen=True)
class KeyframeObservation:
    frame: FrameRef
    detections: tuple = ()
    propagated: tuple = ()  # ((track_id, PixelBox | None), ...)

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))
        object.__setattr__(self, "propagated", tuple(self.propagated))
        ids = [tid for tid, _ in self.propagated]
        if len(ids) != len(set(ids)):
            raise ValueError(f"keyframe {self.frame.index}: duplicate propagated track ids")


@dataclass(frozen=True)
class TrackSet:
    tracks: tuple
    video_id: str = ""
    width: float = 1.0
    height: float = 1.0
    fps: float = 1.0
    keyframes: tuple = ()  # every keyframe FrameRef of the video, visible objects or not

    def __post_init__(self):
        object.__setattr__(self, "tracks", tuple(self.tracks))
        ids = [t.id for t in self.tracks]
        if sorted(ids) != list(range(len(ids))):
            raise ValueError("track ids must be unique and dense from 0")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"frame dimensions must be positive, got {self.width}x{self.height}")
        frames = {f for t in self.tracks for f in t.frames}
        keyframes = tuple(sorted(set(self.keyframes) | frames))
        object.__setattr__(self, "keyframes", keyframes)


def filter_detections(dets: Sequence[Detection], threshold: float) -> list:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"score threshold must lie in [0, 1], got {threshold}")
    return [d for d in dets if d.score >= threshold]


def associate(obs: KeyframeObservation, live: Sequence[Track], next_id: int = 0):
    """Advance ``live`` tracks to ``obs.frame`` and split detections.

    Live tracks are mutated in place. A live track missing from
    ``obs.propagated`` is treated as lost, same as an explicit ``None`` box.

    Returns ``(duplicates, births)``; births get ids from ``next_id`` upwards
    in processing order.
    """
    by_id = {t.id: t for t in live}
    for tid, _ in obs.propagated:
        if tid not in by_id or not by_id[tid].alive:
            raise KeyError(f"keyframe {obs.frame.index}: propagated box for unknown track {tid}")

    propagated = dict(obs.propagated)
    occupied = []
    for track in live:
        if not track.alive:
            continue
        box = propagated.get(track.id)
        if box is None:
            track.alive = False
        else:
            track.extend(obs.frame, box)
            occupied.append(box)

    order = sorted(range(len(obs.detections)), key=lambda i: (-obs.detections[i].score, i))
    duplicates, births = [], []
    for i in order:
        det = obs.detections[i]
        if any(iou(det.box, other) > DUPLICATE_IOU for other in occupied):
            duplicates.append(det)
            continue
        track = Track(next_id + len(births), det.label, [(obs.frame, det.box)])
        births.append(track)
        occupied.append(det.box)
    return duplicates, births


def build_tracks(
    observations: Sequence[KeyframeObservation],
    threshold: float,
    video_id: str = "",
    width: float = 1.0,
    height: float = 1.0,
    fps: float = 1.0,
) -> TrackSet:
    if not observations:
        raise ValueError("at least one keyframe observation is required")
    for prev, cur in zip(observations, observations[1:]):
        if cur.frame <= prev.frame:
            raise ValueError(
                f"keyframes must be strictly increasing, got {prev.frame.index} then {cur.frame.index}"
            )

    tracks = []
    for obs in observations:
        kept = filter_detections(obs.detections, threshold)
        obs = KeyframeObservation(obs.frame, kept, obs.propagated)
        _, births = associate(obs, [t for t in tracks if t.alive], next_id=len(tracks))
        tracks.extend(births)
    return TrackSet(
        tuple(tracks),
        video_id=video_id,
        width=width,
        height=height,
        fps=fps,
        keyframes=tuple(o.frame for o in observations),
    )


# -- documents ---------------------------------------------------------------


def _require(doc, key, where, source, kind=None):
    if not isinstance(doc, dict) or key not in doc:
        raise SchemaError(f"missing field {key!r}", source, where)
    value = doc[key]
    if kind is not None and (not isinstance(value, kind) or isinstance(value, bool)):
        raise SchemaError(f"field {key!r} has wrong type {type(value).__name__}", source, where)
    return value


def _box(raw, where, source, detector=False):
    if not isinstance(raw, list) or len(raw) != 4 or not all(
        isinstance(c, (int, float)) and not isinstance(c, bool) for c in raw
    ):
        raise SchemaError(f"box must be a list of 4 numbers, got {raw!r}", source, where)
    try:
        return PixelBox.from_detector(raw) if detector else PixelBox(*map(float, raw))
    except ValueError as exc:
        raise SchemaError(str(exc), source, where) from None


def _check_schema(doc, source):
    if not isinstance(doc, dict):
        raise SchemaError("document must be a JSON object", source)
    if doc.get("schema") != SCHEMA:
        raise SchemaError(f"expected schema {SCHEMA!r}, got {doc.get('schema')!r}", source)


def parse_detection_doc(doc, source=None):
    """Return ``(meta, observations)`` for a detection document."""
    _check_schema(doc, source)
    meta = {
        "video_id": _require(doc, "video_id", "video_id", source, str),
        "width": _require(doc, "width", "width", source, (int, float)),
        "height": _require(doc, "height", "height", source, (int, float)),
        "fps": doc.get("fps", 1.0),
    }
    if meta["width"] <= 0 or meta["height"] <= 0:
        raise SchemaError("width and height must be positive", source, "width")
    observations = []
    for k, kf in enumerate(_require(doc, "keyframes", "keyframes", source, list)):
        where = f"keyframes[{k}]"
        frame = _require(kf, "frame", where, source, int)
        if frame < 0:
            raise SchemaError("frame must be >= 0", source, where)
        dets = []
        for j, d in enumerate(kf.get("detections", [])):
            w = f"{where}.detections[{j}]"
            try:
                dets.append(
                    Detection(
                        _require(d, "label", w, source, str),
                        _box(_require(d, "box", w, source), w + ".box", source, detector=True),
                        float(_require(d, "score", w, source, (int, float))),
                    )
                )
            except ValueError as exc:
                if isinstance(exc, SchemaError):
                    raise
                raise SchemaError(str(exc), source, w) from None
        prop = []
        for j, p in enumerate(kf.get("propagated", [])):
            w = f"{where}.propagated[{j}]"
            tid = _require(p, "track_id", w, source, int)
            raw = p.get("box") if isinstance(p, dict) else None
            prop.append((tid, None if raw is None else _box(raw, w + ".box", source, detector=True)))
        try:
            observations.append(KeyframeObservation(FrameRef(frame), dets, prop))
        except ValueError as exc:
            raise SchemaError(str(exc), source, where) from None
    if not observations:
        raise SchemaError("no keyframes", source, "keyframes")
    return meta, observations


def load_detections(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(exc.msg, path, f"line {exc.lineno} col {exc.colno}") from None
    return parse_detection_doc(doc, source=path)


def trackset_to_doc(ts: TrackSet, settings: Optional[dict] = None) -> dict:
    doc = {
        "schema": SCHEMA,
        "video_id": ts.video_id,
        "width": ts.width,
        "height": ts.height,
        "fps": ts.fps,
        "keyframes": [f.index for f in ts.keyframes],
        "tracks": [
            {
                "id": t.id,
                "label": t.label,
                "observations": [{"frame": f.index, "box": list(b)} for f, b in t.observations],
            }
            for t in ts.tracks
        ],
    }
    if settings is not None:
        doc["settings"] = settings
    return doc


def trackset_from_doc(doc, source=None) -> TrackSet:
    _check_schema(doc, source)
    tracks = []
    for k, t in enumerate(_require(doc, "tracks", "tracks", source, list)):
        where = f"tracks[{k}]"
        obs = []
        for j, o in enumerate(_require(t, "observations", where, source, list)):
            w = f"{where}.observations[{j}]"
            obs.append((FrameRef(_require(o, "frame", w, source, int)), _box(_require(o, "box", w, source), w, source)))
        tracks.append(
            Track(_require(t, "id", where, source, int), _require(t, "label", where, source, str), obs, alive=False)
        )
    try:
        return TrackSet(
            tracks,
            video_id=_require(doc, "video_id", "video_id", source, str),
            width=doc.get("width", 1.0),
            height=doc.get("height", 1.0),
            fps=doc.get("fps", 1.0),
            keyframes=tuple(FrameRef(i) for i in doc.get("keyframes", [])),
        )
    except ValueError as exc:
        raise SchemaError(str(exc), source) from None


def load_trackset(path) -> TrackSet:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(exc.msg, path, f"line {exc.lineno} col {exc.colno}") from None
    return trackset_from_doc(doc, source=path)
