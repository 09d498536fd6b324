"""Token-budgeted plain-text box and pose representations for multimodal LLM pipelines."""

from .estimators import BoxProjector, BoxScriptSerializer, PoseSerializer, TrackBuilder
from .geometry import Detection, FrameRef, NormBox, PixelBox, QuantBox, dequantize, iou, normalize, quantize
from .serialize import BoxScript, SerializationConfig, TokenCostModel, count_tokens, render_tracks, serialize_video
from .tracking import KeyframeObservation, Track, TrackSet, build_tracks

__version__ = "0.1.0"

__all__ = [
    "BoxProjector",
    "BoxScript",
    "BoxScriptSerializer",
    "Detection",
    "FrameRef",
    "KeyframeObservation",
    "NormBox",
    "PixelBox",
    "PoseSerializer",
    "QuantBox",
    "SerializationConfig",
    "TokenCostModel",
    "Track",
    "TrackBuilder",
    "TrackSet",
    "build_tracks",
    "count_tokens",
    "dequantize",
    "iou",
    "normalize",
    "quantize",
    "render_tracks",
    "serialize_video",
]
