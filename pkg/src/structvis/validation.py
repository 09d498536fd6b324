"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array

from .pose import PoseSequence
from .tracking import TrackSet, parse_detection_doc


def check_scalar_range(value, name, lo=None, hi=None, integer=False):
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind):
        raise TypeError(f"{name} must be {'an int' if integer else 'a real number'}, got {value!r}")
    if lo is not None and value < lo or hi is not None and value > hi:
        raise ValueError(f"{name} must lie in [{lo}, {hi}], got {value}")
    return value


def check_norm_boxes(X) -> np.ndarray:
    """Validate an ``(n, 4)`` array of normalized ``x1 y1 x2 y2`` boxes."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != 4:
        raise ValueError(f"expected 4 box coordinates per row, got {X.shape[1]}")
    if X.min(initial=0.0) < 0.0 or X.max(initial=0.0) > 1.0:
        raise ValueError("normalized box coordinates must lie in [0, 1]")
    if np.any(X[:, 0] > X[:, 2]) or np.any(X[:, 1] > X[:, 3]):
        raise ValueError("boxes must satisfy x1 <= x2 and y1 <= y2")
    return X


def check_detection_videos(X) -> list:
    """Accept detection documents or ``(meta, observations)`` pairs."""
    out = []
    for item in X:
        if isinstance(item, dict):
            out.append(parse_detection_doc(item))
        elif isinstance(item, tuple) and len(item) == 2:
            out.append(item)
        else:
            raise TypeError(f"expected a detection document or (meta, observations), got {type(item).__name__}")
    return out


def check_tracksets(X) -> list:
    X = list(X)
    bad = [type(x).__name__ for x in X if not isinstance(x, TrackSet)]
    if bad:
        raise TypeError(f"expected TrackSet inputs, got {bad[0]}")
    return X


def check_pose_sequences(X, joint_names=None) -> list:
    out = []
    for item in X:
        if isinstance(item, PoseSequence):
            out.append(item)
        elif joint_names is not None:
            out.append(PoseSequence(joint_names, item))
        else:
            raise TypeError("raw pose arrays need joint_names")
    return out
