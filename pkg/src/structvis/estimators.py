"""scikit-learn style wrappers so the pipeline stages compose with ``Pipeline``.

>>> from sklearn.pipeline import make_pipeline
>>> pipe = make_pipeline(TrackBuilder(score_threshold=0.35), BoxScriptSerializer(token_budget=1000))
>>> scripts = pipe.fit_transform(detection_docs)  # doctest: +SKIP
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .pose import PoseConfig, render_pose
from .projector import ProjectorConfig, init_projector
from .serialize import SerializationConfig, TokenCostModel, serialize_video
from .tracking import build_tracks
from .validation import (
    check_detection_videos,
    check_norm_boxes,
    check_pose_sequences,
    check_scalar_range,
    check_tracksets,
)


class _Stateless(TransformerMixin, BaseEstimator):
    def fit(self, X=None, y=None):
        self._check_params()
        return self

    def __sklearn_is_fitted__(self):
        return True


class TrackBuilder(_Stateless):
    """Detection documents in, :class:`~structvis.tracking.TrackSet` objects out."""

    def __init__(self, score_threshold=0.0):
        self.score_threshold = score_threshold

    def _check_params(self):
        check_scalar_range(self.score_threshold, "score_threshold", 0.0, 1.0)

    def transform(self, X):
        self._check_params()
        return [build_tracks(obs, self.score_threshold, **meta) for meta, obs in check_detection_videos(X)]


class BoxScriptSerializer(_Stateless):
    """TrackSets in, budgeted box script texts out.

    ``tokenizer`` is ``"reference"`` or a shell command speaking the external
    tokenizer protocol.
    """

    def __init__(
        self,
        token_budget=1000,
        quant_scale=100,
        boxes_enabled=True,
        labels_only=False,
        fixed_stride=None,
        tokenizer="reference",
    ):
        self.token_budget = token_budget
        self.quant_scale = quant_scale
        self.boxes_enabled = boxes_enabled
        self.labels_only = labels_only
        self.fixed_stride = fixed_stride
        self.tokenizer = tokenizer

    def _check_params(self):
        check_scalar_range(self.token_budget, "token_budget", 1, integer=True)
        check_scalar_range(self.quant_scale, "quant_scale", 1, integer=True)
        if self.fixed_stride is not None:
            check_scalar_range(self.fixed_stride, "fixed_stride", 1, integer=True)

    def _config(self):
        self._check_params()
        cfg = SerializationConfig(
            self.token_budget, self.quant_scale, self.boxes_enabled, self.labels_only, self.fixed_stride
        )
        model = TokenCostModel() if self.tokenizer == "reference" else TokenCostModel("external", self.tokenizer)
        return cfg, model

    def serialize(self, X):
        """Full :class:`~structvis.serialize.BoxScript` results, one per TrackSet."""
        cfg, model = self._config()
        return [serialize_video(ts, cfg, model) for ts in check_tracksets(X)]

    def transform(self, X):
        return [s.text for s in self.serialize(X)]


class PoseSerializer(_Stateless):
    def __init__(self, n_frames=6, quant_scale=1000, half_range=1.0, joint_names=None):
        self.n_frames = n_frames
        self.quant_scale = quant_scale
        self.half_range = half_range
        self.joint_names = joint_names

    def _check_params(self):
        check_scalar_range(self.n_frames, "n_frames", 1, integer=True)
        check_scalar_range(self.quant_scale, "quant_scale", 2, integer=True)
        check_scalar_range(self.half_range, "half_range", 0.0)

    def transform(self, X):
        self._check_params()
        cfg = PoseConfig(self.n_frames, self.quant_scale, float(self.half_range))
        return [render_pose(seq, cfg) for seq in check_pose_sequences(X, self.joint_names)]


class BoxProjector(TransformerMixin, BaseEstimator):
    """Box embedding projector. ``fit`` only initializes parameters; there is no training loop.

    ``transform`` returns ``(n_boxes, tokens_per_box * embed_dim)``; use
    :meth:`project` for the ``(n_boxes, tokens_per_box, embed_dim)`` view.
    """

    def __init__(self, init="zero", init_range=0.1, n_layers=1, embed_dim=4096, tokens_per_box=1, random_state=0):
        self.init = init
        self.init_range = init_range
        self.n_layers = n_layers
        self.embed_dim = embed_dim
        self.tokens_per_box = tokens_per_box
        self.random_state = random_state

    def fit(self, X=None, y=None):
        cfg = ProjectorConfig(self.init, self.init_range, self.n_layers, self.embed_dim, self.tokens_per_box)
        self.projector_ = init_projector(cfg, seed=self.random_state)
        self.n_features_in_ = 4
        return self

    def project(self, X):
        check_is_fitted(self, "projector_")
        return self.projector_.project(check_norm_boxes(X))

    def transform(self, X):
        out = self.project(X)
        return out.reshape(out.shape[0], -1)

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "projector_")
        return np.array(
            [f"token{t}_dim{d}" for t in range(self.tokens_per_box) for d in range(self.embed_dim)], dtype=object
        )
