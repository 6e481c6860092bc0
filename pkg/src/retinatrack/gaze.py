"""Gaze estimation by matching a frame against the canonical feature space."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .canonical import CanonicalFeatureSpace
from .features import FeatureSet, extract
from .matching import ConsensusParams, Matches, mutual_nn, score_matches
from .phantom import Calibration, Frame


@dataclass(frozen=True)
class TrackerConfig:
    cal: Calibration = field(default_factory=Calibration)
    cp: ConsensusParams = field(default_factory=ConsensusParams)
    use_enhancement: bool = False
    steering_enabled: bool = False
    max_keypoints: Optional[int] = None


@dataclass(frozen=True)
class GazeEstimate:
    yaw: float
    pitch: float
    n_matches: int
    total_score: float
    valid: bool


INVALID = GazeEstimate(0.0, 0.0, 0, 0.0, False)


def match_to_space(fs: FeatureSet, space: CanonicalFeatureSpace,
                   cp: ConsensusParams = ConsensusParams()) -> Matches:
    """Mutual-NN match frame features (src, centered coords) to space entries (tgt).

    Each displacement ``t_space - t_src`` is the frame-center location implied
    by that correspondence.
    """
    m = mutual_nn(fs, space.features, src_xy=fs.centered_xy, tgt_xy=space.positions)
    return score_matches(m, cp)


def estimate_gaze(scored: Matches, cfg: TrackerConfig = TrackerConfig()) -> GazeEstimate:
    """Score-weighted mean displacement of retained matches, converted to degrees.

    Image y grows downwards, so pitch is ``-dy / ppd_y``.
    """
    keep = scored.retained(cfg.cp.inlier_cut)
    n = int(keep.sum())
    if n < cfg.cp.min_matches:
        return GazeEstimate(0.0, 0.0, n, float(scored.score[keep].sum()) if n else 0.0, False)
    w = scored.score[keep]
    d = (w[:, None] * scored.displacement[keep]).sum(axis=0) / w.sum()
    yaw = d[0] / cfg.cal.ppd_x
    pitch = -d[1] / cfg.cal.ppd_y
    if cfg.steering_enabled:
        yaw += cfg.cal.steering_offset[0]
        pitch += cfg.cal.steering_offset[1]
    return GazeEstimate(float(yaw), float(pitch), n, float(w.sum()), True)


def track_frame(frame: Frame, space: CanonicalFeatureSpace,
                cfg: TrackerConfig = TrackerConfig()) -> GazeEstimate:
    if len(space) == 0:
        return INVALID
    fs = extract(frame, use_enhancement=cfg.use_enhancement, max_keypoints=cfg.max_keypoints)
    return estimate_gaze(match_to_space(fs, space, cfg.cp), cfg)


def track_sequence(frames: Sequence[Frame], space: CanonicalFeatureSpace,
                   cfg: TrackerConfig = TrackerConfig()) -> list[GazeEstimate]:
    """Independent per-frame estimates, in input order."""
    return [track_frame(f, space, cfg) for f in frames]
