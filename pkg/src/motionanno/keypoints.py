"""Per-frame whole-body keypoint containers (133-point layout)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError, ValidationError
from .skeleton import NUM_KEYPOINTS


def _check(points, scores, dim, kind):
    points = np.array(points, dtype=np.float64)
    scores = np.array(scores, dtype=np.float64)
    if points.shape != (NUM_KEYPOINTS, dim):
        raise StructuralError(f"{kind} points must have shape ({NUM_KEYPOINTS}, {dim}), got {points.shape}")
    if scores.shape != (NUM_KEYPOINTS,):
        raise StructuralError(f"{kind} scores must have shape ({NUM_KEYPOINTS},), got {scores.shape}")
    if not np.all(np.isfinite(points)):
        raise ValidationError(f"{kind} coordinates must be finite")
    if not np.all((scores >= 0.0) & (scores <= 1.0)):
        raise ValidationError(f"{kind} scores must lie in [0, 1]")
    points.setflags(write=False)
    scores.setflags(write=False)
    return points, scores


@dataclass(frozen=True)
class KeypointFrame2D:
    """133 image keypoints (u, v) in pixels with confidences in [0, 1]."""

    points: np.ndarray
    scores: np.ndarray
    frame: int = 0
    view: str = "cam0"
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        p, s = _check(self.points, self.scores, 2, "2D")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "scores", s)

    def __eq__(self, other):
        if not isinstance(other, KeypointFrame2D):
            return NotImplemented
        return (self.frame == other.frame and self.view == other.view
                and np.array_equal(self.points, other.points) and np.array_equal(self.scores, other.scores))


@dataclass(frozen=True)
class KeypointFrame3D:
    """133 keypoints (x, y, z) in meters with confidences in [0, 1]."""

    points: np.ndarray
    scores: np.ndarray
    frame: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        p, s = _check(self.points, self.scores, 3, "3D")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "scores", s)

    def __eq__(self, other):
        if not isinstance(other, KeypointFrame3D):
            return NotImplemented
        return (self.frame == other.frame and np.array_equal(self.points, other.points)
                and np.array_equal(self.scores, other.scores))


def stack_frames(frames) -> tuple[np.ndarray, np.ndarray]:
    """(T, 133, D) points and (T, 133) scores from a list of frames."""
    if len(frames) == 0:
        raise ValidationError("empty keypoint sequence")
    return np.stack([f.points for f in frames]), np.stack([f.scores for f in frames])


def rebuild_frames(template, points: np.ndarray, scores: np.ndarray):
    """Frames of the same kind/metadata as ``template`` with new values."""
    out = []
    for f, p, s in zip(template, points, scores):
        if isinstance(f, KeypointFrame2D):
            out.append(KeypointFrame2D(p, s, frame=f.frame, view=f.view, extra=dict(f.extra)))
        else:
            out.append(KeypointFrame3D(p, s, frame=f.frame, extra=dict(f.extra)))
    return out
