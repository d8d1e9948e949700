"""Confidence-adaptive Savitzky-Golay smoothing of keypoint trajectories.

Each keypoint channel gets its own per-frame window: low local confidence
widens the window, high confidence keeps it narrow so motion detail
survives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .keypoints import rebuild_frames, stack_frames


@dataclass(frozen=True)
class FilterSpec:
    poly_order: int = 2
    w_min: int = 2
    w_max: int = 8

    def __post_init__(self):
        if int(self.poly_order) != self.poly_order or self.poly_order < 0:
            raise ValidationError("poly_order must be a non-negative integer")
        if not (1 <= self.w_min <= self.w_max):
            raise ValidationError("half-widths must satisfy 1 <= w_min <= w_max")
        if self.poly_order >= 2 * self.w_min + 1:
            raise ValidationError(
                f"poly_order {self.poly_order} needs a window wider than {2 * self.w_min + 1} samples"
            )

    @property
    def min_length(self) -> int:
        return 2 * self.w_min + 1

    @classmethod
    def from_dict(cls, d: dict) -> FilterSpec:
        unknown = set(d) - {"poly_order", "w_min", "w_max"}
        if unknown:
            raise ValidationError(f"unknown filter keys {sorted(unknown)}")
        return cls(int(d.get("poly_order", 2)), int(d.get("w_min", 2)), int(d.get("w_max", 8)))


_COEFF_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sg_coefficients(half_width: int, poly_order: int) -> np.ndarray:
    """Smoothing weights c_{-w..w} for the window centre.

    Row 0 of the pseudo-inverse of the (2w+1, order+1) Vandermonde matrix,
    i.e. the least-squares polynomial fit evaluated at offset 0.
    """
    if half_width < 0 or poly_order < 0:
        raise ValidationError("half_width and poly_order must be non-negative")
    if poly_order >= 2 * half_width + 1:
        raise ValidationError(
            f"poly_order {poly_order} is too high for a {2 * half_width + 1}-sample window"
        )
    key = (half_width, poly_order)
    if key not in _COEFF_CACHE and poly_order == 0:
        # closed form of the constant fit; avoids last-bit rounding from the QR route
        c = np.full(2 * half_width + 1, 1.0 / (2 * half_width + 1))
        c.setflags(write=False)
        _COEFF_CACHE[key] = c
    if key not in _COEFF_CACHE:
        j = np.arange(-half_width, half_width + 1, dtype=np.float64)
        # scale offsets to [-1, 1] for conditioning; the value at 0 is unaffected
        x = j / max(half_width, 1)
        A = np.vander(x, poly_order + 1, increasing=True)
        Q, R = np.linalg.qr(A)
        # c = e0^T (A^T A)^{-1} A^T = (R^{-T} e0)^T Q^T
        e0 = np.zeros(poly_order + 1)
        e0[0] = 1.0
        y = np.linalg.solve(R.T, e0)
        c = Q @ y
        c.setflags(write=False)
        _COEFF_CACHE[key] = c
    return _COEFF_CACHE[key]


def _local_mean(scores: np.ndarray, radius: int) -> np.ndarray:
    """Mean over [i - radius, i + radius] clipped to the series, along axis 0."""
    T = scores.shape[0]
    csum = np.concatenate([np.zeros((1,) + scores.shape[1:]), np.cumsum(scores, axis=0)])
    idx = np.arange(T)
    lo = np.clip(idx - radius, 0, T)
    hi = np.clip(idx + radius + 1, 0, T)
    total = csum[hi] - csum[lo]
    count = (hi - lo).reshape((T,) + (1,) * (scores.ndim - 1))
    return total / count


def _window_from_mean(mean_score, spec: FilterSpec):
    raw = spec.w_min + np.floor((1.0 - mean_score) * (spec.w_max - spec.w_min) + 0.5)
    return np.clip(raw, spec.w_min, spec.w_max).astype(np.int64)


def adaptive_window(scores, frame: int, spec: FilterSpec) -> int:
    """Half-width for one frame of one keypoint's confidence series.

    w = w_min + round((1 - s) * (w_max - w_min)), with s the mean confidence
    over the w_max-neighbourhood of ``frame`` (clipped at the series ends).
    Rounding is half-up.
    """
    s = np.asarray(scores, dtype=np.float64)
    if np.any((s < 0) | (s > 1)):
        raise ValidationError("scores must lie in [0, 1]")
    lo = max(frame - spec.w_max, 0)
    hi = min(frame + spec.w_max + 1, s.shape[0])
    return int(_window_from_mean(float(np.mean(s[lo:hi])), spec))


def adaptive_windows(scores: np.ndarray, spec: FilterSpec) -> np.ndarray:
    """Vectorized :func:`adaptive_window` for a (T, K) score array."""
    return _window_from_mean(_local_mean(np.asarray(scores, dtype=np.float64), spec.w_max), spec)


def _odd_pad(x: np.ndarray, pad: int) -> np.ndarray:
    # point reflection about the end samples: x[-j] = 2 x[0] - x[j]
    head = 2.0 * x[:1] - x[pad:0:-1]
    tail = 2.0 * x[-1:] - x[-2:-pad - 2:-1]
    return np.concatenate([head, x, tail], axis=0)


def smooth_array(points: np.ndarray, scores: np.ndarray, spec: FilterSpec) -> np.ndarray:
    """Smooth a (T, K, D) trajectory array with per-frame, per-keypoint windows.

    Boundaries use point-symmetric reflection about the first/last sample,
    which keeps constant and linear trajectories unchanged up to the ends.
    """
    points = np.asarray(points, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    T = points.shape[0]
    if T < spec.min_length:
        raise ValidationError(
            f"sequence has {T} frames; smoothing needs at least {spec.min_length}"
        )
    windows = np.minimum(adaptive_windows(scores, spec), T - 1)
    wmax = int(windows.max())
    padded = _odd_pad(points, wmax)
    out = np.empty_like(points)
    for w in np.unique(windows):
        w = int(w)
        c = sg_coefficients(w, spec.poly_order)
        acc = np.zeros_like(points)
        for j, cj in zip(range(-w, w + 1), c):
            acc += cj * padded[wmax + j: wmax + j + T]
        sel = windows == w
        out[sel] = acc[sel]
    return out


def smooth_sequence(frames, spec: FilterSpec | None = None):
    """Smooth a list of KeypointFrame2D (or KeypointFrame3D); scores pass through."""
    spec = spec or FilterSpec()
    if len(frames) < spec.min_length:
        raise ValidationError(
            f"sequence has {len(frames)} frames; smoothing needs at least {spec.min_length}"
        )
    pts, scores = stack_frames(frames)
    return rebuild_frames(frames, smooth_array(pts, scores, spec), scores)
