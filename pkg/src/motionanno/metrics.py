"""Evaluation metrics: similarity alignment, joint errors, temporal statistics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, StructuralError, ValidationError
from .skeleton import NUM_BODY_JOINTS, SkeletonTopology, default_topology


class SingleFrameWarning(UserWarning):
    """A temporal statistic was requested for a one-frame sequence."""


@dataclass(frozen=True)
class AlignmentResult:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    residual_rmse: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


def procrustes_align(source, target) -> AlignmentResult:
    """Closed-form similarity (s, R, t) minimizing sum ||s R x_i + t - y_i||^2."""
    X = np.asarray(source, dtype=np.float64)
    Y = np.asarray(target, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise StructuralError(f"expected matching (N, 3) arrays, got {X.shape} and {Y.shape}")
    if X.shape[0] < 3:
        raise DegenerateGeometryError("alignment needs at least 3 points")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    sx = np.linalg.svd(Xc, compute_uv=False)
    if sx[1] <= 1e-12 * max(sx[0], 1e-300):
        raise DegenerateGeometryError("source points are collinear or coincident")
    U, S, Vt = np.linalg.svd(Yc.T @ Xc)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    var_x = float(np.sum(Xc**2))
    s = float(np.sum(S * np.diag(D))) / var_x
    t = my - s * R @ mx
    resid = s * Xc @ R.T - Yc
    rmse = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))
    return AlignmentResult(s, R, t, rmse)


def mpjpe(pred, gt, aligned: bool = False) -> float:
    """Mean per-joint position error in millimetres (inputs in metres).

    Accepts (J, 3) or (F, J, 3); with ``aligned`` each frame is Procrustes
    aligned to the ground truth first.
    """
    P = np.asarray(pred, dtype=np.float64)
    G = np.asarray(gt, dtype=np.float64)
    if P.shape != G.shape or P.shape[-1] != 3 or P.ndim not in (2, 3):
        raise StructuralError(f"shape mismatch: {P.shape} vs {G.shape}")
    if P.ndim == 2:
        P, G = P[None], G[None]
    if aligned:
        P = np.stack([procrustes_align(p, g).apply(p) for p, g in zip(P, G)])
    return float(np.mean(np.linalg.norm(P - G, axis=-1)) * 1000.0)


def _relative_joints(seq: np.ndarray, part: str, topology: SkeletonTopology) -> np.ndarray:
    if seq.ndim != 3 or seq.shape[1:] != (topology.num_joints, 3):
        raise StructuralError(f"part selection expects (F, {topology.num_joints}, 3) joints, got {seq.shape}")
    chunks = []
    if part in ("body", "all"):
        root = topology.index("pelvis")
        body = np.arange(NUM_BODY_JOINTS)
        body = body[body != root]
        chunks.append(seq[:, body] - seq[:, root:root + 1])
    if part in ("hands", "all"):
        for s in ("l", "r"):
            wrist = topology.index(f"{s}_wrist")
            idx = [i for i, n in enumerate(topology.joints) if n.startswith(f"{s}_") and n[-1].isdigit()]
            chunks.append(seq[:, idx] - seq[:, wrist:wrist + 1])
    if part in ("face", "all"):
        neck = topology.index("neck")
        idx = [topology.index("jaw"), topology.index("head")]
        chunks.append(seq[:, idx] - seq[:, neck:neck + 1])
    if not chunks:
        raise ValidationError(f"unknown part {part!r}; expected body, hands, face or all")
    return np.concatenate([c.reshape(c.shape[0], -1) for c in chunks], axis=1)


def temporal_std(seq, part: str | None = None, topology: SkeletonTopology | None = None) -> float:
    """Mean over channels of the population standard deviation over time.

    ``seq`` is (F, ...) with time first. With ``part`` set to "body", "hands",
    "face" or "all", ``seq`` must be (F, 53, 3) joints, which are expressed
    relative to the pelvis, the wrists and the neck respectively.
    """
    a = np.asarray(seq, dtype=np.float64)
    if a.ndim < 1:
        raise StructuralError("sequence must have a time axis")
    if a.shape[0] < 2:
        warnings.warn("temporal_std of a single frame is 0", SingleFrameWarning, stacklevel=2)
        return 0.0
    if part is not None:
        a = _relative_joints(a, part, topology or default_topology())
    a = a.reshape(a.shape[0], -1)
    return float(np.mean(np.std(a, axis=0)))


def jerk_rms(seq, fps: float) -> float:
    """RMS norm of the third finite difference times fps^3 (m/s^3 for metres).

    The last axis is treated as the coordinate axis; a 1-D input is a scalar
    signal.
    """
    a = np.asarray(seq, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] < 4:
        raise ValidationError(f"jerk needs at least 4 frames, got {a.shape[0]}")
    if not (np.isfinite(fps) and fps > 0):
        raise ValidationError(f"fps must be positive, got {fps}")
    d3 = np.diff(a, n=3, axis=0) * fps**3
    return float(np.sqrt(np.mean(np.sum(d3**2, axis=-1))))
