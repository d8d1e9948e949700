"""Pinhole cameras, weighted triangulation and bone-length-constrained 3D keypoints."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateGeometryError,
    ProjectionError,
    StructuralError,
    UnderdeterminedError,
    ValidationError,
)
from .filtering import FilterSpec, smooth_array
from .keypoints import KeypointFrame2D, KeypointFrame3D, stack_frames
from .skeleton import NUM_KEYPOINTS, SkeletonShape, SkeletonTopology

log = logging.getLogger(__name__)

MIN_DEPTH = 1e-6
DEFAULT_SCORE_FLOOR = 0.3
DEFAULT_MAX_CONDITION = 1e10


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera; ``rotation``/``translation`` map world to camera coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    name: str = "cam"

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))
                and np.isfinite(self.cx) and np.isfinite(self.cy)):
            raise ValidationError("camera parameters must be finite")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValidationError(f"camera {self.name!r}: rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        for k in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, k, float(getattr(self, k)))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def P(self) -> np.ndarray:
        """3x4 projection matrix."""
        return self.K @ np.hstack([self.rotation, self.translation[:, None]])

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.rotation.T + self.translation

    def with_extrinsics(self, rotation, translation) -> CameraModel:
        return CameraModel(self.fx, self.fy, self.cx, self.cy, rotation, translation, self.name)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": [float(v) for v in self.rotation.ravel()],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_json(cls, d: dict) -> CameraModel:
        R = np.asarray(d["rotation"], dtype=np.float64)
        if R.size != 9:
            raise StructuralError("camera rotation must have 9 entries (row-major)")
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   R.reshape(3, 3), np.asarray(d["translation"], dtype=np.float64), str(d.get("name", "cam")))


def project_points(camera: CameraModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project (..., 3) points; returns pixels (..., 2) and camera-space depth (...)."""
    Xc = camera.to_camera(X)
    z = Xc[..., 2]
    zs = np.where(np.abs(z) > MIN_DEPTH, z, MIN_DEPTH)
    u = camera.fx * Xc[..., 0] / zs + camera.cx
    v = camera.fy * Xc[..., 1] / zs + camera.cy
    return np.stack([u, v], axis=-1), z


def project(camera: CameraModel, point) -> np.ndarray:
    """Pinhole projection of one world point to (u, v) pixels."""
    uv, z = project_points(camera, np.asarray(point, dtype=np.float64).reshape(3))
    if not z > MIN_DEPTH:
        raise ProjectionError(f"point is behind camera {camera.name!r} (depth {z:.3g} m)")
    return uv


def pixel_ray(camera: CameraModel, uv) -> tuple[np.ndarray, np.ndarray]:
    """World-space ray (origin, unit direction) through pixel ``uv``."""
    u, v = uv
    d_cam = np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
    d = camera.rotation.T @ d_cam
    return camera.center, d / np.linalg.norm(d)


@dataclass(frozen=True)
class TriangulatedPoint:
    point: np.ndarray
    residual: float  # weighted RMS reprojection error, pixels
    num_views: int


def _dlt(cams, uvs, w):
    rows = []
    for cam, (u, v), wi in zip(cams, uvs, w):
        P = cam.P
        # normalize by focal length so rows from different cameras are comparable
        s = wi / max(cam.fx, cam.fy)
        rows.append(s * (u * P[2] - P[0]))
        rows.append(s * (v * P[2] - P[1]))
    A = np.asarray(rows)
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-12:
        raise DegenerateGeometryError("triangulated point is at infinity")
    return Xh[:3] / Xh[3]


def _reproj_and_jac(cams, X):
    res, jac = [], []
    for cam in cams:
        Xc = cam.rotation @ X + cam.translation
        x, y, z = Xc
        if z <= MIN_DEPTH:
            raise ProjectionError(f"triangulated point is behind camera {cam.name!r}")
        uv = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        dproj = np.array([[cam.fx / z, 0.0, -cam.fx * x / z**2], [0.0, cam.fy / z, -cam.fy * y / z**2]])
        res.append(uv)
        jac.append(dproj @ cam.rotation)
    return np.asarray(res), np.asarray(jac)


def triangulate_point(observations, score_floor: float = DEFAULT_SCORE_FLOOR,
                      max_condition: float = DEFAULT_MAX_CONDITION, gn_steps: int = 10) -> TriangulatedPoint:
    """Triangulate one point from (camera, (u, v), score) observations.

    Observations scoring below ``score_floor`` are dropped. The confidence
    weighted DLT estimate is refined by up to ``gn_steps`` Gauss-Newton steps
    on sum_i (s_i * reprojection_error_i)^2.
    """
    usable = [(c, np.asarray(uv, dtype=np.float64), float(s)) for c, uv, s in observations
              if s >= score_floor and s > 0]
    if len(usable) < 2:
        raise UnderdeterminedError(f"need at least 2 usable views, have {len(usable)}")
    cams = [o[0] for o in usable]
    uvs = np.array([o[1] for o in usable])
    w = np.array([o[2] for o in usable])
    X = _dlt(cams, uvs, w)
    W = (w ** 2)[:, None]
    for _ in range(gn_steps):
        proj, J = _reproj_and_jac(cams, X)
        r = proj - uvs
        H = np.einsum("vki,vk,vkj->ij", J, np.repeat(W, 2, axis=1), J)
        g = np.einsum("vki,vk,vk->i", J, np.repeat(W, 2, axis=1), r)
        if np.linalg.cond(H) > max_condition:
            raise DegenerateGeometryError("viewing rays are nearly parallel; triangulation is ill-conditioned")
        step = np.linalg.solve(H, -g)
        X = X + step
        if np.linalg.norm(step) < 1e-14 * max(1.0, np.linalg.norm(X)):
            break
    proj, J = _reproj_and_jac(cams, X)
    H = np.einsum("vki,vkj->ij", J * np.repeat(W, 2, axis=1)[..., None], J)
    if np.linalg.cond(H) > max_condition:
        raise DegenerateGeometryError("viewing rays are nearly parallel; triangulation is ill-conditioned")
    r2 = np.sum((proj - uvs) ** 2, axis=1)
    rms = float(np.sqrt(np.sum(w * r2) / np.sum(w)))
    return TriangulatedPoint(X, rms, len(usable))


# ---------------------------------------------------------------------------
# sequences


def mapped_bones(topology: SkeletonTopology) -> list[tuple[int, int, int]]:
    """(child keypoint, parent keypoint, child joint) for mapped bones, root-outward.

    A bone connects a mapped joint to its nearest mapped ancestor.
    """
    out = []
    kmap = topology.keypoint_map
    for j in range(1, topology.num_joints):
        if kmap[j] < 0:
            continue
        a = int(topology.parents[j])
        while a >= 0 and kmap[a] < 0:
            a = int(topology.parents[a]) if a > 0 else -1
        if a >= 0:
            out.append((int(kmap[j]), int(kmap[a]), j))
    return out


def bone_length_targets(points: np.ndarray, valid: np.ndarray, topology: SkeletonTopology,
                        shape_prior: SkeletonShape | None = None) -> dict[int, float]:
    """Per-bone target length: shape_prior when the bone is a direct skeleton bone,
    otherwise the median over frames where both ends are valid."""
    targets = {}
    for ck, pk, j in mapped_bones(topology):
        parent_joint = int(topology.parents[j])
        if shape_prior is not None and topology.keypoint_map[parent_joint] == pk:
            targets[ck] = float(shape_prior.bone_lengths[j - 1])
            continue
        both = valid[:, ck] & valid[:, pk]
        if not np.any(both):
            continue
        lengths = np.linalg.norm(points[both, ck] - points[both, pk], axis=-1)
        targets[ck] = float(np.median(lengths))
    return targets


def enforce_bone_lengths(points: np.ndarray, topology: SkeletonTopology, targets: dict[int, float]) -> np.ndarray:
    """Move each mapped child along its bone so the bone has its target length.

    Processes bones root-outward once per frame, so children see their
    parent's corrected position. ``points`` is (T, 133, 3).
    """
    out = np.array(points, dtype=np.float64, copy=True)
    for ck, pk, _ in mapped_bones(topology):
        if ck not in targets:
            continue
        d = out[:, ck] - out[:, pk]
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        ok = n[:, 0] > 1e-12
        out[ok, ck] = out[ok, pk] + d[ok] / n[ok] * targets[ck]
    return out


@dataclass
class TriangulationReport:
    residual_rms: float  # mean over triangulated keypoints, pixels
    failed: int  # keypoint-frames that could not be triangulated
    total: int


def triangulate_sequence(views, cameras, topology: SkeletonTopology,
                         shape_prior: SkeletonShape | None = None,
                         filter_spec: FilterSpec | None = FilterSpec(),
                         score_floor: float = DEFAULT_SCORE_FLOOR,
                         return_report: bool = False):
    """Triangulate time-aligned per-camera 2D keypoint streams into 3D frames.

    Per frame and keypoint: weighted triangulation; then the 3D trajectories
    are smoothed with ``filter_spec`` (pass None to skip); then mapped bones
    are projected to a single per-sequence length. Output scores are the
    harmonic mean of the contributing 2D scores (0 where triangulation failed,
    with the last valid position held).
    """
    if len(views) != len(cameras):
        raise StructuralError(f"{len(views)} views but {len(cameras)} cameras")
    if len(views) < 2:
        raise UnderdeterminedError("multi-view triangulation needs at least 2 cameras")
    T = len(views[0])
    if any(len(v) != T for v in views):
        raise StructuralError("all views must have the same number of frames")
    stacked = [stack_frames(v) for v in views]
    uv = np.stack([s[0] for s in stacked])  # (C, T, K, 2)
    sc = np.stack([s[1] for s in stacked])  # (C, T, K)

    pts = np.zeros((T, NUM_KEYPOINTS, 3))
    scores = np.zeros((T, NUM_KEYPOINTS))
    valid = np.zeros((T, NUM_KEYPOINTS), dtype=bool)
    residuals = []
    failed = 0
    for t in range(T):
        for k in range(NUM_KEYPOINTS):
            obs = [(cameras[c], uv[c, t, k], sc[c, t, k]) for c in range(len(cameras))]
            use = np.array([s >= score_floor and s > 0 for _, _, s in obs])
            if use.sum() < 2:
                if np.any(sc[:, t, k] > 0):
                    failed += 1
                continue
            try:
                tp = triangulate_point(obs, score_floor=score_floor)
            except (DegenerateGeometryError, ProjectionError, UnderdeterminedError) as exc:
                log.debug("frame %d keypoint %d: %s", t, k, exc)
                failed += 1
                continue
            pts[t, k] = tp.point
            s_used = sc[use, t, k]
            scores[t, k] = len(s_used) / np.sum(1.0 / s_used)
            valid[t, k] = True
            residuals.append(tp.residual)

    # hold last valid position (back-fill leading gaps with the first valid one)
    for k in range(NUM_KEYPOINTS):
        idx = np.flatnonzero(valid[:, k])
        if idx.size == 0:
            continue
        last = pts[idx[0], k].copy()
        for t in range(T):
            if valid[t, k]:
                last = pts[t, k].copy()
            else:
                pts[t, k] = last

    if filter_spec is not None and T >= filter_spec.min_length:
        pts = smooth_array(pts, scores, filter_spec)
    targets = bone_length_targets(pts, valid, topology, shape_prior)
    pts = enforce_bone_lengths(pts, topology, targets)

    frames = [KeypointFrame3D(pts[t], scores[t], frame=views[0][t].frame) for t in range(T)]
    if return_report:
        rep = TriangulationReport(float(np.mean(residuals)) if residuals else float("nan"), failed,
                                  int(np.sum(sc.max(axis=0) > 0)))
        return frames, rep
    return frames


def frames_from_projection(cameras, points3d: np.ndarray, mask: np.ndarray, score: float = 1.0,
                           frame_offset: int = 0) -> list[list[KeypointFrame2D]]:
    """Synthesize per-camera 2D frames by projecting (T, 133, 3) points.

    Keypoints outside ``mask`` ((133,) or per frame (T, 133)) get score 0
    and zero coordinates.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), points3d.shape[:2])
    views = []
    for cam in cameras:
        uv, z = project_points(cam, points3d)
        frames = []
        for t in range(points3d.shape[0]):
            s = np.where(mask[t] & (z[t] > MIN_DEPTH), score, 0.0)
            p = np.where(s[:, None] > 0, uv[t], 0.0)
            frames.append(KeypointFrame2D(p, s, frame=t + frame_offset, view=cam.name))
        views.append(frames)
    return views
