"""Whole-body kinematic skeleton, pose parameters and forward kinematics.

The skeleton is a rigid 53-joint tree (22 body joints, jaw, 15 joints per
hand) standing in for the SMPL-X kinematic chain. World axes: z up, y is the
subject's forward direction, x points to the subject's left.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import StructuralError, ValidationError
from .rotations import exp_so3, right_jacobian, wrap_axis_angle

NUM_BODY_JOINTS = 22
NUM_HAND_JOINTS = 30
NUM_JOINTS = 53
NUM_KEYPOINTS = 133
NUM_EXPRESSION = 50
JAW_INDEX = 22


@dataclass(frozen=True)
class SkeletonTopology:
    """Joint tree plus its correspondence to the 133-keypoint detector layout.

    ``keypoint_map[j]`` is the detector index for joint ``j`` or -1 when the
    joint has no detector counterpart.
    """

    name: str
    joints: tuple[str, ...]
    parents: np.ndarray  # (J,), -1 for the root
    rest_directions: np.ndarray  # (J, 3), row 0 unused
    rest_lengths: np.ndarray  # (J,), entry 0 unused
    keypoint_map: np.ndarray  # (J,)
    capsule_radii: np.ndarray  # (J,), radius of the bone ending at joint j

    def __post_init__(self):
        J = len(self.joints)
        parents = np.asarray(self.parents, dtype=np.int64)
        if parents.shape != (J,) or self.rest_directions.shape != (J, 3):
            raise StructuralError("topology arrays do not match the joint count")
        roots = np.flatnonzero(parents < 0)
        if roots.size != 1 or roots[0] != 0:
            raise StructuralError("topology must have exactly one root at index 0")
        for j in range(1, J):
            if not 0 <= parents[j] < j:
                raise StructuralError(
                    f"joint {self.joints[j]!r}: parent must precede the child (index {parents[j]})"
                )
        norms = np.linalg.norm(self.rest_directions[1:], axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValidationError("rest directions must have unit norm")
        mapped = self.keypoint_map[self.keypoint_map >= 0]
        if np.unique(mapped).size != mapped.size:
            raise StructuralError("keypoint_map must be injective")
        if np.any(mapped >= NUM_KEYPOINTS):
            raise StructuralError("keypoint index out of range")
        for arr in (parents, self.rest_directions, self.rest_lengths, self.keypoint_map, self.capsule_radii):
            arr.setflags(write=False)

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    def index(self, name: str) -> int:
        return self.joints.index(name)

    @cached_property
    def children(self) -> list[list[int]]:
        ch: list[list[int]] = [[] for _ in self.joints]
        for j in range(1, self.num_joints):
            ch[int(self.parents[j])].append(j)
        return ch

    @cached_property
    def mapped_joints(self) -> np.ndarray:
        """Indices of joints that have a detector keypoint."""
        return np.flatnonzero(self.keypoint_map >= 0)

    @cached_property
    def mirror_index(self) -> np.ndarray:
        """Permutation swapping left/right joints (``l_*`` <-> ``r_*``)."""
        out = np.arange(self.num_joints)
        for j, n in enumerate(self.joints):
            if n.startswith("l_"):
                out[j] = self.index("r_" + n[2:])
            elif n.startswith("r_"):
                out[j] = self.index("l_" + n[2:])
        return out

    def default_shape(self) -> SkeletonShape:
        return SkeletonShape(self.rest_lengths[1:].copy())

    def rest_joints(self, shape: SkeletonShape | None = None) -> np.ndarray:
        """Rest-pose joint positions with the root at the origin."""
        shape = shape or self.default_shape()
        pos = np.zeros((self.num_joints, 3))
        for j in range(1, self.num_joints):
            pos[j] = pos[self.parents[j]] + self.rest_directions[j] * shape.bone_lengths[j - 1]
        return pos

    def joints_to_keypoints(self, joints: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Scatter (..., J, D) joint values into the (..., 133, D) layout.

        Returns the keypoint array (zeros where unmapped) and a boolean mask of
        filled keypoints.
        """
        joints = np.asarray(joints, dtype=np.float64)
        out = np.zeros(joints.shape[:-2] + (NUM_KEYPOINTS, joints.shape[-1]))
        m = self.mapped_joints
        out[..., self.keypoint_map[m], :] = joints[..., m, :]
        mask = np.zeros(NUM_KEYPOINTS, dtype=bool)
        mask[self.keypoint_map[m]] = True
        return out, mask

    def to_json(self) -> dict:
        joints = []
        for j, n in enumerate(self.joints):
            e: dict = {"name": n, "parent": None if j == 0 else self.joints[self.parents[j]]}
            if j > 0:
                e["rest_direction"] = [float(x) for x in self.rest_directions[j]]
                e["rest_length"] = float(self.rest_lengths[j])
                e["capsule_radius"] = float(self.capsule_radii[j])
            k = int(self.keypoint_map[j])
            e["keypoint"] = None if k < 0 else k
            joints.append(e)
        return {"name": self.name, "num_keypoints": NUM_KEYPOINTS, "joints": joints}

    @classmethod
    def from_json(cls, doc: dict) -> SkeletonTopology:
        try:
            entries = doc["joints"]
            names = tuple(e["name"] for e in entries)
            index = {n: i for i, n in enumerate(names)}
            J = len(names)
            parents = np.full(J, -1, dtype=np.int64)
            dirs = np.zeros((J, 3))
            lengths = np.zeros(J)
            kmap = np.full(J, -1, dtype=np.int64)
            radii = np.zeros(J)
            for i, e in enumerate(entries):
                if e.get("parent") is not None:
                    parents[i] = index[e["parent"]]
                    d = np.asarray(e["rest_direction"], dtype=np.float64)
                    n = np.linalg.norm(d)
                    if abs(n - 1.0) > 1e-6:
                        raise ValidationError(f"joint {e['name']!r}: rest_direction is not unit length")
                    dirs[i] = d / n
                    lengths[i] = float(e.get("rest_length", 0.1))
                    radii[i] = float(e.get("capsule_radius", 0.02))
                if e.get("keypoint") is not None:
                    kmap[i] = int(e["keypoint"])
        except (KeyError, TypeError) as exc:
            raise StructuralError(f"malformed topology description: {exc}") from exc
        return cls(
            name=str(doc.get("name", "custom")),
            joints=names,
            parents=parents,
            rest_directions=dirs,
            rest_lengths=lengths,
            keypoint_map=kmap,
            capsule_radii=radii,
        )


def load_topology(path: str | Path | None = None) -> SkeletonTopology:
    """Load a topology JSON description; the shipped 53-joint layout by default."""
    if path is None:
        text = resources.files("motionanno.data").joinpath("wholebody53.json").read_text()
    else:
        text = Path(path).read_text()
    return SkeletonTopology.from_json(json.loads(text))


_DEFAULT_TOPOLOGY: SkeletonTopology | None = None


def default_topology() -> SkeletonTopology:
    global _DEFAULT_TOPOLOGY
    if _DEFAULT_TOPOLOGY is None:
        _DEFAULT_TOPOLOGY = load_topology()
    return _DEFAULT_TOPOLOGY


@dataclass(frozen=True)
class SkeletonShape:
    """Bone lengths in meters, one per non-root joint (in joint order)."""

    bone_lengths: np.ndarray

    def __post_init__(self):
        b = np.array(self.bone_lengths, dtype=np.float64)
        if b.ndim != 1:
            raise StructuralError("bone_lengths must be a 1-D array")
        if not np.all(np.isfinite(b)) or np.any(b <= 0):
            raise ValidationError("bone lengths must be finite and strictly positive")
        b.setflags(write=False)
        object.__setattr__(self, "bone_lengths", b)

    def full(self) -> np.ndarray:
        """Lengths indexed by joint (root entry is 0)."""
        return np.concatenate([[0.0], self.bone_lengths])


def _frozen(a, shape, name) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if a.size != int(np.prod(shape)):
        raise StructuralError(f"{name} must have shape {shape}, got {a.shape}")
    a = a.reshape(shape)
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite values")
    return a


@dataclass(frozen=True)
class PoseState:
    """One frame of whole-body pose parameters.

    ``theta_body`` (22, 3), ``theta_hands`` (30, 3) and ``theta_jaw`` (3,) are
    axis-angle rotations in radians; ``psi`` holds 50 expression coefficients
    that are carried but not realized geometrically; ``r`` is the root
    translation in meters. Rotations are wrapped to norm <= pi on construction.
    """

    theta_body: np.ndarray
    theta_hands: np.ndarray
    theta_jaw: np.ndarray
    psi: np.ndarray = field(default_factory=lambda: np.zeros(NUM_EXPRESSION))
    r: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        vals = {
            "theta_body": _frozen(self.theta_body, (NUM_BODY_JOINTS, 3), "theta_body"),
            "theta_hands": _frozen(self.theta_hands, (NUM_HAND_JOINTS, 3), "theta_hands"),
            "theta_jaw": _frozen(self.theta_jaw, (3,), "theta_jaw"),
            "psi": _frozen(self.psi, (NUM_EXPRESSION,), "psi"),
            "r": _frozen(self.r, (3,), "r"),
        }
        for k in ("theta_body", "theta_hands", "theta_jaw"):
            vals[k] = wrap_axis_angle(vals[k])
        for k, v in vals.items():
            v.setflags(write=False)
            object.__setattr__(self, k, v)

    @classmethod
    def zeros(cls) -> PoseState:
        return cls(np.zeros((22, 3)), np.zeros((30, 3)), np.zeros(3))

    @classmethod
    def from_joint_rotations(cls, theta: np.ndarray, r=None, psi=None) -> PoseState:
        """Build from a (53, 3) per-joint axis-angle array (body, jaw, hands order)."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (NUM_JOINTS, 3):
            raise StructuralError(f"expected (53, 3) rotations, got {theta.shape}")
        return cls(
            theta_body=theta[:NUM_BODY_JOINTS],
            theta_hands=theta[JAW_INDEX + 1:],
            theta_jaw=theta[JAW_INDEX],
            psi=np.zeros(NUM_EXPRESSION) if psi is None else psi,
            r=np.zeros(3) if r is None else r,
        )

    def joint_rotations(self) -> np.ndarray:
        """Per-joint axis-angle rotations, (53, 3), in skeleton joint order."""
        return np.concatenate([self.theta_body, self.theta_jaw[None], self.theta_hands], axis=0)


def canonicalize_pose(pose: PoseState) -> PoseState:
    """Return ``pose`` with every axis-angle vector wrapped to norm in [0, pi]."""
    for name in ("theta_body", "theta_hands", "theta_jaw", "psi", "r"):
        if not np.all(np.isfinite(getattr(pose, name))):
            raise ValidationError(f"{name} contains non-finite values")
    # construction already wraps; rebuilding keeps the function total for subclasses
    return PoseState(
        wrap_axis_angle(pose.theta_body),
        wrap_axis_angle(pose.theta_hands),
        wrap_axis_angle(pose.theta_jaw),
        pose.psi,
        pose.r,
    )


@dataclass(frozen=True)
class MotionSequence:
    fps: float
    frames: tuple[PoseState, ...]
    shape: SkeletonShape

    def __post_init__(self):
        if not (np.isfinite(self.fps) and self.fps > 0):
            raise ValidationError("fps must be positive")
        if len(self.frames) == 0:
            raise ValidationError("a motion sequence needs at least one frame")
        object.__setattr__(self, "frames", tuple(self.frames))

    def __len__(self) -> int:
        return len(self.frames)

    def rotations(self) -> np.ndarray:
        """(F, 53, 3) joint rotations."""
        return np.stack([f.joint_rotations() for f in self.frames])

    def translations(self) -> np.ndarray:
        return np.stack([f.r for f in self.frames])

    def expressions(self) -> np.ndarray:
        return np.stack([f.psi for f in self.frames])

    @classmethod
    def from_arrays(cls, fps, shape, theta, r, psi=None) -> MotionSequence:
        theta = np.asarray(theta, dtype=np.float64)
        r = np.asarray(r, dtype=np.float64)
        F = theta.shape[0]
        if psi is None:
            psi = np.zeros((F, NUM_EXPRESSION))
        frames = tuple(PoseState.from_joint_rotations(theta[i], r[i], psi[i]) for i in range(F))
        return cls(fps=float(fps), frames=frames, shape=shape)


def _check_dims(topology: SkeletonTopology, shape: SkeletonShape, theta: np.ndarray):
    J = topology.num_joints
    if theta.shape[-2:] != (J, 3):
        raise StructuralError(f"rotations have shape {theta.shape[-2:]}, topology has {J} joints")
    if shape.bone_lengths.shape != (J - 1,):
        raise StructuralError(
            f"shape has {shape.bone_lengths.shape[0]} bone lengths, topology needs {J - 1}"
        )


def fk_batch(topology: SkeletonTopology, shape: SkeletonShape, theta: np.ndarray, r: np.ndarray):
    """Forward kinematics over a batch of frames.

    Args:
        theta: (F, J, 3) per-joint axis-angle rotations.
        r: (F, 3) root translations.

    Returns:
        positions (F, J, 3) and global joint rotations (F, J, 3, 3).
    """
    theta = np.asarray(theta, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    _check_dims(topology, shape, theta)
    F, J = theta.shape[:2]
    local = exp_so3(theta)
    G = np.empty((F, J, 3, 3))
    pos = np.empty((F, J, 3))
    G[:, 0] = local[:, 0]
    pos[:, 0] = r
    offsets = topology.rest_directions * shape.full()[:, None]
    parents = topology.parents
    for j in range(1, J):
        p = parents[j]
        pos[:, j] = pos[:, p] + G[:, p] @ offsets[j]
        G[:, j] = G[:, p] @ local[:, j]
    return pos, G


def fk_backward(topology: SkeletonTopology, theta: np.ndarray, pos: np.ndarray, G: np.ndarray,
                grad_pos: np.ndarray):
    """Pull a gradient w.r.t. joint positions back to (theta, r).

    A change of joint j's rotation rotates every strict descendant about
    joint j, so dL/d(omega_j) = sum_k (p_k - p_j) x g_k over descendants k,
    mapped to axis-angle coordinates through the right Jacobian.
    """
    F, J = theta.shape[:2]
    S = grad_pos.copy()  # subtree sums of g
    T = np.cross(pos, grad_pos)  # subtree sums of p x g
    parents = topology.parents
    for j in range(J - 1, 0, -1):
        p = parents[j]
        S[:, p] += S[:, j]
        T[:, p] += T[:, j]
    desc_S = S - grad_pos
    desc_T = T - np.cross(pos, grad_pos)
    w = desc_T - np.cross(pos, desc_S)  # world-frame torque-like term
    local_w = np.einsum("fjki,fjk->fji", G, w)  # G^T w
    Jr = right_jacobian(theta)
    grad_theta = np.einsum("fjki,fjk->fji", Jr, local_w)  # Jr^T G^T w
    grad_r = S[:, 0]
    return grad_theta, grad_r


def forward_kinematics(topology: SkeletonTopology, shape: SkeletonShape, pose: PoseState) -> np.ndarray:
    """Joint positions (53, 3) in meters for a single pose."""
    theta = pose.joint_rotations()
    if theta.shape[0] != topology.num_joints:
        raise StructuralError(
            f"pose has {theta.shape[0]} joint rotations, topology has {topology.num_joints} joints"
        )
    pos, _ = fk_batch(topology, shape, theta[None], pose.r[None])
    return pos[0]


def sequence_joints(topology: SkeletonTopology, motion: MotionSequence) -> np.ndarray:
    """FK over a whole motion, (F, 53, 3)."""
    pos, _ = fk_batch(topology, motion.shape, motion.rotations(), motion.translations())
    return pos
