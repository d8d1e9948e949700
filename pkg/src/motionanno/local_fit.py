"""Per-sequence pose fitting against 3D/2D keypoints with smoothness,
collision and ground-contact terms.

Total objective::

    L = l_joint * L_joint + l_smooth * L_smooth + l_pen * L_pen + l_phy * L_phy

All terms come with analytic gradients w.r.t. joint rotations and root
translations; gradients w.r.t. joint positions are pulled back through
:func:`motionanno.skeleton.fk_backward`.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import FitDivergenceError, StructuralError, ValidationError
from .geometry import MIN_DEPTH, CameraModel
from .keypoints import stack_frames
from .optim import minimize
from .skeleton import (
    MotionSequence,
    PoseState,
    SkeletonShape,
    SkeletonTopology,
    fk_batch,
    fk_backward,
)

log = logging.getLogger(__name__)

FOOT_JOINTS = ("l_ankle", "r_ankle", "l_foot", "r_foot")
CONTACT_HEIGHT = 0.05
TERMS = ("joint", "smooth", "pen", "phy")


class SingleFrameWarning(UserWarning):
    """A temporal quantity was requested for a one-frame sequence."""


@dataclass(frozen=True)
class LossWeights:
    lambda_joint: float = 1.0
    lambda_smooth: float = 0.5
    lambda_pen: float = 0.1
    lambda_phy: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (np.isfinite(v) and v >= 0):
                raise ValidationError(f"{k} must be finite and non-negative, got {v}")

    def weight(self, term: str) -> float:
        return getattr(self, f"lambda_{term}")

    @classmethod
    def from_dict(cls, d: dict) -> LossWeights:
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class FitTargets:
    """Targets for :func:`fit_local`.

    ``k3d`` are 3D keypoints per frame; ``k2d`` optionally holds one list of
    2D frames per camera in ``cameras``; ``theta_init`` is the upstream
    parameter estimate that seeds the fit and anchors the prior term.
    """

    k3d: list
    theta_init: MotionSequence
    k2d: list | None = None
    cameras: list | None = None

    def __post_init__(self):
        F = len(self.theta_init)
        if len(self.k3d) != F:
            raise StructuralError(f"k3d has {len(self.k3d)} frames, theta_init has {F}")
        if self.k2d is not None:
            if self.cameras is None or len(self.cameras) != len(self.k2d):
                raise StructuralError("k2d needs one camera per view")
            for v in self.k2d:
                if len(v) != F:
                    raise StructuralError("every 2D view must have the same frame count as theta_init")


@dataclass(frozen=True)
class CollisionProxy:
    """Capsules around bones: bone j spans parent(j) -> j with radius ``radii[j]``.

    ``pairs`` lists the (a, b) bone pairs that are tested; bones within
    ``exclusion_hops`` of each other in the bone adjacency graph are excluded.
    """

    radii: np.ndarray
    pairs: np.ndarray  # (P, 2) bone (child joint) indices

    def __post_init__(self):
        r = np.asarray(self.radii, dtype=np.float64)
        if np.any(r[1:] <= 0):
            raise ValidationError("capsule radii must be positive")

    @classmethod
    def from_topology(cls, topology: SkeletonTopology, exclusion_hops: int = 2,
                      radii: np.ndarray | None = None) -> CollisionProxy:
        J = topology.num_joints
        radii = topology.capsule_radii if radii is None else np.asarray(radii, dtype=np.float64)
        parents = topology.parents
        bones = list(range(1, J))
        # two bones touch when they share a joint
        adj = {b: set() for b in bones}
        for a in bones:
            for b in bones:
                if a != b and ({a, int(parents[a])} & {b, int(parents[b])}):
                    adj[a].add(b)
        pairs = []
        for a in bones:
            near = {a}
            frontier = {a}
            for _ in range(exclusion_hops):
                frontier = set().union(*(adj[x] for x in frontier)) - near
                near |= frontier
            pairs.extend((a, b) for b in bones if b > a and b not in near)
        return cls(np.asarray(radii, dtype=np.float64), np.asarray(pairs, dtype=np.int64).reshape(-1, 2))


# ---------------------------------------------------------------------------
# geometry helpers


def segment_distance(p1, q1, p2, q2):
    """Closest distance between segments [p1, q1] and [p2, q2], vectorized.

    Returns (distance, s, t, c1, c2) with closest points c1 = p1 + s (q1 - p1),
    c2 = p2 + t (q2 - p2).
    """
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.einsum("...i,...i->...", d1, d1)
    e = np.einsum("...i,...i->...", d2, d2)
    f = np.einsum("...i,...i->...", d2, r)
    c = np.einsum("...i,...i->...", d1, r)
    b = np.einsum("...i,...i->...", d1, d2)
    eps = 1e-18
    denom = a * e - b * b
    s_free = np.clip((b * f - c * e) / np.where(denom > 0, denom, 1.0), 0, 1)
    s = np.where(denom > eps * np.maximum(a * e, eps), s_free, 0.0)
    s = np.where(a <= eps, 0.0, s)
    s = np.where((e <= eps) & (a > eps), np.clip(-c / np.where(a > eps, a, 1.0), 0, 1), s)
    t = np.where(e > eps, (b * s + f) / np.where(e > eps, e, 1.0), 0.0)
    # clamp t and recompute s where needed
    t_lo = t < 0
    t_hi = t > 1
    t = np.clip(t, 0.0, 1.0)
    s_re = np.where(a > eps, np.clip(np.where(t_lo, -c, b - c) / np.where(a > eps, a, 1.0), 0, 1), 0.0)
    s = np.where(t_lo | t_hi, s_re, s)
    c1 = p1 + s[..., None] * d1
    c2 = p2 + t[..., None] * d2
    dist = np.linalg.norm(c1 - c2, axis=-1)
    return dist, s, t, c1, c2


def _foot_indices(topology):
    return np.array([topology.index(n) for n in FOOT_JOINTS])


def _first_bad_frame(*arrays) -> int | None:
    for a in arrays:
        a = np.asarray(a)
        if a.ndim == 0:
            continue
        bad = ~np.isfinite(a.reshape(a.shape[0], -1)).all(axis=1)
        if bad.any():
            return int(np.argmax(bad))
    return None


def _check_finite(term: str, value, *grads):
    if np.isfinite(value) and all(np.all(np.isfinite(g)) for g in grads):
        return
    raise FitDivergenceError(term, _first_bad_frame(*grads))


# ---------------------------------------------------------------------------
# terms on arrays; each returns (value, gradients...)


def joint3d_term(pos, target_pts, target_scores, topology):
    """Confidence-weighted L1 over mapped keypoints, averaged over observations."""
    m = topology.mapped_joints
    k = topology.keypoint_map[m]
    w = target_scores[:, k]  # (F, M)
    obs = w > 0
    count = int(obs.sum())
    grad = np.zeros_like(pos)
    if count == 0:
        return 0.0, grad
    diff = pos[:, m] - target_pts[:, k]
    value = float(np.sum(w[..., None] * np.abs(diff)) / count)
    grad[:, m] = w[..., None] * np.sign(diff) / count
    return value, grad


def _project_with_jac(cam: CameraModel, X):
    Xc = X @ cam.rotation.T + cam.translation
    x, y, z = Xc[..., 0], Xc[..., 1], Xc[..., 2]
    bad = z <= MIN_DEPTH
    zs = np.where(bad, 1.0, z)
    uv = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=-1)
    J = np.zeros(X.shape[:-1] + (2, 3))
    J[..., 0, 0] = cam.fx / zs
    J[..., 0, 2] = -cam.fx * x / zs**2
    J[..., 1, 1] = cam.fy / zs
    J[..., 1, 2] = -cam.fy * y / zs**2
    return uv, J @ cam.rotation, bad


def joint2d_term(pos, views, topology):
    """Weighted L1 pixel reprojection error over all views' observations.

    ``views`` is a list of (camera, points (F, 133, 2), scores (F, 133)).
    Returns inf when an observed joint falls behind a camera.
    """
    m = topology.mapped_joints
    k = topology.keypoint_map[m]
    total = 0.0
    count = 0
    grad = np.zeros_like(pos)
    for cam, pts, sc in views:
        w = sc[:, k]
        obs = w > 0
        if not obs.any():
            continue
        uv, J, bad = _project_with_jac(cam, pos[:, m])
        if np.any(bad & obs):
            return float("inf"), grad
        diff = uv - pts[:, k]
        total += float(np.sum(w[..., None] * np.abs(diff)))
        count += int(obs.sum())
        g_uv = w[..., None] * np.sign(diff)
        grad[:, m] += np.einsum("fmk,fmki->fmi", g_uv, J)
    if count == 0:
        return 0.0, grad
    return total / count, grad / count


def prior_term(theta, theta_init):
    """Mean absolute deviation of joint rotations from the initial estimate."""
    diff = theta - theta_init
    n = diff.size
    return float(np.sum(np.abs(diff)) / n), np.sign(diff) / n


def smooth_terms(theta, r, pos):
    """First-difference L1 of parameters (rotations + translation) and of joints.

    Returns (value, param_part, joint_part, grad_theta, grad_r, grad_pos).
    """
    F = theta.shape[0]
    g_theta = np.zeros_like(theta)
    g_r = np.zeros_like(r)
    g_pos = np.zeros_like(pos)
    if F < 2:
        return 0.0, 0.0, 0.0, g_theta, g_r, g_pos
    n_param = theta[0].size + r[0].size
    dth = np.diff(theta, axis=0)
    dr = np.diff(r, axis=0)
    dp = np.diff(pos, axis=0)
    pn = (F - 1) * n_param
    jn = (F - 1) * pos.shape[1]
    param_part = (np.sum(np.abs(dth)) + np.sum(np.abs(dr))) / pn
    joint_part = np.sum(np.abs(dp)) / jn
    for d, g, n in ((dth, g_theta, pn), (dr, g_r, pn), (dp, g_pos, jn)):
        sg = np.sign(d) / n
        g[1:] += sg
        g[:-1] -= sg
    return float(param_part + joint_part), float(param_part), float(joint_part), g_theta, g_r, g_pos


def pen_term(pos, proxy: CollisionProxy, topology: SkeletonTopology):
    """Sum over frames and tested capsule pairs of max(0, r_a + r_b - d)^2."""
    parents = topology.parents
    a, b = proxy.pairs[:, 0], proxy.pairs[:, 1]
    p1, q1 = pos[:, parents[a]], pos[:, a]
    p2, q2 = pos[:, parents[b]], pos[:, b]
    d, s, t, c1, c2 = segment_distance(p1, q1, p2, q2)
    reach = proxy.radii[a] + proxy.radii[b]
    depth = np.maximum(0.0, reach - d)
    value = float(np.sum(depth**2))
    grad = np.zeros_like(pos)
    if value == 0.0:
        return 0.0, grad
    hit = depth > 0
    n = np.where(d[..., None] > 1e-12, (c1 - c2) / np.where(d > 1e-12, d, 1.0)[..., None], 0.0)
    coef = (-2.0 * depth)[..., None] * n * hit[..., None]  # dL/dc1 direction
    F = pos.shape[0]
    fidx = np.arange(F)[:, None]
    np.add.at(grad, (fidx, parents[a]), coef * (1 - s)[..., None])
    np.add.at(grad, (fidx, a), coef * s[..., None])
    np.add.at(grad, (fidx, parents[b]), -coef * (1 - t)[..., None])
    np.add.at(grad, (fidx, b), -coef * t[..., None])
    return value, grad


def phy_terms(pos, fps, ground_height, foot_idx, contact_height=CONTACT_HEIGHT):
    """Ground penetration plus foot skating.

    Penetration: sum of max(0, ground - z)^2 over frames and foot joints.
    Skating: for frames t where a foot joint is within ``contact_height`` of
    the ground, its squared horizontal speed (forward difference, m/s).
    Returns (value, penetration, skating, grad_pos).
    """
    grad = np.zeros_like(pos)
    feet = pos[:, foot_idx]
    below = np.maximum(0.0, ground_height - feet[..., 2])
    penetration = float(np.sum(below**2))
    grad[:, foot_idx, 2] += -2.0 * below
    skating = 0.0
    if pos.shape[0] >= 2:
        contact = (feet[:-1, :, 2] - ground_height) <= contact_height
        v = (feet[1:, :, :2] - feet[:-1, :, :2]) * fps
        sq = np.sum(v**2, axis=-1) * contact
        skating = float(np.sum(sq))
        g = 2.0 * v * fps * contact[..., None]
        gi = np.zeros_like(feet)
        gi[1:, :, :2] += g
        gi[:-1, :, :2] -= g
        grad[:, foot_idx] += gi
    return penetration + skating, penetration, skating, grad


# ---------------------------------------------------------------------------
# public loss functions on domain objects


def _targets_arrays(targets: FitTargets):
    k3d_pts, k3d_sc = stack_frames(targets.k3d)
    views = []
    if targets.k2d is not None:
        for cam, frames in zip(targets.cameras, targets.k2d):
            p, s = stack_frames(frames)
            views.append((cam, p, s))
    return k3d_pts, k3d_sc, views


def loss_joint(pose_seq: MotionSequence, targets: FitTargets, topology: SkeletonTopology,
               shape: SkeletonShape | None = None) -> tuple[float, dict]:
    """L1 keypoint and prior loss; returns (total, {"3d", "2d", "prior"})."""
    shape = shape or pose_seq.shape
    if len(pose_seq) != len(targets.k3d):
        raise StructuralError("pose sequence and targets have different frame counts")
    theta = pose_seq.rotations()
    pos, _ = fk_batch(topology, shape, theta, pose_seq.translations())
    k3d_pts, k3d_sc, views = _targets_arrays(targets)
    v3, _ = joint3d_term(pos, k3d_pts, k3d_sc, topology)
    v2, _ = joint2d_term(pos, views, topology) if views else (0.0, None)
    vp, _ = prior_term(theta, targets.theta_init.rotations())
    return v3 + v2 + vp, {"3d": v3, "2d": v2, "prior": vp}


def loss_smooth(pose_seq: MotionSequence, topology: SkeletonTopology, shape: SkeletonShape | None = None) -> float:
    if len(pose_seq) < 2:
        warnings.warn("smoothness of a single frame is 0", SingleFrameWarning, stacklevel=2)
        return 0.0
    shape = shape or pose_seq.shape
    theta = pose_seq.rotations()
    r = pose_seq.translations()
    pos, _ = fk_batch(topology, shape, theta, r)
    return smooth_terms(theta, r, pos)[0]


def loss_pen(pose: PoseState, proxy: CollisionProxy, topology: SkeletonTopology, shape: SkeletonShape) -> float:
    pos, _ = fk_batch(topology, shape, pose.joint_rotations()[None], pose.r[None])
    return pen_term(pos, proxy, topology)[0]


def loss_phy(pose_seq: MotionSequence, ground_height: float, topology: SkeletonTopology,
             shape: SkeletonShape | None = None) -> float:
    shape = shape or pose_seq.shape
    pos, _ = fk_batch(topology, shape, pose_seq.rotations(), pose_seq.translations())
    return phy_terms(pos, pose_seq.fps, ground_height, _foot_indices(topology))[0]


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitOptions:
    max_iter: int = 500
    rel_tol: float = 1e-6
    ground_height: float = 0.0
    exclusion_hops: int = 2
    terms: tuple = TERMS  # terms to include at all (a zero weight also drops a term)

    @classmethod
    def from_dict(cls, d: dict) -> FitOptions:
        d = dict(d)
        if "terms" in d:
            d["terms"] = tuple(d["terms"])
        return cls(**d)


@dataclass
class FitReport:
    iterations: int
    converged: bool
    reason: str
    initial_loss: float
    final_loss: float
    history: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, allow_nan=True)


class LocalObjective:
    """Callable objective over x = [theta (F*53*3), r (F*3)]."""

    def __init__(self, targets: FitTargets, weights: LossWeights, topology: SkeletonTopology,
                 shape: SkeletonShape, ground_height: float = 0.0, proxy: CollisionProxy | None = None,
                 terms=TERMS):
        self.topology = topology
        self.shape = shape
        self.weights = weights
        self.fps = targets.theta_init.fps
        self.ground = float(ground_height)
        self.F = len(targets.theta_init)
        self.J = topology.num_joints
        self.k3d_pts, self.k3d_sc, self.views = _targets_arrays(targets)
        self.theta_init = targets.theta_init.rotations()
        self.proxy = proxy or CollisionProxy.from_topology(topology)
        self.terms = tuple(t for t in TERMS if t in terms and weights.weight(t) != 0.0)
        self.foot_idx = _foot_indices(topology)

    def pack(self, theta, r) -> np.ndarray:
        return np.concatenate([np.asarray(theta).ravel(), np.asarray(r).ravel()])

    def unpack(self, x):
        n = self.F * self.J * 3
        return x[:n].reshape(self.F, self.J, 3), x[n:].reshape(self.F, 3)

    def __call__(self, x):
        theta, r = self.unpack(x)
        pos, G = fk_batch(self.topology, self.shape, theta, r)
        if not np.all(np.isfinite(pos)):
            raise FitDivergenceError("forward_kinematics", _first_bad_frame(pos))
        total = 0.0
        g_pos = np.zeros_like(pos)
        g_theta = np.zeros_like(theta)
        g_r = np.zeros_like(r)
        info = {}
        w = self.weights
        if "joint" in self.terms:
            v3, gp3 = joint3d_term(pos, self.k3d_pts, self.k3d_sc, self.topology)
            _check_finite("joint_3d", v3, gp3, pos, np.where(self.k3d_sc[..., None] > 0, self.k3d_pts, 0.0))
            v2, gp2 = (0.0, None)
            if self.views:
                v2, gp2 = joint2d_term(pos, self.views, self.topology)
                if not np.isfinite(v2):
                    return float("inf"), None, {}
                observed = (np.where(sc[..., None] > 0, pts, 0.0) for _, pts, sc in self.views)
                _check_finite("joint_2d", v2, gp2, *observed)
            vp, gth = prior_term(theta, self.theta_init)
            value = v3 + v2 + vp
            total += w.lambda_joint * value
            g_pos += w.lambda_joint * gp3
            if gp2 is not None:
                g_pos += w.lambda_joint * gp2
            g_theta += w.lambda_joint * gth
            info.update(joint=value, joint_3d=v3, joint_2d=v2, joint_prior=vp)
        if "smooth" in self.terms:
            v, _, _, gth, gr, gp = smooth_terms(theta, r, pos)
            _check_finite("smooth", v, gth, gr, gp)
            total += w.lambda_smooth * v
            g_theta += w.lambda_smooth * gth
            g_r += w.lambda_smooth * gr
            g_pos += w.lambda_smooth * gp
            info["smooth"] = v
        if "pen" in self.terms:
            v, gp = pen_term(pos, self.proxy, self.topology)
            _check_finite("pen", v, gp)
            total += w.lambda_pen * v
            g_pos += w.lambda_pen * gp
            info["pen"] = v
        if "phy" in self.terms:
            v, _, _, gp = phy_terms(pos, self.fps, self.ground, self.foot_idx)
            _check_finite("phy", v, gp)
            total += w.lambda_phy * v
            g_pos += w.lambda_phy * gp
            info["phy"] = v
        gt, gr = fk_backward(self.topology, theta, pos, G, g_pos)
        g_theta += gt
        g_r += gr
        return total, self.pack(g_theta, g_r), info


def fit_local(targets: FitTargets, weights: LossWeights | None = None, topology: SkeletonTopology | None = None,
              shape: SkeletonShape | None = None, opts: FitOptions | None = None,
              proxy: CollisionProxy | None = None) -> tuple[MotionSequence, FitReport]:
    """Fit joint rotations and root translations starting from ``targets.theta_init``.

    Expression coefficients are carried through from the initial estimate.
    """
    from .skeleton import default_topology

    weights = weights or LossWeights()
    topology = topology or default_topology()
    init = targets.theta_init
    shape = shape or init.shape
    opts = opts or FitOptions()
    if proxy is None:
        proxy = CollisionProxy.from_topology(topology, opts.exclusion_hops)
    obj = LocalObjective(targets, weights, topology, shape, opts.ground_height, proxy, opts.terms)
    x0 = obj.pack(init.rotations(), init.translations())
    res = minimize(obj, x0, max_iter=opts.max_iter, rel_tol=opts.rel_tol)
    theta, r = obj.unpack(res.x)
    motion = MotionSequence.from_arrays(init.fps, shape, theta, r, init.expressions())
    report = FitReport(res.iterations, res.converged, res.reason, res.history[0]["loss"], res.loss, res.history)
    log.info("fit_local: %d iterations, loss %.6g -> %.6g (%s)", res.iterations,
             report.initial_loss, report.final_loss, res.reason)
    return motion, report
