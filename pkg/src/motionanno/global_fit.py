"""Joint refinement of the root trajectory and camera extrinsics for monocular video.

Body articulation stays fixed; the free variables are per-frame root
translation and root rotation plus camera extrinsics (per frame, one shared
static camera, or frozen)::

    L_g = l_2d * L_2d + l_traj * L_traj + l_cam * L_cam + l_reg * L_reg
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import FitDivergenceError, StructuralError, ValidationError
from .geometry import MIN_DEPTH, CameraModel
from .keypoints import stack_frames
from .local_fit import FitReport
from .optim import minimize_l1
from .rotations import exp_so3, left_jacobian, log_so3, skew
from .skeleton import MotionSequence, SkeletonTopology, default_topology, fk_batch

log = logging.getLogger(__name__)

GLOBAL_TERMS = ("2d", "traj", "cam", "reg")


@dataclass(frozen=True)
class GlobalLossWeights:
    lambda_2d: float = 1.0
    lambda_traj: float = 0.1
    lambda_cam: float = 10.0
    lambda_reg: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (np.isfinite(v) and v >= 0):
                raise ValidationError(f"{k} must be finite and non-negative, got {v}")

    def weight(self, term: str) -> float:
        return getattr(self, f"lambda_{term}")

    @classmethod
    def from_dict(cls, d: dict) -> GlobalLossWeights:
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class TrajectoryPrior:
    """Per-frame root positions (m), yaw (rad) and confidence in [0, 1]."""

    positions: np.ndarray
    yaw: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        y = np.asarray(self.yaw, dtype=np.float64)
        c = np.asarray(self.confidence, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3 or y.shape != (p.shape[0],) or c.shape != (p.shape[0],):
            raise StructuralError("trajectory prior arrays must be (F, 3), (F,), (F,)")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(y)) and np.all(np.isfinite(c))):
            raise ValidationError("trajectory prior must be finite")
        if np.any((c < 0) | (c > 1)):
            raise ValidationError("trajectory confidence must lie in [0, 1]")
        for k, v in (("positions", p), ("yaw", y), ("confidence", c)):
            v.setflags(write=False)
            object.__setattr__(self, k, v)

    def __len__(self):
        return self.positions.shape[0]

    @classmethod
    def from_motion(cls, motion: MotionSequence, confidence: float = 1.0) -> TrajectoryPrior:
        R = exp_so3(motion.rotations()[:, 0])
        return cls(motion.translations(), root_yaw(R), np.full(len(motion), confidence))

    def to_jsonl(self) -> str:
        lines = []
        for i in range(len(self)):
            x, y, z = (float(v) for v in self.positions[i])
            lines.append(json.dumps({"frame": i, "x": x, "y": y, "z": z, "yaw": float(self.yaw[i]),
                                     "confidence": float(self.confidence[i])}))
        return "\n".join(lines) + "\n"

    @classmethod
    def read(cls, path) -> TrajectoryPrior:
        from .io import read_trajectory_prior

        return read_trajectory_prior(path)


def root_yaw(R: np.ndarray) -> np.ndarray:
    """Heading about +z of the root's forward (+y) axis; 0 when facing +y."""
    f = R[..., :, 1]
    return np.arctan2(-f[..., 0], f[..., 1])


def _wrap(a):
    return np.arctan2(np.sin(a), np.cos(a))


@dataclass
class GlobalOptions:
    max_iter: int = 500
    rel_tol: float = 1e-6
    camera_mode: str = "per_frame"  # per_frame | static | frozen

    def __post_init__(self):
        if self.camera_mode not in ("per_frame", "static", "frozen"):
            raise ValidationError(f"unknown camera_mode {self.camera_mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> GlobalOptions:
        return cls(**d)


@dataclass
class GlobalFitReport(FitReport):
    warnings: list = field(default_factory=list)


class GlobalObjective:
    """L_g over x = [r (F*3), root omega (F*3), camera params].

    Every term is a weighted sum of absolute residuals, so the objective is
    assembled as ``sum(c * |e|)`` with a sparse residual Jacobian. Camera
    parameters are (axis-angle, translation) per frame, one shared block in
    static mode, or absent when frozen.
    """

    def __init__(self, motion: MotionSequence, k2d, cameras, prior: TrajectoryPrior,
                 weights: GlobalLossWeights, topology: SkeletonTopology, camera_mode: str = "per_frame",
                 pin_first: bool = False):
        self.topology = topology
        F = len(motion)
        self.F = F
        theta = motion.rotations().copy()
        theta[:, 0] = 0.0
        q, _ = fk_batch(topology, motion.shape, theta, np.zeros((F, 3)))
        m = topology.mapped_joints
        self.q = q[:, m]  # root-frame offsets of mapped joints
        pts, sc = stack_frames(k2d)
        k = topology.keypoint_map[m]
        self.uv = pts[:, k]
        self.w = sc[:, k]
        self.count = max(int((self.w > 0).sum()), 1)
        self.prior = prior
        self.weights = weights
        self.mode = camera_mode
        self.terms = tuple(t for t in GLOBAL_TERMS if weights.weight(t) != 0.0)
        if camera_mode != "per_frame":
            self.terms = tuple(t for t in self.terms if t != "cam")
        self.frozen_cams = np.stack([np.concatenate([log_so3(c.rotation), c.translation]) for c in cameras])
        self.fx = np.array([c.fx for c in cameras])[:, None]
        self.fy = np.array([c.fy for c in cameras])[:, None]
        self.cx = np.array([c.cx for c in cameras])[:, None]
        self.cy = np.array([c.cy for c in cameras])[:, None]
        self.n_cam = {"per_frame": 6 * F, "static": 6, "frozen": 0}[camera_mode]
        self.size = 6 * F + self.n_cam
        self.free = np.ones(self.size, dtype=bool)
        if pin_first:
            self.free[0:3] = False
            self.free[3 * F:3 * F + 3] = False

    # -- packing
    def pack(self, r, omega, cams) -> np.ndarray:
        parts = [np.ravel(r), np.ravel(omega)]
        if self.mode == "per_frame":
            parts.append(np.ravel(cams))
        elif self.mode == "static":
            parts.append(np.ravel(cams[0]))
        return np.concatenate(parts)

    def unpack(self, x):
        F = self.F
        r = x[:3 * F].reshape(F, 3)
        omega = x[3 * F:6 * F].reshape(F, 3)
        if self.mode == "per_frame":
            cams = x[6 * F:12 * F].reshape(F, 6)
        elif self.mode == "static":
            cams = np.broadcast_to(x[6 * F:6 * F + 6], (F, 6))
        else:
            cams = self.frozen_cams
        return r, omega, cams

    def cameras(self, x, template) -> list[CameraModel]:
        _, _, cams = self.unpack(x)
        out = []
        for c, p in zip(template, cams):
            U, _, Vt = np.linalg.svd(exp_so3(p[:3]))
            out.append(c.with_extrinsics(U @ Vt, p[3:]))
        return out

    def _cols_r(self, j):
        return 3 * np.arange(self.F)[:, None] + np.arange(j)[None]

    def _cols_cam(self):
        F = self.F
        if self.mode == "per_frame":
            return 6 * F + 6 * np.arange(F)[:, None] + np.arange(6)[None]
        return np.broadcast_to(6 * F + np.arange(6)[None], (F, 6))

    # -- terms: each returns (e, c, rows, cols, vals) with c excluding lambda
    def reprojection(self, r, omega, cams):
        F, K = self.w.shape
        R = exp_so3(omega)
        Rq = np.einsum("fij,fkj->fki", R, self.q)
        p = r[:, None] + Rq
        Rc = exp_so3(cams[:, :3])
        Rcp = np.einsum("fij,fkj->fki", Rc, p)
        Xc = Rcp + cams[:, None, 3:]
        x, y, z = Xc[..., 0], Xc[..., 1], Xc[..., 2]
        if np.any((z <= MIN_DEPTH) & (self.w > 0)):
            return None
        z = np.where(z > MIN_DEPTH, z, 1.0)
        u = self.fx * x / z + self.cx
        v = self.fy * y / z + self.cy
        e = np.stack([u - self.uv[..., 0], v - self.uv[..., 1]], axis=-1)  # (F, K, 2)
        c = np.repeat((self.w / self.count)[..., None], 2, axis=-1)
        D = np.zeros((F, K, 2, 3))
        D[..., 0, 0] = self.fx / z
        D[..., 0, 2] = -self.fx * x / z**2
        D[..., 1, 1] = self.fy / z
        D[..., 1, 2] = -self.fy * y / z**2
        rows = np.arange(F * K * 2).reshape(F, K, 2)
        cr = self._cols_r(3)[:, None]
        blocks = [(D @ Rc[:, None], cr)]
        blocks.append((D @ Rc[:, None] @ (-skew(Rq)) @ left_jacobian(omega)[:, None], 3 * F + cr))
        if self.mode != "frozen":
            cc = self._cols_cam()[:, None]
            blocks.append((D @ (-skew(Rcp)) @ left_jacobian(cams[:, :3])[:, None], cc[..., :3]))
            blocks.append((D, cc[..., 3:]))
        return e.ravel(), c.ravel(), _coo(rows, blocks)

    def trajectory(self, r, omega):
        F = self.F
        pr = self.prior
        R = exp_so3(omega)
        f = R[:, :, 1]
        yaw = np.arctan2(-f[:, 0], f[:, 1])
        e = np.concatenate([(r - pr.positions).ravel(), _wrap(yaw - pr.yaw)])
        c = np.concatenate([np.repeat(pr.confidence, 3), pr.confidence]) / F
        rho = f[:, 0] ** 2 + f[:, 1] ** 2
        dyaw_df = np.stack([-f[:, 1], f[:, 0], np.zeros(F)], axis=1) / np.where(rho > 1e-12, rho, 1.0)[:, None]
        dyaw = np.einsum("fi,fij->fj", dyaw_df, -skew(f) @ left_jacobian(omega))
        cr = self._cols_r(3)
        Jr = _coo(np.arange(3 * F).reshape(F, 3), [(np.broadcast_to(np.eye(3), (F, 3, 3)), cr)])
        Jy = _coo(3 * F + np.arange(F).reshape(F, 1), [(dyaw[:, None, :], 3 * F + cr)])
        return e, c, _join_coo(Jr, Jy)

    def camera_smoothness(self, cams):
        F = self.F
        if F < 2:
            return np.zeros(0), np.zeros(0), ([], [], [])
        e = np.diff(cams, axis=0).ravel()
        n = (F - 1) * 6
        cc = self._cols_cam()
        return e, np.full(e.size, 1.0 / n), _diff_coo(cc, [1.0, -1.0])

    def regularization(self, r):
        F = self.F
        es, cs, js = [], [], []
        cr = self._cols_r(3)
        if F >= 2:
            e1 = np.diff(r, axis=0).ravel()
            es.append(e1)
            cs.append(np.full(e1.size, 1.0 / e1.size))
            js.append(_diff_coo(cr, [1.0, -1.0]))
        if F >= 3:
            e2 = (r[2:] - 2 * r[1:-1] + r[:-2]).ravel()
            es.append(e2)
            cs.append(np.full(e2.size, 1.0 / e2.size))
            js.append(_diff_coo(cr, [1.0, -2.0, 1.0]))
        if not es:
            return np.zeros(0), np.zeros(0), ([], [], [])
        return np.concatenate(es), np.concatenate(cs), _stack_coo(*js)

    def residuals(self, x):
        """(e, c, J, info) over all active terms; e is None if infeasible."""
        from scipy import sparse

        r, omega, cams = self.unpack(x)
        cams = np.asarray(cams)
        es, cs, rows, cols, vals = [], [], [], [], []
        info = {}
        offset = 0
        for term in self.terms:
            lam = self.weights.weight(term)
            if term == "2d":
                out = self.reprojection(r, omega, cams)
                if out is None:
                    return None, None, None, {}
            elif term == "traj":
                out = self.trajectory(r, omega)
            elif term == "cam":
                out = self.camera_smoothness(cams)
            else:
                out = self.regularization(r)
            e, c, (ri, ci, vi) = out
            bad = ~np.isfinite(e)
            if np.any(bad) or not np.all(np.isfinite(vi)):
                raise FitDivergenceError(term, self._frame_of(term, e, ri, ci, vi))
            info[term] = float(np.sum(c * np.abs(e)))
            es.append(e)
            cs.append(lam * c)
            rows.append(np.asarray(ri) + offset)
            cols.append(np.asarray(ci))
            vals.append(np.asarray(vi))
            offset += e.size
        if not es:
            return np.zeros(0), np.zeros(0), sparse.csr_matrix((0, self.size)), info
        keep = self.free[np.concatenate(cols)] if cols else None
        J = sparse.coo_matrix(
            (np.concatenate(vals)[keep], (np.concatenate(rows)[keep], np.concatenate(cols)[keep])),
            shape=(offset, self.size),
        ).tocsr()
        return np.concatenate(es), np.concatenate(cs), J, info

    def _frame_of(self, term, e, ri, ci, vi):
        ci = np.asarray(ci)
        bad_rows = set(np.flatnonzero(~np.isfinite(e)).tolist())
        bad_rows |= set(np.asarray(ri)[~np.isfinite(np.asarray(vi))].tolist())
        if not bad_rows:
            return None
        row = min(bad_rows)
        col = ci[np.asarray(ri) == row]
        col = int(col.min()) if col.size else 0
        F = self.F
        if col < 6 * F:
            return (col % (3 * F)) // 3
        return (col - 6 * F) // 6 if self.mode == "per_frame" else 0

    def __call__(self, x):
        """(loss, gradient, per-term info); loss is inf when a point is behind a camera."""
        e, c, J, info = self.residuals(x)
        if e is None:
            return float("inf"), None, {}
        return float(np.sum(c * np.abs(e))), J.T @ (c * np.sign(e)), info


def _coo(rows, blocks):
    """Flatten dense Jacobian blocks into COO triplets.

    ``rows`` has shape (..., R) and each block is (values (..., R, C), cols (..., C)).
    """
    ri, ci, vi = [], [], []
    for vals, cols in blocks:
        vals = np.asarray(vals)
        R = np.broadcast_to(rows[..., None], vals.shape)
        C = np.broadcast_to(np.asarray(cols)[..., None, :], vals.shape)
        ri.append(R.ravel())
        ci.append(C.ravel())
        vi.append(vals.ravel())
    return np.concatenate(ri), np.concatenate(ci), np.concatenate(vi)


def _join_coo(*parts):
    """Concatenate COO triplets that already use disjoint row ranges."""
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))


def _stack_coo(*parts):
    """Stack COO triplets vertically, shifting each part below the previous one."""
    ri, ci, vi = [], [], []
    offset = 0
    for r, c, v in parts:
        ri.append(np.asarray(r) + offset)
        ci.append(c)
        vi.append(v)
        offset += int(np.max(r)) + 1
    return np.concatenate(ri), np.concatenate(ci), np.concatenate(vi)


def _diff_coo(cols, stencil):
    """Jacobian of the finite-difference residual of order len(stencil)-1 along frames.

    ``stencil`` lists the coefficients for frames f+n .. f (so [1, -1] is x[f+1] - x[f]).
    """
    cols = np.asarray(cols)
    n = len(stencil) - 1
    F, D = cols.shape
    m = F - n
    rows = np.arange(m * D).reshape(m, D)
    ri, ci, vi = [], [], []
    for i, s in enumerate(stencil):
        ri.append(rows.ravel())
        ci.append(cols[n - i:n - i + m].ravel())
        vi.append(np.full(rows.size, float(s)))
    return np.concatenate(ri), np.concatenate(ci), np.concatenate(vi)


def fit_global(pose_seq: MotionSequence, k2d, camera_init, prior: TrajectoryPrior,
               weights: GlobalLossWeights | None = None, topology: SkeletonTopology | None = None,
               opts: GlobalOptions | None = None):
    """Refine root trajectory and cameras against 2D keypoints.

    Returns (motion, per-frame cameras, report). ``camera_init`` is either one
    camera (used for every frame) or a per-frame list.
    """
    weights = weights or GlobalLossWeights()
    topology = topology or default_topology()
    opts = opts or GlobalOptions()
    F = len(pose_seq)
    if isinstance(camera_init, CameraModel):
        camera_init = [camera_init] * F
    if len(k2d) != F or len(camera_init) != F or len(prior) != F:
        raise StructuralError(
            f"length mismatch: motion {F}, 2D {len(k2d)}, cameras {len(camera_init)}, prior {len(prior)}"
        )
    warn = []
    pin = False
    if weights.lambda_traj == 0 and weights.lambda_reg == 0 and opts.camera_mode == "static":
        warn.append("gauge ambiguity: no trajectory prior or regularization with a static camera; "
                    "first-frame root pinned")
        log.warning(warn[-1])
        pin = True

    theta = pose_seq.rotations()
    r = pose_seq.translations().copy()
    omega = theta[:, 0].copy()
    # re-seed frames whose root starts behind the camera
    for f, cam in enumerate(camera_init):
        if cam.to_camera(r[f])[2] <= MIN_DEPTH:
            log.info("frame %d: root behind camera at init, re-seeding from prior", f)
            r[f] = prior.positions[f]
            warn.append(f"frame {f}: root re-seeded from trajectory prior")
    obj = GlobalObjective(pose_seq, k2d, camera_init, prior, weights, topology, opts.camera_mode, pin)
    x0 = obj.pack(r, omega, obj.frozen_cams)
    res = minimize_l1(obj.residuals, x0, max_iter=opts.max_iter, rel_tol=opts.rel_tol)
    r_n, w_n, _ = obj.unpack(res.x)
    theta_n = theta.copy()
    theta_n[:, 0] = w_n
    motion = MotionSequence.from_arrays(pose_seq.fps, pose_seq.shape, theta_n, r_n, pose_seq.expressions())
    cams = obj.cameras(res.x, camera_init)
    report = GlobalFitReport(res.iterations, res.converged, res.reason, res.history[0]["loss"], res.loss,
                             res.history, warn)
    return motion, cams, report
