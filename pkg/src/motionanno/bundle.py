"""Bundle adjustment over camera extrinsics (optionally focal) and track points.

Levenberg-Marquardt with the point blocks eliminated through the Schur
complement. Gauge: camera 0 is held fixed, and after every step the
reconstruction is rescaled about camera 0's centre so the camera 0 - camera 1
baseline keeps its initial length (reprojection error is invariant to that
similarity, so the scale gauge does not affect the objective).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import UnderdeterminedError, ValidationError
from .geometry import MIN_DEPTH, CameraModel, triangulate_point
from .rotations import exp_so3, skew

log = logging.getLogger(__name__)


@dataclass
class BundleResult:
    cameras: list[CameraModel]
    points: np.ndarray  # (N, 3)
    initial_error: float  # sum of squared weighted residuals
    final_error: float
    history: list[float] = field(default_factory=list)  # error after each accepted step
    iterations: int = 0
    converged: bool = True


def _residuals(Rs, ts, fs, cams0, X, cam_idx, pt_idx, obs, w):
    R = Rs[cam_idx]
    Xc = np.einsum("nij,nj->ni", R, X[pt_idx]) + ts[cam_idx]
    z = Xc[:, 2]
    if np.any(z <= MIN_DEPTH):
        return None, Xc
    fx = np.array([c.fx for c in cams0])[cam_idx] * fs[cam_idx]
    fy = np.array([c.fy for c in cams0])[cam_idx] * fs[cam_idx]
    cx = np.array([c.cx for c in cams0])[cam_idx]
    cy = np.array([c.cy for c in cams0])[cam_idx]
    u = fx * Xc[:, 0] / z + cx
    v = fy * Xc[:, 1] / z + cy
    r = (np.stack([u, v], axis=1) - obs) * w[:, None]
    return r, Xc


def _error(r) -> float:
    return float(np.inf) if r is None else float(np.sum(r * r))


def _initial_points(cameras, observations, scores):
    C, N = scores.shape
    X = np.zeros((N, 3))
    for n in range(N):
        obs = [(cameras[c], observations[c, n], scores[c, n]) for c in range(C) if scores[c, n] > 0]
        X[n] = triangulate_point(obs, score_floor=0.0).point
    return X


def refine_cameras(initial: list[CameraModel], observations: np.ndarray, scores: np.ndarray,
                   points: np.ndarray | None = None, refine_focal: bool = False,
                   max_iter: int = 100, tol: float = 1e-12) -> BundleResult:
    """Jointly refine camera extrinsics and track points.

    Args:
        initial: starting cameras; the first one is the gauge and never moves.
        observations: (C, N, 2) pixel tracks.
        scores: (C, N) confidences; 0 marks a missing observation.
        points: optional (N, 3) initial track points (triangulated otherwise).
        refine_focal: also estimate one focal scale factor per camera.

    Returns:
        BundleResult; ``converged`` is False when ``max_iter`` was reached.
    """
    observations = np.asarray(observations, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    C = len(initial)
    if C < 2:
        raise UnderdeterminedError("bundle adjustment needs at least 2 cameras")
    if observations.shape[:2] != scores.shape or observations.shape[0] != C:
        raise ValidationError("observations/scores do not match the camera count")
    N = scores.shape[1]
    if N < 20:
        raise UnderdeterminedError(f"bundle adjustment needs at least 20 tracks, got {N}")
    seen = (scores > 0).sum(axis=0)
    if np.any(seen < 2):
        raise UnderdeterminedError("every track must be observed by at least 2 cameras")

    X = _initial_points(initial, observations, scores) if points is None else np.array(points, dtype=np.float64)
    Rs = np.stack([c.rotation for c in initial])
    ts = np.stack([c.translation for c in initial])
    fs = np.ones(C)
    c0 = initial[0].center
    baseline = float(np.linalg.norm(initial[1].center - c0))

    cam_idx, pt_idx = np.nonzero(scores > 0)
    obs = observations[cam_idx, pt_idx]
    w = scores[cam_idx, pt_idx]
    n_obs = cam_idx.size

    # free camera parameters: cameras 1..C-1 get 6 (rot, trans); +1 focal each if requested
    ncp = 6 + (1 if refine_focal else 0)
    cam_free = np.arange(C) > 0

    def cam_block(c):
        return (c - 1) * ncp if c > 0 else None

    n_cam_params = (C - 1) * ncp + (1 if refine_focal else 0)  # camera 0 may still refine focal
    f0_index = (C - 1) * ncp if refine_focal else None

    r, _ = _residuals(Rs, ts, fs, initial, X, cam_idx, pt_idx, obs, w)
    err = _error(r)
    initial_err = err
    history = []
    lam = 1e-3
    converged = False
    it = 0
    fx_all = np.array([c.fx for c in initial])
    fy_all = np.array([c.fy for c in initial])
    for it in range(1, max_iter + 1):
        if err <= 0.0:
            converged = True
            it -= 1
            break
        # Jacobians per observation
        R = Rs[cam_idx]
        RX = np.einsum("nij,nj->ni", R, X[pt_idx])
        Xc = RX + ts[cam_idx]
        x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
        fx = fx_all[cam_idx] * fs[cam_idx]
        fy = fy_all[cam_idx] * fs[cam_idx]
        dproj = np.zeros((n_obs, 2, 3))
        dproj[:, 0, 0] = fx / z
        dproj[:, 0, 2] = -fx * x / z**2
        dproj[:, 1, 1] = fy / z
        dproj[:, 1, 2] = -fy * y / z**2
        dproj *= w[:, None, None]
        J_pt = dproj @ R  # (n, 2, 3)
        J_rot = -dproj @ skew(RX)  # left perturbation R <- exp(d) R
        J_tr = dproj
        J_cam = np.concatenate([J_rot, J_tr], axis=2)
        if refine_focal:
            J_f = (np.stack([fx * x / z, fy * y / z], axis=1) * w[:, None] / fs[cam_idx][:, None])[:, :, None]
        # assemble normal equations: cameras dense, points block diagonal
        Hpp = np.zeros((N, 3, 3))
        gp = np.zeros((N, 3))
        np.add.at(Hpp, pt_idx, np.einsum("nki,nkj->nij", J_pt, J_pt))
        np.add.at(gp, pt_idx, np.einsum("nki,nk->ni", J_pt, r))
        # full camera Jacobian rows in the packed parameter layout
        Jc_full = np.zeros((n_obs, 2, n_cam_params))
        for c in range(C):
            sel = cam_idx == c
            if not np.any(sel):
                continue
            if cam_free[c]:
                b = cam_block(c)
                Jc_full[sel, :, b:b + 6] = J_cam[sel]
                if refine_focal:
                    Jc_full[sel, :, b + 6:b + 7] = J_f[sel]
            elif refine_focal:
                Jc_full[sel, :, f0_index:f0_index + 1] = J_f[sel]
        Hcc = np.einsum("nki,nkj->ij", Jc_full, Jc_full)
        gc = np.einsum("nki,nk->i", Jc_full, r)
        contrib = np.einsum("nki,nkj->nij", Jc_full, J_pt)  # (n, P, 3)
        Hcp_t = np.zeros((N, n_cam_params, 3))
        np.add.at(Hcp_t, pt_idx, contrib)
        Hcp = Hcp_t.transpose(1, 0, 2)

        accepted = False
        for _ in range(30):
            Hpp_d = Hpp + lam * np.einsum("nii->ni", Hpp)[:, :, None] * np.eye(3) + 1e-12 * np.eye(3)
            Hcc_d = Hcc + lam * np.diag(np.diag(Hcc)) + 1e-12 * np.eye(n_cam_params)
            Hpp_inv = np.linalg.inv(Hpp_d)
            # Schur complement on cameras
            HcpHinv = np.einsum("pni,nij->pnj", Hcp, Hpp_inv)
            S = Hcc_d - np.einsum("pni,qni->pq", HcpHinv, Hcp)
            rhs = -gc + np.einsum("pni,ni->p", HcpHinv, gp)
            try:
                dc = np.linalg.solve(S, rhs)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            dp = -np.einsum("nij,nj->ni", Hpp_inv, gp + np.einsum("pni,p->ni", Hcp, dc))

            Rs_n, ts_n, fs_n = Rs.copy(), ts.copy(), fs.copy()
            for c in range(1, C):
                b = cam_block(c)
                Rs_n[c] = exp_so3(dc[b:b + 3]) @ Rs[c]
                ts_n[c] = ts[c] + dc[b + 3:b + 6]
                if refine_focal:
                    fs_n[c] = fs[c] + dc[b + 6]
            if refine_focal:
                fs_n[0] = fs[0] + dc[f0_index]
            X_n = X + dp
            # restore the baseline scale about camera 0's centre
            c1 = -Rs_n[1].T @ ts_n[1]
            b_now = np.linalg.norm(c1 - c0)
            if b_now > 1e-12 and baseline > 0:
                k = baseline / b_now
                for c in range(1, C):
                    cen = -Rs_n[c].T @ ts_n[c]
                    ts_n[c] = -Rs_n[c] @ (c0 + k * (cen - c0))
                X_n = c0 + k * (X_n - c0)
            r_n, _ = _residuals(Rs_n, ts_n, fs_n, initial, X_n, cam_idx, pt_idx, obs, w)
            err_n = _error(r_n)
            if err_n < err:
                rel = (err - err_n) / max(err, 1e-300)
                Rs, ts, fs, X, r, err = Rs_n, ts_n, fs_n, X_n, r_n, err_n
                history.append(err)
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            converged = True  # no descent direction left: stationary up to damping
            break
        if rel < tol or err < 1e-24:
            converged = True
            break
    else:
        log.warning("bundle adjustment stopped at max_iter=%d without converging", max_iter)

    cams = [initial[0].with_extrinsics(Rs[0], ts[0])]
    for c in range(1, C):
        # re-orthonormalize to stay within the CameraModel tolerance
        U, _, Vt = np.linalg.svd(Rs[c])
        cams.append(initial[c].with_extrinsics(U @ Vt, ts[c]))
    if refine_focal:
        cams = [CameraModel(c.fx * f, c.fy * f, c.cx, c.cy, c.rotation, c.translation, c.name)
                for c, f in zip(cams, fs)]
    return BundleResult(cams, X, initial_err, err, history, it, converged)


def reprojection_error(cameras: list[CameraModel], points: np.ndarray, observations: np.ndarray,
                       scores: np.ndarray) -> float:
    """Total weighted squared reprojection error (the refined objective)."""
    cam_idx, pt_idx = np.nonzero(np.asarray(scores) > 0)
    Rs = np.stack([c.rotation for c in cameras])
    ts = np.stack([c.translation for c in cameras])
    r, _ = _residuals(Rs, ts, np.ones(len(cameras)), cameras, np.asarray(points), cam_idx, pt_idx,
                      np.asarray(observations)[cam_idx, pt_idx], np.asarray(scores)[cam_idx, pt_idx])
    return _error(r)
