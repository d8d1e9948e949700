"""SO(3) helpers on axis-angle vectors, vectorized over leading axes."""

from __future__ import annotations

import numpy as np

_SMALL = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices, shape (..., 3, 3)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _coeffs(t: np.ndarray):
    # sin(t)/t, (1-cos t)/t^2, (t - sin t)/t^3 with series near zero
    small = t < _SMALL
    ts = np.where(small, 1.0, t)
    t2 = t * t
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(ts) / ts)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(ts)) / (ts * ts))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (ts - np.sin(ts)) / (ts * ts * ts))
    return a, b, c


def exp_so3(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula. ``w`` is (..., 3); returns (..., 3, 3)."""
    w = np.asarray(w, dtype=np.float64)
    t = np.linalg.norm(w, axis=-1)
    a, b, _ = _coeffs(t)
    K = skew(w)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def right_jacobian(w: np.ndarray) -> np.ndarray:
    """Jr(w) with exp(w + d) ~= exp(w) exp(Jr(w) d)."""
    w = np.asarray(w, dtype=np.float64)
    t = np.linalg.norm(w, axis=-1)
    _, b, c = _coeffs(t)
    K = skew(w)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - b[..., None, None] * K + c[..., None, None] * (K @ K)


def left_jacobian(w: np.ndarray) -> np.ndarray:
    """Jl(w) with exp(w + d) ~= exp(Jl(w) d) exp(w)."""
    return right_jacobian(-np.asarray(w, dtype=np.float64))


def log_so3(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`exp_so3`, returning vectors with norm in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    batch = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    out = np.zeros((R.shape[0], 3))
    vee = np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=-1)
    # atan2 keeps full precision near 0 and pi, where arccos of the trace does not
    theta = np.arctan2(0.5 * np.linalg.norm(vee, axis=-1), 0.5 * (np.trace(R, axis1=1, axis2=2) - 1.0))
    for i in range(R.shape[0]):
        t = theta[i]
        if t < 1e-6:
            out[i] = 0.5 * vee[i]
        elif np.pi - t > 1e-4:
            out[i] = vee[i] * (t / (2.0 * np.sin(t)))
        else:
            # near pi: axis from the symmetric part
            S = (R[i] + R[i].T) / 2.0 - np.cos(t) * np.eye(3)
            k = int(np.argmax(np.diag(S)))
            axis = S[:, k] / np.sqrt(max(S[k, k], 1e-300))
            axis /= np.linalg.norm(axis)
            if np.dot(axis, vee[i]) < 0:
                axis = -axis
            out[i] = axis * t
    return out.reshape(batch + (3,))


def wrap_axis_angle(w: np.ndarray) -> np.ndarray:
    """Map axis-angle vectors to the equivalent vector with norm in [0, pi]."""
    w = np.asarray(w, dtype=np.float64)
    t = np.linalg.norm(w, axis=-1, keepdims=True)
    safe = np.where(t > 0, t, 1.0)
    axis = w / safe
    tw = np.mod(t, 2.0 * np.pi)
    tw = np.where(tw > np.pi, tw - 2.0 * np.pi, tw)
    out = np.where(t > np.pi, axis * tw, w)
    return out


def rotation_angle(R: np.ndarray) -> np.ndarray:
    """Rotation angle in radians of (..., 3, 3) matrices."""
    tr = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    return np.arccos(tr)
