"""Monotone first-order minimizer used by the local and global fits.

Search directions come from limited-memory BFGS (steepest descent when the
memory is empty or the direction is not a descent direction). A step is only
accepted when it satisfies the Armijo condition, so the accepted loss
sequence never increases.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class OptimResult:
    x: np.ndarray
    loss: float
    history: list = field(default_factory=list)  # one entry per accepted iterate (incl. the start)
    iterations: int = 0
    converged: bool = False
    reason: str = ""


def _direction(g, mem):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(mem):
        a = rho * np.dot(s, q)
        alphas.append(a)
        q -= a * y
    if mem:
        s, y, _ = mem[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y, rho), a in zip(mem, reversed(alphas)):
        b = rho * np.dot(y, q)
        q += s * (a - b)
    return -q


def minimize(fun: Callable, x0: np.ndarray, max_iter: int = 500, rel_tol: float = 1e-6,
             memory: int = 10, initial_step: float = 1e-2, c1: float = 1e-4,
             max_backtracks: int = 50) -> OptimResult:
    """Minimize ``fun(x) -> (loss, grad, info)``.

    ``info`` is recorded in the history alongside each accepted loss. A
    non-finite loss at a trial point rejects that trial step.
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    f, g, info = fun(x)
    history = [{"iteration": 0, "loss": f, **info}]
    mem: deque = deque(maxlen=memory)
    if f == 0.0 or not np.any(g):
        return OptimResult(x, f, history, 0, True, "stationary at start")
    it = 0
    reason = "max_iter"
    converged = False
    while it < max_iter:
        d = _direction(g, mem)
        gd = float(np.dot(g, d))
        if not mem or gd >= 0:
            # steepest descent, first trial moves the parameters by initial_step
            mem.clear()
            d = -g
            gd = -float(np.dot(g, g))
            step = initial_step / max(np.sqrt(-gd), 1e-300)
        else:
            step = 1.0
        accepted = False
        for attempt in range(2):
            t = step
            for _ in range(max_backtracks):
                xn = x + t * d
                fn, gn, info_n = fun(xn)
                if np.isfinite(fn) and fn <= f + c1 * t * gd:
                    accepted = True
                    break
                t *= 0.5
            if accepted or attempt == 1:
                break
            # retry along steepest descent after dropping curvature memory
            mem.clear()
            d = -g
            gd = -float(np.dot(g, g))
            step = initial_step / max(np.sqrt(-gd), 1e-300)
        if not accepted:
            reason = "line search failed"
            converged = True
            break
        it += 1
        s_vec = xn - x
        y_vec = gn - g
        sy = float(np.dot(s_vec, y_vec))
        if sy > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            mem.append((s_vec, y_vec, 1.0 / sy))
        rel = (f - fn) / max(abs(f), 1e-300)
        x, f, g = xn, fn, gn
        history.append({"iteration": it, "loss": f, **info_n})
        if f == 0.0 or rel < rel_tol:
            converged = True
            reason = "relative loss change below tolerance"
            break
    return OptimResult(x, f, history, it, converged, reason)


def minimize_l1(residuals: Callable, x0: np.ndarray, max_iter: int = 500, rel_tol: float = 1e-6,
                damping: float = 1e-3, max_rejects: int = 30) -> OptimResult:
    """Minimize ``sum(c * |e(x)|)`` by damped iteratively reweighted least squares.

    ``residuals(x) -> (e, c, J, info)`` with ``J`` a scipy sparse matrix (or
    None when the point is infeasible, signalled by ``e is None``). Each step
    solves the Levenberg-Marquardt system of the quadratic majorizer
    ``c e^2 / (2 max(|e_k|, eps))`` and is accepted only if the true loss
    decreases, so accepted losses are monotone.
    """
    from scipy import sparse
    from scipy.sparse.linalg import spsolve

    def loss(e, c):
        return float(np.sum(c * np.abs(e)))

    x = np.array(x0, dtype=np.float64, copy=True)
    e, c, J, info = residuals(x)
    f = loss(e, c)
    history = [{"iteration": 0, "loss": f, **info}]
    if f == 0.0:
        return OptimResult(x, f, history, 0, True, "stationary at start")
    mu = damping
    it = 0
    reason = "max_iter"
    converged = False
    while it < max_iter:
        ae = np.abs(e)
        eps = 1e-12 + 1e-6 * float(np.max(ae))
        a = c / np.maximum(ae, eps)
        JA = J.T.multiply(a).tocsr()
        H = (JA @ J).tocsc()
        g = JA @ e
        diag = H.diagonal()
        accepted = False
        for _ in range(max_rejects):
            Hd = H + sparse.diags(mu * diag + 1e-12 * max(float(diag.max()), 1.0), format="csc")
            dx = spsolve(Hd, -g)
            if not np.all(np.isfinite(dx)):
                mu *= 10.0
                continue
            xn = x + dx
            en, cn, Jn, info_n = residuals(xn)
            if en is not None:
                fn = loss(en, cn)
                if fn < f:
                    accepted = True
                    break
            mu *= 10.0
        if not accepted:
            reason = "no decreasing step"
            converged = True
            break
        it += 1
        mu = max(mu / 10.0, 1e-12)
        rel = (f - fn) / max(abs(f), 1e-300)
        x, f, e, c, J = xn, fn, en, cn, Jn
        history.append({"iteration": it, "loss": f, **info_n})
        if f == 0.0 or rel < rel_tol:
            converged = True
            reason = "relative loss change below tolerance"
            break
    return OptimResult(x, f, history, it, converged, reason)
