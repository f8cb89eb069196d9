"""Bounded Levenberg-Marquardt least squares with a Nelder-Mead fallback."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize as _sp_optimize


class ConvergenceError(RuntimeError):
    """The optimizer hit its iteration cap; ``best`` holds the best point seen."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass
class OptimizeResult:
    x: np.ndarray
    cost: float
    residuals: np.ndarray
    jacobian: np.ndarray | None
    iterations: int
    method: str = "levenberg-marquardt"
    message: str = ""
    active_bounds: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    @property
    def any_active_bound(self) -> bool:
        return bool(np.any(self.active_bounds))


def _as_bounds(bounds, n):
    if bounds is None:
        return np.full(n, -np.inf), np.full(n, np.inf)
    lo, hi = bounds
    lo = np.broadcast_to(np.asarray(lo, float), (n,)).copy()
    hi = np.broadcast_to(np.asarray(hi, float), (n,)).copy()
    if np.any(lo > hi):
        raise ValueError("lower bound exceeds upper bound")
    return lo, hi


def numerical_jacobian(fun, x, f0=None, lo=None, hi=None):
    """Central-difference Jacobian; falls back to one-sided steps at bounds."""
    x = np.asarray(x, float)
    if f0 is None:
        f0 = fun(x)
    jac = np.empty((f0.size, x.size))
    h0 = np.cbrt(np.finfo(float).eps)
    for k in range(x.size):
        h = h0 * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        if hi is not None and xp[k] > hi[k]:
            xp[k] = x[k]
        if lo is not None and xm[k] < lo[k]:
            xm[k] = x[k]
        jac[:, k] = (fun(xp) - fun(xm)) / (xp[k] - xm[k])
    return jac


def _active(x, g, lo, hi):
    scale = np.maximum(1.0, np.abs(x))
    at_lo = (x - lo <= 1e-14 * scale) & (g > 0)
    at_hi = (hi - x <= 1e-14 * scale) & (g < 0)
    return at_lo | at_hi


def minimize(residuals: Callable, x0, bounds=None, jac: Callable | None = None, *,
             max_iter: int = 200, gtol: float = 1e-12, xtol: float = 1e-14,
             ftol: float = 1e-15, fallback: bool = True) -> OptimizeResult:
    """Minimise ``0.5 * ||residuals(x)||^2`` inside box ``bounds``.

    Parameters
    ----------
    residuals : callable
        ``x -> r`` with ``r`` a 1-d array.
    x0 : array_like
        Start point; clipped into the box.
    bounds : (lower, upper), optional
        Scalars or arrays; use ``np.inf`` for open sides.
    jac : callable, optional
        ``x -> J`` with shape ``(len(r), len(x))``. Central differences
        otherwise.

    Returns
    -------
    OptimizeResult
        ``active_bounds`` marks parameters pinned at a bound with the
        gradient pointing outward.

    Raises
    ------
    ConvergenceError
        If neither Levenberg-Marquardt nor the Nelder-Mead fallback
        converges within the iteration cap.
    """
    x = np.array(x0, dtype=float)
    lo, hi = _as_bounds(bounds, x.size)
    x = np.clip(x, lo, hi)

    def fun(p):
        return np.atleast_1d(np.asarray(residuals(p), dtype=float))

    def jacobian(p, r):
        if jac is not None:
            return np.atleast_2d(np.asarray(jac(p), dtype=float))
        return numerical_jacobian(fun, p, r, lo, hi)

    r = fun(x)
    if not np.all(np.isfinite(r)):
        raise ValueError("objective is not finite at the initial point")
    cost = 0.5 * float(r @ r)
    lam = 1e-6
    best = OptimizeResult(x.copy(), cost, r, None, 0)

    for it in range(1, max_iter + 1):
        J = jacobian(x, r)
        g = J.T @ r
        active = _active(x, g, lo, hi)
        free = ~active
        pg = np.where(free, g, 0.0)
        best = OptimizeResult(x.copy(), cost, r, J, it - 1, active_bounds=active)
        if np.max(np.abs(pg), initial=0.0) <= gtol * max(1.0, cost):
            best.message = "projected gradient below tolerance"
            return best

        A = J[:, free].T @ J[:, free]
        diag = np.maximum(np.diag(A), 1e-300)
        improved = False
        while lam < 1e20:
            step = np.zeros_like(x)
            try:
                step[free] = np.linalg.solve(A + lam * np.diag(diag), -g[free])
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = np.clip(x + step, lo, hi)
            r_new = fun(x_new)
            cost_new = 0.5 * float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            if cost_new < cost:
                improved = True
                break
            lam *= 10.0
        if not improved:
            best.message = "no further decrease possible"
            best.iterations = it
            return best

        dx = np.linalg.norm(x_new - x)
        dcost = cost - cost_new
        x, r, cost = x_new, r_new, cost_new
        lam = max(lam / 10.0, 1e-15)
        if dx <= xtol * (xtol + np.linalg.norm(x)) or dcost <= ftol * cost:
            J = jacobian(x, r)
            g = J.T @ r
            return OptimizeResult(x.copy(), cost, r, J, it, message="step below tolerance",
                                  active_bounds=_active(x, g, lo, hi))

    best = OptimizeResult(x.copy(), cost, r, None, max_iter, message="iteration cap reached")
    if not fallback:
        raise ConvergenceError("Levenberg-Marquardt did not converge", best)
    return _nelder_mead(fun, best, lo, hi, jacobian, max_iter)


def _nelder_mead(fun, start, lo, hi, jacobian, max_iter):
    def scalar(p):
        r = fun(p)
        return 0.5 * float(r @ r) if np.all(np.isfinite(r)) else np.inf

    has_bounds = np.any(np.isfinite(lo)) or np.any(np.isfinite(hi))
    res = _sp_optimize.minimize(
        scalar, start.x, method="Nelder-Mead",
        bounds=list(zip(lo, hi)) if has_bounds else None,
        options={"maxiter": 200 * max_iter, "xatol": 1e-12, "fatol": 1e-15},
    )
    x = np.clip(res.x, lo, hi)
    r = fun(x)
    cost = 0.5 * float(r @ r)
    if cost > start.cost:
        x, r, cost = start.x, start.residuals, start.cost
    J = jacobian(x, r)
    out = OptimizeResult(x, cost, r, J, start.iterations + int(res.nit),
                         method="nelder-mead", message=str(res.message),
                         active_bounds=_active(x, J.T @ r, lo, hi))
    if not res.success:
        raise ConvergenceError("Nelder-Mead fallback did not converge", out)
    return out
