"""Box-constrained Levenberg-Marquardt solver.

The damped step is solved from the augmented system ``[J; sqrt(λ)·D] δ =
[-r; 0]`` by least squares, which avoids squaring the condition number the
way explicit normal equations do. Bounds are handled by projection with an
active set: a parameter sitting on a bound whose gradient points outward is
frozen for that iteration.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["LeastSquaresResult", "levenberg_marquardt", "forward_difference_jacobian"]


@dataclass
class LeastSquaresResult:
    x: np.ndarray
    residuals: np.ndarray
    jacobian: np.ndarray
    cost: float
    iterations: int
    nfev: int
    converged: bool
    message: str
    active: np.ndarray

    @property
    def projected_gradient(self) -> np.ndarray:
        g = self.jacobian.T @ self.residuals
        return np.where(self.active, 0.0, g)


def forward_difference_jacobian(fun: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                                r0: np.ndarray | None = None, rel_step: float = 1e-7) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    r0 = fun(x) if r0 is None else r0
    jac = np.empty((r0.size, x.size))
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        xp = x.copy()
        xp[i] += h
        jac[:, i] = (fun(xp) - r0) / h
    return jac


def _gradient_cosine(jac: np.ndarray, r: np.ndarray, free: np.ndarray) -> float:
    """MINPACK-style scale-free gradient measure over the free parameters."""
    rn = np.linalg.norm(r)
    if rn == 0.0 or not free.any():
        return 0.0
    cols = jac[:, free]
    cn = np.linalg.norm(cols, axis=0)
    g = np.abs(cols.T @ r)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(cn > 0, g / (cn * rn), 0.0)
    return float(np.max(cos))


def levenberg_marquardt(
    fun: Callable[[np.ndarray], np.ndarray],
    x0,
    jac: Callable[[np.ndarray], np.ndarray] | None = None,
    lower=None,
    upper=None,
    max_iterations: int = 200,
    xtol: float = 1e-10,
    gtol: float = 1e-10,
    ftol: float = 1e-14,
    damping: float = 1e-3,
) -> LeastSquaresResult:
    """Minimize ``0.5·|fun(x)|²`` subject to ``lower <= x <= upper``.

    Convergence is declared on any of: relative step below ``xtol``, scaled
    projected gradient below ``gtol``, or relative cost reduction below
    ``ftol``. Running out of iterations or damping returns the best point
    with ``converged=False`` rather than raising.
    """
    x = np.array(x0, dtype=float)
    n = x.size
    lo = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    hi = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    x = np.clip(x, lo, hi)

    def jacobian(x_, r_):
        return jac(x_) if jac is not None else forward_difference_jacobian(fun, x_, r_)

    r = np.asarray(fun(x), dtype=float)
    nfev = 1
    if not np.all(np.isfinite(r)):
        raise ValueError("residuals are not finite at the starting point")
    J = jacobian(x, r)
    cost = 0.5 * float(r @ r)
    lam = damping
    diag = np.zeros(n)
    converged = False
    message = "maximum iterations reached"
    it = 0
    active = np.zeros(n, dtype=bool)

    for it in range(1, max_iterations + 1):
        g = J.T @ r
        active = ((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0))
        free = ~active
        if _gradient_cosine(J, r, free) <= gtol:
            converged, message = True, "gradient tolerance reached"
            break
        Jf = J[:, free]
        diag[free] = np.maximum(diag[free], np.linalg.norm(Jf, axis=0))
        d = np.where(diag[free] > 0, diag[free], 1.0)

        accepted = False
        while lam < 1e16:
            aug = np.vstack([Jf, np.sqrt(lam) * np.diag(d)])
            rhs = np.concatenate([-r, np.zeros(Jf.shape[1])])
            step = np.linalg.lstsq(aug, rhs, rcond=None)[0]
            x_new = x.copy()
            x_new[free] += step
            x_new = np.clip(x_new, lo, hi)
            r_new = np.asarray(fun(x_new), dtype=float)
            nfev += 1
            cost_new = 0.5 * float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            if cost_new < cost:
                accepted = True
                break
            lam *= 4.0
        if not accepted:
            message = "damping overflow: no descent step found"
            converged = _gradient_cosine(J, r, free) <= np.sqrt(gtol)
            break

        dx = x_new - x
        reduction = cost - cost_new
        x, r, cost = x_new, r_new, cost_new
        J = jacobian(x, r)
        lam = max(lam / 3.0, 1e-12)
        if np.linalg.norm(dx) <= xtol * (np.linalg.norm(x) + xtol):
            converged, message = True, "step tolerance reached"
            break
        if reduction <= ftol * max(cost, 1e-300) or cost == 0.0:
            converged, message = True, "cost tolerance reached"
            break

    g = J.T @ r
    active = ((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0))
    return LeastSquaresResult(x, r, J, cost, it, nfev, converged, message, active)
