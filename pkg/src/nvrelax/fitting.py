"""Decay and lineshape fits: stretched exponentials, Lorentzian dips, parabolas."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .lm import levenberg_marquardt

__all__ = [
    "FitError",
    "DegenerateDataError",
    "FitOptions",
    "StretchedExpFit",
    "stretched_exp",
    "stretched_exp_jacobian",
    "fit_stretched_exp",
    "LorentzianDip",
    "lorentzian",
    "fit_lorentzian_dip",
    "ParabolaVertex",
    "parabola_refine",
]

BETA_MIN = 1e-3


class FitError(RuntimeError):
    """A fit could not be set up or did not produce a usable result."""


class DegenerateDataError(FitError, ValueError):
    """Input data carry no information about the fit parameters."""


# -- stretched exponential -----------------------------------------------------

def stretched_exp(tau, amplitude: float, t1: float, beta: float, offset: float = 0.0) -> np.ndarray:
    """``amplitude·exp(-(tau/t1)^beta) + offset``."""
    x = np.asarray(tau, dtype=float) / t1
    return amplitude * np.exp(-np.power(x, beta)) + offset


def stretched_exp_jacobian(tau, amplitude: float, t1: float, beta: float,
                           offset: float = 0.0) -> np.ndarray:
    """Columns are derivatives with respect to (amplitude, t1, beta, offset).

    The beta column is ``-A·e·x^β·ln x``; it vanishes at τ = 0 and at
    τ = t1 where ln x = 0.
    """
    tau = np.asarray(tau, dtype=float)
    x = tau / t1
    xb = np.power(x, beta)
    e = np.exp(-xb)
    with np.errstate(divide="ignore", invalid="ignore"):
        logx = np.where(x > 0, np.log(np.where(x > 0, x, 1.0)), 0.0)
    d_amp = e
    d_t1 = amplitude * e * beta * xb / t1
    d_beta = -amplitude * e * xb * logx
    d_off = np.ones_like(tau)
    return np.stack([d_amp, d_t1, d_beta, d_off], axis=1)


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 200
    tolerance: float = 1e-10
    beta_fixed: float | None = None
    offset_free: bool = False
    weights: str = "uniform"

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.weights not in ("uniform", "provided"):
            raise ValueError("weights must be 'uniform' or 'provided'")
        if self.beta_fixed is not None and not 0 < self.beta_fixed <= 1:
            raise ValueError("beta_fixed must lie in (0, 1]")


@dataclass(frozen=True)
class StretchedExpFit:
    """Result of a stretched-exponential fit.

    ``covariance`` is ordered (T1 [ms], beta, amplitude, offset); rows of
    fixed parameters are zero.
    """

    T1: float
    beta: float
    amplitude: float
    offset: float
    covariance: np.ndarray = field(repr=False)
    chi2_reduced: float
    converged: bool
    iterations: int
    message: str = ""
    gradient_norm: float = 0.0

    @property
    def errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def t1_err(self) -> float:
        return float(self.errors[0])

    @property
    def beta_err(self) -> float:
        return float(self.errors[1])

    def as_record(self) -> dict:
        return {
            "t1_ms": self.T1,
            "beta": self.beta,
            "amplitude": self.amplitude,
            "offset": self.offset,
            "t1_err": self.t1_err,
            "beta_err": self.beta_err,
            "chi2_reduced": self.chi2_reduced,
            "converged": self.converged,
            "iterations": self.iterations,
        }


def _curve_arrays(curve) -> tuple[np.ndarray, np.ndarray, float]:
    if hasattr(curve, "tau"):
        tau, y = curve.tau, curve.I
        noise = float(getattr(curve, "noise_rms", 0.0) or 0.0)
    else:
        tau, y = curve
        noise = 0.0
    return np.asarray(tau, dtype=float), np.asarray(y, dtype=float), noise


def _initial_t1(tau: np.ndarray, y: np.ndarray, amp: float, offset: float) -> float:
    frac = (y - offset) / amp
    below = np.flatnonzero(frac < math.exp(-1.0))
    target = math.exp(-1.0)
    if below.size and below[0] > 0:
        k = below[0]
        f0, f1 = frac[k - 1], frac[k]
        return float(tau[k - 1] + (f0 - target) * (tau[k] - tau[k - 1]) / (f0 - f1))
    ok = frac > 0
    if ok.sum() >= 2:
        slope = np.polyfit(tau[ok], np.log(frac[ok]), 1)[0]
        if slope < 0:
            return float(-1.0 / slope)
    return float(tau[-1])


def fit_stretched_exp(curve, opts: FitOptions | None = None,
                      sigma: Sequence[float] | None = None) -> StretchedExpFit:
    """Fit ``A·exp(-(τ/T1)^β) + c`` to a decay curve.

    ``curve`` is a DecayCurve-like object (``tau`` in μs, ``I``) or a
    ``(tau, I)`` pair. β is confined to (0, 1] by projection inside the
    damped least-squares solver; T1 is optimized as ln T1 and reported in ms.
    A simplex search is used as a fallback when the damped iteration fails.
    """
    opts = opts or FitOptions()
    tau, y, noise = _curve_arrays(curve)
    if tau.shape != y.shape or tau.ndim != 1:
        raise ValueError("tau and I must be 1-D arrays of equal length")
    if tau.size < 5:
        raise ValueError(f"need at least 5 points, got {tau.size}")
    if np.any(tau <= 0):
        raise ValueError("all tau values must be positive")
    if np.any(np.diff(tau) <= 0):
        raise ValueError("tau must be strictly increasing")
    if not np.all(np.isfinite(y)):
        raise ValueError("signal contains non-finite values")
    if np.ptp(y) <= 1e-12 * max(1.0, float(np.max(np.abs(y)))):
        raise DegenerateDataError("decay signal is constant; T1 and beta are undetermined")

    if opts.weights == "provided":
        if sigma is None:
            if noise <= 0:
                raise ValueError("weights='provided' needs sigma or a curve noise estimate")
            sigma = np.full(tau.shape, noise)
        sigma = np.asarray(sigma, dtype=float)
        if sigma.shape != tau.shape or np.any(sigma <= 0):
            raise ValueError("sigma must be positive with one entry per point")
        w = 1.0 / sigma
    else:
        w = np.ones_like(tau)

    offset0 = float(y[-1]) if opts.offset_free and y[-1] < 0.5 * y[0] else 0.0
    amp0 = float(y[0] - offset0) or 1.0
    t1_0 = _initial_t1(tau, y, amp0, offset0)
    beta0 = 1.0 if opts.beta_fixed is None else opts.beta_fixed

    # internal vector: amplitude, ln t1, beta, offset
    full0 = np.array([amp0, math.log(max(t1_0, 1e-300)), beta0, offset0])
    free = np.array([True, True, opts.beta_fixed is None, opts.offset_free])
    lower = np.array([-np.inf, -np.inf, BETA_MIN, -np.inf])[free]
    upper = np.array([np.inf, np.inf, 1.0, np.inf])[free]

    def unpack(q):
        p = full0.copy()
        p[free] = q
        return p

    def residual(q):
        a, lt, b, c = unpack(q)
        return w * (stretched_exp(tau, a, math.exp(lt), b, c) - y)

    def jacobian(q):
        a, lt, b, c = unpack(q)
        t1 = math.exp(lt)
        jac = stretched_exp_jacobian(tau, a, t1, b, c)
        jac[:, 1] *= t1
        return (w[:, None] * jac)[:, free]

    res = levenberg_marquardt(residual, full0[free], jacobian, lower, upper,
                              max_iterations=opts.max_iterations,
                              xtol=opts.tolerance, gtol=opts.tolerance)
    q, converged, iters, message = res.x, res.converged, res.iterations, res.message
    cond = np.linalg.cond(res.jacobian) if np.all(np.isfinite(res.jacobian)) else np.inf
    if not converged or not np.isfinite(cond) or cond > 1e12:
        q, converged, iters, message = _simplex_fallback(residual, jacobian, q, lower, upper,
                                                         opts, res)

    a, lt, b, c = unpack(q)
    t1_us = math.exp(lt)
    r = residual(q)
    n_free = int(free.sum())
    dof = max(tau.size - n_free, 1)
    chi2_red = float(r @ r) / dof

    jac_phys = (w[:, None] * stretched_exp_jacobian(tau, a, t1_us, b, c))[:, free]
    cov_free = np.linalg.pinv(jac_phys.T @ jac_phys)
    if opts.weights == "uniform":
        cov_free = cov_free * chi2_red
    cov_internal = np.zeros((4, 4))
    cov_internal[np.ix_(free, free)] = cov_free
    # internal order (A, T1, beta, c) -> report order (T1 [ms], beta, A, c)
    order = [1, 2, 0, 3]
    cov = cov_internal[np.ix_(order, order)]
    cov[0, :] *= 1e-3
    cov[:, 0] *= 1e-3

    g = jacobian(q).T @ residual(q)
    at_bound = np.zeros(n_free, dtype=bool)
    if opts.beta_fixed is None:
        at_bound[2] = b >= 1.0 and g[2] < 0
    grad_norm = float(np.linalg.norm(np.where(at_bound, 0.0, g)))

    return StretchedExpFit(
        T1=t1_us * 1e-3,
        beta=float(b),
        amplitude=float(a),
        offset=float(c),
        covariance=cov,
        chi2_reduced=chi2_red,
        converged=bool(converged),
        iterations=int(iters),
        message=message,
        gradient_norm=grad_norm,
    )


def _simplex_fallback(residual, jacobian, q0, lower, upper, opts, first):
    def cost(q):
        qc = np.clip(q, lower, upper)
        r = residual(qc)
        # quadratic wall keeps the simplex near the feasible box
        return float(r @ r) + 1e6 * float(np.sum((q - qc) ** 2))

    out = minimize(cost, q0, method="Nelder-Mead",
                   options={"maxiter": 4000, "xatol": 1e-10, "fatol": 1e-16})
    q = np.clip(out.x, lower, upper)
    polish = levenberg_marquardt(residual, q, jacobian, lower, upper,
                                 max_iterations=opts.max_iterations,
                                 xtol=opts.tolerance, gtol=opts.tolerance)
    best = polish if polish.cost <= first.cost else first
    iters = first.iterations + int(out.nit) + polish.iterations
    msg = f"simplex fallback; {best.message}"
    return best.x, best.converged, iters, msg


# -- Lorentzian dips ---------------------------------------------------------------

def lorentzian(f, center: float, fwhm: float) -> np.ndarray:
    """Unit-height Lorentzian."""
    x = (np.asarray(f, dtype=float) - center) / (0.5 * fwhm)
    return 1.0 / (1.0 + x * x)


@dataclass(frozen=True)
class LorentzianDip:
    center: float
    fwhm: float
    depth: float
    center_err: float
    fwhm_err: float
    depth_err: float
    converged: bool
    flagged: bool = False
    message: str = ""


def _half_depth_width(f: np.ndarray, y: np.ndarray, k: int, baseline: float) -> float:
    half = baseline - 0.5 * (baseline - y[k])
    i = k
    while i > 0 and y[i] < half:
        i -= 1
    j = k
    while j < len(y) - 1 and y[j] < half:
        j += 1
    return float(max(f[j] - f[i], 2 * (f[1] - f[0])))


def fit_lorentzian_dip(freqs, signal, n_peaks: int,
                       centers: Sequence[float] | None = None,
                       max_iterations: int = 400) -> list[LorentzianDip]:
    """Least-squares fit of ``baseline − Σ depth·L(f; center, fwhm)``.

    Seeds come from ``centers`` when given (e.g. parabola estimates),
    otherwise from greedy residual minima. Components whose depth ends up
    below 1e-3 of the deepest one are returned with ``flagged=True``.
    """
    f = np.asarray(freqs, dtype=float)
    y = np.asarray(signal, dtype=float)
    if n_peaks < 1:
        raise ValueError("n_peaks must be at least 1")
    if f.shape != y.shape or f.size < 3 * n_peaks + 1:
        raise ValueError("need matching arrays with more points than parameters")
    if np.any(np.diff(f) <= 0):
        raise ValueError("frequencies must be strictly increasing")
    baseline = float(np.median(y))
    step = float(np.min(np.diff(f)))
    span = float(f[-1] - f[0])

    seeds = []
    work = y.copy()
    given = list(centers) if centers is not None else []
    for i in range(n_peaks):
        if i < len(given):
            k = int(np.argmin(np.abs(f - given[i])))
        else:
            k = int(np.argmin(work))
        depth = max(baseline - work[k], 1e-6)
        width = _half_depth_width(f, work, k, baseline)
        seeds.append((f[k], width, depth))
        work = work + depth * lorentzian(f, f[k], width)

    x0 = [baseline] + [v for s in seeds for v in s]
    lower = [-np.inf] + [f[0], 0.5 * step, 0.0] * n_peaks
    upper = [np.inf] + [f[-1], span, np.inf] * n_peaks

    def model(p):
        out = np.full_like(f, p[0])
        for k in range(n_peaks):
            c, wd, d = p[1 + 3 * k: 4 + 3 * k]
            out -= d * lorentzian(f, c, wd)
        return out

    def jac(p):
        cols = [np.ones_like(f)]
        for k in range(n_peaks):
            c, wd, d = p[1 + 3 * k: 4 + 3 * k]
            x = (f - c) / (0.5 * wd)
            L = 1.0 / (1.0 + x * x)
            dL_dx = -2.0 * x * L * L
            cols.append(-d * dL_dx * (-1.0 / (0.5 * wd)))   # d/dcenter
            cols.append(-d * dL_dx * (-x / wd))             # d/dfwhm
            cols.append(-L)                                  # d/ddepth
        return np.stack(cols, axis=1)

    res = levenberg_marquardt(lambda p: model(p) - y, x0, jac, lower, upper,
                              max_iterations=max_iterations)
    p = res.x
    dof = max(f.size - p.size, 1)
    s2 = float(res.residuals @ res.residuals) / dof
    cov = np.linalg.pinv(res.jacobian.T @ res.jacobian) * s2
    err = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    depths = p[3::3]
    deepest = float(np.max(depths)) if depths.size else 0.0
    out = []
    for k in range(n_peaks):
        c, wd, d = p[1 + 3 * k: 4 + 3 * k]
        ec, ew, ed = err[1 + 3 * k: 4 + 3 * k]
        flagged = d < 1e-3 * deepest
        out.append(LorentzianDip(float(c), float(wd), float(d), float(ec), float(ew), float(ed),
                                 res.converged, bool(flagged),
                                 ("negligible depth; component not supported by data"
                                  if flagged else res.message)))
    out.sort(key=lambda dip: dip.center)
    return out


# -- parabola vertex ---------------------------------------------------------------

@dataclass(frozen=True)
class ParabolaVertex:
    x_vertex: float
    y_vertex: float
    curvature: float
    uncertainty: float
    interior: bool


def parabola_refine(x, y) -> ParabolaVertex:
    """Vertex of the least-squares quadratic through 3 to 7 points.

    ``curvature`` is the second derivative 2a. The uncertainty propagates
    the residual variance through ``x_v = -b/2a`` and is 0 for three points.
    A vertex outside the sampled interval (or a straight line) is flagged
    with ``interior=False``: the extreme endpoint is returned and a
    RuntimeWarning is issued.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or not 3 <= x.size <= 7:
        raise ValueError("parabola_refine needs 3 to 7 matching points")
    x0 = float(x.mean())
    scale = float(np.ptp(x)) or 1.0
    u = (x - x0) / scale
    V = np.stack([u * u, u, np.ones_like(u)], axis=1)
    coef, *_ = np.linalg.lstsq(V, y, rcond=None)
    a, b, c = coef
    resid = y - V @ coef
    dof = x.size - 3
    s2 = float(resid @ resid) / dof if dof > 0 else 0.0
    cov = s2 * np.linalg.inv(V.T @ V)

    flat = abs(a) <= 1e-12 * (abs(b) + abs(c) + 1e-300)
    uv = -b / (2 * a) if not flat else np.inf
    if flat or not (u.min() <= uv <= u.max()):
        # extreme endpoint, on the side the extremum runs off to
        if a >= 0:
            k = 0 if y[0] <= y[-1] else x.size - 1
        else:
            k = 0 if y[0] >= y[-1] else x.size - 1
        warnings.warn("parabola vertex is not interior to the sampled points; "
                      "returning an endpoint", RuntimeWarning, stacklevel=2)
        return ParabolaVertex(float(x[k]), float(y[k]), float(2 * a / scale ** 2), float("nan"), False)

    grad = np.array([b / (2 * a * a), -1.0 / (2 * a), 0.0])
    var_u = float(grad @ cov @ grad)
    yv = a * uv * uv + b * uv + c
    return ParabolaVertex(
        x_vertex=float(x0 + uv * scale),
        y_vertex=float(yv),
        curvature=float(2 * a / scale ** 2),
        uncertainty=float(math.sqrt(max(var_u, 0.0)) * scale),
        interior=True,
    )
