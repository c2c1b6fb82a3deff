"""CW ODMR spectra: synthesis and the inverse problems on them."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import peak_prominences

from .fitting import lorentzian, parabola_refine
from .lm import levenberg_marquardt
from .spin_core import (
    NV_ORIENTATIONS,
    FieldVector,
    SpinSystem,
    SX,
    SY,
    SZ,
    _SXY2,
    _SZ2,
    _as_field,
    eigh3,
    nv_frame,
    transition_spectrum,
)

__all__ = [
    "LineshapeParams",
    "OdmrSpectrum",
    "PeakEstimate",
    "ZeroFieldParameters",
    "FieldCalibration",
    "UnderdeterminedError",
    "simulate_odmr",
    "find_peaks",
    "extract_d_e",
    "calibrate_field",
    "direction_mismatch_deg",
    "canonical_direction",
]


class UnderdeterminedError(ValueError):
    """Too few distinct resonances to constrain the requested quantity."""


@dataclass(frozen=True)
class LineshapeParams:
    linewidth_fwhm: float = 5.0
    contrast_per_center: float = 0.02
    shape: str = "lorentzian"

    def __post_init__(self):
        if not self.linewidth_fwhm > 0:
            raise ValueError("linewidth must be positive")
        if not 0 < self.contrast_per_center <= 0.5:
            raise ValueError("contrast_per_center must lie in (0, 0.5]")
        if self.shape not in ("lorentzian", "gaussian"):
            raise ValueError(f"unknown lineshape {self.shape!r}")

    def profile(self, f: np.ndarray, center: float) -> np.ndarray:
        if self.shape == "lorentzian":
            return lorentzian(f, center, self.linewidth_fwhm)
        sigma = self.linewidth_fwhm / (2.0 * math.sqrt(2.0 * math.log(2.0)))
        return np.exp(-0.5 * ((f - center) / sigma) ** 2)


@dataclass(frozen=True, eq=False)
class PeakEstimate:
    center: float
    depth: float
    curvature: float
    uncertainty: float


@dataclass(frozen=True, eq=False)
class OdmrSpectrum:
    """Normalized fluorescence (1 off resonance) on a frequency grid in MHz."""

    freqs: np.ndarray
    signal: np.ndarray
    meta: dict = field(default_factory=dict)
    peaks: tuple[PeakEstimate, ...] = ()

    def __post_init__(self):
        f = np.asarray(self.freqs, dtype=float)
        s = np.asarray(self.signal, dtype=float)
        if f.ndim != 1 or f.shape != s.shape:
            raise ValueError("freqs and signal must be 1-D arrays of equal length")
        if np.any(np.diff(f) <= 0):
            raise ValueError("frequency grid must be strictly increasing")
        object.__setattr__(self, "freqs", f)
        object.__setattr__(self, "signal", s)

    def with_peaks(self, peaks: Sequence[PeakEstimate]) -> "OdmrSpectrum":
        return OdmrSpectrum(self.freqs, self.signal, dict(self.meta), tuple(peaks))


def _grid(spec: tuple[float, float, float]) -> np.ndarray:
    start, stop, step = (float(v) for v in spec)
    if not step > 0 or stop <= start:
        raise ValueError(f"invalid frequency grid {spec!r}")
    n = int(math.floor((stop - start) / step + 1e-9))
    return start + step * np.arange(n + 1)


def simulate_odmr(systems: Sequence[SpinSystem], field: FieldVector | Sequence[float],
                  lines: LineshapeParams | None = None,
                  grid: tuple[float, float, float] = (2700.0, 3040.0, 0.25),
                  noise_rms: float | None = None, seed: int | None = None,
                  weights: Sequence[float] | None = None) -> OdmrSpectrum:
    """Synthesize ``1 − Σ wᵢ·contrast·L(f − fᵢ)`` over orientations and transitions.

    Every orientation carries unit weight unless ``weights`` is given, so
    the three orientations that are equivalent for B ∥ [111] add up to the
    3:1 inner/outer ratio. Gaussian noise of rms ``noise_rms`` is optional.
    """
    lines = lines or LineshapeParams()
    systems = list(systems)
    b = _as_field(field)
    f = _grid(grid)
    w = np.ones(len(systems)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (len(systems),) or np.any(w < 0):
        raise ValueError("need one non-negative weight per system")
    signal = np.ones_like(f)
    for (orient, ts), wi in zip(transition_spectrum(systems, b), w):
        for name, fi in (("f_minus", ts.f_minus), ("f_plus", ts.f_plus)):
            if not f[0] <= fi <= f[-1]:
                raise ValueError(f"grid [{f[0]:g}, {f[-1]:g}] MHz does not cover the {name} "
                                 f"transition of NV {orient.label} at {fi:.3f} MHz")
            signal -= wi * lines.contrast_per_center * lines.profile(f, fi)
    if noise_rms:
        signal = signal + np.random.default_rng(seed).normal(0.0, noise_rms, f.size)
    meta = {
        "field": b.B,
        "linewidth": lines.linewidth_fwhm,
        "orientation_weights": tuple(float(x) for x in w),
    }
    return OdmrSpectrum(f, signal, meta)


def _local_minima(y: np.ndarray) -> list[int]:
    """Indices of strict local minima; plateaus report their lowest-frequency point."""
    out = []
    n = y.size
    i = 1
    while i < n - 1:
        if y[i] < y[i - 1]:
            j = i
            while j < n - 1 and y[j + 1] == y[i]:
                j += 1
            if j < n - 1 and y[j + 1] > y[i]:
                out.append(i)
            i = j + 1
        else:
            i += 1
    return out


def _fwhm_estimate(f: np.ndarray, y: np.ndarray, k: int, baseline: float) -> float:
    half = baseline - 0.5 * (baseline - y[k])
    i, j = k, k
    while i > 0 and y[i] < half:
        i -= 1
    while j < y.size - 1 and y[j] < half:
        j += 1
    return float(f[j] - f[i])


def find_peaks(spec: OdmrSpectrum, min_depth: float = 0.005) -> list[PeakEstimate]:
    """Locate resonance dips and refine each by a parabola on 5 or 7 points.

    A dip is a local minimum below ``baseline·(1 − min_depth)`` whose
    prominence is at least half that depth; the baseline is the median
    signal. The window widens to 7 points when the linewidth (from the
    spectrum metadata, else estimated) spans more than 10 grid steps.
    """
    f, y = spec.freqs, spec.signal
    if f.size < 5:
        raise ValueError("spectrum needs at least 5 points")
    if not 0 < min_depth < 1:
        raise ValueError("min_depth must lie in (0, 1)")
    baseline = float(np.median(y))
    threshold = baseline * (1.0 - min_depth)
    cand = [k for k in _local_minima(y) if y[k] < threshold]
    if not cand:
        return []
    prom = peak_prominences(-y, cand)[0]
    cand = [k for k, p in zip(cand, prom) if p >= 0.5 * min_depth * baseline]
    step = float(np.median(np.diff(f)))
    peaks = []
    for k in cand:
        width = spec.meta.get("linewidth") or _fwhm_estimate(f, y, k, baseline)
        half = 3 if width > 10 * step else 2
        lo, hi = max(k - half, 0), min(k + half + 1, f.size)
        if hi - lo < 3:
            continue
        with warnings.catch_warnings():
            # a noise-distorted window falls back to the grid minimum below
            warnings.simplefilter("ignore", RuntimeWarning)
            v = parabola_refine(f[lo:hi], y[lo:hi])
        center = v.x_vertex if v.interior else float(f[k])
        depth = baseline - (v.y_vertex if v.interior else float(y[k]))
        unc = v.uncertainty if v.interior and v.uncertainty > 0 else 0.5 * step
        peaks.append(PeakEstimate(center, depth, v.curvature, unc))
    peaks.sort(key=lambda p: p.center)
    return peaks


@dataclass(frozen=True)
class ZeroFieldParameters:
    """D and E from a zero-field spectrum.

    When the two strain components are unresolved ``E`` holds the upper
    bound linewidth/2 and ``e_upper_bound`` is True.
    """

    D: float
    E: float
    D_err: float
    E_err: float
    e_upper_bound: bool = False


def extract_d_e(zero_field_spec: OdmrSpectrum, min_depth: float = 0.005) -> ZeroFieldParameters:
    peaks = find_peaks(zero_field_spec, min_depth)
    if not peaks:
        raise UnderdeterminedError("no resonance found in the zero-field spectrum")
    if len(peaks) > 2:
        raise ValueError(f"found {len(peaks)} peaks at zero field; the field is not zero "
                         "or several strain domains are present")
    if len(peaks) == 1:
        p = peaks[0]
        f, y = zero_field_spec.freqs, zero_field_spec.signal
        width = zero_field_spec.meta.get("linewidth")
        if not width:
            k = int(np.argmin(np.abs(f - p.center)))
            width = _fwhm_estimate(f, y, k, float(np.median(y)))
        return ZeroFieldParameters(p.center, 0.5 * width, p.uncertainty, 0.0, True)
    p1, p2 = peaks
    err = 0.5 * math.hypot(p1.uncertainty, p2.uncertainty)
    return ZeroFieldParameters(0.5 * (p1.center + p2.center), 0.5 * (p2.center - p1.center),
                               err, err)


# -- field calibration ----------------------------------------------------------

_SIGNED_PERMS = np.array([
    np.diag(signs)[list(perm)]
    for perm in itertools.permutations(range(3))
    for signs in itertools.product((1, -1), repeat=3)
])


def canonical_direction(v: Sequence[float]) -> np.ndarray:
    """Representative of ``v`` under the cubic symmetry group: |x| ≥ |y| ≥ |z|, all ≥ 0."""
    u = np.abs(np.asarray(v, dtype=float))
    u = np.sort(u)[::-1]
    return u / np.linalg.norm(u)


def direction_mismatch_deg(a: Sequence[float], b: Sequence[float], symmetric: bool = True) -> float:
    """Angle between two directions, minimized over the 48 cubic symmetry
    operations when ``symmetric`` (these leave the ensemble spectrum
    unchanged for E = 0)."""
    ua = np.asarray(a, dtype=float)
    ub = np.asarray(b, dtype=float)
    ua = ua / np.linalg.norm(ua)
    ub = ub / np.linalg.norm(ub)
    if symmetric:
        cos = np.max(_SIGNED_PERMS @ ua @ ub)
    else:
        cos = ua @ ub
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


@dataclass(frozen=True)
class FieldCalibration:
    B_magnitude: float
    B_direction: tuple[float, float, float]
    residual: float
    B_vector: tuple[float, float, float]
    converged: bool = True


_SEED_DIRECTIONS = [o.axis for o in NV_ORIENTATIONS] + [
    (1.0, 0.0, 0.0), (1.0, 1.0, 0.0), (2.0, 1.0, 0.0), (2.0, 1.0, 1.0),
    (2.0, 2.0, 1.0), (3.0, 2.0, 1.0), (3.0, 1.0, 0.0), (4.0, 3.0, 2.0),
]


def calibrate_field(peaks: Sequence[PeakEstimate | float], sys_template: SpinSystem | None = None,
                    distinct_tol: float = 1e-3) -> FieldCalibration:
    """Least-squares field vector from observed resonance centers.

    The residual pairs every observed center with its nearest predicted
    transition of the four-orientation ensemble and every predicted
    transition with its nearest observed center, so no assignment of peaks
    to orientations is needed. The field is fitted as a Cartesian vector
    from several starts (the four <111> axes plus low-symmetry directions).
    ``residual`` is the rms of that residual vector in MHz.
    """
    centers = np.sort(np.array([p.center if isinstance(p, PeakEstimate) else float(p) for p in peaks]))
    distinct = centers[np.concatenate([[True], np.diff(centers) > distinct_tol])] if centers.size else centers
    if distinct.size < 3:
        raise UnderdeterminedError(f"field calibration needs at least 3 distinct peaks, "
                                   f"got {distinct.size}")
    template = sys_template or SpinSystem()
    gamma = template.constants.gamma_nv

    frames = np.stack([nv_frame(o.axis) for o in NV_ORIENTATIONS])
    static = template.D * _SZ2 + template.E * _SXY2

    def predicted(fields: np.ndarray) -> np.ndarray:
        b_nv = np.einsum("oij,nj->noi", frames, fields).reshape(-1, 3)
        h = static + gamma * (b_nv[:, 0, None, None] * SX + b_nv[:, 1, None, None] * SY
                              + b_nv[:, 2, None, None] * SZ)
        vals, _ = eigh3(h)
        # below the ~1000 G level anticrossings the |0>-like level is the lowest
        return (vals[:, 1:] - vals[:, :1]).reshape(fields.shape[0], -1)

    def residual_from(pred: np.ndarray) -> np.ndarray:
        diff = distinct[None, :, None] - pred[:, None, :]
        obs_to_pred = np.take_along_axis(diff, np.argmin(np.abs(diff), axis=2)[..., None], 2)[..., 0]
        pred_to_obs = -np.take_along_axis(diff, np.argmin(np.abs(diff), axis=1)[:, None, :], 1)[:, 0, :]
        return np.concatenate([obs_to_pred, pred_to_obs], axis=1)

    def fun(x):
        return residual_from(predicted(x[None, :]))[0]

    def jac(x):
        h = 1e-6 * max(1.0, float(np.linalg.norm(x)))
        pts = np.vstack([x, x + h * np.eye(3)])
        r = residual_from(predicted(pts))
        return ((r[1:] - r[0]) / h).T

    magnitude0 = (distinct[-1] - distinct[0]) / (2.0 * gamma)
    best = None
    for d in _SEED_DIRECTIONS:
        for scale in (1.0, 1.3):
            x0 = scale * magnitude0 * np.asarray(d) / np.linalg.norm(d)
            res = levenberg_marquardt(fun, x0, jac, max_iterations=100, xtol=1e-12, gtol=1e-12)
            if best is None or res.cost < best.cost:
                best = res
            if best.cost < 1e-12:
                break
        if best.cost < 1e-12:
            break

    bvec = best.x
    mag = float(np.linalg.norm(bvec))
    if template.E == 0:
        direction = canonical_direction(bvec)
    else:
        k = int(np.argmax(np.abs(bvec)))
        direction = bvec / mag * (1.0 if bvec[k] >= 0 else -1.0)
    rms = float(np.sqrt(np.mean(best.residuals ** 2)))
    return FieldCalibration(mag, tuple(float(c) for c in direction), rms,
                            tuple(float(c) for c in bvec), best.converged)
