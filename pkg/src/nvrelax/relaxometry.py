"""All-optical T1 protocol on NV ensembles and the 1/T1(B, concentration) model.

Populations are ordered (|+1>, |0>, |−1>). In the dark every pair of
sublevels exchanges population at the same rate W = 1/(3·T1), so any
population difference relaxes as exp(−τ/T1).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .spin_core import SpinSystem, degeneracy_scan

__all__ = [
    "PulseSequence",
    "GroundStatePopulations",
    "RateDistribution",
    "DecayCurve",
    "Resonance",
    "RateModel",
    "PUMPED",
    "evolve_dark",
    "rate_matrix",
    "apply_pi_pulse",
    "sample_t1",
    "simulate_sequence",
    "normalize_branches",
    "rate_vs_field",
    "default_resonances",
    "concentration_to_sigma",
]

BLOCK_SIZE = 1024


@dataclass(frozen=True)
class GroundStatePopulations:
    p: tuple[float, float, float]

    def __post_init__(self):
        p = tuple(float(x) for x in self.p)
        if len(p) != 3:
            raise ValueError("need three sublevel populations")
        if any(not (-1e-12 <= x <= 1 + 1e-12) for x in p):
            raise ValueError(f"populations must lie in [0, 1], got {p!r}")
        if abs(sum(p) - 1.0) > 1e-9:
            raise ValueError(f"populations must sum to 1, got {sum(p)!r}")
        object.__setattr__(self, "p", p)

    @property
    def zero(self) -> float:
        return self.p[1]


PUMPED = GroundStatePopulations((0.0, 1.0, 0.0))


def rate_matrix(t1_ms: float) -> np.ndarray:
    """Generator dp/dt = M·p (per μs) for equal pairwise flip rates."""
    w = 1.0 / (3.0 * t1_ms * 1e3)
    return w * (np.ones((3, 3)) - 3.0 * np.eye(3))


def evolve_dark(p0: GroundStatePopulations, T1: float, tau: float) -> GroundStatePopulations:
    """Populations after a dark interval ``tau`` (μs) with relaxation time ``T1`` (ms)."""
    if not T1 > 0:
        raise ValueError("T1 must be positive")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    decay = math.exp(-tau / (T1 * 1e3))
    p = [1.0 / 3.0 + (x - 1.0 / 3.0) * decay for x in p0.p]
    s = sum(p)
    return GroundStatePopulations(tuple(x / s for x in p))


_PI_TARGETS = {"plus": 0, "minus": 2}


def apply_pi_pulse(p: GroundStatePopulations, target: str = "minus") -> GroundStatePopulations:
    """Ideal π pulse: swap |0> with |−1> (``minus``) or |+1> (``plus``)."""
    try:
        k = _PI_TARGETS[target]
    except KeyError:
        raise ValueError(f"pi-pulse target must be 'plus' or 'minus', got {target!r}") from None
    q = list(p.p)
    q[1], q[k] = q[k], q[1]
    return GroundStatePopulations(tuple(q))


@dataclass(frozen=True)
class PulseSequence:
    """Timing of the T1 protocol; durations in μs."""

    tau_list: tuple[float, ...]
    pump_duration: float = 50.0
    pi_pulse: bool = True
    readout_window: float = 0.3
    repeats: int = 5
    averages: int = 1024
    pi_target: str = "minus"

    def __post_init__(self):
        tau = tuple(float(t) for t in self.tau_list)
        if not tau:
            raise ValueError("tau_list must not be empty")
        if any(t <= 0 for t in tau):
            raise ValueError("dark times must be positive")
        if any(b <= a for a, b in zip(tau, tau[1:])):
            raise ValueError("tau_list must be strictly increasing")
        if not (self.pump_duration > 0 and self.readout_window > 0):
            raise ValueError("pump and readout durations must be positive")
        if self.repeats < 1 or self.averages < 1:
            raise ValueError("repeats and averages must be at least 1")
        if self.pi_target not in _PI_TARGETS:
            raise ValueError("pi_target must be 'plus' or 'minus'")
        object.__setattr__(self, "tau_list", tau)

    @classmethod
    def log_spaced(cls, t_min: float, t_max: float, n: int, **kw) -> "PulseSequence":
        return cls(tuple(np.geomspace(t_min, t_max, n)), **kw)


@dataclass(frozen=True)
class RateDistribution:
    family: str = "delta"
    median_T1: float = 3.0
    sigma_log: float = 0.0

    def __post_init__(self):
        if self.family not in ("delta", "log_normal"):
            raise ValueError(f"unknown distribution family {self.family!r}")
        if not self.median_T1 > 0:
            raise ValueError("median_T1 must be positive")
        if self.sigma_log < 0:
            raise ValueError("sigma_log must be non-negative")
        if self.family == "delta" and self.sigma_log != 0:
            raise ValueError("a delta distribution has sigma_log = 0")


@dataclass(frozen=True, eq=False)
class DecayCurve:
    """Normalized differential signal I(τ) with the raw branches it came from.

    ``tau`` is in μs. ``signal_nopi``/``signal_pi`` may be None for curves
    read from normalized files.
    """

    tau: np.ndarray
    I: np.ndarray
    signal_nopi: np.ndarray | None = None
    signal_pi: np.ndarray | None = None
    noise_rms: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float)
        I = np.asarray(self.I, dtype=float)
        if tau.ndim != 1 or tau.shape != I.shape:
            raise ValueError("tau and I must be 1-D arrays of equal length")
        for name in ("signal_nopi", "signal_pi"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float)
                if v.shape != tau.shape:
                    raise ValueError(f"{name} must match tau in length")
                object.__setattr__(self, name, v)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "I", I)


def sample_t1(dist: RateDistribution, ensemble_size: int, seed: int | None = 0,
              workers: int = 1) -> np.ndarray:
    """Per-center T1 values in ms.

    Members are drawn in fixed blocks of BLOCK_SIZE, block b from the
    stream ``SeedSequence(seed, spawn_key=(b,))``, so the result does not
    depend on how blocks are distributed over workers.
    """
    if ensemble_size < 1:
        raise ValueError("ensemble_size must be at least 1")
    if dist.family == "delta" or dist.sigma_log == 0:
        return np.full(ensemble_size, dist.median_T1)
    n_blocks = -(-ensemble_size // BLOCK_SIZE)
    entropy = 0 if seed is None else seed

    def block(b: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(entropy, spawn_key=(b,)))
        n = min(BLOCK_SIZE, ensemble_size - b * BLOCK_SIZE)
        return dist.median_T1 * np.exp(dist.sigma_log * rng.standard_normal(n))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(block, range(n_blocks)))
    else:
        parts = [block(b) for b in range(n_blocks)]
    return np.concatenate(parts)


def normalize_branches(signal_nopi, signal_pi, reference: float | None = None) -> np.ndarray:
    """I = (F_noπ − F_π) / reference, reference defaulting to the first (shortest τ) point."""
    diff = np.asarray(signal_nopi, dtype=float) - np.asarray(signal_pi, dtype=float)
    ref = diff[0] if reference is None else reference
    if ref == 0:
        raise ValueError("normalization point has zero differential signal")
    return diff / ref


def simulate_sequence(seq: PulseSequence, dist: RateDistribution, ensemble_size: int = 1,
                      readout_contrast: float = 0.3, noise_rms: float | None = None,
                      seed: int | None = 0, base: float = 1.0, workers: int = 1) -> DecayCurve:
    """Run the pump / dark / (π) / readout protocol on an ensemble.

    Fluorescence is ``base·(1 − contrast·(1 − p₀))`` averaged over centers.
    The normalization reference is the pumped state read out immediately
    (τ = 0), so ``I(0) = 1``. ``noise_rms`` is the single-shot relative
    noise per branch; each of ``repeats`` repetitions averages
    ``averages`` shots.
    """
    if not 0 < readout_contrast <= 0.5:
        raise ValueError("readout_contrast must lie in (0, 0.5]")
    t1 = sample_t1(dist, ensemble_size, seed, workers)
    tau = np.asarray(seq.tau_list)
    # closed-form dark evolution, as in evolve_dark, vectorized over centers
    decay = np.exp(-tau[:, None] / (t1[None, :] * 1e3)).mean(axis=1)
    third = 1.0 / 3.0
    p0_nopi = third + (PUMPED.zero - third) * decay
    pi_state = apply_pi_pulse(PUMPED, seq.pi_target)
    p0_pi = third + (pi_state.zero - third) * decay

    def fluor(p0):
        return base * (1.0 - readout_contrast * (1.0 - p0))

    f_nopi = fluor(p0_nopi)
    f_pi = fluor(p0_pi) if seq.pi_pulse else np.full_like(f_nopi, fluor(third))
    reference = fluor(PUMPED.zero) - fluor(pi_state.zero)
    if noise_rms:
        rng = np.random.default_rng(np.random.SeedSequence(0 if seed is None else seed,
                                                           spawn_key=(2 ** 31,)))
        sigma = noise_rms * base / math.sqrt(seq.averages)
        shape = (seq.repeats, tau.size)
        f_nopi = f_nopi + rng.normal(0.0, sigma, shape).mean(axis=0)
        f_pi = f_pi + rng.normal(0.0, sigma, shape).mean(axis=0)
    I = normalize_branches(f_nopi, f_pi, reference)
    noise_I = 0.0
    if noise_rms:
        noise_I = math.sqrt(2.0) * noise_rms / (math.sqrt(seq.averages * seq.repeats)
                                                * readout_contrast)
    return DecayCurve(tau, I, f_nopi, f_pi, noise_I,
                      {"ensemble_size": ensemble_size, "family": dist.family,
                       "median_T1_ms": dist.median_T1, "sigma_log": dist.sigma_log,
                       "seed": seed, "reference": reference})


# -- rate model ------------------------------------------------------------------------

@dataclass(frozen=True)
class Resonance:
    B_res: float
    width: float
    relative_amplitude: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("resonance width must be positive")
        if self.relative_amplitude < 0:
            raise ValueError("resonance amplitude must be non-negative")


def default_resonances(system: SpinSystem | None = None,
                       widths: dict | None = None,
                       amplitudes: dict | None = None) -> tuple[Resonance, ...]:
    """Cross-relaxation resonances for B ∥ [111] located by the degeneracy scan.

    Widths (FWHM, gauss) and relative amplitudes are model choices keyed by
    kind; the zero-field feature is keyed ``zero``.
    """
    widths = {"zero": 30.0, "nv_p1": 8.0, "nv_nv": 12.0, **(widths or {})}
    amplitudes = {"zero": 1.5, "nv_p1": 0.6, "nv_nv": 1.0, **(amplitudes or {})}
    out = []
    for r in degeneracy_scan((1.0, 1.0, 1.0), (0.0, 700.0, 1.0), system=system):
        kind = "zero" if abs(r.B) < 0.5 else r.kind
        out.append(Resonance(round(r.B, 3), widths[kind], amplitudes[kind]))
    return tuple(out)


_DEFAULT_RESONANCES: tuple[Resonance, ...] | None = None


def _cached_default_resonances() -> tuple[Resonance, ...]:
    global _DEFAULT_RESONANCES
    if _DEFAULT_RESONANCES is None:
        _DEFAULT_RESONANCES = default_resonances()
    return _DEFAULT_RESONANCES


@dataclass(frozen=True)
class RateModel:
    """1/T1(B) = phonon + k·c·(1 + Σ Lorentzian resonances in B), in s⁻¹.

    Default phonon_rate and dipolar_coefficient are calibrated so that the
    total rate at 30 G grows by a factor of about 4.8 between 0.2 and 7.1
    ppm; ``resonances=None`` takes the field-scan defaults.
    """

    phonon_rate: float = 100.0
    dipolar_coefficient: float = 47.6
    resonances: tuple[Resonance, ...] | None = None
    concentration: float = 1.0

    def __post_init__(self):
        if self.phonon_rate < 0 or self.dipolar_coefficient < 0 or self.concentration < 0:
            raise ValueError("rates and concentration must be non-negative")

    @property
    def resonance_list(self) -> tuple[Resonance, ...]:
        return _cached_default_resonances() if self.resonances is None else tuple(self.resonances)

    def with_concentration(self, concentration: float) -> "RateModel":
        return RateModel(self.phonon_rate, self.dipolar_coefficient, self.resonances, concentration)

    def rate(self, B) -> np.ndarray:
        b = np.abs(np.asarray(B, dtype=float))
        enhancement = np.ones_like(b)
        for r in self.resonance_list:
            x = (b - r.B_res) / (0.5 * r.width)
            enhancement = enhancement + r.relative_amplitude / (1.0 + x * x)
        return self.phonon_rate + self.dipolar_coefficient * self.concentration * enhancement


def rate_vs_field(model: RateModel, B_list: Sequence[float]) -> list[tuple[float, float]]:
    b = np.asarray(B_list, dtype=float)
    return [(float(x), float(r)) for x, r in zip(b, model.rate(b))]


def concentration_to_sigma(concentration: float, coupling_scale: float = 0.3,
                           model: RateModel | None = None,
                           reference_field: float = 30.0) -> RateDistribution:
    """Rate distribution of an ensemble at a given NV⁻ concentration (ppm).

    The median rate is the rate model at ``reference_field``; the log-normal
    spread is ``coupling_scale·sqrt(c)``, which vanishes (delta family) as
    the concentration goes to zero.
    """
    if not concentration > 0:
        raise ValueError("concentration must be positive")
    if coupling_scale < 0:
        raise ValueError("coupling_scale must be non-negative")
    model = (model or RateModel()).with_concentration(concentration)
    rate = float(model.rate(reference_field))
    median_t1_ms = 1e3 / rate
    sigma = coupling_scale * math.sqrt(concentration)
    if sigma == 0:
        return RateDistribution("delta", median_t1_ms, 0.0)
    return RateDistribution("log_normal", median_t1_ms, sigma)
