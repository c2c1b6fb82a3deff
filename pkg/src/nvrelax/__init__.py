"""NV-center relaxometry: spin Hamiltonian, ODMR, T1 protocol simulation and fitting."""
from .spin_core import (
    NV_ORIENTATIONS,
    FieldVector,
    NvOrientation,
    PhysicalConstants,
    ResonanceField,
    SpinSystem,
    TransitionSet,
    build_hamiltonian,
    degeneracy_scan,
    eigensystem,
    nv_systems,
    transition_frequencies,
    transition_spectrum,
)
from .fitting import (
    DegenerateDataError,
    FitError,
    FitOptions,
    StretchedExpFit,
    fit_lorentzian_dip,
    fit_stretched_exp,
    parabola_refine,
    stretched_exp,
)
from .odmr import (
    FieldCalibration,
    LineshapeParams,
    OdmrSpectrum,
    PeakEstimate,
    UnderdeterminedError,
    calibrate_field,
    extract_d_e,
    find_peaks,
    simulate_odmr,
)
from .relaxometry import (
    DecayCurve,
    GroundStatePopulations,
    PulseSequence,
    RateDistribution,
    RateModel,
    Resonance,
    concentration_to_sigma,
    evolve_dark,
    rate_vs_field,
    simulate_sequence,
)

__version__ = "0.1.0"
