"""Irradiated-spot records, fluorescence calibration and delimited text I/O.

Files are UTF-8 text: optional ``#`` comment lines, one mandatory header
line naming the columns, then one record per line. Numbers are written
with ``repr`` so a write/read cycle reproduces floats bit for bit.
"""
from __future__ import annotations

import io
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .fitting import StretchedExpFit
from .odmr import OdmrSpectrum, PeakEstimate
from .relaxometry import DecayCurve, normalize_branches
from .spin_core import ResonanceField

__all__ = [
    "SpotRecord",
    "TABLE1",
    "load_table1",
    "get_spot",
    "concentration_at_dose",
    "CalibrationReference",
    "ConcentrationEstimate",
    "fluorescence_to_concentration",
    "ParseError",
    "Table",
    "read_table",
    "write_table",
    "read_spectrum",
    "write_spectrum",
    "read_decay_curve",
    "write_decay_curve",
    "read_peaks",
    "write_peaks",
    "read_fit_report",
    "write_fit_report",
    "write_rate_scan",
    "read_rate_scan",
    "write_resonances",
    "read_resonances",
    "format_number",
]


# -- Table I -------------------------------------------------------------------

@dataclass(frozen=True)
class SpotRecord:
    spot_id: int
    fluorescence: float
    dose: float
    concentration_ppm: float
    electron_flux: float | None = None

    def __post_init__(self):
        if not self.dose > 0:
            raise ValueError("dose must be positive")
        if self.fluorescence < 0 or self.concentration_ppm < 0:
            raise ValueError("fluorescence and concentration must be non-negative")


# spot, integrated fluorescence (arb. u.), electron dose (cm^-2), NV- concentration (ppm),
# electron flux (nm^-2 s^-1)
TABLE1: tuple[SpotRecord, ...] = (
    SpotRecord(5, 1400.0, 1.1e19, 0.2, 3530.0),
    SpotRecord(6, 2600.0, 2.1e19, 0.3, 3530.0),
    SpotRecord(7, 5700.0, 4.2e19, 0.7, 3530.0),
    SpotRecord(8, 10000.0, 8.5e19, 1.2, 3530.0),
    SpotRecord(9, 6300.0, 1.7e20, 0.7, 3530.0),
    SpotRecord(10, 2900.0, 3.4e20, 3.3, 3530.0),
    SpotRecord(11, 50000.0, 6.8e20, 5.5, 3530.0),
    SpotRecord(12, 39000.0, 1.3e21, 4.3, 3530.0),
    SpotRecord(13, 65000.0, 2.5e21, 7.1, 3530.0),
    SpotRecord(14, 8300.0, 6.1e19, 3.9, 2530.0),
)


def load_table1() -> list[SpotRecord]:
    return list(TABLE1)


def get_spot(spot_id: int) -> SpotRecord:
    for rec in TABLE1:
        if rec.spot_id == spot_id:
            return rec
    raise KeyError(f"no spot {spot_id}; Table I lists spots 5-14")


def concentration_at_dose(dose: float) -> float:
    """Piecewise-linear interpolation in log(dose) over spots 5-13.

    The estimated concentrations are not monotone in dose, so this is a
    lookup of the tabulated points and not a dose-response law.
    """
    if not dose > 0:
        raise ValueError("dose must be positive")
    recs = [r for r in TABLE1 if r.electron_flux == 3530.0]
    x = np.log([r.dose for r in recs])
    y = [r.concentration_ppm for r in recs]
    return float(np.interp(math.log(dose), x, y))


@dataclass(frozen=True)
class CalibrationReference:
    reference_fluorescence: float
    reference_concentration: float = 10.0
    systematic_factor_bound: float = 5.0

    def __post_init__(self):
        if not self.reference_fluorescence > 0:
            raise ValueError("reference fluorescence must be positive")
        if not self.reference_concentration > 0:
            raise ValueError("reference concentration must be positive")
        if not self.systematic_factor_bound >= 1:
            raise ValueError("systematic factor bound must be at least 1")

    @classmethod
    def from_spot(cls, spot: SpotRecord, reference_concentration: float = 10.0) -> "CalibrationReference":
        """Reference brightness implied by treating ``spot`` as correctly calibrated."""
        return cls(spot.fluorescence * reference_concentration / spot.concentration_ppm,
                   reference_concentration)


@dataclass(frozen=True)
class ConcentrationEstimate:
    ppm: float
    lower_ppm: float
    upper_ppm: float
    systematic_factor: float


def fluorescence_to_concentration(fluorescence: float, ref: CalibrationReference) -> ConcentrationEstimate:
    """Concentration proportional to fluorescence, scaled to the reference sample."""
    if ref.reference_fluorescence == 0:
        raise ValueError("reference fluorescence is zero")
    if fluorescence < 0:
        raise ValueError("fluorescence must be non-negative")
    c = ref.reference_concentration * fluorescence / ref.reference_fluorescence
    k = ref.systematic_factor_bound
    return ConcentrationEstimate(c, c / k, c * k, k)


# -- delimited text ------------------------------------------------------------

class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<text>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


@dataclass
class Table:
    columns: list[str]
    rows: list[list[str]]
    comments: list[str] = field(default_factory=list)
    line_numbers: list[int] = field(default_factory=list)
    source: str = "<text>"

    def column(self, name: str) -> list[str]:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def floats(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        out = np.empty(len(self.rows))
        for k, (row, ln) in enumerate(zip(self.rows, self.line_numbers)):
            try:
                out[k] = float(row[i])
            except ValueError:
                raise ParseError(f"column {name!r}: {row[i]!r} is not a number", ln, self.source) from None
        return out


_DELIMITERS = (",", "\t", ";")


def _open_text(source) -> tuple[str, str]:
    if isinstance(source, (str, Path)) and str(source) == "-":
        return sys.stdin.read(), "<stdin>"
    if hasattr(source, "read"):
        return source.read(), getattr(source, "name", "<stream>")
    path = Path(source)
    return path.read_text(encoding="utf-8"), str(path)


def read_table(source, required: Sequence[str] = ()) -> Table:
    """Parse a delimited file (path, ``-`` for stdin, or open text stream)."""
    text, name = _open_text(source)
    comments: list[str] = []
    header: list[str] | None = None
    delim = ","
    rows: list[list[str]] = []
    lines: list[int] = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            comments.append(line[1:].strip())
            continue
        used = [d for d in _DELIMITERS if d in line]
        if header is None:
            if len(used) > 1:
                raise ParseError(f"mixed delimiters {used!r} in header", ln, name)
            delim = used[0] if used else ","
            header = [c.strip() for c in line.split(delim)]
            if any(not c for c in header) or len(set(header)) != len(header):
                raise ParseError("malformed header: empty or duplicate column names", ln, name)
            missing = [c for c in required if c not in header]
            if missing:
                raise ParseError(f"header lacks required column(s) {missing}; got {header}", ln, name)
            continue
        if any(d != delim for d in used):
            raise ParseError(f"mixed delimiters: expected {delim!r}, found {used!r}", ln, name)
        fields = [c.strip() for c in line.split(delim)]
        if len(fields) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(fields)}", ln, name)
        rows.append(fields)
        lines.append(ln)
    if header is None:
        raise ParseError("missing header line", None, name)
    return Table(header, rows, comments, lines, name)


def format_number(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_table(dest, columns: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()) -> None:
    """Write a comma-delimited table to a path, ``-`` (stdout) or a text stream."""
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(format_number(v) for v in row) + "\n")
    text = buf.getvalue()
    if hasattr(dest, "write"):
        dest.write(text)
    elif str(dest) == "-":
        sys.stdout.write(text)
    else:
        Path(dest).write_text(text, encoding="utf-8")


def _check_increasing(table: Table, values: np.ndarray, name: str) -> None:
    bad = np.flatnonzero(np.diff(values) <= 0)
    if bad.size:
        k = int(bad[0]) + 1
        raise ParseError(f"{name} is not strictly increasing ({values[k - 1]!r} then {values[k]!r})",
                         table.line_numbers[k], table.source)


def _extra_columns(table: Table, known: Sequence[str]) -> dict:
    return {c: table.column(c) for c in table.columns if c not in known}


# spectra

SPECTRUM_COLUMNS = ("freq_mhz", "signal")


def write_spectrum(dest, spec: OdmrSpectrum, comments: Sequence[str] = ()) -> None:
    extra = spec.meta.get("extra_columns", {})
    cols = list(SPECTRUM_COLUMNS) + list(extra)
    rows = [[f, s] + [extra[c][i] for c in extra] for i, (f, s) in enumerate(zip(spec.freqs, spec.signal))]
    write_table(dest, cols, rows, comments)


def read_spectrum(source) -> OdmrSpectrum:
    t = read_table(source, SPECTRUM_COLUMNS)
    f = t.floats("freq_mhz")
    _check_increasing(t, f, "freq_mhz")
    meta = {"source": t.source, "comments": t.comments}
    extra = _extra_columns(t, SPECTRUM_COLUMNS)
    if extra:
        meta["extra_columns"] = extra
    return OdmrSpectrum(f, t.floats("signal"), meta)


# decay curves

RAW_CURVE_COLUMNS = ("tau_us", "signal_nopi", "signal_pi")
NORMALIZED_CURVE_COLUMNS = ("tau_us", "I")


def write_decay_curve(dest, curve: DecayCurve, raw: bool | None = None,
                      comments: Sequence[str] = ()) -> None:
    """Raw two-branch columns when available (or ``raw=True``), else ``tau_us,I``."""
    raw = curve.signal_nopi is not None if raw is None else raw
    extra = curve.meta.get("extra_columns", {})
    if raw:
        if curve.signal_nopi is None or curve.signal_pi is None:
            raise ValueError("curve has no raw branches to write")
        cols = list(RAW_CURVE_COLUMNS)
        base = zip(curve.tau, curve.signal_nopi, curve.signal_pi)
    else:
        cols = list(NORMALIZED_CURVE_COLUMNS)
        base = zip(curve.tau, curve.I)
    rows = [list(b) + [extra[c][i] for c in extra] for i, b in enumerate(base)]
    write_table(dest, cols + list(extra), rows, comments)


def read_decay_curve(source) -> DecayCurve:
    """Read raw (normalized here to the shortest τ) or pre-normalized curves."""
    t = read_table(source)
    if all(c in t.columns for c in RAW_CURVE_COLUMNS):
        known = RAW_CURVE_COLUMNS
    elif all(c in t.columns for c in NORMALIZED_CURVE_COLUMNS):
        known = NORMALIZED_CURVE_COLUMNS
    else:
        raise ParseError(f"decay-curve header must contain {RAW_CURVE_COLUMNS} or "
                         f"{NORMALIZED_CURVE_COLUMNS}; got {t.columns}", None, t.source)
    if not t.rows:
        raise ParseError("decay curve has no data rows", None, t.source)
    tau = t.floats("tau_us")
    _check_increasing(t, tau, "tau_us")
    meta = {"source": t.source, "comments": t.comments}
    extra = _extra_columns(t, known)
    if extra:
        meta["extra_columns"] = extra
    if known is RAW_CURVE_COLUMNS:
        nopi, pi = t.floats("signal_nopi"), t.floats("signal_pi")
        return DecayCurve(tau, normalize_branches(nopi, pi), nopi, pi, 0.0, meta)
    return DecayCurve(tau, t.floats("I"), None, None, 0.0, meta)


# peak and fit reports

PEAK_COLUMNS = ("center_mhz", "depth", "uncertainty_mhz")


def write_peaks(dest, peaks: Sequence[PeakEstimate], comments: Sequence[str] = ()) -> None:
    write_table(dest, PEAK_COLUMNS, [[p.center, p.depth, p.uncertainty] for p in peaks], comments)


def read_peaks(source) -> list[PeakEstimate]:
    t = read_table(source, PEAK_COLUMNS)
    c, d, u = (t.floats(n) for n in PEAK_COLUMNS)
    return [PeakEstimate(float(a), float(b), float("nan"), float(e)) for a, b, e in zip(c, d, u)]


FIT_COLUMNS = ("t1_ms", "beta", "amplitude", "offset", "t1_err", "beta_err",
               "chi2_reduced", "converged", "iterations")


def write_fit_report(dest, fits: StretchedExpFit | Sequence[StretchedExpFit],
                     comments: Sequence[str] = ()) -> None:
    fits = [fits] if isinstance(fits, StretchedExpFit) else list(fits)
    rows = [[f.as_record()[c] for c in FIT_COLUMNS] for f in fits]
    write_table(dest, FIT_COLUMNS, rows, comments)


def read_fit_report(source) -> list[dict]:
    t = read_table(source, FIT_COLUMNS)
    out = []
    for row, ln in zip(t.rows, t.line_numbers):
        rec = dict(zip(t.columns, row))
        try:
            parsed = {c: float(rec[c]) for c in FIT_COLUMNS[:7]}
            parsed["iterations"] = int(rec["iterations"])
        except ValueError as exc:
            raise ParseError(str(exc), ln, t.source) from None
        if rec["converged"] not in ("true", "false"):
            raise ParseError(f"converged must be true/false, got {rec['converged']!r}", ln, t.source)
        parsed["converged"] = rec["converged"] == "true"
        out.append(parsed)
    return out


# scan outputs

RATE_COLUMNS = ("B_gauss", "rate_per_s")
RESONANCE_COLUMNS = ("B_gauss", "kind", "detuning_slope_mhz_per_g", "transition_a", "transition_b")


def write_rate_scan(dest, table: Sequence[tuple[float, float]], comments: Sequence[str] = ()) -> None:
    write_table(dest, RATE_COLUMNS, table, comments)


def read_rate_scan(source) -> list[tuple[float, float]]:
    t = read_table(source, RATE_COLUMNS)
    return list(zip(t.floats("B_gauss").tolist(), t.floats("rate_per_s").tolist()))


def write_resonances(dest, resonances: Sequence[ResonanceField], comments: Sequence[str] = ()) -> None:
    rows = [[r.B, r.kind, r.detuning_slope, r.pair[0], r.pair[1]] for r in resonances]
    write_table(dest, RESONANCE_COLUMNS, rows, comments)


def read_resonances(source) -> list[ResonanceField]:
    t = read_table(source, RESONANCE_COLUMNS)
    b, s = t.floats("B_gauss"), t.floats("detuning_slope_mhz_per_g")
    return [ResonanceField(float(x), k, float(y), (a, c))
            for x, k, y, a, c in zip(b, t.column("kind"), s, t.column("transition_a"), t.column("transition_b"))]
