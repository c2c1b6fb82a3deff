import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nvrelax import datalab
from nvrelax.datalab import (
    CalibrationReference,
    ParseError,
    concentration_at_dose,
    fluorescence_to_concentration,
    get_spot,
    load_table1,
)
from nvrelax.fitting import fit_stretched_exp
from nvrelax.odmr import find_peaks, simulate_odmr
from nvrelax.relaxometry import PulseSequence, RateDistribution, RateModel, rate_vs_field, simulate_sequence
from nvrelax.spin_core import FieldVector, degeneracy_scan, nv_systems

# reference rows, kept separate from the bundled constants
REFERENCE_ROWS = [
    (5, 1400, 1.1e19, 0.2), (6, 2600, 2.1e19, 0.3), (7, 5700, 4.2e19, 0.7),
    (8, 10000, 8.5e19, 1.2), (9, 6300, 1.7e20, 0.7), (10, 2900, 3.4e20, 3.3),
    (11, 50000, 6.8e20, 5.5), (12, 39000, 1.3e21, 4.3), (13, 65000, 2.5e21, 7.1),
    (14, 8300, 6.1e19, 3.9),
]


def test_table1_matches_reference_rows():
    rows = [(r.spot_id, r.fluorescence, r.dose, r.concentration_ppm) for r in load_table1()]
    assert rows == REFERENCE_ROWS
    assert get_spot(5).fluorescence == 1400 and get_spot(5).dose == 1.1e19
    assert get_spot(13).concentration_ppm == 7.1
    assert get_spot(14).electron_flux == 2530
    assert {r.electron_flux for r in load_table1() if r.spot_id != 14} == {3530}
    with pytest.raises(KeyError):
        get_spot(4)


def test_table1_checksum():
    recs = load_table1()
    assert len(recs) == 10
    doses = [r.dose for r in recs if r.spot_id <= 13]
    assert all(b > a for a, b in zip(doses, doses[1:]))
    assert get_spot(14).dose < get_spot(13).dose


def test_dose_interpolation_is_data_lookup():
    for r in load_table1()[:-1]:
        assert concentration_at_dose(r.dose) == pytest.approx(r.concentration_ppm)
    with pytest.raises(ValueError):
        concentration_at_dose(0)


def test_fluorescence_calibration():
    ref = CalibrationReference(20000.0)
    assert fluorescence_to_concentration(20000.0, ref).ppm == pytest.approx(10)
    est = fluorescence_to_concentration(10000.0, ref)
    assert est.ppm == pytest.approx(5)
    assert (est.lower_ppm, est.upper_ppm) == pytest.approx((1.0, 25.0))
    ref13 = CalibrationReference.from_spot(get_spot(13))
    assert ref13.reference_fluorescence == pytest.approx(91549, abs=1)
    assert fluorescence_to_concentration(65000, ref13).ppm == pytest.approx(7.1)
    with pytest.raises(ValueError):
        CalibrationReference(0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1e6), st.floats(0, 1e6))
def test_calibration_monotone(a, b):
    ref = CalibrationReference(91549.0)
    ca, cb = (fluorescence_to_concentration(x, ref).ppm for x in (a, b))
    if a < b:
        assert ca < cb


def _rw(write, read, obj, **kw):
    buf = io.StringIO()
    write(buf, obj, **kw)
    buf.seek(0)
    return read(buf), buf.getvalue()


def test_decay_curve_round_trip():
    tau = tuple(np.geomspace(1, 20000, 100))
    curve = simulate_sequence(PulseSequence(tau), RateDistribution("log_normal", 3.0, 0.5), 500,
                              noise_rms=0.02, seed=1)
    back, _ = _rw(datalab.write_decay_curve, datalab.read_decay_curve, curve)
    np.testing.assert_array_equal(back.tau, curve.tau)
    np.testing.assert_array_equal(back.signal_nopi, curve.signal_nopi)
    np.testing.assert_array_equal(back.signal_pi, curve.signal_pi)
    norm, _ = _rw(datalab.write_decay_curve, datalab.read_decay_curve, curve, raw=False)
    np.testing.assert_array_equal(norm.I, curve.I)


def test_raw_and_normalized_files_fit_identically():
    curve = simulate_sequence(PulseSequence(tuple(np.geomspace(30, 15000, 30))),
                              RateDistribution("delta", 3.0))
    raw, _ = _rw(datalab.write_decay_curve, datalab.read_decay_curve, curve, raw=True)
    buf = io.StringIO()
    datalab.write_table(buf, ["tau_us", "I"], zip(raw.tau, raw.I))
    buf.seek(0)
    norm = datalab.read_decay_curve(buf)
    a, b = fit_stretched_exp(raw), fit_stretched_exp(norm)
    assert a.T1 == b.T1 and a.beta == b.beta


def test_spectrum_and_peak_round_trip():
    spec = simulate_odmr(nv_systems(), FieldVector.along(30, (1, 1, 1)), noise_rms=1e-3, seed=2)
    back, _ = _rw(datalab.write_spectrum, datalab.read_spectrum, spec)
    np.testing.assert_array_equal(back.freqs, spec.freqs)
    np.testing.assert_array_equal(back.signal, spec.signal)
    peaks = find_peaks(spec)
    got, _ = _rw(datalab.write_peaks, datalab.read_peaks, peaks)
    assert [(p.center, p.depth, p.uncertainty) for p in got] == \
        [(p.center, p.depth, p.uncertainty) for p in peaks]


def test_fit_report_round_trip():
    fit = fit_stretched_exp((np.geomspace(30, 15000, 30), np.exp(-np.geomspace(30, 15000, 30) / 3000)))
    (rec,), text = _rw(datalab.write_fit_report, datalab.read_fit_report, fit)
    assert text.splitlines()[0] == "t1_ms,beta,amplitude,offset,t1_err,beta_err,chi2_reduced,converged,iterations"
    assert rec == fit.as_record()


def test_scan_round_trips():
    table = rate_vs_field(RateModel(), np.linspace(0, 700, 15))
    back, _ = _rw(datalab.write_rate_scan, datalab.read_rate_scan, table)
    assert back == table
    res = degeneracy_scan((1, 1, 1), (0, 700, 5))
    got, _ = _rw(datalab.write_resonances, datalab.read_resonances, res)
    assert got == res


def test_comments_ignored_and_extra_columns_preserved():
    text = "# instrument export\n# second comment\ntau_us,I,temperature\n1,1.0,300\n2,0.9,301\n# trailing\n3,0.8,302\n"
    curve = datalab.read_decay_curve(io.StringIO(text))
    assert curve.tau.tolist() == [1.0, 2.0, 3.0]
    assert curve.meta["extra_columns"] == {"temperature": ["300", "301", "302"]}
    out = io.StringIO()
    datalab.write_decay_curve(out, curve)
    assert "tau_us,I,temperature" in out.getvalue()
    assert "3.0,0.8,302" in out.getvalue()


def test_tab_delimited_accepted():
    curve = datalab.read_decay_curve(io.StringIO("tau_us\tI\n1\t1\n2\t0.5\n"))
    assert curve.I.tolist() == [1.0, 0.5]


@pytest.mark.parametrize("text, line, fragment", [
    ("tau_us,I\n1,1.0\n3,0.9\n2,0.8\n", 4, "strictly increasing"),
    ("tau_us,I\n1,1.0\n2;0.9\n", 3, "mixed delimiters"),
    ("tau_us,,I\n1,1.0\n", 1, "malformed header"),
    ("tau_us,I\n1,1.0,7\n", 2, "expected 2 fields"),
    ("tau_us,I\n1,abc\n", 2, "abc"),
])
def test_parse_errors_carry_line_numbers(text, line, fragment):
    with pytest.raises(ParseError) as exc:
        datalab.read_decay_curve(io.StringIO(text))
    assert exc.value.line == line
    assert fragment in str(exc.value)
    assert f":{line}:" in str(exc.value)


def test_missing_header_and_columns():
    with pytest.raises(ParseError, match="missing header"):
        datalab.read_table(io.StringIO("# only comments\n"))
    with pytest.raises(ParseError, match="decay-curve header"):
        datalab.read_decay_curve(io.StringIO("time,value\n1,2\n"))
    with pytest.raises(ParseError, match="required"):
        datalab.read_spectrum(io.StringIO("freq,signal\n1,2\n"))


def test_number_formatting():
    assert datalab.format_number(0.1) == "0.1"
    assert datalab.format_number(True) == "true"
    assert datalab.format_number(np.int64(3)) == "3"
    assert float(datalab.format_number(1 / 3)) == 1 / 3
