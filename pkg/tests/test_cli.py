import io
import subprocess
import sys

import pytest

from nvrelax import datalab
from nvrelax.cli import EXIT_CONFIG, EXIT_FIT, EXIT_OK, EXIT_PARSE, main, parse_config_text, resolve_config


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_odmr_sim_default_writes_spectrum_and_peaks(tmp_path, capsys):
    out = tmp_path / "spec.csv"
    code, _, _ = run(capsys, "odmr-sim", "--output", str(out))
    assert code == EXIT_OK
    spec = datalab.read_spectrum(out)
    assert spec.freqs[0] == 2700.0 and spec.freqs[-1] == 3040.0
    peaks = datalab.read_peaks(tmp_path / "spec.peaks.csv")
    assert len(peaks) == 4


def test_odmr_sim_zero_field(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("field_magnitude = 0\nE = 0\n")
    peaks = tmp_path / "p.csv"
    assert run(capsys, "odmr-sim", "--config", str(cfg), "--set", f"peaks_output={peaks}")[0] == 0
    assert [round(p.center, 6) for p in datalab.read_peaks(peaks)] == [2870.0]
    cfg.write_text("field_magnitude = 0\nE = 6\nlinewidth = 3\n")
    assert run(capsys, "odmr-sim", "--config", str(cfg), "--set", f"peaks_output={peaks}")[0] == 0
    assert len(datalab.read_peaks(peaks)) == 2


def test_missing_grid_key_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("freq_min = 2750\nfreq_step = 0.5\n")
    code, _, err = run(capsys, "odmr-sim", "--config", str(cfg))
    assert code == EXIT_CONFIG
    assert "freq_max" in err


def test_unknown_key_suggests_correction(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# typo below\nlinewdith = 4\n")
    code, _, err = run(capsys, "odmr-sim", "--config", str(cfg))
    assert code == EXIT_CONFIG
    assert "linewidth" in err and ":2" in err


def test_flags_override_file_override_defaults(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 5\nlinewidth = 4\n")
    merged, explicit = resolve_config(str(cfg), ["linewidth=3"], {"seed": 9, "output": None})
    assert merged["linewidth"] == 3.0 and merged["seed"] == 9
    assert merged["contrast"] == 0.02
    assert {"linewidth", "seed"} <= explicit
    with pytest.raises(ValueError):
        parse_config_text("just words")


def test_t1_round_trip_via_files(tmp_path, capsys):
    curve, report = tmp_path / "c.csv", tmp_path / "r.csv"
    assert run(capsys, "t1-sim", "--output", str(curve))[0] == EXIT_OK
    assert run(capsys, "t1-fit", str(curve), "--output", str(report))[0] == EXIT_OK
    (rec,) = datalab.read_fit_report(report)
    assert rec["t1_ms"] == pytest.approx(3.0, rel=5e-3)
    assert rec["beta"] == pytest.approx(1.0, abs=5e-4)
    assert rec["converged"] is True


def test_raw_and_normalized_curve_files_fit_identically(tmp_path, capsys):
    raw, norm = tmp_path / "raw.csv", tmp_path / "norm.csv"
    run(capsys, "t1-sim", "--set", "distribution=log_normal", "--set", "sigma_log=0.5",
        "--set", "ensemble_size=3000", "--output", str(raw))
    curve = datalab.read_decay_curve(raw)
    datalab.write_table(norm, ["tau_us", "I"], zip(curve.tau, curve.I))
    _, a, _ = run(capsys, "t1-fit", str(raw), "--output", "-")
    _, b, _ = run(capsys, "t1-fit", str(norm), "--output", "-")
    assert a == b


def test_t1_fit_constant_data(tmp_path, capsys):
    flat = tmp_path / "flat.csv"
    flat.write_text("tau_us,I\n" + "".join(f"{t},0.5\n" for t in range(1, 8)))
    code, _, err = run(capsys, "t1-fit", str(flat))
    assert code == EXIT_FIT
    assert "degenerate" in err


def test_t1_fit_parse_error(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("tau_us,I\n1,1\n3,0.5\n2,0.4\n")
    code, _, err = run(capsys, "t1-fit", str(bad))
    assert code == EXIT_PARSE
    assert "bad.csv:4" in err


def test_degeneracies_default_scan(capsys):
    code, out, _ = run(capsys, "degeneracies", "--output", "-")
    assert code == EXIT_OK
    res = datalab.read_resonances(io.StringIO(out))
    p1 = [r.B for r in res if r.kind == "nv_p1"]
    nn = [r.B for r in res if r.kind == "nv_nv" and 580 <= r.B <= 610]
    assert len(p1) == 1 and p1[0] == pytest.approx(512.1, abs=0.5)
    assert len(nn) == 1


def test_scans_empty_range_and_bad_step(capsys):
    for cmd in ("rate-scan", "degeneracies"):
        code, out, _ = run(capsys, cmd, "--set", "b_min=10", "--set", "b_max=5")
        assert code == EXIT_OK
        assert [l for l in out.splitlines() if not l.startswith("#")][1:] == []
        code, _, err = run(capsys, cmd, "--set", "b_step=0")
        assert code == EXIT_CONFIG and "b_step" in err


def test_rate_scan_table(capsys):
    code, out, _ = run(capsys, "rate-scan", "--set", "b_max=100", "--set", "b_step=5")
    table = datalab.read_rate_scan(io.StringIO(out))
    assert code == 0 and len(table) == 21
    rates = [r for _, r in table]
    assert rates[0] == max(rates)


def test_spots(capsys):
    code, out, _ = run(capsys, "spots", "--id", "13")
    t = datalab.read_table(io.StringIO(out))
    assert code == 0 and t.rows == [["13", "65000.0", "2.5e+21", "7.1", "3530.0"]]
    code, out, _ = run(capsys, "spots", "--all", "--reference-fluorescence", "91549")
    t = datalab.read_table(io.StringIO(out))
    assert len(t.rows) == 10
    fl = t.floats("fluorescence")
    mapped = t.floats("concentration_recalibrated_ppm")
    order = fl.argsort()
    assert all(b > a for a, b in zip(mapped[order], mapped[order][1:]))
    assert run(capsys, "spots", "--id", "99")[0] == EXIT_CONFIG


@pytest.mark.parametrize("argv", [
    ["odmr-sim", "--set", "noise_rms=0.002", "--seed", "11"],
    ["t1-sim", "--set", "noise_rms=0.05", "--set", "distribution=log_normal",
     "--set", "sigma_log=0.4", "--set", "ensemble_size=2000", "--seed", "11"],
])
def test_determinism(capsys, argv):
    _, a, _ = run(capsys, *argv, "--output", "-")
    _, b, _ = run(capsys, *argv, "--output", "-")
    assert a == b and len(a) > 100


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "nvrelax.cli", "spots", "--id", "5"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[1] == "5,1400.0,1.1e+19,0.2,3530.0"
