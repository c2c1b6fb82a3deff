"""Command-line front end: ``nvrelax <command> [--config FILE] [--set KEY=VALUE ...]``.

Configuration values come from built-in defaults, then a flat ``key = value``
file, then ``--set`` and dedicated flags, later sources winning.
"""
from __future__ import annotations

import argparse
import difflib
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import datalab
from .fitting import DegenerateDataError, FitError, FitOptions, fit_stretched_exp
from .odmr import LineshapeParams, find_peaks, simulate_odmr
from .relaxometry import PulseSequence, RateDistribution, RateModel, rate_vs_field, simulate_sequence
from .spin_core import FieldVector, PhysicalConstants, degeneracy_scan, nv_systems, SpinSystem

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARSE = 3
EXIT_FIT = 4


class ConfigError(ValueError):
    pass


def _vec3(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.replace(" ", "").strip("[]()").split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated numbers, got {text!r}")
    return tuple(parts)


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    # spin system
    "D": (float, 2870.0),
    "E": (float, 0.0),
    "gamma_nv": (float, 2.8025),
    "gamma_e": (float, 2.8025),
    # field
    "field_magnitude": (float, 30.0),
    "field_direction": (_vec3, (1.0, 1.0, 1.0)),
    "field_vector": (lambda s: None if s.strip().lower() == "none" else _vec3(s), None),
    # odmr
    "freq_min": (float, 2700.0),
    "freq_max": (float, 3040.0),
    "freq_step": (float, 0.25),
    "linewidth": (float, 5.0),
    "contrast": (float, 0.02),
    "lineshape": (str, "lorentzian"),
    "noise_rms": (float, 0.0),
    "min_depth": (float, 0.005),
    # T1 protocol
    "tau_min": (float, 10.0),
    "tau_max": (float, 15000.0),
    "tau_points": (int, 40),
    "tau_list": (_float_list, ()),
    "pump_duration": (float, 50.0),
    "readout_window": (float, 0.3),
    "repeats": (int, 5),
    "averages": (int, 1024),
    "pi_target": (str, "minus"),
    "distribution": (str, "delta"),
    "median_t1_ms": (float, 3.0),
    "sigma_log": (float, 0.0),
    "ensemble_size": (int, 1),
    "readout_contrast": (float, 0.3),
    "format": (str, "raw"),
    # fitting
    "offset_free": (_bool, False),
    "beta_fixed": (_opt_float, None),
    "max_iterations": (int, 200),
    # rate model and scans
    "concentration": (float, 1.0),
    "phonon_rate": (float, 100.0),
    "dipolar_coefficient": (float, 47.6),
    "b_min": (float, 0.0),
    "b_max": (float, 700.0),
    "b_step": (float, 1.0),
    "scan_axis": (_vec3, (1.0, 1.0, 1.0)),
    "targets": (lambda s: tuple(t.strip() for t in s.split(",") if t.strip()), ("nv_nv", "nv_p1")),
    # run
    "seed": (int, 0),
    "output": (str, "-"),
    "peaks_output": (str, ""),
}

GRID_KEYS = ("freq_min", "freq_max", "freq_step")


def _unknown_key(key: str, where: str) -> ConfigError:
    close = difflib.get_close_matches(key, SCHEMA, n=3)
    hint = f"; did you mean {', '.join(close)}?" if close else ""
    return ConfigError(f"unknown config key {key!r} in {where}{hint}")


def parse_config_text(text: str, where: str = "config") -> dict[str, str]:
    raw: dict[str, str] = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{ln}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise _unknown_key(key, f"{where}:{ln}")
        raw[key] = value.strip().strip('"').strip("'")
    return raw


def resolve_config(config_path: str | None, overrides: Sequence[str],
                   flags: dict[str, Any] | None = None) -> tuple[dict[str, Any], set[str]]:
    """Merge defaults, file and command-line values; returns (config, explicitly-set keys)."""
    raw: dict[str, str] = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file {config_path!r} not found")
        raw.update(parse_config_text(path.read_text(encoding="utf-8"), config_path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (p.strip() for p in item.split("=", 1))
        if key not in SCHEMA:
            raise _unknown_key(key, "--set")
        raw[key] = value
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    for key, value in raw.items():
        conv = SCHEMA[key][0]
        try:
            cfg[key] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"invalid value for {key!r}: {exc}") from None
    explicit = set(raw)
    for key, value in (flags or {}).items():
        if value is not None:
            cfg[key] = value
            explicit.add(key)
    return cfg, explicit


def _constants(cfg) -> PhysicalConstants:
    return PhysicalConstants(cfg["gamma_nv"], cfg["gamma_e"], cfg["D"])


def _field(cfg) -> FieldVector:
    if cfg["field_vector"] is not None:
        return FieldVector(cfg["field_vector"])
    return FieldVector.along(cfg["field_magnitude"], cfg["field_direction"])


def _tau_list(cfg) -> tuple[float, ...]:
    if cfg["tau_list"]:
        return cfg["tau_list"]
    return tuple(np.geomspace(cfg["tau_min"], cfg["tau_max"], cfg["tau_points"]))


def _settings_comment(cfg, keys) -> list[str]:
    return [", ".join(f"{k}={datalab.format_number(cfg[k]) if not isinstance(cfg[k], tuple) else ','.join(datalab.format_number(v) for v in cfg[k])}" for k in keys)]


# -- commands ------------------------------------------------------------------

def cmd_odmr_sim(cfg, explicit) -> int:
    given = [k for k in GRID_KEYS if k in explicit]
    if given and len(given) != len(GRID_KEYS):
        missing = [k for k in GRID_KEYS if k not in explicit]
        raise ConfigError(f"incomplete frequency grid: missing grid key(s) {', '.join(missing)}")
    systems = nv_systems(cfg["D"], cfg["E"], _constants(cfg))
    lines = LineshapeParams(cfg["linewidth"], cfg["contrast"], cfg["lineshape"])
    spec = simulate_odmr(systems, _field(cfg), lines,
                         (cfg["freq_min"], cfg["freq_max"], cfg["freq_step"]),
                         cfg["noise_rms"] or None, cfg["seed"])
    peaks = find_peaks(spec, cfg["min_depth"])
    comments = _settings_comment(cfg, ("D", "E", "field_magnitude", "field_direction", "linewidth",
                                       "contrast", "noise_rms", "seed"))
    datalab.write_spectrum(cfg["output"], spec, comments)
    peaks_out = cfg["peaks_output"]
    if not peaks_out and cfg["output"] != "-":
        out = Path(cfg["output"])
        peaks_out = str(out.with_name(out.stem + ".peaks" + (out.suffix or ".csv")))
    if peaks_out:
        datalab.write_peaks(peaks_out, peaks, [f"{len(peaks)} peaks"])
    return EXIT_OK


def cmd_t1_sim(cfg, explicit) -> int:
    seq = PulseSequence(_tau_list(cfg), cfg["pump_duration"], True, cfg["readout_window"],
                        cfg["repeats"], cfg["averages"], cfg["pi_target"])
    family = cfg["distribution"]
    dist = RateDistribution(family, cfg["median_t1_ms"], cfg["sigma_log"] if family != "delta" else 0.0)
    curve = simulate_sequence(seq, dist, cfg["ensemble_size"], cfg["readout_contrast"],
                              cfg["noise_rms"] or None, cfg["seed"])
    if cfg["format"] not in ("raw", "normalized"):
        raise ConfigError("format must be 'raw' or 'normalized'")
    comments = _settings_comment(cfg, ("distribution", "median_t1_ms", "sigma_log", "ensemble_size",
                                       "readout_contrast", "noise_rms", "seed"))
    datalab.write_decay_curve(cfg["output"], curve, raw=cfg["format"] == "raw", comments=comments)
    return EXIT_OK


def cmd_t1_fit(cfg, explicit, input_path: str) -> int:
    curve = datalab.read_decay_curve(input_path)
    opts = FitOptions(max_iterations=cfg["max_iterations"], beta_fixed=cfg["beta_fixed"],
                      offset_free=cfg["offset_free"])
    fit = fit_stretched_exp(curve, opts)
    datalab.write_fit_report(cfg["output"], fit)
    if not fit.converged:
        print(f"nvrelax: fit did not converge: {fit.message}", file=sys.stderr)
        return EXIT_FIT
    return EXIT_OK


def _scan_grid(cfg) -> np.ndarray:
    step = cfg["b_step"]
    if not step > 0:
        raise ConfigError(f"b_step must be positive, got {step!r}")
    if cfg["b_max"] < cfg["b_min"]:
        return np.empty(0)
    n = int(np.floor((cfg["b_max"] - cfg["b_min"]) / step + 1e-9))
    return cfg["b_min"] + step * np.arange(n + 1)


def cmd_rate_scan(cfg, explicit) -> int:
    grid = _scan_grid(cfg)
    model = RateModel(cfg["phonon_rate"], cfg["dipolar_coefficient"], None, cfg["concentration"])
    comments = _settings_comment(cfg, ("concentration", "phonon_rate", "dipolar_coefficient"))
    datalab.write_rate_scan(cfg["output"], rate_vs_field(model, grid), comments)
    return EXIT_OK


def cmd_degeneracies(cfg, explicit) -> int:
    if not cfg["b_step"] > 0:
        raise ConfigError(f"b_step must be positive, got {cfg['b_step']!r}")
    if cfg["b_max"] < cfg["b_min"]:
        found = []
    else:
        system = SpinSystem(cfg["D"], cfg["E"], constants=_constants(cfg))
        found = degeneracy_scan(cfg["scan_axis"], (cfg["b_min"], cfg["b_max"], cfg["b_step"]),
                                cfg["targets"], system)
    datalab.write_resonances(cfg["output"], found,
                             _settings_comment(cfg, ("D", "E", "b_min", "b_max", "b_step")))
    return EXIT_OK


SPOT_COLUMNS = ("spot_id", "fluorescence", "dose_cm2", "concentration_ppm", "electron_flux_nm2_s")


def cmd_spots(cfg, explicit, spot_id: int | None, show_all: bool,
              reference_fluorescence: float | None) -> int:
    if spot_id is not None:
        try:
            records = [datalab.get_spot(spot_id)]
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from None
    else:
        records = datalab.load_table1()
    cols = list(SPOT_COLUMNS)
    rows = [[r.spot_id, r.fluorescence, r.dose, r.concentration_ppm, r.electron_flux] for r in records]
    comments = []
    if reference_fluorescence is not None:
        ref = datalab.CalibrationReference(reference_fluorescence)
        cols.append("concentration_recalibrated_ppm")
        for row, r in zip(rows, records):
            row.append(datalab.fluorescence_to_concentration(r.fluorescence, ref).ppm)
        comments.append(f"recalibrated: {ref.reference_concentration!r} ppm at fluorescence "
                        f"{reference_fluorescence!r}; systematic factor {ref.systematic_factor_bound!r}")
    datalab.write_table(cfg["output"], cols, rows, comments)
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nvrelax", description="NV-center relaxometry laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration value (repeatable)")
        p.add_argument("--output", "-o", help="output path, '-' for standard output")
        p.add_argument("--seed", type=int)
        return p

    common(sub.add_parser("odmr-sim", help="simulate a CW ODMR spectrum and its peak report"))
    common(sub.add_parser("t1-sim", help="simulate the T1 pulse sequence"))
    p = common(sub.add_parser("t1-fit", help="fit a stretched exponential to a decay curve"))
    p.add_argument("input", help="decay-curve file (raw or normalized), '-' for stdin")
    common(sub.add_parser("rate-scan", help="tabulate 1/T1 versus field"))
    common(sub.add_parser("degeneracies", help="list cross-relaxation resonance fields"))
    p = common(sub.add_parser("spots", help="print irradiated-spot records"))
    group = p.add_mutually_exclusive_group()
    group.add_argument("--id", type=int, dest="spot_id")
    group.add_argument("--all", action="store_true", dest="show_all")
    p.add_argument("--reference-fluorescence", type=float,
                   help="fluorescence of the 10 ppm reference, adds a recalibrated column")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg, explicit = resolve_config(args.config, args.set,
                                       {"output": args.output, "seed": args.seed})
        if args.command == "odmr-sim":
            return cmd_odmr_sim(cfg, explicit)
        if args.command == "t1-sim":
            return cmd_t1_sim(cfg, explicit)
        if args.command == "t1-fit":
            return cmd_t1_fit(cfg, explicit, args.input)
        if args.command == "rate-scan":
            return cmd_rate_scan(cfg, explicit)
        if args.command == "degeneracies":
            return cmd_degeneracies(cfg, explicit)
        return cmd_spots(cfg, explicit, args.spot_id, args.show_all, args.reference_fluorescence)
    except datalab.ParseError as exc:
        print(f"nvrelax: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except DegenerateDataError as exc:
        print(f"nvrelax: degenerate data: {exc}", file=sys.stderr)
        return EXIT_FIT
    except FitError as exc:
        print(f"nvrelax: fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (ConfigError, ValueError) as exc:
        print(f"nvrelax: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"nvrelax: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
