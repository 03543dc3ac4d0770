#!/usr/bin/env python3
"""
Command-line front end for the collar numerics.

Example:
  python cli.py density-scan --m 2 --deltas 0.1,0.05 --out out.csv
  python cli.py corona --deltas 0.05 --m 6 --m0 2 --extra-modes 1,-1 --format json

Exit codes: 0 success, 1 a certificate or acceptance flag failed (results are
still written), 2 invalid arguments or config, 3 numeric or I/O failure.
"""

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from bergman_density import COUNTEREXAMPLE_CSV_FIELDS, DENSITY_CSV_FIELDS, counterexample_report, density_scan
from collar_geometry import make_collar
from corona import CORONA_CSV_FIELDS, build_family, corona_decompose
from dbar_solver import dbar_check, peak_section
from errors import CollarError
from mode_sections import QuadratureSpec, boundary_round_trip, random_section
from settings import DEFAULT_SETTINGS, EPS1, Settings, configure_logging, load_settings, parse_key_values
from weights import CollarPeak, ThickLog, Zero, weight_certificate

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FLAGGED = 1
EXIT_NUMERIC = 3

ROUND_TRIP_TOL = 1e-9


def _int_list(value: Any) -> List[int]:
    if isinstance(value, str):
        return [int(v) for v in value.split(",") if v.strip()]
    return [int(v) for v in value]


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    command: Literal["density-scan", "counterexample", "decompose", "weights-cert", "dbar-check",
                     "peak-section", "corona"]
    deltas: List[float] = Field(default_factory=lambda: [0.1])
    m: int = Field(default=2, ge=1)
    m0: int = Field(default=2, ge=1)
    k_max: int = Field(default=DEFAULT_SETTINGS.k_max, ge=0)
    rho0: float = 0.0
    weight: Literal["collar_peak", "thick_log", "zero"] = "zero"
    n_y: Optional[int] = Field(default=None, ge=16)
    n_theta: int = Field(default=256, ge=1)
    section_modes: int = Field(default=16, ge=1, description="Band limit of random sections")
    extra_modes: List[int] = Field(default_factory=lambda: [1, -1])
    seed: int = 0
    format: Literal["csv", "json"] = "json"
    out: Optional[Path] = None
    settings: Settings = DEFAULT_SETTINGS

    @field_validator("deltas", mode="before")
    @classmethod
    def _split_deltas(cls, value: Any) -> List[float]:
        values = [float(v) for v in value.split(",") if v.strip()] if isinstance(value, str) else list(value)
        if not values:
            raise ValueError("at least one delta is required")
        bad = [d for d in values if not 0 < d < EPS1]
        if bad:
            raise ValueError(f"deltas must lie in (0, 8/sqrt(5)); got {bad}")
        return values

    @field_validator("rho0")
    @classmethod
    def _finite_rho0(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError(f"rho0 must be finite; got {value}")
        return value

    @field_validator("extra_modes", mode="before")
    @classmethod
    def _split_modes(cls, value: Any) -> List[int]:
        return _int_list(value)

    @property
    def quadrature(self) -> QuadratureSpec:
        return QuadratureSpec.from_settings(self.settings)


class CommandResult(NamedTuple):
    records: List[Dict[str, Any]]
    csv_rows: List[Dict[str, Any]]
    fields: Optional[List[str]]
    passed: bool


def _finite_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not math.isfinite(value):
        raise argparse.ArgumentTypeError(f"expected a finite number, got {text!r}")
    return value


def _delta_list(text: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not values or any(not 0 < d < EPS1 for d in values):
        raise argparse.ArgumentTypeError(f"deltas must lie in (0, 8/sqrt(5)), got {text!r}")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key=value file merged under explicit flags")
    common.add_argument("--deltas", type=_delta_list, help="comma-separated core lengths (default 0.1)")
    common.add_argument("--m", type=int, help="section power (default 2)")
    common.add_argument("--k-max", dest="k_max", type=int, help="Fourier truncation (default 64)")
    common.add_argument("--format", choices=("csv", "json"), help="output format (default json, csv for *.csv)")
    common.add_argument("--out", type=Path, help="output path; stdout when absent")
    common.add_argument("--seed", type=int, help="random seed for generated sections (default 0)")

    parser = argparse.ArgumentParser(prog="cli.py", description="Collar numerics: scans, certificates, decompositions")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("density-scan", parents=[common], help="Bergman density rows along a delta scan")
    sub.add_parser("counterexample", parents=[common], help="three-section ratios at x0")
    p = sub.add_parser("decompose", parents=[common], help="boundary split round trip of a random section")
    p.add_argument("--section-modes", dest="section_modes", type=int, help="band limit (default 16)")
    p = sub.add_parser("weights-cert", parents=[common], help="certificate for a weight function")
    p.add_argument("--weight", choices=("collar_peak", "thick_log", "zero"), help="weight kind (default zero)")
    p.add_argument("--rho0", type=_finite_float, help="peak or center position (default 0)")
    for name, text in (("dbar-check", "d-bar solver convergence and Hormander comparison"),
                       ("peak-section", "peak section at rho0")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--rho0", type=_finite_float, help="peak position (default 0)")
        p.add_argument("--n-y", dest="n_y", type=int, help="y-grid size")
        p.add_argument("--n-theta", dest="n_theta", type=int, help="theta samples (default 256)")
    p = sub.add_parser("corona", parents=[common], help="corona decomposition of a random section")
    p.add_argument("--m0", type=int, help="generator power (default 2)")
    p.add_argument("--extra-modes", dest="extra_modes", type=_int_list, help="extra generator modes (default 1,-1)")
    p.add_argument("--section-modes", dest="section_modes", type=int, help="band limit of S (default 16)")
    p.add_argument("--n-y", dest="n_y", type=int, help="y-grid size (odd)")
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> RunConfig:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    config_path = args.pop("config", None)

    run_values: Dict[str, Any] = {}
    setting_values: Dict[str, Any] = {}
    if config_path is not None:
        try:
            file_values = parse_key_values(config_path.read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError, ValueError) as e:
            parser.error(f"cannot read config {config_path}: {e}")
        for key, value in file_values.items():
            known = False
            if key in Settings.model_fields:
                setting_values[key] = value
                known = True
            if key in RunConfig.model_fields and key not in ("command", "settings"):
                run_values[key] = value
                known = True
            if not known:
                parser.error(f"unknown config key {key!r} in {config_path}")
    run_values.update({k: v for k, v in args.items() if v is not None})
    if "format" not in run_values and run_values.get("out") is not None:
        run_values["format"] = "csv" if Path(run_values["out"]).suffix.lower() == ".csv" else "json"

    try:
        settings = load_settings(overrides=setting_values)
        return RunConfig(settings=settings, **run_values)
    except ValidationError as e:
        parser.error(str(e))


def _flatten(record: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in record.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{name}."))
        elif isinstance(value, (list, tuple)):
            flat[name] = json.dumps(value, sort_keys=True)
        else:
            flat[name] = value
    return flat


def _generic(records: List[Dict[str, Any]], passed: bool) -> CommandResult:
    return CommandResult(records=records, csv_rows=[_flatten(r) for r in records], fields=None, passed=passed)


def _density_scan(config: RunConfig) -> CommandResult:
    reports = density_scan(config.deltas, config.m, config.k_max, config.quadrature)
    return CommandResult(
        records=[r.model_dump() for r in reports],
        csv_rows=[r.csv_row() for r in reports],
        fields=DENSITY_CSV_FIELDS,
        passed=all(r.error is None for r in reports),
    )


def _counterexample(config: RunConfig) -> CommandResult:
    reports = [counterexample_report(make_collar(d, config.k_max), config.m, config.quadrature) for d in config.deltas]
    return CommandResult(records=reports, csv_rows=reports, fields=COUNTEREXAMPLE_CSV_FIELDS,
                         passed=all(r["combined_within_bound"] for r in reports))


def _decompose(config: RunConfig) -> CommandResult:
    rng = np.random.default_rng(config.seed)
    records = []
    for d in config.deltas:
        collar = make_collar(d, max(config.k_max, config.section_modes))
        modes = range(-config.section_modes, config.section_modes + 1)
        report = boundary_round_trip(random_section(rng, modes, config.m), collar)
        report.pop("pieces")
        report["pass"] = report["relative_error"] <= ROUND_TRIP_TOL
        records.append(report)
    return _generic(records, all(r["pass"] for r in records))


def _weight_spec(config: RunConfig) -> Any:
    if config.weight == "collar_peak":
        return CollarPeak(rho0=config.rho0)
    if config.weight == "thick_log":
        return ThickLog(eps2=config.settings.eps2, center_rho=config.rho0)
    return Zero()


def _weights_cert(config: RunConfig) -> CommandResult:
    spec = _weight_spec(config)
    records = [{"delta": d, **weight_certificate(make_collar(d, config.k_max), spec, settings=config.settings)}
               for d in config.deltas]
    return _generic(records, all(r["pass"] for r in records))


def _dbar_check(config: RunConfig) -> CommandResult:
    extra = {"n_y": config.n_y} if config.n_y else {}
    records = [dbar_check(make_collar(d, config.k_max), config.m, config.rho0, config.quadrature, config.settings,
                          n_theta=config.n_theta, k_max=min(16, config.k_max), **extra)
               for d in config.deltas]
    return _generic(records, all(r["pass"] for r in records))


def _peak_section(config: RunConfig) -> CommandResult:
    extra = {"n_y": config.n_y} if config.n_y else {}
    records = []
    for d in config.deltas:
        section, report = peak_section(make_collar(d, config.k_max), config.m, config.rho0, config.quadrature,
                                       config.settings, n_theta=config.n_theta, **extra)
        report["section"] = json.loads(section.to_json())
        records.append(report)
    return _generic(records, all(r["pass"] for r in records))


def _corona(config: RunConfig) -> CommandResult:
    rng = np.random.default_rng(config.seed)
    extra = {"n_y": config.n_y} if config.n_y else {}
    records, rows = [], []
    for d in config.deltas:
        collar = make_collar(d, config.k_max)
        family = build_family(collar, config.m0, config.extra_modes, config.quadrature, config.settings)
        S = random_section(rng, range(-config.section_modes, config.section_modes + 1), config.m)
        T, report = corona_decompose(S, family, collar, config.quadrature, config.settings, **extra)
        record = {"delta": d, **report.to_dict(), "family": family.report,
                  "T": [json.loads(t.to_json()) for t in T]}
        records.append(record)
        rows.extend({"delta": d, **row} for row in report.csv_rows())
    return CommandResult(records=records, csv_rows=rows, fields=["delta"] + CORONA_CSV_FIELDS,
                         passed=all(r["pass"] for r in records))


HANDLERS: Dict[str, Callable[[RunConfig], CommandResult]] = {
    "density-scan": _density_scan,
    "counterexample": _counterexample,
    "decompose": _decompose,
    "weights-cert": _weights_cert,
    "dbar-check": _dbar_check,
    "peak-section": _peak_section,
    "corona": _corona,
}


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def render(result: CommandResult, fmt: str, command: str) -> str:
    if fmt == "json":
        payload = {"command": command, "results": result.records, "pass": result.passed}
        return json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n"
    fields = result.fields or sorted({key for row in result.csv_rows for key in row})
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(result.csv_rows)
    return buffer.getvalue()


def emit(text: str, path: Optional[Path]) -> None:
    """Write to stdout, or to ``path`` through a temporary file and an atomic rename."""
    if path is None:
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def run(config: RunConfig) -> int:
    logger.info("running %s for deltas %s", config.command, config.deltas)
    try:
        result = HANDLERS[config.command](config)
        emit(render(result, config.format, config.command), config.out)
    except (CollarError, OSError) as e:
        logger.error("%s failed: %s", config.command, e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as e:
        logger.exception("%s hit an unexpected numeric failure", config.command)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    if not result.passed:
        logger.warning("%s finished with failed flags", config.command)
        return EXIT_FLAGGED
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    config = parse_args(argv)
    configure_logging(config.settings)
    return run(config)


if __name__ == "__main__":
    raise SystemExit(main())
