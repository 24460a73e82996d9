"""Command-line driver: configuration, experiments and CSV reports."""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import cell_static, evolution
from .fem import AssemblyError
from .mesh import MeshError
from .model import (END_TIMES, ConfigError, InvariantViolation, ModelParams,
                    PRESETS, default_end_time, field_to_voltage,
                    params_from_mapping, params_to_mapping, preset)

KINDS = ("run", "sweep_field", "convergence_mesh", "convergence_time", "validate")
SUBCOMMANDS = {
    "run": "run",
    "sweep": "sweep_field",
    "converge-mesh": "convergence_mesh",
    "converge-time": "convergence_time",
    "validate": "validate",
}
THREADS_ENV = "EPTISSUE_THREADS"

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


@dataclass
class ExperimentSpec:
    """Everything needed to reproduce one experiment.

    Besides the model parameters, the study keys are ``E_field`` (V/cm,
    sets ``g``), ``sweep_E`` and ``sweep_steps`` (steps per sweep point),
    ``conv_h`` / ``conv_mesh_dt`` for the mesh study, ``conv_dt`` /
    ``conv_levels`` for the time-step study, ``conv_E``, ``write_kernel``,
    ``membrane_stride`` and ``report_sigma_e`` (the extracellular
    conductivity used to print rescaled absolute values in ``validate``).
    """

    kind: str = "run"
    params: ModelParams = field(default_factory=ModelParams)
    preset: str = "paper2024"
    E_field: float | None = None
    sweep_E: tuple[float, ...] = tuple(sorted(END_TIMES))
    sweep_steps: int = 600
    conv_h: tuple[float, ...] = (0.04, 0.02, 0.01, 0.005)
    conv_mesh_dt: float = 0.1
    conv_dt: float = 1.0 / 30.0
    conv_levels: int = 4
    conv_E: float = 500.0
    write_kernel: bool = False
    membrane_stride: int = 1
    report_sigma_e: float = 5.0
    out_dir: Path = Path("out")
    threads: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError("kind", f"must be one of {KINDS}")
        if not self.sweep_E:
            raise ConfigError("sweep_E", "must not be empty")
        if any(E < 0 or not math.isfinite(E) for E in self.sweep_E):
            raise ConfigError("sweep_E", "fields must be finite and >= 0")
        if len(self.conv_h) < 3:
            raise ConfigError("conv_h", "need at least three mesh sizes")
        if any(not 0 < h < self.params.radius for h in self.conv_h):
            raise ConfigError("conv_h", "mesh sizes must lie in (0, radius)")
        if self.conv_levels < 3:
            raise ConfigError("conv_levels", "need at least three levels")
        for key in ("conv_mesh_dt", "conv_dt", "report_sigma_e"):
            if not getattr(self, key) > 0:
                raise ConfigError(key, "must be > 0")
        if self.sweep_steps < 1:
            raise ConfigError("sweep_steps", "must be >= 1")
        if self.membrane_stride < 1:
            raise ConfigError("membrane_stride", "must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads", "must be >= 1")


_EXTRA_KEYS = {
    "E_field": "float", "sweep_E": "floats", "sweep_steps": "int",
    "conv_h": "floats", "conv_mesh_dt": "float", "conv_dt": "float",
    "conv_levels": "int", "conv_E": "float", "write_kernel": "bool",
    "membrane_stride": "int", "report_sigma_e": "float", "preset": "str",
}


def read_config_text(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}", "empty key")
        out[key] = value
    return out


def _convert(key: str, kind: str, text: str):
    try:
        if kind == "str":
            return text
        if kind == "int":
            return int(text)
        if kind == "float":
            if "/" in text:
                a, b = text.split("/", 1)
                return float(a) / float(b)
            return float(text)
        if kind == "floats":
            return tuple(float(v) for v in text.replace(",", " ").split())
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
    except ValueError:
        pass
    raise ConfigError(key, f"cannot parse {text!r} as {kind}")


def parse_config(path: str | Path | None = None,
                 overrides: Iterable[str] = (),
                 kind: str = "run",
                 preset_name: str | None = None,
                 out_dir: str | Path = "out",
                 threads: int | None = None) -> ExperimentSpec:
    """Build a validated :class:`ExperimentSpec`.

    ``overrides`` are ``key=value`` strings applied after the file.  A
    ``t_end`` that is not given explicitly follows the end-time table for
    the configured ``E_field``.
    """
    values: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from None
        values.update(read_config_text(text))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        values[key] = value

    name = preset_name or values.pop("preset", None) or "paper2024"
    values.pop("preset", None)
    base = preset(name)

    extras = {}
    model_values = {}
    for key, value in values.items():
        if key in _EXTRA_KEYS:
            extras[key] = _convert(key, _EXTRA_KEYS[key], value)
        else:
            model_values[key] = value

    E = extras.get("E_field")
    if E is not None:
        if E < 0:
            raise ConfigError("E_field", "must be >= 0")
        g = field_to_voltage(E, params_from_mapping(
            {k: v for k, v in model_values.items() if k in ("ell", "L0")}, base))
        if "g" in model_values and not math.isclose(
                float(_convert("g", "float", model_values["g"])), g, rel_tol=1e-12):
            raise ConfigError("g", "conflicts with E_field")
        model_values["g"] = repr(g)
        if "t_end" not in model_values:
            model_values["t_end"] = repr(default_end_time(E))
    params = params_from_mapping(model_values, base)

    if threads is None:
        env = os.environ.get(THREADS_ENV)
        try:
            threads = int(env) if env else 1
        except ValueError:
            raise ConfigError(THREADS_ENV, f"not an integer: {env!r}") from None
    return ExperimentSpec(kind=kind, params=params, preset=name,
                          out_dir=Path(out_dir), threads=threads, **extras)


def echo_config(spec: ExperimentSpec) -> str:
    """Effective configuration in the input format (re-parsable)."""
    lines = [f"# kind: {spec.kind}", f"preset = {spec.preset}"]
    for key, value in params_to_mapping(spec.params).items():
        lines.append(f"{key} = {value}")
    for key in sorted(_EXTRA_KEYS):
        if key == "preset":
            continue
        value = getattr(spec, key)
        if value is None:
            continue
        if isinstance(value, tuple):
            value = ", ".join(repr(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _csv(header: Sequence[str], rows) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else f"{v:.12g}" for v in row])
    return out.getvalue()


def fitted_slope(sizes, diffs) -> float:
    """Least-squares slope of ``log(diff)`` against ``log(size)``."""
    sizes = np.asarray(sizes, dtype=float)
    diffs = np.asarray(diffs, dtype=float)
    if np.any(diffs <= 0):
        return math.nan
    return float(np.polyfit(np.log(sizes), np.log(diffs), 1)[0])


# -- experiments -----------------------------------------------------------

def _sweep_point(spec: ExperimentSpec, E: float, prepared):
    T = default_end_time(E)
    p = spec.params.replace(g=field_to_voltage(E, spec.params), t_end=T,
                            dt=T / spec.sweep_steps)
    return evolution.run_two_plates(p, prepared=prepared, kernel_history="none")


def run_sweep(spec: ExperimentSpec):
    prepared = evolution.prepare_cell(spec.params)
    Es = list(spec.sweep_E)
    if spec.threads > 1:
        with ThreadPoolExecutor(spec.threads) as pool:
            results = list(pool.map(lambda E: _sweep_point(spec, E, prepared), Es))
    else:
        results = [_sweep_point(spec, E, prepared) for E in Es]
    return Es, results


def convergence_mesh(spec: ExperimentSpec):
    """sigma_eff,11(T) on each mesh of ``conv_h`` with step ``conv_mesh_dt``."""
    p0 = _study_params(spec).replace(dt=spec.conv_mesh_dt)
    values = []
    for h in spec.conv_h:
        p = p0.replace(mesh_h=h)
        res = evolution.run_two_plates(p, kernel_history="none")
        values.append(res.history.sigma_eff[-1, 0, 0])
    diffs = np.abs(np.diff(values))
    return list(spec.conv_h), values, diffs, fitted_slope(spec.conv_h[:-1], diffs)


def convergence_time(spec: ExperimentSpec):
    """sigma_eff,11(T) for ``conv_dt / 1.5**i`` on the configured mesh."""
    p0 = _study_params(spec)
    prepared = evolution.prepare_cell(p0)
    dts = [spec.conv_dt / 1.5 ** i for i in range(spec.conv_levels)]
    values = []
    for dt in dts:
        steps = p0.t_end / dt
        if abs(steps - round(steps)) > 1e-6 * steps:
            raise ConfigError("conv_dt", f"t_end / dt = {steps:.6g} is not an "
                              "integer at every level")
        res = evolution.run_two_plates(p0.replace(dt=p0.t_end / round(steps)),
                                       prepared=prepared, kernel_history="none")
        values.append(res.history.sigma_eff[-1, 0, 0])
    diffs = np.abs(np.diff(values))
    return dts, values, diffs, fitted_slope(dts[:-1], diffs)


def _study_params(spec: ExperimentSpec) -> ModelParams:
    p = spec.params
    # only sigma_11 is reported, so the second kernel family is skipped
    return p.replace(g=field_to_voltage(spec.conv_E, p), full_tensor=False,
                     t_end=default_end_time(spec.conv_E))


def validate(spec: ExperimentSpec):
    """Static tensors against the multipole reference, plus the time-zero
    identity of a short run."""
    p = spec.params
    prepared = evolution.prepare_cell(p)
    mesh, system, fact, corr = prepared
    A, A_ins = corr.A, corr.A_insulating
    f = math.pi * p.radius ** 2
    ref = cell_static.perrins_oracle(f, p.sigma_c / p.sigma_e)
    ref_ins = cell_static.perrins_oracle(f, 0.0)
    short = p.replace(t_end=p.dt)
    res = evolution.run_two_plates(short, prepared=prepared, kernel_history="none")
    sigma0_ok = bool(np.array_equal(res.history.sigma_eff[0], A))
    scale = spec.report_sigma_e / p.sigma_e
    rows = [
        ("A", A), ("A_insulating", A_ins),
        ("A11_over_sigma_e", A[0, 0] / p.sigma_e),
        ("A_ins11_over_sigma_e", A_ins[0, 0] / p.sigma_e),
        ("perrins", ref), ("perrins_insulating", ref_ins),
        ("rel_err_A11", A[0, 0] / p.sigma_e / ref - 1.0),
        ("rel_err_A_ins11", A_ins[0, 0] / p.sigma_e / ref_ins - 1.0),
        ("ratio_A11_A_ins11", A[0, 0] / A_ins[0, 0]),
        ("ratio_perrins", ref / ref_ins),
        ("A11_rescaled", A[0, 0] * scale),
        ("A_ins11_rescaled", A_ins[0, 0] * scale),
        ("sigma_eff0_equals_A", float(sigma0_ok)),
    ]
    checks = {
        "A11 vs reference (1e-3)": abs(A[0, 0] / p.sigma_e / ref - 1) < 1e-3,
        "A_ins11 vs reference (1e-3)": abs(A_ins[0, 0] / p.sigma_e / ref_ins - 1) < 1e-3,
        "A symmetric": abs(A[0, 1] - A[1, 0]) <= 1e-10 * abs(A[0, 0]),
        "sigma_eff(0) == A": sigma0_ok,
    }
    return rows, checks


# -- orchestration ---------------------------------------------------------

def _write(out: Path, files: dict[str, str]):
    for name, text in files.items():
        path = out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


def run_experiment(spec: ExperimentSpec) -> int:
    """Run ``spec`` and write its artifacts; returns the exit status."""
    out = Path(spec.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"error: output directory {out} is not writable: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    (out / "FAILED").unlink(missing_ok=True)
    (out / "config_echo.txt").write_text(echo_config(spec))
    try:
        files = _produce(spec)
    except ConfigError as exc:
        return _fail(out, f"configuration error: {exc}", EXIT_CONFIG)
    except (evolution.NumericalFailure, InvariantViolation, AssemblyError,
            MeshError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(out, f"numerical failure: {exc}", EXIT_NUMERIC)
    failed = files.pop("__failed__", None)
    _write(out, files)
    if failed:
        return _fail(out, failed, EXIT_NUMERIC)
    return EXIT_OK


def _fail(out: Path, message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    (out / "FAILED").write_text(message + "\n")
    return code


def _produce(spec: ExperimentSpec) -> dict[str, str]:
    kind = spec.kind
    if kind == "run":
        res = evolution.run_two_plates(
            spec.params, threads=spec.threads,
            kernel_history="B11" if spec.write_kernel else "none")
        files = {"sigma_eff.csv": evolution.sigma_eff_csv(res),
                 "membrane.csv": evolution.membrane_csv(res, spec.membrane_stride)}
        if spec.write_kernel:
            files["kernel.csv"] = evolution.kernel_csv(res)
        return files
    if kind == "sweep_field":
        Es, results = run_sweep(spec)
        rows = [(E, r.params.t_end, r.history.sigma_eff[-1, 0, 0],
                 r.history.Sm_avg[-1]) for E, r in zip(Es, results)]
        files = {"sweep.csv": _csv(["E_field", "t_end", "sigma_eff11_final",
                                    "Sm_avg_final"], rows)}
        for E, r in zip(Es, results):
            files[f"points/E_{E:g}/sigma_eff.csv"] = evolution.sigma_eff_csv(r)
        return files
    if kind in ("convergence_mesh", "convergence_time"):
        if kind == "convergence_mesh":
            sizes, values, diffs, slope = convergence_mesh(spec)
            label, name = "h", "convergence_mesh"
        else:
            sizes, values, diffs, slope = convergence_time(spec)
            label, name = "dt", "convergence_time"
        rows = [(s, v, d if i < len(diffs) else "")
                for i, (s, v, d) in enumerate(zip(sizes, values, list(diffs) + [0]))]
        return {
            f"{name}.csv": _csv([label, "sigma_eff11_T", "difference"], rows),
            f"{name}_fit.csv": _csv(["quantity", "value"], [
                ("slope", slope), ("levels", float(len(sizes)))]),
        }
    rows, checks = validate(spec)
    report = [f"{'PASS' if ok else 'FAIL'}  {name}" for name, ok in checks.items()]
    files = {"validate.csv": cell_static.write_static_csv(rows),
             "validate_report.txt": "\n".join(report) + "\n"}
    if not all(checks.values()):
        files["__failed__"] = "validation checks failed: " + ", ".join(
            n for n, ok in checks.items() if not ok)
    return files


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="eptissue",
        description="Homogenized electroporation of periodic cell tissue.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="key = value configuration file")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one key (repeatable)")
        sp.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        sp.add_argument("--preset", default=None, choices=sorted(PRESETS))
        sp.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (default: ${THREADS_ENV} or 1)")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = parse_config(args.config, args.overrides, SUBCOMMANDS[args.command],
                            args.preset, args.out, args.threads)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run_experiment(spec)


if __name__ == "__main__":
    sys.exit(main())
