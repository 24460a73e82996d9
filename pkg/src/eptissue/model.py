"""Model constants and pointwise membrane nonlinearities.

All quantities are dimensionless unless stated otherwise: time in units of
``T0 = 1 us``, conductivities scaled by ``T0 / (c_m L0)``.  The engine never
converts units; it only requires that a configuration is self-consistent.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np


class ConfigError(ValueError):
    """Invalid or inconsistent configuration value."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class InvariantViolation(ArithmeticError):
    """A state variable left its admissible range during a computation."""


QUADRATURES = ("trapezoid", "rectangle")
CHI_INIT_MODES = ("flux_average", "multiplier")
KERNEL_SOLVERS = ("response", "direct")


@dataclass(frozen=True)
class ModelParams:
    """Physical and numerical constants of one simulation.

    The defaults are the dimensionless values used for the parallel-plate
    experiments (the ``paper2024`` preset).
    """

    sigma_c: float = 4.789e-3
    sigma_e: float = 0.0526
    c_m: float = 1.0
    S_L: float = 2e-4
    S_ir: float = 2.63e4
    tau_ep: float = 1.0
    tau_res: float = 1000.0
    k_ep: float = 40.0          # 1/V
    V_rev: float = 1.5          # V
    radius: float = 0.25
    g: float = 0.0
    L: float = 1.0
    ell: float = 2e-4           # m, cell size
    L0: float = 1e-2            # m, sample size
    t_end: float = 100.0        # us
    dt: float = 1.0 / 6.0       # us
    mesh_h: float = 0.01
    trunc_M: float | None = None
    x_init: float = 0.0
    v_init: str = "0"
    # numerics
    quadrature: str = "trapezoid"
    chi_init: str = "flux_average"
    kernel_solver: str = "response"
    full_tensor: bool = True

    def __post_init__(self):
        for name in ("sigma_c", "sigma_e", "c_m", "tau_ep", "tau_res",
                     "radius", "mesh_h", "dt", "L", "ell", "L0"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(name, f"must be finite and > 0, got {value!r}")
        for name in ("S_L", "S_ir", "k_ep", "V_rev", "g", "t_end", "x_init"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(name, "must be finite")
        if self.S_L < 0:
            raise ConfigError("S_L", "must be >= 0")
        if self.S_ir < self.S_L:
            raise ConfigError("S_ir", "must be >= S_L")
        if self.tau_ep > self.tau_res:
            raise ConfigError("tau_ep", "must satisfy tau_ep <= tau_res")
        if self.k_ep < 0:
            raise ConfigError("k_ep", "must be >= 0")
        if not 0.0 <= self.x_init <= 1.0:
            raise ConfigError("x_init", "must lie in [0, 1]")
        if not 0.0 < self.radius < 0.5:
            raise ConfigError("radius", "must lie in (0, 0.5)")
        if self.t_end < self.dt:
            raise ConfigError("t_end", "must be >= dt")
        if self.trunc_M is not None and not self.trunc_M > 0:
            raise ConfigError("trunc_M", "must be > 0 when given")
        if self.quadrature not in QUADRATURES:
            raise ConfigError("quadrature", f"must be one of {QUADRATURES}")
        if self.chi_init not in CHI_INIT_MODES:
            raise ConfigError("chi_init", f"must be one of {CHI_INIT_MODES}")
        if self.kernel_solver not in KERNEL_SOLVERS:
            raise ConfigError("kernel_solver", f"must be one of {KERNEL_SOLVERS}")
        parse_v_init(self.v_init)

    @property
    def n_steps(self) -> int:
        """Number of time steps, ``round(t_end / dt)``."""
        return max(1, int(round(self.t_end / self.dt)))

    @property
    def E_field(self) -> float:
        """Applied field magnitude in V/cm corresponding to ``g``."""
        return voltage_to_field(self.g, self)

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)


PRESETS: dict[str, dict[str, Any]] = {
    # dimensionless Table-1 values, r = 0.25, k_ep = 40 1/V, V_rev = 1.5 V
    "paper2024": {},
}


def preset(name: str) -> ModelParams:
    try:
        overrides = PRESETS[name]
    except KeyError:
        raise ConfigError("preset", f"unknown preset {name!r}; "
                          f"available: {sorted(PRESETS)}") from None
    return ModelParams(**overrides)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ModelParams)}


def _coerce(key: str, raw: Any) -> Any:
    kind = _FIELD_TYPES[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "float":
            return _parse_float(text)
        if kind == "float | None":
            if text.lower() in ("", "none"):
                return None
            return _parse_float(text)
        if kind == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind}") from None
    return text


def _parse_float(text: str) -> float:
    # allow simple fractions such as dt = 1/6
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def params_from_mapping(values: Mapping[str, Any],
                        base: ModelParams | None = None) -> ModelParams:
    """Build validated parameters from ``key -> value`` pairs.

    String values are coerced to the field type; unknown keys raise
    :class:`ConfigError`.
    """
    base = base if base is not None else ModelParams()
    changes = {}
    for key, raw in values.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(key, "unknown parameter")
        changes[key] = _coerce(key, raw)
    return base.replace(**changes)


def params_to_mapping(p: ModelParams) -> dict[str, str]:
    """Flat ``key -> text`` view, round-trippable through
    :func:`params_from_mapping`."""
    out = {}
    for f in dataclasses.fields(p):
        value = getattr(p, f.name)
        if value is None:
            out[f.name] = "none"
        elif isinstance(value, bool):
            out[f.name] = "true" if value else "false"
        elif isinstance(value, float):
            out[f.name] = repr(value)
        else:
            out[f.name] = str(value)
    return out


def parse_v_init(spec: str) -> tuple[str, float]:
    """Decode the initial membrane jump.

    ``"c"`` (a number) is the constant jump ``c``; ``"cos:a"`` is
    ``a * cos(theta)`` around the interface.
    """
    text = str(spec).strip().lower()
    try:
        if text.startswith("cos:"):
            return "cos", float(text[4:])
        return "const", float(text)
    except ValueError:
        raise ConfigError("v_init", f"expected a number or 'cos:<amplitude>', "
                          f"got {spec!r}") from None


def initial_jump(p: ModelParams, theta: np.ndarray) -> np.ndarray:
    kind, amplitude = parse_v_init(p.v_init)
    if kind == "cos":
        return amplitude * np.cos(theta)
    return np.full(np.shape(theta), amplitude, dtype=float)


def _check_finite(v):
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("membrane voltage must be finite")
    return v


def _check_poration(X):
    X = np.asarray(X, dtype=float)
    if np.any(X < 0.0) or np.any(X > 1.0) or not np.all(np.isfinite(X)):
        raise InvariantViolation("poration degree outside [0, 1]")
    return X


def beta(v, p: ModelParams):
    """Sigmoid poration target ``(1 + tanh(k_ep (|v| - V_rev))) / 2``."""
    v = _check_finite(v)
    return 0.5 * (1.0 + np.tanh(p.k_ep * (np.abs(v) - p.V_rev)))


def membrane_conductivity(X, p: ModelParams):
    """Surface conductivity ``S_L + X (S_ir - S_L)``."""
    X = _check_poration(X)
    return p.S_L + X * (p.S_ir - p.S_L)


def poration_rhs(v, X, p: ModelParams):
    """Right-hand side of the poration ODE.

    Poration (``beta >= X``) relaxes with ``tau_ep``, resealing with
    ``tau_res``; this is the larger of the two candidate rates because
    ``tau_ep <= tau_res``.
    """
    X = _check_poration(X)
    drive = beta(v, p) - X
    return np.maximum(drive / p.tau_ep, drive / p.tau_res)


def poration_rate(b, X, p: ModelParams):
    """Relaxation rate ``1/tau_ep`` where ``b >= X`` and ``1/tau_res``
    elsewhere."""
    return np.where(np.asarray(b) >= np.asarray(X), 1.0 / p.tau_ep,
                    1.0 / p.tau_res)


def truncated_membrane_current(v, X, p: ModelParams):
    """Membrane current ``S_L v + (S_ir - S_L) X T_M(v)``.

    With ``trunc_M`` unset the clamp is disabled and the result equals
    ``S_m(X) v``.
    """
    v = _check_finite(v)
    X = _check_poration(X)
    s0, s1 = p.S_L, p.S_ir - p.S_L
    if p.trunc_M is None:
        clamped = v
    else:
        clamped = np.clip(v, -p.trunc_M, p.trunc_M)
    return s0 * v + s1 * X * clamped


def truncation_active(p: ModelParams) -> bool:
    return p.trunc_M is not None


def voltage_to_field(g, p: ModelParams):
    """Field magnitude in V/cm for boundary data ``g`` (``|E| = g / ell``)."""
    return np.asarray(g, dtype=float) / p.ell / 100.0 if np.ndim(g) else \
        float(g) / p.ell / 100.0


def field_to_voltage(E, p: ModelParams):
    """Boundary data ``g`` producing a field of ``E`` V/cm."""
    return np.asarray(E, dtype=float) * 100.0 * p.ell if np.ndim(E) else \
        float(E) * 100.0 * p.ell


# |E| [V/cm] -> final time [us] used for the field sweep
END_TIMES = {
    0.0: 200.0, 250.0: 200.0, 500.0: 100.0, 1000.0: 50.0, 1250.0: 50.0,
    1500.0: 30.0, 2000.0: 30.0, 2500.0: 20.0, 3750.0: 20.0, 5000.0: 10.0,
}


def default_end_time(E: float) -> float:
    """End time for field ``E``; fields between table entries take the
    value of the nearest lower entry."""
    if E < 0:
        raise ConfigError("E_field", "must be >= 0")
    keys = sorted(END_TIMES)
    chosen = keys[0]
    for k in keys:
        if k <= E + 1e-9:
            chosen = k
    return END_TIMES[chosen]
