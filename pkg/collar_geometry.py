"""
Geometry of a single Keen collar.

The collar around a closed geodesic of length ``delta`` is the band
``|rho| <= R`` with metric ``drho^2 + cosh(rho)^2 dtheta^2``, where the half
width is fixed by ``delta * sinh(R) = EPS1``. Points are addressed by Fermi
coordinates ``(rho, theta)``; the flat chart uses ``y = gd(rho)`` and the
global holomorphic coordinate ``w = exp(2*pi*i*(theta + i*y)/delta)`` is kept
in log space as a :class:`LogComplex`.
"""

import logging
import math
from typing import Any, Dict, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import DomainError
from settings import DEFAULT_SETTINGS, EPS1

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

# Quintic smoothstep cutoff on [1/2, 1]
ETA_D1_BOUND = 3.75
ETA_D2_BOUND = 40.0 / math.sqrt(3.0)

RECOMMENDED_MAX_DELTA = 0.5


class Collar(BaseModel):
    model_config = ConfigDict(frozen=True)

    delta: float = Field(gt=0.0, description="Length of the core geodesic")
    half_width: float = Field(gt=0.0, description="Hyperbolic half width R")
    k_max: int = Field(ge=0, description="Fourier truncation order")

    @model_validator(mode="after")
    def _keen_relation(self) -> "Collar":
        if abs(self.delta * math.sinh(self.half_width) - EPS1) > 1e-12 * EPS1:
            raise ValueError("half_width must satisfy delta*sinh(R) = 8/sqrt(5)")
        return self

    @property
    def y_max(self) -> float:
        return y_of_rho(self.half_width)

    @property
    def frequency(self) -> float:
        """2*pi/delta, the exponent scale of w."""
        return 2.0 * math.pi / self.delta

    def with_k_max(self, k_max: int) -> "Collar":
        return make_collar(self.delta, k_max)


class CollarPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    rho: float
    theta: float = 0.0


class LogComplex(BaseModel):
    """A complex number stored as (natural log of modulus, phase)."""

    model_config = ConfigDict(frozen=True)

    log_modulus: float
    phase: float = 0.0

    @field_validator("log_modulus")
    @classmethod
    def _finite_or_zero(cls, value: float) -> float:
        if math.isnan(value) or value == math.inf:
            raise ValueError("log_modulus must be finite or -inf")
        return value

    @field_validator("phase")
    @classmethod
    def _phase_range(cls, value: float) -> float:
        if not -math.pi < value <= math.pi:
            raise ValueError("phase must lie in (-pi, pi]")
        return value

    @classmethod
    def zero(cls) -> "LogComplex":
        return cls(log_modulus=-math.inf, phase=0.0)

    @classmethod
    def from_complex(cls, value: complex) -> "LogComplex":
        if value == 0:
            return cls.zero()
        return cls(log_modulus=math.log(abs(value)), phase=wrap_phase(math.atan2(value.imag, value.real)))

    def is_zero(self) -> bool:
        return self.log_modulus == -math.inf

    def __mul__(self, other: "LogComplex") -> "LogComplex":
        if self.is_zero() or other.is_zero():
            return LogComplex.zero()
        return LogComplex(log_modulus=self.log_modulus + other.log_modulus,
                          phase=wrap_phase(self.phase + other.phase))

    def power(self, k: int) -> "LogComplex":
        if k == 0:
            return LogComplex(log_modulus=0.0)
        if self.is_zero():
            if k < 0:
                raise DomainError("zero has no negative powers")
            return LogComplex.zero()
        return LogComplex(log_modulus=k * self.log_modulus, phase=wrap_phase(k * self.phase))

    def to_complex(self) -> complex:
        if self.is_zero():
            return 0j
        if self.log_modulus > 709.0:
            raise OverflowError(f"exp({self.log_modulus}) is not representable")
        return complex(math.exp(self.log_modulus) * math.cos(self.phase),
                       math.exp(self.log_modulus) * math.sin(self.phase))


def wrap_phase(phase: ArrayLike) -> ArrayLike:
    """Reduce angles to (-pi, pi]."""
    wrapped = np.pi - np.remainder(np.pi - np.asarray(phase, dtype=float), 2.0 * np.pi)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def make_collar(delta: float, k_max: int = DEFAULT_SETTINGS.k_max) -> Collar:
    if not delta > 0:
        raise DomainError(f"delta must be positive, got {delta}")
    if k_max < 0:
        raise DomainError(f"k_max must be nonnegative, got {k_max}")
    if delta > RECOMMENDED_MAX_DELTA:
        logger.warning("delta=%g exceeds the recommended range delta <= %g", delta, RECOMMENDED_MAX_DELTA)
    return Collar(delta=delta, half_width=math.asinh(EPS1 / delta), k_max=k_max)


def y_of_rho(rho: ArrayLike) -> ArrayLike:
    """Flat coordinate y = 2*arctan(e^rho) - pi/2, written as arctan(sinh rho)."""
    return np.arctan(np.sinh(rho)) if isinstance(rho, np.ndarray) else math.atan(math.sinh(rho))


def rho_of_y(y: ArrayLike) -> ArrayLike:
    if isinstance(y, np.ndarray):
        if np.any(np.abs(y) >= np.pi / 2):
            raise DomainError("y must lie in (-pi/2, pi/2)")
        return np.arcsinh(np.tan(y))
    if abs(y) >= math.pi / 2:
        raise DomainError(f"y must lie in (-pi/2, pi/2), got {y}")
    return math.asinh(math.tan(y))


def reduce_theta(collar: Collar, theta: ArrayLike) -> ArrayLike:
    reduced = np.remainder(theta, collar.delta)
    return float(reduced) if np.ndim(reduced) == 0 else reduced


def make_point(collar: Collar, rho: float, theta: float = 0.0) -> CollarPoint:
    if abs(rho) > collar.half_width * (1.0 + 1e-12):
        raise DomainError(f"rho={rho} lies outside the collar |rho| <= {collar.half_width}")
    return CollarPoint(rho=rho, theta=reduce_theta(collar, theta))


def log_abs_w(collar: Collar, rho: ArrayLike) -> ArrayLike:
    return -collar.frequency * y_of_rho(rho)


def w_phase(collar: Collar, theta: ArrayLike) -> ArrayLike:
    return wrap_phase(2.0 * math.pi * (np.asarray(theta, dtype=float) / collar.delta))


def w_coordinate(collar: Collar, p: CollarPoint) -> LogComplex:
    return LogComplex(log_modulus=float(log_abs_w(collar, p.rho)), phase=float(w_phase(collar, p.theta)))


def log_abs_diff(la: ArrayLike, pa: ArrayLike, lb: ArrayLike, pb: ArrayLike) -> ArrayLike:
    """
    log|a - b| for a = exp(la + i*pa), b = exp(lb + i*pb).

    The larger modulus is factored out so values like e^88 - e^87.9 keep
    their digits; 1 - 2r*cos(t) + r^2 is rewritten as (1-r)^2 + 4r*sin^2(t/2).
    """
    la, pa, lb, pb = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (la, pa, lb, pb)))
    big = np.maximum(la, lb)
    gap = np.minimum(la, lb) - big
    r = np.exp(gap)
    one_minus_r = -np.expm1(gap)
    half_angle = np.sin(0.5 * (pa - pb))
    with np.errstate(divide="ignore"):
        result = big + 0.5 * np.log(one_minus_r ** 2 + 4.0 * r * half_angle ** 2)
    return float(result) if result.ndim == 0 else result


def collar_distance(collar: Collar, p: CollarPoint, q: CollarPoint) -> float:
    return float(distance_to(collar, p.rho, p.theta, q.rho, q.theta))


def distance_to(collar: Collar, rho: ArrayLike, theta: ArrayLike, rho0: float, theta0: float) -> ArrayLike:
    """
    Geodesic distance in Fermi coordinates to the nearest deck translate.

    cosh d = cosh(r1)cosh(r2)cosh(dt) - sinh(r1)sinh(r2), rewritten through
    half-angle sines so small distances stay accurate.
    """
    dt = wrap_phase(2.0 * math.pi * (np.asarray(theta, dtype=float) - theta0) / collar.delta) * collar.delta / (2.0 * math.pi)
    rho = np.asarray(rho, dtype=float)
    half = 2.0 * np.sinh(0.5 * (rho - rho0)) ** 2 + 2.0 * np.cosh(rho) * math.cosh(rho0) * np.sinh(0.5 * dt) ** 2
    return 2.0 * np.arcsinh(np.sqrt(0.5 * half))


def counterexample_rho0(collar: Collar) -> float:
    if collar.delta >= EPS1:
        raise DomainError(f"delta={collar.delta} >= 8/sqrt(5): delta*cosh(rho)^2 = 8/sqrt(5) has no interior solution")
    return -math.acosh(math.sqrt(EPS1 / collar.delta))


def inj_radius_model(collar: Collar, rho: ArrayLike, eps2: Union[float, None] = None) -> ArrayLike:
    """Half the length of the loop through rho; clamped at eps2 when given."""
    value = 0.5 * collar.delta * np.cosh(rho)
    if eps2 is not None:
        value = np.minimum(value, eps2)
    return float(value) if np.ndim(value) == 0 else value


def smoothstep(s: ArrayLike) -> ArrayLike:
    return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)


def cutoff_eta(t: ArrayLike) -> ArrayLike:
    """Cutoff equal to 1 on [0, 1/2] and 0 on [1, inf), C^2 in between."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise DomainError("cutoff_eta is defined for t >= 0")
    return eta_clamped(t)


def eta_clamped(t: ArrayLike) -> ArrayLike:
    """The cutoff extended by 1 to negative arguments."""
    s = np.clip(2.0 * np.asarray(t, dtype=float) - 1.0, 0.0, 1.0)
    value = 1.0 - smoothstep(s)
    return float(value) if np.ndim(value) == 0 else value


def eta_derivatives(t: ArrayLike) -> Dict[str, ArrayLike]:
    """First and second derivatives of :func:`eta_clamped`."""
    s = np.clip(2.0 * np.asarray(t, dtype=float) - 1.0, 0.0, 1.0)
    d1 = -2.0 * 30.0 * s * s * (1.0 - s) ** 2
    d2 = -4.0 * 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s)
    return {"d1": d1, "d2": d2}


def hyperbolic_disk_area(radius: float) -> float:
    if not radius > 0:
        raise DomainError(f"radius must be positive, got {radius}")
    return 4.0 * math.pi * math.sinh(0.5 * radius) ** 2


def collar_area(collar: Collar) -> float:
    return 2.0 * collar.delta * math.sinh(collar.half_width)


def band_constants_report(collar: Collar, eps3: float = DEFAULT_SETTINGS.eps3,
                          eps4: float = DEFAULT_SETTINGS.eps4) -> Dict[str, Any]:
    R = collar.half_width
    if R <= 4.0:
        return {"applicable": False, "half_width": R, "in_window": None}
    log_delta = math.log(collar.delta)
    values: Dict[str, float] = {}
    for label, shift in (("plus", 4.0), ("minus", -4.0)):
        arg = R + shift
        values[f"delta_cosh_{label}"] = math.exp(log_delta + arg + math.log1p(math.exp(-2.0 * arg)) - math.log(2.0))
        values[f"delta_sinh_{label}"] = math.exp(log_delta + arg + math.log(-math.expm1(-2.0 * arg)) - math.log(2.0))
        values[f"delta_exp_{label}"] = math.exp(log_delta + arg)
    in_window = all(eps3 < v < eps4 for v in values.values())
    if not in_window:
        logger.warning("Band constants for delta=%g leave the window (%g, %g)", collar.delta, eps3, eps4)
    return {"applicable": True, "half_width": R, "in_window": in_window, **values}
