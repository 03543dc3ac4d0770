"""
Truncated Laurent sections f(w)(dz)^m over a collar.

Amplitudes are always referenced to the core circle (|w| = 1), so w^k is
combined with its coefficient in log space before anything is exponentiated.
Norm integrals run in the flat coordinate y, where the mode integrand is
exp(-(4*pi*k/delta)*y) * cos(y)^(2m-2).
"""

import json
import logging
import math
from functools import lru_cache
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import fft

from collar_geometry import Collar, CollarPoint, LogComplex, log_abs_w, y_of_rho
from errors import AccuracyError, AliasingError, DomainError, OverflowModeError, SectionTypeError
from settings import DEFAULT_SETTINGS, Settings

logger = logging.getLogger(__name__)

OVERFLOW_EXPONENT = 700.0
# Simpson panels stop refining once the two estimates agree to a few ulps
ROUNDING_FLOOR = 8.0 * np.finfo(float).eps


class QuadratureSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    panels: int = Field(default=DEFAULT_SETTINGS.panels, ge=8)
    rel_tol: float = Field(default=DEFAULT_SETTINGS.rel_tol, gt=0.0, lt=1.0)
    max_refine: int = Field(default=DEFAULT_SETTINGS.max_refine, ge=1)

    @classmethod
    def from_settings(cls, settings: Settings) -> "QuadratureSpec":
        return cls(panels=settings.panels, rel_tol=settings.rel_tol, max_refine=settings.max_refine)


class ModeSection(BaseModel):
    """f = sum_k c_k w^k times (dz)^power, amplitudes referenced to the core."""

    model_config = ConfigDict(frozen=True)

    power: int = Field(ge=1)
    coeffs: Dict[int, Any] = Field(default_factory=dict)

    @field_validator("coeffs")
    @classmethod
    def _finite_amplitudes(cls, value: Dict[int, Any]) -> Dict[int, complex]:
        cleaned: Dict[int, complex] = {}
        for k, c in value.items():
            c = complex(c)
            if not (math.isfinite(c.real) and math.isfinite(c.imag)):
                raise ValueError(f"amplitude for mode {k} is not finite")
            cleaned[int(k)] = c
        return dict(sorted(cleaned.items()))

    @property
    def max_mode(self) -> int:
        return max((abs(k) for k in self.coeffs), default=0)

    def nonzero(self) -> Dict[int, complex]:
        return {k: c for k, c in self.coeffs.items() if c != 0}

    def scaled(self, factor: complex) -> "ModeSection":
        return ModeSection(power=self.power, coeffs={k: factor * c for k, c in self.coeffs.items()})

    def plus(self, other: "ModeSection") -> "ModeSection":
        if other.power != self.power:
            raise SectionTypeError(f"cannot add sections of powers {self.power} and {other.power}")
        merged = dict(self.coeffs)
        for k, c in other.coeffs.items():
            merged[k] = merged.get(k, 0j) + c
        return ModeSection(power=self.power, coeffs=merged)

    def to_json(self) -> str:
        payload = {
            "power": self.power,
            "coeffs": [[k, c.real, c.imag] for k, c in self.coeffs.items()],
            "reference": "core",
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModeSection":
        payload = json.loads(text)
        if payload.get("reference", "core") != "core":
            raise DomainError(f"unsupported amplitude reference {payload.get('reference')!r}")
        return cls(power=payload["power"], coeffs={int(k): complex(re, im) for k, re, im in payload["coeffs"]})


def _check_modes(section: ModeSection, collar: Collar) -> None:
    if section.max_mode > collar.k_max:
        raise DomainError(f"section uses mode {section.max_mode} beyond collar k_max={collar.k_max}")


def log_cosh(rho: Any) -> Any:
    rho = np.abs(rho)
    return rho + np.log1p(np.exp(-2.0 * rho)) - math.log(2.0)


def _mode_terms(section: ModeSection, collar: Collar, rho: np.ndarray,
                theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-mode log moduli and phases, stacked along the first axis."""
    lw = log_abs_w(collar, rho)
    ph = 2.0 * math.pi * np.asarray(theta, dtype=float) / collar.delta
    modes = section.nonzero()
    exponents = np.stack([k * lw + math.log(abs(c)) for k, c in modes.items()])
    phases = np.stack([k * ph + math.atan2(c.imag, c.real) for k, c in modes.items()])
    return exponents, phases


def eval_f_grid(section: ModeSection, collar: Collar, rho: Any, theta: Any) -> np.ndarray:
    """Vectorized f(w) on broadcast (rho, theta) arrays."""
    _check_modes(section, collar)
    rho, theta = np.broadcast_arrays(np.asarray(rho, dtype=float), np.asarray(theta, dtype=float))
    if not section.nonzero():
        return np.zeros(rho.shape, dtype=complex)
    exponents, phases = _mode_terms(section, collar, rho, theta)
    worst = float(np.max(exponents))
    if worst > OVERFLOW_EXPONENT:
        offending = list(section.nonzero())[int(np.unravel_index(np.argmax(exponents), exponents.shape)[0])]
        raise OverflowModeError(offending, worst)
    return np.sum(np.exp(exponents + 1j * phases), axis=0)


def eval_f(section: ModeSection, collar: Collar, p: CollarPoint) -> complex:
    return complex(eval_f_grid(section, collar, p.rho, p.theta))


def log_abs_f_grid(section: ModeSection, collar: Collar, rho: Any, theta: Any) -> np.ndarray:
    """log|f| with the largest mode factored out; never overflows."""
    _check_modes(section, collar)
    rho, theta = np.broadcast_arrays(np.asarray(rho, dtype=float), np.asarray(theta, dtype=float))
    if not section.nonzero():
        return np.full(rho.shape, -np.inf)
    exponents, phases = _mode_terms(section, collar, rho, theta)
    top = np.max(exponents, axis=0)
    total = np.sum(np.exp(exponents - top + 1j * phases), axis=0)
    with np.errstate(divide="ignore"):
        return top + np.log(np.abs(total))


def log_pointwise_norm(section: ModeSection, collar: Collar, rho: Any, theta: Any = 0.0) -> np.ndarray:
    """log of |f| cosh(rho)^(-m)."""
    return log_abs_f_grid(section, collar, rho, theta) - section.power * log_cosh(np.asarray(rho, dtype=float))


def pointwise_sq_norm(section: ModeSection, collar: Collar, p: CollarPoint) -> float:
    value = eval_f(section, collar, p)
    if value == 0:
        return 0.0
    return math.exp(2.0 * (math.log(abs(value)) - section.power * float(log_cosh(p.rho))))


def tail_magnitude(section: ModeSection, collar: Collar) -> float:
    tail = [abs(c) for k, c in section.coeffs.items() if abs(k) > collar.k_max / 2]
    return max(tail, default=0.0)


def _simpson(fa: float, fm: float, fb: float, width: float) -> float:
    return width * (fa + 4.0 * fm + fb) / 6.0


def _adaptive_simpson(f, a: float, b: float, fa: float, fm: float, fb: float,
                      whole: float, tol: float, depth: int) -> float:
    m = 0.5 * (a + b)
    flm = f(0.5 * (a + m))
    frm = f(0.5 * (m + b))
    left = _simpson(fa, flm, fm, m - a)
    right = _simpson(fm, frm, fb, b - m)
    delta = left + right - whole
    if abs(delta) <= 15.0 * max(tol, ROUNDING_FLOOR * abs(left + right)):
        return left + right + delta / 15.0
    if depth <= 0:
        raise AccuracyError(f"Simpson refinement did not converge on [{a:.6g}, {b:.6g}]", (whole, left + right))
    return (_adaptive_simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + _adaptive_simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1))


def _breakpoints(y_lo: float, y_hi: float, center: float, scale: float, panels: int) -> List[float]:
    points = set(np.linspace(y_lo, y_hi, panels + 1).tolist())
    points.add(center)
    step = scale
    while step < y_hi - y_lo:
        for candidate in (center - step, center + step):
            if y_lo < candidate < y_hi:
                points.add(candidate)
        step *= 2.0
    return sorted(p for p in points if y_lo <= p <= y_hi)


@lru_cache(maxsize=4096)
def log_mode_integral(delta: float, k: int, m: int, y_lo: float, y_hi: float,
                      panels: int = DEFAULT_SETTINGS.panels, rel_tol: float = DEFAULT_SETTINGS.rel_tol,
                      max_refine: int = DEFAULT_SETTINGS.max_refine) -> float:
    """log of the integral over [y_lo, y_hi] of exp(-(4*pi*k/delta)*y) * cos(y)^(2m-2)."""
    if not y_lo < y_hi:
        raise DomainError(f"empty integration range [{y_lo}, {y_hi}]")
    if k < 0:
        return log_mode_integral(delta, -k, m, -y_hi, -y_lo, panels, rel_tol, max_refine)

    a = 4.0 * math.pi * k / delta
    n2 = 2 * m - 2

    def log_cos(y: float) -> float:
        # offset from the pole keeps full relative precision near |y| = pi/2
        offset = 0.5 * math.pi - abs(y)
        return math.log(math.sin(offset)) if offset > 0 else -math.inf

    def log_g(y: float) -> float:
        if n2 == 0:
            return -a * y
        return -a * y + n2 * log_cos(y)

    candidates = [y_lo, y_hi]
    if n2 > 0:
        y_star = math.atan(-a / n2)
        if y_lo < y_star < y_hi:
            candidates.append(y_star)
    center = max(candidates, key=log_g)
    shift = log_g(center)
    log_cos_center = log_cos(center) if n2 else 0.0

    def g(y: float) -> float:
        # exponent taken relative to the center so a*y never cancels against the shift
        if n2 == 0:
            return math.exp(-a * (y - center))
        return math.exp(-a * (y - center) + n2 * (log_cos(y) - log_cos_center))

    points = _breakpoints(y_lo, y_hi, center, 1.0 / (abs(a) + n2 + 1.0), panels)
    panel_values = []
    for lo, hi in zip(points[:-1], points[1:]):
        fa, fm, fb = g(lo), g(0.5 * (lo + hi)), g(hi)
        panel_values.append((lo, hi, fa, fm, fb, _simpson(fa, fm, fb, hi - lo)))
    estimate = sum(v[-1] for v in panel_values)
    tol = rel_tol * estimate / len(panel_values)
    total = 0.0
    for lo, hi, fa, fm, fb, whole in panel_values:
        total += _adaptive_simpson(g, lo, hi, fa, fm, fb, whole, tol, max_refine)
    if not total > 0:
        raise AccuracyError(f"nonpositive mode integral for k={k}, m={m}", (estimate, total))
    logger.debug("mode integral k=%d m=%d delta=%g over %d panels", k, m, delta, len(panel_values))
    return shift + math.log(total)


def log_mode_weight(collar: Collar, k: int, m: int, rho_lo: float, rho_hi: float,
                    q: Optional[QuadratureSpec] = None) -> float:
    """log of delta * integral |w|^(2k) cosh^(1-2m) drho over [rho_lo, rho_hi]."""
    q = q or QuadratureSpec()
    bound = collar.half_width * (1.0 + 1e-12)
    if not (-bound <= rho_lo < rho_hi <= bound):
        raise DomainError(f"rho range [{rho_lo}, {rho_hi}] is not inside [-R, R]")
    y_lo, y_hi = y_of_rho(rho_lo), y_of_rho(rho_hi)
    return math.log(collar.delta) + log_mode_integral(collar.delta, k, m, y_lo, y_hi,
                                                      q.panels, q.rel_tol, q.max_refine)


def l2_inner(a: ModeSection, b: ModeSection, collar: Collar, rho_lo: Optional[float] = None,
             rho_hi: Optional[float] = None, q: Optional[QuadratureSpec] = None) -> complex:
    if a.power != b.power:
        raise SectionTypeError(f"inner product of powers {a.power} and {b.power}")
    _check_modes(a, collar)
    _check_modes(b, collar)
    rho_lo = -collar.half_width if rho_lo is None else rho_lo
    rho_hi = collar.half_width if rho_hi is None else rho_hi
    total = 0j
    b_modes = b.nonzero()
    for k, ak in a.nonzero().items():
        bk = b_modes.get(k)
        if bk is None:
            continue
        exponent = math.log(abs(ak)) + math.log(abs(bk)) + log_mode_weight(collar, k, a.power, rho_lo, rho_hi, q)
        if exponent > OVERFLOW_EXPONENT:
            raise OverflowModeError(k, exponent)
        total += math.exp(exponent) * (ak / abs(ak)) * (bk / abs(bk)).conjugate()
    return total


def l2_sq_norm(section: ModeSection, collar: Collar, rho_lo: Optional[float] = None,
               rho_hi: Optional[float] = None, q: Optional[QuadratureSpec] = None) -> float:
    return l2_inner(section, section, collar, rho_lo, rho_hi, q).real


def log_l2_sq_norm(section: ModeSection, collar: Collar, q: Optional[QuadratureSpec] = None) -> float:
    terms = [2.0 * math.log(abs(c)) + log_mode_weight(collar, k, section.power, -collar.half_width,
                                                     collar.half_width, q)
             for k, c in section.nonzero().items()]
    if not terms:
        return -math.inf
    top = max(terms)
    return top + math.log(sum(math.exp(t - top) for t in terms))


def propagate_mode(collar: Collar, k: int, rho_from: float, rho_to: float) -> LogComplex:
    """Ratio |w(rho_to)|^k / |w(rho_from)|^k."""
    if k == 0:
        return LogComplex(log_modulus=0.0)
    return LogComplex(log_modulus=-collar.frequency * k * (y_of_rho(rho_to) - y_of_rho(rho_from)))


def decompose_boundary(collar: Collar, A: Mapping[int, complex], B: Mapping[int, complex],
                       band: float, m: int) -> Tuple[ModeSection, ModeSection, ModeSection]:
    """
    Split boundary Fourier data into the three holomorphic pieces.

    ``A`` holds Fourier coefficients on the circle rho = -(R - band) and ``B``
    those on rho = R - band. Positive modes are read from A, negative modes
    and the constant from B, each converted to core-referenced amplitudes.
    """
    if not 0.0 <= band < collar.half_width:
        raise DomainError(f"band must lie in [0, R), got {band}")
    edge = collar.half_width - band
    g1: Dict[int, complex] = {}
    g3: Dict[int, complex] = {}
    for k, c in A.items():
        if k >= 1 and c != 0:
            g1[k] = complex(c) * math.exp(propagate_mode(collar, k, -edge, 0.0).log_modulus)
    for k, c in B.items():
        if k <= -1 and c != 0:
            g3[k] = complex(c) * math.exp(propagate_mode(collar, k, edge, 0.0).log_modulus)
    g2 = {0: complex(B.get(0, 0j))} if B.get(0, 0j) != 0 else {}
    return (ModeSection(power=m, coeffs=g1), ModeSection(power=m, coeffs=g2), ModeSection(power=m, coeffs=g3))


def fourier_boundary(samples: Sequence[complex], collar: Collar) -> Dict[int, complex]:
    values = np.asarray(samples, dtype=complex)
    n = values.shape[0]
    if n < 2 * collar.k_max + 1:
        raise AliasingError(f"{n} samples cannot resolve modes up to k_max={collar.k_max}; need {2 * collar.k_max + 1}")
    spectrum = fft.fft(values) / n
    return {k: complex(spectrum[k % n]) for k in range(-collar.k_max, collar.k_max + 1)}


def boundary_samples(section: ModeSection, collar: Collar, rho: float, n: int) -> np.ndarray:
    theta = np.arange(n) * collar.delta / n
    return eval_f_grid(section, collar, np.full(n, rho), theta)


def contract_grid(S: ModeSection, U: ModeSection, collar: Collar, rho: Any, theta: Any) -> np.ndarray:
    if U.power > S.power:
        raise SectionTypeError(f"cannot contract power {S.power} against larger power {U.power}")
    rho = np.asarray(rho, dtype=float)
    f_s = eval_f_grid(S, collar, rho, theta)
    f_u = eval_f_grid(U, collar, rho, theta)
    return f_s * np.conj(f_u) * np.exp(-2.0 * U.power * log_cosh(rho))


def contract(S: ModeSection, U: ModeSection, collar: Collar, p: CollarPoint) -> complex:
    """Pointwise <S, U> in H^{m1}; the result carries the factor (dz)^(m - m1)."""
    return complex(contract_grid(S, U, collar, p.rho, p.theta))


def multiply(a: ModeSection, b: ModeSection) -> ModeSection:
    """Product in the coordinate ring: powers add, coefficients convolve."""
    coeffs: Dict[int, complex] = {}
    for k, ak in a.nonzero().items():
        for l, bl in b.nonzero().items():
            coeffs[k + l] = coeffs.get(k + l, 0j) + ak * bl
    return ModeSection(power=a.power + b.power, coeffs=coeffs)


def monomial(k: int, m: int, amplitude: complex = 1.0) -> ModeSection:
    return ModeSection(power=m, coeffs={k: amplitude})


def random_section(rng: np.random.Generator, modes: Sequence[int], m: int) -> ModeSection:
    values = rng.normal(size=len(modes)) + 1j * rng.normal(size=len(modes))
    return ModeSection(power=m, coeffs=dict(zip(modes, values.tolist())))


def safe_band(collar: Collar, k_max: int, budget: float = 600.0) -> float:
    """Smallest band whose boundary circles keep |w|^k within exp(budget) for |k| <= k_max."""
    if k_max == 0:
        return 0.0
    y_edge = min(collar.y_max, budget / (collar.frequency * k_max))
    edge = min(collar.half_width, float(np.arcsinh(np.tan(y_edge))))
    return max(0.0, collar.half_width - edge)


def boundary_round_trip(section: ModeSection, collar: Collar, band: Optional[float] = None,
                        n: Optional[int] = None) -> Dict[str, Any]:
    """
    Sample a section on both boundary circles, split the Fourier data with
    :func:`decompose_boundary` and compare g1 + g2 + g3 against the samples.
    """
    k_max = max(section.max_mode, 1)
    band = safe_band(collar, k_max) if band is None else band
    n = n or 4 * k_max + 4
    edge = collar.half_width - band
    left = boundary_samples(section, collar, -edge, n)
    right = boundary_samples(section, collar, edge, n)
    sub = collar.with_k_max(k_max)
    A = {k: c for k, c in fourier_boundary(left, sub).items() if k >= 1}
    B = {k: c for k, c in fourier_boundary(right, sub).items() if k <= 0}
    g1, g2, g3 = decompose_boundary(collar, A, B, band, section.power)
    total = g1.plus(g2).plus(g3)
    scale = max(float(np.max(np.abs(left))), float(np.max(np.abs(right))))
    error = max(float(np.max(np.abs(boundary_samples(total, collar, -edge, n) - left))),
                float(np.max(np.abs(boundary_samples(total, collar, edge, n) - right))))
    return {
        "delta": collar.delta,
        "m": section.power,
        "k_max": k_max,
        "band": band,
        "samples": n,
        "max_abs": scale,
        "relative_error": error / scale if scale > 0 else error,
        "pieces": [g.to_json() for g in (g1, g2, g3)],
    }
