"""
Bergman density of the collar mode space and the three-section counterexample.

The truncated space spanned by w^k (dz)^m, |k| <= k_max, is L2-orthogonal,
so the density at a point is a sum of per-mode terms
|w|^(2k) cosh(rho)^(-2m) / N_k. Every term is assembled as a logarithm and
reduced with logsumexp.
"""

import logging
import math
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.special import beta, logsumexp

from collar_geometry import Collar, CollarPoint, counterexample_rho0, log_abs_w, make_collar
from errors import CollarError, DomainError, OverflowModeError
from mode_sections import (
    OVERFLOW_EXPONENT,
    ModeSection,
    QuadratureSpec,
    decompose_boundary,
    log_cosh,
    log_mode_weight,
    propagate_mode,
)
from settings import EPS1

logger = logging.getLogger(__name__)

DEFAULT_A = {1: 1.0}
DEFAULT_B = {0: 1.0, -1: 1.0}

DENSITY_CSV_FIELDS = ["delta", "m", "k_max", "rho0", "density_x0", "ratio2", "predicted_ratio2", "ratio1", "ratio3"]
COUNTEREXAMPLE_CSV_FIELDS = DENSITY_CSV_FIELDS + ["ratio2_relative_error", "combined_ratio", "combined_bound"]


class DensityRow(BaseModel):
    rho: float
    density: float = Field(gt=0.0)
    dominant_mode_share: float = Field(gt=0.0, le=1.0)


class DensityReport(BaseModel):
    delta: float
    m: int
    k_max: int
    rows: List[DensityRow] = Field(default_factory=list)
    at_x0: Optional[float] = None
    rho0: Optional[float] = None
    ratio1: Optional[float] = None
    ratio2: Optional[float] = None
    ratio3: Optional[float] = None
    predicted_ratio2: Optional[float] = None
    error: Optional[str] = None

    def csv_row(self) -> Dict[str, Any]:
        return {
            "delta": self.delta,
            "m": self.m,
            "k_max": self.k_max,
            "rho0": self.rho0,
            "density_x0": self.at_x0,
            "ratio2": self.ratio2,
            "predicted_ratio2": self.predicted_ratio2,
            "ratio1": self.ratio1,
            "ratio3": self.ratio3,
        }


def log_mode_sq_norm(collar: Collar, k: int, m: int, q: Optional[QuadratureSpec] = None) -> float:
    if abs(k) > collar.k_max:
        raise DomainError(f"mode {k} exceeds k_max={collar.k_max}")
    return log_mode_weight(collar, k, m, -collar.half_width, collar.half_width, q)


def mode_sq_norm(collar: Collar, k: int, m: int, q: Optional[QuadratureSpec] = None) -> float:
    """N_k = delta * integral of |w|^(2k) cosh^(1-2m) over the whole collar."""
    value = log_mode_sq_norm(collar, k, m, q)
    if value > OVERFLOW_EXPONENT:
        raise OverflowModeError(k, value)
    return math.exp(value)


def _log_density_terms(collar: Collar, m: int, rho: float, q: Optional[QuadratureSpec]) -> np.ndarray:
    lw = float(log_abs_w(collar, rho))
    base = -2.0 * m * float(log_cosh(rho))
    return np.array([2.0 * k * lw + base - log_mode_sq_norm(collar, k, m, q)
                     for k in range(-collar.k_max, collar.k_max + 1)])


def density_with_share(collar: Collar, m: int, p: CollarPoint,
                       q: Optional[QuadratureSpec] = None) -> Tuple[float, float]:
    terms = _log_density_terms(collar, m, p.rho, q)
    total = float(logsumexp(terms))
    return math.exp(total), math.exp(float(np.max(terms)) - total)


def density(collar: Collar, m: int, p: CollarPoint, q: Optional[QuadratureSpec] = None) -> float:
    return density_with_share(collar, m, p, q)[0]


def density_profile(collar: Collar, m: int, rhos: Sequence[float],
                    q: Optional[QuadratureSpec] = None) -> List[DensityRow]:
    rows = []
    for rho in rhos:
        value, share = density_with_share(collar, m, CollarPoint(rho=float(rho)), q)
        rows.append(DensityRow(rho=float(rho), density=value, dominant_mode_share=min(share, 1.0)))
    return rows


def counterexample_sections(collar: Collar, m: int, A: Optional[Mapping[int, complex]] = None,
                            B: Optional[Mapping[int, complex]] = None) -> Tuple[ModeSection, ModeSection, ModeSection]:
    A = DEFAULT_A if A is None else A
    B = DEFAULT_B if B is None else B
    _check_split(A, B)
    return decompose_boundary(collar, A, B, 0.0, m)


def _check_split(A: Mapping[int, complex], B: Mapping[int, complex]) -> None:
    bad_a = [k for k, c in A.items() if c != 0 and k < 1]
    bad_b = [k for k, c in B.items() if c != 0 and k > 0]
    if bad_a or bad_b:
        raise DomainError(f"left data must use modes k >= 1 and right data k <= 0; offending {bad_a + bad_b}")


def _log_amplitudes(collar: Collar, A: Mapping[int, complex], B: Mapping[int, complex]) -> List[Dict[int, complex]]:
    """Core-referenced amplitudes of S1, S2, S3 as (log modulus + i*phase)."""
    R = collar.half_width
    pieces: List[Dict[int, complex]] = [{}, {}, {}]
    for k, c in A.items():
        if c != 0:
            pieces[0][k] = complex(math.log(abs(c)) + propagate_mode(collar, k, -R, 0.0).log_modulus,
                                   math.atan2(complex(c).imag, complex(c).real))
    for k, c in B.items():
        if c == 0:
            continue
        slot = 1 if k == 0 else 2
        pieces[slot][k] = complex(math.log(abs(c)) + propagate_mode(collar, k, R, 0.0).log_modulus,
                                  math.atan2(complex(c).imag, complex(c).real))
    return pieces


def _log_point_and_norm(collar: Collar, m: int, log_amps: Dict[int, complex], rho: float,
                        q: Optional[QuadratureSpec]) -> Tuple[float, float]:
    """log ||S||^2 at (rho, 0) and log ||S||^2 over the collar."""
    if not log_amps:
        return -math.inf, -math.inf
    lw = float(log_abs_w(collar, rho))
    ks = list(log_amps)
    point_terms = np.array([log_amps[k] + k * lw for k in ks])
    log_point = 2.0 * (_log_abs_sum(point_terms) - m * float(log_cosh(rho)))
    norm_terms = [2.0 * log_amps[k].real + log_mode_sq_norm(collar, k, m, q) for k in ks]
    return log_point, float(logsumexp(norm_terms))


def _log_abs_sum(terms: np.ndarray) -> float:
    top = float(np.max(terms.real))
    total = np.sum(np.exp(terms.real - top + 1j * terms.imag))
    return top + math.log(abs(total)) if total != 0 else -math.inf


def predicted_ratio2(delta: float, m: int) -> float:
    mu1 = float(beta(0.5, m - 0.5))
    return math.exp((m - 1) * math.log(delta) - math.log(mu1) - m * math.log(EPS1))


def ratio1_envelope_log(delta: float, m: int, rho0: float) -> float:
    return ((2 * m - 1) * math.log(2.0 * EPS1) - 2 * m * math.log(delta)
            - 4.0 * math.pi / (delta * math.cosh(rho0 - 1.0)))


def ratio3_envelope_log(delta: float, m: int) -> float:
    return 2 * m * math.log(2.0 / delta) + math.log(2.0) - math.pi ** 2 / delta


def _safe_exp(value: float) -> float:
    return math.exp(value) if value > -745.0 else 0.0


def counterexample_report(collar: Collar, m: int, q: Optional[QuadratureSpec] = None,
                          A: Optional[Mapping[int, complex]] = None,
                          B: Optional[Mapping[int, complex]] = None) -> Dict[str, Any]:
    A = DEFAULT_A if A is None else A
    B = DEFAULT_B if B is None else B
    _check_split(A, B)
    delta = collar.delta
    rho0 = counterexample_rho0(collar)
    pieces = _log_amplitudes(collar, A, B)

    log_points, log_norms, log_ratios = [], [], []
    for log_amps in pieces:
        log_point, log_norm = _log_point_and_norm(collar, m, log_amps, rho0, q)
        log_points.append(log_point)
        log_norms.append(log_norm)
        log_ratios.append(log_point - log_norm if log_amps else -math.inf)

    merged: Dict[int, complex] = {}
    for log_amps in pieces:
        merged.update(log_amps)
    log_point_all, log_norm_all = _log_point_and_norm(collar, m, merged, rho0, q)
    log_combined = log_point_all - log_norm_all
    log_bound = math.log(3.0) + float(logsumexp(log_points)) - float(logsumexp(log_norms))

    predicted = predicted_ratio2(delta, m)
    env1 = ratio1_envelope_log(delta, m, rho0)
    env3 = ratio3_envelope_log(delta, m)
    report = {
        "delta": delta,
        "m": m,
        "k_max": collar.k_max,
        "rho0": rho0,
        "density_x0": density(collar, m, CollarPoint(rho=rho0), q),
        "ratio1": _safe_exp(log_ratios[0]),
        "ratio2": _safe_exp(log_ratios[1]),
        "ratio3": _safe_exp(log_ratios[2]),
        "log_ratio1": log_ratios[0],
        "log_ratio2": log_ratios[1],
        "log_ratio3": log_ratios[2],
        "predicted_ratio2": predicted,
        "mu1": float(beta(0.5, m - 0.5)),
        "log_envelope1": env1,
        "log_envelope3": env3,
        "ratio1_within_envelope": log_ratios[0] <= env1,
        "ratio3_within_envelope": log_ratios[2] <= env3,
        "combined_ratio": _safe_exp(log_combined),
        "combined_bound": _safe_exp(log_bound),
        "combined_within_bound": log_combined <= log_bound + 1e-12,
    }
    report["ratio2_relative_error"] = abs(report["ratio2"] / predicted - 1.0)
    return report


def partial_estimate_profile(m: int, delta_x: float, D: float) -> float:
    """sqrt(m) / (D * (1 + e^(pi/delta_x) / (sqrt(m) * delta_x^2)))."""
    if m < 1 or not delta_x > 0 or not D > 0:
        raise DomainError(f"profile needs m >= 1, delta_x > 0, D > 0; got {m}, {delta_x}, {D}")
    exponent = math.pi / delta_x - 0.5 * math.log(m) - 2.0 * math.log(delta_x)
    return math.sqrt(m) / D * math.exp(-float(np.logaddexp(0.0, exponent)))


def density_report(collar: Collar, m: int, q: Optional[QuadratureSpec] = None,
                   n_rows: int = 11) -> DensityReport:
    rhos = np.linspace(-collar.half_width, collar.half_width, n_rows)
    counter = counterexample_report(collar, m, q)
    return DensityReport(
        delta=collar.delta,
        m=m,
        k_max=collar.k_max,
        rows=density_profile(collar, m, rhos, q),
        at_x0=counter["density_x0"],
        rho0=counter["rho0"],
        ratio1=counter["ratio1"],
        ratio2=counter["ratio2"],
        ratio3=counter["ratio3"],
        predicted_ratio2=counter["predicted_ratio2"],
    )


def density_scan(deltas: Sequence[float], m: int, k_max: int,
                 q: Optional[QuadratureSpec] = None) -> List[DensityReport]:
    reports = []
    for delta in deltas:
        try:
            if not 0 < delta < EPS1:
                raise DomainError(f"delta={delta} is outside (0, 8/sqrt(5))")
            reports.append(density_report(make_collar(delta, k_max), m, q))
        except (CollarError, ValueError) as e:
            logger.warning("density scan failed at delta=%g: %s", delta, e)
            reports.append(DensityReport(delta=delta, m=m, k_max=k_max, error=str(e)))
    return reports
