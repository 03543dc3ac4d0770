"""
Singular weight functions on the collar.

Three kinds are supported through the ``WeightSpec`` union:

* ``CollarPeak``: phi = 2*eta(|rho| - (R - 3)) * phi3, where
  phi3 = log|w/w0 - 1| - alpha*log|w/w_p0 - 1| has a 2*log(d) singularity
  at x0 = (rho0, 0) and is cut off before it reaches p0.
* ``ThickLog``: phi = 2*eta(d/eps2)*log(d/eps2) around a thick point.
* ``Zero``.

Negative rho0 is handled by reflecting rho -> -rho, which is an isometry of
the collar.
"""

import logging
import math
from typing import Annotated, Any, Dict, Literal, NamedTuple, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from collar_geometry import (
    Collar,
    CollarPoint,
    distance_to,
    eta_clamped,
    eta_derivatives,
    inj_radius_model,
    log_abs_diff,
    log_abs_w,
)
from errors import DomainError, SingularityError
from mode_sections import log_cosh
from settings import DEFAULT_SETTINGS, Settings

logger = logging.getLogger(__name__)

SINGULAR_DISTANCE = 1e-9


class CollarPeak(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["collar_peak"] = "collar_peak"
    rho0: float
    p0_rho: Optional[float] = Field(default=None, description="Auxiliary singular point; defaults to R - 1")


class ThickLog(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["thick_log"] = "thick_log"
    eps2: float = Field(default=DEFAULT_SETTINGS.eps2, gt=0.0)
    center_rho: float = 0.0
    center_theta: float = 0.0


class Zero(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["zero"] = "zero"


WeightSpec = Annotated[Union[CollarPeak, ThickLog, Zero], Field(discriminator="kind")]


class CertificateGrid(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_rho: int = Field(default=200, ge=8)
    n_theta: int = Field(default=64, ge=8)
    n_disk: int = Field(default=64, ge=8)


class _PeakFrame(NamedTuple):
    sign: float
    rho0: float
    p0_rho: float
    lw0: float
    lwp: float
    alpha: float


def alpha_of(rho0: float) -> float:
    return 2.0 * math.atan(math.exp(rho0)) / math.pi


def _peak_frame(collar: Collar, spec: CollarPeak) -> _PeakFrame:
    R = collar.half_width
    if R <= 4.0:
        raise DomainError(f"collar peak weights need R > 4, got R={R:.4f}")
    if abs(spec.rho0) >= R - 4.0:
        raise DomainError(f"|rho0|={abs(spec.rho0):.4f} must be below R-4={R - 4.0:.4f}")
    rho0 = abs(spec.rho0)
    p0_rho = R - 1.0 if spec.p0_rho is None else spec.p0_rho
    if not R - 2.0 < p0_rho <= R:
        raise DomainError(f"p0_rho={p0_rho} must lie in (R-2, R]")
    return _PeakFrame(
        sign=-1.0 if spec.rho0 < 0 else 1.0,
        rho0=rho0,
        p0_rho=p0_rho,
        lw0=float(log_abs_w(collar, rho0)),
        lwp=float(log_abs_w(collar, p0_rho)),
        alpha=alpha_of(rho0),
    )


def _check_singular(collar: Collar, frame: _PeakFrame, rho: np.ndarray, theta: np.ndarray) -> None:
    for center in (frame.rho0, frame.p0_rho):
        d = distance_to(collar, rho, theta, center, 0.0)
        if np.any(d < SINGULAR_DISTANCE):
            raise SingularityError(f"weight evaluated within {SINGULAR_DISTANCE} of the singular point rho={center:.6f}")


def phi_components_grid(collar: Collar, spec: CollarPeak, rho: Any, theta: Any) -> Tuple[np.ndarray, np.ndarray]:
    """(phi1, phi2) = (log|w/w0 - 1|, log|w/w_p0 - 1|) on broadcast arrays."""
    frame = _peak_frame(collar, spec)
    rho, theta = np.broadcast_arrays(np.asarray(rho, dtype=float), np.asarray(theta, dtype=float))
    rho = frame.sign * rho
    _check_singular(collar, frame, rho, theta)
    lw = log_abs_w(collar, rho)
    ph = 2.0 * math.pi * theta / collar.delta
    phi1 = log_abs_diff(lw, ph, frame.lw0, 0.0) - frame.lw0
    phi2 = log_abs_diff(lw, ph, frame.lwp, 0.0) - frame.lwp
    return np.asarray(phi1), np.asarray(phi2)


def phi3_grid(collar: Collar, spec: CollarPeak, rho: Any, theta: Any, alpha: Optional[float] = None) -> np.ndarray:
    phi1, phi2 = phi_components_grid(collar, spec, rho, theta)
    alpha = _peak_frame(collar, spec).alpha if alpha is None else alpha
    return phi1 - alpha * phi2


def phi3(collar: Collar, spec: CollarPeak, p: CollarPoint, alpha: Optional[float] = None) -> float:
    return float(phi3_grid(collar, spec, p.rho, p.theta, alpha))


def phi3_flat(collar: Collar, spec: CollarPeak, theta: Any, y: Any) -> np.ndarray:
    """phi3 in the flat (theta, y) chart, where it is harmonic."""
    frame = _peak_frame(collar, spec)
    lw = -collar.frequency * frame.sign * np.asarray(y, dtype=float)
    ph = 2.0 * math.pi * np.asarray(theta, dtype=float) / collar.delta
    phi1 = log_abs_diff(lw, ph, frame.lw0, 0.0) - frame.lw0
    phi2 = log_abs_diff(lw, ph, frame.lwp, 0.0) - frame.lwp
    return np.asarray(phi1 - frame.alpha * phi2)


def _band_cutoff(collar: Collar, rho: np.ndarray) -> np.ndarray:
    return np.asarray(eta_clamped(np.abs(rho) - (collar.half_width - 3.0)))


def collar_weight_grid(collar: Collar, spec: CollarPeak, rho: Any, theta: Any) -> np.ndarray:
    rho, theta = np.broadcast_arrays(np.asarray(rho, dtype=float), np.asarray(theta, dtype=float))
    out = np.zeros(rho.shape)
    inside = np.abs(rho) < collar.half_width - 2.0
    if np.any(inside):
        out[inside] = 2.0 * _band_cutoff(collar, rho[inside]) * phi3_grid(collar, spec, rho[inside], theta[inside])
    return out


def collar_weight(collar: Collar, spec: CollarPeak, p: CollarPoint) -> float:
    return float(collar_weight_grid(collar, spec, p.rho, p.theta))


def thick_weight(spec: ThickLog, d: Any) -> Any:
    d_arr = np.asarray(d, dtype=float)
    if np.any(d_arr < 0):
        raise DomainError("distance must be nonnegative")
    t = d_arr / spec.eps2
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.where(t >= 1.0, 0.0, 2.0 * np.asarray(eta_clamped(t)) * np.log(t))
    value = np.where(d_arr == 0.0, -np.inf, value)
    return float(value) if value.ndim == 0 else value


def weight_grid(collar: Collar, weight: Union[CollarPeak, ThickLog, Zero], rho: Any, theta: Any) -> np.ndarray:
    """Evaluate any weight kind on broadcast (rho, theta) arrays."""
    rho, theta = np.broadcast_arrays(np.asarray(rho, dtype=float), np.asarray(theta, dtype=float))
    if isinstance(weight, CollarPeak):
        return collar_weight_grid(collar, weight, rho, theta)
    if isinstance(weight, ThickLog):
        return np.asarray(thick_weight(weight, distance_to(collar, rho, theta, weight.center_rho, weight.center_theta)))
    return np.zeros(rho.shape)


def weight_center(collar: Collar, weight: Union[CollarPeak, ThickLog, Zero]) -> Optional[CollarPoint]:
    if isinstance(weight, CollarPeak):
        return CollarPoint(rho=weight.rho0, theta=0.0)
    if isinstance(weight, ThickLog):
        return CollarPoint(rho=weight.center_rho, theta=weight.center_theta)
    return None


def diverges_at_center(weight: Union[CollarPeak, ThickLog, Zero]) -> bool:
    """True when exp(-phi) is not integrable at the center (coefficient of log d is at least 2)."""
    return _singular_coefficient(weight) >= 2.0


def _singular_coefficient(weight: Union[CollarPeak, ThickLog, Zero]) -> float:
    if isinstance(weight, (CollarPeak, ThickLog)):
        return 2.0
    return 0.0


def _inv_one_minus(log_r: np.ndarray, phase_r: np.ndarray) -> np.ndarray:
    """1/(1 - r) for r = exp(log_r + i*phase_r), without overflow."""
    small = log_r <= 0.0
    out = np.empty(np.shape(log_r), dtype=complex)
    r = np.exp(np.where(small, log_r, 0.0) + 1j * phase_r)
    out[small] = 1.0 / (1.0 - r[small])
    s = np.exp(-np.where(small, 0.0, log_r) - 1j * phase_r)
    out[~small] = -s[~small] / (1.0 - s[~small])
    return out


def _log_derivative(collar: Collar, frame: _PeakFrame, lw: np.ndarray, ph: np.ndarray) -> np.ndarray:
    """d/dz of log(w/w0 - 1) - alpha*log(w/w_p0 - 1) in the flat chart z = theta + i*y."""
    k = 2j * math.pi / collar.delta
    return k * (_inv_one_minus(frame.lw0 - lw, -ph) - frame.alpha * _inv_one_minus(frame.lwp - lw, -ph))


def grad_phi_components(collar: Collar, spec: CollarPeak, p: CollarPoint) -> Tuple[float, float]:
    """Hyperbolic gradient norms of phi1 and phi2."""
    frame = _peak_frame(collar, spec)
    rho = frame.sign * p.rho
    _check_singular(collar, frame, np.asarray(rho), np.asarray(p.theta))
    lw = float(log_abs_w(collar, rho))
    ph = 2.0 * math.pi * p.theta / collar.delta
    scale = collar.frequency / math.exp(float(log_cosh(rho)))
    grad1 = scale * math.exp(-(float(log_abs_diff(lw, ph, frame.lw0, 0.0)) - lw))
    grad2 = scale * math.exp(-(float(log_abs_diff(lw, ph, frame.lwp, 0.0)) - lw))
    return grad1, grad2


def _offset_grid(lo: float, hi: float, n: int) -> np.ndarray:
    step = (hi - lo) / n
    return lo + (np.arange(n) + 0.5) * step


def _laplacian_collar_peak(collar: Collar, spec: CollarPeak, rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Hyperbolic Laplacian of 2*eta*phi3; phi3 is harmonic so only cutoff terms survive."""
    frame = _peak_frame(collar, spec)
    R = collar.half_width
    t = np.abs(rho) - (R - 3.0)
    derivs = eta_derivatives(t)
    sgn = np.sign(rho)
    cosh = np.cosh(rho)
    d_eta = derivs["d1"] * sgn * cosh
    dd_eta = derivs["d2"] * cosh ** 2 + derivs["d1"] * sgn * np.sinh(rho) * cosh
    values = phi3_grid(collar, spec, rho, theta)
    # the reflection rho -> -rho flips the sign of y-derivatives
    lw = log_abs_w(collar, frame.sign * rho)
    ph = 2.0 * math.pi * theta / collar.delta
    dy_phi3 = -frame.sign * np.imag(_log_derivative(collar, frame, lw, ph))
    flat = 2.0 * (dd_eta * values + 2.0 * d_eta * dy_phi3)
    return flat / cosh ** 2


def _laplacian_thick(spec: ThickLog, d: np.ndarray) -> np.ndarray:
    """Radial hyperbolic Laplacian f'' + coth(d) f' of 2*eta(d/eps2)*log(d/eps2)."""
    eps = spec.eps2
    t = d / eps
    eta = np.asarray(eta_clamped(t))
    derivs = eta_derivatives(t)
    log_t = np.log(t)
    f1 = (2.0 / eps) * (derivs["d1"] * log_t + eta / t)
    f2 = (2.0 / eps ** 2) * (derivs["d2"] * log_t + 2.0 * derivs["d1"] / t - eta / t ** 2)
    return f2 + f1 / np.tanh(d)


def band_gradient_sup(collar: Collar, spec: CollarPeak, n: int = 64, h: float = 1e-4) -> float:
    """Largest finite-difference gradient of the glued weight over R-3 < |rho| < R-2."""
    R = collar.half_width
    band = _offset_grid(R - 3.0, R - 2.0 - 2 * h, n)
    rho = np.concatenate([band, -band])[:, None]
    theta = _offset_grid(0.0, collar.delta, n)[None, :]
    d_rho = (collar_weight_grid(collar, spec, rho + h, theta) - collar_weight_grid(collar, spec, rho - h, theta)) / (2 * h)
    d_theta = (collar_weight_grid(collar, spec, rho, theta + h) - collar_weight_grid(collar, spec, rho, theta - h)) / (2 * h)
    return float(np.max(np.sqrt(d_rho ** 2 + (d_theta / np.cosh(rho)) ** 2)))


def _disk_samples(collar: Collar, center: CollarPoint, radius: float, n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Points of an offset (rho, theta) grid within geodesic distance radius of center."""
    rho = _offset_grid(center.rho - radius, center.rho + radius, n)
    rho = rho[np.abs(rho) <= collar.half_width]
    theta = _offset_grid(center.theta - collar.delta / 2, center.theta + collar.delta / 2, n)
    rr, tt = np.meshgrid(rho, theta, indexing="ij")
    d = distance_to(collar, rr, tt, center.rho, center.theta)
    keep = (d <= radius) & (d > 0)
    return rr[keep], tt[keep], d[keep]


def weight_certificate(collar: Collar, spec: Union[CollarPeak, ThickLog, Zero],
                       grid: Optional[CertificateGrid] = None,
                       settings: Settings = DEFAULT_SETTINGS) -> Dict[str, Any]:
    grid = grid or CertificateGrid()
    sup_phi = 0.0
    lower_gap = 0.0
    curvature_floor = 0.0
    extra: Dict[str, Any] = {}

    if isinstance(spec, CollarPeak):
        R = collar.half_width
        rho = _offset_grid(-(R - 2.0), R - 2.0, grid.n_rho)[:, None]
        theta = _offset_grid(0.0, collar.delta, grid.n_theta)[None, :]
        rho, theta = np.broadcast_arrays(rho, theta)
        sup_phi = max(0.0, float(np.max(collar_weight_grid(collar, spec, rho, theta))))
        curvature = _laplacian_collar_peak(collar, spec, rho, theta)
        curvature_floor = max(0.0, -float(np.min(curvature)) / (4.0 * math.pi))
        radius = float(inj_radius_model(collar, spec.rho0))
        rr, tt, d = _disk_samples(collar, CollarPoint(rho=spec.rho0), radius, grid.n_disk)
        phi = collar_weight_grid(collar, spec, rr, tt)
        lower_gap = max(0.0, float(np.max(2.0 * np.log(d) - 2.0 * math.pi / radius - phi)))
        extra = {"band_gradient_sup": band_gradient_sup(collar, spec), "inj_radius_x0": radius}
    elif isinstance(spec, ThickLog):
        d = _offset_grid(0.0, spec.eps2, grid.n_rho * grid.n_theta)
        phi = np.asarray(thick_weight(spec, d))
        sup_phi = max(0.0, float(np.max(phi)))
        curvature_floor = max(0.0, -float(np.min(_laplacian_thick(spec, d))) / (4.0 * math.pi))
        radius = min(float(inj_radius_model(collar, spec.center_rho)), spec.eps2)
        near = d <= radius
        lower_gap = max(0.0, float(np.max(2.0 * np.log(d[near]) - 2.0 * math.pi / radius - phi[near])))
        extra = {"inj_radius_x0": radius}

    passed = (sup_phi <= settings.sup_ceiling and lower_gap <= settings.lower_gap_ceiling
              and curvature_floor <= settings.curvature_ceiling)
    if not passed:
        logger.warning("weight certificate failed for %s: sup=%g gap=%g floor=%g",
                       spec.kind, sup_phi, lower_gap, curvature_floor)
    return {
        "kind": spec.kind,
        "sup_phi": sup_phi,
        "lower_gap": lower_gap,
        "curvature_floor": curvature_floor,
        "diverges_at_x0": diverges_at_center(spec),
        "pass": passed,
        **extra,
    }


def lemma_bounds(collar: Collar, spec: CollarPeak, grid: Optional[CertificateGrid] = None,
                 settings: Settings = DEFAULT_SETTINGS) -> Dict[str, Any]:
    """Closed-form and sampled bounds for phi3 away from its singular points."""
    grid = grid or CertificateGrid()
    frame = _peak_frame(collar, spec)
    R = collar.half_width
    closed_form = (4.0 * math.pi / settings.eps3 + math.log(2.0)
                   - math.log(-math.expm1(-2.0 * math.pi / settings.eps4)))

    rho = _offset_grid(-(R - 2.0), R - 2.0, grid.n_rho)[:, None]
    theta = _offset_grid(0.0, collar.delta, grid.n_theta)[None, :]
    rho, theta = np.broadcast_arrays(rho, theta)
    radius = float(inj_radius_model(collar, frame.rho0))
    away = distance_to(collar, frame.sign * rho, theta, frame.rho0, 0.0) >= 0.5 * radius
    values = phi3_grid(collar, spec, rho[away], theta[away])
    empirical = float(np.max(np.abs(values)))

    rr, tt, d = _disk_samples(collar, CollarPoint(rho=spec.rho0), radius, grid.n_disk)
    near = phi3_grid(collar, spec, rr, tt)
    gap = float(np.max(np.log(d) - 4.0 * math.pi / (collar.delta * math.exp(frame.rho0)) - near))
    return {
        "c9_closed_form": closed_form,
        "c9_empirical": empirical,
        "c9_empirical_finite": math.isfinite(empirical),
        "lower_gap": max(0.0, gap),
    }


def inj_radius_bounds_check(collar: Collar, settings: Settings = DEFAULT_SETTINGS, n: int = 201) -> Dict[str, Any]:
    rho = np.linspace(-collar.half_width, collar.half_width, n)
    loop = collar.delta * np.cosh(rho)
    model = np.asarray(inj_radius_model(collar, rho))
    clamped = np.asarray(inj_radius_model(collar, rho, settings.eps2))
    return {
        "eps5": settings.eps5,
        "holds": bool(np.all((settings.eps5 * loop <= model) & (model <= 0.5 * loop))),
        "min_ratio": float(np.min(model / loop)),
        "max_ratio": float(np.max(model / loop)),
        "clamped_min_ratio": float(np.min(clamped / loop)),
        "clamped_holds": bool(np.all(settings.eps5 * loop <= clamped)),
    }
