"""
Mode-wise d-bar solver on the collar.

A K^m-valued function is stored as samples g_k(y) of its Fourier modes on a
uniform y-grid, u = sum_k g_k(y) exp(2*pi*i*k*theta/delta). In the chart
z = theta + i*y the operator acts per mode as (i/2)(g' + a*g), a = 2*pi*k/delta.
Differences are exponentially fitted: they act on exp(a*y)*g, so samples of
holomorphic modes are annihilated exactly.
"""

import logging
import math
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.linalg import cho_factor, cho_solve
from scipy.signal import lfilter
from scipy.special import logsumexp

from bergman_density import density, log_mode_sq_norm, partial_estimate_profile
from collar_geometry import (
    Collar,
    CollarPoint,
    collar_area,
    distance_to,
    eta_clamped,
    inj_radius_model,
    rho_of_y,
    y_of_rho,
)
from errors import AliasingError, ConditioningError, DomainError, OverflowModeError
from mode_sections import OVERFLOW_EXPONENT, ModeSection, QuadratureSpec, log_cosh
from settings import DEFAULT_SETTINGS, Settings
from weights import CollarPeak, ThickLog, Zero, diverges_at_center, weight_center, weight_grid

logger = logging.getLogger(__name__)

MAX_FITTED_STEP = 250.0

AnyWeight = Union[CollarPeak, ThickLog, Zero]


class DbarGrid(BaseModel):
    model_config = ConfigDict(frozen=True)

    y_lo: float
    y_hi: float
    n: int = Field(ge=16)

    @model_validator(mode="after")
    def _ordered(self) -> "DbarGrid":
        if not -math.pi / 2 < self.y_lo < self.y_hi < math.pi / 2:
            raise ValueError("grid must satisfy -pi/2 < y_lo < y_hi < pi/2")
        return self

    @classmethod
    def collar_grid(cls, collar: Collar, n: int) -> "DbarGrid":
        return cls(y_lo=-collar.y_max, y_hi=collar.y_max, n=n)

    @property
    def h(self) -> float:
        return (self.y_hi - self.y_lo) / (self.n - 1)

    @property
    def y(self) -> np.ndarray:
        return np.linspace(self.y_lo, self.y_hi, self.n)

    @property
    def trapezoid(self) -> np.ndarray:
        weights = np.full(self.n, self.h)
        weights[0] = weights[-1] = 0.5 * self.h
        return weights


def _validate_modes(modes: Mapping[int, Any], grid: DbarGrid) -> Dict[int, np.ndarray]:
    cleaned = {}
    for k, values in sorted(modes.items()):
        arr = np.asarray(values, dtype=complex)
        if arr.shape != (grid.n,):
            raise ValueError(f"mode {k} has {arr.shape} samples, grid expects ({grid.n},)")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"mode {k} has non-finite samples")
        cleaned[int(k)] = arr
    return cleaned


class DbarRhs(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    power: int = Field(ge=1)
    modes: Dict[int, Any]
    grid: DbarGrid

    @model_validator(mode="after")
    def _match_grid(self) -> "DbarRhs":
        self.modes = _validate_modes(self.modes, self.grid)
        return self

    def support(self) -> Dict[int, Optional[Tuple[float, float]]]:
        y = self.grid.y
        spans: Dict[int, Optional[Tuple[float, float]]] = {}
        for k, values in self.modes.items():
            nz = np.nonzero(np.abs(values) > 0)[0]
            spans[k] = (float(y[nz[0]]), float(y[nz[-1]])) if nz.size else None
        return spans

    def scaled(self, factor: complex) -> "DbarRhs":
        return DbarRhs(power=self.power, modes={k: factor * v for k, v in self.modes.items()}, grid=self.grid)


class DbarSolution(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    power: int = Field(ge=1)
    modes: Dict[int, Any]
    grid: DbarGrid
    weighted_sq_norm: float = Field(ge=0.0)
    rhs_weighted_sq_norm: float = Field(ge=0.0)
    gram_condition: float = 1.0
    constrained_at: Optional[Tuple[float, float]] = None
    # coefficients of the holomorphic part removed by the projection, in the
    # normalized basis h_l = exp(-a_l*y - kernel_log_norms[l])
    kernel: Dict[int, Any] = Field(default_factory=dict)
    free_kernel: Dict[int, Any] = Field(default_factory=dict)
    kernel_log_norms: Dict[int, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _match_grid(self) -> "DbarSolution":
        self.modes = _validate_modes(self.modes, self.grid)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "grid": self.grid.model_dump(),
            "power": self.power,
            "weighted_sq_norm": self.weighted_sq_norm,
            "rhs_weighted_sq_norm": self.rhs_weighted_sq_norm,
            "gram_condition": self.gram_condition,
            "modes": {str(k): {"re": v.real.tolist(), "im": v.imag.tolist()} for k, v in self.modes.items()},
        }


def mode_rate(collar: Collar, k: int) -> float:
    return 2.0 * math.pi * k / collar.delta


def section_samples(section: ModeSection, collar: Collar, grid: DbarGrid) -> Dict[int, np.ndarray]:
    """Samples c_k * exp(-a_k * y) of a holomorphic section."""
    y = grid.y
    out = {}
    for k, c in section.nonzero().items():
        exponent = math.log(abs(c)) - mode_rate(collar, k) * y
        if float(np.max(exponent)) > OVERFLOW_EXPONENT:
            raise OverflowModeError(k, float(np.max(exponent)))
        out[k] = np.exp(exponent) * (c / abs(c))
    return out


def centered_theta(collar: Collar, n_theta: int) -> np.ndarray:
    """Offset theta grid on (-delta/2, delta/2) that never contains theta = 0."""
    return (np.arange(n_theta) + 0.5) * collar.delta / n_theta - 0.5 * collar.delta


def modes_from_grid(values: np.ndarray, theta: np.ndarray, collar: Collar, k_max: int) -> Dict[int, np.ndarray]:
    """Fourier modes |k| <= k_max of samples on a (theta, y) grid."""
    n_theta = theta.shape[0]
    if n_theta < 2 * k_max + 1:
        raise AliasingError(f"{n_theta} theta samples cannot resolve modes up to {k_max}")
    ks = np.arange(-k_max, k_max + 1)
    basis = np.exp(-2j * math.pi * np.outer(ks, theta) / collar.delta) / n_theta
    coeffs = basis @ values
    return {int(k): coeffs[i] for i, k in enumerate(ks)}


def modes_to_grid(modes: Mapping[int, np.ndarray], theta: np.ndarray, collar: Collar) -> np.ndarray:
    ks = np.array(sorted(modes))
    basis = np.exp(2j * math.pi * np.outer(theta, ks) / collar.delta)
    return basis @ np.stack([modes[k] for k in ks])


def apply_dbar(samples: Mapping[int, Any], collar: Collar, m: int, grid: DbarGrid) -> DbarRhs:
    h = grid.h
    out: Dict[int, np.ndarray] = {}
    for k, values in samples.items():
        g = np.asarray(values, dtype=complex)
        if g.shape != (grid.n,):
            raise DomainError(f"mode {k} has {g.shape[0]} samples, grid has {grid.n}")
        ah = mode_rate(collar, k) * h
        if abs(ah) > MAX_FITTED_STEP:
            raise DomainError(f"mode {k} needs a finer grid: |a|h = {abs(ah):.1f}")
        up, down = math.exp(ah), math.exp(-ah)
        v = np.empty_like(g)
        v[1:-1] = (up * g[2:] - down * g[:-2]) / (2.0 * h)
        v[0] = (-3.0 * g[0] + 4.0 * up * g[1] - up * up * g[2]) / (2.0 * h)
        v[-1] = (3.0 * g[-1] - 4.0 * down * g[-2] + down * down * g[-3]) / (2.0 * h)
        out[k] = 0.5j * v
    return DbarRhs(power=m, modes=out, grid=grid)


def _integrate_mode(f: np.ndarray, a: float, h: float) -> np.ndarray:
    """Trapezoidal integrating-factor solution of g' + a*g = f, run in the decaying direction."""
    steps = np.arange(f.shape[0])
    if a >= 0:
        decay = math.exp(-a * h)
        g = lfilter([0.5 * h, 0.5 * h * decay], [1.0, -decay], f)
        return g - 0.5 * h * f[0] * np.exp(-a * h * steps)
    decay = math.exp(a * h)
    r = f[::-1]
    g = lfilter([-0.5 * h, -0.5 * h * decay], [1.0, -decay], r)
    g = g + 0.5 * h * r[0] * np.exp(a * h * steps)
    return g[::-1]


class WeightedModeSpace:
    """
    Normalized holomorphic modes |l| <= k_max under the weighted inner product
    sum over theta and y of u * conj(v) * cos(y)^(2m-2) * exp(-phi).
    """

    def __init__(self, collar: Collar, grid: DbarGrid, m: int, weight: AnyWeight,
                 k_max: int, n_theta: int, extra_log_cos: int = 0):
        self.collar = collar
        self.grid = grid
        self.m = m
        self.weight = weight
        self.k_max = k_max
        self.coupled = not isinstance(weight, Zero)
        self.theta = centered_theta(collar, n_theta)
        self.ks = list(range(-k_max, k_max + 1))
        y = grid.y
        self.log_tw = np.log(grid.trapezoid)
        log_cos = (2 * m - 2 + extra_log_cos) * np.log(np.cos(y))
        if self.coupled:
            if n_theta < 2 * k_max + 1:
                raise AliasingError(f"n_theta={n_theta} cannot resolve modes up to {k_max}")
            phi = weight_grid(collar, weight, rho_of_y(y)[None, :], self.theta[:, None])
            self.log_w = log_cos[None, :] - phi
            self.top = np.max(self.log_w, axis=0)
            self.scaled = np.exp(self.log_w - self.top)
            total = self.scaled.sum(axis=0)
            self.log_w0 = math.log(collar.delta / n_theta) + self.top + np.log(total)
            self._total = total
        else:
            self.log_w0 = math.log(collar.delta) + log_cos
        self.log_h = {}
        self.log_norm = {}
        for l in self.ks:
            exponent = -mode_rate(collar, l) * y
            ell = 0.5 * float(logsumexp(2.0 * exponent + self.log_w0 + self.log_tw))
            self.log_h[l] = exponent - ell
            self.log_norm[l] = ell

    def ratio(self, q: int) -> np.ndarray:
        phase = np.exp(2j * math.pi * q * self.theta / self.collar.delta)
        return (phase @ self.scaled) / self._total

    def gram(self) -> np.ndarray:
        size = len(self.ks)
        if not self.coupled:
            return np.eye(size, dtype=complex)
        ratios = {q: self.ratio(q) for q in range(-2 * self.k_max, 2 * self.k_max + 1)}
        G = np.empty((size, size), dtype=complex)
        for j, kj in enumerate(self.ks):
            for i, kl in enumerate(self.ks):
                base = np.exp(self.log_h[kl] + self.log_h[kj] + self.log_w0 + self.log_tw)
                G[j, i] = np.sum(base * ratios[kl - kj])
        return 0.5 * (G + G.conj().T)

    def inner_with_basis(self, modes: Mapping[int, np.ndarray]) -> np.ndarray:
        """<u, h_j e^(i j theta')> for every retained mode j."""
        if not self.coupled:
            return np.array([np.sum(modes[j] * np.exp(self.log_h[j] + self.log_w0 + self.log_tw))
                             if j in modes else 0j for j in self.ks])
        values = modes_to_grid(modes, self.theta, self.collar) * self.scaled
        n_theta = self.theta.shape[0]
        out = np.empty(len(self.ks), dtype=complex)
        for j, kj in enumerate(self.ks):
            phase = np.exp(-2j * math.pi * kj * self.theta / self.collar.delta)
            profile = phase @ values
            out[j] = np.sum(profile * np.exp(self.log_h[kj] + self.top + math.log(self.collar.delta / n_theta)
                                             + self.log_tw))
        return out

    def sq_norm(self, modes: Mapping[int, np.ndarray]) -> float:
        if not modes:
            return 0.0
        if not self.coupled:
            return float(sum(np.sum(np.abs(v) ** 2 * np.exp(self.log_w0 + self.log_tw)) for v in modes.values()))
        values = modes_to_grid(modes, self.theta, self.collar)
        n_theta = self.theta.shape[0]
        density = np.abs(values) ** 2 * np.exp(self.log_w + self.log_tw[None, :])
        return float(np.sum(density) * self.collar.delta / n_theta)

    def basis_at(self, y0: float, theta0: float) -> np.ndarray:
        return np.array([math.exp(-mode_rate(self.collar, l) * y0 - self.log_norm[l])
                         * np.exp(2j * math.pi * l * theta0 / self.collar.delta) for l in self.ks])


def _interp(values: np.ndarray, grid: DbarGrid, y0: float, a: float = 0.0) -> complex:
    """Linear interpolation of exp(a*y)*g, exact on samples of exp(-a*y)."""
    pos = (y0 - grid.y_lo) / grid.h
    j = int(min(max(math.floor(pos), 0), grid.n - 2))
    frac = pos - j
    ah = a * grid.h
    return complex((1.0 - frac) * math.exp(-ah * frac) * values[j]
                   + frac * math.exp(ah * (1.0 - frac)) * values[j + 1])


def evaluate_modes_at(modes: Mapping[int, np.ndarray], collar: Collar, grid: DbarGrid, p: CollarPoint) -> complex:
    y0 = y_of_rho(p.rho)
    return sum((_interp(v, grid, y0, mode_rate(collar, k)) * np.exp(2j * math.pi * k * p.theta / collar.delta)
                for k, v in modes.items()), 0j)


def _kernel_log_terms(solution: DbarSolution, collar: Collar, free: bool) -> Dict[int, Tuple[float, complex]]:
    coeffs = solution.free_kernel if free else solution.kernel
    return {l: (math.log(abs(c)) - solution.kernel_log_norms[l], c / abs(c))
            for l, c in coeffs.items() if c != 0}


def kernel_value(solution: DbarSolution, collar: Collar, p: CollarPoint, free: bool = False) -> complex:
    """Exact value at p of sum_l c_l h_l, the holomorphic part removed by the projection."""
    y0 = y_of_rho(p.rho)
    terms = _kernel_log_terms(solution, collar, free)
    if not terms:
        return 0j
    logs = np.array([lc - mode_rate(collar, l) * y0 for l, (lc, _) in terms.items()])
    phases = np.array([ph * np.exp(2j * math.pi * l * p.theta / collar.delta) for l, (_, ph) in terms.items()])
    top = float(np.max(logs))
    return complex(math.exp(top) * np.sum(np.exp(logs - top) * phases))


def kernel_log_sq_norm(solution: DbarSolution, collar: Collar, q: Optional[QuadratureSpec] = None,
                       free: bool = False) -> float:
    """log of the unweighted L2 norm squared of sum_l c_l h_l; distinct modes are orthogonal."""
    terms = _kernel_log_terms(solution, collar, free)
    if not terms:
        return -math.inf
    wide = collar.with_k_max(max(abs(l) for l in terms))
    return float(logsumexp([2.0 * lc + log_mode_sq_norm(wide, l, solution.power, q) for l, (lc, _) in terms.items()]))


def kernel_section(solution: DbarSolution, collar: Collar, free: bool = False) -> ModeSection:
    """sum_l c_l h_l as a section; coefficients below the double range are dropped."""
    coeffs = {}
    for l, (lc, phase) in _kernel_log_terms(solution, collar, free).items():
        if lc > OVERFLOW_EXPONENT:
            raise OverflowModeError(l, lc)
        magnitude = math.exp(lc)
        if magnitude > 0:
            coeffs[l] = magnitude * phase
    return ModeSection(power=solution.power, coeffs=coeffs)


def _factor_gram(G: np.ndarray, limit: float) -> Tuple[Any, np.ndarray, float]:
    scale = 1.0 / np.sqrt(np.real(np.diag(G)))
    Gs = scale[:, None] * G * scale[None, :]
    condition = float(np.linalg.cond(Gs))
    if condition > limit:
        raise ConditioningError("weighted Gram matrix of holomorphic modes is ill-conditioned", condition)
    factor = cho_factor(Gs)
    return factor, scale, condition


def _gram_apply(factor: Any, scale: np.ndarray, b: np.ndarray) -> np.ndarray:
    return scale * cho_solve(factor, scale * b)


def solve_dbar(rhs: DbarRhs, collar: Collar, weight: Optional[AnyWeight] = None,
               q: Optional[QuadratureSpec] = None, settings: Settings = DEFAULT_SETTINGS,
               k_max: Optional[int] = None, n_theta: int = 64) -> DbarSolution:
    """
    Minimal weighted-norm solution of dbar u = v.

    Each mode is integrated from the side where its integrating factor
    decays; the result is then made orthogonal to the normalized holomorphic
    modes |k| <= k_max. Weights that diverge at their center also force
    u(center) = 0.
    """
    weight = weight or Zero()
    k_max = collar.k_max if k_max is None else k_max
    grid = rhs.grid
    h = grid.h
    modes: Dict[int, np.ndarray] = {}
    for k, v in rhs.modes.items():
        modes[k] = _integrate_mode(-2j * v, mode_rate(collar, k), h)
    for l in range(-k_max, k_max + 1):
        modes.setdefault(l, np.zeros(grid.n, dtype=complex))

    top_mode = max(abs(k) for k in modes)
    if not isinstance(weight, Zero) and n_theta < 2 * top_mode + 1:
        raise AliasingError(f"n_theta={n_theta} cannot resolve solution modes up to {top_mode}")

    space = WeightedModeSpace(collar, grid, rhs.power, weight, k_max, n_theta)
    condition = 1.0
    constrained_at = None
    if space.coupled:
        G = space.gram()
        factor, scale, condition = _factor_gram(G, settings.gram_condition_max)
        logger.debug("weighted Gram of size %d, scaled condition %.3e", len(space.ks), condition)
        s = space.inner_with_basis(modes)
        c = _gram_apply(factor, scale, s)
        free = c.copy()
        center = weight_center(collar, weight)
        if center is not None and diverges_at_center(weight):
            y0 = y_of_rho(center.rho)
            basis = space.basis_at(y0, center.theta)
            target = evaluate_modes_at(modes, collar, grid, center)
            correction = _gram_apply(factor, scale, np.conj(basis))
            nu = (target - basis @ c) / (basis @ correction)
            c = c + nu * correction
            constrained_at = (center.rho, center.theta)
        for i, l in enumerate(space.ks):
            modes[l] = modes[l] - c[i] * np.exp(space.log_h[l])
    else:
        c = np.zeros(len(space.ks), dtype=complex)
        for _ in range(2):
            s = space.inner_with_basis(modes)
            c = c + s
            for i, l in enumerate(space.ks):
                modes[l] = modes[l] - s[i] * np.exp(space.log_h[l])
        free = c

    rhs_space = WeightedModeSpace(collar, grid, rhs.power, weight, 0, n_theta, extra_log_cos=2) \
        if not space.coupled else space
    rhs_norm = _rhs_sq_norm(rhs, space, rhs_space)
    return DbarSolution(
        power=rhs.power,
        modes=modes,
        grid=grid,
        weighted_sq_norm=space.sq_norm(modes),
        rhs_weighted_sq_norm=rhs_norm,
        gram_condition=condition,
        constrained_at=constrained_at,
        kernel={l: complex(c[i]) for i, l in enumerate(space.ks)},
        free_kernel={l: complex(free[i]) for i, l in enumerate(space.ks)},
        kernel_log_norms=dict(space.log_norm),
    )


def _rhs_sq_norm(rhs: DbarRhs, space: WeightedModeSpace, rhs_space: WeightedModeSpace) -> float:
    """(0,1)-form norm: |v|^2 cos(y)^(2m) exp(-phi)."""
    if not rhs.modes:
        return 0.0
    if space.coupled:
        values = modes_to_grid(rhs.modes, space.theta, space.collar)
        cos2 = np.cos(space.grid.y) ** 2
        density = np.abs(values) ** 2 * np.exp(space.log_w + space.log_tw[None, :]) * cos2[None, :]
        return float(np.sum(density) * space.collar.delta / space.theta.shape[0])
    return rhs_space.sq_norm(rhs.modes)


def dbar_residual(solution: DbarSolution, rhs: DbarRhs, collar: Collar, weight: Optional[AnyWeight] = None,
                  n_theta: int = 64) -> float:
    """
    Relative size of apply_dbar(u) - v.

    Unweighted: sup over modes and y, relative to sup |v|. Under a weight:
    the (0,1)-form norm |.|^2 cos(y)^(2m) exp(-phi) of the difference,
    relative to that of v.
    """
    applied = apply_dbar(solution.modes, collar, solution.power, solution.grid).modes
    weight = weight or Zero()
    if isinstance(weight, Zero):
        scale = max((float(np.max(np.abs(v))) for v in rhs.modes.values()), default=0.0)
        worst = 0.0
        for k, values in applied.items():
            target = rhs.modes.get(k, 0.0)
            worst = max(worst, float(np.max(np.abs(values - target))))
        return worst / scale if scale > 0 else worst

    top_mode = max(abs(k) for k in applied)
    if n_theta < 2 * top_mode + 1:
        raise AliasingError(f"n_theta={n_theta} cannot resolve residual modes up to {top_mode}")
    difference = DbarRhs(power=solution.power, grid=solution.grid,
                         modes={k: values - rhs.modes.get(k, 0.0) for k, values in applied.items()})
    space = WeightedModeSpace(collar, solution.grid, solution.power, weight, 0, n_theta)
    scale = _rhs_sq_norm(rhs, space, space)
    worst = _rhs_sq_norm(difference, space, space)
    return math.sqrt(worst / scale) if scale > 0 else math.sqrt(worst)


def kernel_orthogonality(solution: DbarSolution, collar: Collar, weight: Optional[AnyWeight] = None,
                         k_max: Optional[int] = None, n_theta: int = 64) -> float:
    """Largest |<u, h_l>| / ||u|| over the normalized holomorphic modes."""
    weight = weight or Zero()
    k_max = collar.k_max if k_max is None else k_max
    space = WeightedModeSpace(collar, solution.grid, solution.power, weight, k_max, n_theta)
    norm = math.sqrt(space.sq_norm(solution.modes))
    if norm == 0:
        return 0.0
    return float(np.max(np.abs(space.inner_with_basis(solution.modes)))) / norm


def hormander_ratio(sol: DbarSolution, weight: AnyWeight, collar: Collar, m: int,
                    settings: Settings = DEFAULT_SETTINGS) -> Dict[str, Any]:
    if m != sol.power:
        raise DomainError(f"solution has power {sol.power}, not {m}")
    ratio = sol.weighted_sq_norm / sol.rhs_weighted_sq_norm if sol.rhs_weighted_sq_norm > 0 else 0.0
    bound = settings.hormander_tolerance / (m - 1) if m > 1 else math.inf
    within = ratio <= bound
    if not within:
        logger.warning("Hormander comparison failed: ratio %.4g exceeds %.4g", ratio, bound)
    return {
        "ratio": ratio,
        "model_constant": 1.0 / (m - 1) if m > 1 else math.inf,
        "bound": bound,
        "within": within,
        "curvature_constant": m - 1 - 1.0 / (2.0 * collar_area(collar)),
        "weight": weight.kind,
    }


def project_to_modes(modes: Mapping[int, np.ndarray], collar: Collar, m: int, grid: DbarGrid,
                     k_max: int) -> Tuple[ModeSection, float]:
    """Least-squares holomorphic fit in the unweighted L2 norm, with relative residual."""
    y = grid.y
    log_w = math.log(collar.delta) + (2 * m - 2) * np.log(np.cos(y)) + np.log(grid.trapezoid)
    coeffs: Dict[int, complex] = {}
    residual = 0.0
    total = 0.0
    for k, g in modes.items():
        g = np.asarray(g, dtype=complex)
        total += float(np.sum(np.abs(g) ** 2 * np.exp(log_w)))
        if abs(k) > k_max:
            residual += float(np.sum(np.abs(g) ** 2 * np.exp(log_w)))
            continue
        exponent = -mode_rate(collar, k) * y
        log_norm = float(logsumexp(2.0 * exponent + log_w))
        c = complex(np.sum(g * np.exp(exponent + log_w - log_norm)))
        fitted = c * np.exp(np.minimum(exponent, OVERFLOW_EXPONENT))
        residual += float(np.sum(np.abs(g - fitted) ** 2 * np.exp(log_w)))
        if c != 0:
            coeffs[k] = c
    relative = math.sqrt(residual / total) if total > 0 else 0.0
    return ModeSection(power=m, coeffs=coeffs), relative


def peak_rhs(collar: Collar, m: int, rho0: float, grid: DbarGrid, n_theta: int = 256,
             frame_modes: int = 48) -> Tuple[DbarRhs, Dict[int, np.ndarray], Dict[str, float]]:
    """
    Cut-off frame eta(2d/delta_x0) * F and its d-bar.

    F = exp(m*c1*(z - z0)) with c1 = -i*tan(y0) in the chart z = theta + i*y,
    so that |F|^2 cos(y)^(2m) is stationary at x0 = (rho0, 0) and F(x0) = 1.
    """
    y0 = y_of_rho(rho0)
    slope = m * math.tan(y0)
    radius = float(inj_radius_model(collar, rho0))
    theta = centered_theta(collar, n_theta)
    y = grid.y
    d = distance_to(collar, rho_of_y(y)[None, :], theta[:, None], rho0, 0.0)
    cut = np.asarray(eta_clamped(2.0 * d / radius))
    frame = np.where(cut > 0, np.exp(slope * (y[None, :] - y0) - 1j * slope * theta[:, None]), 0.0) * cut
    modes = modes_from_grid(frame, theta, collar, frame_modes)
    rhs = apply_dbar(modes, collar, m, grid)
    return rhs, modes, {"y0": y0, "inj_radius_x0": radius, "frame_slope": slope}


def frame_log_norm(rho: float, rho0: float, m: int) -> float:
    """log |F|^2 cosh(rho)^(-2m) along theta = 0."""
    y0 = y_of_rho(rho0)
    return 2.0 * m * math.tan(y0) * (y_of_rho(rho) - y0) - 2.0 * m * float(log_cosh(rho))


def peak_section(collar: Collar, m: int, rho0: float, q: Optional[QuadratureSpec] = None,
                 settings: Settings = DEFAULT_SETTINGS, n_y: int = 4097, n_theta: int = 256,
                 k_max: int = 16, frame_modes: int = 48, D: float = 100.0) -> Tuple[ModeSection, Dict[str, Any]]:
    """
    S = eta*F - u with u the minimal solution under the peak weight.

    S is the holomorphic part sum_l c_l h_l taken out by the weighted
    projection, so its value at x0 and its L2 norm are evaluated from the
    coefficients; the norm then uses the same mode norms as the Bergman
    density. The solver pins u(x0) = 0; u(x0) without the pin is reported
    beside it.
    """
    if abs(rho0) > collar.half_width - 4.0:
        raise DomainError(f"|rho0|={abs(rho0):.4f} exceeds R-4={collar.half_width - 4.0:.4f}")
    if m < settings.m0:
        raise DomainError(f"peak sections need m >= m0={settings.m0}, got {m}")

    grid = DbarGrid.collar_grid(collar, n_y)
    rhs, _, info = peak_rhs(collar, m, rho0, grid, n_theta, frame_modes)
    weight = CollarPeak(rho0=rho0)
    sol = solve_dbar(rhs, collar, weight, q, settings, k_max=k_max, n_theta=n_theta)

    x0 = CollarPoint(rho=rho0, theta=0.0)
    S_x0 = kernel_value(sol, collar, x0)
    free_x0 = kernel_value(sol, collar, x0, free=True)
    log_cosh0 = float(log_cosh(rho0))
    log_l2 = kernel_log_sq_norm(sol, collar, q)
    pointwise = abs(S_x0) * math.exp(-m * log_cosh0)
    ratio = math.exp(math.log(abs(S_x0)) - m * log_cosh0 - 0.5 * log_l2) if S_x0 != 0 else 0.0

    section = kernel_section(sol, collar)
    profile = partial_estimate_profile(m, info["inj_radius_x0"], D)
    bergman_bound = math.sqrt(density(collar.with_k_max(k_max), m, x0, q))
    step = 1e-5
    frame_gradient = (frame_log_norm(rho0 + step, rho0, m) - frame_log_norm(rho0 - step, rho0, m)) / (2 * step)
    residual = dbar_residual(sol, rhs, collar, weight, n_theta)

    report = {
        "delta": collar.delta,
        "m": m,
        "rho0": rho0,
        "inj_radius_x0": info["inj_radius_x0"],
        "section_at_x0": [S_x0.real, S_x0.imag],
        "frame_at_x0": 1.0,
        "frame_reproduction_error": abs(S_x0 - 1.0),
        "pointwise_norm_x0": pointwise,
        "l2_norm": math.exp(0.5 * log_l2),
        "ratio": ratio,
        "profile": profile,
        "profile_D": D,
        "above_profile": ratio >= profile,
        "bergman_bound": bergman_bound,
        "ratio_to_bergman": ratio / bergman_bound,
        "pinned_at": sol.constrained_at,
        "u_at_x0": abs(1.0 - S_x0) * math.exp(-m * log_cosh0),
        "u_at_x0_unpinned": abs(1.0 - free_x0) * math.exp(-m * log_cosh0),
        "section_modes": len(section.coeffs),
        "frame_gradient": frame_gradient,
        "dbar_residual": residual,
        "gram_condition": sol.gram_condition,
        "hormander": hormander_ratio(sol, weight, collar, m, settings),
    }
    report["pass"] = bool(
        pointwise > 0
        and report["above_profile"]
        and residual <= settings.dbar_tolerance
        and settings.peak_bergman_fraction * bergman_bound <= ratio <= bergman_bound * (1.0 + 1e-9)
    )
    if not report["pass"]:
        logger.warning("peak section at rho0=%.4f failed: ratio/bound=%.3e, d-bar residual=%.3e",
                       rho0, report["ratio_to_bergman"], residual)
    return section, report


def smooth_rhs(collar: Collar, m: int, grid: DbarGrid, k_max: int = 2, rho0: float = 0.0,
               width: float = 0.1) -> DbarRhs:
    """Gaussian profiles in y on modes |k| <= k_max; smooth enough for clean O(h^2) studies."""
    y0 = y_of_rho(rho0)
    profile = np.exp(-((grid.y - y0) / width) ** 2)
    return DbarRhs(power=m, modes={k: 0.5j * profile / (1.0 + abs(k)) for k in range(-k_max, k_max + 1)},
                   grid=grid)


def dbar_check(collar: Collar, m: int, rho0: float = 0.0, q: Optional[QuadratureSpec] = None,
               settings: Settings = DEFAULT_SETTINGS, n_y: int = 4097, levels: int = 3,
               k_max: int = 16, n_theta: int = 256, frame_modes: int = 48) -> Dict[str, Any]:
    """
    Solver diagnostics: residual convergence under grid halving on a smooth
    right-hand side, kernel orthogonality of the finest solution, and the
    Hormander comparison for the peak-section right-hand side.
    """
    if levels < 2:
        raise DomainError(f"convergence study needs at least two levels, got {levels}")
    residuals = []
    orthogonality = 0.0
    n = n_y
    for _ in range(levels):
        grid = DbarGrid.collar_grid(collar, n)
        rhs = smooth_rhs(collar, m, grid, rho0=rho0)
        sol = solve_dbar(rhs, collar, Zero(), q, settings, k_max=k_max)
        residuals.append(dbar_residual(sol, rhs, collar))
        orthogonality = kernel_orthogonality(sol, collar, Zero(), k_max=k_max)
        n = 2 * n - 1
    ratios = [a / b if b > 0 else math.inf for a, b in zip(residuals, residuals[1:])]
    converges = all(3.5 <= r <= 4.5 for r in ratios)
    if not converges:
        logger.warning("d-bar residual ratios %s are outside [3.5, 4.5]", ", ".join(f"{r:.3f}" for r in ratios))

    grid = DbarGrid.collar_grid(collar, n_y)
    rhs, _, _ = peak_rhs(collar, m, rho0, grid, n_theta, frame_modes)
    peak_sol = solve_dbar(rhs, collar, Zero(), q, settings, k_max=k_max)
    hormander = hormander_ratio(peak_sol, Zero(), collar, m, settings)

    report = {
        "delta": collar.delta,
        "m": m,
        "rho0": rho0,
        "n_y": [n_y * 2 ** i - (2 ** i - 1) for i in range(levels)],
        "residuals": residuals,
        "residual_ratios": ratios,
        "converges": converges,
        "kernel_orthogonality": orthogonality,
        "hormander": hormander,
    }
    report["pass"] = bool(converges and orthogonality <= 1e-8 and hormander["within"])
    return report
