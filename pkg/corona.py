"""
Generator families and the corona decomposition S = sum_i T_i U_i on one collar.

The family is the cut-off generator (pure k = 0) plus normalized monomials,
or any members handed to :func:`family_from_members`. The Wolff construction
runs with S factored out: holomorphic multipliers tau_i with
sum_i tau_i U_i = 1 are built from the partition phi_k and corrections
dbar B_ik = (dbar phi_k) conj(U_i) / sigma, and then T_i = tau_i S. The
multipliers are fitted mode by mode; how far tau_i is from its fit, and how
far dbar tau_i is from zero, are both reported.
"""

import logging
import math
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.linalg import cholesky, solve_triangular
from scipy.special import logsumexp

from collar_geometry import Collar, CollarPoint, eta_clamped, eta_derivatives, log_abs_w, rho_of_y
from dbar_solver import (
    DbarGrid,
    DbarRhs,
    apply_dbar,
    centered_theta,
    dbar_residual,
    mode_rate,
    modes_from_grid,
    modes_to_grid,
    project_to_modes,
    solve_dbar,
)
from errors import AliasingError, ConditioningError, DecompositionError, DomainError, OverflowModeError
from mode_sections import (
    OVERFLOW_EXPONENT,
    ModeSection,
    QuadratureSpec,
    contract_grid,
    eval_f_grid,
    l2_inner,
    log_cosh,
    log_l2_sq_norm,
    log_mode_weight,
    log_pointwise_norm,
    monomial,
    multiply,
    pointwise_sq_norm,
)
from settings import DEFAULT_SETTINGS, Settings
from weights import Zero

logger = logging.getLogger(__name__)

ORTHONORMALITY_TOL = 1e-8

CORONA_CSV_FIELDS = ["generator", "norm_sup", "norm_l2", "dbar_residual", "holomorphy_defect", "b_log_sup",
                     "residual_sup", "residual_l2", "pass"]


class GeneratorResult(NamedTuple):
    U_prime: ModeSection
    alpha: complex
    u_perp_norm: float
    report: Dict[str, Any]


class RadiusCertificate(NamedTuple):
    r: float
    margin: float
    report: Dict[str, Any]


class DecayFit(NamedTuple):
    eps6_hat: float
    sup_ratio: float
    report: Dict[str, Any]


def _cutoff_generator_samples(collar: Collar, grid: DbarGrid) -> np.ndarray:
    rho = rho_of_y(grid.y)
    return np.asarray(eta_clamped(np.abs(rho) - (collar.half_width - 1.0))) / math.sqrt(collar.delta)


def collar_generator(collar: Collar, m0: int, q: Optional[QuadratureSpec] = None,
                     settings: Settings = DEFAULT_SETTINGS, n_y: int = 8193) -> GeneratorResult:
    """
    Holomorphic generator U' = u1 - u from the cut-off section u1 = eta/sqrt(delta).

    u is the minimal-norm solution of dbar u = dbar u1; alpha is the component
    of u along u1 over |rho| <= R - 2 and u_perp the remainder there.
    """
    R = collar.half_width
    if R <= 4.0:
        raise DomainError(f"collar generator needs R > 4, got R={R:.4f}")
    if m0 < 1:
        raise DomainError(f"m0 must be positive, got {m0}")

    grid = DbarGrid.collar_grid(collar, n_y)
    u1 = _cutoff_generator_samples(collar, grid)
    rhs = apply_dbar({0: u1}, collar, m0, grid)
    sol = solve_dbar(rhs, collar, Zero(), q, settings, k_max=0)
    u = sol.modes[0]
    U_prime, fit_residual = project_to_modes({0: u1 - u}, collar, m0, grid, collar.k_max)

    y = grid.y
    inner = np.abs(rho_of_y(y)) <= R - 2.0
    w = collar.delta * np.cos(y) ** (2 * m0 - 2) * grid.trapezoid * inner
    alpha = complex(np.sum(u * u1 * w) / np.sum(u1 * u1 * w))
    u_perp_norm = math.sqrt(float(np.sum(np.abs(u - alpha * u1) ** 2 * w)))

    coeffs = np.array(list(U_prime.coeffs.values()), dtype=complex)
    total = float(np.linalg.norm(coeffs))
    c0 = U_prime.coeffs.get(0, 0j)
    report = {
        "delta": collar.delta,
        "m0": m0,
        "u_sq_norm": sol.weighted_sq_norm,
        "u_norm_ratio": sol.weighted_sq_norm / collar.delta ** (2 * m0 - 1),
        "alpha": [alpha.real, alpha.imag],
        "alpha_ratio": abs(alpha) / collar.delta ** (m0 - 0.5),
        "u_perp_norm": u_perp_norm,
        "k0_share": abs(c0) / total if total > 0 else 0.0,
        "core_norm": abs(c0),
        "fit_residual": fit_residual,
        "dbar_residual": dbar_residual(sol, rhs, collar),
    }
    logger.debug("collar generator delta=%g m0=%d: |c0|=%.6g", collar.delta, m0, abs(c0))
    return GeneratorResult(U_prime=U_prime, alpha=alpha, u_perp_norm=u_perp_norm, report=report)


def _log_tail_bound(tail: Dict[int, complex], collar: Collar, edge: float) -> float:
    """Upper bound of log sum |c_k||w|^k over |rho| <= edge; each term is monotone in rho."""
    if not tail:
        return -math.inf
    left, right = float(log_abs_w(collar, -edge)), float(log_abs_w(collar, edge))
    terms = [math.log(abs(c)) + max(k * left, k * right) for k, c in tail.items()]
    return float(logsumexp(terms))


def nonvanishing_radius(U_prime: ModeSection, collar: Collar, q: Optional[QuadratureSpec] = None,
                        step: float = 0.5, n: int = 41) -> RadiusCertificate:
    """
    Smallest r >= 2 (in steps of ``step``) on which the k = 0 term of U'
    dominates the rest, so ||U'|| >= (|c0| - tail) cosh(rho)^(-m0) > 0 on
    |rho| <= R - r. Returns r = R when nothing is certified.
    """
    R = collar.half_width
    m0 = U_prime.power
    c0 = U_prime.coeffs.get(0, 0j)
    tail = {k: c for k, c in U_prime.nonzero().items() if k != 0}
    report: Dict[str, Any] = {"delta": collar.delta, "m0": m0, "half_width": R, "certified": False}
    if c0 == 0:
        logger.warning("generator has no k=0 term; nonvanishing radius not certified")
        report["reason"] = "zero k=0 coefficient"
        return RadiusCertificate(r=R, margin=0.0, report=report)

    log_lead = math.log(abs(c0))
    for r in np.arange(2.0, R, step):
        edge = R - float(r)
        log_tail = _log_tail_bound(tail, collar, edge)
        if log_tail >= log_lead:
            continue
        margin = -math.expm1(log_tail - log_lead)
        rho = np.linspace(-edge, edge, n)
        log_lower = log_lead + math.log(margin) - m0 * np.log(np.cosh(rho))
        report.update({
            "certified": True,
            "margin": margin,
            "D1": (1.0 - margin) / collar.delta ** (m0 - 0.5),
            "curve": [[float(a), float(b)] for a, b in zip(rho, log_lower)],
            "log_min_relative": float(np.min(log_lower)) - 0.5 * log_l2_sq_norm(U_prime, collar, q),
        })
        return RadiusCertificate(r=float(r), margin=margin, report=report)

    logger.warning("nonvanishing radius not certified for delta=%g", collar.delta)
    report["reason"] = "tail bound exceeds the k=0 term on every candidate region"
    return RadiusCertificate(r=R, margin=0.0, report=report)


def _log_sup_over_theta(section: ModeSection, collar: Collar, s: np.ndarray, theta: np.ndarray) -> np.ndarray:
    both = [np.max(log_pointwise_norm(section, collar, sign * s[:, None], theta[None, :]), axis=1)
            for sign in (-1.0, 1.0)]
    return np.maximum(both[0], both[1])


def _envelope_fit(ell: np.ndarray, s: np.ndarray, R: float, power: int) -> Tuple[float, float, float]:
    """Fit ell - power*(R - s) = log C - eps6 * e^(R - s), intercept raised to cover every sample."""
    X = np.exp(R - s)
    target = ell - power * (R - s)
    slope, _ = np.polyfit(X, target, 1)
    eps6 = -float(slope)
    log_c = float(np.max(target + eps6 * X))
    envelope = log_c - eps6 * X + power * (R - s)
    return eps6, log_c, float(np.exp(np.max(ell - envelope)))


def _theta_fd_error(section: ModeSection, collar: Collar, rho: np.ndarray, theta: np.ndarray, h: float) -> float:
    modes = section.nonzero()
    ks = np.array(list(modes))
    cs = np.array(list(modes.values()), dtype=complex)
    exponents = np.log(np.abs(cs))[None, :] + ks[None, :] * log_abs_w(collar, rho)[:, None]
    exponents = exponents - np.max(exponents, axis=1, keepdims=True)
    amplitude = np.exp(exponents) * (cs / np.abs(cs))[None, :]

    def values(t: np.ndarray, factor: np.ndarray) -> np.ndarray:
        phase = np.exp(1j * np.outer(t, ks) * collar.frequency)
        return np.einsum("rk,tk->rt", amplitude * factor[None, :], phase)

    ones = np.ones(ks.shape[0])
    fd = (values(theta + h, ones) - values(theta - h, ones)) / (2.0 * h)
    exact = values(theta, 1j * ks * collar.frequency)
    scale = np.max(np.abs(exact), axis=1)
    return float(np.max(np.max(np.abs(fd - exact), axis=1) / scale))


def _z_derivative(section: ModeSection, collar: Collar) -> ModeSection:
    """d/dz of f (dz)^m as a section of power m + 1."""
    return ModeSection(power=section.power + 1,
                       coeffs={k: c * 1j * mode_rate(collar, k) for k, c in section.nonzero().items()})


def orthogonal_decay_check(U_pp: ModeSection, collar: Collar, m0: int, q: Optional[QuadratureSpec] = None,
                           n_rho: int = 201, n_theta: int = 32, fd_step: float = 1e-4) -> DecayFit:
    """
    Decay of a section with no k = 0 part towards the core.

    Fits ||U''||(rho)/||U''||_L2 <= C exp(-eps6 e^(R-|rho|) + m0 (R-|rho|))
    over |rho| <= R - 3 and does the same for dU''/dz with m0 + 1.
    """
    if U_pp.power != m0:
        raise DomainError(f"section has power {U_pp.power}, expected m0={m0}")
    c0 = U_pp.coeffs.get(0, 0j)
    if c0 != 0:
        raise DomainError(f"section must have zero mean mode, got c0={c0}")
    if not U_pp.nonzero():
        raise DomainError("decay check needs a nonzero section")
    R = collar.half_width
    if R <= 3.0:
        raise DomainError(f"decay check needs R > 3, got R={R:.4f}")

    s = np.linspace(0.0, R - 3.0, n_rho)
    theta = centered_theta(collar, n_theta)
    ell = _log_sup_over_theta(U_pp, collar, s, theta) - 0.5 * log_l2_sq_norm(U_pp, collar, q)
    eps6, log_c, violation = _envelope_fit(ell, s, R, m0)

    gradient = _z_derivative(U_pp, collar)
    ell_g = _log_sup_over_theta(gradient, collar, s, theta) - 0.5 * log_l2_sq_norm(U_pp, collar, q)
    eps6_g, log_c_g, violation_g = _envelope_fit(ell_g, s, R, m0 + 1)

    rho_fd = np.linspace(-(R - 3.0), R - 3.0, 9)
    fd_error = _theta_fd_error(U_pp, collar, rho_fd, theta, fd_step * collar.delta)

    if eps6 <= 0:
        logger.warning("fitted decay rate is not positive: eps6=%.4g", eps6)
    report = {
        "delta": collar.delta,
        "m0": m0,
        "eps6_hat": eps6,
        "log_C": log_c,
        "violation": violation,
        "eps6_hat_gradient": eps6_g,
        "log_C_gradient": log_c_g,
        "violation_gradient": violation_g,
        "gradient_fd_error": fd_error,
        "n_rho": n_rho,
        "holds": bool(eps6 > 0 and violation <= 1.05 and violation_g <= 1.05),
    }
    sup_ratio = math.exp(min(float(np.max(ell)), OVERFLOW_EXPONENT))
    return DecayFit(eps6_hat=eps6, sup_ratio=sup_ratio, report=report)


class GeneratorFamily(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    m0: int = Field(ge=1)
    members: List[ModeSection]
    gram: Any
    orthonormalizer: Any
    generator_index: int = 0
    report: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _shapes(self) -> "GeneratorFamily":
        d = len(self.members)
        if d == 0:
            raise ValueError("family needs at least one member")
        if any(u.power != self.m0 for u in self.members):
            raise ValueError(f"every member must have power m0={self.m0}")
        self.gram = np.asarray(self.gram, dtype=complex)
        self.orthonormalizer = np.asarray(self.orthonormalizer, dtype=complex)
        if self.gram.shape != (d, d) or self.orthonormalizer.shape != (d, d):
            raise ValueError(f"gram and orthonormalizer must be {d}x{d}")
        if not 0 <= self.generator_index < d:
            raise ValueError("generator_index out of range")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "m0": self.m0,
            "generator_index": self.generator_index,
            "members": [{"power": u.power, "coeffs": [[k, c.real, c.imag] for k, c in u.coeffs.items()]}
                        for u in self.members],
            "gram": [[[v.real, v.imag] for v in row] for row in self.gram],
            "orthonormalizer": [[[v.real, v.imag] for v in row] for row in self.orthonormalizer],
            "report": self.report,
        }


def _normalized_monomial(collar: Collar, k: int, m0: int, q: Optional[QuadratureSpec]) -> ModeSection:
    log_amp = -0.5 * log_mode_weight(collar, k, m0, -collar.half_width, collar.half_width, q)
    if log_amp < -OVERFLOW_EXPONENT:
        raise OverflowModeError(k, -log_amp)
    return monomial(k, m0, math.exp(log_amp))


def build_family(collar: Collar, m0: int, extra_modes: Sequence[int] = (), q: Optional[QuadratureSpec] = None,
                 settings: Settings = DEFAULT_SETTINGS, generator: Optional[GeneratorResult] = None) -> GeneratorFamily:
    extras = [int(k) for k in extra_modes]
    if any(k == 0 for k in extras) or len(set(extras)) != len(extras):
        raise DomainError(f"extra modes must be distinct nonzero integers, got {extras}")
    if any(abs(k) > collar.k_max for k in extras):
        raise DomainError(f"extra modes exceed k_max={collar.k_max}")
    generator = generator or collar_generator(collar, m0, q, settings)
    if generator.U_prime.power != m0:
        raise DomainError(f"generator has power {generator.U_prime.power}, expected {m0}")

    R = collar.half_width
    v1 = monomial(0, m0, 1.0 / math.sqrt(collar.delta))
    beta11 = l2_inner(generator.U_prime, v1, collar, -(R - 2.0), R - 2.0, q)
    if beta11 == 0:
        raise DomainError("generator is orthogonal to the cut-off section")
    U1 = generator.U_prime.scaled(1.0 / beta11)

    members = [U1]
    gammas = []
    pairing_u1 = l2_inner(U1, v1, collar, -(R - 2.0), R - 2.0, q)
    for k in extras:
        v = _normalized_monomial(collar, k, m0, q)
        gamma = l2_inner(v, v1, collar, -(R - 2.0), R - 2.0, q) / pairing_u1
        gammas.append([gamma.real, gamma.imag])
        members.append(v.plus(U1.scaled(-gamma)) if gamma != 0 else v)

    family = family_from_members(collar, m0, members, q, settings)
    family.report.update({
        "extra_modes": extras,
        "beta11": [beta11.real, beta11.imag],
        "gamma": gammas,
    })
    return family


def family_from_members(collar: Collar, m0: int, members: Sequence[ModeSection], q: Optional[QuadratureSpec] = None,
                        settings: Settings = DEFAULT_SETTINGS, generator_index: int = 0) -> GeneratorFamily:
    """Gram matrix, its Cholesky orthonormalizer and the core floor check for given members."""
    members = list(members)
    d = len(members)
    if d == 0:
        raise DomainError("family needs at least one member")
    G = np.array([[l2_inner(members[i], members[j], collar, q=q) for j in range(d)] for i in range(d)])
    G = 0.5 * (G + G.conj().T)
    eigenvalues = np.linalg.eigvalsh(G)
    if eigenvalues[0] <= 0:
        raise ConditioningError("generator Gram matrix is not positive definite", math.inf)
    condition = float(eigenvalues[-1] / eigenvalues[0])
    if condition > settings.gram_condition_max:
        raise ConditioningError("generator Gram matrix is ill-conditioned", condition)
    L = cholesky(G, lower=True)
    M = solve_triangular(L, np.eye(d), lower=True)
    orthonormality = float(np.max(np.abs(M @ G @ M.conj().T - np.eye(d))))
    if orthonormality > ORTHONORMALITY_TOL:
        raise ConditioningError(f"orthonormalizer misses the identity by {orthonormality:.3e}", condition)

    core = CollarPoint(rho=0.0)
    core_sum = sum(pointwise_sq_norm(u, collar, core) for u in members)
    diag = np.sqrt(np.real(np.diag(G)))
    off = np.abs(G) / np.outer(diag, diag) - np.eye(d)
    report = {
        "delta": collar.delta,
        "m0": m0,
        "min_eigenvalue": float(eigenvalues[0]),
        "gram_condition": condition,
        "max_off_diagonal": float(np.max(off)) if d > 1 else 0.0,
        "orthonormality_error": orthonormality,
        "core_sq_norm_sum": core_sum,
        "core_floor_ok": core_sum > settings.denominator_floor,
    }
    return GeneratorFamily(m0=m0, members=members, gram=G, orthonormalizer=M, generator_index=generator_index,
                           report=report)


class CoronaReport(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    generators: int
    m: int
    m0: int
    residual_sup: float = Field(ge=0.0)
    residual_l2: float = Field(ge=0.0)
    dbar_residuals: List[float]
    holomorphy_defects: List[float]
    norms: List[Dict[str, float]]
    b_log_sup: List[Optional[float]]
    multipliers: List[Dict[str, List[float]]]
    wolff_modes: int
    certified_radius: float
    tolerance: float
    passed: bool = Field(alias="pass")

    def to_dict(self) -> Dict[str, Any]:
        return self.model_dump(by_alias=True)

    def csv_rows(self) -> List[Dict[str, Any]]:
        return [{
            "generator": i,
            "norm_sup": self.norms[i]["sup"],
            "norm_l2": self.norms[i]["l2"],
            "dbar_residual": self.dbar_residuals[i],
            "holomorphy_defect": self.holomorphy_defects[i],
            "b_log_sup": self.b_log_sup[i],
            "residual_sup": self.residual_sup,
            "residual_l2": self.residual_l2,
            "pass": self.passed,
        } for i in range(self.generators)]


class WolffMultipliers(NamedTuple):
    """Holomorphic tau_i = sum_j coeffs[i][j] w^j of power -m0 with sum_i tau_i U_i = 1."""
    coeffs: List[Dict[int, complex]]
    power: int
    holomorphy_defects: List[float]
    dbar_residuals: List[float]
    radius: float
    report: Dict[str, Any]


def _partition_values(collar: Collar, family: GeneratorFamily, radius: float, rho: np.ndarray,
                      theta: np.ndarray, floor: float) -> Dict[str, np.ndarray]:
    """
    Partition 1 = sum_k phi_k U_k and d-bar phi_k on a (theta, rho) grid.

    phi_k = eta1 [k = g] / U_g + (1 - eta1) conj(U_k) / sigma, where
    sigma = sum_j |U_j|^2 and eta1 = eta(|rho| - (R - radius - 1)).
    """
    g = family.generator_index
    rows, cols = rho[None, :], theta[:, None]
    U = np.stack([eval_f_grid(u, collar, rows, cols) for u in family.members])
    dU = np.stack([eval_f_grid(_z_derivative(u, collar), collar, rows, cols) for u in family.members])
    metric = sum(contract_grid(u, u, collar, rows, cols).real for u in family.members)

    t = np.abs(rho) - (collar.half_width - radius - 1.0)
    eta = np.asarray(eta_clamped(t))[None, :]
    working = np.broadcast_to(eta < 1.0, metric.shape)
    if np.any(working):
        masked = np.where(working, metric, np.inf)
        j, i = np.unravel_index(int(np.argmin(masked)), masked.shape)
        if masked[j, i] < floor:
            raise DecompositionError(f"generator norm sum {masked[j, i]:.3e} is below the floor {floor:.3e}",
                                     (float(rho[i]), float(theta[j])))

    sigma = metric * np.exp(2.0 * family.m0 * log_cosh(rho))[None, :]
    eta_y = (eta_derivatives(t)["d1"] * np.sign(rho) * np.cosh(rho))[None, :]
    cross = np.sum(U * np.conj(dU), axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        inverse_g = np.where(eta > 0, 1.0 / U[g], 0.0)
    phi = (1.0 - eta) * np.conj(U) / sigma
    dphi = -0.5j * eta_y * np.conj(U) / sigma + (1.0 - eta) * (np.conj(dU) - np.conj(U) * (cross / sigma)) / sigma
    phi[g] += eta * inverse_g
    dphi[g] += 0.5j * eta_y * inverse_g
    return {"U": U, "sigma": sigma, "phi": phi, "dphi": dphi, "metric": metric}


def _multiplier_grid(collar: Collar, family: GeneratorFamily, m: int, radius: float, n_y: int, theta: np.ndarray,
                     wolff_modes: int, q: Optional[QuadratureSpec],
                     settings: Settings) -> Tuple[np.ndarray, DbarGrid, Dict[str, np.ndarray]]:
    """tau_i = phi_i + sum_k (B_ik - B_ki) U_k with dbar B_ik = (dbar phi_k) conj(U_i) / sigma."""
    grid = DbarGrid.collar_grid(collar, n_y)
    parts = _partition_values(collar, family, radius, rho_of_y(grid.y), theta, settings.denominator_floor)
    U, dphi, sigma = parts["U"], parts["dphi"], parts["sigma"]
    tau = parts["phi"].copy()
    d = U.shape[0]
    for i in range(d):
        for k in range(d):
            if i == k:
                continue
            psi = dphi[k] * np.conj(U[i]) / sigma
            rhs = DbarRhs(power=m - 2 * family.m0, modes=modes_from_grid(psi, theta, collar, wolff_modes), grid=grid)
            B = modes_to_grid(solve_dbar(rhs, collar, Zero(), q, settings, k_max=0).modes, theta, collar)
            tau[i] += B * U[k]
            tau[k] -= B * U[i]
    return tau, grid, parts


def _fit_holomorphic(modes: Dict[int, np.ndarray], collar: Collar, grid: DbarGrid,
                     log_size: np.ndarray) -> Dict[int, complex]:
    """Per mode, the constant t minimizing sum_y |tau_j(y) - t exp(-a_j y)|^2 size(y) over the trapezoid."""
    y = grid.y
    log_tw = np.log(grid.trapezoid) + log_size
    fitted = {}
    for j, values in modes.items():
        a = mode_rate(collar, j)
        norm = float(logsumexp(log_tw - 2.0 * a * y))
        fitted[j] = complex(np.sum(np.exp(log_tw - a * y - norm) * values))
    return fitted


def wolff_multipliers(family: GeneratorFamily, collar: Collar, m: int, q: Optional[QuadratureSpec] = None,
                      settings: Settings = DEFAULT_SETTINGS, n_y: int = 65537, n_theta: int = 8) -> WolffMultipliers:
    """
    Holomorphic multipliers tau_i with sum_i tau_i U_i = 1, so T_i = tau_i S.

    tau_i is built on two nested (theta, y) grids and Richardson-extrapolated,
    then fitted mode by mode with constants times exp(-a_j y). The holomorphy
    defect is sup |(tau_i - fit) U_i|; the d-bar residual is
    sup |dbar(tau_i) U_i| relative to sup |dbar(phi_i) U_i|.
    """
    m0 = family.m0
    if m <= 2 * m0:
        raise DomainError(f"the Wolff correction needs m > 2*m0, got m={m}, m0={m0}")
    if n_y % 2 == 0:
        raise DomainError(f"n_y must be odd so the coarse grid nests, got {n_y}")
    top = max((abs(k) for u in family.members for k in u.nonzero()), default=0)
    wolff_modes = 2 * top
    exponent = wolff_modes * mode_rate(collar, 1) * collar.y_max
    if exponent > OVERFLOW_EXPONENT:
        raise OverflowModeError(wolff_modes, exponent)
    if n_theta < 2 * wolff_modes + 1:
        raise AliasingError(f"{n_theta} theta samples cannot resolve multiplier modes up to {wolff_modes}")

    certificate = nonvanishing_radius(family.members[family.generator_index], collar, q)
    if not certificate.report["certified"]:
        raise DecompositionError("generator has no certified nonvanishing region")
    radius = certificate.r

    theta = centered_theta(collar, n_theta)
    tau_fine, _, _ = _multiplier_grid(collar, family, m, radius, n_y, theta, wolff_modes, q, settings)
    tau_coarse, grid, parts = _multiplier_grid(collar, family, m, radius, (n_y + 1) // 2, theta, wolff_modes,
                                               q, settings)
    tau = (4.0 * tau_fine[:, :, ::2] - tau_coarse) / 3.0
    del tau_fine

    U, dphi = parts["U"], parts["dphi"]
    coeffs, defects, residuals = [], [], []
    partition = np.zeros(U.shape[1:], dtype=complex)
    for i in range(U.shape[0]):
        modes = modes_from_grid(tau[i], theta, collar, wolff_modes)
        with np.errstate(divide="ignore"):
            log_size = np.log(np.mean(np.abs(U[i]) ** 2, axis=0))
        fitted = _fit_holomorphic(modes, collar, grid, log_size)
        holomorphic = modes_to_grid({j: c * np.exp(-mode_rate(collar, j) * grid.y) for j, c in fitted.items()},
                                    theta, collar)
        defects.append(float(np.max(np.abs((tau[i] - holomorphic) * U[i]))))
        applied = modes_to_grid(apply_dbar(modes, collar, m - m0, grid).modes, theta, collar)
        scale = float(np.max(np.abs(dphi[i] * U[i])))
        worst = float(np.max(np.abs(applied * U[i])))
        residuals.append(worst / scale if scale > 0 else worst)
        coeffs.append({j: c for j, c in fitted.items() if c != 0})
        partition = partition + holomorphic * U[i]

    report = {
        "m": m,
        "m0": m0,
        "wolff_modes": wolff_modes,
        "n_y": n_y,
        "n_theta": n_theta,
        "certified_radius": radius,
        "min_generator_norm_sum": float(np.min(parts["metric"])),
        "partition_error": float(np.max(np.abs(partition - 1.0))),
    }
    logger.debug("Wolff multipliers for %d generators: defects %s", len(coeffs),
                 ", ".join(f"{v:.3e}" for v in defects))
    return WolffMultipliers(coeffs=coeffs, power=m - m0, holomorphy_defects=defects, dbar_residuals=residuals,
                            radius=radius, report=report)


def corona_decompose(S: ModeSection, family: GeneratorFamily, collar: Collar, q: Optional[QuadratureSpec] = None,
                     settings: Settings = DEFAULT_SETTINGS, n_y: int = 65537, n_rho: int = 401,
                     n_theta: int = 32, wolff_theta: int = 8,
                     multipliers: Optional[WolffMultipliers] = None) -> Tuple[List[ModeSection], CoronaReport]:
    """
    Write S = sum_i T_i U_i with T_i = tau_i S.

    The multipliers depend on the family and m only; pass them in to reuse
    them across sections. Residuals are measured on S - sum_i T_i U_i.
    """
    m, m0 = S.power, family.m0
    if multipliers is None:
        multipliers = wolff_multipliers(family, collar, m, q, settings, n_y, wolff_theta)
    elif multipliers.power != m - m0 or len(multipliers.coeffs) != len(family.members):
        raise DomainError(f"multipliers of power {multipliers.power} do not fit m={m}, m0={m0}")

    T = []
    for fitted in multipliers.coeffs:
        coeffs: Dict[int, complex] = {}
        for qk, s in S.nonzero().items():
            for j, t in fitted.items():
                coeffs[qk + j] = coeffs.get(qk + j, 0j) + s * t
        T.append(ModeSection(power=m - m0, coeffs=coeffs))

    products = [multiply(t, u) for t, u in zip(T, family.members)]
    remainder = S
    for p in products:
        remainder = remainder.plus(p.scaled(-1.0))

    rho = np.linspace(-collar.half_width, collar.half_width, n_rho)
    theta = centered_theta(collar, n_theta)
    log_norm_S = log_pointwise_norm(S, collar, rho[None, :], theta[:, None])
    log_sup_S = float(np.max(log_norm_S))
    log_l2_S = 0.5 * log_l2_sq_norm(S, collar, q)

    def relative(section: ModeSection) -> Dict[str, float]:
        if not S.nonzero():
            return {"sup": 0.0, "l2": 0.0}
        log_sup = float(np.max(log_pointwise_norm(section, collar, rho[None, :], theta[:, None])))
        log_l2 = 0.5 * log_l2_sq_norm(section, collar, q)
        return {"sup": _exp_or_zero(log_sup - log_sup_S), "l2": _exp_or_zero(log_l2 - log_l2_S)}

    residual = relative(remainder)
    norms = [relative(p) for p in products]

    phi = _partition_values(collar, family, multipliers.radius, rho, theta, settings.denominator_floor)["phi"]
    b_log_sup: List[Optional[float]] = []
    for i in range(len(family.members)):
        if not S.nonzero():
            b_log_sup.append(None)
            continue
        with np.errstate(divide="ignore"):
            log_b = np.log(np.abs(phi[i])) + log_norm_S + m0 * log_cosh(rho)[None, :]
        b_log_sup.append(float(np.max(log_b)))

    tol = settings.corona_tolerance
    finite = all(math.isfinite(v) for n in norms for v in n.values())
    passed = bool(residual["sup"] <= tol and residual["l2"] <= tol and finite
                  and all(r <= tol for r in multipliers.dbar_residuals)
                  and all(v <= tol for v in multipliers.holomorphy_defects))
    if not passed:
        logger.warning("corona decomposition misses tolerance %.1e: residual %.3e, dbar %s, defects %s",
                       tol, max(residual.values()), ", ".join(f"{r:.3e}" for r in multipliers.dbar_residuals),
                       ", ".join(f"{v:.3e}" for v in multipliers.holomorphy_defects))
    report = CoronaReport(
        generators=len(family.members),
        m=m,
        m0=m0,
        residual_sup=residual["sup"],
        residual_l2=residual["l2"],
        dbar_residuals=multipliers.dbar_residuals,
        holomorphy_defects=multipliers.holomorphy_defects,
        norms=norms,
        b_log_sup=b_log_sup,
        multipliers=[{str(j): [c.real, c.imag] for j, c in sorted(fitted.items())} for fitted in multipliers.coeffs],
        wolff_modes=multipliers.report["wolff_modes"],
        certified_radius=multipliers.radius,
        tolerance=tol,
        passed=passed,
    )
    return T, report


def _exp_or_zero(value: float) -> float:
    return math.exp(min(value, OVERFLOW_EXPONENT)) if value > -745.0 else 0.0
