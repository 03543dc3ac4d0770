"""End-to-end checks of the numeric claims, one test per scenario."""

import math

import numpy as np
import pytest

from bergman_density import counterexample_report, counterexample_sections, density_scan
from collar_geometry import EPS1, collar_area, make_collar, y_of_rho
from corona import (
    build_family,
    collar_generator,
    corona_decompose,
    nonvanishing_radius,
    orthogonal_decay_check,
    wolff_multipliers,
)
from dbar_solver import DbarGrid, dbar_check, hormander_ratio, peak_rhs, peak_section, solve_dbar
from mode_sections import boundary_round_trip, l2_inner, random_section
from weights import CollarPeak, Zero, phi3_flat, weight_certificate


@pytest.mark.parametrize("delta", [0.1, 0.05, 0.02, 0.01])
def test_constant_mode_ratio_matches_its_closed_form(delta):
    report = counterexample_report(make_collar(delta, 4), 2)
    assert report["ratio2_relative_error"] <= 0.02


def test_density_at_x0_falls_with_delta():
    reports = density_scan([0.1, 0.05, 0.02], 2, 64)
    values = [r.at_x0 for r in reports]
    assert all(r.error is None for r in reports)
    assert values[0] > values[1] > values[2] > 0


def test_boundary_split_round_trip_with_32_modes():
    rng = np.random.default_rng(2024)
    section = random_section(rng, range(-32, 33), 2)
    report = boundary_round_trip(section, make_collar(0.1, 64))
    assert report["relative_error"] <= 1e-9


def test_distinct_modes_are_exactly_orthogonal():
    collar = make_collar(0.05, 64)
    S1, S2, S3 = counterexample_sections(collar, 2)
    assert l2_inner(S1, S2, collar) == 0
    assert l2_inner(S2, S3, collar) == 0
    assert l2_inner(S1, S3, collar) == 0


def test_sections_without_core_mode_decay_doubly_exponentially():
    collar = make_collar(0.05, 64)
    rng = np.random.default_rng(99)
    modes = [k for k in range(-8, 9) if k != 0]
    for _ in range(20):
        fit = orthogonal_decay_check(random_section(rng, modes, 2), collar, 2)
        assert fit.eps6_hat >= 1.0
        assert fit.report["holds"]


@pytest.mark.parametrize("delta", [0.1, 0.05])
def test_generator_nonvanishing_radius_is_bounded(delta):
    collar = make_collar(delta, 64)
    generator = collar_generator(collar, 2)
    certificate = nonvanishing_radius(generator.U_prime, collar)
    assert certificate.report["certified"]
    assert certificate.r <= 5.0


def test_dbar_solver_converges_and_is_orthogonal():
    report = dbar_check(make_collar(0.1, 64), 2)
    assert report["converges"]
    assert report["kernel_orthogonality"] <= 1e-8
    assert report["hormander"]["within"]
    assert report["pass"]


@pytest.mark.parametrize("m", [8, 16])
def test_hormander_ratio_for_the_peak_frame(m):
    collar = make_collar(0.1, 64)
    grid = DbarGrid.collar_grid(collar, 4097)
    rhs, _, _ = peak_rhs(collar, m, 0.0, grid)
    sol = solve_dbar(rhs, collar, Zero(), k_max=16)
    report = hormander_ratio(sol, Zero(), collar, m)
    assert report["ratio"] <= 2.0 / (m - 1)
    assert report["within"]


@pytest.mark.parametrize("fraction", [0.0, 0.9])
def test_peak_section_beats_the_partial_estimate_profile(fraction):
    collar = make_collar(0.1, 64)
    rho0 = fraction * (collar.half_width - 4.0)
    section, report = peak_section(collar, 16, rho0)
    assert report["above_profile"]
    assert report["dbar_residual"] <= 1e-2
    assert 1e-3 <= report["ratio_to_bergman"] <= 1.0 + 1e-9
    assert report["pass"]
    assert section.power == 16


def test_corona_decomposition_of_random_sections():
    collar = make_collar(0.05, 64)
    family = build_family(collar, 2, [1, -1])
    multipliers = wolff_multipliers(family, collar, 6)
    assert all(v <= 1e-6 for v in multipliers.holomorphy_defects)
    rng = np.random.default_rng(31)
    for _ in range(10):
        S = random_section(rng, range(-16, 17), 6)
        _, report = corona_decompose(S, family, collar, multipliers=multipliers)
        assert report.residual_sup <= 1e-6
        assert report.residual_l2 <= 1e-6
        assert all(r <= 1e-6 for r in report.dbar_residuals)
        assert report.passed


@pytest.mark.parametrize("delta", [EPS1 / 2, 0.1, 1e-4])
def test_collar_geometry_identities(delta):
    collar = make_collar(delta, 0)
    assert delta * math.sinh(collar.half_width) == pytest.approx(EPS1, rel=1e-12)
    assert collar_area(collar) == pytest.approx(2.0 * EPS1, rel=1e-12)
    rho = np.linspace(-collar.half_width, collar.half_width, 257)
    assert np.allclose(np.cos(y_of_rho(rho)) * np.cosh(rho), 1.0, rtol=1e-9)


def test_peak_weight_is_harmonic_with_a_bounded_gap():
    collar = make_collar(0.1, 64)
    spec = CollarPeak(rho0=0.0)
    report = weight_certificate(collar, spec)
    assert math.isfinite(report["lower_gap"])
    theta0 = collar.delta / 2

    def laplacian(h):
        return float(phi3_flat(collar, spec, theta0 + h, 0.0) + phi3_flat(collar, spec, theta0 - h, 0.0)
                     + phi3_flat(collar, spec, theta0, h) + phi3_flat(collar, spec, theta0, -h)
                     - 4.0 * phi3_flat(collar, spec, theta0, 0.0)) / h ** 2

    assert 3.5 <= laplacian(1e-3) / laplacian(5e-4) <= 4.5
