import math

import numpy as np
import pytest

from collar_geometry import make_collar
from corona import (
    CORONA_CSV_FIELDS,
    GeneratorFamily,
    build_family,
    collar_generator,
    corona_decompose,
    family_from_members,
    nonvanishing_radius,
    orthogonal_decay_check,
    wolff_multipliers,
)
from errors import AliasingError, DecompositionError, DomainError, OverflowModeError
from mode_sections import ModeSection, monomial, random_section


@pytest.fixture(scope="module")
def collar():
    return make_collar(0.05, 64)


@pytest.fixture(scope="module")
def generator(collar):
    return collar_generator(collar, 2)


@pytest.fixture(scope="module")
def family(collar, generator):
    return build_family(collar, 2, [1, -1], generator=generator)


def test_generator_is_a_pure_core_mode(collar, generator):
    report = generator.report
    assert set(generator.U_prime.coeffs) == {0}
    assert report["k0_share"] == 1.0
    assert 0.5 < report["core_norm"] * math.sqrt(collar.delta) <= 1.0
    assert report["fit_residual"] <= 1e-3
    assert generator.u_perp_norm >= 0.0
    with pytest.raises(DomainError):
        collar_generator(make_collar(0.5, 8), 2)
    with pytest.raises(DomainError):
        collar_generator(collar, 0)


def test_nonvanishing_radius(collar, generator):
    certificate = nonvanishing_radius(generator.U_prime, collar)
    assert certificate.r == 2.0
    assert certificate.margin == 1.0
    assert certificate.report["certified"]

    missing = nonvanishing_radius(monomial(1, 2), collar)
    assert missing.r == collar.half_width
    assert not missing.report["certified"]


def test_small_tail_still_certifies(collar):
    section = ModeSection(power=2, coeffs={0: 1.0, 1: 1e-30, -1: 1e-30})
    certificate = nonvanishing_radius(section, collar)
    assert certificate.report["certified"]
    assert 0.0 < certificate.margin < 1.0
    assert certificate.r < collar.half_width


def test_orthogonal_decay_of_a_single_mode(collar):
    fit = orthogonal_decay_check(monomial(1, 2, 1.0), collar, 2)
    assert fit.eps6_hat > 1.0
    assert fit.report["holds"]
    assert fit.report["gradient_fd_error"] < 1e-6
    assert fit.report["violation"] <= 1.05


def test_orthogonal_decay_rejects_bad_sections(collar):
    with pytest.raises(DomainError):
        orthogonal_decay_check(monomial(0, 2), collar, 2)
    with pytest.raises(DomainError):
        orthogonal_decay_check(monomial(1, 3), collar, 2)
    with pytest.raises(DomainError):
        orthogonal_decay_check(ModeSection(power=2, coeffs={}), collar, 2)


def test_family_is_orthogonal(family):
    report = family.report
    assert len(family.members) == 3
    assert report["max_off_diagonal"] <= 1e-12
    assert report["orthonormality_error"] <= 1e-8
    assert report["core_floor_ok"]
    assert report["gamma"] == [[0.0, 0.0], [0.0, 0.0]]
    payload = family.to_dict()
    assert payload["m0"] == 2 and len(payload["members"]) == 3


def test_family_rejects_bad_extra_modes(collar, generator):
    with pytest.raises(DomainError):
        build_family(collar, 2, [0], generator=generator)
    with pytest.raises(DomainError):
        build_family(collar, 2, [1, 1], generator=generator)
    with pytest.raises(DomainError):
        build_family(collar, 2, [65], generator=generator)
    with pytest.raises(OverflowModeError):
        build_family(collar, 2, [4], generator=generator)


@pytest.fixture(scope="module")
def multipliers(collar, family):
    return wolff_multipliers(family, collar, 6, n_y=16385)


def test_multipliers_partition_unity(collar, family, multipliers):
    assert multipliers.power == 4
    assert len(multipliers.coeffs) == 3
    assert multipliers.radius == 2.0
    assert multipliers.report["wolff_modes"] == 2
    assert all(v <= 1e-4 for v in multipliers.holomorphy_defects)
    assert all(r <= 1e-3 for r in multipliers.dbar_residuals)
    assert multipliers.report["partition_error"] <= 3e-4
    total = sum(fitted.get(-k, 0j) * c for fitted, u in zip(multipliers.coeffs, family.members)
                for k, c in u.nonzero().items())
    assert total == pytest.approx(1.0, abs=3e-4)


def test_corona_reconstructs_the_section(collar, family, multipliers):
    rng = np.random.default_rng(7)
    S = random_section(rng, range(-16, 17), 6)
    T, report = corona_decompose(S, family, collar, multipliers=multipliers)
    assert len(T) == 3
    assert all(t.power == 4 for t in T)
    assert report.generators == 3 and report.m == 6 and report.m0 == 2
    assert report.residual_sup <= 3e-4
    assert report.residual_l2 <= 3e-4
    assert report.dbar_residuals == multipliers.dbar_residuals
    assert report.holomorphy_defects == multipliers.holomorphy_defects
    assert report.certified_radius == 2.0
    assert report.wolff_modes == 2
    assert all(math.isfinite(v) for n in report.norms for v in n.values())
    assert all(v is not None and math.isfinite(v) for v in report.b_log_sup)

    T2, _ = corona_decompose(S.scaled(2.0), family, collar, multipliers=multipliers)
    for a, b in zip(T, T2):
        assert b.coeffs == {k: 2.0 * c for k, c in a.coeffs.items()}

    rows = report.csv_rows()
    assert len(rows) == 3
    assert list(rows[0]) == CORONA_CSV_FIELDS
    assert "pass" in report.to_dict()


def test_corona_with_a_multi_mode_member(collar, family):
    U1, V = family.members[0], family.members[1]
    mixed = family_from_members(collar, 2, [U1, V.plus(U1.scaled(1e-4))])
    assert mixed.report["core_floor_ok"]
    rng = np.random.default_rng(11)
    S = random_section(rng, range(-8, 9), 6)
    _, report = corona_decompose(S, mixed, collar, n_y=16385, wolff_theta=16)
    assert report.generators == 2
    assert report.residual_sup <= 3e-4
    assert report.residual_l2 <= 3e-4
    assert all(v <= 1e-4 for v in report.holomorphy_defects)


def test_corona_rejects_bad_input(collar, family, multipliers):
    with pytest.raises(DomainError):
        corona_decompose(monomial(0, 2), family, collar)
    with pytest.raises(DomainError):
        corona_decompose(monomial(0, 4), family, collar)
    with pytest.raises(DomainError):
        corona_decompose(monomial(0, 6), family, collar, n_y=16384)
    with pytest.raises(DomainError):
        corona_decompose(monomial(0, 8), family, collar, multipliers=multipliers)
    with pytest.raises(AliasingError):
        corona_decompose(monomial(0, 6), family, collar, wolff_theta=4)
    with pytest.raises(DomainError):
        family_from_members(collar, 2, [])

    steep = GeneratorFamily(m0=2, members=[ModeSection(power=2, coeffs={0: 1.0, 2: 1e-3})],
                            gram=np.eye(1), orthonormalizer=np.eye(1))
    with pytest.raises(OverflowModeError):
        corona_decompose(monomial(0, 6), steep, collar, n_y=1025)

    no_core = GeneratorFamily(m0=2, members=[monomial(1, 2)], gram=np.eye(1), orthonormalizer=np.eye(1))
    with pytest.raises(DecompositionError):
        corona_decompose(monomial(0, 6), no_core, collar, n_y=1025)


def test_generator_correction_scales_with_delta(generator):
    coarse = collar_generator(make_collar(0.1, 64), 2)
    ratio = coarse.report["u_norm_ratio"] / generator.report["u_norm_ratio"]
    assert 0.25 <= ratio <= 4.0
