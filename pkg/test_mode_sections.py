import math

import numpy as np
import pytest

from collar_geometry import counterexample_rho0, make_collar, make_point
from errors import AccuracyError, AliasingError, DomainError, OverflowModeError, SectionTypeError
from mode_sections import (
    ModeSection,
    QuadratureSpec,
    boundary_round_trip,
    contract,
    decompose_boundary,
    eval_f,
    eval_f_grid,
    fourier_boundary,
    l2_inner,
    l2_sq_norm,
    log_abs_f_grid,
    log_l2_sq_norm,
    log_mode_integral,
    log_mode_weight,
    monomial,
    multiply,
    pointwise_sq_norm,
    propagate_mode,
    random_section,
    safe_band,
    tail_magnitude,
)
from settings import Settings


def test_eval_f(collar_01):
    one = monomial(0, 2)
    assert eval_f(one, collar_01, make_point(collar_01, 1.3, 0.07)) == 1.0
    w = monomial(1, 2)
    assert eval_f(w, collar_01, make_point(collar_01, 0.0, 0.05)) == pytest.approx(-1.0)
    at_edge = eval_f(w, collar_01, make_point(collar_01, collar_01.half_width, 0.0))
    assert math.log(abs(at_edge)) == pytest.approx(-96.9403, abs=1e-3)


def test_eval_f_names_overflowing_mode(collar_01):
    section = ModeSection(power=2, coeffs={1: 1.0, 16: 1.0})
    with pytest.raises(OverflowModeError) as info:
        eval_f(section, collar_01, make_point(collar_01, -collar_01.half_width))
    assert info.value.k == 16
    # the log-space evaluation stays finite where the direct one overflows
    value = log_abs_f_grid(section, collar_01, -collar_01.half_width, 0.0)
    assert np.isfinite(value)
    assert value == pytest.approx(16 * 96.9403, rel=1e-5)


def test_log_abs_f_matches_direct_evaluation(collar_01, rng):
    section = random_section(rng, range(-3, 4), 2)
    rho = np.linspace(-2.0, 2.0, 21)
    theta = np.linspace(0.0, 0.1, 7)[:, None]
    direct = np.log(np.abs(eval_f_grid(section, collar_01, rho, theta)))
    assert np.allclose(log_abs_f_grid(section, collar_01, rho, theta), direct, rtol=1e-10, atol=1e-10)


def test_pointwise_sq_norm(collar_01):
    assert pointwise_sq_norm(monomial(0, 1), collar_01, make_point(collar_01, 0.0)) == 1.0
    rho0 = counterexample_rho0(collar_01)
    assert pointwise_sq_norm(monomial(0, 2), collar_01, make_point(collar_01, rho0)) == pytest.approx(7.8125e-4, rel=1e-10)
    p = make_point(collar_01, 0.4, 0.03)
    section = ModeSection(power=3, coeffs={-1: 0.5, 2: 1j})
    assert pointwise_sq_norm(section.scaled(2.0), collar_01, p) == pytest.approx(4.0 * pointwise_sq_norm(section, collar_01, p))


def test_l2_inner_modes_are_orthogonal(collar_01):
    assert l2_inner(monomial(1, 2), monomial(0, 2), collar_01) == 0
    assert l2_inner(monomial(-2, 3), monomial(2, 3), collar_01) == 0


def test_l2_norm_of_constant_section(collar_01):
    y_max = collar_01.y_max
    expected = collar_01.delta * (y_max + 0.5 * math.sin(2.0 * y_max))
    assert l2_sq_norm(monomial(0, 2), collar_01) == pytest.approx(expected, rel=1e-9)
    assert expected == pytest.approx(0.157078, abs=1e-6)


def test_l2_inner_is_hermitian(collar_01, rng):
    a = random_section(rng, range(-3, 4), 2)
    b = random_section(rng, range(-3, 4), 2)
    ab = l2_inner(a, b, collar_01)
    ba = l2_inner(b, a, collar_01)
    assert ab == pytest.approx(ba.conjugate(), rel=1e-12)
    assert l2_sq_norm(a, collar_01) > 0
    assert math.log(l2_sq_norm(a, collar_01)) == pytest.approx(log_l2_sq_norm(a, collar_01), rel=1e-12)
    with pytest.raises(SectionTypeError):
        l2_inner(a, monomial(0, 3), collar_01)


def test_l2_inner_on_a_subrange(collar_01):
    R = collar_01.half_width
    whole = l2_sq_norm(monomial(0, 2), collar_01)
    left = l2_sq_norm(monomial(0, 2), collar_01, -R, 0.0)
    assert left == pytest.approx(0.5 * whole, rel=1e-9)
    with pytest.raises(DomainError):
        l2_sq_norm(monomial(0, 2), collar_01, -R - 1.0, 0.0)


def test_quadrature_reports_non_convergence():
    with pytest.raises(AccuracyError) as info:
        log_mode_integral(0.1, 3, 2, -1.5, 1.5, 8, 1e-14, 1)
    assert len(info.value.estimates) == 2


@pytest.mark.parametrize("delta", [0.001, 0.0005])
def test_mode_weights_on_thin_collars(delta):
    collar = make_collar(delta, 64)
    R = collar.half_width
    logs = {k: log_mode_weight(collar, k, 2, -R, R) for k in range(-64, 65)}
    assert all(math.isfinite(v) for v in logs.values())
    for k in range(1, 65):
        assert logs[k] == pytest.approx(logs[-k], rel=1e-9)

    # the top mode lives within 1/a of the rim, where cos(y) = c + s*t to second order
    a = 4.0 * math.pi * 64 / delta
    c, s = 1.0 / math.cosh(R), math.tanh(R)
    expected = math.log(delta) + a * collar.y_max + math.log(c * c / a + 2 * c * s / a ** 2 + 2 * s * s / a ** 3)
    assert logs[64] == pytest.approx(expected, abs=1e-7)


def test_quadrature_spec_from_settings():
    q = QuadratureSpec.from_settings(Settings(panels=32, rel_tol=1e-8))
    assert (q.panels, q.rel_tol) == (32, 1e-8)


def test_propagate_mode(collar_01):
    R = collar_01.half_width
    assert propagate_mode(collar_01, 0, -R, R).log_modulus == 0.0
    assert propagate_mode(collar_01, 5, 1.2, 1.2).log_modulus == 0.0
    assert propagate_mode(collar_01, 1, 0.0, R).log_modulus == pytest.approx(-96.9403, abs=1e-3)
    ab = propagate_mode(collar_01, 3, -1.0, 0.5)
    bc = propagate_mode(collar_01, 3, 0.5, 2.0)
    ac = propagate_mode(collar_01, 3, -1.0, 2.0)
    assert (ab * bc).log_modulus == pytest.approx(ac.log_modulus, abs=1e-12 * abs(ac.log_modulus))


def test_decompose_boundary_examples(collar_01):
    g1, g2, g3 = decompose_boundary(collar_01, {}, {0: 1.0}, 0.0, 2)
    assert g2.coeffs == {0: 1.0}
    assert not g1.coeffs and not g3.coeffs

    g1, g2, g3 = decompose_boundary(collar_01, {1: 1.0}, {}, 0.0, 2)
    assert math.log(abs(g1.coeffs[1])) == pytest.approx(-96.9403, abs=1e-3)
    assert not g2.coeffs and not g3.coeffs

    g1, _, g3 = decompose_boundary(collar_01, {1: 1.0, -1: 5.0, 0: 2.0}, {2: 3.0, -2: 1.0}, 1.0, 2)
    assert set(g1.coeffs) == {1}
    assert set(g3.coeffs) == {-2}
    with pytest.raises(DomainError):
        decompose_boundary(collar_01, {}, {}, collar_01.half_width, 2)


def test_boundary_round_trip(collar_01, rng):
    section = random_section(rng, range(-16, 17), 2)
    report = boundary_round_trip(section, collar_01)
    assert report["relative_error"] <= 1e-9
    assert report["k_max"] == 16
    pieces = [ModeSection.from_json(text) for text in report["pieces"]]
    assert all(k >= 1 for k in pieces[0].coeffs)
    assert set(pieces[1].coeffs) <= {0}
    assert all(k <= -1 for k in pieces[2].coeffs)


def test_safe_band_keeps_boundary_values_finite(collar_01):
    band = safe_band(collar_01, 16)
    edge = collar_01.half_width - band
    assert 0.0 < band < collar_01.half_width
    assert 16 * abs(propagate_mode(collar_01, 1, 0.0, -edge).log_modulus) <= 600.0 + 1e-9
    assert safe_band(collar_01, 0) == 0.0


def test_fourier_boundary(collar_01, rng):
    collar = collar_01.with_k_max(16)
    theta = np.arange(64) * collar.delta / 64
    constant = fourier_boundary(np.full(64, 2.5 - 1j), collar)
    assert constant[0] == pytest.approx(2.5 - 1j)
    assert max(abs(c) for k, c in constant.items() if k != 0) <= 1e-15
    wave = fourier_boundary(np.exp(2j * math.pi * theta / collar.delta), collar)
    assert wave[1] == pytest.approx(1.0)

    coeffs = rng.normal(size=33) + 1j * rng.normal(size=33)
    ks = np.arange(-16, 17)
    samples = np.exp(2j * math.pi * np.outer(theta, ks) / collar.delta) @ coeffs
    recovered = fourier_boundary(samples, collar)
    assert max(abs(recovered[int(k)] - c) for k, c in zip(ks, coeffs)) <= 1e-12
    parseval = sum(abs(c) ** 2 for c in recovered.values())
    assert parseval == pytest.approx(np.mean(np.abs(samples) ** 2), rel=1e-12)

    with pytest.raises(AliasingError):
        fourier_boundary(samples[:32], collar)


def test_contract(collar_01):
    p = make_point(collar_01, 0.7, 0.02)
    S = ModeSection(power=2, coeffs={0: 1.0, 1: 0.3j})
    assert contract(S, S, collar_01, p) == pytest.approx(pointwise_sq_norm(S, collar_01, p))
    at_core = contract(monomial(1, 3), monomial(0, 1), collar_01, make_point(collar_01, 0.0, 0.0))
    assert at_core == pytest.approx(1.0)
    assert contract(S.scaled(2j), monomial(0, 1), collar_01, p) == pytest.approx(
        2j * contract(S, monomial(0, 1), collar_01, p))
    with pytest.raises(SectionTypeError):
        contract(monomial(0, 1), monomial(0, 2), collar_01, p)


def test_multiply_and_plus():
    a = ModeSection(power=2, coeffs={0: 1.0, 1: 2.0})
    b = ModeSection(power=3, coeffs={-1: 1.0, 1: 1j})
    product = multiply(a, b)
    assert product.power == 5
    assert product.coeffs == {-1: 1.0, 0: 2.0, 1: 1j, 2: 2j}
    assert a.plus(a.scaled(-1.0)).nonzero() == {}
    with pytest.raises(SectionTypeError):
        a.plus(b)


def test_section_json_exchange(rng):
    section = random_section(rng, [-5, 0, 3], 4)
    text = section.to_json()
    assert '"reference": "core"' in text
    assert ModeSection.from_json(text) == section
    with pytest.raises(DomainError):
        ModeSection.from_json('{"power": 2, "coeffs": [], "reference": "boundary"}')


def test_section_validation():
    with pytest.raises(ValueError):
        ModeSection(power=0, coeffs={0: 1.0})
    with pytest.raises(ValueError):
        ModeSection(power=2, coeffs={0: float("nan")})
    with pytest.raises(DomainError):
        eval_f(monomial(9, 2), make_collar(0.1, 4), make_point(make_collar(0.1, 4), 0.0))


def test_tail_magnitude(collar_01):
    section = ModeSection(power=2, coeffs={0: 1.0, 40: 1e-3, -33: 2e-3, 10: 5.0})
    assert tail_magnitude(section, collar_01) == pytest.approx(2e-3)
    assert tail_magnitude(monomial(0, 2), collar_01) == 0.0
