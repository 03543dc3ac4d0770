import math

import numpy as np
import pytest
from pydantic import TypeAdapter

from collar_geometry import CollarPoint, make_collar
from errors import DomainError, SingularityError
from settings import Settings
from weights import (
    CollarPeak,
    ThickLog,
    WeightSpec,
    Zero,
    alpha_of,
    collar_weight,
    collar_weight_grid,
    diverges_at_center,
    grad_phi_components,
    inj_radius_bounds_check,
    lemma_bounds,
    phi3,
    phi3_flat,
    phi3_grid,
    phi_components_grid,
    thick_weight,
    weight_certificate,
    weight_grid,
)


def test_alpha_of():
    assert alpha_of(0.0) == 0.5
    assert alpha_of(-50.0) < 1e-20
    assert alpha_of(1.0) + alpha_of(-1.0) == pytest.approx(1.0, rel=1e-14)
    values = [alpha_of(r) for r in np.linspace(-3.0, 3.0, 13)]
    assert all(a < b for a, b in zip(values, values[1:]))


def test_weight_spec_union_dispatches_on_kind():
    adapter = TypeAdapter(WeightSpec)
    assert isinstance(adapter.validate_python({"kind": "zero"}), Zero)
    assert isinstance(adapter.validate_python({"kind": "collar_peak", "rho0": 0.1}), CollarPeak)
    assert adapter.validate_python({"kind": "thick_log", "eps2": 0.05}).eps2 == 0.05
    with pytest.raises(ValueError):
        ThickLog(eps2=0.0)


def test_phi3_half_period_point(collar_01):
    spec = CollarPeak(rho0=0.0)
    phi1, _ = phi_components_grid(collar_01, spec, 0.0, collar_01.delta / 2)
    assert float(phi1) == pytest.approx(math.log(2.0), abs=1e-12)
    assert np.isfinite(phi3(collar_01, spec, CollarPoint(rho=1.0, theta=0.02)))


def test_phi3_rejects_its_singular_points(collar_01):
    spec = CollarPeak(rho0=0.0)
    with pytest.raises(SingularityError):
        phi3(collar_01, spec, CollarPoint(rho=0.0, theta=0.0))
    with pytest.raises(SingularityError):
        phi3(collar_01, spec, CollarPoint(rho=collar_01.half_width - 1.0, theta=0.0))


def test_peak_weight_domain(collar_01):
    with pytest.raises(DomainError):
        weight_grid(collar_01, CollarPeak(rho0=1.0), 0.5, 0.01)
    with pytest.raises(DomainError):
        weight_grid(make_collar(0.5, 4), CollarPeak(rho0=0.0), 0.5, 0.01)


def test_alpha_supplied_externally_matches(collar_01):
    spec = CollarPeak(rho0=0.1)
    rho = np.linspace(-2.0, 2.0, 9)
    theta = np.full(9, 0.037)
    computed = phi3_grid(collar_01, spec, rho, theta)
    supplied = phi3_grid(collar_01, spec, rho, theta, alpha=alpha_of(0.1))
    assert np.array_equal(computed, supplied)


def test_phi3_is_harmonic_in_the_flat_chart(collar_01):
    spec = CollarPeak(rho0=0.0)
    theta0, y0 = collar_01.delta / 2, 0.0

    def laplacian(h):
        return float(phi3_flat(collar_01, spec, theta0 + h, y0) + phi3_flat(collar_01, spec, theta0 - h, y0)
                     + phi3_flat(collar_01, spec, theta0, y0 + h) + phi3_flat(collar_01, spec, theta0, y0 - h)
                     - 4.0 * phi3_flat(collar_01, spec, theta0, y0)) / h ** 2

    coarse, fine = laplacian(1e-3), laplacian(5e-4)
    assert 3.5 <= coarse / fine <= 4.5


def test_glued_weight_support(collar_01):
    spec = CollarPeak(rho0=0.0)
    R = collar_01.half_width
    theta = np.linspace(0.001, 0.099, 17)
    assert np.all(collar_weight_grid(collar_01, spec, R - 1.5, theta) == 0.0)
    assert np.all(collar_weight_grid(collar_01, spec, -(R - 2.0), theta) == 0.0)
    inner = collar_weight_grid(collar_01, spec, 0.8, theta)
    assert np.allclose(inner, 2.0 * phi3_grid(collar_01, spec, 0.8, theta), rtol=1e-14, atol=0)


def test_negative_rho0_reflects(collar_01):
    rho = np.linspace(-2.0, 2.0, 9)
    theta = np.full(9, 0.023)
    left = weight_grid(collar_01, CollarPeak(rho0=-0.2), -rho, theta)
    right = weight_grid(collar_01, CollarPeak(rho0=0.2), rho, theta)
    assert np.allclose(left, right, rtol=1e-14, atol=1e-14)


def test_weight_has_a_two_log_singularity(collar_01):
    spec = CollarPeak(rho0=0.0)
    near = collar_weight(collar_01, spec, CollarPoint(rho=0.0, theta=1e-4))
    nearer = collar_weight(collar_01, spec, CollarPoint(rho=0.0, theta=1e-5))
    assert near - nearer == pytest.approx(2.0 * math.log(10.0), abs=1e-3)
    assert diverges_at_center(spec)
    assert not diverges_at_center(Zero())


def test_gradient_closed_form_matches_finite_differences(collar_01):
    spec = CollarPeak(rho0=0.0)
    rho, theta, h = -0.02, 0.01, 1e-5
    grad1, grad2 = grad_phi_components(collar_01, spec, CollarPoint(rho=rho, theta=theta))

    def components(r, t):
        return phi_components_grid(collar_01, spec, r, t)

    d_rho = [(float(a) - float(b)) / (2 * h) for a, b in zip(components(rho + h, theta), components(rho - h, theta))]
    d_theta = [(float(a) - float(b)) / (2 * h) for a, b in zip(components(rho, theta + h), components(rho, theta - h))]
    fd = [math.hypot(dr, dt / math.cosh(rho)) for dr, dt in zip(d_rho, d_theta)]
    assert grad1 == pytest.approx(fd[0], rel=1e-5)
    assert grad2 == pytest.approx(fd[1], rel=1e-5)

    # far from w0 the gradient of phi1 tends to the gradient of log|w|
    far = grad_phi_components(collar_01, spec, CollarPoint(rho=-2.0, theta=0.0))[0]
    assert far == pytest.approx(2.0 * math.pi / (collar_01.delta * math.cosh(2.0)), rel=1e-6)
    a = grad_phi_components(collar_01, spec, CollarPoint(rho=1.0, theta=0.03))[1]
    b = grad_phi_components(collar_01, spec, CollarPoint(rho=1.0, theta=collar_01.delta - 0.03))[1]
    assert a == pytest.approx(b, rel=1e-12)


def test_thick_weight():
    spec = ThickLog()
    eps2 = spec.eps2
    assert thick_weight(spec, eps2) == 0.0
    assert thick_weight(spec, 2.0 * eps2) == 0.0
    assert thick_weight(spec, eps2 / 2) == pytest.approx(2.0 * math.log(0.5))
    assert thick_weight(spec, 0.75 * eps2) == pytest.approx(math.log(0.75))
    assert thick_weight(spec, 0.0) == -math.inf
    d = np.linspace(1e-6, 2.0 * eps2, 500)
    assert np.all(thick_weight(spec, d) <= 0.0)
    with pytest.raises(DomainError):
        thick_weight(spec, -1.0)


def test_zero_weight_certificate(collar_01):
    report = weight_certificate(collar_01, Zero())
    assert report["sup_phi"] == 0.0
    assert report["lower_gap"] == 0.0
    assert report["curvature_floor"] == 0.0
    assert report["diverges_at_x0"] is False
    assert report["pass"]


def test_thick_weight_certificate(collar_01):
    report = weight_certificate(collar_01, ThickLog())
    assert report["sup_phi"] == 0.0
    assert report["diverges_at_x0"] is True
    assert report["curvature_floor"] >= 0.0
    assert np.isfinite(report["curvature_floor"])


def test_collar_peak_certificate_reports_constants(collar_01):
    report = weight_certificate(collar_01, CollarPeak(rho0=0.0))
    for key in ("sup_phi", "lower_gap", "curvature_floor", "band_gradient_sup"):
        assert np.isfinite(report[key])
        assert report[key] >= 0.0
    assert report["diverges_at_x0"] is True
    assert report["inj_radius_x0"] == pytest.approx(0.05)
    strict = weight_certificate(collar_01, CollarPeak(rho0=0.0), settings=Settings(sup_ceiling=1e-12,
                                                                                   lower_gap_ceiling=1e-12,
                                                                                   curvature_ceiling=1e-12))
    assert strict["pass"] is (strict["sup_phi"] <= 1e-12 and strict["lower_gap"] <= 1e-12
                              and strict["curvature_floor"] <= 1e-12)


def test_lemma_bounds(collar_01):
    settings = Settings()
    report = lemma_bounds(collar_01, CollarPeak(rho0=0.0), settings=settings)
    closed = 4.0 * math.pi / settings.eps3 + math.log(2.0) - math.log(1.0 - math.exp(-2.0 * math.pi / settings.eps4))
    assert report["c9_closed_form"] == pytest.approx(closed, rel=1e-12)
    assert report["c9_empirical_finite"]
    assert report["c9_empirical"] <= report["c9_closed_form"]
    assert report["lower_gap"] >= 0.0


def test_inj_radius_bounds_check(collar_01):
    report = inj_radius_bounds_check(collar_01)
    assert report["holds"]
    assert report["min_ratio"] == pytest.approx(0.5)
    assert report["max_ratio"] == pytest.approx(0.5)
    assert report["clamped_min_ratio"] <= 0.5
