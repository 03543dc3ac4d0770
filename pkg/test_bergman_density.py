import math

import numpy as np
import pytest

from bergman_density import (
    COUNTEREXAMPLE_CSV_FIELDS,
    DENSITY_CSV_FIELDS,
    counterexample_report,
    counterexample_sections,
    density,
    density_profile,
    density_report,
    density_scan,
    mode_sq_norm,
    partial_estimate_profile,
    predicted_ratio2,
)
from collar_geometry import CollarPoint, make_collar
from errors import DomainError, OverflowModeError
from mode_sections import l2_inner, pointwise_sq_norm


def test_single_mode_density_is_the_constant_term():
    collar = make_collar(0.1, 0)
    p = CollarPoint(rho=0.8)
    expected = math.cosh(0.8) ** -4 / mode_sq_norm(collar, 0, 2)
    assert density(collar, 2, p) == pytest.approx(expected, rel=1e-12)


def test_density_is_even_in_rho():
    collar = make_collar(0.1, 8)
    for rho in (0.3, 1.7, 3.9):
        assert density(collar, 2, CollarPoint(rho=rho)) == pytest.approx(density(collar, 2, CollarPoint(rho=-rho)), rel=1e-9)


def test_density_profile_rows(collar_01):
    rows = density_profile(collar_01, 2, [-1.0, 0.0, 1.0])
    assert [r.rho for r in rows] == [-1.0, 0.0, 1.0]
    assert all(0 < r.dominant_mode_share <= 1.0 for r in rows)
    assert rows[0].density == pytest.approx(rows[2].density, rel=1e-9)


def test_mode_norm_overflow_is_reported(collar_01):
    with pytest.raises(OverflowModeError):
        mode_sq_norm(collar_01, 8, 2)
    with pytest.raises(DomainError):
        mode_sq_norm(make_collar(0.1, 2), 3, 2)


def test_counterexample_sections_are_orthogonal(collar_01):
    S1, S2, S3 = counterexample_sections(collar_01, 2)
    assert set(S1.coeffs) == {1}
    assert set(S2.coeffs) == {0}
    assert set(S3.coeffs) == {-1}
    for a, b in ((S1, S2), (S1, S3), (S2, S3)):
        assert l2_inner(a, b, collar_01) == 0
    with pytest.raises(DomainError):
        counterexample_sections(collar_01, 2, A={0: 1.0})


def test_counterexample_ratio2_matches_closed_form(collar_01):
    report = counterexample_report(collar_01, 2)
    assert report["ratio2"] == pytest.approx(4.97e-3, rel=2e-3)
    assert report["ratio2_relative_error"] <= 1e-3
    assert report["predicted_ratio2"] == pytest.approx(predicted_ratio2(0.1, 2))
    assert report["mu1"] == pytest.approx(math.pi / 2)
    assert report["ratio1_within_envelope"]
    assert report["ratio3_within_envelope"]
    assert report["combined_within_bound"]
    assert set(COUNTEREXAMPLE_CSV_FIELDS) <= set(report)

    S1, S2, S3 = counterexample_sections(collar_01, 2)
    x0 = CollarPoint(rho=report["rho0"])
    direct = pointwise_sq_norm(S2, collar_01, x0) / l2_inner(S2, S2, collar_01).real
    assert report["ratio2"] == pytest.approx(direct, rel=1e-9)


def test_counterexample_ratios_decay_with_delta():
    r1 = counterexample_report(make_collar(0.1, 4), 2)
    r2 = counterexample_report(make_collar(0.05, 4), 2)
    assert r2["ratio2"] < r1["ratio2"]
    assert r2["log_ratio1"] < r1["log_ratio1"]
    assert r2["log_ratio3"] < r1["log_ratio3"]


def test_partial_estimate_profile():
    value = partial_estimate_profile(4, 1.0, 2.0)
    expected = 2.0 / (2.0 * (1.0 + math.exp(math.pi) / 2.0))
    assert value == pytest.approx(expected, rel=1e-12)
    assert partial_estimate_profile(16, 0.01, 100.0) < 1e-100
    with pytest.raises(DomainError):
        partial_estimate_profile(0, 1.0, 1.0)


def test_density_report_and_csv_row(collar_01):
    report = density_report(collar_01, 2, n_rows=5)
    assert len(report.rows) == 5
    assert report.error is None
    assert report.at_x0 > 0
    row = report.csv_row()
    assert list(row) == DENSITY_CSV_FIELDS
    assert row["density_x0"] == report.at_x0


def test_density_scan_keeps_going_after_a_bad_delta():
    reports = density_scan([0.1, 5.0, 0.05], 2, 4)
    assert [r.delta for r in reports] == [0.1, 5.0, 0.05]
    assert reports[0].error is None and reports[2].error is None
    assert "outside" in reports[1].error
    assert reports[1].rows == []


def test_density_at_x0_tracks_the_constant_mode():
    for delta in (0.05, 0.02):
        collar = make_collar(delta, 64)
        report = counterexample_report(collar, 2)
        x0 = CollarPoint(rho=report["rho0"])
        constant_term = math.cosh(report["rho0"]) ** -4 / mode_sq_norm(collar, 0, 2)
        assert density(collar, 2, x0) == pytest.approx(constant_term, rel=0.05)
        assert np.isfinite(density(collar, 2, x0))


@pytest.mark.parametrize("delta", [0.05, 0.02])
def test_constant_mode_dominates_at_x0(delta):
    report = counterexample_report(make_collar(delta, 16), 2)
    assert report["ratio1"] <= report["ratio2"]
    assert report["ratio3"] <= report["ratio2"]
    assert report["log_ratio1"] < report["log_ratio2"]
    assert report["log_ratio3"] < report["log_ratio2"]


def test_density_grows_with_the_truncation_order():
    for rho in (0.0, -2.0, 3.5):
        values = [density(make_collar(0.1, k), 2, CollarPoint(rho=rho)) for k in range(0, 9)]
        assert all(b >= a * (1.0 - 1e-13) for a, b in zip(values, values[1:]))
        if abs(rho) > 3.0:
            assert values[-1] > values[0]


def test_density_scan_on_a_thin_collar():
    report = density_scan([0.001], 2, 64)[0]
    assert report.error is None
    assert report.at_x0 > 0 and math.isfinite(report.at_x0)
    assert all(math.isfinite(r.density) for r in report.rows)
