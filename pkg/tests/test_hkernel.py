import math

import mpmath
import numpy as np
import pytest
from scipy import special

from fracbound.hkernel import (
    HEvaluator,
    InversionMethod,
    Route,
    eigen_residual,
    h_dt_bound_check,
    h_eval,
    h_grid,
    kochubei_integral,
    mittag_leffler,
    route_agreement,
    stehfest,
    stehfest_coefficients,
    talbot,
)
from fracbound.mixing import DensityComponent, MixingMeasure
from fracbound.tools import (
    CheckStatus,
    DomainError,
    QuadratureError,
    Tolerances,
    UnsupportedCaseError,
)

HALF = MixingMeasure.from_scales([(0.5, 1.0)])
DENSITY = MixingMeasure(density=DensityComponent.constant(0.25, 0.75, 2.0))


def ml_oracle(beta: float, z: float) -> float:
    with mpmath.workdps(60):
        total = mpmath.mpf(0)
        for k in range(400):
            total += mpmath.mpf(z) ** k / mpmath.gamma(beta * k + 1)
        return float(total)


def test_mittag_leffler_half_order() -> None:
    # E_{1/2}(-x) = exp(x^2) erfc(x)
    assert mittag_leffler(0.5, -1.0) == pytest.approx(
        0.42758357615580705, rel=1e-13
    )
    for x in (0.5, 3.0, 10.0):
        assert mittag_leffler(0.5, -x) == pytest.approx(
            special.erfcx(x), rel=1e-8
        )


@pytest.mark.parametrize("beta", [0.3, 0.7])
@pytest.mark.parametrize("z", [-0.2, -0.9, -1.5, -2.0])
def test_mittag_leffler_against_series(beta: float, z: float) -> None:
    assert mittag_leffler(beta, z) == pytest.approx(
        ml_oracle(beta, z), rel=1e-7, abs=1e-10
    )


def test_mittag_leffler_edges() -> None:
    assert mittag_leffler(0.4, 0.0) == 1.0
    assert mittag_leffler(1.0, -2.0) == pytest.approx(math.exp(-2.0))
    with pytest.raises(DomainError):
        mittag_leffler(0.0, -1.0)
    with pytest.raises(DomainError):
        mittag_leffler(1.5, -1.0)
    with pytest.raises(DomainError):
        mittag_leffler(0.5, 1.0)


def test_inversion_of_known_transforms() -> None:
    times = [0.5, 1.0, 3.0]
    expected = np.exp(-np.array(times))
    assert talbot(lambda s: 1 / (s + 1), times) == pytest.approx(
        expected, abs=1e-9
    )
    assert stehfest(lambda s: 1 / s, times) == pytest.approx(
        np.ones(3), rel=1e-8
    )
    assert sum(stehfest_coefficients(14)) == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(DomainError):
        stehfest_coefficients(7)
    with pytest.raises(DomainError):
        talbot(lambda s: 1 / s, [0.0])


def test_single_atom_uses_mittag_leffler() -> None:
    ev = HEvaluator(HALF)
    assert ev.get_route() == Route.MITTAG_LEFFLER
    assert ev.h(1.0, 1.0) == pytest.approx(0.42758357615580705, rel=1e-12)
    assert h_eval(ev, 1.0, 1.0) == ev.h(1.0, 1.0)
    assert h_grid(ev, [0.0, 1.0], 1.0)[1] == ev.h(1.0, 1.0)
    report = ev.get_probe_report()
    assert report is not None
    assert report.status == CheckStatus.PASSED


def test_mittag_leffler_and_laplace_routes_agree() -> None:
    ml = HEvaluator(HALF, Route.MITTAG_LEFFLER)
    laplace = HEvaluator(HALF, Route.LAPLACE)
    report = route_agreement(ml, laplace, [0.1, 1.0, 5.0], [0.5, 4.0], 1e-7)
    assert report.passed()
    assert ml.get_probe_report() is None


def test_kochubei_and_laplace_routes_agree() -> None:
    kochubei = HEvaluator(DENSITY, Route.KOCHUBEI)
    laplace = HEvaluator(DENSITY, Route.LAPLACE)
    report = route_agreement(
        kochubei, laplace, [0.1, 1.0, 10.0], [0.5, 5.0, 25.0], 1e-6
    )
    assert report.passed(), report
    value, error, route = kochubei_integral(DENSITY, 1.0, 1.0)
    assert 0 < value < 1
    assert error < 1e-8
    assert route == Route.KOCHUBEI


def test_stehfest_cross_check() -> None:
    m = MixingMeasure.from_scales([(0.3, 1.0), (0.7, 0.5)])
    talbot_ev = HEvaluator(m, Route.LAPLACE)
    stehfest_ev = HEvaluator(
        m, Route.LAPLACE, inversion=InversionMethod.STEHFEST
    )
    assert stehfest_ev.describe() == "laplace-inversion/stehfest"
    difference = np.abs(
        talbot_ev.h_array([0.5, 1.0, 2.0], [1.0])
        - stehfest_ev.h_array([0.5, 1.0, 2.0], [1.0])
    )
    assert np.max(difference) < 5e-3


def test_h_at_origin_and_shape() -> None:
    ev = HEvaluator(HALF, probe=False)
    assert ev.h(0.0, 7.0) == 1.0
    assert ev.h(3.0, 0.0) == 1.0
    table = ev.h_array([0.0, 0.5, 1.0, 2.0], [1.0, 4.0])
    assert table.shape == (2, 4)
    assert np.all(np.diff(table, axis=1) < 0)
    assert np.all(table[1, 1:] < table[0, 1:])
    with pytest.raises(DomainError):
        ev.h(-1.0, 1.0)
    with pytest.raises(DomainError):
        ev.h(1.0, -1.0)


def test_unsupported_routes() -> None:
    two = MixingMeasure.from_scales([(0.3, 1.0), (0.7, 1.0)])
    with pytest.raises(UnsupportedCaseError):
        HEvaluator(two, Route.MITTAG_LEFFLER)
    with pytest.raises(UnsupportedCaseError):
        HEvaluator(HALF, Route.KOCHUBEI)
    with pytest.raises(UnsupportedCaseError):
        kochubei_integral(two, 1.0, 1.0)
    assert HEvaluator(two, probe=False).get_route() == Route.LAPLACE


def test_eigen_residual() -> None:
    ev = HEvaluator(HALF, probe=False)
    report = eigen_residual(ev, 1.0, 1.0, 1000, 0.5)
    assert report.passed(), report
    assert report.values["lhs"] < 1e-3
    with pytest.raises(DomainError):
        eigen_residual(ev, 1.0, 1.0, 10, 2.0)
    graded = eigen_residual(ev, 1.0, 1.0, 1000, 0.5, grading=2.0)
    assert graded.passed(), graded
    assert graded.values["dt"] == pytest.approx(1 - 0.999**2)


@pytest.mark.slow
@pytest.mark.parametrize("lam", [1.0, 5.0, 25.0])
def test_eigen_residual_refines_for_density(lam: float) -> None:
    ev = HEvaluator(DENSITY, probe=False)
    coarse = eigen_residual(ev, lam, 2.0, 500, 0.5)
    fine = eigen_residual(ev, lam, 2.0, 1000, 0.5)
    assert fine.passed(), fine
    assert math.log2(coarse.values["lhs"] / fine.values["lhs"]) >= 1.2


def test_derivative_bound() -> None:
    ev = HEvaluator(HALF, probe=False)
    for t in (0.1, 1.0, 2.0):
        assert h_dt_bound_check(ev, t, 1.0).passed()
    assert h_dt_bound_check(ev, 1.0, 0.0).passed()
    assert ev.dt(1.0, 1.0) < 0
    with pytest.raises(DomainError):
        h_dt_bound_check(ev, 0.0, 1.0)


def test_derivative_bound_for_density() -> None:
    ev = HEvaluator(DENSITY, probe=False)
    for t in (0.25, 0.5, 1.0, 2.0):
        for lam in (0.5, 1.0, 5.0, 10.0, 25.0):
            report = h_dt_bound_check(ev, t, lam)
            assert report.passed(), report


@pytest.mark.filterwarnings("error::scipy.integrate.IntegrationWarning")
def test_kochubei_integral_reports_quadrature_trouble() -> None:
    value, error, _ = kochubei_integral(DENSITY, 0.5, 5.0)
    assert 0 < value < 1
    assert error < 1e-8
    starved = Tolerances(quad_abs=1e-15, quad_rel=1e-15, quad_limit=1)
    with pytest.raises(QuadratureError):
        kochubei_integral(DENSITY, 0.5, 5.0, starved)


def test_laplace_route_against_high_precision_inversion() -> None:
    m = MixingMeasure.from_scales([(0.3, 1.0), (0.7, 0.5)])
    ev = HEvaluator(m, Route.LAPLACE)

    def transform(s: mpmath.mpf) -> mpmath.mpf:
        psi = s**0.3 + mpmath.mpf(0.5) ** 0.7 * s**0.7
        return psi / (s * (2 + psi))

    with mpmath.workdps(30):
        for t in (0.2, 1.0, 4.0):
            expected = float(
                mpmath.invertlaplace(transform, t, method="talbot")
            )
            assert ev.h(t, 2.0) == pytest.approx(expected, abs=1e-7)
